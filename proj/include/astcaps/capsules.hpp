// Copyright 2026 The astcaps Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "astcaps/graph.hpp"
#include "astcaps/params.hpp"
#include "astcaps/rng.hpp"

namespace astcaps {

/// Per-pair capsule transform weights W[i][j]: [P x J x d_out x d_in],
/// initialized from uniform(-0.05, 0.05).
NodeId register_capsule_weights(Graph& g, const std::string& name,
                                std::int64_t p, std::int64_t j,
                                std::int64_t d_out, std::int64_t d_in,
                                ParamStore& store);

/// Prediction vectors: for every input capsule i and output capsule j,
/// W[i][j] * caps[i]. [P x d_in] -> [P x J x d_out].
NodeId predict_vectors(Graph& g, NodeId capsules, NodeId weights);

/// Defaults for the relationship layer between adjacent capsules.
struct RelationshipOptions {
  std::int64_t max_capsules = 32;  // capsules considered, first min(P, this)
  double lift_eps = 1.0;           // diagonal added by the outer-product lift
  double ridge_lambda = 1e-6;      // ridge term of the least-squares solve
};

/// Lifts a capsule vector u[d] to the square matrix u u^T + eps I.
/// The lift keeps the solve well-posed on rank-one data; a unit diagonal
/// bounds the transfer matrices by O(|u_i|^2 + 1), so the flattened
/// features stay at a scale a softmax head can digest.
Tensor relationship_lift(const Tensor& u, double eps);

/// Least-squares transfer matrix: R minimizing ||R b - a||_F^2 + lambda
/// ||R||_F^2 over d x d matrices, computed through the ridge normal
/// equations (b b^T + lambda I) R^T-ready system. a, b are d x d.
Tensor relationship_solve(const Tensor& a, const Tensor& b, double lambda);

/// Relationship matrices between adjacent capsules: for the first
/// min(P, max_capsules) rows of `capsules` [P x d], lifts each row and
/// solves R_i G_{i+1} ~= G_i. Returns the matrices and their row-major
/// concatenation (the classifier-head feature vector).
struct RelationshipSet {
  std::vector<Tensor> matrices;  // each d x d
  Tensor features;               // [count * d * d]
};
RelationshipSet relationship_matrices(const Tensor& capsules,
                                      const RelationshipOptions& opts);

/// Solves the dense system m x = rhs (m is n x n, rhs n x k) by Gaussian
/// elimination with partial pivoting. Throws NumericError on a vanishing
/// pivot.
Tensor solve_linear(const Tensor& m, const Tensor& rhs);

}  // namespace astcaps
