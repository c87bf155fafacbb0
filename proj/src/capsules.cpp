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

#include "astcaps/capsules.hpp"

#include <algorithm>
#include <cmath>

#include "astcaps/errors.hpp"

namespace astcaps {

NodeId register_capsule_weights(Graph& g, const std::string& name,
                                std::int64_t p, std::int64_t j,
                                std::int64_t d_out, std::int64_t d_in,
                                ParamStore& store) {
  if (p <= 0 || j <= 0 || d_out <= 0 || d_in <= 0) {
    throw ShapeError("capsule weight dimensions must be positive");
  }
  return g.parameter(name, store.uniform(name, {p, j, d_out, d_in}, 0.05));
}

NodeId predict_vectors(Graph& g, NodeId capsules, NodeId weights) {
  return g.caps_predict(capsules, weights);
}

Tensor relationship_lift(const Tensor& u, double eps) {
  if (u.rank() != 1) {
    throw ShapeError("lift expects a capsule vector, got " +
                     shape_to_string(u.shape()));
  }
  const std::int64_t d = u.dim(0);
  Tensor out = Tensor::zeros({d, d});
  for (std::int64_t i = 0; i < d; ++i) {
    for (std::int64_t j = 0; j < d; ++j) out.at(i, j) = u[i] * u[j];
    out.at(i, i) += eps;
  }
  return out;
}

Tensor solve_linear(const Tensor& m, const Tensor& rhs) {
  if (m.rank() != 2 || m.dim(0) != m.dim(1)) {
    throw ShapeError("solve expects a square matrix, got " +
                     shape_to_string(m.shape()));
  }
  if (rhs.rank() != 2 || rhs.dim(0) != m.dim(0)) {
    throw ShapeError("solve: right-hand side " + shape_to_string(rhs.shape()) +
                     " does not match matrix " + shape_to_string(m.shape()));
  }
  const std::int64_t n = m.dim(0);
  const std::int64_t k = rhs.dim(1);
  Tensor a = m;
  Tensor x = rhs;
  for (std::int64_t col = 0; col < n; ++col) {
    std::int64_t pivot = col;
    for (std::int64_t r = col + 1; r < n; ++r) {
      if (std::abs(a.at(r, col)) > std::abs(a.at(pivot, col))) pivot = r;
    }
    if (a.at(pivot, col) == 0.0) {
      throw NumericError("singular system in least-squares solve");
    }
    if (pivot != col) {
      for (std::int64_t c = 0; c < n; ++c) {
        std::swap(a.at(col, c), a.at(pivot, c));
      }
      for (std::int64_t c = 0; c < k; ++c) {
        std::swap(x.at(col, c), x.at(pivot, c));
      }
    }
    const double inv = 1.0 / a.at(col, col);
    for (std::int64_t r = col + 1; r < n; ++r) {
      const double factor = a.at(r, col) * inv;
      if (factor == 0.0) continue;
      for (std::int64_t c = col; c < n; ++c) {
        a.at(r, c) -= factor * a.at(col, c);
      }
      for (std::int64_t c = 0; c < k; ++c) {
        x.at(r, c) -= factor * x.at(col, c);
      }
    }
  }
  for (std::int64_t col = n - 1; col >= 0; --col) {
    const double inv = 1.0 / a.at(col, col);
    for (std::int64_t c = 0; c < k; ++c) {
      double acc = x.at(col, c);
      for (std::int64_t r = col + 1; r < n; ++r) {
        acc -= a.at(col, r) * x.at(r, c);
      }
      x.at(col, c) = acc * inv;
    }
  }
  return x;
}

Tensor relationship_solve(const Tensor& a, const Tensor& b, double lambda) {
  if (a.rank() != 2 || b.rank() != 2 || !a.same_shape(b) ||
      a.dim(0) != a.dim(1)) {
    throw ShapeError("relationship solve expects two equal square matrices");
  }
  const std::int64_t d = a.dim(0);
  // Normal equations of min_R ||R b - a||^2 + lambda ||R||^2:
  //   R (b b^T + lambda I) = a b^T, solved row by row via the transposed
  //   symmetric system (b b^T + lambda I) R^T = b a^T.
  Tensor m = Tensor::zeros({d, d});
  for (std::int64_t i = 0; i < d; ++i) {
    for (std::int64_t j = 0; j < d; ++j) {
      double acc = 0.0;
      for (std::int64_t l = 0; l < d; ++l) acc += b.at(i, l) * b.at(j, l);
      m.at(i, j) = acc;
    }
    m.at(i, i) += lambda;
  }
  Tensor rhs = Tensor::zeros({d, d});
  for (std::int64_t i = 0; i < d; ++i) {
    for (std::int64_t j = 0; j < d; ++j) {
      double acc = 0.0;
      for (std::int64_t l = 0; l < d; ++l) acc += b.at(i, l) * a.at(j, l);
      rhs.at(i, j) = acc;
    }
  }
  const Tensor rt = solve_linear(m, rhs);
  Tensor r = Tensor::zeros({d, d});
  for (std::int64_t i = 0; i < d; ++i) {
    for (std::int64_t j = 0; j < d; ++j) r.at(i, j) = rt.at(j, i);
  }
  return r;
}

RelationshipSet relationship_matrices(const Tensor& capsules,
                                      const RelationshipOptions& opts) {
  if (capsules.rank() != 2 || capsules.dim(0) < 2) {
    throw ShapeError("relationship layer needs at least two capsules, got " +
                     shape_to_string(capsules.shape()));
  }
  const std::int64_t d = capsules.dim(1);
  const std::int64_t used = std::min(capsules.dim(0), opts.max_capsules);
  RelationshipSet set;
  std::vector<Tensor> lifted;
  lifted.reserve(static_cast<std::size_t>(used));
  for (std::int64_t i = 0; i < used; ++i) {
    Tensor row = Tensor::zeros({d});
    for (std::int64_t a = 0; a < d; ++a) row[a] = capsules.at(i, a);
    lifted.push_back(relationship_lift(row, opts.lift_eps));
  }
  std::vector<double> feat;
  feat.reserve(static_cast<std::size_t>((used - 1) * d * d));
  for (std::int64_t i = 0; i + 1 < used; ++i) {
    Tensor r = relationship_solve(lifted[static_cast<std::size_t>(i)],
                                  lifted[static_cast<std::size_t>(i + 1)],
                                  opts.ridge_lambda);
    feat.insert(feat.end(), r.data().begin(), r.data().end());
    set.matrices.push_back(std::move(r));
  }
  const std::int64_t feat_len = static_cast<std::int64_t>(feat.size());
  set.features = Tensor({feat_len}, std::move(feat));
  require_finite(set.features, "relationship features");
  return set;
}

}  // namespace astcaps
