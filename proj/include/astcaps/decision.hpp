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

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "astcaps/graph.hpp"
#include "astcaps/params.hpp"
#include "astcaps/rng.hpp"

namespace astcaps {

/// Number of classifier heads whose votes the Bayes layer fuses.
constexpr int kHeadCount = 4;

/// A softmax head reading a flat feature vector, optionally through hidden
/// fully-connected tanh layers (the spatio-temporal head uses two).
/// Weights initialize from uniform(-s, s) with s = 1/sqrt(fan_in); biases
/// start at zero. Parameters register as prefix.W1/b1, .W2/b2, ... with the
/// final pair feeding the softmax.
struct SoftmaxHead {
  std::vector<NodeId> weights;
  std::vector<NodeId> biases;
};

SoftmaxHead register_softmax_head(Graph& g, const std::string& prefix,
                                  std::int64_t in_dim,
                                  const std::vector<std::int64_t>& hidden_dims,
                                  std::int64_t n_classes, ParamStore& store);

/// Applies the head: hidden layers tanh(W x + b), then softmax(W x + b).
NodeId softmax_head(Graph& g, const SoftmaxHead& head, NodeId features);

/// Margin-loss constants of the digit-capsule objective.
struct MarginParams {
  double m_plus = 0.9;
  double m_minus = 0.1;
  double lambda = 0.5;
};

void validate_margin(const MarginParams& mp);

/// Joint loss node ids: three cross-entropy heads plus the margin term.
struct JointLoss {
  NodeId l_tp = -1;  // temporal head
  NodeId l_st = -1;  // spatio-temporal head
  NodeId l_pc = -1;  // relationship head
  NodeId l_dc = -1;  // digit-capsule margin loss
  NodeId total = -1;
};

JointLoss joint_loss(Graph& g, NodeId p_tp, NodeId p_st, NodeId p_pc,
                     NodeId digit_caps, std::int64_t label,
                     const MarginParams& mp);

/// Head 4's vote: argmax over rows of the digit-capsule length, ties to the
/// lowest class index.
std::int64_t digit_class(const Tensor& digit_caps);

/// argmax of a probability vector, ties to the lowest index.
std::int64_t argmax_class(const Tensor& probs);

/// Laplace-smoothed naive Bayes over the four head votes.
/// prior(c) = (count_c + alpha) / (M + alpha n);
/// cond(k, l, c) = P(head k votes l | class c) with the same smoothing.
class BayesModel {
 public:
  using Votes = std::array<std::int64_t, kHeadCount>;

  /// Fits tables from training votes. alpha > 0; votes non-empty.
  static BayesModel fit(const std::vector<Votes>& votes,
                        const std::vector<std::int64_t>& labels,
                        std::int64_t n_classes, double alpha = 1.0);

  /// Rebuilds a model from serialized tables (prior [n], conditionals
  /// flattened [kHeadCount * n * n] indexed (head, vote, class)).
  static BayesModel from_tables(std::int64_t n_classes,
                                std::vector<double> prior,
                                std::vector<double> conditional);

  /// Posterior over classes for one vote pattern, normalized to sum 1.
  std::vector<double> posterior(const Votes& votes) const;

  /// argmax of posterior, ties to the lowest class index.
  std::int64_t predict(const Votes& votes) const;

  std::int64_t n_classes() const { return n_classes_; }
  const std::vector<double>& prior() const { return prior_; }
  const std::vector<double>& conditional() const { return conditional_; }
  bool fitted() const { return n_classes_ > 0; }

 private:
  std::int64_t n_classes_ = 0;
  std::vector<double> prior_;        // [n]
  std::vector<double> conditional_;  // [kHeadCount * n * n], (head, vote, class)
};

}  // namespace astcaps
