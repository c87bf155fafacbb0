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

#include "astcaps/decision.hpp"

#include <cmath>

#include "astcaps/errors.hpp"

namespace astcaps {

SoftmaxHead register_softmax_head(Graph& g, const std::string& prefix,
                                  std::int64_t in_dim,
                                  const std::vector<std::int64_t>& hidden_dims,
                                  std::int64_t n_classes, ParamStore& store) {
  if (in_dim <= 0 || n_classes <= 0) {
    throw ShapeError("softmax head dimensions must be positive");
  }
  SoftmaxHead head;
  std::int64_t prev = in_dim;
  std::vector<std::int64_t> dims = hidden_dims;
  dims.push_back(n_classes);
  for (std::size_t layer = 0; layer < dims.size(); ++layer) {
    const std::int64_t width = dims[layer];
    if (width <= 0) throw ShapeError("softmax head layer width must be positive");
    const double s = 1.0 / std::sqrt(static_cast<double>(prev));
    const std::string tag = std::to_string(layer + 1);
    head.weights.push_back(
        g.parameter(prefix + ".W" + tag,
                    store.uniform(prefix + ".W" + tag, {width, prev}, s)));
    head.biases.push_back(g.parameter(
        prefix + ".b" + tag, store.zeros(prefix + ".b" + tag, {width})));
    prev = width;
  }
  return head;
}

NodeId softmax_head(Graph& g, const SoftmaxHead& head, NodeId features) {
  NodeId x = features;
  for (std::size_t layer = 0; layer < head.weights.size(); ++layer) {
    x = g.add(g.matmul(head.weights[layer], x), head.biases[layer]);
    if (layer + 1 < head.weights.size()) x = g.tanh(x);
  }
  return g.softmax(x);
}

void validate_margin(const MarginParams& mp) {
  if (!(0.0 < mp.m_minus && mp.m_minus < mp.m_plus && mp.m_plus < 1.0)) {
    throw ConfigError("margin parameters must satisfy 0 < m_minus < m_plus < 1");
  }
  if (!(mp.lambda > 0.0)) {
    throw ConfigError("margin down-weight lambda must be positive");
  }
}

JointLoss joint_loss(Graph& g, NodeId p_tp, NodeId p_st, NodeId p_pc,
                     NodeId digit_caps, std::int64_t label,
                     const MarginParams& mp) {
  JointLoss loss;
  loss.l_tp = g.cross_entropy(p_tp, label);
  loss.l_st = g.cross_entropy(p_st, label);
  loss.l_pc = g.cross_entropy(p_pc, label);
  loss.l_dc =
      g.margin_loss(digit_caps, label, mp.m_plus, mp.m_minus, mp.lambda);
  loss.total =
      g.add(g.add(loss.l_tp, loss.l_st), g.add(loss.l_pc, loss.l_dc));
  return loss;
}

std::int64_t digit_class(const Tensor& digit_caps) {
  if (digit_caps.rank() != 2 || digit_caps.dim(0) < 1) {
    throw ShapeError("digit vote expects [J x d] capsules, got " +
                     shape_to_string(digit_caps.shape()));
  }
  const std::int64_t j_count = digit_caps.dim(0), d = digit_caps.dim(1);
  std::int64_t best = 0;
  double best_norm = -1.0;
  for (std::int64_t j = 0; j < j_count; ++j) {
    double nsq = 0.0;
    for (std::int64_t a = 0; a < d; ++a) {
      nsq += digit_caps.at(j, a) * digit_caps.at(j, a);
    }
    if (nsq > best_norm) {
      best_norm = nsq;
      best = j;
    }
  }
  return best;
}

std::int64_t argmax_class(const Tensor& probs) {
  if (probs.rank() != 1 || probs.numel() < 1) {
    throw ShapeError("argmax expects a probability vector");
  }
  std::int64_t best = 0;
  for (std::int64_t i = 1; i < probs.numel(); ++i) {
    if (probs[i] > probs[best]) best = i;
  }
  return best;
}

BayesModel BayesModel::fit(const std::vector<Votes>& votes,
                           const std::vector<std::int64_t>& labels,
                           std::int64_t n_classes, double alpha) {
  if (votes.empty()) throw DataError("cannot fit the vote-fusion model on no votes");
  if (votes.size() != labels.size()) {
    throw DataError("vote/label count mismatch in vote-fusion fit");
  }
  if (n_classes < 1) throw ConfigError("vote fusion needs at least one class");
  if (!(alpha > 0.0)) throw ConfigError("smoothing alpha must be positive");
  const auto n = static_cast<std::size_t>(n_classes);
  std::vector<double> class_count(n, 0.0);
  std::vector<double> joint(static_cast<std::size_t>(kHeadCount) * n * n, 0.0);
  for (std::size_t i = 0; i < votes.size(); ++i) {
    const std::int64_t c = labels[i];
    if (c < 0 || c >= n_classes) {
      throw DataError("vote label " + std::to_string(c) + " out of range");
    }
    class_count[static_cast<std::size_t>(c)] += 1.0;
    for (int k = 0; k < kHeadCount; ++k) {
      const std::int64_t l = votes[i][static_cast<std::size_t>(k)];
      if (l < 0 || l >= n_classes) {
        throw DataError("head vote " + std::to_string(l) + " out of range");
      }
      joint[(static_cast<std::size_t>(k) * n + static_cast<std::size_t>(l)) *
                n +
            static_cast<std::size_t>(c)] += 1.0;
    }
  }
  BayesModel m;
  m.n_classes_ = n_classes;
  m.prior_.resize(n);
  const double total = static_cast<double>(votes.size());
  for (std::size_t c = 0; c < n; ++c) {
    m.prior_[c] = (class_count[c] + alpha) /
                  (total + alpha * static_cast<double>(n_classes));
  }
  m.conditional_.resize(joint.size());
  for (int k = 0; k < kHeadCount; ++k) {
    for (std::size_t l = 0; l < n; ++l) {
      for (std::size_t c = 0; c < n; ++c) {
        const std::size_t idx = (static_cast<std::size_t>(k) * n + l) * n + c;
        m.conditional_[idx] =
            (joint[idx] + alpha) /
            (class_count[c] + alpha * static_cast<double>(n_classes));
      }
    }
  }
  return m;
}

BayesModel BayesModel::from_tables(std::int64_t n_classes,
                                   std::vector<double> prior,
                                   std::vector<double> conditional) {
  if (n_classes < 1) throw ConfigError("vote fusion needs at least one class");
  const auto n = static_cast<std::size_t>(n_classes);
  if (prior.size() != n ||
      conditional.size() != static_cast<std::size_t>(kHeadCount) * n * n) {
    throw DataError("vote-fusion table sizes do not match class count");
  }
  BayesModel m;
  m.n_classes_ = n_classes;
  m.prior_ = std::move(prior);
  m.conditional_ = std::move(conditional);
  return m;
}

std::vector<double> BayesModel::posterior(const Votes& votes) const {
  if (!fitted()) throw DataError("vote-fusion model is not fitted");
  const auto n = static_cast<std::size_t>(n_classes_);
  std::vector<double> log_score(n);
  for (std::size_t c = 0; c < n; ++c) {
    double acc = std::log(prior_[c]);
    for (int k = 0; k < kHeadCount; ++k) {
      const std::int64_t l = votes[static_cast<std::size_t>(k)];
      if (l < 0 || l >= n_classes_) {
        throw DataError("head vote " + std::to_string(l) + " out of range");
      }
      acc += std::log(
          conditional_[(static_cast<std::size_t>(k) * n +
                        static_cast<std::size_t>(l)) *
                           n +
                       c]);
    }
    log_score[c] = acc;
  }
  double m = log_score[0];
  for (double v : log_score) m = std::max(m, v);
  double total = 0.0;
  std::vector<double> post(n);
  for (std::size_t c = 0; c < n; ++c) {
    post[c] = std::exp(log_score[c] - m);
    total += post[c];
  }
  for (auto& v : post) v /= total;
  return post;
}

std::int64_t BayesModel::predict(const Votes& votes) const {
  const auto post = posterior(votes);
  std::size_t best = 0;
  for (std::size_t c = 1; c < post.size(); ++c) {
    if (post[c] > post[best]) best = c;
  }
  return static_cast<std::int64_t>(best);
}

}  // namespace astcaps
