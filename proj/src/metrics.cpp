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

#include "astcaps/metrics.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "astcaps/errors.hpp"

namespace astcaps {

double accuracy(const std::vector<std::int64_t>& predicted,
                const std::vector<std::int64_t>& truth) {
  if (predicted.size() != truth.size()) {
    throw DataError("prediction/label count mismatch");
  }
  if (predicted.empty()) throw DataError("accuracy of an empty set");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    if (predicted[i] == truth[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(predicted.size());
}

std::vector<std::vector<std::int64_t>> confusion_matrix(
    const std::vector<std::int64_t>& predicted,
    const std::vector<std::int64_t>& truth, std::int64_t n_classes) {
  if (predicted.size() != truth.size()) {
    throw DataError("prediction/label count mismatch");
  }
  std::vector<std::vector<std::int64_t>> m(
      static_cast<std::size_t>(n_classes),
      std::vector<std::int64_t>(static_cast<std::size_t>(n_classes), 0));
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    if (truth[i] < 0 || truth[i] >= n_classes || predicted[i] < 0 ||
        predicted[i] >= n_classes) {
      throw DataError("class index outside [0, n) in confusion matrix");
    }
    ++m[static_cast<std::size_t>(truth[i])]
       [static_cast<std::size_t>(predicted[i])];
  }
  return m;
}

std::vector<RocPoint> roc_curve(const std::vector<double>& scores,
                                const std::vector<bool>& positive) {
  if (scores.size() != positive.size()) {
    throw DataError("score/label count mismatch");
  }
  std::int64_t p = 0;
  for (bool b : positive) p += b ? 1 : 0;
  std::int64_t n = static_cast<std::int64_t>(scores.size()) - p;
  if (p == 0 || n == 0) {
    throw DataError("ROC needs at least one positive and one negative");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) {
                     return scores[a] > scores[b];
                   });
  std::vector<RocPoint> curve;
  curve.push_back({0.0, 0.0});
  std::int64_t tp = 0;
  std::int64_t fp = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    double threshold = scores[order[i]];
    while (i < order.size() && scores[order[i]] == threshold) {
      if (positive[order[i]]) {
        ++tp;
      } else {
        ++fp;
      }
      ++i;
    }
    curve.push_back({static_cast<double>(fp) / static_cast<double>(n),
                     static_cast<double>(tp) / static_cast<double>(p)});
  }
  return curve;
}

double auc_trapezoid(const std::vector<RocPoint>& curve) {
  double area = 0.0;
  for (std::size_t i = 1; i < curve.size(); ++i) {
    area += (curve[i].fpr - curve[i - 1].fpr) *
            (curve[i].tpr + curve[i - 1].tpr) * 0.5;
  }
  return area;
}

double auc_of(const std::vector<double>& scores,
              const std::vector<bool>& positive) {
  return auc_trapezoid(roc_curve(scores, positive));
}

AucReport auc_report(const std::vector<std::vector<double>>& scores,
                     const std::vector<std::int64_t>& truth,
                     std::int64_t n_classes) {
  if (scores.size() != truth.size()) {
    throw DataError("score/label count mismatch");
  }
  AucReport report;
  std::vector<double> pooled_scores;
  std::vector<bool> pooled_positive;
  pooled_scores.reserve(scores.size() * static_cast<std::size_t>(n_classes));
  pooled_positive.reserve(pooled_scores.capacity());
  for (std::int64_t c = 0; c < n_classes; ++c) {
    std::vector<double> s;
    std::vector<bool> pos;
    s.reserve(scores.size());
    pos.reserve(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (static_cast<std::int64_t>(scores[i].size()) != n_classes) {
        throw DataError("sample " + std::to_string(i) +
                        " has a score vector of wrong length");
      }
      s.push_back(scores[i][static_cast<std::size_t>(c)]);
      pos.push_back(truth[i] == c);
      pooled_scores.push_back(s.back());
      pooled_positive.push_back(pos.back());
    }
    std::vector<RocPoint> curve = roc_curve(s, pos);
    report.class_auc.push_back(auc_trapezoid(curve));
    report.class_curves.push_back(std::move(curve));
  }
  report.micro_auc = auc_of(pooled_scores, pooled_positive);
  return report;
}

}  // namespace astcaps
