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
#include <vector>

namespace astcaps {

double accuracy(const std::vector<std::int64_t>& predicted,
                const std::vector<std::int64_t>& truth);

/// confusion[true_class][predicted_class] counts; entries sum to the number
/// of predictions.
std::vector<std::vector<std::int64_t>> confusion_matrix(
    const std::vector<std::int64_t>& predicted,
    const std::vector<std::int64_t>& truth, std::int64_t n_classes);

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
};

/// ROC sweep from the highest score down, moving through tied scores as one
/// step so the trapezoid area below equals the pairwise-comparison AUC
/// (ties counted half). First point is (0,0), last is (1,1). Needs at least
/// one positive and one negative.
std::vector<RocPoint> roc_curve(const std::vector<double>& scores,
                                const std::vector<bool>& positive);

double auc_trapezoid(const std::vector<RocPoint>& curve);

/// Convenience: curve + area in one pass.
double auc_of(const std::vector<double>& scores,
              const std::vector<bool>& positive);

/// Evaluation summary. Head order: temporal, spatiotemporal, relationship,
/// digit; the fused figure is the naive-Bayes combination of the four.
struct MetricsReport {
  std::array<double, 4> head_accuracy{0, 0, 0, 0};
  double fused_accuracy = 0.0;
  std::vector<std::vector<std::int64_t>> confusion;
  std::vector<double> class_auc;  // one-vs-rest per class, fused scores
  double micro_auc = 0.0;         // pooled one-vs-rest pairs
  std::int64_t n_classes = 0;
  std::int64_t test_size = 0;
};

/// Builds the per-class and micro ROC/AUC block from per-sample class score
/// vectors (scores[i][c] = fused posterior of class c for sample i).
struct AucReport {
  std::vector<double> class_auc;
  double micro_auc = 0.0;
  std::vector<std::vector<RocPoint>> class_curves;
};
AucReport auc_report(const std::vector<std::vector<double>>& scores,
                     const std::vector<std::int64_t>& truth,
                     std::int64_t n_classes);

}  // namespace astcaps
