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
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "astcaps/config.hpp"
#include "astcaps/data.hpp"
#include "astcaps/metrics.hpp"
#include "astcaps/model.hpp"

namespace astcaps {

struct AdamSettings {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam over a fixed parameter set. Moments mirror parameter
/// shapes; update order is the parameter registration order, so runs are
/// bit-reproducible.
class Adam {
 public:
  Adam(const std::vector<std::string>& order,
       const std::map<std::string, Tensor>& params, AdamSettings settings);

  /// One update. Every tracked parameter must have a gradient entry of the
  /// same shape. A zero gradient leaves the parameter bits unchanged.
  void step(std::map<std::string, Tensor>& params,
            const std::map<std::string, Tensor>& grads);

  std::int64_t steps_taken() const { return t_; }

 private:
  AdamSettings settings_;
  std::int64_t t_ = 0;
  std::vector<std::string> order_;
  std::map<std::string, Tensor> m_;
  std::map<std::string, Tensor> v_;
};

/// Per-epoch training averages: the four loss parts, their sum, and the
/// class-capsule (head 4) accuracy over the epoch's samples.
struct EpochStats {
  double l_tp = 0.0;
  double l_st = 0.0;
  double l_pc = 0.0;
  double l_dc = 0.0;
  double total = 0.0;
  double train_acc = 0.0;
};

struct TrainOptions {
  std::int64_t epochs = 0;
  std::int64_t batch_size = 32;
  AdamSettings adam;
  double dropout = 0.0;
  MarginParams margin;
  /// Stop after the first epoch whose mean total loss is <= stop_loss
  /// (0 disables; used by the convergence race).
  double stop_loss = 0.0;
  /// Called after each epoch (1-based); may be empty.
  std::function<void(std::int64_t, const EpochStats&)> on_epoch;
};

/// Mini-batch training of the joint loss. Batch order comes from
/// `shuffle_rng` (one shuffle per epoch); dropout masks are drawn from the
/// same stream in sample order before each batch runs, so results do not
/// depend on the worker count (ASTCAPS_THREADS; 0 or 1 means serial).
/// Gradients accumulate over each batch in fixed sample order, are averaged,
/// and applied with one Adam step. After the final epoch the naive-Bayes
/// fusion is fitted on evaluation-mode training votes.
std::vector<EpochStats> train_model(Model& model,
                                    const std::vector<SampleWindow>& train_set,
                                    Rng& shuffle_rng,
                                    const TrainOptions& options);

/// Evaluation-mode metrics over a test set: per-head and fused accuracies,
/// fused confusion matrix, one-vs-rest ROC/AUC from the fused posterior.
/// Needs a fitted fusion model. Optionally emits the per-class ROC curves.
MetricsReport evaluate_model(const Model& model,
                             const std::vector<SampleWindow>& test_set,
                             const MarginParams& margin,
                             std::vector<std::vector<RocPoint>>* roc_out =
                                 nullptr);

/// Writes "label,f0,f1,..." rows for every window's feature vector at the
/// tagged layer. Tags: low_level, high_level, relationship, digit.
void export_features(const Model& model,
                     const std::vector<SampleWindow>& windows,
                     const std::string& tag, const std::string& csv_path,
                     const MarginParams& margin);

/// One cell's leg of the convergence race.
struct RaceLeg {
  CellKind cell = CellKind::Memory;
  std::vector<EpochStats> curve;
  /// First 1-based epoch whose mean loss reached the threshold;
  /// max_epochs + 1 when never reached.
  std::int64_t epochs_to_threshold = 0;
};

struct RaceOutcome {
  std::uint64_t seed = 0;
  RaceLeg memory;
  RaceLeg gru;
};

/// Trains the two cell kinds on identical synthetic data with identical
/// seeds (shared-name parameters initialize identically) and reports
/// epochs-to-threshold for each. One outcome per configured seed.
std::vector<RaceOutcome> convergence_race(
    const RunConfig& config,
    const std::function<void(const RaceOutcome&)>& on_seed = nullptr);

/// Median over outcomes of each cell's epochs-to-threshold.
double race_median_epochs(const std::vector<RaceOutcome>& outcomes,
                          CellKind cell);

/// One layer's finite-difference audit result.
struct LayerCheck {
  std::string layer;
  std::string worst_param;
  double max_rel_err = 0.0;
  bool pass = false;
};

/// Central-difference audit of every analytic gradient on a toy
/// configuration. Full-model entries: conv, memory_cell, fusion,
/// capsule_path, heads_losses. Standalone entries isolate the two custom
/// backward rules: squash, routing.
/// The step balances O(step^2) truncation against the |loss|*eps/step
/// cancellation floor of doubles; 1e-4 keeps both under the tolerances the
/// small recurrent-gate gradients are checked at.
std::vector<LayerCheck> gradient_check_battery(double tolerance,
                                               double step = 1e-4);

}  // namespace astcaps
