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
#include <map>
#include <string>
#include <vector>

#include "astcaps/config.hpp"
#include "astcaps/decision.hpp"
#include "astcaps/graph.hpp"
#include "astcaps/params.hpp"

namespace astcaps {

/// Primary capsules carry one component per parallel convolution stack;
/// class capsules are 16-dimensional.
constexpr std::int64_t kPrimaryCapsDim = kStackCount;
constexpr std::int64_t kClassCapsDim = 16;

/// Sizes that follow from the window layout and model widths.
struct DerivedShapes {
  std::int64_t conv_h = 0, conv_w = 0;  // feature-map sides
  std::int64_t caps_h = 0, caps_w = 0;  // capsule-grid sides
  std::int64_t p = 0;                   // primary capsule count
  std::int64_t fused_dim = 0;           // conv_filters * conv_h * conv_w
  std::int64_t rel_used = 0;            // min(p, relationship.max_capsules)
  std::int64_t rel_dim = 0;             // (rel_used-1) * kPrimaryCapsDim^2
};

DerivedShapes derive_shapes(const DatasetConfig& dataset,
                            const ModelConfig& model);

/// One forward build over a single window: the graph plus handles to every
/// stage tests and heads need. Baking one graph per sample keeps the tape a
/// plain array in evaluation order.
struct Forward {
  Graph graph;
  NodeId window = -1;
  NodeId normalized = -1;
  std::vector<CellStep> steps;
  NodeId final_state = -1;    // temporal-path output O_T
  NodeId feature_map = -1;    // sigmoid convolution map
  NodeId fused = -1;          // map + tiled temporal state
  NodeId fused_flat = -1;
  NodeId caps_raw = -1;       // [P x 8] pre-squash capsules
  NodeId caps_squashed = -1;
  NodeId predictions = -1;    // [P x J x 16]
  NodeId digit_caps = -1;     // [J x 16] routed class capsules
  NodeId prob_tp = -1;        // temporal head probabilities
  NodeId prob_st = -1;        // spatio-temporal head probabilities
  NodeId prob_pc = -1;        // relationship head probabilities
  Tensor relationship_features;  // detached head-3 input
  JointLoss loss;
  std::int64_t label = 0;
  BayesModel::Votes votes{0, 0, 0, 0};  // temporal, spatio-temporal,
                                        // relationship, digit
};

/// The full network: parameter set plus the recipe for building a Forward.
/// Parameters live in a name->tensor map owned here; each run() replays them
/// into a fresh graph, so optimizer updates between runs take effect and
/// runs never share mutable state.
class Model {
 public:
  /// Fresh parameters drawn from the seed (per-name streams).
  Model(const DatasetConfig& dataset, const ModelConfig& model,
        std::uint64_t init_seed);

  /// Adopts stored parameters (checkpoint). Every parameter the
  /// configuration needs must be present with the right shape, and nothing
  /// extra may remain; violations raise DataError naming the parameter.
  Model(const DatasetConfig& dataset, const ModelConfig& model,
        std::map<std::string, Tensor> params);

  const DatasetConfig& dataset_config() const { return dataset_; }
  const ModelConfig& model_config() const { return model_; }
  const DerivedShapes& shapes() const { return shapes_; }

  const std::map<std::string, Tensor>& parameters() const { return params_; }
  std::map<std::string, Tensor>& mutable_parameters() { return params_; }
  /// Registration order, identical for every run; optimizer state and
  /// checkpoints iterate in this order.
  const std::vector<std::string>& parameter_order() const { return order_; }

  /// Builds and evaluates the whole network on one window. `step_masks`
  /// (training only) holds T-1 inverted-dropout masks applied between
  /// recurrence steps; pass nullptr for evaluation behavior.
  Forward run(const Tensor& window, std::int64_t label,
              const MarginParams& margin,
              const std::vector<Tensor>* step_masks = nullptr) const;

  /// Feature vector of a finished forward at a tagged layer:
  /// low_level (flat fused map), high_level (flat squashed capsules),
  /// relationship (head-3 features), digit (flat class capsules).
  Tensor feature_vector(const Forward& f, const std::string& tag) const;

  BayesModel& bayes() { return bayes_; }
  const BayesModel& bayes() const { return bayes_; }

 private:
  Forward wire(ParamStore& store, const Tensor& window, std::int64_t label,
               const MarginParams& margin,
               const std::vector<Tensor>* step_masks) const;

  DatasetConfig dataset_;
  ModelConfig model_;
  DerivedShapes shapes_;
  std::map<std::string, Tensor> params_;
  std::vector<std::string> order_;
  BayesModel bayes_;
};

}  // namespace astcaps
