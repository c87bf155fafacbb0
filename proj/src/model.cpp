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

#include "astcaps/model.hpp"

#include <algorithm>

#include "astcaps/capsules.hpp"
#include "astcaps/errors.hpp"
#include "astcaps/lowlevel.hpp"
#include "astcaps/memory_cell.hpp"

namespace astcaps {

DerivedShapes derive_shapes(const DatasetConfig& dataset,
                            const ModelConfig& model) {
  DerivedShapes s;
  s.conv_h = dataset.layout.k - model.conv_kernel[0] + 1;
  s.conv_w = dataset.layout.t - model.conv_kernel[1] + 1;
  s.caps_h = s.conv_h - model.caps_kernel[0] + 1;
  s.caps_w = s.conv_w - model.caps_kernel[1] + 1;
  if (s.conv_h < 1 || s.conv_w < 1 || s.caps_h < 1 || s.caps_w < 1) {
    throw ConfigError("kernels do not fit the window layout");
  }
  s.p = model.caps_filters * s.caps_h * s.caps_w;
  s.fused_dim = model.conv_filters * s.conv_h * s.conv_w;
  s.rel_used = std::min(s.p, model.relationship.max_capsules);
  s.rel_dim = (s.rel_used - 1) * kPrimaryCapsDim * kPrimaryCapsDim;
  if (s.p < 2) {
    throw ConfigError("configuration yields fewer than 2 primary capsules");
  }
  return s;
}

Model::Model(const DatasetConfig& dataset, const ModelConfig& model,
             std::uint64_t init_seed)
    : dataset_(dataset), model_(model), shapes_(derive_shapes(dataset, model)) {
  ParamStore store = ParamStore::init(init_seed);
  Forward probe = wire(store, Tensor::zeros({dataset_.layout.numel()}), 0,
                       MarginParams{}, nullptr);
  for (const auto& [name, id] : probe.graph.parameters()) {
    order_.push_back(name);
    params_[name] = probe.graph.value(id);
  }
}

Model::Model(const DatasetConfig& dataset, const ModelConfig& model,
             std::map<std::string, Tensor> params)
    : dataset_(dataset),
      model_(model),
      shapes_(derive_shapes(dataset, model)),
      params_(std::move(params)) {
  ParamStore store = ParamStore::replay(&params_);
  Forward probe = wire(store, Tensor::zeros({dataset_.layout.numel()}), 0,
                       MarginParams{}, nullptr);
  for (const auto& [name, id] : probe.graph.parameters()) {
    order_.push_back(name);
    (void)id;
  }
  for (const auto& [name, value] : params_) {
    (void)value;
    if (!store.consumed().count(name)) {
      throw DataError("stored model has parameter \"" + name +
                      "\" that this configuration does not use");
    }
  }
}

Forward Model::run(const Tensor& window, std::int64_t label,
                   const MarginParams& margin,
                   const std::vector<Tensor>* step_masks) const {
  ParamStore store = ParamStore::replay(&params_);
  return wire(store, window, label, margin, step_masks);
}

Forward Model::wire(ParamStore& store, const Tensor& window,
                    std::int64_t label, const MarginParams& margin,
                    const std::vector<Tensor>* step_masks) const {
  const WindowLayout& layout = dataset_.layout;
  if (window.numel() != layout.numel()) {
    throw DataError("window carries " + std::to_string(window.numel()) +
                    " values but the model expects " +
                    std::to_string(layout.k) + "x" + std::to_string(layout.t) +
                    " = " + std::to_string(layout.numel()));
  }
  if (label < 0 || label >= dataset_.n_classes) {
    throw DataError("label " + std::to_string(label) +
                    " outside the configured " +
                    std::to_string(dataset_.n_classes) + " classes");
  }

  Forward f;
  Graph& g = f.graph;
  f.label = label;

  f.window = g.input(window.reshaped({layout.numel()}));
  f.normalized = g.l2_normalize(f.window);
  NodeId seq = reshape_window_sequence(g, f.normalized, layout);
  NodeId grid = reshape_window(g, f.normalized, layout);

  // Temporal path.
  RecurrentCell cell = register_recurrent_cell(g, "mem", model_.cell,
                                               model_.hidden, layout.k, store);
  std::vector<NodeId> mask_nodes;
  if (step_masks != nullptr && !step_masks->empty()) {
    mask_nodes.reserve(step_masks->size());
    for (const Tensor& m : *step_masks) mask_nodes.push_back(g.input(m));
  }
  Unroll unroll = unroll_recurrent(g, cell, seq, mask_nodes);
  f.steps = unroll.steps;
  f.final_state = unroll.final_state;

  // Spatial path and fusion.
  ConvStage conv = register_conv_stage(g, "conv", model_.conv_filters, 1,
                                       model_.conv_kernel[0],
                                       model_.conv_kernel[1], store);
  f.feature_map = conv_feature_map(g, conv, grid);
  FusionProjection proj = register_fusion_projection(
      g, "fuse", model_.hidden, model_.conv_filters, store);
  f.fused = fuse_spatiotemporal(g, proj, f.final_state, f.feature_map);
  f.fused_flat = g.reshape(f.fused, {shapes_.fused_dim});

  // Capsule path.
  CapsuleStage caps_stage = register_capsule_stage(
      g, "caps", model_.caps_filters, model_.conv_filters,
      model_.caps_kernel[0], model_.caps_kernel[1], store);
  f.caps_raw = primary_capsules_raw(g, caps_stage, f.fused);
  f.caps_squashed = g.squash(f.caps_raw);
  NodeId caps_w = register_capsule_weights(g, "caps.W", shapes_.p,
                                           dataset_.n_classes, kClassCapsDim,
                                           kPrimaryCapsDim, store);
  f.predictions = predict_vectors(g, f.caps_squashed, caps_w);
  f.digit_caps = g.route(f.predictions,
                         static_cast<int>(model_.routing_iterations));

  // Relationship features are built from the raw capsule values and fed
  // back as a detached input: the head trains on them, the capsules do not
  // receive gradient through the solve.
  RelationshipSet rel =
      relationship_matrices(g.value(f.caps_raw), model_.relationship);
  if (rel.features.numel() != shapes_.rel_dim) {
    throw ShapeError("relationship features have " +
                     std::to_string(rel.features.numel()) +
                     " values, expected " + std::to_string(shapes_.rel_dim));
  }
  f.relationship_features = rel.features;
  NodeId rel_input = g.input(rel.features);

  // Classifier heads.
  SoftmaxHead head1 = register_softmax_head(g, "head1", model_.hidden, {},
                                            dataset_.n_classes, store);
  f.prob_tp = softmax_head(g, head1, f.final_state);
  SoftmaxHead head2 = register_softmax_head(
      g, "head2", shapes_.fused_dim, {model_.fc_width, model_.fc_width},
      dataset_.n_classes, store);
  f.prob_st = softmax_head(g, head2, f.fused_flat);
  SoftmaxHead head3 = register_softmax_head(g, "head3", shapes_.rel_dim, {},
                                            dataset_.n_classes, store);
  f.prob_pc = softmax_head(g, head3, rel_input);

  f.loss = joint_loss(g, f.prob_tp, f.prob_st, f.prob_pc, f.digit_caps, label,
                      margin);

  f.votes[0] = argmax_class(g.value(f.prob_tp));
  f.votes[1] = argmax_class(g.value(f.prob_st));
  f.votes[2] = argmax_class(g.value(f.prob_pc));
  f.votes[3] = digit_class(g.value(f.digit_caps));
  return f;
}

Tensor Model::feature_vector(const Forward& f, const std::string& tag) const {
  if (tag == "low_level") {
    return f.graph.value(f.fused_flat);
  }
  if (tag == "high_level") {
    return f.graph.value(f.caps_squashed)
        .reshaped({shapes_.p * kPrimaryCapsDim});
  }
  if (tag == "relationship") {
    return f.relationship_features;
  }
  if (tag == "digit") {
    return f.graph.value(f.digit_caps)
        .reshaped({dataset_.n_classes * kClassCapsDim});
  }
  throw ConfigError("unknown feature tag \"" + tag +
                    "\" (use low_level, high_level, relationship, or digit)");
}

}  // namespace astcaps
