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

#include "astcaps/lowlevel.hpp"

#include <cmath>

#include "astcaps/errors.hpp"

namespace astcaps {

NodeId reshape_window(Graph& g, NodeId flat, const WindowLayout& layout) {
  const Tensor& t = g.value(flat);
  if (t.rank() != 1 || t.numel() != layout.numel()) {
    throw ShapeError("window of shape " + shape_to_string(t.shape()) +
                     " does not match layout " + std::to_string(layout.k) +
                     "x" + std::to_string(layout.t));
  }
  return g.reshape(flat, {1, layout.k, layout.t});
}

NodeId reshape_window_sequence(Graph& g, NodeId flat,
                               const WindowLayout& layout) {
  const Tensor& t = g.value(flat);
  if (t.rank() != 1 || t.numel() != layout.numel()) {
    throw ShapeError("window of shape " + shape_to_string(t.shape()) +
                     " does not match layout " + std::to_string(layout.k) +
                     "x" + std::to_string(layout.t));
  }
  return g.reshape(flat, {layout.k, layout.t});
}

ConvStage register_conv_stage(Graph& g, const std::string& prefix,
                              std::int64_t filters, std::int64_t in_channels,
                              std::int64_t kh, std::int64_t kw,
                              ParamStore& store) {
  if (filters <= 0 || in_channels <= 0 || kh <= 0 || kw <= 0) {
    throw ShapeError("conv stage dimensions must be positive");
  }
  ConvStage stage;
  stage.filters = filters;
  stage.kh = kh;
  stage.kw = kw;
  const double s =
      1.0 / std::sqrt(static_cast<double>(in_channels * kh * kw));
  stage.kernels = g.parameter(
      prefix + ".kernels",
      store.uniform(prefix + ".kernels", {filters, in_channels, kh, kw}, s));
  stage.bias =
      g.parameter(prefix + ".bias", store.zeros(prefix + ".bias", {filters}));
  return stage;
}

NodeId conv_feature_map(Graph& g, const ConvStage& conv, NodeId grid) {
  return g.sigmoid(g.conv2d(grid, conv.kernels, conv.bias));
}

FusionProjection register_fusion_projection(Graph& g,
                                            const std::string& prefix,
                                            std::int64_t hidden,
                                            std::int64_t filters,
                                            ParamStore& store) {
  FusionProjection proj;
  if (hidden == filters) return proj;
  proj.active = true;
  const double s = 1.0 / std::sqrt(static_cast<double>(hidden));
  proj.weight = g.parameter(
      prefix + ".W_proj", store.uniform(prefix + ".W_proj", {filters, hidden}, s));
  proj.bias = g.parameter(prefix + ".b_proj",
                          store.zeros(prefix + ".b_proj", {filters}));
  return proj;
}

NodeId fuse_spatiotemporal(Graph& g, const FusionProjection& proj,
                           NodeId temporal_state, NodeId feature_map) {
  const Tensor& map = g.value(feature_map);
  if (map.rank() != 3) {
    throw ShapeError("fuse: feature map must be [F x H x W], got " +
                     shape_to_string(map.shape()));
  }
  NodeId channel_vec = temporal_state;
  if (proj.active) {
    channel_vec =
        g.add(g.matmul(proj.weight, temporal_state), proj.bias);
  }
  if (g.value(channel_vec).numel() != map.dim(0)) {
    throw ShapeError("fuse: temporal vector length " +
                     std::to_string(g.value(channel_vec).numel()) +
                     " does not match channel count " +
                     std::to_string(map.dim(0)));
  }
  const NodeId tiled = g.tile_channels(channel_vec, map.dim(1), map.dim(2));
  return g.add(feature_map, tiled);
}

CapsuleStage register_capsule_stage(Graph& g, const std::string& prefix,
                                    std::int64_t filters,
                                    std::int64_t in_channels, std::int64_t kh,
                                    std::int64_t kw, ParamStore& store) {
  if (filters <= 0 || in_channels <= 0 || kh <= 0 || kw <= 0) {
    throw ShapeError("capsule stage dimensions must be positive");
  }
  CapsuleStage stage;
  stage.filters = filters;
  stage.kh = kh;
  stage.kw = kw;
  const double s =
      1.0 / std::sqrt(static_cast<double>(in_channels * kh * kw));
  for (std::int64_t i = 0; i < kStackCount; ++i) {
    const std::string base = prefix + ".stack" + std::to_string(i);
    stage.kernels.push_back(g.parameter(
        base + ".kernels",
        store.uniform(base + ".kernels", {filters, in_channels, kh, kw}, s)));
    stage.biases.push_back(
        g.parameter(base + ".bias", store.zeros(base + ".bias", {filters})));
  }
  return stage;
}

NodeId primary_capsules_raw(Graph& g, const CapsuleStage& stage,
                            NodeId fused) {
  std::vector<NodeId> stacks;
  stacks.reserve(static_cast<std::size_t>(kStackCount));
  for (std::size_t i = 0; i < stage.kernels.size(); ++i) {
    stacks.push_back(g.conv2d(fused, stage.kernels[i], stage.biases[i]));
  }
  return g.stack_last(stacks);
}

}  // namespace astcaps
