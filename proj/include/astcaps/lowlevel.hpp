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

/// Grid layout of one flattened sample window: K signal rows by T time
/// columns, K*T = N.
struct WindowLayout {
  std::int64_t k = 0;
  std::int64_t t = 0;
  std::int64_t numel() const { return k * t; }
};

/// Reshapes a flattened [N] window node to the [1 x K x T] single-channel
/// grid the convolution consumes. Rejects N != K*T.
NodeId reshape_window(Graph& g, NodeId flat, const WindowLayout& layout);

/// Same grid without the channel axis, [K x T]; its columns are the per-step
/// inputs of the recurrent path.
NodeId reshape_window_sequence(Graph& g, NodeId flat,
                               const WindowLayout& layout);

/// Convolution stage parameters: `filters` kernels of kh x kw over one
/// input channel, plus per-filter bias. Kernels initialize from
/// uniform(-s, s) with s = 1/sqrt(fan_in); bias starts at zero.
struct ConvStage {
  NodeId kernels = -1;
  NodeId bias = -1;
  std::int64_t filters = 0;
  std::int64_t kh = 0;
  std::int64_t kw = 0;
};

ConvStage register_conv_stage(Graph& g, const std::string& prefix,
                              std::int64_t filters, std::int64_t in_channels,
                              std::int64_t kh, std::int64_t kw,
                              ParamStore& store);

/// sigmoid(conv2d(grid)): the excitation map of the spatial path,
/// [1 x K x T] -> [F x K' x T'].
NodeId conv_feature_map(Graph& g, const ConvStage& conv, NodeId grid);

/// Projection applied to the temporal state when hidden != filters.
/// Weight [filters x hidden] from uniform(-s, s), s = 1/sqrt(hidden);
/// bias [filters] zero. When hidden == filters no parameters exist and the
/// state is tiled directly.
struct FusionProjection {
  NodeId weight = -1;
  NodeId bias = -1;
  bool active = false;
};

FusionProjection register_fusion_projection(Graph& g,
                                            const std::string& prefix,
                                            std::int64_t hidden,
                                            std::int64_t filters,
                                            ParamStore& store);

/// Adds the (projected) temporal state, tiled into constant per-channel
/// planes, onto the convolutional feature map.
NodeId fuse_spatiotemporal(Graph& g, const FusionProjection& proj,
                           NodeId temporal_state, NodeId feature_map);

/// Primary capsule stage: `kStackCount` parallel convolution stacks whose
/// outputs regroup into P capsules of dimension kStackCount, P = the per-stack
/// output volume. Component k of capsule p is element p of stack k's output.
constexpr std::int64_t kStackCount = 8;

struct CapsuleStage {
  std::vector<NodeId> kernels;  // kStackCount entries, each [F2 x F x ch x cw]
  std::vector<NodeId> biases;   // kStackCount entries, each [F2]
  std::int64_t filters = 0;     // F2
  std::int64_t kh = 0;
  std::int64_t kw = 0;
};

CapsuleStage register_capsule_stage(Graph& g, const std::string& prefix,
                                    std::int64_t filters,
                                    std::int64_t in_channels, std::int64_t kh,
                                    std::int64_t kw, ParamStore& store);

/// Runs the parallel stacks over the fused map and regroups.
/// Returns the pre-squash capsule matrix [P x kStackCount]; callers squash
/// once before routing and keep the raw rows for the relationship features.
NodeId primary_capsules_raw(Graph& g, const CapsuleStage& stage, NodeId fused);

}  // namespace astcaps
