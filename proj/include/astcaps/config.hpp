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

#include "astcaps/capsules.hpp"
#include "astcaps/decision.hpp"
#include "astcaps/lowlevel.hpp"
#include "astcaps/memory_cell.hpp"

namespace astcaps {

/// Where the windows come from. "synthetic" generates data in-process; the
/// file-backed kinds read a manifest relative to data_root.
struct DatasetConfig {
  std::string kind;              // synthetic | timeseries | skeleton | image
  WindowLayout layout{0, 0};
  std::int64_t n_classes = 0;
  std::int64_t stride = 0;       // timeseries only; 0 means layout.t
  bool drop_first_column = false;
  std::int64_t windows_per_class = 100;  // synthetic only
  double noise_sigma = 0.05;             // synthetic only
};

/// Architecture widths. Capsule dimension (8) and class-capsule dimension
/// (16) are fixed by the architecture, not configured.
struct ModelConfig {
  std::int64_t hidden = 32;
  std::int64_t conv_filters = 16;
  std::array<std::int64_t, 2> conv_kernel{5, 5};
  std::int64_t caps_filters = 2;
  std::array<std::int64_t, 2> caps_kernel{3, 3};
  std::int64_t routing_iterations = 3;
  std::int64_t fc_width = 128;
  CellKind cell = CellKind::Memory;
  RelationshipOptions relationship;
};

struct TrainConfig {
  std::int64_t epochs = 50;
  std::int64_t batch_size = 32;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double dropout = 0.0;
  double train_fraction = 0.8;
  MarginParams margin;
};

struct RaceConfig {
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  double loss_threshold = 0.1;
  std::int64_t max_epochs = 60;
};

struct SeedConfig {
  std::uint64_t init = 1;
  std::uint64_t shuffle = 2;
};

struct RunConfig {
  DatasetConfig dataset;
  ModelConfig model;
  TrainConfig train;
  RaceConfig race;
  SeedConfig seeds;
  std::string out_dir = "out";
  std::string data_root;
  std::string manifest;
};

/// Parses and fully validates a config document. Unknown keys anywhere are
/// rejected so typos cannot silently fall back to defaults. Shape
/// consistency (kernels fitting the layout, enough capsules for routing and
/// the relationship layer) is checked here, before any data is touched.
RunConfig parse_config(const std::string& json_text);
RunConfig load_config(const std::string& path);

/// Canonical JSON echo of a config: every field explicit, keys sorted.
/// parse_config(serialize_config(c)) reproduces c exactly, and the echo is
/// what training runs and checkpoints record for provenance.
std::string serialize_config(const RunConfig& config);

/// Validates field ranges and cross-field consistency; throws ConfigError.
void validate_config(const RunConfig& config);

}  // namespace astcaps
