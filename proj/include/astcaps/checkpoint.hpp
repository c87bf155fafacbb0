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
#include "astcaps/model.hpp"

namespace astcaps {

/// On-disk model container. Layout (all integers and 64-bit reals written
/// explicitly little-endian):
///   "ASTCAPSC"  8-byte magic
///   u32         format version (1)
///   u64 + bytes config echo (canonical JSON)
///   u32         parameter count
///   per parameter, sorted by name:
///     u32 + bytes  name
///     u32          rank, then u64 dims
///     f64          values, row-major
///   u8          fusion-tables flag
///     if set: u64 class count, f64 prior[n], f64 conditional[4*n*n]
///   "ASTCAPSE"  8-byte end marker
/// load(save(x)) is byte-identical; truncation, wrong magic, and version
/// mismatches are rejected with the reason.
struct Checkpoint {
  std::string config_json;
  std::map<std::string, Tensor> params;
  bool has_bayes = false;
  std::int64_t bayes_classes = 0;
  std::vector<double> bayes_prior;
  std::vector<double> bayes_conditional;
};

void save_checkpoint(const std::string& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::string& path);

/// Snapshot of a live model plus the run configuration it came from.
Checkpoint checkpoint_of(const Model& model, const RunConfig& config);

/// Rebuilds the model a checkpoint describes. The embedded config supplies
/// the architecture; parameter names/shapes must match it exactly.
/// `config_out` (optional) receives the parsed embedded config.
Model model_from_checkpoint(const Checkpoint& checkpoint,
                            RunConfig* config_out = nullptr);

}  // namespace astcaps
