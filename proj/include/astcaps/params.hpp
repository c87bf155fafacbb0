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
#include <set>
#include <string>

#include "astcaps/rng.hpp"
#include "astcaps/tensor.hpp"

namespace astcaps {

/// Produces parameter tensors during model wiring.
///
/// Init mode draws fresh values; every parameter gets its own generator
/// derived from the base seed and the parameter's name, so two models seeded
/// alike initialize every same-named parameter identically regardless of
/// which other parameters exist (this is what makes the cell-convergence
/// race a controlled comparison).
///
/// Replay mode serves stored values (a loaded checkpoint or a live model's
/// current parameters) and validates the requested name and shape, so a
/// checkpoint that disagrees with the configuration is rejected naming the
/// offending parameter.
class ParamStore {
 public:
  static ParamStore init(std::uint64_t seed) {
    ParamStore s;
    s.seed_ = seed;
    s.init_mode_ = true;
    return s;
  }

  static ParamStore replay(const std::map<std::string, Tensor>* values) {
    ParamStore s;
    s.values_ = values;
    return s;
  }

  /// uniform(-halfwidth, +halfwidth) in init mode; stored value in replay.
  Tensor uniform(const std::string& name, const Shape& shape,
                 double halfwidth);

  /// Zero tensor in init mode; stored value in replay.
  Tensor zeros(const std::string& name, const Shape& shape);

  /// Names served so far (replay mode); lets callers detect unused extras.
  const std::set<std::string>& consumed() const { return consumed_; }

 private:
  Tensor fetch_stored(const std::string& name, const Shape& shape);
  Rng name_rng(const std::string& name) const;

  bool init_mode_ = false;
  std::uint64_t seed_ = 0;
  const std::map<std::string, Tensor>* values_ = nullptr;
  std::set<std::string> consumed_;
};

}  // namespace astcaps
