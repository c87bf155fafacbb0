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

#include "astcaps/params.hpp"

#include "astcaps/errors.hpp"

namespace astcaps {

namespace {

// FNV-1a, the name-to-stream tag of init mode.
std::uint64_t hash_name(const std::string& name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

Rng ParamStore::name_rng(const std::string& name) const {
  return Rng(seed_).derive(hash_name(name));
}

Tensor ParamStore::fetch_stored(const std::string& name, const Shape& shape) {
  auto it = values_->find(name);
  if (it == values_->end()) {
    throw DataError("stored model is missing parameter " + name);
  }
  if (it->second.shape() != shape) {
    throw DataError("parameter " + name + " has shape " +
                    shape_to_string(it->second.shape()) +
                    " but the configuration requires " +
                    shape_to_string(shape));
  }
  consumed_.insert(name);
  return it->second;
}

Tensor ParamStore::uniform(const std::string& name, const Shape& shape,
                           double halfwidth) {
  if (init_mode_) {
    Rng rng = name_rng(name);
    return Tensor::uniform(shape, -halfwidth, halfwidth, rng);
  }
  return fetch_stored(name, shape);
}

Tensor ParamStore::zeros(const std::string& name, const Shape& shape) {
  if (init_mode_) return Tensor::zeros(shape);
  return fetch_stored(name, shape);
}

}  // namespace astcaps
