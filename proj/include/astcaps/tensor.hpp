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

#include "astcaps/errors.hpp"
#include "astcaps/rng.hpp"

namespace astcaps {

using Shape = std::vector<std::int64_t>;

std::string shape_to_string(const Shape& s);

/// Dense row-major tensor of 64-bit reals. The universal value type of the
/// library; immutable once produced by a graph operation.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(const Shape& shape);
  static Tensor full(const Shape& shape, double value);
  static Tensor scalar(double value);
  /// Elements drawn i.i.d. uniform(lo, hi) in row-major order.
  static Tensor uniform(const Shape& shape, double lo, double hi, Rng& rng);

  const Shape& shape() const { return shape_; }
  std::int64_t rank() const { return static_cast<std::int64_t>(shape_.size()); }
  std::int64_t dim(std::int64_t i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }

  const std::vector<double>& data() const { return data_; }
  std::vector<double>& data() { return data_; }

  double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }
  double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }

  double at(std::int64_t i, std::int64_t j) const;
  double& at(std::int64_t i, std::int64_t j);
  double at(std::int64_t i, std::int64_t j, std::int64_t k) const;
  double& at(std::int64_t i, std::int64_t j, std::int64_t k);

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool all_finite() const;

  /// Same data, new shape; element count must match.
  Tensor reshaped(const Shape& shape) const;

  double l2_norm() const;

 private:
  Shape shape_;
  std::vector<double> data_;
};

std::int64_t shape_numel(const Shape& s);

/// Throws NumericError naming `context` if any element is non-finite.
void require_finite(const Tensor& t, const std::string& context);

}  // namespace astcaps
