// Copyright 2026 The RandQ Authors
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

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace randq {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

// Dense row-major float32 array. A rank-0 tensor (empty shape) holds one value.
// Tensors are plain values; gradient tracking lives on the tape (see autodiff.hpp).
class Tensor {
 public:
  Tensor() : data_(1, 0.0f) {}
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<float> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, float value);
  static Tensor scalar(float value) { return Tensor({}, {value}); }
  static Tensor vector(std::initializer_list<float> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<float>> rows);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t numel() const { return data_.size(); }

  // 2-D helpers; require rank 2.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }
  const std::vector<float>& values() const { return data_; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }
  float& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  float at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }
  std::span<float> row(std::size_t r) { return std::span<float>(data_).subspan(r * cols(), cols()); }
  std::span<const float> row(std::size_t r) const {
    return std::span<const float>(data_).subspan(r * cols(), cols());
  }

  float item() const;
  Tensor reshaped(Shape shape) const;
  bool all_finite() const;

  // Exact bitwise equality of shape and payload (distinguishes -0.0 and NaN payloads).
  bool bit_equal(const Tensor& other) const;

 private:
  Shape shape_;
  std::vector<float> data_;
};

}  // namespace randq
