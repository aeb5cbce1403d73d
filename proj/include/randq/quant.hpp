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
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "randq/tensor.hpp"

namespace randq {

enum class Granularity { kPerTensor, kPerChannel };

std::string to_string(Granularity g);
Granularity parse_granularity(const std::string& text);

struct IntegerBounds {
  int lower;
  int upper;
};

// Symmetric signed grid: (-(2^(bit-1) - 1), 2^(bit-1) - 1). Requires 2 <= bit <= 16.
IntegerBounds integer_bounds(int bit);

// Bit width plus scale granularity. Channels are the rows of a weight matrix.
struct QuantSpec {
  int bit = 4;
  Granularity granularity = Granularity::kPerChannel;

  int lower() const { return integer_bounds(bit).lower; }
  int upper() const { return integer_bounds(bit).upper; }
};

struct ScaleSet {
  std::vector<float> scales;
  Granularity granularity = Granularity::kPerChannel;

  float for_row(std::size_t row) const { return scales[granularity == Granularity::kPerTensor ? 0 : row]; }
};

// Max-abs scale: max|W_i| / u per row, or max|W| / u for the whole tensor.
// An all-zero channel gets scale 0.
ScaleSet compute_scale(const Tensor& w, const QuantSpec& spec);

// s * clip(round(W / s), l, u) with rounding half away from zero. Zero-scale
// channels map to zeros.
Tensor fake_quant(const Tensor& w, const ScaleSet& scales, const QuantSpec& spec);

// Two's-complement nibbles, even index in the low nibble. Values must be in [-8, 7].
std::vector<std::uint8_t> pack_int4(std::span<const std::int8_t> values);
std::vector<std::int8_t> unpack_int4(std::span<const std::uint8_t> packed, std::size_t count);

// Integer weights with their scales. Widths up to 4 bits are stored as packed
// nibbles, wider ones (up to 8) as one byte per value.
class QuantizedTensor {
 public:
  QuantizedTensor() = default;
  QuantizedTensor(Shape shape, int bit, ScaleSet scales, std::span<const std::int8_t> values);

  // Rebuilds from serialized storage; validates sizes and ranges.
  static QuantizedTensor from_storage(Shape shape, int bit, ScaleSet scales, std::vector<std::uint8_t> storage);

  const Shape& shape() const { return shape_; }
  int bit() const { return bit_; }
  const ScaleSet& scales() const { return scales_; }
  const std::vector<std::uint8_t>& storage() const { return storage_; }
  std::size_t numel() const { return randq::numel(shape_); }

  std::vector<std::int8_t> integers() const;

  // Packed payload plus 4 bytes per scale.
  std::size_t size_bytes() const { return storage_.size() + 4 * scales_.scales.size(); }

 private:
  Shape shape_;
  int bit_ = 4;
  ScaleSet scales_;
  std::vector<std::uint8_t> storage_;
};

bool packs_nibbles(int bit);
// Bytes the integer payload of `count` values occupies at this width.
std::size_t payload_bytes(std::size_t count, int bit);

QuantizedTensor quantize(const Tensor& w, const QuantSpec& spec);
QuantizedTensor quantize_with_scales(const Tensor& w, const ScaleSet& scales, const QuantSpec& spec);
Tensor dequantize(const QuantizedTensor& q);

}  // namespace randq
