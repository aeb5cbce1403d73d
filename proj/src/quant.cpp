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

#include "randq/quant.hpp"

#include <algorithm>
#include <cmath>

#include "randq/error.hpp"

namespace randq {
namespace {

void check_storage_bit(int bit) {
  if (bit < 2 || bit > 8) throw ParameterError("quantized storage supports 2..8 bits, got " + std::to_string(bit));
}

// Rows and columns of the channel view; per-tensor treats everything as one row.
std::pair<std::size_t, std::size_t> channel_view(const Tensor& w, Granularity g) {
  if (g == Granularity::kPerTensor) return {1, w.numel()};
  if (w.rank() != 2) {
    throw DimensionError("per-channel quantization needs a matrix, got " + to_string(w.shape()));
  }
  return {w.rows(), w.cols()};
}

void check_scales(const ScaleSet& scales, std::size_t rows, const QuantSpec& spec) {
  const std::size_t expected = spec.granularity == Granularity::kPerTensor ? 1 : rows;
  if (scales.granularity != spec.granularity || scales.scales.size() != expected) {
    throw DimensionError("scale set has " + std::to_string(scales.scales.size()) + " entries, expected " +
                         std::to_string(expected));
  }
}

std::int8_t quantize_value(float w, float s, int lower, int upper) {
  if (s == 0.0f) return 0;
  const float q = std::round(w / s);
  return static_cast<std::int8_t>(std::clamp(q, static_cast<float>(lower), static_cast<float>(upper)));
}

}  // namespace

std::string to_string(Granularity g) { return g == Granularity::kPerTensor ? "per_tensor" : "per_channel"; }

Granularity parse_granularity(const std::string& text) {
  if (text == "per_tensor") return Granularity::kPerTensor;
  if (text == "per_channel") return Granularity::kPerChannel;
  throw ConfigError("unknown granularity '" + text + "'");
}

IntegerBounds integer_bounds(int bit) {
  if (bit < 2 || bit > 16) throw ParameterError("bit width must be in [2, 16], got " + std::to_string(bit));
  const int u = (1 << (bit - 1)) - 1;
  return {-u, u};
}

ScaleSet compute_scale(const Tensor& w, const QuantSpec& spec) {
  if (w.numel() == 0) throw ParameterError("compute_scale on an empty tensor");
  const auto u = static_cast<float>(spec.upper());
  const auto [rows, cols] = channel_view(w, spec.granularity);
  ScaleSet out{std::vector<float>(rows, 0.0f), spec.granularity};
  for (std::size_t r = 0; r < rows; ++r) {
    float mx = 0.0f;
    for (std::size_t c = 0; c < cols; ++c) mx = std::max(mx, std::fabs(w[r * cols + c]));
    out.scales[r] = mx / u;
  }
  return out;
}

Tensor fake_quant(const Tensor& w, const ScaleSet& scales, const QuantSpec& spec) {
  const auto [rows, cols] = channel_view(w, spec.granularity);
  check_scales(scales, rows, spec);
  const int l = spec.lower();
  const int u = spec.upper();
  Tensor out(w.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const float s = scales.scales[r];
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t i = r * cols + c;
      out[i] = s == 0.0f ? 0.0f : static_cast<float>(quantize_value(w[i], s, l, u)) * s;
    }
  }
  return out;
}

std::vector<std::uint8_t> pack_int4(std::span<const std::int8_t> values) {
  std::vector<std::uint8_t> out((values.size() + 1) / 2, 0);
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i] < -8 || values[i] > 7) throw ParameterError("value does not fit a signed nibble");
    const auto nibble = static_cast<std::uint8_t>(values[i] & 0x0f);
    out[i / 2] |= static_cast<std::uint8_t>(i % 2 == 0 ? nibble : nibble << 4);
  }
  return out;
}

std::vector<std::int8_t> unpack_int4(std::span<const std::uint8_t> packed, std::size_t count) {
  if (packed.size() < (count + 1) / 2) throw ParameterError("packed buffer too short");
  std::vector<std::int8_t> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    const int nibble = i % 2 == 0 ? packed[i / 2] & 0x0f : packed[i / 2] >> 4;
    out[i] = static_cast<std::int8_t>(nibble >= 8 ? nibble - 16 : nibble);
  }
  return out;
}

bool packs_nibbles(int bit) { return bit <= 4; }

std::size_t payload_bytes(std::size_t count, int bit) { return packs_nibbles(bit) ? (count + 1) / 2 : count; }

QuantizedTensor::QuantizedTensor(Shape shape, int bit, ScaleSet scales, std::span<const std::int8_t> values)
    : shape_(std::move(shape)), bit_(bit), scales_(std::move(scales)) {
  check_storage_bit(bit);
  if (values.size() != randq::numel(shape_)) throw DimensionError("quantized payload does not match shape");
  const auto [l, u] = integer_bounds(bit);
  for (std::int8_t v : values) {
    if (v < l || v > u) throw ParameterError("integer value outside quantization bounds");
  }
  if (packs_nibbles(bit)) {
    storage_ = pack_int4(values);
  } else {
    storage_.reserve(values.size());
    for (std::int8_t v : values) storage_.push_back(static_cast<std::uint8_t>(v));
  }
}

QuantizedTensor QuantizedTensor::from_storage(Shape shape, int bit, ScaleSet scales,
                                              std::vector<std::uint8_t> storage) {
  check_storage_bit(bit);
  const std::size_t count = randq::numel(shape);
  if (storage.size() != payload_bytes(count, bit)) throw DimensionError("quantized storage has the wrong size");
  QuantizedTensor q;
  q.shape_ = std::move(shape);
  q.bit_ = bit;
  q.scales_ = std::move(scales);
  q.storage_ = std::move(storage);
  const auto [l, u] = integer_bounds(bit);
  for (std::int8_t v : q.integers()) {
    if (v < l || v > u) throw ParameterError("integer value outside quantization bounds");
  }
  return q;
}

std::vector<std::int8_t> QuantizedTensor::integers() const {
  if (packs_nibbles(bit_)) return unpack_int4(storage_, numel());
  std::vector<std::int8_t> out(storage_.size());
  std::transform(storage_.begin(), storage_.end(), out.begin(), [](std::uint8_t b) { return static_cast<std::int8_t>(b); });
  return out;
}

QuantizedTensor quantize(const Tensor& w, const QuantSpec& spec) {
  return quantize_with_scales(w, compute_scale(w, spec), spec);
}

QuantizedTensor quantize_with_scales(const Tensor& w, const ScaleSet& scales, const QuantSpec& spec) {
  check_storage_bit(spec.bit);
  const auto [rows, cols] = channel_view(w, spec.granularity);
  check_scales(scales, rows, spec);
  const int l = spec.lower();
  const int u = spec.upper();
  std::vector<std::int8_t> values(w.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) values[r * cols + c] = quantize_value(w[r * cols + c], scales.scales[r], l, u);
  }
  return QuantizedTensor(w.shape(), spec.bit, scales, values);
}

Tensor dequantize(const QuantizedTensor& q) {
  Tensor out(q.shape());
  const std::vector<std::int8_t> values = q.integers();
  const std::size_t rows = q.scales().granularity == Granularity::kPerTensor ? 1 : q.shape().at(0);
  const std::size_t cols = rows ? values.size() / rows : 0;
  if (q.scales().scales.size() != rows) throw DimensionError("scale count does not match quantized rows");
  for (std::size_t r = 0; r < rows; ++r) {
    const float s = q.scales().scales[r];
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t i = r * cols + c;
      out[i] = s == 0.0f ? 0.0f : static_cast<float>(values[i]) * s;
    }
  }
  return out;
}

}  // namespace randq
