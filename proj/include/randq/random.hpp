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

#include <cstdint>
#include <initializer_list>
#include <string_view>

#include "randq/tensor.hpp"

namespace randq {

// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Folds a path of identifiers (layer id, step, purpose tag, ...) into a stream key.
// Streams keyed this way do not depend on the order in which they are consumed.
std::uint64_t derive_key(std::uint64_t seed, std::initializer_list<std::uint64_t> path);

// Stable 64-bit hash of a string, for turning names into key components.
std::uint64_t hash_name(std::string_view name);

// Counter-based generator: the i-th draw of a stream is a pure function of (key, i).
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t key) : key_(key) {}

  std::uint64_t at(std::uint64_t counter) const {
    return mix64(key_ ^ mix64(counter * 0xd1b54a32d192ed03ULL + 0x632be59bd9b4e019ULL));
  }
  std::uint64_t next_u64() { return at(counter_++); }

  // Uniform in [0, 1) with 24 random bits, exactly representable in float.
  float next_unit() { return static_cast<float>(next_u64() >> 40) * 0x1.0p-24f; }
  // Uniform in [0, 1) with 53 random bits.
  double next_unit_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  // Uniform integer in [0, n). n must be positive.
  std::uint64_t next_below(std::uint64_t n);
  // Standard normal via Box-Muller on two draws.
  double next_normal();

  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

// i.i.d. samples in [lo, hi]. Deterministic in (shape, seed). Throws ParameterError if lo > hi.
Tensor sample_uniform(const Shape& shape, float lo, float hi, std::uint64_t seed);

// i.i.d. N(0, std^2) samples. Throws ParameterError if std < 0.
Tensor sample_gaussian(const Shape& shape, float std, std::uint64_t seed);

}  // namespace randq
