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

#include "randq/random.hpp"

#include <cmath>
#include <numbers>
#include <string_view>

#include "randq/error.hpp"

namespace randq {

std::uint64_t derive_key(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
  std::uint64_t key = mix64(seed);
  for (std::uint64_t part : path) key = mix64(key ^ mix64(part + 0x2545f4914f6cdd1dULL));
  return key;
}

std::uint64_t hash_name(std::string_view name) {
  // FNV-1a, then finalized.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : name) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return mix64(h);
}

std::uint64_t CounterRng::next_below(std::uint64_t n) {
  // Rejection keeps the draw unbiased.
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
  std::uint64_t x = next_u64();
  while (x >= limit) x = next_u64();
  return x % n;
}

double CounterRng::next_normal() {
  const double u1 = 1.0 - next_unit_double();  // (0, 1]
  const double u2 = next_unit_double();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

Tensor sample_uniform(const Shape& shape, float lo, float hi, std::uint64_t seed) {
  if (!(lo <= hi)) throw ParameterError("sample_uniform: lo > hi");
  Tensor out(shape);
  CounterRng rng(seed);
  const double width = static_cast<double>(hi) - static_cast<double>(lo);
  for (float& v : out.data()) {
    const double x = static_cast<double>(lo) + width * static_cast<double>(rng.next_unit());
    v = std::min(hi, std::max(lo, static_cast<float>(x)));
  }
  return out;
}

Tensor sample_gaussian(const Shape& shape, float std, std::uint64_t seed) {
  if (!(std >= 0.0f)) throw ParameterError("sample_gaussian: std < 0");
  Tensor out(shape);
  CounterRng rng(seed);
  for (float& v : out.data()) v = static_cast<float>(static_cast<double>(std) * rng.next_normal());
  return out;
}

}  // namespace randq
