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
#include <optional>
#include <string>

#include "randq/autodiff.hpp"
#include "randq/quant.hpp"

namespace randq {

enum class QatMethod { kNone, kSte, kPqn };
enum class OutlierMethod { kNone, kNorm, kMixed, kLsc, kVn };

std::string to_string(QatMethod m);
std::string to_string(OutlierMethod m);
QatMethod parse_qat_method(const std::string& text);
OutlierMethod parse_outlier_method(const std::string& text);

// How one linear layer is trained. The norm-based scale is s_i = c * ||W_i||_p
// (or the top-k variant for kMixed); stop_scale_gradient cuts the scale out of
// the backward pass so it only sizes the noise.
struct QatConfig {
  QatMethod qat_method = QatMethod::kNone;
  OutlierMethod outlier_method = OutlierMethod::kNone;
  int bit = 4;
  Granularity granularity = Granularity::kPerChannel;
  double p = kInfNorm;
  double c = 1.0 / 7.0;
  std::size_t k = 8;
  bool stop_scale_gradient = true;
  float vn_std = 0.0f;

  // p = inf, c = 1/(2^(bit-1)-1). outlier must be kNone (scale gradient stopped)
  // or kNorm (scale gradient flows: norm decay).
  static QatConfig qat_mode(QatMethod method, OutlierMethod outlier, int bit, Granularity granularity);
  // p = 8 over the k largest magnitudes, c = 1/(2^(bit-1)-1), gradient flows.
  static QatConfig mixed_scale_mode(QatMethod method, std::size_t k, int bit, Granularity granularity);
  // p = 2 with a free c >= 0, gradient flows.
  static QatConfig generalization_mode(double c, int bit, Granularity granularity);
  static QatConfig learnable_scale(QatMethod method, int bit, Granularity granularity);
  static QatConfig variational_noise(float std);

  QuantSpec spec() const { return QuantSpec{bit, granularity}; }
  bool needs_lsc() const { return outlier_method == OutlierMethod::kLsc; }
  bool is_identity() const { return qat_method == QatMethod::kNone && outlier_method == OutlierMethod::kNone; }

  // Throws ConfigError on combinations that have no operator.
  void validate() const;
};

bool operator==(const QatConfig& a, const QatConfig& b);

// Learnable scales for one layer: one per channel (or one per tensor).
struct LscParams {
  Var scales;
};

inline constexpr float kMinLearnableScale = 1e-8f;

// --- scales -------------------------------------------------------------------

// c * ||W_i||_p per row (per channel) or c * ||W||_p (per tensor, scalar). kMixed
// uses the top-k magnitude norm. Wrapped in stop_gradient when requested.
Var rand_scale(const Var& w, const QatConfig& cfg);
ScaleSet rand_scale_values(const Tensor& w, const QatConfig& cfg);

// --- operators ------------------------------------------------------------------

// Each *_weight returns the effective weight the layer multiplies with; each
// *_linear applies it to x [R x N] for w [M x N].

// Real quantization noise: s * clip(round(W / s), l, u) with round treated as identity
// in backward. The scale path sees the rounded integers as constants.
Var ste_weight(const Var& w, const QatConfig& cfg);
Var ste_linear(const Var& x, const Var& w, const QatConfig& cfg);

// Unif[-1/2, 1/2] noise of W's shape for a given stream key.
Tensor pqn_noise(const Shape& shape, std::uint64_t seed);

// W + s * Z with the noise supplied (pinned) or drawn from `seed`.
Var pqn_weight(const Var& w, const QatConfig& cfg, const Tensor& noise);
Var pqn_linear(const Var& x, const Var& w, const QatConfig& cfg, std::uint64_t seed);
Var pqn_linear(const Var& x, const Var& w, const QatConfig& cfg, const Tensor& noise);

enum class LscMode { kSte, kPqn };

// 1 / sqrt(weights_per_scale * u), the learned-step-size gradient scaling.
float lsc_gradient_scale(const Tensor& w, const QatConfig& cfg);

// Learnable scale and clip. STE mode quantizes with the learned scale; PQN mode clips
// W to [s*l, s*u] (gradient passes straight through the clip) and adds s * Z.
Var lsc_weight(const Var& w, const LscParams& lsc, const QatConfig& cfg, LscMode mode, const Tensor& noise);
Var lsc_linear(const Var& x, const Var& w, const LscParams& lsc, const QatConfig& cfg, LscMode mode,
               std::uint64_t seed);

// Raw operators with unscaled learned-step-size gradients, exposed for testing.
Var lsc_ste_quantize(const Var& w, const Var& s, const QuantSpec& spec);
Var lsc_clip(const Var& w, const Var& s, const QuantSpec& spec);

// W + eps with eps ~ N(0, std^2), independent of W.
Var vn_weight(const Var& w, float std, std::uint64_t seed);
Var vn_linear(const Var& x, const Var& w, float std, std::uint64_t seed);

// Routes to the operator selected by cfg. lsc must be given iff outlier is kLsc.
Var qat_weight(const Var& w, const QatConfig& cfg, const LscParams* lsc, std::uint64_t seed);
Var qat_linear(const Var& x, const Var& w, const QatConfig& cfg, const LscParams* lsc, std::uint64_t seed);

}  // namespace randq
