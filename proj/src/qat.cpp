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

#include "randq/qat.hpp"

#include <algorithm>
#include <cmath>

#include "randq/error.hpp"
#include "randq/random.hpp"

namespace randq {
namespace {

// Multiplies by a double constant and rounds once to float.
Var scale_exact(const Var& a, double c) {
  Tensor out = a.value();
  for (float& v : out.data()) v = static_cast<float>(static_cast<double>(v) * c);
  return a.tape().record(std::move(out), {a}, [c](const BackwardContext& ctx) {
    Tensor& ga = *ctx.input_grads[0];
    for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += static_cast<float>(ctx.grad[i] * c);
  });
}

Axis scale_axis(Granularity g) { return g == Granularity::kPerTensor ? Axis::kAll : Axis::kRow; }

// Channel view of a weight: per-tensor treats the whole tensor as one row.
std::pair<std::size_t, std::size_t> channels(const Tensor& w, Granularity g) {
  if (w.rank() != 2) throw DimensionError("QAT weights must be matrices, got " + to_string(w.shape()));
  if (g == Granularity::kPerTensor) return {1, w.numel()};
  return {w.rows(), w.cols()};
}

void check_scale_count(const Tensor& s, std::size_t rows) {
  if (s.numel() != rows) {
    throw DimensionError("expected " + std::to_string(rows) + " scales, got " + std::to_string(s.numel()));
  }
}

// s * clip(round(w/s), l, u). dW: identity inside the grid range, zero where clipped.
// ds: sum of g * q, the integers held constant.
Var ste_quantize(const Var& w, const Var& s, const QuantSpec& spec) {
  const Tensor& wv = w.value();
  const Tensor& sv = s.value();
  const auto [rows, cols] = channels(wv, spec.granularity);
  check_scale_count(sv, rows);
  const auto l = static_cast<float>(spec.lower());
  const auto u = static_cast<float>(spec.upper());
  Tensor out(wv.shape());
  std::vector<float> q(wv.numel(), 0.0f);
  std::vector<char> inside(wv.numel(), 1);
  for (std::size_t r = 0; r < rows; ++r) {
    const float sc = sv[r];
    if (sc == 0.0f) continue;
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t i = r * cols + c;
      const float x = wv[i] / sc;
      const float rounded = std::round(x);
      q[i] = std::clamp(rounded, l, u);
      inside[i] = rounded >= l && rounded <= u;
      out[i] = q[i] * sc;
    }
  }
  return w.tape().record(std::move(out), {w, s},
                         [q = std::move(q), inside = std::move(inside), cols](const BackwardContext& ctx) {
                           if (Tensor* gw = ctx.input_grads[0]) {
                             for (std::size_t i = 0; i < q.size(); ++i) {
                               if (inside[i]) (*gw)[i] += ctx.grad[i];
                             }
                           }
                           if (Tensor* gs = ctx.input_grads[1]) {
                             for (std::size_t i = 0; i < q.size(); ++i) (*gs)[i / cols] += ctx.grad[i] * q[i];
                           }
                         });
}

Var add_noise(const Var& w, const Var& s, const Tensor& noise) {
  if (noise.shape() != w.shape()) {
    throw DimensionError("noise shape " + to_string(noise.shape()) + " does not match weight " + to_string(w.shape()));
  }
  Tape& tape = w.tape();
  Var z = tape.constant(noise);
  if (s.value().numel() == 1) return add(w, mul(z, s));
  return add(w, mul_rows(z, s));
}

}  // namespace

// --- names ------------------------------------------------------------------------

std::string to_string(QatMethod m) {
  switch (m) {
    case QatMethod::kNone: return "none";
    case QatMethod::kSte: return "ste";
    case QatMethod::kPqn: return "pqn";
  }
  return "?";
}

std::string to_string(OutlierMethod m) {
  switch (m) {
    case OutlierMethod::kNone: return "none";
    case OutlierMethod::kNorm: return "norm";
    case OutlierMethod::kMixed: return "mixed";
    case OutlierMethod::kLsc: return "lsc";
    case OutlierMethod::kVn: return "vn";
  }
  return "?";
}

QatMethod parse_qat_method(const std::string& text) {
  if (text == "none") return QatMethod::kNone;
  if (text == "ste") return QatMethod::kSte;
  if (text == "pqn") return QatMethod::kPqn;
  throw ConfigError("unknown qat method '" + text + "'");
}

OutlierMethod parse_outlier_method(const std::string& text) {
  if (text == "none") return OutlierMethod::kNone;
  if (text == "norm") return OutlierMethod::kNorm;
  if (text == "mixed") return OutlierMethod::kMixed;
  if (text == "lsc") return OutlierMethod::kLsc;
  if (text == "vn") return OutlierMethod::kVn;
  throw ConfigError("unknown outlier method '" + text + "'");
}

// --- config -------------------------------------------------------------------------

QatConfig QatConfig::qat_mode(QatMethod method, OutlierMethod outlier, int bit, Granularity granularity) {
  if (outlier != OutlierMethod::kNone && outlier != OutlierMethod::kNorm) {
    throw ConfigError("QAT mode takes outlier method none or norm");
  }
  QatConfig cfg;
  cfg.qat_method = method;
  cfg.outlier_method = outlier;
  cfg.bit = bit;
  cfg.granularity = granularity;
  cfg.p = kInfNorm;
  cfg.c = 1.0 / integer_bounds(bit).upper;
  cfg.stop_scale_gradient = outlier == OutlierMethod::kNone;
  return cfg;
}

QatConfig QatConfig::mixed_scale_mode(QatMethod method, std::size_t k, int bit, Granularity granularity) {
  QatConfig cfg = qat_mode(method, OutlierMethod::kNorm, bit, granularity);
  cfg.outlier_method = OutlierMethod::kMixed;
  cfg.p = 8.0;
  cfg.k = k;
  return cfg;
}

QatConfig QatConfig::generalization_mode(double c, int bit, Granularity granularity) {
  QatConfig cfg = qat_mode(QatMethod::kPqn, OutlierMethod::kNorm, bit, granularity);
  cfg.p = 2.0;
  cfg.c = c;
  return cfg;
}

QatConfig QatConfig::learnable_scale(QatMethod method, int bit, Granularity granularity) {
  QatConfig cfg = qat_mode(method, OutlierMethod::kNone, bit, granularity);
  cfg.outlier_method = OutlierMethod::kLsc;
  cfg.stop_scale_gradient = false;
  return cfg;
}

QatConfig QatConfig::variational_noise(float std) {
  QatConfig cfg;
  cfg.outlier_method = OutlierMethod::kVn;
  cfg.vn_std = std;
  return cfg;
}

void QatConfig::validate() const {
  if (bit < 2 || bit > 8) throw ConfigError("bit must be in [2, 8], got " + std::to_string(bit));
  const bool noise_or_ste = qat_method != QatMethod::kNone;
  switch (outlier_method) {
    case OutlierMethod::kNone:
      if (!stop_scale_gradient) throw ConfigError("outlier method none requires stop_scale_gradient");
      break;
    case OutlierMethod::kNorm:
    case OutlierMethod::kMixed:
    case OutlierMethod::kLsc:
      if (!noise_or_ste) throw ConfigError("outlier method " + to_string(outlier_method) + " needs qat method ste or pqn");
      break;
    case OutlierMethod::kVn:
      if (noise_or_ste) throw ConfigError("variational noise is a standalone method (qat method none)");
      if (!(vn_std >= 0.0f)) throw ConfigError("vn_std must be >= 0");
      break;
  }
  if (!is_inf_norm(p) && !(p >= 1.0)) throw ConfigError("p must be >= 1 or inf");
  if (!(c >= 0.0)) throw ConfigError("c must be >= 0");
  if (outlier_method == OutlierMethod::kMixed && k < 1) throw ConfigError("mixed scale needs k >= 1");
}

bool operator==(const QatConfig& a, const QatConfig& b) {
  return a.qat_method == b.qat_method && a.outlier_method == b.outlier_method && a.bit == b.bit &&
         a.granularity == b.granularity && a.p == b.p && a.c == b.c && a.k == b.k &&
         a.stop_scale_gradient == b.stop_scale_gradient && a.vn_std == b.vn_std;
}

// --- scales ---------------------------------------------------------------------------

Var rand_scale(const Var& w, const QatConfig& cfg) {
  const Axis axis = scale_axis(cfg.granularity);
  Var norm = cfg.outlier_method == OutlierMethod::kMixed ? topk_magnitude_lp_norm(w, cfg.p, cfg.k, axis)
                                                         : lp_norm(w, cfg.p, axis);
  Var s = scale_exact(norm, cfg.c);
  return cfg.stop_scale_gradient ? stop_gradient(s) : s;
}

ScaleSet rand_scale_values(const Tensor& w, const QatConfig& cfg) {
  Tape tape;
  const Tensor& s = rand_scale(tape.constant(w), cfg).value();
  return ScaleSet{std::vector<float>(s.data().begin(), s.data().end()), cfg.granularity};
}

// --- STE ------------------------------------------------------------------------------

Var ste_weight(const Var& w, const QatConfig& cfg) { return ste_quantize(w, rand_scale(w, cfg), cfg.spec()); }

Var ste_linear(const Var& x, const Var& w, const QatConfig& cfg) { return linear(x, ste_weight(w, cfg)); }

// --- PQN ------------------------------------------------------------------------------

Tensor pqn_noise(const Shape& shape, std::uint64_t seed) { return sample_uniform(shape, -0.5f, 0.5f, seed); }

Var pqn_weight(const Var& w, const QatConfig& cfg, const Tensor& noise) {
  channels(w.value(), cfg.granularity);
  return add_noise(w, rand_scale(w, cfg), noise);
}

Var pqn_linear(const Var& x, const Var& w, const QatConfig& cfg, std::uint64_t seed) {
  return pqn_linear(x, w, cfg, pqn_noise(w.shape(), seed));
}

Var pqn_linear(const Var& x, const Var& w, const QatConfig& cfg, const Tensor& noise) {
  return linear(x, pqn_weight(w, cfg, noise));
}

// --- LSC ------------------------------------------------------------------------------

float lsc_gradient_scale(const Tensor& w, const QatConfig& cfg) {
  const auto [rows, cols] = channels(w, cfg.granularity);
  (void)rows;
  return static_cast<float>(1.0 / std::sqrt(static_cast<double>(cols) * cfg.spec().upper()));
}

Var lsc_ste_quantize(const Var& w, const Var& s, const QuantSpec& spec) {
  const Tensor& wv = w.value();
  const Tensor& sv = s.value();
  const auto [rows, cols] = channels(wv, spec.granularity);
  check_scale_count(sv, rows);
  const auto l = static_cast<float>(spec.lower());
  const auto u = static_cast<float>(spec.upper());
  Tensor out(wv.shape());
  // d(out)/ds per entry and whether the weight gradient passes.
  std::vector<float> dscale(wv.numel(), 0.0f);
  std::vector<char> inside(wv.numel(), 0);
  for (std::size_t r = 0; r < rows; ++r) {
    const float sc = sv[r];
    if (!(sc > 0.0f)) throw ParameterError("learnable scales must be positive");
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t i = r * cols + c;
      const float x = wv[i] / sc;
      if (x < l) {
        out[i] = l * sc;
        dscale[i] = l;
      } else if (x > u) {
        out[i] = u * sc;
        dscale[i] = u;
      } else {
        const float q = std::round(x);
        out[i] = q * sc;
        dscale[i] = q - x;
        inside[i] = 1;
      }
    }
  }
  return w.tape().record(std::move(out), {w, s},
                         [dscale = std::move(dscale), inside = std::move(inside), cols](const BackwardContext& ctx) {
                           if (Tensor* gw = ctx.input_grads[0]) {
                             for (std::size_t i = 0; i < inside.size(); ++i) {
                               if (inside[i]) (*gw)[i] += ctx.grad[i];
                             }
                           }
                           if (Tensor* gs = ctx.input_grads[1]) {
                             for (std::size_t i = 0; i < dscale.size(); ++i) {
                               (*gs)[i / cols] += ctx.grad[i] * dscale[i];
                             }
                           }
                         });
}

Var lsc_clip(const Var& w, const Var& s, const QuantSpec& spec) {
  const Tensor& wv = w.value();
  const Tensor& sv = s.value();
  const auto [rows, cols] = channels(wv, spec.granularity);
  check_scale_count(sv, rows);
  const auto l = static_cast<float>(spec.lower());
  const auto u = static_cast<float>(spec.upper());
  Tensor out(wv.shape());
  std::vector<float> dscale(wv.numel(), 0.0f);
  for (std::size_t r = 0; r < rows; ++r) {
    const float lo = l * sv[r];
    const float hi = u * sv[r];
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t i = r * cols + c;
      if (wv[i] < lo) {
        out[i] = lo;
        dscale[i] = l;
      } else if (wv[i] > hi) {
        out[i] = hi;
        dscale[i] = u;
      } else {
        out[i] = wv[i];
      }
    }
  }
  return w.tape().record(std::move(out), {w, s}, [dscale = std::move(dscale), cols](const BackwardContext& ctx) {
    if (Tensor* gw = ctx.input_grads[0]) {
      for (std::size_t i = 0; i < gw->numel(); ++i) (*gw)[i] += ctx.grad[i];
    }
    if (Tensor* gs = ctx.input_grads[1]) {
      for (std::size_t i = 0; i < dscale.size(); ++i) (*gs)[i / cols] += ctx.grad[i] * dscale[i];
    }
  });
}

Var lsc_weight(const Var& w, const LscParams& lsc, const QatConfig& cfg, LscMode mode, const Tensor& noise) {
  if (!lsc.scales.valid()) throw ConfigError("learnable scale and clip needs LscParams");
  Var s = scale_grad(lsc.scales, lsc_gradient_scale(w.value(), cfg));
  if (mode == LscMode::kSte) return lsc_ste_quantize(w, s, cfg.spec());
  return add_noise(lsc_clip(w, s, cfg.spec()), s, noise);
}

Var lsc_linear(const Var& x, const Var& w, const LscParams& lsc, const QatConfig& cfg, LscMode mode,
               std::uint64_t seed) {
  const Tensor noise = mode == LscMode::kPqn ? pqn_noise(w.shape(), seed) : Tensor(w.shape());
  return linear(x, lsc_weight(w, lsc, cfg, mode, noise));
}

// --- VN -------------------------------------------------------------------------------

Var vn_weight(const Var& w, float std, std::uint64_t seed) {
  return add(w, w.tape().constant(sample_gaussian(w.shape(), std, seed)));
}

Var vn_linear(const Var& x, const Var& w, float std, std::uint64_t seed) { return linear(x, vn_weight(w, std, seed)); }

// --- dispatch ---------------------------------------------------------------------------

Var qat_weight(const Var& w, const QatConfig& cfg, const LscParams* lsc, std::uint64_t seed) {
  cfg.validate();
  if (cfg.needs_lsc() != (lsc != nullptr)) {
    throw ConfigError(cfg.needs_lsc() ? "outlier method lsc requires LscParams"
                                      : "LscParams given for a non-lsc configuration");
  }
  if (cfg.outlier_method == OutlierMethod::kVn) return vn_weight(w, cfg.vn_std, seed);
  if (cfg.needs_lsc()) {
    const LscMode mode = cfg.qat_method == QatMethod::kSte ? LscMode::kSte : LscMode::kPqn;
    const Tensor noise = mode == LscMode::kPqn ? pqn_noise(w.shape(), seed) : Tensor(w.shape());
    return lsc_weight(w, *lsc, cfg, mode, noise);
  }
  switch (cfg.qat_method) {
    case QatMethod::kNone: return w;
    case QatMethod::kSte: return ste_weight(w, cfg);
    case QatMethod::kPqn: return pqn_weight(w, cfg, pqn_noise(w.shape(), seed));
  }
  return w;
}

Var qat_linear(const Var& x, const Var& w, const QatConfig& cfg, const LscParams* lsc, std::uint64_t seed) {
  return linear(x, qat_weight(w, cfg, lsc, seed));
}

}  // namespace randq
