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

// Acceptance run. Prints one PASS/FAIL line per criterion (also written to
// acceptance_results.txt) and exits non-zero if any fails. Criteria can be selected by number: randq_acceptance 1 3 9.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "experiment_config.hpp"
#include "gradcheck.hpp"
#include "randq/checkpoint.hpp"
#include "randq/error.hpp"
#include "randq/eval.hpp"
#include "randq/qat.hpp"
#include "randq/quant.hpp"
#include "randq/random.hpp"
#include "randq/train.hpp"

namespace randq {
namespace {

namespace fs = std::filesystem;
using testing::gradcheck;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string list(const std::vector<double>& a) {
  std::string s;
  for (std::size_t i = 0; i < a.size(); ++i) s += fmt("%s%.3f", i ? " " : "", a[i]);
  return s;
}

std::string seeds_line(const std::vector<double>& a, const std::vector<double>& b) {
  std::string s;
  for (std::size_t i = 0; i < a.size(); ++i) s += fmt("%s%.3f/%.3f", i ? " " : "", a[i], b[i]);
  return s;
}

// --- random instances ----------------------------------------------------------

std::size_t pick(CounterRng& rng, std::size_t lo, std::size_t hi) { return lo + rng.next_below(hi - lo + 1); }

// Magnitudes at least 0.03 apart across the whole tensor and at least 0.1 from zero,
// random signs and positions: no ties for max or top-k within a finite-difference step.
Tensor separated_weights(const Shape& shape, CounterRng& rng) {
  Tensor w(shape);
  std::vector<std::size_t> order(w.numel());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.next_below(i)]);
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    const float mag = 0.1f + 0.04f * static_cast<float>(rank) + 0.01f * rng.next_unit();
    w[order[rank]] = rng.next_unit() < 0.5f ? -mag : mag;
  }
  return w;
}

Tensor gaussian(const Shape& shape, CounterRng& rng, float std = 1.0f) {
  return sample_gaussian(shape, std, rng.next_u64());
}

// --- 1. gradient oracle -------------------------------------------------------

Outcome criterion_gradients() {
  constexpr int kInstances = 100;
  constexpr double kTolerance = 1e-2;
  using Builder = std::function<testing::GradCheckResult(CounterRng&, std::uint64_t)>;
  const Granularity grans[] = {Granularity::kPerChannel, Granularity::kPerTensor};

  std::vector<std::pair<std::string, Builder>> ops;
  ops.emplace_back("matmul", [](CounterRng& rng, std::uint64_t seed) {
    const std::size_t m = pick(rng, 1, 6), k = pick(rng, 1, 8), n = pick(rng, 1, 6);
    const auto op = [](Tape&, const std::vector<Var>& v) { return matmul(v[0], v[1]); };
    return gradcheck(op, {gaussian({m, k}, rng), gaussian({k, n}, rng)}, seed);
  });
  ops.emplace_back("lp_norm", [](CounterRng& rng, std::uint64_t seed) {
    const double ps[] = {1.0, 2.0, 3.0, 4.0, 8.0, kInfNorm};
    const double p = ps[rng.next_below(6)];
    const Axis axis = rng.next_below(2) ? Axis::kRow : Axis::kAll;
    const auto op = [=](Tape&, const std::vector<Var>& v) { return lp_norm(v[0], p, axis); };
    return gradcheck(op, {separated_weights({pick(rng, 1, 5), pick(rng, 1, 9)}, rng)}, seed);
  });
  ops.emplace_back("topk_norm", [](CounterRng& rng, std::uint64_t seed) {
    const double p = rng.next_below(2) ? 8.0 : 2.0;
    const Axis axis = rng.next_below(2) ? Axis::kRow : Axis::kAll;
    const Shape shape{pick(rng, 1, 5), pick(rng, 2, 9)};
    const std::size_t limit = axis == Axis::kRow ? shape[1] : shape[0] * shape[1];
    const std::size_t k = pick(rng, 1, limit);
    const auto op = [=](Tape&, const std::vector<Var>& v) { return topk_magnitude_lp_norm(v[0], p, k, axis); };
    return gradcheck(op, {separated_weights(shape, rng)}, seed);
  });
  ops.emplace_back("pqn_linear", [&grans](CounterRng& rng, std::uint64_t seed) {
    const Shape shape{pick(rng, 1, 5), pick(rng, 2, 9)};
    const Granularity g = grans[rng.next_below(2)];
    const QatConfig cfg =
        rng.next_below(2) ? QatConfig::qat_mode(QatMethod::kPqn, OutlierMethod::kNorm, 4, g)
                          : QatConfig::mixed_scale_mode(QatMethod::kPqn, pick(rng, 1, shape[1]), 4, g);
    const Tensor noise = pqn_noise(shape, rng.next_u64());
    const auto op = [=](Tape&, const std::vector<Var>& v) { return pqn_linear(v[0], v[1], cfg, noise); };
    return gradcheck(op, {gaussian({pick(rng, 1, 4), shape[1]}, rng), separated_weights(shape, rng)}, seed);
  });
  ops.emplace_back("rand_scale", [&grans](CounterRng& rng, std::uint64_t seed) {
    const Shape shape{pick(rng, 1, 5), pick(rng, 2, 9)};
    const Granularity g = grans[rng.next_below(2)];
    QatConfig cfg;
    switch (rng.next_below(3)) {
      case 0: cfg = QatConfig::qat_mode(QatMethod::kPqn, OutlierMethod::kNorm, 4, g); break;
      case 1: cfg = QatConfig::mixed_scale_mode(QatMethod::kPqn, pick(rng, 1, shape[1]), 4, g); break;
      default: cfg = QatConfig::generalization_mode(0.05 + rng.next_unit(), 4, g); break;
    }
    const auto op = [=](Tape&, const std::vector<Var>& v) { return rand_scale(v[0], cfg); };
    return gradcheck(op, {separated_weights(shape, rng)}, seed);
  });
  ops.emplace_back("lsc_smooth", [&grans](CounterRng& rng, std::uint64_t seed) {
    const Shape shape{pick(rng, 1, 5), pick(rng, 2, 9)};
    const QatConfig cfg = QatConfig::learnable_scale(QatMethod::kPqn, 4, grans[rng.next_below(2)]);
    const std::size_t n_scales = cfg.granularity == Granularity::kPerChannel ? shape[0] : 1;
    const Tensor noise = pqn_noise(shape, rng.next_u64());
    const auto op = [=](Tape&, const std::vector<Var>& v) {
      const Var raw_s = scale_grad(v[2], 1.0f / lsc_gradient_scale(v[1].value(), cfg));
      return linear(v[0], lsc_weight(v[1], LscParams{raw_s}, cfg, LscMode::kPqn, noise));
    };
    // Scales in [0.1, 0.2] clip at 0.7; interior weights stay below 0.5, clipped ones sit at +-3.
    const Tensor scales = sample_uniform({n_scales}, 0.1f, 0.2f, rng.next_u64());
    Tensor w = sample_uniform(shape, -0.5f, 0.5f, rng.next_u64());
    const Tensor x = gaussian({pick(rng, 1, 4), shape[1]}, rng);
    if (rng.next_below(2)) return gradcheck(op, {x, w, scales}, seed);
    for (std::size_t i = 0; i < w.numel(); ++i) {
      if (rng.next_below(3) == 0) w[i] = rng.next_below(2) ? 3.0f : -3.0f;
    }
    return gradcheck(op, {x, w, scales}, seed, 1e-3, {0, 2});
  });

  bool pass = true;
  std::string detail;
  for (const auto& [name, build] : ops) {
    CounterRng rng(derive_key(2026, {hash_name(name)}));
    double worst = 0.0;
    for (int i = 0; i < kInstances; ++i) worst = std::max(worst, build(rng, static_cast<std::uint64_t>(i)).worst_relative_error);
    pass = pass && worst < kTolerance;
    detail += fmt("%s%s %.1e", detail.empty() ? "" : ", ", name.c_str(), worst);
  }
  return {pass, fmt("worst relative error over %d instances each: ", kInstances) + detail};
}

// --- 2. quantization invariants -------------------------------------------------

Outcome criterion_quantization() {
  constexpr int kTensors = 10000;
  CounterRng rng(derive_key(2026, {hash_name("quant")}));
  std::size_t bound = 0, noop = 0, idem = 0, pack = 0, entries = 0;
  for (int t = 0; t < kTensors; ++t) {
    const Shape shape{pick(rng, 1, 8), pick(rng, 1, 32)};
    const QuantSpec spec{static_cast<int>(pick(rng, 2, 8)),
                         rng.next_below(2) ? Granularity::kPerChannel : Granularity::kPerTensor};
    const float std = static_cast<float>(std::exp(-5.0 + 8.0 * rng.next_unit_double()));
    Tensor w = gaussian(shape, rng, std);
    if (rng.next_below(4) == 0) w[rng.next_below(w.numel())] *= 50.0f;
    if (rng.next_below(8) == 0) {
      for (float& v : w.row(rng.next_below(shape[0]))) v = 0.0f;
    }

    const ScaleSet scales = compute_scale(w, spec);
    const Tensor deq = dequantize(quantize(w, spec));
    const int u = spec.upper();
    for (std::size_t r = 0; r < shape[0]; ++r) {
      const float s = scales.for_row(r);
      for (std::size_t c = 0; c < shape[1]; ++c) {
        const float x = w.at(r, c);
        ++entries;
        if (s == 0.0f) {
          bound += deq.at(r, c) != 0.0f || x != 0.0f;
          continue;
        }
        // Independent rounding in double: the unclipped integer must already be in range.
        const double q = std::round(static_cast<double>(x) / static_cast<double>(s));
        noop += std::fabs(q) > u;
        const double ulp = std::nextafter(std::fabs(x), INFINITY) - std::fabs(x);
        bound += std::fabs(static_cast<double>(x) - deq.at(r, c)) > 0.5 * s + ulp;
      }
    }

    const Tensor fq = fake_quant(w, scales, spec);
    idem += !fake_quant(fq, scales, spec).bit_equal(fq);
    idem += !dequantize(quantize(deq, spec)).bit_equal(deq);

    std::vector<std::int8_t> values(w.numel());
    for (auto& v : values) v = static_cast<std::int8_t>(static_cast<int>(rng.next_below(16)) - 8);
    const auto packed = pack_int4(values);
    pack += packed.size() != (values.size() + 1) / 2 || unpack_int4(packed, values.size()) != values;
    if (packs_nibbles(spec.bit)) {
      const QuantizedTensor qt = quantize(w, spec);
      pack += QuantizedTensor::from_storage(qt.shape(), qt.bit(), qt.scales(), qt.storage()).integers() !=
              qt.integers();
    }
  }
  const bool pass = bound == 0 && noop == 0 && idem == 0 && pack == 0;
  return {pass, fmt("%d tensors, %zu entries; violations: round-trip bound %zu, clip no-op %zu, "
                    "idempotence %zu, int4 packing %zu",
                    kTensors, entries, bound, noop, idem, pack)};
}

// --- 3. PQN noise statistics ----------------------------------------------------

Outcome criterion_pqn_statistics() {
  constexpr std::size_t kSamples = 100000;
  constexpr std::size_t kChannels = 8;
  bool pass = true;
  double worst_mean = 0.0, worst_excess = 0.0, worst_coverage = 1.0;
  for (Granularity g : {Granularity::kPerChannel, Granularity::kPerTensor}) {
    Tensor w = sample_gaussian({kChannels, kSamples}, 1.0f, 77);
    for (std::size_t r = 0; r < kChannels; ++r) {
      for (float& v : w.row(r)) v *= std::pow(10.0f, static_cast<float>(r) - 4.0f);
    }
    const QatConfig cfg = QatConfig::qat_mode(QatMethod::kPqn, OutlierMethod::kNone, 4, g);
    const ScaleSet scales = rand_scale_values(w, cfg);
    const Tensor noise = pqn_noise(w.shape(), derive_key(5, {hash_name("enc.0.ff1"), 1}));
    Tape tape;
    const Tensor out = pqn_weight(tape.constant(w), cfg, noise).value();
    for (std::size_t r = 0; r < kChannels; ++r) {
      const double s = scales.for_row(r);
      double sum = 0.0, lo = INFINITY, hi = -INFINITY;
      for (std::size_t c = 0; c < kSamples; ++c) {
        // The scaled noise itself must lie in [-s/2, s/2] exactly.
        const float injected = static_cast<float>(s) * noise.at(r, c);
        pass = pass && std::fabs(injected) <= 0.5f * static_cast<float>(s);
        // What the layer sees, up to the rounding of the addition.
        const double seen = static_cast<double>(out.at(r, c)) - w.at(r, c);
        const float x = std::fabs(w.at(r, c)) + std::fabs(out.at(r, c));
        const double slack = std::nextafter(x, INFINITY) - x;
        worst_excess = std::max(worst_excess, (std::fabs(seen) - 0.5 * s) / s);
        pass = pass && std::fabs(seen) <= 0.5 * s + slack;
        sum += injected;
        lo = std::min<double>(lo, injected);
        hi = std::max<double>(hi, injected);
      }
      const double mean = sum / kSamples / s;
      worst_mean = std::max(worst_mean, std::fabs(mean));
      worst_coverage = std::min({worst_coverage, -lo / s, hi / s});
      pass = pass && std::fabs(mean) <= 0.01;
    }
  }
  return {pass, fmt("%zu samples x %zu channels, both granularities: worst |mean|/s %.2e (limit 1e-2), "
                    "support reaches +-%.5f s, worst excess beyond s/2 %.1e s",
                    kSamples, kChannels, worst_mean, worst_coverage, std::max(0.0, worst_excess))};
}

// --- toy-task criteria ------------------------------------------------------------

const cli::ExperimentConfig& toy() {
  static const cli::ExperimentConfig cfg =
      cli::resolve(fs::path(RANDQ_CONFIG_DIR) / "acceptance.json", {}, nullptr);
  return cfg;
}

const std::pair<Dataset, Dataset>& toy_data() {
  static const auto data = generate_dataset(toy().task);
  return data;
}

Checkpoint train_toy(const QatConfig& qat, std::uint64_t seed, int steps = 0) {
  TrainConfig tc = toy().train;
  tc.seed = seed;
  if (steps > 0) tc.steps = steps;
  tc.qat = qat.is_identity() ? QatMap{} : uniform_qat(toy().model, qat);
  return train(init_model(toy().model, seed), toy_data().first, toy_data().second, tc).checkpoint;
}

double mean_channel_max_abs(const Checkpoint& ckpt) {
  double total = 0.0;
  std::size_t n = 0;
  for (const LayerInfo& layer : quantizable_layers(ckpt.model)) {
    const Tensor& w = ckpt.params.at(weight_name(layer.name));
    for (std::size_t r = 0; r < w.rows(); ++r) {
      float m = 0.0f;
      for (float v : w.row(r)) m = std::max(m, std::fabs(v));
      total += m;
      ++n;
    }
  }
  return total / static_cast<double>(n);
}

Outcome criterion_norm_decay() {
  const SweepCell& decay = toy().grid.at(1);  // pqn / norm / per_tensor
  QatConfig stopped = decay.qat;
  stopped.stop_scale_gradient = true;
  std::vector<double> a, b;
  int wins = 0;
  for (std::uint64_t seed : decay.seeds) {
    a.push_back(mean_channel_max_abs(train_toy(decay.qat, seed)));
    b.push_back(mean_channel_max_abs(train_toy(stopped, seed)));
    wins += a.back() < b.back();
    std::fprintf(stderr, "  norm decay seed %llu: %.4f vs %.4f\n", static_cast<unsigned long long>(seed), a.back(),
                 b.back());
  }
  return {wins >= 4, fmt("%d/%zu seeds smaller mean per-channel max|W| with the scale gradient (flowing/stopped: ",
                         wins, a.size()) +
                         seeds_line(a, b) + ")"};
}

// Sweep over the acceptance grid, computed once for criteria 5 to 8.
struct SweepTable {
  std::vector<ReportRow> rows;

  // int4/int8/float error of a grid cell per seed, in seed order.
  std::vector<double> error(const SweepCell& cell, const std::string& precision) const {
    std::vector<double> out;
    for (std::uint64_t seed : cell.seeds) {
      for (const ReportRow& r : rows) {
        if (r.outlier_method == cell.qat.outlier_method && r.qat_method == cell.qat.qat_method &&
            r.granularity == cell.qat.granularity && r.seed == seed && r.eval_precision == precision) {
          out.push_back(r.converged ? r.sequence_error_rate : INFINITY);
        }
      }
    }
    if (out.size() != cell.seeds.size()) throw ContractError("sweep row missing for " + precision);
    return out;
  }
};

const SweepTable& sweep() {
  static const SweepTable table = [] {
    SweepOptions opt;
    opt.task = toy().task;
    opt.model = toy().model;
    opt.train = toy().train;
    opt.use_ema = toy().eval.use_ema;
    opt.workers = toy().workers;
    opt.on_run = [](const SweepCell& c, std::uint64_t seed, bool converged) {
      std::fprintf(stderr, "  sweep %s/%s/%s seed %llu%s\n", to_string(c.qat.outlier_method).c_str(),
                   to_string(c.qat.qat_method).c_str(), to_string(c.qat.granularity).c_str(),
                   static_cast<unsigned long long>(seed), converged ? "" : " diverged");
    };
    SweepTable t;
    t.rows = run_sweep(toy().grid, opt);
    write_report(t.rows, "acceptance_report.csv");
    return t;
  }();
  return table;
}

Outcome criterion_per_tensor_trend() {
  const auto none = sweep().error(toy().grid.at(0), "int4");
  const auto norm = sweep().error(toy().grid.at(1), "int4");
  int wins = 0;
  for (std::size_t i = 0; i < none.size(); ++i) wins += none[i] > norm[i];
  return {wins >= 4, fmt("%d/%zu seeds int4 error none > norm (none/norm: ", wins, none.size()) +
                         seeds_line(none, norm) + ")"};
}

Outcome criterion_per_channel_trend() {
  const auto tensor = sweep().error(toy().grid.at(1), "int4");
  const auto channel = sweep().error(toy().grid.at(2), "int4");
  int wins = 0;
  for (std::size_t i = 0; i < tensor.size(); ++i) wins += channel[i] < tensor[i];
  return {wins >= 4, fmt("%d/%zu seeds int4 error per-channel < per-tensor (channel/tensor: ", wins, tensor.size()) +
                         seeds_line(channel, tensor) + ")"};
}

Outcome criterion_multi_precision() {
  const SweepCell& cell = toy().grid.at(2);
  const auto f = sweep().error(cell, "float");
  const auto i8 = sweep().error(cell, "int8");
  const auto i4 = sweep().error(cell, "int4");
  const double n = toy().task.n_eval;
  int ordered = 0, close = 0;
  double widest = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i) {
    ordered += i8[i] <= i4[i];
    // Two binomial standard errors at the pooled rate, floored at one sequence.
    const double p = std::max((f[i] + i8[i]) / 2.0, 1.0 / n);
    const double noise = 2.0 * std::sqrt(p * (1.0 - p) / n);
    widest = std::max(widest, noise);
    close += std::fabs(i8[i] - f[i]) <= noise;
  }
  const bool pass = ordered >= 4 && close >= 4;
  return {pass, fmt("int8 <= int4 on %d/%zu, |int8 - float| within 2 binomial SE (<= %.4f) on %d/%zu "
                    "(float/int8: ",
                    ordered, f.size(), widest, close, f.size()) +
                    seeds_line(f, i8) + "; int4: " + list(i4) + ")"};
}

Outcome criterion_mixed_scale() {
  const auto tensor = sweep().error(toy().grid.at(1), "int4");
  const auto channel = sweep().error(toy().grid.at(2), "int4");
  const auto mixed = sweep().error(toy().grid.at(3), "int4");
  int between = 0;
  std::string per_seed;
  for (std::size_t i = 0; i < mixed.size(); ++i) {
    between += channel[i] <= mixed[i] && mixed[i] <= tensor[i];
    per_seed += fmt("%s%.3f<=%.3f<=%.3f", i ? " " : "", channel[i], mixed[i], tensor[i]);
  }
  return {between * 2 > static_cast<int>(mixed.size()),
          fmt("%d/%zu seeds per-channel <= mixed per-tensor <= per-tensor in int4 error (", between, mixed.size()) +
              per_seed + ")"};
}

// --- 9. determinism and persistence ---------------------------------------------

Outcome criterion_determinism() {
  std::vector<std::string> failures;
  const auto check = [&](bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  };

  // Same seed and config, twice, for each training mode that draws random numbers.
  const QatConfig modes[] = {
      toy().grid.at(1).qat,
      QatConfig::learnable_scale(QatMethod::kPqn, 4, Granularity::kPerChannel),
      QatConfig::qat_mode(QatMethod::kSte, OutlierMethod::kNorm, 4, Granularity::kPerChannel),
      QatConfig::variational_noise(0.01f),
  };
  Checkpoint reference;
  for (const QatConfig& q : modes) {
    const Checkpoint a = train_toy(q, 3, 40);
    const Checkpoint b = train_toy(q, 3, 40);
    check(bit_identical(a, b), "training " + to_string(q.outlier_method) + " not bit-identical");
    if (reference.params.empty()) reference = a;
  }
  check(!bit_identical(train_toy(modes[0], 4, 40), reference), "different seeds gave identical checkpoints");

  // Save/load round trips for a checkpoint and a quantized artifact.
  const fs::path dir = fs::temp_directory_path() / "randq_acceptance";
  fs::create_directories(dir);
  const Checkpoint artifact = ptq_checkpoint(reference, uniform_assignment(reference.model, Precision::kInt4));
  const std::pair<const char*, const Checkpoint*> saved[] = {{"checkpoint", &reference}, {"artifact", &artifact}};
  for (const auto& [name, ckpt] : saved) {
    const fs::path path = dir / (std::string(name) + ".bin");
    save_checkpoint(*ckpt, path);
    const Checkpoint loaded = load_checkpoint(path);
    check(bit_identical(loaded, *ckpt), std::string(name) + " round trip");
    bool tensors_equal = loaded.params.size() == ckpt->params.size();
    for (const auto& [k, t] : ckpt->params) tensors_equal = tensors_equal && loaded.params.at(k).bit_equal(t);
    check(tensors_equal, std::string(name) + " tensors differ after load");
  }

  // Sweep reports: identical bytes across repeats and worker counts.
  SweepOptions opt;
  opt.task = toy().task;
  opt.task.n_eval = 100;
  opt.model = toy().model;
  opt.train = toy().train;
  opt.train.steps = 30;
  const std::vector<SweepCell> grid{{toy().grid.at(1).qat, {1, 2}}, {toy().grid.at(3).qat, {1}}};
  std::string first;
  for (int workers : {1, 2, 1}) {
    opt.workers = workers;
    const auto rows = run_sweep(grid, opt);
    const fs::path path = dir / "report.csv";
    write_report(rows, path);
    std::ifstream is(path, std::ios::binary);
    const std::string bytes{std::istreambuf_iterator<char>(is), {}};
    if (first.empty()) {
      first = bytes;
      check(read_report(path) == rows, "report read back differs");
    } else {
      check(bytes == first, fmt("report with %d workers differs", workers));
    }
  }

  // Corruption: every truncation plus random damage must be a FormatError or a valid parse.
  std::size_t trials = 0, rejected = 0, crashes = 0;
  const auto attempt = [&](const std::string& bytes) {
    ++trials;
    try {
      (void)deserialize_checkpoint(bytes);
    } catch (const FormatError&) {
      ++rejected;
    } catch (...) {
      ++crashes;
    }
  };
  const std::string good = serialize_checkpoint(artifact);
  for (std::size_t n = 0; n < good.size(); n += (n < 4096 ? 1 : 97)) attempt(good.substr(0, n));
  CounterRng rng(derive_key(2026, {hash_name("corrupt")}));
  for (int i = 0; i < 5000; ++i) {
    std::string bad = good;
    // Damage concentrated in the headers, where structure lives.
    const std::size_t span = rng.next_below(2) ? std::min<std::size_t>(bad.size(), 2048) : bad.size();
    switch (rng.next_below(4)) {
      case 0: bad[rng.next_below(span)] ^= static_cast<char>(1u << rng.next_below(8)); break;
      case 1: bad[rng.next_below(span)] = static_cast<char>(rng.next_below(256)); break;
      case 2: bad.insert(rng.next_below(span), 1, static_cast<char>(rng.next_below(256))); break;
      default: bad.erase(rng.next_below(span), 1 + rng.next_below(8)); break;
    }
    attempt(bad);
  }
  check(crashes == 0, fmt("%zu corrupted inputs raised something other than FormatError", crashes));
  fs::remove_all(dir);

  std::string detail = fmt("4 training modes bit-identical, round trips exact, reports identical across "
                           "workers 1/2; %zu corrupted checkpoints: %zu FormatError, %zu parsed, %zu other",
                           trials, rejected, trials - rejected - crashes, crashes);
  for (const std::string& f : failures) detail += "; FAILED: " + f;
  return {failures.empty(), detail};
}

// --- 10. size accounting --------------------------------------------------------

Outcome criterion_sizes() {
  std::vector<ModelConfig> archs{toy().model, ModelConfig{}};
  ModelConfig tiny;
  tiny.n_enc_layers = tiny.n_dec_layers = 1;
  tiny.d_model = 8;
  tiny.n_heads = 2;
  tiny.d_ff = 16;
  tiny.vocab_size = 8;
  archs.push_back(tiny);
  std::size_t cases = 0, bad = 0;
  std::string sample;
  for (ModelConfig m : archs) {
    for (QuantizeScope scope : {QuantizeScope::kEncoderOnly, QuantizeScope::kAllDense}) {
      m.quantize_scope = scope;
      Checkpoint ckpt;
      ckpt.model = m;
      ckpt.params = init_model(m, 1).params;
      ckpt.ema = ckpt.params;
      for (Granularity g : {Granularity::kPerChannel, Granularity::kPerTensor}) {
        std::size_t sizes[3];
        int i = 0;
        for (Precision p : {Precision::kFloat, Precision::kInt8, Precision::kInt4}) {
          const std::size_t planned = model_size_bytes(m, uniform_assignment(m, p), g);
          const std::size_t actual = model_size_bytes(ptq_checkpoint(ckpt, uniform_assignment(m, p), {g, true, 0}));
          bad += planned != actual;
          sizes[i++] = actual;
        }
        ++cases;
        bad += !(sizes[0] > sizes[1] && sizes[1] > sizes[2]);
        if (sample.empty()) sample = fmt("acceptance model: %zu > %zu > %zu bytes", sizes[0], sizes[1], sizes[2]);
      }
    }
  }
  return {bad == 0, fmt("%zu architecture/scope/granularity cases strictly decreasing float > int8 > int4, "
                        "%zu violations; ",
                        cases, bad) +
                        sample};
}

}  // namespace
}  // namespace randq

int main(int argc, char** argv) {
  using namespace randq;
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"gradient oracle", criterion_gradients},
      {"quantization invariants", criterion_quantization},
      {"PQN noise statistics", criterion_pqn_statistics},
      {"norm decay shrinks channel maxima", criterion_norm_decay},
      {"per-tensor int4: norm beats none", criterion_per_tensor_trend},
      {"per-channel beats per-tensor", criterion_per_channel_trend},
      {"multi-precision int8", criterion_multi_precision},
      {"mixed scale between per-tensor and per-channel", criterion_mixed_scale},
      {"determinism and persistence", criterion_determinism},
      {"monotone model size", criterion_sizes},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  // The same lines also go to a file: ctest hides the output of passing tests.
  std::ofstream results("acceptance_results.txt");
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failed += !o.pass;
    const std::string line =
        fmt("%s %d %s: ", o.pass ? "PASS" : "FAIL", id, criteria[i].first) + o.detail + fmt(" [%.1fs]", secs);
    std::printf("%s\n", line.c_str());
    std::fflush(stdout);
    results << line << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
