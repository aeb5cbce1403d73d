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

#include "randq/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "randq/error.hpp"
#include "randq/random.hpp"

namespace randq {

void TrainConfig::validate() const {
  if (steps < 0) throw ConfigError("steps must be non-negative");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (warmup_steps < 1) throw ConfigError("warmup_steps must be at least 1");
  if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw ConfigError("ema_decay must lie in [0, 1)");
  if (!(base_lr > 0.0)) throw ConfigError("base_lr must be positive");
  if (eval_every < 0) throw ConfigError("eval_every must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas must lie in [0, 1)");
  if (!(epsilon > 0.0)) throw ConfigError("Adam epsilon must be positive");
  if (grad_clip < 0.0) throw ConfigError("grad_clip must be non-negative");
  for (const auto& [group, qat] : qat) qat.validate();
}

namespace {

std::string number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string canonical_text(const TrainConfig& cfg) {
  std::ostringstream os;
  os << "steps=" << cfg.steps << "\nbatch_size=" << cfg.batch_size << "\nbase_lr=" << number(cfg.base_lr)
     << "\nwarmup_steps=" << cfg.warmup_steps << "\nema_decay=" << number(cfg.ema_decay) << "\nseed=" << cfg.seed
     << "\neval_every=" << cfg.eval_every << "\nbeta1=" << number(cfg.beta1) << "\nbeta2=" << number(cfg.beta2)
     << "\nepsilon=" << number(cfg.epsilon) << "\ngrad_clip=" << number(cfg.grad_clip) << '\n';
  for (const auto& [group, q] : cfg.qat) {
    const std::string g = "qat." + to_string(group) + ".";
    os << g << "qat_method=" << to_string(q.qat_method) << '\n'
       << g << "outlier_method=" << to_string(q.outlier_method) << '\n'
       << g << "bit=" << q.bit << '\n'
       << g << "granularity=" << to_string(q.granularity) << '\n'
       << g << "p=" << (is_inf_norm(q.p) ? std::string("inf") : number(q.p)) << '\n'
       << g << "c=" << number(q.c) << '\n'
       << g << "k=" << q.k << '\n'
       << g << "stop_scale_gradient=" << (q.stop_scale_gradient ? "true" : "false") << '\n'
       << g << "vn_std=" << number(q.vn_std) << '\n';
  }
  return os.str();
}

std::string config_digest(const TrainConfig& cfg) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash_name(canonical_text(cfg))));
  return buf;
}

double lr_schedule(long step, double base_lr, int warmup, int d_model) {
  if (step < 1) throw ParameterError("lr_schedule: step must be at least 1, got " + std::to_string(step));
  if (warmup < 1 || d_model < 1) throw ParameterError("lr_schedule: warmup and d_model must be positive");
  const auto s = static_cast<double>(step);
  return base_lr / std::sqrt(static_cast<double>(d_model)) *
         std::min(1.0 / std::sqrt(s), s * std::pow(static_cast<double>(warmup), -1.5));
}

void adam_step(ParamMap& params, const ParamMap& grads, AdamState& state, double lr, const AdamOptions& opt) {
  for (const auto& [name, g] : grads) {
    const auto it = params.find(name);
    if (it == params.end()) throw ContractError("gradient for unknown parameter '" + name + "'");
    if (g.shape() != it->second.shape()) {
      throw ContractError("gradient shape " + to_string(g.shape()) + " for parameter '" + name + "' of shape " +
                          to_string(it->second.shape()));
    }
  }
  ++state.t;
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.t));
  for (auto& [name, p] : params) {
    Tensor& m = state.m.try_emplace(name, p.shape()).first->second;
    Tensor& v = state.v.try_emplace(name, p.shape()).first->second;
    if (m.shape() != p.shape() || v.shape() != p.shape()) {
      throw ContractError("optimizer state for '" + name + "' does not match the parameter shape");
    }
    const auto git = grads.find(name);
    const Tensor* g = git == grads.end() ? nullptr : &git->second;
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const double gi = g ? (*g)[i] : 0.0;
      const double mi = opt.beta1 * m[i] + (1.0 - opt.beta1) * gi;
      const double vi = opt.beta2 * v[i] + (1.0 - opt.beta2) * gi * gi;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      p[i] = static_cast<float>(p[i] - lr * (mi / c1) / (std::sqrt(vi / c2) + opt.epsilon));
    }
  }
}

void ema_update(ParamMap& shadow, const ParamMap& params, double decay) {
  for (const auto& [name, p] : params) {
    auto [it, fresh] = shadow.try_emplace(name, p);
    if (fresh) continue;
    Tensor& s = it->second;
    if (s.shape() != p.shape()) throw ContractError("EMA shadow for '" + name + "' has the wrong shape");
    for (std::size_t i = 0; i < p.numel(); ++i) s[i] = static_cast<float>(decay * s[i] + (1.0 - decay) * p[i]);
  }
}

double evaluate_loss(const Model& model, const Dataset& data, int batch_size) {
  if (data.empty()) return 0.0;
  double loss_sum = 0.0;
  std::size_t tokens = 0;
  const auto step = static_cast<std::size_t>(std::max(batch_size, 1));
  for (std::size_t begin = 0; begin < data.size(); begin += step) {
    const std::span<const Example> chunk(data.data() + begin, std::min(step, data.size() - begin));
    const Batch b = make_batch(chunk, model.config.vocab_size);
    const auto scored = static_cast<std::size_t>(std::count(b.target_mask.begin(), b.target_mask.end(), 1));
    loss_sum += static_cast<double>(forward_loss(model, b)) * static_cast<double>(scored);
    tokens += scored;
  }
  return loss_sum / static_cast<double>(tokens);
}

EvalMetrics evaluate_metrics(const Model& model, const Dataset& data, int batch_size) {
  EvalMetrics out;
  if (data.empty()) return out;
  out.loss = evaluate_loss(model, data, batch_size);
  int max_len = 0;
  std::vector<std::vector<int>> sources;
  std::vector<std::vector<int>> targets;
  for (const Example& ex : data) {
    max_len = std::max(max_len, static_cast<int>(ex.target.size()) + 1);
    sources.push_back(ex.source);
    targets.push_back(ex.target);
  }
  std::vector<std::vector<int>> predictions;
  const auto step = static_cast<std::size_t>(std::max(batch_size, 1));
  for (std::size_t begin = 0; begin < sources.size(); begin += step) {
    const std::span<const std::vector<int>> chunk(sources.data() + begin, std::min(step, sources.size() - begin));
    for (auto& p : greedy_decode(model, chunk, max_len)) predictions.push_back(std::move(p));
  }
  out.sequence_error_rate = sequence_error_rate(predictions, targets);
  return out;
}

void write_trace(const std::vector<TraceRow>& rows, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  os << "step,split,loss,sequence_error_rate,precision\n";
  char buf[64];
  for (const TraceRow& r : rows) {
    os << r.step << ',' << r.split << ',';
    std::snprintf(buf, sizeof buf, "%.9g", r.loss);
    os << buf << ',';
    std::snprintf(buf, sizeof buf, "%.9g", r.sequence_error_rate);
    os << buf << ',' << r.precision << '\n';
  }
  if (!os) throw Error("write to " + path.string() + " failed");
}

namespace {

void clip_global_norm(ParamMap& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, g] : grads) {
    for (float x : g.data()) sq += static_cast<double>(x) * x;
  }
  const double norm = std::sqrt(sq);
  if (norm <= max_norm) return;
  const double factor = max_norm / norm;
  for (auto& [name, g] : grads) {
    for (float& x : g.data()) x = static_cast<float>(x * factor);
  }
}

void clamp_learnable_scales(ParamMap& params) {
  constexpr std::string_view suffix = ".lsc_scale";
  for (auto& [name, t] : params) {
    if (!name.ends_with(suffix)) continue;
    for (float& s : t.data()) s = std::max(s, kMinLearnableScale);
  }
}

Batch sample_batch(const Dataset& data, const TrainConfig& cfg, long step, int vocab_size) {
  CounterRng rng(derive_key(cfg.seed, {hash_name("batch"), static_cast<std::uint64_t>(step)}));
  std::vector<Example> picked;
  picked.reserve(static_cast<std::size_t>(cfg.batch_size));
  for (int i = 0; i < cfg.batch_size; ++i) picked.push_back(data[rng.next_below(data.size())]);
  return make_batch(picked, vocab_size);
}

}  // namespace

TrainResult train(Model model, const Dataset& train_set, const Dataset& eval_set, const TrainConfig& cfg,
                  const StepCallback& on_step) {
  cfg.validate();
  model.config.validate();
  if (cfg.steps > 0 && train_set.empty()) throw ConfigError("training set is empty");
  add_lsc_scales(model, cfg.qat);

  TrainResult result;
  ParamMap ema = model.params;
  AdamState adam;
  const AdamOptions opt{cfg.beta1, cfg.beta2, cfg.epsilon};
  const auto evaluate_both = [&](long step) {
    const EvalMetrics raw = evaluate_metrics(model, eval_set);
    const EvalMetrics shadow = evaluate_metrics(Model{model.config, ema}, eval_set);
    result.trace.push_back({step, "eval", raw.loss, raw.sequence_error_rate, "float"});
    result.trace.push_back({step, "eval_ema", shadow.loss, shadow.sequence_error_rate, "float"});
  };

  for (long step = 1; step <= cfg.steps; ++step) {
    const Batch batch = sample_batch(train_set, cfg, step, model.config.vocab_size);
    Tape tape;
    const ParamVars vars = bind_params(tape, model, true);
    const std::uint64_t noise_seed = derive_key(cfg.seed, {hash_name("noise"), static_cast<std::uint64_t>(step)});
    const Var loss = forward_loss(tape, vars, model.config, batch, cfg.qat, noise_seed);
    const double loss_value = loss.value()[0];
    if (!std::isfinite(loss_value)) {
      throw DivergenceError("training diverged: loss is " + std::to_string(loss_value) + " at step " +
                                std::to_string(step),
                            step);
    }
    const GradStore grads = tape.backward(loss);
    ParamMap named;
    for (const auto& [name, var] : vars) {
      if (const Tensor* g = grads.find(var)) named.emplace(name, *g);
    }
    if (cfg.grad_clip > 0.0) clip_global_norm(named, cfg.grad_clip);
    adam_step(model.params, named, adam, lr_schedule(step, cfg.base_lr, cfg.warmup_steps, model.config.d_model), opt);
    clamp_learnable_scales(model.params);
    ema_update(ema, model.params, cfg.ema_decay);

    result.trace.push_back({step, "train", loss_value, std::numeric_limits<double>::quiet_NaN(), "float"});
    if (on_step) on_step(step, loss_value);
    if (cfg.eval_every > 0 && !eval_set.empty() && (step % cfg.eval_every == 0 || step == cfg.steps)) {
      evaluate_both(step);
    }
  }

  Checkpoint& ckpt = result.checkpoint;
  ckpt.step = cfg.steps;
  ckpt.config_digest = config_digest(cfg);
  ckpt.model = model.config;
  ckpt.params = std::move(model.params);
  ckpt.ema = std::move(ema);
  return result;
}

}  // namespace randq
