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

#include "experiment_config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <limits>

#include "randq/error.hpp"
#include "randq/random.hpp"

namespace randq::cli {

using nlohmann::json;

json default_config() {
  return json{
      {"task", {{"task", "copy"}, {"vocab_size", 32}, {"seq_len", 12}, {"n_train", 8000}, {"n_eval", 1000}, {"seed", 0}}},
      {"model",
       {{"n_enc_layers", 2},
        {"n_dec_layers", 2},
        {"d_model", 64},
        {"n_heads", 4},
        {"d_ff", 256},
        {"quantize_scope", "encoder_only"}}},
      {"train",
       {{"steps", 5000},
        {"batch_size", 64},
        {"base_lr", 1.0},
        {"warmup_steps", 500},
        {"ema_decay", 0.999},
        {"seed", 0},
        {"eval_every", 500},
        {"beta1", 0.9},
        {"beta2", 0.98},
        {"epsilon", 1e-9},
        {"grad_clip", 0.0}}},
      {"qat",
       {{"qat_method", "none"},
        {"outlier_method", "none"},
        {"bit", 4},
        {"granularity", "per_channel"},
        {"p", nullptr},
        {"c", nullptr},
        {"k", 8},
        {"stop_scale_gradient", nullptr},
        {"vn_std", 0.0}}},
      {"sweep", {{"grid", json::array()}, {"workers", 1}}},
      {"eval", {{"use_ema", true}, {"precision", "int4"}, {"granularity", "per_channel"}, {"budget_bytes", 0}}},
      {"output_dir", "out"},
  };
}

void merge_checked(json& base, const json& overlay, const std::string& where) {
  if (!overlay.is_object()) throw ConfigError((where.empty() ? "config" : where) + " must be an object");
  for (const auto& [key, value] : overlay.items()) {
    const std::string path = where.empty() ? key : where + "." + key;
    if (!base.contains(key)) throw ConfigError("unknown config key '" + path + "'");
    json& target = base[key];
    if (target.is_object()) {
      merge_checked(target, value, path);
    } else {
      target = value;
    }
  }
}

void apply_set(json& doc, const std::string& assignment) {
  const std::size_t eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + assignment + "'");
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  json patch = value;
  std::size_t end = path.size();
  while (true) {
    const std::size_t dot = path.rfind('.', end - 1);
    const std::size_t begin = dot == std::string::npos ? 0 : dot + 1;
    patch = json{{path.substr(begin, end - begin), patch}};
    if (dot == std::string::npos) break;
    end = dot;
  }
  merge_checked(doc, patch);
}

namespace {

[[noreturn]] void type_error(const std::string& path, const char* expected) {
  throw ConfigError(path + ": expected " + expected);
}

const json& field(const json& j, const std::string& section, const char* key) {
  return j.at(section).at(key);
}

int get_int(const json& v, const std::string& path) {
  if (!v.is_number_integer()) type_error(path, "an integer");
  const auto x = v.get<long long>();
  if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max()) type_error(path, "a 32-bit integer");
  return static_cast<int>(x);
}

std::uint64_t get_u64(const json& v, const std::string& path) {
  if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) {
    type_error(path, "a non-negative integer");
  }
  return v.get<std::uint64_t>();
}

double get_double(const json& v, const std::string& path) {
  if (!v.is_number()) type_error(path, "a number");
  return v.get<double>();
}

bool get_bool(const json& v, const std::string& path) {
  if (!v.is_boolean()) type_error(path, "true or false");
  return v.get<bool>();
}

std::string get_string(const json& v, const std::string& path) {
  if (!v.is_string()) type_error(path, "a string");
  return v.get<std::string>();
}

}  // namespace

QatConfig qat_from_json(const json& partial) {
  json q = default_config().at("qat");
  merge_checked(q, partial, "qat");
  QatConfig cfg;
  cfg.qat_method = parse_qat_method(get_string(q["qat_method"], "qat.qat_method"));
  cfg.outlier_method = parse_outlier_method(get_string(q["outlier_method"], "qat.outlier_method"));
  cfg.bit = get_int(q["bit"], "qat.bit");
  cfg.granularity = parse_granularity(get_string(q["granularity"], "qat.granularity"));
  cfg.k = static_cast<std::size_t>(std::max(0, get_int(q["k"], "qat.k")));
  cfg.vn_std = static_cast<float>(get_double(q["vn_std"], "qat.vn_std"));

  // Only outlier=none and vn keep the scale out of the backward pass by default.
  const bool flows = cfg.outlier_method != OutlierMethod::kNone && cfg.outlier_method != OutlierMethod::kVn;
  cfg.stop_scale_gradient = q["stop_scale_gradient"].is_null()
                                ? !flows
                                : get_bool(q["stop_scale_gradient"], "qat.stop_scale_gradient");
  const json& p = q["p"];
  if (p.is_null()) {
    cfg.p = cfg.outlier_method == OutlierMethod::kMixed ? 8.0 : kInfNorm;
  } else if (p.is_string()) {
    if (p.get<std::string>() != "inf") type_error("qat.p", "a number or \"inf\"");
    cfg.p = kInfNorm;
  } else {
    cfg.p = get_double(p, "qat.p");
  }
  if (q["c"].is_null()) {
    cfg.c = 1.0 / integer_bounds(cfg.bit).upper;
  } else {
    cfg.c = get_double(q["c"], "qat.c");
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig from_json(const json& doc) {
  ExperimentConfig out;
  out.resolved = doc;

  TaskSpec& t = out.task;
  t.task = parse_task(get_string(field(doc, "task", "task"), "task.task"));
  t.vocab_size = get_int(field(doc, "task", "vocab_size"), "task.vocab_size");
  t.seq_len = get_int(field(doc, "task", "seq_len"), "task.seq_len");
  t.n_train = get_int(field(doc, "task", "n_train"), "task.n_train");
  t.n_eval = get_int(field(doc, "task", "n_eval"), "task.n_eval");
  t.seed = get_u64(field(doc, "task", "seed"), "task.seed");
  t.validate();

  ModelConfig& m = out.model;
  m.n_enc_layers = get_int(field(doc, "model", "n_enc_layers"), "model.n_enc_layers");
  m.n_dec_layers = get_int(field(doc, "model", "n_dec_layers"), "model.n_dec_layers");
  m.d_model = get_int(field(doc, "model", "d_model"), "model.d_model");
  m.n_heads = get_int(field(doc, "model", "n_heads"), "model.n_heads");
  m.d_ff = get_int(field(doc, "model", "d_ff"), "model.d_ff");
  m.vocab_size = t.vocab_size;
  m.quantize_scope = parse_scope(get_string(field(doc, "model", "quantize_scope"), "model.quantize_scope"));
  m.validate();

  out.qat = qat_from_json(doc.at("qat"));

  TrainConfig& tr = out.train;
  tr.steps = get_int(field(doc, "train", "steps"), "train.steps");
  tr.batch_size = get_int(field(doc, "train", "batch_size"), "train.batch_size");
  tr.base_lr = get_double(field(doc, "train", "base_lr"), "train.base_lr");
  tr.warmup_steps = get_int(field(doc, "train", "warmup_steps"), "train.warmup_steps");
  tr.ema_decay = get_double(field(doc, "train", "ema_decay"), "train.ema_decay");
  tr.seed = get_u64(field(doc, "train", "seed"), "train.seed");
  tr.eval_every = get_int(field(doc, "train", "eval_every"), "train.eval_every");
  tr.beta1 = get_double(field(doc, "train", "beta1"), "train.beta1");
  tr.beta2 = get_double(field(doc, "train", "beta2"), "train.beta2");
  tr.epsilon = get_double(field(doc, "train", "epsilon"), "train.epsilon");
  tr.grad_clip = get_double(field(doc, "train", "grad_clip"), "train.grad_clip");
  if (!out.qat.is_identity()) tr.qat = uniform_qat(m, out.qat);
  tr.validate();

  const json& grid = field(doc, "sweep", "grid");
  if (!grid.is_array()) type_error("sweep.grid", "an array");
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const std::string where = "sweep.grid[" + std::to_string(i) + "]";
    const json& cell = grid[i];
    if (!cell.is_object()) type_error(where, "an object");
    for (const auto& [key, value] : cell.items()) {
      if (key != "qat" && key != "seeds") throw ConfigError("unknown config key '" + where + "." + key + "'");
    }
    SweepCell c;
    c.qat = qat_from_json(cell.value("qat", json::object()));
    const json seeds = cell.value("seeds", json::array({0}));
    if (!seeds.is_array() || seeds.empty()) type_error(where + ".seeds", "a non-empty array");
    for (const json& s : seeds) c.seeds.push_back(get_u64(s, where + ".seeds"));
    out.grid.push_back(std::move(c));
  }
  out.workers = get_int(field(doc, "sweep", "workers"), "sweep.workers");
  if (out.workers < 1) throw ConfigError("sweep.workers must be at least 1");

  out.eval.use_ema = get_bool(field(doc, "eval", "use_ema"), "eval.use_ema");
  out.eval.precision = parse_precision(get_string(field(doc, "eval", "precision"), "eval.precision"));
  out.eval.granularity = parse_granularity(get_string(field(doc, "eval", "granularity"), "eval.granularity"));
  out.eval.budget_bytes = get_u64(field(doc, "eval", "budget_bytes"), "eval.budget_bytes");

  out.output_dir = get_string(doc.at("output_dir"), "output_dir");
  return out;
}

ExperimentConfig resolve(const std::optional<std::filesystem::path>& file, const std::vector<std::string>& sets,
                         const char* env_seed) {
  json doc = default_config();
  if (env_seed != nullptr && *env_seed != '\0') {
    const json seed = json::parse(env_seed, nullptr, false);
    if (!seed.is_number_unsigned()) {
      throw ConfigError(std::string("RANDQ_SEED must be a non-negative integer, got '") + env_seed + "'");
    }
    doc["task"]["seed"] = seed;
    doc["train"]["seed"] = seed;
  }
  if (file) {
    std::ifstream is(*file);
    if (!is) throw ConfigError("cannot open config file " + file->string());
    const json loaded = json::parse(is, nullptr, false);
    if (loaded.is_discarded()) throw ConfigError("config file " + file->string() + " is not valid JSON");
    merge_checked(doc, loaded);
  }
  for (const std::string& s : sets) apply_set(doc, s);
  return from_json(doc);
}

std::string digest(const json& resolved) {
  json content = resolved;
  content.erase("output_dir");
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash_name(content.dump())));
  return buf;
}

}  // namespace randq::cli
