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

#include "randq/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>
#include <tuple>

#include "randq/error.hpp"

namespace randq {

std::string to_string(Precision p) {
  switch (p) {
    case Precision::kFloat: return "float";
    case Precision::kInt8: return "int8";
    case Precision::kInt4: return "int4";
  }
  return "?";
}

Precision parse_precision(const std::string& s) {
  if (s == "float") return Precision::kFloat;
  if (s == "int8") return Precision::kInt8;
  if (s == "int4") return Precision::kInt4;
  throw ConfigError("unknown precision '" + s + "' (expected float, int8 or int4)");
}

int bit_width(Precision p) {
  switch (p) {
    case Precision::kFloat: return 32;
    case Precision::kInt8: return 8;
    case Precision::kInt4: return 4;
  }
  return 32;
}

PrecisionAssignment uniform_assignment(const ModelConfig& cfg, Precision p) {
  PrecisionAssignment out;
  for (const LayerInfo& l : quantizable_layers(cfg)) out[l.name] = p;
  return out;
}

namespace {

bool is_learnable_scale(const std::string& name) { return name.ends_with(".lsc_scale"); }

void check_assignment(const ModelConfig& cfg, const PrecisionAssignment& assignment) {
  std::set<std::string> known;
  for (const LayerInfo& l : quantizable_layers(cfg)) known.insert(l.name);
  for (const auto& [name, p] : assignment) {
    if (!known.contains(name)) {
      throw ConfigError("'" + name + "' is not a quantizable layer under quantize_scope " +
                        to_string(cfg.quantize_scope));
    }
  }
  for (const std::string& name : known) {
    if (!assignment.contains(name)) throw ConfigError("precision assignment does not cover layer '" + name + "'");
  }
}

}  // namespace

Checkpoint ptq_checkpoint(const Checkpoint& ckpt, const PrecisionAssignment& assignment, const PtqOptions& opt) {
  check_assignment(ckpt.model, assignment);
  const Model source = model_from_checkpoint(ckpt, opt.use_ema);
  Checkpoint out;
  out.step = ckpt.step;
  out.config_digest = ckpt.config_digest;
  out.model = ckpt.model;
  for (const auto& [name, t] : source.params) {
    if (!is_learnable_scale(name)) out.params.emplace(name, t);
  }
  for (const auto& [layer, precision] : assignment) {
    if (precision == Precision::kFloat) continue;
    const std::string name = weight_name(layer);
    const Tensor& w = source.params.at(name);
    const QuantSpec spec{bit_width(precision), opt.granularity};
    const auto learned = source.params.find(lsc_scale_name(layer));
    if (opt.learned_scale_bit == spec.bit && learned != source.params.end()) {
      const std::vector<float> s(learned->second.data().begin(), learned->second.data().end());
      const Granularity g = s.size() == 1 ? Granularity::kPerTensor : Granularity::kPerChannel;
      out.quantized.emplace(name, quantize_with_scales(w, ScaleSet{s, g}, QuantSpec{spec.bit, g}));
    } else {
      out.quantized.emplace(name, quantize(w, spec));
    }
    out.params.erase(name);
  }
  return out;
}

Model ptq_apply(const Checkpoint& ckpt, const PrecisionAssignment& assignment, const PtqOptions& opt) {
  return model_from_checkpoint(ptq_checkpoint(ckpt, assignment, opt), false);
}

std::size_t model_size_bytes(const Checkpoint& artifact) {
  std::size_t bytes = 0;
  for (const auto& [name, t] : artifact.params) {
    if (!is_learnable_scale(name) && !artifact.quantized.contains(name)) bytes += 4 * t.numel();
  }
  for (const auto& [name, q] : artifact.quantized) bytes += q.size_bytes();
  return bytes;
}

std::size_t model_size_bytes(const ModelConfig& cfg, const PrecisionAssignment& assignment, Granularity granularity) {
  check_assignment(cfg, assignment);
  std::size_t bytes = 0;
  for (const auto& [name, t] : init_model(cfg, 0).params) bytes += 4 * t.numel();
  for (const LayerInfo& l : quantizable_layers(cfg)) {
    const Precision p = assignment.at(l.name);
    if (p == Precision::kFloat) continue;
    const std::size_t n = numel(l.shape);
    const std::size_t scales = granularity == Granularity::kPerChannel ? l.shape[0] : 1;
    bytes = bytes - 4 * n + payload_bytes(n, bit_width(p)) + 4 * scales;
  }
  return bytes;
}

bool ReportRow::operator==(const ReportRow& o) const {
  const auto same = [](float a, float b) { return std::memcmp(&a, &b, sizeof a) == 0 || (a == b); };
  return outlier_method == o.outlier_method && qat_method == o.qat_method && train_bit == o.train_bit &&
         eval_precision == o.eval_precision && granularity == o.granularity && seed == o.seed &&
         same(sequence_error_rate, o.sequence_error_rate) && same(loss, o.loss) &&
         model_size_bytes == o.model_size_bytes && converged == o.converged;
}

ReportRow evaluate(const Checkpoint& artifact, const Dataset& eval_set, const std::string& precision_label) {
  const EvalMetrics m = evaluate_metrics(model_from_checkpoint(artifact, false), eval_set);
  ReportRow row;
  row.eval_precision = precision_label;
  row.sequence_error_rate = static_cast<float>(m.sequence_error_rate);
  row.loss = static_cast<float>(m.loss);
  row.model_size_bytes = model_size_bytes(artifact);
  return row;
}

Sensitivity layer_sensitivity(const Checkpoint& ckpt, const Dataset& eval_set, Precision precision,
                              const PtqOptions& opt) {
  const PrecisionAssignment all_float = uniform_assignment(ckpt.model, Precision::kFloat);
  Sensitivity out;
  out.float_loss = evaluate_loss(ptq_apply(ckpt, all_float, opt), eval_set);
  for (const auto& [layer, p] : all_float) {
    PrecisionAssignment one = all_float;
    one[layer] = precision;
    out.delta[layer] = evaluate_loss(ptq_apply(ckpt, one, opt), eval_set) - out.float_loss;
  }
  out.whole_model_delta =
      evaluate_loss(ptq_apply(ckpt, uniform_assignment(ckpt.model, precision), opt), eval_set) - out.float_loss;
  return out;
}

PrecisionAssignment assign_mixed_precision(const ModelConfig& cfg, const std::map<std::string, double>& sensitivity,
                                           std::size_t budget_bytes, Granularity granularity) {
  PrecisionAssignment out = uniform_assignment(cfg, Precision::kInt4);
  for (const auto& [name, s] : sensitivity) {
    if (!out.contains(name)) throw ConfigError("sensitivity given for unknown layer '" + name + "'");
  }
  std::size_t size = model_size_bytes(cfg, out, granularity);
  if (budget_bytes < size) {
    throw ConfigError("budget of " + std::to_string(budget_bytes) + " bytes is below the all-int4 size of " +
                      std::to_string(size));
  }
  std::vector<std::pair<std::string, double>> order(sensitivity.begin(), sensitivity.end());
  std::stable_sort(order.begin(), order.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  for (const auto& [name, s] : order) {
    PrecisionAssignment next = out;
    next[name] = Precision::kInt8;
    const std::size_t next_size = model_size_bytes(cfg, next, granularity);
    if (next_size > budget_bytes) break;
    out = std::move(next);
    size = next_size;
  }
  return out;
}

namespace {

constexpr Precision kSweepPrecisions[] = {Precision::kFloat, Precision::kInt8, Precision::kInt4};

std::vector<ReportRow> run_cell(const SweepCell& cell, std::uint64_t seed, const SweepOptions& opt,
                                const Dataset& train_set, const Dataset& eval_set, bool& converged) {
  TrainConfig tc = opt.train;
  tc.seed = seed;
  tc.qat = cell.qat.is_identity() ? QatMap{} : uniform_qat(opt.model, cell.qat);
  ReportRow base;
  base.outlier_method = cell.qat.outlier_method;
  base.qat_method = cell.qat.qat_method;
  base.train_bit = cell.qat.bit;
  base.granularity = cell.qat.granularity;
  base.seed = seed;

  std::vector<ReportRow> rows;
  try {
    const Checkpoint ckpt = train(init_model(opt.model, seed), train_set, eval_set, tc).checkpoint;
    PtqOptions ptq{cell.qat.granularity, opt.use_ema, cell.qat.needs_lsc() ? cell.qat.bit : 0};
    for (Precision p : kSweepPrecisions) {
      const ReportRow metrics =
          evaluate(ptq_checkpoint(ckpt, uniform_assignment(opt.model, p), ptq), eval_set, to_string(p));
      ReportRow row = base;
      row.eval_precision = metrics.eval_precision;
      row.sequence_error_rate = metrics.sequence_error_rate;
      row.loss = metrics.loss;
      row.model_size_bytes = metrics.model_size_bytes;
      rows.push_back(row);
    }
    converged = true;
  } catch (const DivergenceError&) {
    for (Precision p : kSweepPrecisions) {
      ReportRow row = base;
      row.eval_precision = to_string(p);
      row.sequence_error_rate = 1.0f;
      row.loss = std::numeric_limits<float>::quiet_NaN();
      row.model_size_bytes = model_size_bytes(opt.model, uniform_assignment(opt.model, p), cell.qat.granularity);
      row.converged = false;
      rows.push_back(row);
    }
    converged = false;
  }
  return rows;
}

int precision_rank(const std::string& label) {
  if (label == "float") return 0;
  if (label == "int8") return 1;
  if (label == "int4") return 2;
  return 3;
}

auto sort_key(const ReportRow& r) {
  return std::make_tuple(static_cast<int>(r.outlier_method), static_cast<int>(r.qat_method),
                         precision_rank(r.eval_precision), r.eval_precision, r.seed, static_cast<int>(r.granularity),
                         r.train_bit);
}

}  // namespace

std::vector<ReportRow> run_sweep(const std::vector<SweepCell>& grid, const SweepOptions& opt) {
  if (grid.empty()) throw ConfigError("sweep grid is empty");
  opt.model.validate();
  for (const SweepCell& cell : grid) {
    cell.qat.validate();
    if (cell.seeds.empty()) throw ConfigError("sweep cell has no seeds");
  }
  const auto [train_set, eval_set] = generate_dataset(opt.task);

  std::vector<std::pair<const SweepCell*, std::uint64_t>> runs;
  for (const SweepCell& cell : grid) {
    for (std::uint64_t seed : cell.seeds) runs.emplace_back(&cell, seed);
  }
  std::vector<std::vector<ReportRow>> results(runs.size());
  std::atomic<std::size_t> next{0};
  std::mutex report_mutex;
  std::exception_ptr failure;
  const auto worker = [&] {
    for (std::size_t i = next++; i < runs.size(); i = next++) {
      try {
        bool converged = false;
        results[i] = run_cell(*runs[i].first, runs[i].second, opt, train_set, eval_set, converged);
        if (opt.on_run) {
          const std::lock_guard lock(report_mutex);
          opt.on_run(*runs[i].first, runs[i].second, converged);
        }
      } catch (...) {
        const std::lock_guard lock(report_mutex);
        if (!failure) failure = std::current_exception();
        next = runs.size();
      }
    }
  };
  const int workers = std::clamp(opt.workers, 1, static_cast<int>(runs.size()));
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < workers; ++i) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  std::vector<ReportRow> rows;
  for (auto& r : results) rows.insert(rows.end(), r.begin(), r.end());
  sort_rows(rows);
  return rows;
}

void sort_rows(std::vector<ReportRow>& rows) {
  std::stable_sort(rows.begin(), rows.end(),
                   [](const ReportRow& a, const ReportRow& b) { return sort_key(a) < sort_key(b); });
}

std::string report_header() {
  return "outlier_method,qat_method,train_bit,eval_precision,granularity,seed,sequence_error_rate,loss,"
         "model_size_bytes,converged";
}

void write_report(const std::vector<ReportRow>& rows, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  os << report_header() << '\n';
  char metrics[64];
  for (const ReportRow& r : rows) {
    std::snprintf(metrics, sizeof metrics, "%.9g,%.9g", static_cast<double>(r.sequence_error_rate),
                  static_cast<double>(r.loss));
    os << to_string(r.outlier_method) << ',' << to_string(r.qat_method) << ',' << r.train_bit << ','
       << r.eval_precision << ',' << to_string(r.granularity) << ',' << r.seed << ',' << metrics << ','
       << r.model_size_bytes << ',' << (r.converged ? 1 : 0) << '\n';
  }
  if (!os) throw Error("write to " + path.string() + " failed");
}

namespace {

template <typename T>
T parse_number(const std::string& field, std::size_t offset) {
  std::istringstream is(field);
  T v{};
  is >> v;
  if (is.fail() || !is.eof()) throw FormatError("bad number '" + field + "'", offset);
  return v;
}

float parse_float(const std::string& field, std::size_t offset) {
  char* end = nullptr;
  const float v = std::strtof(field.c_str(), &end);
  if (field.empty() || end != field.c_str() + field.size()) throw FormatError("bad number '" + field + "'", offset);
  return v;
}

}  // namespace

std::vector<ReportRow> read_report(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path.string());
  std::string line;
  std::size_t offset = 0;
  if (!std::getline(is, line) || line != report_header()) throw FormatError("missing or unexpected report header", 0);
  offset += line.size() + 1;
  std::vector<ReportRow> rows;
  while (std::getline(is, line)) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 10) throw FormatError("expected 10 fields, got " + std::to_string(f.size()), offset);
    ReportRow r;
    try {
      r.outlier_method = parse_outlier_method(f[0]);
      r.qat_method = parse_qat_method(f[1]);
      r.granularity = parse_granularity(f[4]);
    } catch (const ConfigError& e) {
      throw FormatError(e.what(), offset);
    }
    r.train_bit = parse_number<int>(f[2], offset);
    r.eval_precision = f[3];
    r.seed = parse_number<std::uint64_t>(f[5], offset);
    r.sequence_error_rate = parse_float(f[6], offset);
    r.loss = parse_float(f[7], offset);
    r.model_size_bytes = parse_number<std::size_t>(f[8], offset);
    if (f[9] != "0" && f[9] != "1") throw FormatError("converged must be 0 or 1", offset);
    r.converged = f[9] == "1";
    rows.push_back(std::move(r));
    offset += line.size() + 1;
  }
  return rows;
}

std::vector<AggregateRow> aggregate(const std::vector<ReportRow>& rows) {
  const auto group_key = [](const ReportRow& r) {
    return std::make_tuple(static_cast<int>(r.outlier_method), static_cast<int>(r.qat_method),
                           precision_rank(r.eval_precision), r.eval_precision, static_cast<int>(r.granularity),
                           r.train_bit);
  };
  std::map<decltype(group_key(rows.front())), std::vector<const ReportRow*>> groups;
  std::vector<decltype(group_key(rows.front()))> order;
  for (const ReportRow& r : rows) {
    auto [it, fresh] = groups.try_emplace(group_key(r));
    if (fresh) order.push_back(it->first);
    it->second.push_back(&r);
  }
  std::vector<AggregateRow> out;
  for (const auto& key : order) {
    const auto& members = groups.at(key);
    AggregateRow a;
    a.key = *members.front();
    a.runs = members.size();
    std::vector<double> err;
    std::vector<double> loss;
    for (const ReportRow* r : members) {
      if (!r->converged) {
        ++a.failed;
        continue;
      }
      err.push_back(r->sequence_error_rate);
      loss.push_back(r->loss);
    }
    const auto stats = [](const std::vector<double>& v, double& mean, double& sd) {
      mean = 0.0;
      sd = 0.0;
      if (v.empty()) {
        mean = std::numeric_limits<double>::quiet_NaN();
        return;
      }
      for (double x : v) mean += x;
      mean /= static_cast<double>(v.size());
      if (v.size() < 2) return;
      for (double x : v) sd += (x - mean) * (x - mean);
      sd = std::sqrt(sd / static_cast<double>(v.size() - 1));
    };
    stats(err, a.mean_error, a.std_error);
    stats(loss, a.mean_loss, a.std_loss);
    out.push_back(a);
  }
  return out;
}

std::string format_pm(double mean, double std, int decimals) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "%.*f ± %.*f", decimals, mean, decimals, std);
  return buf;
}

}  // namespace randq
