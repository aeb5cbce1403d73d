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

// Post-training quantization, multi-precision evaluation, layer sensitivity,
// mixed-precision assignment and sweep reports.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "randq/checkpoint.hpp"
#include "randq/data.hpp"
#include "randq/model.hpp"
#include "randq/train.hpp"

namespace randq {

enum class Precision { kFloat, kInt8, kInt4 };

std::string to_string(Precision p);
Precision parse_precision(const std::string& s);
int bit_width(Precision p);  // 32 for float

// Layer name (as in quantizable_layers) -> precision.
using PrecisionAssignment = std::map<std::string, Precision>;

PrecisionAssignment uniform_assignment(const ModelConfig& cfg, Precision p);

struct PtqOptions {
  Granularity granularity = Granularity::kPerChannel;
  bool use_ema = true;
  // Layers trained with learnable scales keep them when quantized at this width; 0 ignores them.
  int learned_scale_bit = 0;
};

// Quantized artifact: float parameters plus integer tensors for every int8/int4 layer.
// Learnable-scale parameters are dropped. Unknown layer names raise ConfigError.
Checkpoint ptq_checkpoint(const Checkpoint& ckpt, const PrecisionAssignment& assignment, const PtqOptions& opt = {});
// The float model the artifact computes: each assigned layer replaced by dequantize(quantize(W)).
Model ptq_apply(const Checkpoint& ckpt, const PrecisionAssignment& assignment, const PtqOptions& opt = {});

// Bytes of a quantized artifact: 4 per float value, packed payload plus 4 per scale for integer layers.
std::size_t model_size_bytes(const Checkpoint& artifact);
// The same count from the architecture alone.
std::size_t model_size_bytes(const ModelConfig& cfg, const PrecisionAssignment& assignment, Granularity granularity);

struct ReportRow {
  OutlierMethod outlier_method = OutlierMethod::kNone;
  QatMethod qat_method = QatMethod::kNone;
  int train_bit = 4;
  std::string eval_precision = "float";
  Granularity granularity = Granularity::kPerChannel;
  std::uint64_t seed = 0;
  float sequence_error_rate = 0.0f;
  float loss = 0.0f;
  std::size_t model_size_bytes = 0;
  // False for cells whose training diverged; their error rate is 1 and loss NaN.
  bool converged = true;

  bool operator==(const ReportRow& o) const;
};

// Metrics and size of an artifact; configuration columns are left at their defaults.
ReportRow evaluate(const Checkpoint& artifact, const Dataset& eval_set, const std::string& precision_label);

struct Sensitivity {
  double float_loss = 0.0;
  // Eval-loss increase when only that layer is quantized.
  std::map<std::string, double> delta;
  // Eval-loss increase with every quantizable layer quantized; not the sum of the deltas.
  double whole_model_delta = 0.0;
};

Sensitivity layer_sensitivity(const Checkpoint& ckpt, const Dataset& eval_set, Precision precision,
                              const PtqOptions& opt = {});

// Greedy: all layers int4, then promote to int8 in descending sensitivity (ties by name)
// until the next promotion would exceed the budget.
PrecisionAssignment assign_mixed_precision(const ModelConfig& cfg, const std::map<std::string, double>& sensitivity,
                                           std::size_t budget_bytes, Granularity granularity);

struct SweepCell {
  QatConfig qat;
  std::vector<std::uint64_t> seeds;
};

struct SweepOptions {
  TaskSpec task;
  ModelConfig model;
  // Its qat map and seed are replaced per cell.
  TrainConfig train;
  bool use_ema = true;
  int workers = 1;
  // Called after each (cell, seed) run finishes; may be invoked from worker threads, serialized.
  std::function<void(const SweepCell&, std::uint64_t seed, bool converged)> on_run;
};

// One training run per (cell, seed), each evaluated at float, int8 and int4 with the
// cell's granularity. Diverged runs yield failed rows and the sweep continues.
std::vector<ReportRow> run_sweep(const std::vector<SweepCell>& grid, const SweepOptions& opt);

// (outlier, qat, precision, seed, granularity, train_bit); stable for equal keys.
void sort_rows(std::vector<ReportRow>& rows);

void write_report(const std::vector<ReportRow>& rows, const std::filesystem::path& path);
std::vector<ReportRow> read_report(const std::filesystem::path& path);
std::string report_header();

struct AggregateRow {
  ReportRow key;  // seed, metrics and converged are not meaningful
  std::size_t runs = 0;
  std::size_t failed = 0;
  double mean_error = 0.0;
  double std_error = 0.0;
  double mean_loss = 0.0;
  double std_loss = 0.0;
};

// Mean and sample standard deviation across seeds of converged runs.
std::vector<AggregateRow> aggregate(const std::vector<ReportRow>& rows);
// "mean ± std" with the given decimals.
std::string format_pm(double mean, double std, int decimals = 4);

}  // namespace randq
