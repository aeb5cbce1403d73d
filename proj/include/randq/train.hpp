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

// Optimization loop: Adam, inverse-square-root schedule with warmup, EMA shadow weights.

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

namespace randq {

struct TrainConfig {
  int steps = 5000;
  int batch_size = 64;
  double base_lr = 1.0;
  int warmup_steps = 500;
  double ema_decay = 0.999;
  std::uint64_t seed = 0;
  QatMap qat;
  // Evaluate raw and EMA weights every this many steps (and at the end); 0 disables.
  int eval_every = 0;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double epsilon = 1e-9;
  // Global gradient-norm clip; 0 disables.
  double grad_clip = 0.0;

  void validate() const;
};

// Stable text rendering of every field; the digest hashes it.
std::string canonical_text(const TrainConfig& cfg);
std::string config_digest(const TrainConfig& cfg);

// base_lr * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)
double lr_schedule(long step, double base_lr, int warmup, int d_model);

struct AdamState {
  long t = 0;
  ParamMap m;
  ParamMap v;
};

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double epsilon = 1e-9;
};

// Bias-corrected Adam on every parameter; a parameter missing from `grads` gets a zero gradient.
void adam_step(ParamMap& params, const ParamMap& grads, AdamState& state, double lr, const AdamOptions& opt = {});

// shadow <- decay * shadow + (1 - decay) * params
void ema_update(ParamMap& shadow, const ParamMap& params, double decay);

struct EvalMetrics {
  double loss = 0.0;
  double sequence_error_rate = 0.0;
};

// Teacher-forced loss averaged over every scored token of the set, no noise injection.
double evaluate_loss(const Model& model, const Dataset& data, int batch_size = 256);

// evaluate_loss plus the greedy-decoding sequence error rate.
EvalMetrics evaluate_metrics(const Model& model, const Dataset& data, int batch_size = 256);

struct TraceRow {
  long step = 0;
  std::string split;  // train | eval | eval_ema
  double loss = 0.0;
  double sequence_error_rate = 0.0;  // NaN for train rows
  std::string precision = "float";
};

void write_trace(const std::vector<TraceRow>& rows, const std::filesystem::path& path);

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<TraceRow> trace;
};

// Called after every optimizer step with (step, loss); for progress output.
using StepCallback = std::function<void(long, double)>;

// Runs cfg.steps of forward_loss -> backward -> adam -> ema. Learnable scales the
// QAT map needs are added to the model first. Throws DivergenceError on a non-finite loss.
TrainResult train(Model model, const Dataset& train_set, const Dataset& eval_set, const TrainConfig& cfg,
                  const StepCallback& on_step = {});

}  // namespace randq
