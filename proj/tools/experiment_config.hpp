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

// Experiment configuration for the randq command line: a JSON document whose
// every key has a default, layered as defaults < RANDQ_SEED < file < --set.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "randq/data.hpp"
#include "randq/eval.hpp"
#include "randq/model.hpp"
#include "randq/qat.hpp"
#include "randq/train.hpp"

namespace randq::cli {

struct EvalSettings {
  bool use_ema = true;
  Precision precision = Precision::kInt4;
  Granularity granularity = Granularity::kPerChannel;
  // Mixed-precision budget for `sensitivity`; 0 skips the assignment.
  std::size_t budget_bytes = 0;
};

struct ExperimentConfig {
  TaskSpec task;
  ModelConfig model;
  QatConfig qat;
  // qat map is built from `qat` over the model's quantize scope.
  TrainConfig train;
  std::vector<SweepCell> grid;
  int workers = 1;
  EvalSettings eval;
  std::filesystem::path output_dir;
  nlohmann::json resolved;
};

nlohmann::json default_config();

// Schema-checked recursive merge: every key of `overlay` must exist in `base`.
void merge_checked(nlohmann::json& base, const nlohmann::json& overlay, const std::string& where = "");

// "a.b.c=value"; the value is read as JSON when it parses, as a string otherwise.
void apply_set(nlohmann::json& doc, const std::string& assignment);

ExperimentConfig resolve(const std::optional<std::filesystem::path>& file, const std::vector<std::string>& sets,
                         const char* env_seed);

// Builds the typed configuration from a fully merged document.
ExperimentConfig from_json(const nlohmann::json& doc);

// A QatConfig from a (possibly partial) qat object; unset c, p and stop_scale_gradient
// follow the outlier method.
QatConfig qat_from_json(const nlohmann::json& partial);

// Hash of the resolved document without output_dir: runs that differ only in where
// they write share a digest.
std::string digest(const nlohmann::json& resolved);

}  // namespace randq::cli
