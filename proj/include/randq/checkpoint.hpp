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

// Versioned binary checkpoint: raw parameters, EMA shadows and quantized tensors.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "randq/model.hpp"
#include "randq/quant.hpp"

namespace randq {

inline constexpr std::uint8_t kCheckpointVersion = 1;

struct Checkpoint {
  long step = 0;
  std::string config_digest;
  ModelConfig model;
  ParamMap params;
  ParamMap ema;
  // Integer weights of a post-training quantized model, keyed like params.
  std::map<std::string, QuantizedTensor> quantized;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::string serialize_checkpoint(const Checkpoint& ckpt);
// Throws FormatError with the byte offset on bad magic, unsupported version, truncation or bad fields.
Checkpoint deserialize_checkpoint(std::string_view bytes);

// Parameters for evaluation: EMA shadows when requested (and present), raw otherwise.
// Quantized entries are dequantized over the float value.
Model model_from_checkpoint(const Checkpoint& ckpt, bool use_ema);

bool bit_identical(const Checkpoint& a, const Checkpoint& b);

}  // namespace randq
