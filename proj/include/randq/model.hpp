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

// Pre-LN encoder-decoder transformer built from autodiff primitives.

#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "randq/autodiff.hpp"
#include "randq/data.hpp"
#include "randq/qat.hpp"

namespace randq {

enum class QuantizeScope { kEncoderOnly, kAllDense };
enum class LayerGroup { kEncoder, kDecoder, kEmbedding };

std::string to_string(QuantizeScope s);
QuantizeScope parse_scope(const std::string& s);
std::string to_string(LayerGroup g);
LayerGroup parse_group(const std::string& s);

bool in_scope(LayerGroup group, QuantizeScope scope);

struct ModelConfig {
  int n_enc_layers = 2;
  int n_dec_layers = 2;
  int d_model = 64;
  int n_heads = 4;
  int d_ff = 256;
  int vocab_size = 32;
  QuantizeScope quantize_scope = QuantizeScope::kEncoderOnly;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// A dense layer owns "<name>.weight" ([out x in]) and, except embeddings, "<name>.bias".
struct LayerInfo {
  std::string name;
  LayerGroup group;
  Shape shape;
};

// Every dense layer in a fixed order, embeddings included.
std::vector<LayerInfo> dense_layers(const ModelConfig& cfg);
// The dense layers inside cfg.quantize_scope.
std::vector<LayerInfo> quantizable_layers(const ModelConfig& cfg);

inline std::string weight_name(const std::string& layer) { return layer + ".weight"; }
inline std::string lsc_scale_name(const std::string& layer) { return layer + ".lsc_scale"; }

using ParamMap = std::map<std::string, Tensor>;

struct Model {
  ModelConfig config;
  ParamMap params;
};

// Xavier-uniform dense weights, zero biases, unit layer-norm gains; keyed by (seed, name).
Model init_model(const ModelConfig& cfg, std::uint64_t seed);

using QatMap = std::map<LayerGroup, QatConfig>;

// The same QatConfig for every group inside the model's scope.
QatMap uniform_qat(const ModelConfig& cfg, const QatConfig& qat);

// Adds the missing learnable scales of quantized layers that use lsc, initialised to max|W_i| / u.
void add_lsc_scales(Model& model, const QatMap& qat);

struct Batch {
  std::size_t size = 0;
  std::size_t src_len = 0;
  std::size_t tgt_len = 0;
  std::vector<int> source;          // [size x src_len], kPad padded
  std::vector<int> decoder_input;   // [size x tgt_len], kBos + target
  std::vector<int> decoder_target;  // [size x tgt_len], target + kEos
  std::vector<char> source_mask;    // 1 where source is a real token
  std::vector<char> target_mask;    // 1 where decoder_target is scored
};

Batch make_batch(std::span<const Example> examples, int vocab_size);

using ParamVars = std::map<std::string, Var>;

// Puts every parameter on the tape, tracked or as constants.
ParamVars bind_params(Tape& tape, const Model& model, bool trainable);

// Teacher-forced mean cross-entropy over scored target tokens. Dense layers of groups
// present in `qat` and inside the scope route through qat_weight with noise keyed by
// (step_seed, layer name).
Var forward_loss(Tape& tape, const ParamVars& params, const ModelConfig& cfg, const Batch& batch, const QatMap& qat,
                 std::uint64_t step_seed);
float forward_loss(const Model& model, const Batch& batch, const QatMap& qat = {}, std::uint64_t step_seed = 0);

// Argmax decoding from BOS until EOS or max_len tokens; EOS is not included.
std::vector<std::vector<int>> greedy_decode(const Model& model, std::span<const std::vector<int>> sources,
                                            int max_len);
std::vector<int> greedy_decode(const Model& model, const std::vector<int>& source, int max_len);

}  // namespace randq
