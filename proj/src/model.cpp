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

#include "randq/model.hpp"

#include <algorithm>
#include <cmath>

#include "randq/error.hpp"
#include "randq/quant.hpp"
#include "randq/random.hpp"

namespace randq {

std::string to_string(QuantizeScope s) { return s == QuantizeScope::kEncoderOnly ? "encoder_only" : "all_dense"; }

QuantizeScope parse_scope(const std::string& s) {
  if (s == "encoder_only") return QuantizeScope::kEncoderOnly;
  if (s == "all_dense") return QuantizeScope::kAllDense;
  throw ConfigError("unknown quantize_scope '" + s + "' (expected encoder_only or all_dense)");
}

std::string to_string(LayerGroup g) {
  switch (g) {
    case LayerGroup::kEncoder: return "encoder";
    case LayerGroup::kDecoder: return "decoder";
    case LayerGroup::kEmbedding: return "embedding";
  }
  return "?";
}

LayerGroup parse_group(const std::string& s) {
  if (s == "encoder") return LayerGroup::kEncoder;
  if (s == "decoder") return LayerGroup::kDecoder;
  if (s == "embedding") return LayerGroup::kEmbedding;
  throw ConfigError("unknown layer group '" + s + "'");
}

bool in_scope(LayerGroup group, QuantizeScope scope) {
  return scope == QuantizeScope::kAllDense || group == LayerGroup::kEncoder;
}

void ModelConfig::validate() const {
  if (n_enc_layers < 1 || n_dec_layers < 1) throw ConfigError("model needs at least one encoder and decoder layer");
  if (d_model < 1 || n_heads < 1 || d_ff < 1) throw ConfigError("d_model, n_heads and d_ff must be positive");
  if (d_model % n_heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by n_heads " + std::to_string(n_heads));
  }
  if (vocab_size < 4) throw ConfigError("vocab_size must be at least 4");
}

std::vector<LayerInfo> dense_layers(const ModelConfig& cfg) {
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto f = static_cast<std::size_t>(cfg.d_ff);
  const auto v = static_cast<std::size_t>(cfg.vocab_size);
  std::vector<LayerInfo> out;
  const auto attention = [&](const std::string& prefix, LayerGroup g) {
    for (const char* p : {"q", "k", "v", "o"}) out.push_back({prefix + "." + p, g, {d, d}});
  };
  const auto feed_forward = [&](const std::string& prefix, LayerGroup g) {
    out.push_back({prefix + ".ff1", g, {f, d}});
    out.push_back({prefix + ".ff2", g, {d, f}});
  };
  out.push_back({"src_emb", LayerGroup::kEmbedding, {v, d}});
  for (int i = 0; i < cfg.n_enc_layers; ++i) {
    const std::string prefix = "enc." + std::to_string(i);
    attention(prefix + ".attn", LayerGroup::kEncoder);
    feed_forward(prefix, LayerGroup::kEncoder);
  }
  out.push_back({"tgt_emb", LayerGroup::kEmbedding, {v, d}});
  for (int i = 0; i < cfg.n_dec_layers; ++i) {
    const std::string prefix = "dec." + std::to_string(i);
    attention(prefix + ".self", LayerGroup::kDecoder);
    attention(prefix + ".cross", LayerGroup::kDecoder);
    feed_forward(prefix, LayerGroup::kDecoder);
  }
  out.push_back({"out_proj", LayerGroup::kEmbedding, {v, d}});
  return out;
}

std::vector<LayerInfo> quantizable_layers(const ModelConfig& cfg) {
  std::vector<LayerInfo> out;
  for (LayerInfo& l : dense_layers(cfg)) {
    if (in_scope(l.group, cfg.quantize_scope)) out.push_back(std::move(l));
  }
  return out;
}

namespace {

bool is_lookup_table(const std::string& layer) { return layer == "src_emb" || layer == "tgt_emb"; }

std::vector<std::string> layer_norm_names(const ModelConfig& cfg) {
  std::vector<std::string> out;
  for (int i = 0; i < cfg.n_enc_layers; ++i) {
    for (const char* n : {".ln1", ".ln2"}) out.push_back("enc." + std::to_string(i) + n);
  }
  out.push_back("enc.ln");
  for (int i = 0; i < cfg.n_dec_layers; ++i) {
    for (const char* n : {".ln1", ".ln2", ".ln3"}) out.push_back("dec." + std::to_string(i) + n);
  }
  out.push_back("dec.ln");
  return out;
}

}  // namespace

Model init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Model model{cfg, {}};
  const auto d = static_cast<std::size_t>(cfg.d_model);
  for (const LayerInfo& l : dense_layers(cfg)) {
    const std::uint64_t key = derive_key(seed, {hash_name("init"), hash_name(weight_name(l.name))});
    if (is_lookup_table(l.name)) {
      model.params[weight_name(l.name)] = sample_gaussian(l.shape, static_cast<float>(1.0 / std::sqrt(cfg.d_model)), key);
      continue;
    }
    const auto limit = static_cast<float>(std::sqrt(6.0 / static_cast<double>(l.shape[0] + l.shape[1])));
    model.params[weight_name(l.name)] = sample_uniform(l.shape, -limit, limit, key);
    model.params[l.name + ".bias"] = Tensor({l.shape[0]});
  }
  for (const std::string& n : layer_norm_names(cfg)) {
    model.params[n + ".gain"] = Tensor::full({d}, 1.0f);
    model.params[n + ".bias"] = Tensor({d});
  }
  return model;
}

QatMap uniform_qat(const ModelConfig& cfg, const QatConfig& qat) {
  QatMap out;
  for (LayerGroup g : {LayerGroup::kEncoder, LayerGroup::kDecoder, LayerGroup::kEmbedding}) {
    if (in_scope(g, cfg.quantize_scope)) out[g] = qat;
  }
  return out;
}

void add_lsc_scales(Model& model, const QatMap& qat) {
  for (const LayerInfo& l : quantizable_layers(model.config)) {
    const auto it = qat.find(l.group);
    if (it == qat.end() || !it->second.needs_lsc() || model.params.contains(lsc_scale_name(l.name))) continue;
    const Tensor& w = model.params.at(weight_name(l.name));
    std::vector<float> s = compute_scale(w, it->second.spec()).scales;
    for (float& x : s) x = std::max(x, kMinLearnableScale);
    const std::size_t n = s.size();
    model.params[lsc_scale_name(l.name)] = Tensor({n}, std::move(s));
  }
}

Batch make_batch(std::span<const Example> examples, int vocab_size) {
  Batch b;
  b.size = examples.size();
  for (const Example& ex : examples) {
    b.src_len = std::max(b.src_len, ex.source.size());
    b.tgt_len = std::max(b.tgt_len, ex.target.size() + 1);
  }
  b.source.assign(b.size * b.src_len, kPad);
  b.source_mask.assign(b.size * b.src_len, 0);
  b.decoder_input.assign(b.size * b.tgt_len, kPad);
  b.decoder_target.assign(b.size * b.tgt_len, kPad);
  b.target_mask.assign(b.size * b.tgt_len, 0);
  const auto check = [vocab_size](int id) {
    if (id < 0 || id >= vocab_size) {
      throw ContractError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(vocab_size));
    }
    return id;
  };
  for (std::size_t i = 0; i < b.size; ++i) {
    const Example& ex = examples[i];
    for (std::size_t t = 0; t < ex.source.size(); ++t) {
      b.source[i * b.src_len + t] = check(ex.source[t]);
      b.source_mask[i * b.src_len + t] = 1;
    }
    b.decoder_input[i * b.tgt_len] = kBos;
    for (std::size_t t = 0; t <= ex.target.size(); ++t) {
      const int next = t < ex.target.size() ? check(ex.target[t]) : kEos;
      b.decoder_target[i * b.tgt_len + t] = next;
      b.target_mask[i * b.tgt_len + t] = 1;
      if (t < ex.target.size()) b.decoder_input[i * b.tgt_len + t + 1] = next;
    }
  }
  return b;
}

ParamVars bind_params(Tape& tape, const Model& model, bool trainable) {
  ParamVars out;
  for (const auto& [name, value] : model.params) out[name] = trainable ? tape.parameter(value) : tape.constant(value);
  return out;
}

namespace {

constexpr float kMaskedLogit = -1e9f;

Tensor positional_encoding(std::size_t batch, std::size_t len, std::size_t d) {
  Tensor out({batch * len, d});
  for (std::size_t p = 0; p < len; ++p) {
    for (std::size_t i = 0; i < d; ++i) {
      const double angle = static_cast<double>(p) / std::pow(10000.0, static_cast<double>(i - i % 2) / d);
      const auto v = static_cast<float>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
      for (std::size_t b = 0; b < batch; ++b) out[(b * len + p) * d + i] = v;
    }
  }
  return out;
}

// Additive attention mask [batch*heads x tq x tk]: keys outside key_mask, or in the future when causal.
Tensor attention_mask(std::span<const char> key_mask, std::size_t batch, std::size_t heads, std::size_t tq,
                      std::size_t tk, bool causal) {
  Tensor out({batch * heads, tq, tk});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      float* m = out.data().data() + (b * heads + h) * tq * tk;
      for (std::size_t q = 0; q < tq; ++q) {
        for (std::size_t k = 0; k < tk; ++k) {
          const bool hidden = (!key_mask.empty() && !key_mask[b * tk + k]) || (causal && k > q);
          if (hidden) m[q * tk + k] = kMaskedLogit;
        }
      }
    }
  }
  return out;
}

class Net {
 public:
  Net(Tape& tape, const ParamVars& params, const ModelConfig& cfg, const QatMap& qat, std::uint64_t step_seed)
      : tape_(tape), params_(params), cfg_(cfg), qat_(qat), seed_(step_seed) {
    for (LayerInfo& l : dense_layers(cfg)) groups_.emplace(l.name, l.group);
  }

  // Encoder output [batch*src_len x d].
  Var encode(std::span<const int> source, std::span<const char> source_mask, std::size_t batch, std::size_t len) {
    Var x = embed("src_emb", source, batch, len);
    const Tensor mask = attention_mask(source_mask, batch, heads(), len, len, false);
    for (int i = 0; i < cfg_.n_enc_layers; ++i) {
      const std::string p = "enc." + std::to_string(i);
      Var h = norm(x, p + ".ln1");
      x = add(x, attention(h, h, p + ".attn", batch, len, len, mask));
      x = add(x, feed_forward(norm(x, p + ".ln2"), p));
    }
    return norm(x, "enc.ln");
  }

  // Logits [batch*tgt_len x vocab].
  Var decode(const Var& memory, std::span<const char> source_mask, std::size_t src_len, std::span<const int> input,
             std::size_t batch, std::size_t len) {
    Var y = embed("tgt_emb", input, batch, len);
    const Tensor self_mask = attention_mask({}, batch, heads(), len, len, true);
    const Tensor cross_mask = attention_mask(source_mask, batch, heads(), len, src_len, false);
    for (int i = 0; i < cfg_.n_dec_layers; ++i) {
      const std::string p = "dec." + std::to_string(i);
      Var h = norm(y, p + ".ln1");
      y = add(y, attention(h, h, p + ".self", batch, len, len, self_mask));
      y = add(y, attention(norm(y, p + ".ln2"), memory, p + ".cross", batch, len, src_len, cross_mask));
      y = add(y, feed_forward(norm(y, p + ".ln3"), p));
    }
    return dense(norm(y, "dec.ln"), "out_proj");
  }

 private:
  std::size_t d() const { return static_cast<std::size_t>(cfg_.d_model); }
  std::size_t heads() const { return static_cast<std::size_t>(cfg_.n_heads); }

  const Var& param(const std::string& name) const {
    const auto it = params_.find(name);
    if (it == params_.end()) throw ContractError("model has no parameter '" + name + "'");
    return it->second;
  }

  Var weight(const std::string& layer) {
    const Var& w = param(weight_name(layer));
    const LayerGroup g = groups_.at(layer);
    const auto it = qat_.find(g);
    if (!in_scope(g, cfg_.quantize_scope) || it == qat_.end() || it->second.is_identity()) return w;
    const QatConfig& qat = it->second;
    const std::uint64_t key = derive_key(seed_, {hash_name(layer)});
    if (!qat.needs_lsc()) return qat_weight(w, qat, nullptr, key);
    const auto s = params_.find(lsc_scale_name(layer));
    if (s == params_.end()) throw ConfigError("layer '" + layer + "' uses lsc but has no learnable scale");
    const LscParams lsc{s->second};
    return qat_weight(w, qat, &lsc, key);
  }

  Var dense(const Var& x, const std::string& layer) { return add(linear(x, weight(layer)), param(layer + ".bias")); }

  Var norm(const Var& x, const std::string& name) {
    return layer_norm(x, param(name + ".gain"), param(name + ".bias"));
  }

  Var embed(const std::string& table, std::span<const int> ids, std::size_t batch, std::size_t len) {
    Var e = scale(embedding(weight(table), ids), static_cast<float>(std::sqrt(cfg_.d_model)));
    return add(e, tape_.constant(positional_encoding(batch, len, d())));
  }

  Var split_heads(const Var& x, std::size_t batch, std::size_t len) {
    const std::size_t dh = d() / heads();
    return reshape(swap_axes_12(reshape(x, {batch, len, heads(), dh})), {batch * heads(), len, dh});
  }

  Var merge_heads(const Var& x, std::size_t batch, std::size_t len) {
    const std::size_t dh = d() / heads();
    return reshape(swap_axes_12(reshape(x, {batch, heads(), len, dh})), {batch * len, d()});
  }

  Var attention(const Var& xq, const Var& xkv, const std::string& prefix, std::size_t batch, std::size_t tq,
                std::size_t tk, const Tensor& mask) {
    Var q = split_heads(dense(xq, prefix + ".q"), batch, tq);
    Var k = split_heads(dense(xkv, prefix + ".k"), batch, tk);
    Var v = split_heads(dense(xkv, prefix + ".v"), batch, tk);
    const auto inv_sqrt = static_cast<float>(1.0 / std::sqrt(static_cast<double>(d() / heads())));
    Var scores = add(scale(bmm(q, k, true), inv_sqrt), tape_.constant(mask));
    return dense(merge_heads(bmm(softmax(scores), v), batch, tq), prefix + ".o");
  }

  Var feed_forward(const Var& x, const std::string& prefix) {
    return dense(relu(dense(x, prefix + ".ff1")), prefix + ".ff2");
  }

  Tape& tape_;
  const ParamVars& params_;
  const ModelConfig& cfg_;
  const QatMap& qat_;
  std::uint64_t seed_;
  std::map<std::string, LayerGroup> groups_;
};

void check_batch(const Batch& b) {
  if (b.source.size() != b.size * b.src_len || b.source_mask.size() != b.source.size() ||
      b.decoder_input.size() != b.size * b.tgt_len || b.decoder_target.size() != b.decoder_input.size() ||
      b.target_mask.size() != b.decoder_input.size()) {
    throw DimensionError("batch arrays do not match its declared shape");
  }
  if (b.size == 0 || b.src_len == 0 || b.tgt_len == 0) throw DimensionError("empty batch");
}

}  // namespace

Var forward_loss(Tape& tape, const ParamVars& params, const ModelConfig& cfg, const Batch& batch, const QatMap& qat,
                 std::uint64_t step_seed) {
  check_batch(batch);
  Net net(tape, params, cfg, qat, step_seed);
  Var memory = net.encode(batch.source, batch.source_mask, batch.size, batch.src_len);
  Var logits = net.decode(memory, batch.source_mask, batch.src_len, batch.decoder_input, batch.size, batch.tgt_len);
  std::vector<int> targets = batch.decoder_target;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (!batch.target_mask[i]) targets[i] = kPad;
  }
  return cross_entropy(logits, targets, kPad);
}

float forward_loss(const Model& model, const Batch& batch, const QatMap& qat, std::uint64_t step_seed) {
  Tape tape;
  return forward_loss(tape, bind_params(tape, model, false), model.config, batch, qat, step_seed).value()[0];
}

std::vector<std::vector<int>> greedy_decode(const Model& model, std::span<const std::vector<int>> sources,
                                            int max_len) {
  std::vector<std::vector<int>> out(sources.size());
  if (sources.empty() || max_len <= 0) return out;
  std::vector<Example> examples;
  for (const auto& s : sources) examples.push_back({s, {}});
  const Batch b = make_batch(examples, model.config.vocab_size);

  Tensor memory;
  {
    Tape tape;
    const ParamVars params = bind_params(tape, model, false);
    memory = Net(tape, params, model.config, {}, 0).encode(b.source, b.source_mask, b.size, b.src_len).value();
  }
  const auto vocab = static_cast<std::size_t>(model.config.vocab_size);
  std::vector<char> done(b.size, 0);
  std::vector<int> prefix(b.size, kBos);  // [size x len], grows by one column per step
  for (int len = 1; len <= max_len; ++len) {
    // A fresh tape per step keeps memory flat; the encoder output enters as a constant.
    Tape tape;
    const ParamVars params = bind_params(tape, model, false);
    const Var logits = Net(tape, params, model.config, {}, 0)
                           .decode(tape.constant(memory), b.source_mask, b.src_len, prefix, b.size,
                                   static_cast<std::size_t>(len));
    const Tensor& lv = logits.value();
    std::vector<int> next(b.size);
    bool all_done = true;
    for (std::size_t i = 0; i < b.size; ++i) {
      const float* row = lv.data().data() + (i * static_cast<std::size_t>(len) + len - 1) * vocab;
      next[i] = static_cast<int>(std::max_element(row, row + vocab) - row);
      if (!done[i]) {
        if (next[i] == kEos) {
          done[i] = 1;
        } else {
          out[i].push_back(next[i]);
        }
      }
      all_done = all_done && done[i];
    }
    if (all_done) break;
    std::vector<int> grown;
    grown.reserve(b.size * static_cast<std::size_t>(len + 1));
    for (std::size_t i = 0; i < b.size; ++i) {
      grown.insert(grown.end(), prefix.begin() + static_cast<long>(i) * len,
                   prefix.begin() + static_cast<long>(i + 1) * len);
      grown.push_back(next[i]);
    }
    prefix = std::move(grown);
  }
  return out;
}

std::vector<int> greedy_decode(const Model& model, const std::vector<int>& source, int max_len) {
  return greedy_decode(model, std::span<const std::vector<int>>(&source, 1), max_len).front();
}

}  // namespace randq
