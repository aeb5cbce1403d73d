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

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "fixtures.hpp"
#include "gradcheck.hpp"
#include "randq/error.hpp"
#include "randq/model.hpp"

namespace randq {
namespace {

using testing::tiny_model;

Batch sample_batch(int vocab = 8) {
  const auto [train, eval] = generate_dataset(testing::tiny_task(TaskKind::kReverse, vocab));
  return make_batch(std::span<const Example>(train.data(), 6), vocab);
}

TEST(ModelConfig, Validation) {
  ModelConfig cfg = tiny_model();
  cfg.n_heads = 3;
  EXPECT_THROW(cfg.validate(), ConfigError);
  EXPECT_THROW(init_model(cfg, 0), ConfigError);
  EXPECT_THROW(parse_scope("decoder_only"), ConfigError);
  EXPECT_EQ(parse_scope("all_dense"), QuantizeScope::kAllDense);
}

TEST(ModelConfig, LayerInventory) {
  ModelConfig cfg = tiny_model();
  // Per encoder layer 4 attention + 2 ff; per decoder layer 8 attention + 2 ff; 3 embedding-group layers.
  EXPECT_EQ(dense_layers(cfg).size(), 6u + 10u + 3u);
  EXPECT_EQ(quantizable_layers(cfg).size(), 6u);
  for (const LayerInfo& l : quantizable_layers(cfg)) EXPECT_EQ(l.group, LayerGroup::kEncoder);
  cfg.quantize_scope = QuantizeScope::kAllDense;
  EXPECT_EQ(quantizable_layers(cfg).size(), 19u);
}

TEST(Model, InitIsKeyedBySeedAndName) {
  const Model a = init_model(tiny_model(), 1);
  const Model b = init_model(tiny_model(), 1);
  const Model c = init_model(tiny_model(), 2);
  ASSERT_EQ(a.params.size(), b.params.size());
  for (const auto& [name, t] : a.params) EXPECT_TRUE(t.bit_equal(b.params.at(name))) << name;
  EXPECT_FALSE(a.params.at("enc.0.attn.q.weight").bit_equal(c.params.at("enc.0.attn.q.weight")));
  EXPECT_TRUE(a.params.at("enc.0.ff1.bias").bit_equal(Tensor({16})));
  EXPECT_TRUE(a.params.at("dec.ln.gain").bit_equal(Tensor::full({8}, 1.0f)));
  // A different depth does not change the parameters both models share.
  ModelConfig deeper = tiny_model();
  deeper.n_enc_layers = 2;
  EXPECT_TRUE(init_model(deeper, 1).params.at("dec.0.self.k.weight").bit_equal(a.params.at("dec.0.self.k.weight")));
  const float limit = std::sqrt(6.0f / 24.0f);
  for (float w : a.params.at("enc.0.ff1.weight").data()) EXPECT_LE(std::fabs(w), limit);
}

TEST(Batch, Layout) {
  const std::vector<Example> ex{{{5, 6, 7}, {7, 6, 5}}, {{4}, {4}}};
  const Batch b = make_batch(ex, 8);
  EXPECT_EQ(b.src_len, 3u);
  EXPECT_EQ(b.tgt_len, 4u);
  EXPECT_EQ(b.source, (std::vector<int>{5, 6, 7, 4, kPad, kPad}));
  EXPECT_EQ(b.source_mask, (std::vector<char>{1, 1, 1, 1, 0, 0}));
  EXPECT_EQ(b.decoder_input, (std::vector<int>{kBos, 7, 6, 5, kBos, 4, kPad, kPad}));
  EXPECT_EQ(b.decoder_target, (std::vector<int>{7, 6, 5, kEos, 4, kEos, kPad, kPad}));
  EXPECT_EQ(b.target_mask, (std::vector<char>{1, 1, 1, 1, 1, 1, 0, 0}));
  const std::vector<Example> bad{{{9}, {9}}};
  EXPECT_THROW(make_batch(bad, 8), ContractError);
}

TEST(ForwardLoss, UniformLogitsGiveLogVocab) {
  Model m = init_model(tiny_model(), 4);
  m.params["out_proj.weight"] = Tensor({8, 8});
  EXPECT_NEAR(forward_loss(m, sample_batch()), std::log(8.0), 1e-6);
}

TEST(ForwardLoss, ReproducibleAndIdentityQatIsExact) {
  const Model m = init_model(tiny_model(), 4);
  const Batch b = sample_batch();
  const float plain = forward_loss(m, b);
  EXPECT_EQ(plain, forward_loss(m, b));
  const QatMap none = uniform_qat(m.config, QatConfig{});
  const float with_none = forward_loss(m, b, none, 99);
  EXPECT_EQ(std::memcmp(&plain, &with_none, sizeof plain), 0);
}

TEST(ForwardLoss, ScopeSelectsQuantizedLayers) {
  Model m = init_model(tiny_model(), 4);
  const Batch b = sample_batch();
  const QatConfig ste = QatConfig::qat_mode(QatMethod::kSte, OutlierMethod::kNone, 2, Granularity::kPerTensor);
  const float plain = forward_loss(m, b);
  EXPECT_NE(forward_loss(m, b, {{LayerGroup::kEncoder, ste}}), plain);
  // Outside encoder_only scope these groups are never quantized.
  EXPECT_EQ(forward_loss(m, b, {{LayerGroup::kDecoder, ste}, {LayerGroup::kEmbedding, ste}}), plain);
  m.config.quantize_scope = QuantizeScope::kAllDense;
  EXPECT_NE(forward_loss(m, b, {{LayerGroup::kDecoder, ste}}), plain);
  EXPECT_NE(forward_loss(m, b, {{LayerGroup::kEmbedding, ste}}), plain);
}

TEST(ForwardLoss, ScopeDoesNotAffectInitialization) {
  ModelConfig all = tiny_model();
  all.quantize_scope = QuantizeScope::kAllDense;
  Model enc_only = init_model(tiny_model(), 5);
  Model with_lsc = init_model(tiny_model(), 5);
  add_lsc_scales(with_lsc, uniform_qat(with_lsc.config,
                                       QatConfig::learnable_scale(QatMethod::kSte, 4, Granularity::kPerChannel)));
  for (const auto& [name, t] : enc_only.params) EXPECT_TRUE(t.bit_equal(with_lsc.params.at(name))) << name;
  EXPECT_EQ(with_lsc.params.size(), enc_only.params.size() + 6);
  EXPECT_TRUE(with_lsc.params.contains("enc.0.ff2.lsc_scale"));
  EXPECT_FALSE(with_lsc.params.contains("dec.0.ff2.lsc_scale"));
  const Model full = init_model(all, 5);
  for (const auto& [name, t] : enc_only.params) EXPECT_TRUE(t.bit_equal(full.params.at(name))) << name;
}

TEST(ForwardLoss, LscRequiresScales) {
  const Model m = init_model(tiny_model(), 4);
  const QatMap lsc = uniform_qat(m.config, QatConfig::learnable_scale(QatMethod::kPqn, 4, Granularity::kPerChannel));
  EXPECT_THROW(forward_loss(m, sample_batch(), lsc), ConfigError);
  Model with = m;
  add_lsc_scales(with, lsc);
  EXPECT_TRUE(std::isfinite(forward_loss(with, sample_batch(), lsc, 3)));
}

TEST(ForwardLoss, ShapeMismatchIsDimensionError) {
  Batch b = sample_batch();
  b.source.pop_back();
  EXPECT_THROW(forward_loss(init_model(tiny_model(), 1), b), DimensionError);
}

// Whole-model gradients against finite differences, one parameter tensor at a time.
TEST(ForwardLoss, GradientsMatchFiniteDifferences) {
  ModelConfig cfg = tiny_model();
  cfg.quantize_scope = QuantizeScope::kAllDense;
  const Model m = init_model(cfg, 6);
  const Batch b = sample_batch();
  for (const char* name : {"enc.0.attn.q.weight", "enc.0.ff2.weight", "dec.0.cross.k.weight", "dec.0.self.v.bias",
                           "src_emb.weight", "tgt_emb.weight", "out_proj.weight", "enc.0.ln1.gain", "dec.ln.bias"}) {
    const auto op = [&](Tape& tape, const std::vector<Var>& v) {
      ParamVars params = bind_params(tape, m, false);
      params[name] = v[0];
      return forward_loss(tape, params, cfg, b, {}, 0);
    };
    EXPECT_LT(testing::gradcheck(op, {m.params.at(name)}, 1).worst_relative_error, 1e-2) << name;
  }
}

TEST(GreedyDecode, DeterministicAndTruncated) {
  const Model m = init_model(tiny_model(), 7);
  const std::vector<int> src{3, 4, 5};
  EXPECT_EQ(greedy_decode(m, src, 6), greedy_decode(m, src, 6));
  EXPECT_LE(greedy_decode(m, src, 2).size(), 2u);
  EXPECT_TRUE(greedy_decode(m, src, 0).empty());
}

TEST(GreedyDecode, PaddingAndBatchingDoNotChangeOutputs) {
  const Model m = init_model(tiny_model(), 8);
  const std::vector<std::vector<int>> sources{{3}, {4, 5, 6, 7, 3}, {7, 7}};
  const auto batched = greedy_decode(m, sources, 6);
  for (std::size_t i = 0; i < sources.size(); ++i) EXPECT_EQ(batched[i], greedy_decode(m, sources[i], 6)) << i;
}

TEST(ForwardLoss, DecoderIsCausal) {
  // Changing a later target token must not change the logits scored before it,
  // so the loss over the untouched prefix is unchanged.
  const Model m = init_model(tiny_model(), 9);
  const auto loss_of = [&](int last) {
    Batch b = make_batch(std::vector<Example>{{{3, 4}, {5, 6, last}}}, 8);
    std::fill(b.target_mask.begin() + 2, b.target_mask.end(), 0);
    return forward_loss(m, b);
  };
  EXPECT_EQ(loss_of(3), loss_of(7));
}

}  // namespace
}  // namespace randq
