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

// Small configurations shared by the model, training and evaluation tests.

#pragma once

#include "randq/data.hpp"
#include "randq/model.hpp"
#include "randq/train.hpp"

namespace randq::testing {

inline ModelConfig tiny_model(int vocab = 8) {
  ModelConfig cfg;
  cfg.n_enc_layers = 1;
  cfg.n_dec_layers = 1;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.d_ff = 16;
  cfg.vocab_size = vocab;
  return cfg;
}

inline TaskSpec tiny_task(TaskKind kind = TaskKind::kCopy, int vocab = 8, int seq_len = 4) {
  TaskSpec t;
  t.task = kind;
  t.vocab_size = vocab;
  t.seq_len = seq_len;
  t.n_train = 200;
  t.n_eval = 40;
  t.seed = 3;
  return t;
}

inline TrainConfig short_training(int steps) {
  TrainConfig t;
  t.steps = steps;
  t.batch_size = 16;
  t.warmup_steps = 50;
  t.base_lr = 0.3;
  t.ema_decay = 0.9;
  return t;
}

}  // namespace randq::testing
