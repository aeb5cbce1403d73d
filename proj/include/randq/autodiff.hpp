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

#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <span>
#include <unordered_map>
#include <vector>

#include "randq/tensor.hpp"

namespace randq {

class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool tracked() const;
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// What a backward rule sees: the upstream gradient, the forward values, and one
// accumulation target per input (null when that input does not need a gradient).
struct BackwardContext {
  const Tensor& grad;
  const Tensor& output;
  std::span<const Tensor* const> inputs;
  std::span<Tensor* const> input_grads;
};

using BackwardFn = std::function<void(const BackwardContext&)>;

// Gradients of tracked leaves, keyed by the leaf's tape id.
class GradStore {
 public:
  const Tensor* find(const Var& v) const;
  const Tensor& at(const Var& v) const;
  bool contains(const Var& v) const { return find(v) != nullptr; }
  std::size_t size() const { return grads_.size(); }

  void insert(std::size_t id, Tensor grad) { grads_.insert_or_assign(id, std::move(grad)); }

 private:
  std::unordered_map<std::size_t, Tensor> grads_;
};

// Linear record of operations. Nodes are appended in evaluation order, so the
// record is always topologically sorted and backward is a reverse sweep.
// Single-threaded by contract.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var parameter(Tensor value);

  // Records an op. The output is tracked iff some input is tracked; the backward
  // rule is retained only in that case.
  Var record(Tensor value, std::vector<Var> inputs, BackwardFn backward);

  // Reverse sweep from a scalar loss. Visits each node once.
  GradStore backward(const Var& loss);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool tracked(std::size_t id) const { return nodes_[id].tracked; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    bool tracked = false;
    bool leaf = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };
  std::deque<Node> nodes_;  // stable addresses: Var::value() hands out references
};

enum class Axis { kRow, kAll };

// Sentinel for the infinity norm.
inline constexpr double kInfNorm = -1.0;
inline bool is_inf_norm(double p) { return p == kInfNorm || p == std::numeric_limits<double>::infinity(); }

// --- elementwise ---------------------------------------------------------

// Same shape, scalar b (numel 1), or row-vector b of length cols(a) broadcast over rows.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
// Same shape or scalar b.
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, float factor);
Var add_scalar(const Var& a, float value);
Var exp(const Var& a);
Var log(const Var& a);
Var relu(const Var& a);
// Row i of a [M x N] multiplied by s[i]; s of numel 1 scales everything.
Var mul_rows(const Var& a, const Var& s);

// --- reductions -----------------------------------------------------------

Var sum(const Var& a);
Var mean(const Var& a);

// Max |W| per row ([M]) or over everything (scalar). Gradient goes to the first argmax.
Var reduce_max_abs(const Var& w, Axis axis);
// (sum |W|^p)^(1/p) per row or over everything. p >= 1 or kInfNorm.
Var lp_norm(const Var& w, double p, Axis axis);
// L_p norm of the k largest-magnitude entries (ties resolved by lower index).
Var topk_magnitude_lp_norm(const Var& w, double p, std::size_t k, Axis axis);

// --- linear algebra -------------------------------------------------------

Var matmul(const Var& a, const Var& b);
// x [R x N] times w^T for w [M x N]: the batched form of Y = W X.
Var linear(const Var& x, const Var& w);
Var transpose(const Var& a);
// [G x M x K] times [G x K x N] (or [G x N x K] when transpose_b).
Var bmm(const Var& a, const Var& b, bool transpose_b = false);

// --- shape ----------------------------------------------------------------

Var reshape(const Var& a, Shape shape);
// [A x B x C x D] -> [A x C x B x D].
Var swap_axes_12(const Var& a);
// Concatenate along axis 0; trailing dims must agree.
Var concat(std::span<const Var> parts);

// --- nn -------------------------------------------------------------------

Var softmax(const Var& a);  // over the last axis
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, float eps = 1e-5f);
Var embedding(const Var& table, std::span<const int> ids);
// Mean token cross-entropy over rows whose target differs from ignore_index.
Var cross_entropy(const Var& logits, std::span<const int> targets, int ignore_index);

// --- gradient control ----------------------------------------------------

// Identity forward, zero gradient backward.
Var stop_gradient(const Var& a);
// Identity forward, gradient multiplied by factor.
Var scale_grad(const Var& a, float factor);

}  // namespace randq
