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

#include "randq/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "randq/error.hpp"

namespace randq {
namespace {

// C[M x N] += A[M x K] * B[K x N], all row-major and contiguous. The inner loop is
// an axpy over a row of B so it vectorizes without reassociating sums.
void gemm_acc(std::size_t m, std::size_t n, std::size_t k, const float* __restrict a,
              const float* __restrict b, float* __restrict c) {
  for (std::size_t i = 0; i < m; ++i) {
    float* ci = c + i * n;
    const float* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const float av = ai[p];
      const float* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// out[N x M] = in[M x N]^T.
void transpose_into(std::size_t m, std::size_t n, const float* in, float* out) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = in[i * n + j];
  }
}

std::vector<float> transposed(std::size_t m, std::size_t n, const float* in) {
  std::vector<float> out(m * n);
  transpose_into(m, n, in, out.data());
  return out;
}

void accumulate(Tensor* target, const Tensor& g) {
  if (!target) return;
  auto dst = target->data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

Tape& tape_of(std::initializer_list<const Var*> vars) {
  Tape* tape = nullptr;
  for (const Var* v : vars) {
    if (!v->valid()) throw ContractError("operation on an empty Var");
    if (tape && &v->tape() != tape) throw ContractError("operands recorded on different tapes");
    tape = &v->tape();
  }
  return *tape;
}

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + to_string(t.shape()));
  }
}

// Treats the last axis as columns and everything before it as rows.
std::pair<std::size_t, std::size_t> as_rows(const Tensor& t) {
  if (t.rank() == 0) return {1, 1};
  const std::size_t cols = t.shape().back();
  return {cols ? t.numel() / cols : 0, cols};
}

void check_p(double p) {
  if (!is_inf_norm(p) && !(p >= 1.0)) throw ParameterError("L_p norm requires p >= 1, got " + std::to_string(p));
}

float sign_of(float v) { return v > 0.0f ? 1.0f : (v < 0.0f ? -1.0f : 0.0f); }

// Norm of |values[idx]| for the listed indices, plus per-entry d(norm)/d(w).
// Computed in double with max-scaling so large p does not overflow.
double norm_with_grad(std::span<const float> values, std::span<const std::size_t> idx, double p,
                      std::vector<float>* dnorm) {
  double mx = 0.0;
  for (std::size_t i : idx) mx = std::max(mx, static_cast<double>(std::fabs(values[i])));
  if (dnorm) dnorm->assign(idx.size(), 0.0f);
  if (mx == 0.0) return 0.0;
  double acc = 0.0;
  for (std::size_t i : idx) acc += std::pow(std::fabs(values[i]) / mx, p);
  const double norm = mx * std::pow(acc, 1.0 / p);
  if (dnorm) {
    for (std::size_t t = 0; t < idx.size(); ++t) {
      const float v = values[idx[t]];
      const double r = std::fabs(v) / norm;
      (*dnorm)[t] = static_cast<float>(sign_of(v) * std::pow(r, p - 1.0));
    }
  }
  return norm;
}

}  // namespace

// --- Var / Tape -------------------------------------------------------------

const Tensor& Var::value() const { return tape_->value(id_); }
bool Var::tracked() const { return tape_->tracked(id_); }

const Tensor* GradStore::find(const Var& v) const {
  auto it = grads_.find(v.id());
  return it == grads_.end() ? nullptr : &it->second;
}

const Tensor& GradStore::at(const Var& v) const {
  const Tensor* g = find(v);
  if (!g) throw ContractError("no gradient recorded for tape node " + std::to_string(v.id()));
  return *g;
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), false, true, {}, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(Tensor value) {
  nodes_.push_back(Node{std::move(value), true, true, {}, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  Node node;
  node.value = std::move(value);
  node.inputs.reserve(inputs.size());
  bool inputs_finite = true;
  for (const Var& in : inputs) {
    if (&in.tape() != this) throw ContractError("input recorded on a different tape");
    node.inputs.push_back(in.id());
    node.tracked = node.tracked || nodes_[in.id()].tracked;
#ifndef NDEBUG
    inputs_finite = inputs_finite && nodes_[in.id()].value.all_finite();
#endif
  }
#ifndef NDEBUG
  if (inputs_finite && !node.value.all_finite()) {
    throw Error("non-finite value produced from finite inputs (tape node " + std::to_string(nodes_.size()) + ")");
  }
#else
  (void)inputs_finite;
#endif
  if (node.tracked) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

GradStore Tape::backward(const Var& loss) {
  if (&loss.tape() != this) throw ContractError("loss belongs to a different tape");
  if (loss.value().numel() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " + to_string(loss.shape()));
  }
  if (!nodes_[loss.id()].tracked) throw ContractError("loss does not depend on any tracked tensor");

  std::vector<Tensor> grads(loss.id() + 1);
  std::vector<char> has(loss.id() + 1, 0);
  grads[loss.id()] = Tensor::full(loss.shape(), 1.0f);
  has[loss.id()] = 1;

  GradStore store;
  std::vector<const Tensor*> in_values;
  std::vector<Tensor*> in_grads;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    if (!has[i]) continue;
    Node& node = nodes_[i];
    if (node.leaf) {
      store.insert(i, std::move(grads[i]));
      continue;
    }
    in_values.clear();
    in_grads.clear();
    for (std::size_t in : node.inputs) {
      in_values.push_back(&nodes_[in].value);
      if (nodes_[in].tracked) {
        if (!has[in]) {
          grads[in] = Tensor::zeros(nodes_[in].value.shape());
          has[in] = 1;
        }
        in_grads.push_back(&grads[in]);
      } else {
        in_grads.push_back(nullptr);
      }
    }
    node.backward(BackwardContext{grads[i], node.value, in_values, in_grads});
    grads[i] = Tensor();
  }
  return store;
}

// --- elementwise -----------------------------------------------------------

Var add(const Var& a, const Var& b) {
  Tape& tape = tape_of({&a, &b});
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out = av;
  auto o = out.data();
  if (av.shape() == bv.shape()) {
    for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
    return tape.record(std::move(out), {a, b}, [](const BackwardContext& ctx) {
      accumulate(ctx.input_grads[0], ctx.grad);
      accumulate(ctx.input_grads[1], ctx.grad);
    });
  }
  if (bv.numel() == 1) {
    const float s = bv[0];
    for (float& x : o) x += s;
    return tape.record(std::move(out), {a, b}, [](const BackwardContext& ctx) {
      accumulate(ctx.input_grads[0], ctx.grad);
      if (ctx.input_grads[1]) {
        double acc = 0.0;
        for (float g : ctx.grad.data()) acc += g;
        (*ctx.input_grads[1])[0] += static_cast<float>(acc);
      }
    });
  }
  if (bv.rank() == 1 && av.rank() >= 1 && av.shape().back() == bv.numel()) {
    const std::size_t cols = bv.numel();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i % cols];
    return tape.record(std::move(out), {a, b}, [cols](const BackwardContext& ctx) {
      accumulate(ctx.input_grads[0], ctx.grad);
      if (Tensor* gb = ctx.input_grads[1]) {
        auto g = ctx.grad.data();
        for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i % cols] += g[i];
      }
    });
  }
  throw DimensionError("add: cannot combine " + to_string(av.shape()) + " and " + to_string(bv.shape()));
}

Var sub(const Var& a, const Var& b) {
  Tape& tape = tape_of({&a, &b});
  if (a.shape() != b.shape()) {
    throw DimensionError("sub: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  Tensor out = a.value();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= b.value()[i];
  return tape.record(std::move(out), {a, b}, [](const BackwardContext& ctx) {
    accumulate(ctx.input_grads[0], ctx.grad);
    if (Tensor* gb = ctx.input_grads[1]) {
      for (std::size_t i = 0; i < gb->numel(); ++i) (*gb)[i] -= ctx.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  Tape& tape = tape_of({&a, &b});
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out = av;
  auto o = out.data();
  if (av.shape() == bv.shape()) {
    for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
    return tape.record(std::move(out), {a, b}, [](const BackwardContext& ctx) {
      const Tensor& x = *ctx.inputs[0];
      const Tensor& y = *ctx.inputs[1];
      if (Tensor* ga = ctx.input_grads[0]) {
        for (std::size_t i = 0; i < ga->numel(); ++i) (*ga)[i] += ctx.grad[i] * y[i];
      }
      if (Tensor* gb = ctx.input_grads[1]) {
        for (std::size_t i = 0; i < gb->numel(); ++i) (*gb)[i] += ctx.grad[i] * x[i];
      }
    });
  }
  if (bv.numel() == 1) {
    const float s = bv[0];
    for (float& x : o) x *= s;
    return tape.record(std::move(out), {a, b}, [](const BackwardContext& ctx) {
      const Tensor& x = *ctx.inputs[0];
      const float s = (*ctx.inputs[1])[0];
      if (Tensor* ga = ctx.input_grads[0]) {
        for (std::size_t i = 0; i < ga->numel(); ++i) (*ga)[i] += ctx.grad[i] * s;
      }
      if (Tensor* gb = ctx.input_grads[1]) {
        double acc = 0.0;
        for (std::size_t i = 0; i < x.numel(); ++i) acc += static_cast<double>(ctx.grad[i]) * x[i];
        (*gb)[0] += static_cast<float>(acc);
      }
    });
  }
  throw DimensionError("mul: cannot combine " + to_string(av.shape()) + " and " + to_string(bv.shape()));
}

Var scale(const Var& a, float factor) {
  Tape& tape = tape_of({&a});
  Tensor out = a.value();
  for (float& x : out.data()) x *= factor;
  return tape.record(std::move(out), {a}, [factor](const BackwardContext& ctx) {
    Tensor* ga = ctx.input_grads[0];
    for (std::size_t i = 0; i < ga->numel(); ++i) (*ga)[i] += ctx.grad[i] * factor;
  });
}

Var add_scalar(const Var& a, float value) {
  Tape& tape = tape_of({&a});
  Tensor out = a.value();
  for (float& x : out.data()) x += value;
  return tape.record(std::move(out), {a}, [](const BackwardContext& ctx) {
    accumulate(ctx.input_grads[0], ctx.grad);
  });
}

Var exp(const Var& a) {
  Tape& tape = tape_of({&a});
  Tensor out = a.value();
  for (float& x : out.data()) x = std::exp(x);
  return tape.record(std::move(out), {a}, [](const BackwardContext& ctx) {
    Tensor* ga = ctx.input_grads[0];
    for (std::size_t i = 0; i < ga->numel(); ++i) (*ga)[i] += ctx.grad[i] * ctx.output[i];
  });
}

Var log(const Var& a) {
  Tape& tape = tape_of({&a});
  Tensor out = a.value();
  for (float& x : out.data()) x = std::log(x);
  return tape.record(std::move(out), {a}, [](const BackwardContext& ctx) {
    Tensor* ga = ctx.input_grads[0];
    const Tensor& x = *ctx.inputs[0];
    for (std::size_t i = 0; i < ga->numel(); ++i) (*ga)[i] += ctx.grad[i] / x[i];
  });
}

Var relu(const Var& a) {
  Tape& tape = tape_of({&a});
  Tensor out = a.value();
  for (float& x : out.data()) x = x > 0.0f ? x : 0.0f;
  return tape.record(std::move(out), {a}, [](const BackwardContext& ctx) {
    Tensor* ga = ctx.input_grads[0];
    const Tensor& x = *ctx.inputs[0];
    for (std::size_t i = 0; i < ga->numel(); ++i) {
      if (x[i] > 0.0f) (*ga)[i] += ctx.grad[i];
    }
  });
}

Var mul_rows(const Var& a, const Var& s) {
  Tape& tape = tape_of({&a, &s});
  const Tensor& av = a.value();
  const Tensor& sv = s.value();
  require_matrix(av, "mul_rows");
  const std::size_t m = av.rows();
  const std::size_t n = av.cols();
  const bool shared = sv.numel() == 1;
  if (!shared && sv.numel() != m) {
    throw DimensionError("mul_rows: " + std::to_string(sv.numel()) + " scales for " + std::to_string(m) + " rows");
  }
  Tensor out = av;
  for (std::size_t i = 0; i < m; ++i) {
    const float f = sv[shared ? 0 : i];
    for (float& x : out.row(i)) x *= f;
  }
  return tape.record(std::move(out), {a, s}, [m, n, shared](const BackwardContext& ctx) {
    const Tensor& x = *ctx.inputs[0];
    const Tensor& sc = *ctx.inputs[1];
    if (Tensor* ga = ctx.input_grads[0]) {
      for (std::size_t i = 0; i < m; ++i) {
        const float f = sc[shared ? 0 : i];
        for (std::size_t j = 0; j < n; ++j) ga->at(i, j) += ctx.grad.at(i, j) * f;
      }
    }
    if (Tensor* gs = ctx.input_grads[1]) {
      for (std::size_t i = 0; i < m; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += static_cast<double>(ctx.grad.at(i, j)) * x.at(i, j);
        (*gs)[shared ? 0 : i] += static_cast<float>(acc);
      }
    }
  });
}

// --- reductions ------------------------------------------------------------

Var sum(const Var& a) {
  Tape& tape = tape_of({&a});
  double acc = 0.0;
  for (float x : a.value().data()) acc += x;
  return tape.record(Tensor::scalar(static_cast<float>(acc)), {a}, [](const BackwardContext& ctx) {
    const float g = ctx.grad[0];
    for (float& x : ctx.input_grads[0]->data()) x += g;
  });
}

Var mean(const Var& a) {
  Tape& tape = tape_of({&a});
  const auto n = static_cast<double>(a.value().numel());
  double acc = 0.0;
  for (float x : a.value().data()) acc += x;
  return tape.record(Tensor::scalar(static_cast<float>(acc / n)), {a}, [n](const BackwardContext& ctx) {
    const auto g = static_cast<float>(ctx.grad[0] / n);
    for (float& x : ctx.input_grads[0]->data()) x += g;
  });
}

Var reduce_max_abs(const Var& w, Axis axis) {
  Tape& tape = tape_of({&w});
  const Tensor& wv = w.value();
  if (wv.numel() == 0) throw ParameterError("reduce_max_abs on an empty tensor");
  auto [rows, cols] = as_rows(wv);
  if (axis == Axis::kAll) {
    rows = 1;
    cols = wv.numel();
  }
  Tensor out(axis == Axis::kAll ? Shape{} : Shape{rows});
  std::vector<std::size_t> argmax(rows, 0);
  for (std::size_t r = 0; r < rows; ++r) {
    float best = -1.0f;
    for (std::size_t c = 0; c < cols; ++c) {
      const float v = std::fabs(wv[r * cols + c]);
      if (v > best) {
        best = v;
        argmax[r] = r * cols + c;
      }
    }
    out[r] = best;
  }
  return tape.record(std::move(out), {w}, [argmax = std::move(argmax)](const BackwardContext& ctx) {
    const Tensor& x = *ctx.inputs[0];
    Tensor& gw = *ctx.input_grads[0];
    for (std::size_t r = 0; r < argmax.size(); ++r) gw[argmax[r]] += ctx.grad[r] * sign_of(x[argmax[r]]);
  });
}

Var lp_norm(const Var& w, double p, Axis axis) {
  check_p(p);
  if (is_inf_norm(p)) return reduce_max_abs(w, axis);
  Tape& tape = tape_of({&w});
  const Tensor& wv = w.value();
  if (wv.numel() == 0) throw ParameterError("lp_norm on an empty tensor");
  auto [rows, cols] = as_rows(wv);
  if (axis == Axis::kAll) {
    rows = 1;
    cols = wv.numel();
  }
  Tensor out(axis == Axis::kAll ? Shape{} : Shape{rows});
  std::vector<float> dnorm(wv.numel());
  std::vector<std::size_t> idx(cols);
  std::vector<float> row_grad;
  for (std::size_t r = 0; r < rows; ++r) {
    std::iota(idx.begin(), idx.end(), r * cols);
    out[r] = static_cast<float>(norm_with_grad(wv.data(), idx, p, &row_grad));
    std::copy(row_grad.begin(), row_grad.end(), dnorm.begin() + static_cast<std::ptrdiff_t>(r * cols));
  }
  return tape.record(std::move(out), {w}, [dnorm = std::move(dnorm), cols](const BackwardContext& ctx) {
    Tensor& gw = *ctx.input_grads[0];
    for (std::size_t i = 0; i < dnorm.size(); ++i) gw[i] += ctx.grad[i / cols] * dnorm[i];
  });
}

Var topk_magnitude_lp_norm(const Var& w, double p, std::size_t k, Axis axis) {
  check_p(p);
  Tape& tape = tape_of({&w});
  const Tensor& wv = w.value();
  auto [rows, cols] = as_rows(wv);
  if (axis == Axis::kAll) {
    rows = 1;
    cols = wv.numel();
  }
  if (k < 1 || k > cols) {
    throw ParameterError("top-k norm: k=" + std::to_string(k) + " outside [1, " + std::to_string(cols) + "]");
  }
  Tensor out(axis == Axis::kAll ? Shape{} : Shape{rows});
  std::vector<std::size_t> selected;
  std::vector<float> dnorm;
  selected.reserve(rows * k);
  dnorm.reserve(rows * k);
  std::vector<std::size_t> idx(cols);
  std::vector<float> row_grad;
  auto data = wv.data();
  for (std::size_t r = 0; r < rows; ++r) {
    std::iota(idx.begin(), idx.end(), r * cols);
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                      [&](std::size_t lhs, std::size_t rhs) {
                        const float a = std::fabs(data[lhs]);
                        const float b = std::fabs(data[rhs]);
                        return a != b ? a > b : lhs < rhs;
                      });
    std::span<const std::size_t> top(idx.data(), k);
    if (is_inf_norm(p)) {
      out[r] = std::fabs(data[top[0]]);
      row_grad.assign(k, 0.0f);
      row_grad[0] = sign_of(data[top[0]]);
    } else {
      out[r] = static_cast<float>(norm_with_grad(data, top, p, &row_grad));
    }
    selected.insert(selected.end(), top.begin(), top.end());
    dnorm.insert(dnorm.end(), row_grad.begin(), row_grad.end());
  }
  return tape.record(std::move(out), {w},
                     [selected = std::move(selected), dnorm = std::move(dnorm), k](const BackwardContext& ctx) {
                       Tensor& gw = *ctx.input_grads[0];
                       for (std::size_t t = 0; t < selected.size(); ++t) {
                         gw[selected[t]] += ctx.grad[t / k] * dnorm[t];
                       }
                     });
}

// --- linear algebra --------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  Tape& tape = tape_of({&a, &b});
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_matrix(av, "matmul");
  require_matrix(bv, "matmul");
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  if (bv.rows() != k) {
    throw DimensionError("matmul: inner dimensions differ, " + to_string(av.shape()) + " x " + to_string(bv.shape()));
  }
  Tensor out({m, n});
  gemm_acc(m, n, k, av.data().data(), bv.data().data(), out.data().data());
  return tape.record(std::move(out), {a, b}, [m, n, k](const BackwardContext& ctx) {
    const float* g = ctx.grad.data().data();
    if (Tensor* ga = ctx.input_grads[0]) {
      const auto bt = transposed(k, n, ctx.inputs[1]->data().data());
      gemm_acc(m, k, n, g, bt.data(), ga->data().data());
    }
    if (Tensor* gb = ctx.input_grads[1]) {
      const auto at = transposed(m, k, ctx.inputs[0]->data().data());
      gemm_acc(k, n, m, at.data(), g, gb->data().data());
    }
  });
}

Var linear(const Var& x, const Var& w) {
  Tape& tape = tape_of({&x, &w});
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  require_matrix(xv, "linear");
  require_matrix(wv, "linear");
  const std::size_t r = xv.rows(), n = xv.cols(), m = wv.rows();
  if (wv.cols() != n) {
    throw DimensionError("linear: input width " + std::to_string(n) + " vs weight " + to_string(wv.shape()));
  }
  Tensor out({r, m});
  const auto wt = transposed(m, n, wv.data().data());
  gemm_acc(r, m, n, xv.data().data(), wt.data(), out.data().data());
  return tape.record(std::move(out), {x, w}, [r, n, m](const BackwardContext& ctx) {
    const float* g = ctx.grad.data().data();
    if (Tensor* gx = ctx.input_grads[0]) gemm_acc(r, n, m, g, ctx.inputs[1]->data().data(), gx->data().data());
    if (Tensor* gw = ctx.input_grads[1]) {
      const auto gt = transposed(r, m, g);
      gemm_acc(m, n, r, gt.data(), ctx.inputs[0]->data().data(), gw->data().data());
    }
  });
}

Var transpose(const Var& a) {
  Tape& tape = tape_of({&a});
  require_matrix(a.value(), "transpose");
  const std::size_t m = a.value().rows(), n = a.value().cols();
  Tensor out({n, m});
  transpose_into(m, n, a.value().data().data(), out.data().data());
  return tape.record(std::move(out), {a}, [m, n](const BackwardContext& ctx) {
    const auto gt = transposed(n, m, ctx.grad.data().data());
    Tensor& ga = *ctx.input_grads[0];
    for (std::size_t i = 0; i < gt.size(); ++i) ga[i] += gt[i];
  });
}

Var bmm(const Var& a, const Var& b, bool transpose_b) {
  Tape& tape = tape_of({&a, &b});
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0)) {
    throw DimensionError("bmm: expected [G x M x K] and [G x K x N], got " + to_string(av.shape()) + " and " +
                         to_string(bv.shape()));
  }
  const std::size_t groups = av.dim(0), m = av.dim(1), k = av.dim(2);
  const std::size_t n = transpose_b ? bv.dim(1) : bv.dim(2);
  if ((transpose_b ? bv.dim(2) : bv.dim(1)) != k) {
    throw DimensionError("bmm: inner dimensions differ, " + to_string(av.shape()) + " and " + to_string(bv.shape()));
  }
  Tensor out({groups, m, n});
  std::vector<float> bt;
  for (std::size_t g = 0; g < groups; ++g) {
    const float* ag = av.data().data() + g * m * k;
    const float* bg = bv.data().data() + g * k * n;
    if (transpose_b) {
      bt = transposed(n, k, bg);
      bg = bt.data();
    }
    gemm_acc(m, n, k, ag, bg, out.data().data() + g * m * n);
  }
  return tape.record(std::move(out), {a, b}, [groups, m, n, k, transpose_b](const BackwardContext& ctx) {
    for (std::size_t g = 0; g < groups; ++g) {
      const float* gg = ctx.grad.data().data() + g * m * n;
      const float* ag = ctx.inputs[0]->data().data() + g * m * k;
      const float* bg = ctx.inputs[1]->data().data() + g * k * n;
      if (Tensor* ga = ctx.input_grads[0]) {
        float* dst = ga->data().data() + g * m * k;
        if (transpose_b) {
          gemm_acc(m, k, n, gg, bg, dst);
        } else {
          const auto bt = transposed(k, n, bg);
          gemm_acc(m, k, n, gg, bt.data(), dst);
        }
      }
      if (Tensor* gb = ctx.input_grads[1]) {
        float* dst = gb->data().data() + g * k * n;
        if (transpose_b) {
          const auto gt = transposed(m, n, gg);
          gemm_acc(n, k, m, gt.data(), ag, dst);
        } else {
          const auto at = transposed(m, k, ag);
          gemm_acc(k, n, m, at.data(), gg, dst);
        }
      }
    }
  });
}

// --- shape -----------------------------------------------------------------

Var reshape(const Var& a, Shape shape) {
  Tape& tape = tape_of({&a});
  return tape.record(a.value().reshaped(std::move(shape)), {a}, [](const BackwardContext& ctx) {
    Tensor& ga = *ctx.input_grads[0];
    for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += ctx.grad[i];
  });
}

Var swap_axes_12(const Var& a) {
  Tape& tape = tape_of({&a});
  const Tensor& av = a.value();
  if (av.rank() != 4) throw DimensionError("swap_axes_12: expected rank 4, got " + to_string(av.shape()));
  const std::size_t d0 = av.dim(0), d1 = av.dim(1), d2 = av.dim(2), d3 = av.dim(3);
  Tensor out({d0, d2, d1, d3});
  auto src_index = [=](std::size_t i, std::size_t j, std::size_t l) { return ((i * d1 + j) * d2 + l) * d3; };
  auto dst_index = [=](std::size_t i, std::size_t j, std::size_t l) { return ((i * d2 + l) * d1 + j) * d3; };
  for (std::size_t i = 0; i < d0; ++i)
    for (std::size_t j = 0; j < d1; ++j)
      for (std::size_t l = 0; l < d2; ++l)
        std::copy_n(av.data().data() + src_index(i, j, l), d3, out.data().data() + dst_index(i, j, l));
  return tape.record(std::move(out), {a}, [=](const BackwardContext& ctx) {
    Tensor& ga = *ctx.input_grads[0];
    for (std::size_t i = 0; i < d0; ++i)
      for (std::size_t j = 0; j < d1; ++j)
        for (std::size_t l = 0; l < d2; ++l) {
          const float* g = ctx.grad.data().data() + dst_index(i, j, l);
          float* dst = ga.data().data() + src_index(i, j, l);
          for (std::size_t t = 0; t < d3; ++t) dst[t] += g[t];
        }
  });
}

Var concat(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  Tape& tape = parts[0].tape();
  const Shape& first = parts[0].shape();
  if (first.empty()) throw DimensionError("concat of scalars");
  Shape shape = first;
  shape[0] = 0;
  std::vector<float> data;
  for (const Var& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size() || !std::equal(s.begin() + 1, s.end(), first.begin() + 1)) {
      throw DimensionError("concat: incompatible shapes " + to_string(first) + " and " + to_string(s));
    }
    shape[0] += s[0];
    data.insert(data.end(), p.value().data().begin(), p.value().data().end());
  }
  return tape.record(Tensor(std::move(shape), std::move(data)), std::vector<Var>(parts.begin(), parts.end()),
                     [](const BackwardContext& ctx) {
                       std::size_t offset = 0;
                       for (std::size_t p = 0; p < ctx.inputs.size(); ++p) {
                         const std::size_t count = ctx.inputs[p]->numel();
                         if (Tensor* gp = ctx.input_grads[p]) {
                           for (std::size_t i = 0; i < count; ++i) (*gp)[i] += ctx.grad[offset + i];
                         }
                         offset += count;
                       }
                     });
}

// --- nn --------------------------------------------------------------------

Var softmax(const Var& a) {
  Tape& tape = tape_of({&a});
  Tensor out = a.value();
  const auto [rows, cols] = as_rows(out);
  for (std::size_t r = 0; r < rows; ++r) {
    float* x = out.data().data() + r * cols;
    const float mx = *std::max_element(x, x + cols);
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      x[c] = std::exp(x[c] - mx);
      total += x[c];
    }
    const auto inv = static_cast<float>(1.0 / total);
    for (std::size_t c = 0; c < cols; ++c) x[c] *= inv;
  }
  return tape.record(std::move(out), {a}, [rows, cols](const BackwardContext& ctx) {
    Tensor& ga = *ctx.input_grads[0];
    for (std::size_t r = 0; r < rows; ++r) {
      const float* y = ctx.output.data().data() + r * cols;
      const float* g = ctx.grad.data().data() + r * cols;
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += static_cast<double>(g[c]) * y[c];
      float* dst = ga.data().data() + r * cols;
      for (std::size_t c = 0; c < cols; ++c) dst[c] += y[c] * (g[c] - static_cast<float>(dot));
    }
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, float eps) {
  Tape& tape = tape_of({&x, &gamma, &beta});
  const Tensor& xv = x.value();
  const auto [rows, d] = as_rows(xv);
  if (gamma.value().numel() != d || beta.value().numel() != d) {
    throw DimensionError("layer_norm: gain/bias length does not match width " + std::to_string(d));
  }
  Tensor out(xv.shape());
  std::vector<float> xhat(xv.numel());
  std::vector<float> rstd(rows);
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const float* in = xv.data().data() + r * d;
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += in[c];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (in[c] - mu) * (in[c] - mu);
    var /= static_cast<double>(d);
    const auto rs = static_cast<float>(1.0 / std::sqrt(var + eps));
    rstd[r] = rs;
    for (std::size_t c = 0; c < d; ++c) {
      const float h = (in[c] - static_cast<float>(mu)) * rs;
      xhat[r * d + c] = h;
      out[r * d + c] = h * gv[c] + bv[c];
    }
  }
  return tape.record(std::move(out), {x, gamma, beta},
                     [xhat = std::move(xhat), rstd = std::move(rstd), rows, d](const BackwardContext& ctx) {
                       const Tensor& gv = *ctx.inputs[1];
                       Tensor* gx = ctx.input_grads[0];
                       Tensor* gg = ctx.input_grads[1];
                       Tensor* gb = ctx.input_grads[2];
                       std::vector<float> gxhat(d);
                       for (std::size_t r = 0; r < rows; ++r) {
                         const float* g = ctx.grad.data().data() + r * d;
                         const float* h = xhat.data() + r * d;
                         double sum_g = 0.0, sum_gh = 0.0;
                         for (std::size_t c = 0; c < d; ++c) {
                           if (gg) (*gg)[c] += g[c] * h[c];
                           if (gb) (*gb)[c] += g[c];
                           gxhat[c] = g[c] * gv[c];
                           sum_g += gxhat[c];
                           sum_gh += static_cast<double>(gxhat[c]) * h[c];
                         }
                         if (gx) {
                           const auto mean_g = static_cast<float>(sum_g / static_cast<double>(d));
                           const auto mean_gh = static_cast<float>(sum_gh / static_cast<double>(d));
                           float* dst = gx->data().data() + r * d;
                           for (std::size_t c = 0; c < d; ++c) {
                             dst[c] += rstd[r] * (gxhat[c] - mean_g - h[c] * mean_gh);
                           }
                         }
                       }
                     });
}

Var embedding(const Var& table, std::span<const int> ids) {
  Tape& tape = tape_of({&table});
  const Tensor& tv = table.value();
  require_matrix(tv, "embedding");
  const std::size_t vocab = tv.rows(), d = tv.cols();
  Tensor out({ids.size(), d});
  std::vector<int> kept(ids.begin(), ids.end());
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= vocab) {
      throw DimensionError("embedding: token id " + std::to_string(ids[r]) + " outside vocabulary of " +
                           std::to_string(vocab));
    }
    std::copy_n(tv.row(static_cast<std::size_t>(ids[r])).data(), d, out.row(r).data());
  }
  return tape.record(std::move(out), {table}, [kept = std::move(kept), d](const BackwardContext& ctx) {
    Tensor& gt = *ctx.input_grads[0];
    for (std::size_t r = 0; r < kept.size(); ++r) {
      float* dst = gt.row(static_cast<std::size_t>(kept[r])).data();
      const float* g = ctx.grad.data().data() + r * d;
      for (std::size_t c = 0; c < d; ++c) dst[c] += g[c];
    }
  });
}

Var cross_entropy(const Var& logits, std::span<const int> targets, int ignore_index) {
  Tape& tape = tape_of({&logits});
  const Tensor& lv = logits.value();
  require_matrix(lv, "cross_entropy");
  const std::size_t rows = lv.rows(), vocab = lv.cols();
  if (targets.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(rows) + " rows");
  }
  std::vector<float> probs(lv.numel(), 0.0f);
  std::vector<int> kept(targets.begin(), targets.end());
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] == ignore_index) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab) {
      throw DimensionError("cross_entropy: target " + std::to_string(targets[r]) + " outside vocabulary");
    }
    auto x = lv.row(r);
    const float mx = *std::max_element(x.begin(), x.end());
    double z = 0.0;
    for (std::size_t c = 0; c < vocab; ++c) z += std::exp(static_cast<double>(x[c] - mx));
    const double log_z = std::log(z) + mx;
    total += log_z - x[static_cast<std::size_t>(targets[r])];
    for (std::size_t c = 0; c < vocab; ++c) probs[r * vocab + c] = static_cast<float>(std::exp(x[c] - log_z));
    ++count;
  }
  const double denom = count ? static_cast<double>(count) : 1.0;
  return tape.record(Tensor::scalar(static_cast<float>(total / denom)), {logits},
                     [probs = std::move(probs), kept = std::move(kept), vocab, ignore_index,
                      denom](const BackwardContext& ctx) {
                       Tensor& gl = *ctx.input_grads[0];
                       const auto g = static_cast<float>(ctx.grad[0] / denom);
                       for (std::size_t r = 0; r < kept.size(); ++r) {
                         if (kept[r] == ignore_index) continue;
                         for (std::size_t c = 0; c < vocab; ++c) gl[r * vocab + c] += g * probs[r * vocab + c];
                         gl[r * vocab + static_cast<std::size_t>(kept[r])] -= g;
                       }
                     });
}

// --- gradient control --------------------------------------------------------

Var stop_gradient(const Var& a) { return tape_of({&a}).constant(a.value()); }

Var scale_grad(const Var& a, float factor) {
  Tape& tape = tape_of({&a});
  return tape.record(a.value(), {a}, [factor](const BackwardContext& ctx) {
    Tensor& ga = *ctx.input_grads[0];
    for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += ctx.grad[i] * factor;
  });
}

}  // namespace randq
