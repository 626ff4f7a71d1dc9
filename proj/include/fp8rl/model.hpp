/*
 * Copyright (c) 2026, The fp8rl Authors. All rights reserved.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

// Toy decoder-only transformer: learned token and position embeddings,
// pre-RMSNorm blocks with causal multi-head attention and either a SwiGLU MLP
// (gate/up/down) or a top-k MoE of SiLU experts (fc1/fc2), a final RMSNorm
// and an untied lm_head.
//
// One forward implementation serves both the rollout engine (incremental,
// one row at a time against a KV cache) and the trainer (whole sequence with
// a tape for backprop). Every operation is row-local except attention, which
// only reads earlier cache rows, so logits for a position are bitwise equal
// whichever way the sequence is chunked.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <type_traits>
#include <vector>

#include "fp8rl/blockquant.hpp"
#include "fp8rl/error.hpp"
#include "fp8rl/kvquant.hpp"
#include "fp8rl/model_config.hpp"
#include "fp8rl/tensor.hpp"
#include "fp8rl/weights.hpp"

namespace fp8rl {

using Token = std::int32_t;

inline constexpr double kRmsNormEps = 1e-5;

// Records the perturbation every activation fake-quant node applies on one
// pass and replays it on later passes, turning each node into x + constant.
// Used to take finite differences through quantized forwards.
template <typename T>
struct FakeQuantFreeze {
  enum class Mode { kRecord, kReplay };
  Mode mode = Mode::kRecord;
  std::vector<Matrix<T>> deltas;
  std::size_t cursor = 0;

  void start(Mode m) {
    mode = m;
    cursor = 0;
    if (m == Mode::kRecord) deltas.clear();
  }
};

template <typename T>
struct LayerTape {
  Matrix<T> x_in, h1, h1q, q, k, v, attn, attn_q, x_mid, h2, h2q;
  std::vector<T> inv_rms1, inv_rms2;
  std::vector<Matrix<T>> probs;
  // dense
  Matrix<T> g, u, aq;
  // moe: router input/logits, rank-ordered selections, and per (row, slot)
  // expert activations stored at row index i * top_k + slot
  Matrix<T> router_in, router_logits;
  std::vector<std::int32_t> sel;
  std::vector<T> gate;
  Matrix<T> moe_z, moe_sq, moe_y;
};

template <typename T>
struct Tape {
  std::vector<LayerTape<T>> layers;
  Matrix<T> x_final, hf;
  std::vector<T> inv_rmsf;
};

template <typename T>
struct ForwardHooks {
  const RoutingRecord* replay = nullptr;  // overrides expert selection
  RoutingRecord* routing_out = nullptr;   // receives selections for the rows run
  QkvAmax<T>* amax = nullptr;             // calibration observer
  FakeQuantFreeze<T>* freeze = nullptr;
  Tape<T>* tape = nullptr;
};

namespace detail {

template <typename T>
T silu(T z) {
  return z / (T(1) + std::exp(-z));
}

template <typename T>
T silu_grad(T z) {
  const T s = T(1) / (T(1) + std::exp(-z));
  return s * (T(1) + z * (T(1) - s));
}

template <typename T>
void rmsnorm_rows(const Matrix<T>& x, const Matrix<T>& gain, Matrix<T>& y, std::vector<T>* inv_rms) {
  const std::size_t d = x.cols();
  y = Matrix<T>(x.rows(), d);
  if (inv_rms) inv_rms->assign(x.rows(), T(0));
  for (std::size_t i = 0; i < x.rows(); ++i) {
    T ms = 0;
    for (std::size_t j = 0; j < d; ++j) ms += x(i, j) * x(i, j);
    const T r = T(1) / std::sqrt(ms / static_cast<T>(d) + static_cast<T>(kRmsNormEps));
    if (inv_rms) (*inv_rms)[i] = r;
    for (std::size_t j = 0; j < d; ++j) y(i, j) = x(i, j) * r * gain(0, j);
  }
}

// Activation quantize-dequantize for an in-scope linear input.
template <typename T>
void fake_quant_input(Matrix<T>& m, bool enabled, std::size_t tile, FakeQuantFreeze<T>* fz) {
  if (!enabled) return;
  if (fz && fz->mode == FakeQuantFreeze<T>::Mode::kReplay) {
    if (fz->cursor >= fz->deltas.size()) throw ProtocolError("fake-quant replay: more nodes than recorded");
    const Matrix<T>& d = fz->deltas[fz->cursor++];
    if (d.rows() != m.rows() || d.cols() != m.cols()) throw ShapeError("fake-quant replay: shape mismatch");
    for (std::size_t n = 0; n < m.size(); ++n) m.flat()[n] += d.flat()[n];
    return;
  }
  Matrix<T> before;
  if (fz) before = m;
  for (std::size_t i = 0; i < m.rows(); ++i) fake_quant_row(m.row(i), tile);
  if (fz) {
    for (std::size_t n = 0; n < m.size(); ++n) before.flat()[n] = m.flat()[n] - before.flat()[n];
    fz->deltas.push_back(std::move(before));
    ++fz->cursor;
  }
}

// Indices of the k largest values, descending, lowest index first on ties.
template <typename T>
void top_k_indices(std::span<const T> v, std::size_t k, std::vector<std::int32_t>& out) {
  std::vector<std::int32_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::int32_t a, std::int32_t b) { return v[a] > v[b]; });
  out.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
}

template <typename T>
void add_into(Matrix<T>& acc, const Matrix<T>& x) {
  for (std::size_t n = 0; n < acc.size(); ++n) acc.flat()[n] += x.flat()[n];
}

// C += A^T * B
template <typename T>
void gemm_tn_acc(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c) {
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const T av = a(r, i);
      if (av == T(0)) continue;
      T* cr = c.data() + i * c.cols();
      const T* br = b.data() + r * b.cols();
      for (std::size_t j = 0; j < b.cols(); ++j) cr[j] += av * br[j];
    }
}

// A * B^T
template <typename T>
Matrix<T> gemm_nt(const Matrix<T>& a, const Matrix<T>& b) {
  Matrix<T> c(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.rows(); ++j) {
      T s = 0;
      const T* ar = a.data() + i * a.cols();
      const T* br = b.data() + j * b.cols();
      for (std::size_t k = 0; k < a.cols(); ++k) s += ar[k] * br[k];
      c(i, j) = s;
    }
  return c;
}

template <typename T>
void rmsnorm_backward(const Matrix<T>& x, const Matrix<T>& gain, const std::vector<T>& inv_rms,
                      const Matrix<T>& dy, Matrix<T>& dgain, Matrix<T>& dx_acc) {
  const std::size_t d = x.cols();
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const T r = inv_rms[i];
    T dot = 0;
    for (std::size_t j = 0; j < d; ++j) {
      dgain(0, j) += dy(i, j) * x(i, j) * r;
      dot += gain(0, j) * dy(i, j) * x(i, j);
    }
    const T c = r * r * r * dot / static_cast<T>(d);
    for (std::size_t j = 0; j < d; ++j) dx_acc(i, j) += r * gain(0, j) * dy(i, j) - c * x(i, j);
  }
}

}  // namespace detail

// Natural-log softmax of one row; the single implementation behind both the
// rollout's recorded log-probs and the trainer's recomputation.
template <typename T>
void log_softmax_row(std::span<const T> z, std::span<T> out) {
  T mx = -std::numeric_limits<T>::infinity();
  for (T v : z) mx = std::max(mx, v);
  T s = 0;
  for (T v : z) s += std::exp(v - mx);
  const T lse = mx + std::log(s);
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = z[i] - lse;
}

// Runs rows [begin, end) of `tokens` through the network. The cache must
// already hold exactly `begin` positions; K/V for the new rows are appended.
// `weights` are effective weights (see effective_weights()); activation
// fake-quant is applied here when scope.linear_fp8 is set.
template <typename T>
Matrix<T> forward_rows(const PolicyWeights<T>& weights, std::span<const Token> tokens, std::size_t begin,
                       std::size_t end, const QuantizationScope& scope, KvCacheState<T>& cache,
                       const ForwardHooks<T>& hooks = {}) {
  const ModelConfig& cfg = weights.config;
  const std::size_t d = cfg.d_model, n = end - begin;
  if (begin >= end || end > tokens.size()) throw ShapeError("forward: empty or out-of-range row span");
  if (end > cfg.max_seq) throw ShapeError("forward: sequence exceeds max_seq");
  if (cache.seq_len() != begin || cache.n_layers() != cfg.n_layers || cache.width != d)
    throw ShapeError("forward: cache inconsistent with prior positions");
  if (hooks.tape && begin != 0) throw ShapeError("forward: tape requires a whole-sequence pass");
  const bool fq_lin = scope.linear_fp8;
  const bool fq_router = scope.linear_fp8 && scope.quantize_router;
  const std::size_t tile = scope.act_tile;
  auto* fz = hooks.freeze;
  Tape<T>* tape = hooks.tape;
  if (tape) tape->layers.assign(cfg.n_layers, {});

  Matrix<T> x(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    const Token t = tokens[begin + i];
    if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size) throw ShapeError("forward: token id out of range");
    for (std::size_t j = 0; j < d; ++j) x(i, j) = weights.embedding(t, j) + weights.pos_embedding(begin + i, j);
  }

  const std::size_t top_k = cfg.moe ? cfg.moe->top_k : 0;
  if (hooks.replay) {
    if (!cfg.moe) throw ShapeError("forward: routing replay on a dense model");
    if (hooks.replay->n_layers() != cfg.n_layers || hooks.replay->top_k != top_k ||
        hooks.replay->positions() < end)
      throw ShapeError("forward: replay record does not cover the requested positions");
  }
  if (hooks.routing_out && cfg.moe && hooks.routing_out->empty()) *hooks.routing_out = RoutingRecord(cfg.n_layers, top_k);

  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto& L = weights.layers[l];
    Matrix<T> h1, h1q, q, k, v, attn_q, h2, h2q;
    std::vector<T> r1, r2;
    detail::rmsnorm_rows(x, L.attn_norm, h1, tape ? &r1 : nullptr);
    h1q = h1;
    detail::fake_quant_input(h1q, fq_lin, tile, fz);
    gemm(h1q, L.q_proj, q);
    gemm(h1q, L.k_proj, k);
    gemm(h1q, L.v_proj, v);
    if (hooks.amax) {
      QkvAmax<T>::observe(hooks.amax->q[l], q);
      QkvAmax<T>::observe(hooks.amax->k[l], k);
      QkvAmax<T>::observe(hooks.amax->v[l], v);
    }
    cache_append(cache, l, k, v);
    std::vector<Matrix<T>> probs;
    Matrix<T> attn = attention_forward(q, begin, cache, l, cfg.n_heads, scope.attention_fp8, tape ? &probs : nullptr);
    attn_q = attn;
    detail::fake_quant_input(attn_q, fq_lin, tile, fz);
    Matrix<T> o = gemm(attn_q, L.o_proj);
    Matrix<T> x_mid = x;
    detail::add_into(x_mid, o);

    detail::rmsnorm_rows(x_mid, L.mlp_norm, h2, tape ? &r2 : nullptr);
    h2q = h2;
    detail::fake_quant_input(h2q, fq_lin, tile, fz);
    Matrix<T> mlp(n, d);
    if (!cfg.moe) {
      Matrix<T> g = gemm(h2q, L.gate_proj), u = gemm(h2q, L.up_proj);
      Matrix<T> a(n, cfg.d_ff);
      for (std::size_t e = 0; e < a.size(); ++e) a.flat()[e] = detail::silu(g.flat()[e]) * u.flat()[e];
      detail::fake_quant_input(a, fq_lin, tile, fz);
      gemm(a, L.down_proj, mlp);
      if (tape) {
        auto& lt = tape->layers[l];
        lt.g = std::move(g);
        lt.u = std::move(u);
        lt.aq = std::move(a);
      }
    } else {
      const std::size_t n_exp = cfg.moe->n_experts;
      Matrix<T> router_in = h2;
      detail::fake_quant_input(router_in, fq_router, tile, fz);
      Matrix<T> logits = gemm(router_in, L.router);
      std::vector<std::int32_t> sel(n * top_k), pick;
      std::vector<T> gate(n * top_k);
      for (std::size_t i = 0; i < n; ++i) {
        if (hooks.replay) {
          pick.clear();
          for (std::size_t s = 0; s < top_k; ++s) {
            const auto e = hooks.replay->expert(l, begin + i, s);
            if (e < 0 || static_cast<std::size_t>(e) >= n_exp) throw ShapeError("forward: replayed expert out of range");
            pick.push_back(e);
          }
        } else {
          detail::top_k_indices<T>(logits.row(i), top_k, pick);
        }
        T mx = -std::numeric_limits<T>::infinity();
        for (auto e : pick) mx = std::max(mx, logits(i, e));
        T sum = 0;
        for (std::size_t s = 0; s < top_k; ++s) {
          gate[i * top_k + s] = std::exp(logits(i, pick[s]) - mx);
          sum += gate[i * top_k + s];
        }
        for (std::size_t s = 0; s < top_k; ++s) {
          gate[i * top_k + s] /= sum;
          sel[i * top_k + s] = pick[s];
        }
      }
      Matrix<T> z(n * top_k, cfg.d_ff), sq(n * top_k, cfg.d_ff), y(n * top_k, d);
      for (std::size_t r = 0; r < n * top_k; ++r) {
        gemv_row<T>(h2q.row(r / top_k), L.fc1[sel[r]], z.row(r));
        for (std::size_t j = 0; j < cfg.d_ff; ++j) sq(r, j) = detail::silu(z(r, j));
      }
      detail::fake_quant_input(sq, fq_lin, tile, fz);
      for (std::size_t r = 0; r < n * top_k; ++r) {
        gemv_row<T>(sq.row(r), L.fc2[sel[r]], y.row(r));
        const T gr = gate[r];
        auto mr = mlp.row(r / top_k);
        for (std::size_t j = 0; j < d; ++j) mr[j] += gr * y(r, j);
      }
      if (hooks.routing_out) {
        auto& rec = *hooks.routing_out;
        rec.experts[l].insert(rec.experts[l].end(), sel.begin(), sel.end());
        for (T gv : gate) rec.weights[l].push_back(static_cast<float>(gv));
      }
      if (tape) {
        auto& lt = tape->layers[l];
        lt.router_in = std::move(router_in);
        lt.router_logits = std::move(logits);
        lt.sel = std::move(sel);
        lt.gate = std::move(gate);
        lt.moe_z = std::move(z);
        lt.moe_sq = std::move(sq);
        lt.moe_y = std::move(y);
      }
    }
    Matrix<T> x_out = x_mid;
    detail::add_into(x_out, mlp);
    if (tape) {
      auto& lt = tape->layers[l];
      lt.x_in = std::move(x);
      lt.h1 = std::move(h1);
      lt.h1q = std::move(h1q);
      lt.inv_rms1 = std::move(r1);
      lt.q = std::move(q);
      lt.k = std::move(k);
      lt.v = std::move(v);
      lt.probs = std::move(probs);
      lt.attn = std::move(attn);
      lt.attn_q = std::move(attn_q);
      lt.x_mid = std::move(x_mid);
      lt.h2 = std::move(h2);
      lt.h2q = std::move(h2q);
      lt.inv_rms2 = std::move(r2);
    }
    x = std::move(x_out);
  }

  Matrix<T> hf;
  std::vector<T> rf;
  detail::rmsnorm_rows(x, weights.final_norm, hf, tape ? &rf : nullptr);
  Matrix<T> logits = gemm(hf, weights.lm_head);
  if (tape) {
    tape->x_final = std::move(x);
    tape->hf = std::move(hf);
    tape->inv_rmsf = std::move(rf);
  }
  return logits;
}

template <typename T>
struct ForwardResult {
  Matrix<T> logits;  // one row per new position
  RoutingRecord routing;
  KvCacheState<T> cache;
};

// Runs the positions of `tokens` not yet in `cache` (a fresh full-precision
// cache when none is given).
template <typename T>
ForwardResult<T> forward_logits(const PolicyWeights<T>& weights, std::span<const Token> tokens,
                                const QuantizationScope& scope, std::optional<std::type_identity_t<KvCacheState<T>>> cache = std::nullopt,
                                const RoutingRecord* replay = nullptr) {
  scope.validate();
  ForwardResult<T> out;
  out.cache = cache ? std::move(*cache)
                    : make_kv_cache<T>(weights.config.n_layers, weights.config.d_model, KvDtype::kFull);
  ForwardHooks<T> hooks;
  hooks.replay = replay;
  hooks.routing_out = weights.config.moe ? &out.routing : nullptr;
  out.logits = forward_rows(weights, tokens, out.cache.seq_len(), tokens.size(), scope, out.cache, hooks);
  return out;
}

// Reverse pass for a whole-sequence forward recorded on `tape`. Gradients
// with respect to the effective weights are accumulated into `grad`;
// quantize-dequantize nodes pass gradients straight through.
template <typename T>
void backward_rows(const PolicyWeights<T>& weights, std::span<const Token> tokens, const Tape<T>& tape,
                   const Matrix<T>& dlogits, PolicyWeights<T>& grad) {
  const ModelConfig& cfg = weights.config;
  const std::size_t d = cfg.d_model, n = dlogits.rows(), nh = cfg.n_heads, dh = cfg.head_dim();

  detail::gemm_tn_acc(tape.hf, dlogits, grad.lm_head);
  Matrix<T> dhf = detail::gemm_nt(dlogits, weights.lm_head);
  Matrix<T> dx(n, d);
  detail::rmsnorm_backward(tape.x_final, weights.final_norm, tape.inv_rmsf, dhf, grad.final_norm, dx);

  for (std::size_t li = cfg.n_layers; li-- > 0;) {
    const auto& L = weights.layers[li];
    auto& G = grad.layers[li];
    const auto& t = tape.layers[li];

    // MLP / MoE branch: dx is the gradient wrt the block output and, via the
    // residual, wrt x_mid.
    Matrix<T> dh2(n, d);
    if (!cfg.moe) {
      detail::gemm_tn_acc(t.aq, dx, G.down_proj);
      Matrix<T> da = detail::gemm_nt(dx, L.down_proj);
      Matrix<T> dg(n, cfg.d_ff), du(n, cfg.d_ff);
      for (std::size_t e = 0; e < da.size(); ++e) {
        const T gz = t.g.flat()[e];
        dg.flat()[e] = da.flat()[e] * t.u.flat()[e] * detail::silu_grad(gz);
        du.flat()[e] = da.flat()[e] * detail::silu(gz);
      }
      detail::gemm_tn_acc(t.h2q, dg, G.gate_proj);
      detail::gemm_tn_acc(t.h2q, du, G.up_proj);
      dh2 = detail::gemm_nt(dg, L.gate_proj);
      detail::add_into(dh2, detail::gemm_nt(du, L.up_proj));
    } else {
      const std::size_t k = cfg.moe->top_k;
      Matrix<T> drouter_logits(n, cfg.moe->n_experts);
      std::vector<T> dz(cfg.d_ff), dsq(cfg.d_ff), dgate(k);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t s = 0; s < k; ++s) {
          const std::size_t r = i * k + s;
          const auto e = static_cast<std::size_t>(t.sel[r]);
          const T gr = t.gate[r];
          T dgr = 0;
          for (std::size_t j = 0; j < d; ++j) dgr += dx(i, j) * t.moe_y(r, j);
          dgate[s] = dgr;
          // fc2: y = sq * fc2_e, dy = gate * dx_i
          for (std::size_t a = 0; a < cfg.d_ff; ++a) {
            const T sa = t.moe_sq(r, a);
            T acc = 0;
            const T* w2 = L.fc2[e].data() + a * d;
            T* g2 = G.fc2[e].data() + a * d;
            for (std::size_t j = 0; j < d; ++j) {
              const T dyj = gr * dx(i, j);
              g2[j] += sa * dyj;
              acc += dyj * w2[j];
            }
            dsq[a] = acc;
            dz[a] = acc * detail::silu_grad(t.moe_z(r, a));
          }
          // fc1: z = h2q_i * fc1_e
          for (std::size_t c = 0; c < d; ++c) {
            const T hv = t.h2q(i, c);
            T* g1 = G.fc1[e].data() + c * cfg.d_ff;
            const T* w1 = L.fc1[e].data() + c * cfg.d_ff;
            T acc = 0;
            for (std::size_t a = 0; a < cfg.d_ff; ++a) {
              g1[a] += hv * dz[a];
              acc += dz[a] * w1[a];
            }
            dh2(i, c) += acc;
          }
        }
        // Renormalized softmax over the selected logits.
        T mean = 0;
        for (std::size_t s = 0; s < k; ++s) mean += t.gate[i * k + s] * dgate[s];
        for (std::size_t s = 0; s < k; ++s)
          drouter_logits(i, t.sel[i * k + s]) += t.gate[i * k + s] * (dgate[s] - mean);
      }
      detail::gemm_tn_acc(t.router_in, drouter_logits, G.router);
      detail::add_into(dh2, detail::gemm_nt(drouter_logits, L.router));
    }
    Matrix<T> dx_mid = dx;
    detail::rmsnorm_backward(t.x_mid, L.mlp_norm, t.inv_rms2, dh2, G.mlp_norm, dx_mid);

    // Attention branch.
    detail::gemm_tn_acc(t.attn_q, dx_mid, G.o_proj);
    Matrix<T> dattn = detail::gemm_nt(dx_mid, L.o_proj);
    Matrix<T> dq(n, d), dk(n, d), dv(n, d);
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
    std::vector<T> dp(n);
    for (std::size_t h = 0; h < nh; ++h) {
      const std::size_t off = h * dh;
      const Matrix<T>& P = t.probs[h];
      for (std::size_t i = 0; i < n; ++i) {
        T dot = 0;
        for (std::size_t j = 0; j <= i; ++j) {
          T s = 0;
          for (std::size_t c = 0; c < dh; ++c) {
            s += dattn(i, off + c) * t.v(j, off + c);
            dv(j, off + c) += P(i, j) * dattn(i, off + c);
          }
          dp[j] = s;
          dot += P(i, j) * s;
        }
        for (std::size_t j = 0; j <= i; ++j) {
          const T ds = P(i, j) * (dp[j] - dot) * inv_sqrt;
          for (std::size_t c = 0; c < dh; ++c) {
            dq(i, off + c) += ds * t.k(j, off + c);
            dk(j, off + c) += ds * t.q(i, off + c);
          }
        }
      }
    }
    detail::gemm_tn_acc(t.h1q, dq, G.q_proj);
    detail::gemm_tn_acc(t.h1q, dk, G.k_proj);
    detail::gemm_tn_acc(t.h1q, dv, G.v_proj);
    Matrix<T> dh1 = detail::gemm_nt(dq, L.q_proj);
    detail::add_into(dh1, detail::gemm_nt(dk, L.k_proj));
    detail::add_into(dh1, detail::gemm_nt(dv, L.v_proj));
    Matrix<T> dx_in = dx_mid;
    detail::rmsnorm_backward(t.x_in, L.attn_norm, t.inv_rms1, dh1, G.attn_norm, dx_in);
    dx = std::move(dx_in);
  }

  for (std::size_t i = 0; i < n; ++i) {
    const auto tok = static_cast<std::size_t>(tokens[i]);
    for (std::size_t j = 0; j < d; ++j) {
      grad.embedding(tok, j) += dx(i, j);
      grad.pos_embedding(i, j) += dx(i, j);
    }
  }
}

// ---------------------------------------------------------------------------
// Sampling

struct SamplerConfig {
  double temperature = 1.0;  // <= 0 selects greedy decoding
  double top_p = 1.0;
  std::size_t top_k = 0;  // 0 disables
  std::size_t max_new_tokens = 16;
  Token eos = 1;

  bool greedy() const { return temperature <= 0.0; }
  // Samples straight from the model distribution, so recorded log-probs are
  // plain log-softmax values.
  bool pure() const { return temperature == 1.0 && top_p >= 1.0 && top_k == 0; }
};

template <typename T>
struct SampledResponse {
  std::vector<Token> tokens;  // response only, EOS included when emitted
  std::vector<T> logp;        // rollout log-prob of each response token
  RoutingRecord routing;      // positions 0 .. prompt+response-2
  KvCacheState<T> cache;
};

namespace detail {

inline double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

// Draws the next token from one logits row under the sampler settings and
// returns (token, log-prob under the distribution actually sampled from).
template <typename T>
std::pair<Token, T> draw_token(std::span<const T> logits, const SamplerConfig& sc, std::mt19937_64& rng) {
  const std::size_t V = logits.size();
  if (sc.greedy()) {
    std::size_t best = 0;
    for (std::size_t v = 1; v < V; ++v)
      if (logits[v] > logits[best]) best = v;
    return {static_cast<Token>(best), T(0)};
  }
  std::vector<T> z(logits.begin(), logits.end()), lp(V);
  if (sc.temperature != 1.0)
    for (auto& v : z) v /= static_cast<T>(sc.temperature);
  log_softmax_row<T>(z, lp);
  std::vector<bool> keep(V, true);
  bool truncated = false;
  if (sc.top_k > 0 && sc.top_k < V) {
    std::vector<std::int32_t> idx;
    top_k_indices<T>(lp, sc.top_k, idx);
    std::fill(keep.begin(), keep.end(), false);
    for (auto i : idx) keep[i] = true;
    truncated = true;
  }
  if (sc.top_p < 1.0) {
    std::vector<std::int32_t> order;
    top_k_indices<T>(lp, V, order);
    double cum = 0;
    std::vector<bool> nucleus(V, false);
    for (auto i : order) {
      if (!keep[i]) continue;
      nucleus[i] = true;
      cum += std::exp(static_cast<double>(lp[i]));
      if (cum >= sc.top_p) break;
    }
    keep = nucleus;
    truncated = true;
  }
  if (truncated) {
    T mass = 0;
    for (std::size_t v = 0; v < V; ++v)
      if (keep[v]) mass += std::exp(lp[v]);
    const T log_mass = std::log(mass);
    for (std::size_t v = 0; v < V; ++v) lp[v] = keep[v] ? lp[v] - log_mass : -std::numeric_limits<T>::infinity();
  }
  double total = 0;
  for (std::size_t v = 0; v < V; ++v)
    if (keep[v]) total += std::exp(static_cast<double>(lp[v]));
  const double u = uniform01(rng) * total;
  double cum = 0;
  std::size_t pick = V;
  for (std::size_t v = 0; v < V; ++v) {
    if (!keep[v]) continue;
    cum += std::exp(static_cast<double>(lp[v]));
    pick = v;
    if (u < cum) break;
  }
  return {static_cast<Token>(pick), lp[pick]};
}

}  // namespace detail

// Autoregressive generation from effective weights. `cache` supplies dtype
// and frozen scales (its stored tokens must be empty); generation stops at
// EOS, after max_new_tokens, or when the sequence reaches max_seq.
template <typename T>
SampledResponse<T> sample_response(const PolicyWeights<T>& weights, std::span<const Token> prompt,
                                   const QuantizationScope& scope, const SamplerConfig& sampler,
                                   std::uint64_t seed, KvCacheState<T> cache) {
  const ModelConfig& cfg = weights.config;
  if (prompt.empty()) throw ShapeError("sample_response: empty prompt");
  if (sampler.max_new_tokens == 0) throw ConfigError("sample_response: max_new_tokens must be >= 1");
  if (prompt.size() >= cfg.max_seq) throw ShapeError("sample_response: prompt leaves no room to generate");
  if (cache.seq_len() != 0) throw ShapeError("sample_response: cache must be empty");
  std::mt19937_64 rng(seed);
  SampledResponse<T> out;
  std::vector<Token> seq(prompt.begin(), prompt.end());
  ForwardHooks<T> hooks;
  hooks.routing_out = cfg.moe ? &out.routing : nullptr;
  Matrix<T> logits = forward_rows(weights, seq, 0, seq.size(), scope, cache, hooks);
  for (;;) {
    auto [tok, lp] = detail::draw_token<T>(logits.row(logits.rows() - 1), sampler, rng);
    out.tokens.push_back(tok);
    out.logp.push_back(lp);
    seq.push_back(tok);
    if (tok == sampler.eos || out.tokens.size() >= sampler.max_new_tokens || seq.size() >= cfg.max_seq) break;
    logits = forward_rows(weights, seq, seq.size() - 1, seq.size(), scope, cache, hooks);
  }
  out.cache = std::move(cache);
  return out;
}

// Full-precision-KV convenience overload.
template <typename T>
SampledResponse<T> sample_response(const PolicyWeights<T>& weights, std::span<const Token> prompt,
                                   const QuantizationScope& scope, const SamplerConfig& sampler,
                                   std::uint64_t seed) {
  if (scope.kv_cache_fp8) throw ProtocolError("sample_response: fp8 KV requires a calibrated cache");
  return sample_response(weights, prompt, scope, sampler, seed,
                         make_kv_cache<T>(weights.config.n_layers, weights.config.d_model, KvDtype::kFull));
}

// ---------------------------------------------------------------------------
// Trainer-side evaluation

template <typename T>
struct TrainerSequence {
  std::span<const Token> tokens;  // prompt followed by response
  std::size_t first_target = 1;   // index of the first token scored
  std::span<const T> loss_weights;  // per target; empty when no gradient is wanted
  const RoutingRecord* replay = nullptr;
};

template <typename T>
struct SequenceEval {
  std::vector<T> logp;   // log-prob of each target token
  Matrix<T> full_logp;   // targets x vocab, when requested
  RoutingRecord routing;  // selections made by this forward (MoE)
};

template <typename T>
struct EvalOptions {
  bool full_distribution = false;
  const KvScales* kv_scales = nullptr;  // frozen scales for a forward-only fp8 KV pass
  FakeQuantFreeze<T>* freeze = nullptr;
  // Alternative to TrainerSequence::loss_weights: derives per-target loss
  // weights from the log-probs of this same forward.
  std::function<void(std::span<const T> logp, std::vector<T>& loss_weights)> loss_weights_fn;
};

// Scores target tokens of one sequence with the effective weights and, when
// loss weights are given and grad is non-null, accumulates the gradient of
// sum_t loss_weights[t] * logp[t].
template <typename T>
SequenceEval<T> evaluate_sequence(const PolicyWeights<T>& weights, const TrainerSequence<T>& seq,
                                  const QuantizationScope& scope, const EvalOptions<T>& opt,
                                  std::type_identity_t<PolicyWeights<T>>* grad) {
  const ModelConfig& cfg = weights.config;
  const std::size_t L = seq.tokens.size();
  if (seq.first_target == 0 || seq.first_target >= L) throw ShapeError("evaluate: no target tokens");
  const std::size_t rows = L - 1, n_targets = L - seq.first_target;
  const bool want_grad = grad && (!seq.loss_weights.empty() || opt.loss_weights_fn);
  if (want_grad && scope.kv_cache_fp8) throw ConfigError("evaluate: gradients through fp8 KV are not supported");
  if (seq.replay && seq.replay->positions() != rows)
    throw ShapeError("evaluate: replay record length does not match the sequence");

  KvCacheState<T> cache = make_kv_cache<T>(cfg.n_layers, cfg.d_model, scope.kv_cache_fp8 ? KvDtype::kFp8E4M3 : KvDtype::kFull);
  if (scope.kv_cache_fp8) {
    if (!opt.kv_scales) throw ProtocolError("evaluate: fp8 KV forward needs frozen scales");
    install_scales(cache, *opt.kv_scales);
  }
  SequenceEval<T> out;
  Tape<T> tape;
  ForwardHooks<T> hooks;
  hooks.replay = seq.replay;
  hooks.routing_out = cfg.moe ? &out.routing : nullptr;
  hooks.freeze = opt.freeze;
  hooks.tape = want_grad ? &tape : nullptr;
  Matrix<T> logits = forward_rows(weights, seq.tokens, 0, rows, scope, cache, hooks);

  const std::size_t V = cfg.vocab_size;
  Matrix<T> lp(n_targets, V);
  for (std::size_t t = 0; t < n_targets; ++t) {
    log_softmax_row<T>(logits.row(seq.first_target - 1 + t), lp.row(t));
    out.logp.push_back(lp(t, static_cast<std::size_t>(seq.tokens[seq.first_target + t])));
  }
  if (want_grad) {
    std::vector<T> c(seq.loss_weights.begin(), seq.loss_weights.end());
    if (c.empty()) opt.loss_weights_fn(out.logp, c);
    if (c.size() != n_targets) throw ShapeError("evaluate: one loss weight per target required");
    if (!all_finite<T>(c)) throw NumericError("evaluate: non-finite loss weights");
    if (std::any_of(c.begin(), c.end(), [](T x) { return x != T(0); })) {
      Matrix<T> dlogits(rows, V);
      for (std::size_t t = 0; t < n_targets; ++t) {
        if (c[t] == T(0)) continue;
        const std::size_t row = seq.first_target - 1 + t;
        for (std::size_t v = 0; v < V; ++v) dlogits(row, v) = -c[t] * std::exp(lp(t, v));
        dlogits(row, static_cast<std::size_t>(seq.tokens[seq.first_target + t])) += c[t];
      }
      backward_rows(weights, seq.tokens.first(rows), tape, dlogits, *grad);
    }
  }
  if (opt.full_distribution) out.full_logp = std::move(lp);
  return out;
}

// Batch form over master weights: quantizes in-scope linears once (fake
// quant, straight-through), evaluates every sequence and returns the summed
// gradient with respect to the master weights.
template <typename T>
std::vector<SequenceEval<T>> logprobs_and_grad(const PolicyWeights<T>& master, std::span<const TrainerSequence<T>> batch,
                                               const QuantizationScope& scope, std::type_identity_t<PolicyWeights<T>>* grad,
                                               const EvalOptions<T>& opt = {}) {
  scope.validate();
  const PolicyWeights<T> eff = effective_weights(master, scope);
  if (grad) *grad = zeros_like(master);
  std::vector<SequenceEval<T>> out;
  out.reserve(batch.size());
  for (const auto& s : batch) out.push_back(evaluate_sequence(eff, s, scope, opt, grad));
  return out;
}

// ---------------------------------------------------------------------------
// QKV scale calibration

// Trainer-side protocol: forwards over the calibration sequences with the
// linear setting of `scope` and full-precision K/V, returning per-layer
// amax/448 scales tagged with `version`.
template <typename T>
KvScales recalibrate_trainer_side(const PolicyWeights<T>& weights, std::span<const std::vector<Token>> calib,
                                  const QuantizationScope& scope, std::int64_t version, QkvAmax<T>* amax_out = nullptr) {
  if (calib.empty()) throw ConfigError("recalibrate_trainer_side: empty calibration set");
  const ModelConfig& cfg = weights.config;
  QuantizationScope fwd;
  fwd.linear_fp8 = scope.linear_fp8;
  fwd.quantize_router = scope.quantize_router;
  fwd.weight_block = scope.weight_block;
  fwd.act_tile = scope.act_tile;
  const PolicyWeights<T> eff = effective_weights(weights, fwd);
  QkvAmax<T> amax(cfg.n_layers);
  ForwardHooks<T> hooks;
  hooks.amax = &amax;
  for (const auto& seq : calib) {
    if (seq.empty()) throw ShapeError("recalibrate_trainer_side: empty calibration sequence");
    auto cache = make_kv_cache<T>(cfg.n_layers, cfg.d_model, KvDtype::kFull);
    forward_rows(eff, seq, 0, std::min(seq.size(), cfg.max_seq), fwd, cache, hooks);
  }
  if (amax_out) *amax_out = amax;
  return scales_from_amax(amax, version);
}

// Inference-side protocol: the first forward after the flag is raised (the
// prefill of the step's prompts) measures Q/K/V amax with K/V kept at full
// precision, then installs scales on every flagged layer. `weights` are the
// engine's effective weights.
template <typename T>
void calibrate_on_first_forward(const PolicyWeights<T>& weights, std::span<const std::vector<Token>> prompts,
                                const QuantizationScope& scope, KvCacheState<T>& cache, std::int64_t version,
                                QkvAmax<T>* amax_out = nullptr) {
  if (prompts.empty()) throw ConfigError("calibrate_on_first_forward: no prompts");
  const ModelConfig& cfg = weights.config;
  QuantizationScope fwd = scope;
  fwd.kv_cache_fp8 = fwd.attention_fp8 = false;
  QkvAmax<T> amax(cfg.n_layers);
  ForwardHooks<T> hooks;
  hooks.amax = &amax;
  for (const auto& prompt : prompts) {
    auto scratch = make_kv_cache<T>(cfg.n_layers, cfg.d_model, KvDtype::kFull);
    forward_rows(weights, prompt, 0, prompt.size(), fwd, scratch, hooks);
  }
  apply_calibration(cache, amax, version);
  if (amax_out) *amax_out = amax;
}

template <typename T>
void calibrate_on_first_forward(const PolicyWeights<T>& weights, std::span<const Token> prompt,
                                const QuantizationScope& scope, KvCacheState<T>& cache, std::int64_t version,
                                QkvAmax<T>* amax_out = nullptr) {
  const std::vector<std::vector<Token>> one{std::vector<Token>(prompt.begin(), prompt.end())};
  calibrate_on_first_forward(weights, std::span<const std::vector<Token>>(one), scope, cache, version, amax_out);
}

}  // namespace fp8rl
