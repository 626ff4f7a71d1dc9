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

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <string>
#include <type_traits>
#include <vector>

#include "fp8rl/blockquant.hpp"
#include "fp8rl/error.hpp"
#include "fp8rl/model_config.hpp"
#include "fp8rl/tensor.hpp"

namespace fp8rl {

// Role of a tensor with respect to FP8 scope. kLinear tensors are the W8A8
// candidates (q/k/v/o, gate/up/down, expert fc1/fc2); everything else stays in
// working precision, except kRouter under QuantizationScope::quantize_router.
enum class TensorKind { kEmbedding, kNorm, kLinear, kRouter, kLmHead };

// Linear weights are stored input-major (in x out) so y = x * W.
template <typename T>
struct LayerWeights {
  Matrix<T> attn_norm;  // 1 x d
  Matrix<T> q_proj, k_proj, v_proj, o_proj;
  Matrix<T> mlp_norm;  // 1 x d
  Matrix<T> gate_proj, up_proj, down_proj;  // dense only
  Matrix<T> router;                         // moe only, d x n_experts
  std::vector<Matrix<T>> fc1, fc2;          // moe only, per expert
};

template <typename T>
struct PolicyWeights {
  using value_type = T;

  ModelConfig config;
  Matrix<T> embedding;      // vocab x d
  Matrix<T> pos_embedding;  // max_seq x d
  std::vector<LayerWeights<T>> layers;
  Matrix<T> final_norm;  // 1 x d
  Matrix<T> lm_head;     // d x vocab
  std::int64_t version = 0;
};

template <typename M>
struct TensorRef {
  std::string name;
  TensorKind kind;
  M* tensor;
};

// Every tensor in a fixed order. The checkpoint format, the optimizer and the
// gradient checks all walk this list.
template <typename W>
auto tensor_list(W& w) {
  using T = typename std::remove_const_t<W>::value_type;
  using M = std::conditional_t<std::is_const_v<W>, const Matrix<T>, Matrix<T>>;
  std::vector<TensorRef<M>> out;
  out.push_back({"embedding", TensorKind::kEmbedding, &w.embedding});
  out.push_back({"pos_embedding", TensorKind::kEmbedding, &w.pos_embedding});
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    auto& L = w.layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    out.push_back({p + "attn_norm", TensorKind::kNorm, &L.attn_norm});
    out.push_back({p + "q_proj", TensorKind::kLinear, &L.q_proj});
    out.push_back({p + "k_proj", TensorKind::kLinear, &L.k_proj});
    out.push_back({p + "v_proj", TensorKind::kLinear, &L.v_proj});
    out.push_back({p + "o_proj", TensorKind::kLinear, &L.o_proj});
    out.push_back({p + "mlp_norm", TensorKind::kNorm, &L.mlp_norm});
    if (w.config.is_moe()) {
      out.push_back({p + "router", TensorKind::kRouter, &L.router});
      for (std::size_t e = 0; e < L.fc1.size(); ++e) {
        out.push_back({p + "experts." + std::to_string(e) + ".fc1", TensorKind::kLinear, &L.fc1[e]});
        out.push_back({p + "experts." + std::to_string(e) + ".fc2", TensorKind::kLinear, &L.fc2[e]});
      }
    } else {
      out.push_back({p + "gate_proj", TensorKind::kLinear, &L.gate_proj});
      out.push_back({p + "up_proj", TensorKind::kLinear, &L.up_proj});
      out.push_back({p + "down_proj", TensorKind::kLinear, &L.down_proj});
    }
  }
  out.push_back({"final_norm", TensorKind::kNorm, &w.final_norm});
  out.push_back({"lm_head", TensorKind::kLmHead, &w.lm_head});
  return out;
}

inline bool in_linear_scope(TensorKind kind, const QuantizationScope& scope) {
  if (!scope.linear_fp8) return false;
  return kind == TensorKind::kLinear || (kind == TensorKind::kRouter && scope.quantize_router);
}

// Zero-filled weights with the shapes implied by the config.
template <typename T>
PolicyWeights<T> zeros_like_config(const ModelConfig& cfg) {
  cfg.validate();
  PolicyWeights<T> w;
  w.config = cfg;
  const std::size_t d = cfg.d_model, f = cfg.d_ff;
  w.embedding = Matrix<T>(cfg.vocab_size, d);
  w.pos_embedding = Matrix<T>(cfg.max_seq, d);
  w.layers.resize(cfg.n_layers);
  for (auto& L : w.layers) {
    L.attn_norm = Matrix<T>(1, d);
    L.q_proj = L.k_proj = L.v_proj = L.o_proj = Matrix<T>(d, d);
    L.mlp_norm = Matrix<T>(1, d);
    if (cfg.moe) {
      L.router = Matrix<T>(d, cfg.moe->n_experts);
      L.fc1.assign(cfg.moe->n_experts, Matrix<T>(d, f));
      L.fc2.assign(cfg.moe->n_experts, Matrix<T>(f, d));
    } else {
      L.gate_proj = L.up_proj = Matrix<T>(d, f);
      L.down_proj = Matrix<T>(f, d);
    }
  }
  w.final_norm = Matrix<T>(1, d);
  w.lm_head = Matrix<T>(d, cfg.vocab_size);
  return w;
}

template <typename T>
PolicyWeights<T> zeros_like(const PolicyWeights<T>& ref) {
  auto w = zeros_like_config<T>(ref.config);
  w.version = ref.version;
  return w;
}

// Gaussian init scaled by fan-in; residual-branch outputs (o_proj, down_proj,
// fc2) are further shrunk by sqrt(2 * n_layers). Norm gains start at 1.
template <typename T>
PolicyWeights<T> init_weights(const ModelConfig& cfg, std::uint64_t seed) {
  auto w = zeros_like_config<T>(cfg);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double residual = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
  for (auto& ref : tensor_list(w)) {
    Matrix<T>& m = *ref.tensor;
    double stddev = 1.0 / std::sqrt(static_cast<double>(m.rows()));
    switch (ref.kind) {
      case TensorKind::kNorm:
        m.fill(T(1));
        continue;
      case TensorKind::kEmbedding:
        stddev = 0.5;
        break;
      case TensorKind::kLinear:
        if (ref.name.ends_with("o_proj") || ref.name.ends_with("down_proj") || ref.name.ends_with("fc2"))
          stddev *= residual;
        break;
      case TensorKind::kRouter:
      case TensorKind::kLmHead:
        break;
    }
    for (auto& v : m.flat()) v = static_cast<T>(stddev * normal(rng));
  }
  return w;
}

template <typename U, typename T>
PolicyWeights<U> cast_weights(const PolicyWeights<T>& w) {
  auto out = zeros_like_config<U>(w.config);
  out.version = w.version;
  auto src = tensor_list(w);
  auto dst = tensor_list(out);
  for (std::size_t i = 0; i < src.size(); ++i) *dst[i].tensor = src[i].tensor->template cast<U>();
  return out;
}

template <typename T>
bool weights_finite(const PolicyWeights<T>& w) {
  for (const auto& ref : tensor_list(w))
    if (!all_finite(*ref.tensor)) return false;
  return true;
}

template <typename T>
bool bitwise_equal(const PolicyWeights<T>& a, const PolicyWeights<T>& b) {
  if (!(a.config == b.config)) return false;
  auto x = tensor_list(a);
  auto y = tensor_list(b);
  for (std::size_t i = 0; i < x.size(); ++i)
    if (!(*x[i].tensor == *y[i].tensor)) return false;
  return true;
}

// Weights as the forward pass sees them under `scope`: in-scope linears are
// replaced by dequantize(quantize_blockwise(W)), everything else is copied.
// Gradients taken with respect to these weights are applied to the master
// weights unchanged (straight-through).
template <typename T>
PolicyWeights<T> effective_weights(const PolicyWeights<T>& w, const QuantizationScope& scope) {
  PolicyWeights<T> out = w;
  if (!scope.linear_fp8) return out;
  for (auto& ref : tensor_list(out))
    if (in_linear_scope(ref.kind, scope))
      *ref.tensor = fake_quant_weight(*ref.tensor, scope.linear_spec());
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint container (all integers and floats little-endian):
//
//   char[8]  magic "FP8RLCK1"
//   u32      n_layers, d_model, n_heads, d_ff, vocab_size, max_seq
//   u32      n_experts (0 for dense), top_k (0 for dense)
//   i64      weights version
//   u32      tensor count
//   per tensor, in tensor_list() order:
//     u32 name length, name bytes (no terminator)
//     u32 rows, u32 cols
//     rows*cols binary32 values, row-major
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
  put_u32(os, static_cast<std::uint32_t>(v));
  put_u32(os, static_cast<std::uint32_t>(v >> 32));
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw IoError("checkpoint: truncated file");
  return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
         static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
}

inline std::uint64_t get_u64(std::istream& is) {
  const std::uint64_t lo = get_u32(is);
  const std::uint64_t hi = get_u32(is);
  return lo | hi << 32;
}

inline constexpr char kCheckpointMagic[8] = {'F', 'P', '8', 'R', 'L', 'C', 'K', '1'};

}  // namespace detail

inline void save_checkpoint(const std::string& path, const PolicyWeights<float>& w) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("checkpoint: cannot open " + path + " for writing");
  os.write(detail::kCheckpointMagic, 8);
  const auto& c = w.config;
  for (std::size_t v : {c.n_layers, c.d_model, c.n_heads, c.d_ff, c.vocab_size, c.max_seq})
    detail::put_u32(os, static_cast<std::uint32_t>(v));
  detail::put_u32(os, c.moe ? static_cast<std::uint32_t>(c.moe->n_experts) : 0);
  detail::put_u32(os, c.moe ? static_cast<std::uint32_t>(c.moe->top_k) : 0);
  detail::put_u64(os, static_cast<std::uint64_t>(w.version));
  const auto tensors = tensor_list(w);
  detail::put_u32(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& ref : tensors) {
    detail::put_u32(os, static_cast<std::uint32_t>(ref.name.size()));
    os.write(ref.name.data(), static_cast<std::streamsize>(ref.name.size()));
    detail::put_u32(os, static_cast<std::uint32_t>(ref.tensor->rows()));
    detail::put_u32(os, static_cast<std::uint32_t>(ref.tensor->cols()));
    for (float v : ref.tensor->flat()) detail::put_u32(os, std::bit_cast<std::uint32_t>(v));
  }
  if (!os) throw IoError("checkpoint: write failed for " + path);
}

inline PolicyWeights<float> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open " + path);
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, detail::kCheckpointMagic, 8) != 0)
    throw IoError("checkpoint: bad magic in " + path);
  ModelConfig c;
  c.n_layers = detail::get_u32(is);
  c.d_model = detail::get_u32(is);
  c.n_heads = detail::get_u32(is);
  c.d_ff = detail::get_u32(is);
  c.vocab_size = detail::get_u32(is);
  c.max_seq = detail::get_u32(is);
  const std::uint32_t n_experts = detail::get_u32(is);
  const std::uint32_t top_k = detail::get_u32(is);
  if (n_experts > 0) c.moe = MoeConfig{n_experts, top_k};
  auto w = zeros_like_config<float>(c);
  w.version = static_cast<std::int64_t>(detail::get_u64(is));
  auto tensors = tensor_list(w);
  if (detail::get_u32(is) != tensors.size()) throw IoError("checkpoint: tensor count mismatch");
  for (auto& ref : tensors) {
    const std::uint32_t len = detail::get_u32(is);
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw IoError("checkpoint: truncated name");
    if (name != ref.name) throw IoError("checkpoint: expected tensor " + ref.name + ", found " + name);
    const std::uint32_t rows = detail::get_u32(is), cols = detail::get_u32(is);
    if (rows != ref.tensor->rows() || cols != ref.tensor->cols())
      throw IoError("checkpoint: shape mismatch for " + name);
    for (float& v : ref.tensor->flat()) v = std::bit_cast<float>(detail::get_u32(is));
  }
  if (!weights_finite(w)) throw NumericError("checkpoint: non-finite weights in " + path);
  return w;
}

}  // namespace fp8rl
