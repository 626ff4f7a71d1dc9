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

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fp8rl/blockquant.hpp"
#include "fp8rl/error.hpp"

namespace fp8rl {

struct MoeConfig {
  std::size_t n_experts = 4;
  std::size_t top_k = 1;

  friend bool operator==(const MoeConfig&, const MoeConfig&) = default;
};

struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_ff = 128;
  std::size_t vocab_size = 24;
  std::size_t max_seq = 64;
  std::optional<MoeConfig> moe;

  std::size_t head_dim() const { return d_model / n_heads; }
  bool is_moe() const { return moe.has_value(); }

  void validate() const {
    if (n_layers == 0 || d_model == 0 || n_heads == 0 || d_ff == 0 || vocab_size == 0 || max_seq == 0)
      throw ConfigError("model: all dimensions must be positive");
    if (d_model % n_heads != 0) throw ConfigError("model: d_model must be divisible by n_heads");
    if (moe) {
      if (moe->n_experts == 0 || moe->top_k == 0) throw ConfigError("model.moe: sizes must be positive");
      if (moe->top_k > moe->n_experts) throw ConfigError("model.moe: top_k exceeds n_experts");
    }
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Which parts of the network run in FP8. Embeddings, norms and lm_head are
// never quantized; the MoE router only when quantize_router is set.
struct QuantizationScope {
  bool linear_fp8 = false;
  bool kv_cache_fp8 = false;
  bool attention_fp8 = false;
  bool quantize_router = false;
  BlockShape weight_block{128, 128};
  std::size_t act_tile = 0;  // 0: one tile per row

  static QuantizationScope full_precision() { return {}; }
  static QuantizationScope linear() {
    QuantizationScope s;
    s.linear_fp8 = true;
    return s;
  }
  static QuantizationScope kv_only() {
    QuantizationScope s;
    s.kv_cache_fp8 = true;
    return s;
  }
  static QuantizationScope full_fp8() {
    QuantizationScope s;
    s.linear_fp8 = s.kv_cache_fp8 = s.attention_fp8 = true;
    return s;
  }

  bool any() const { return linear_fp8 || kv_cache_fp8 || attention_fp8; }

  QuantSpec linear_spec() const { return {linear_fp8, weight_block, act_tile}; }

  void validate() const {
    if (attention_fp8 && !kv_cache_fp8)
      throw ConfigError("scope: attention_fp8 requires kv_cache_fp8");
    if (weight_block.rows == 0 || weight_block.cols == 0)
      throw ConfigError("scope: weight block shape must be positive");
  }

  friend bool operator==(const QuantizationScope&, const QuantizationScope&) = default;
};

// Expert choices per (layer, position). Slots are stored rank-ordered, so
// replaying a record reproduces both the set and the accumulation order.
struct RoutingRecord {
  std::size_t top_k = 0;
  std::vector<std::vector<std::int32_t>> experts;  // [layer][pos * top_k + slot]
  std::vector<std::vector<float>> weights;         // [layer][pos * top_k + slot]

  RoutingRecord() = default;
  RoutingRecord(std::size_t n_layers, std::size_t k) : top_k(k), experts(n_layers), weights(n_layers) {}

  bool empty() const { return experts.empty(); }
  std::size_t n_layers() const { return experts.size(); }
  std::size_t positions() const {
    return experts.empty() || top_k == 0 ? 0 : experts.front().size() / top_k;
  }
  std::int32_t expert(std::size_t layer, std::size_t pos, std::size_t slot) const {
    return experts[layer][pos * top_k + slot];
  }

  // Keeps the first n positions.
  void truncate(std::size_t n) {
    for (auto& e : experts) e.resize(std::min(e.size(), n * top_k));
    for (auto& w : weights) w.resize(std::min(w.size(), n * top_k));
  }
};

// Fraction of (layer, position) entries whose selected expert sets differ.
inline double routing_disagreement(const RoutingRecord& a, const RoutingRecord& b) {
  if (a.n_layers() != b.n_layers() || a.top_k != b.top_k || a.positions() != b.positions())
    throw ShapeError("routing_disagreement: records cover different shapes");
  std::size_t total = 0, differ = 0;
  for (std::size_t l = 0; l < a.n_layers(); ++l)
    for (std::size_t p = 0; p < a.positions(); ++p) {
      ++total;
      std::vector<std::int32_t> x(a.experts[l].begin() + p * a.top_k, a.experts[l].begin() + (p + 1) * a.top_k);
      std::vector<std::int32_t> y(b.experts[l].begin() + p * b.top_k, b.experts[l].begin() + (p + 1) * b.top_k);
      std::sort(x.begin(), x.end());
      std::sort(y.begin(), y.end());
      differ += x != y;
    }
  return total == 0 ? 0.0 : static_cast<double>(differ) / static_cast<double>(total);
}

}  // namespace fp8rl
