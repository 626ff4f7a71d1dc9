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

// FP8 KV-cache storage with per-layer scalar Q/K/V scales, the two scale
// recalibration protocols, and attention over the cache.
//
// Calibration measures amax over a calibration forward whose K/V are kept at
// full precision; the protocols differ only in where that forward runs
// (inference side: the first prefill of the step on the rollout engine;
// trainer side: the updated weights over a subset of recent data). Either
// way scales are amax / 448 and stay frozen until the next recalibration.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "fp8rl/blockquant.hpp"
#include "fp8rl/error.hpp"
#include "fp8rl/fp8num.hpp"
#include "fp8rl/tensor.hpp"

namespace fp8rl {

enum class KvDtype { kFull, kFp8E4M3 };

template <typename T>
struct KvLayerCache {
  Matrix<T> k, v;  // values attention reads: verbatim (full) or dequantized (fp8)
  Matrix<Fp8Code> k_codes, v_codes;
  T q_scale = T(1), k_scale = T(1), v_scale = T(1);
  bool calibrated = false;
  bool needs_recalibration = false;
};

// Per-layer amax of Q, K and V observed during a calibration forward.
template <typename T>
struct QkvAmax {
  std::vector<T> q, k, v;

  QkvAmax() = default;
  explicit QkvAmax(std::size_t n_layers) : q(n_layers, T(0)), k(n_layers, T(0)), v(n_layers, T(0)) {}

  static void observe(T& slot, const Matrix<T>& m) {
    for (T x : m.flat()) slot = std::max(slot, std::fabs(x));
  }
  void merge(const QkvAmax& o) {
    for (std::size_t l = 0; l < q.size(); ++l) {
      q[l] = std::max(q[l], o.q[l]);
      k[l] = std::max(k[l], o.k[l]);
      v[l] = std::max(v[l], o.v[l]);
    }
  }
};

// Scales as exchanged between trainer and rollout engine. version is the
// weights version the scales were computed from.
struct KvScales {
  std::vector<float> q, k, v;
  std::int64_t version = -1;

  std::size_t n_layers() const { return k.size(); }
  friend bool operator==(const KvScales&, const KvScales&) = default;
};

template <typename T>
KvScales scales_from_amax(const QkvAmax<T>& amax, std::int64_t version) {
  KvScales s;
  s.version = version;
  auto conv = [](T a) { return static_cast<float>(detail::scale_from_amax(a)); };
  for (std::size_t l = 0; l < amax.k.size(); ++l) {
    s.q.push_back(conv(amax.q[l]));
    s.k.push_back(conv(amax.k[l]));
    s.v.push_back(conv(amax.v[l]));
  }
  return s;
}

template <typename T>
struct KvCacheState {
  KvDtype dtype = KvDtype::kFull;
  std::size_t width = 0;  // d_model
  std::vector<KvLayerCache<T>> layers;
  std::int64_t scale_version = -1;
  std::size_t saturations = 0;

  std::size_t n_layers() const { return layers.size(); }
  std::size_t seq_len() const { return layers.empty() ? 0 : layers.front().k.rows(); }
  bool fp8() const { return dtype == KvDtype::kFp8E4M3; }
  bool any_needs_recalibration() const {
    return std::any_of(layers.begin(), layers.end(), [](const auto& l) { return l.needs_recalibration; });
  }

  std::size_t stored_elements() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.k.size() + l.v.size();
    return n;
  }
  // Storage footprint with full-precision entries counted at 16 bits, the
  // precision the full arm stands in for.
  std::size_t footprint_bytes() const { return stored_elements() * (fp8() ? 1 : 2); }
  std::size_t bf16_equivalent_bytes() const { return stored_elements() * 2; }

  // Keeps the scale state, drops all stored tokens.
  KvCacheState empty_copy() const {
    KvCacheState c;
    c.dtype = dtype;
    c.width = width;
    c.scale_version = scale_version;
    c.layers.resize(layers.size());
    for (std::size_t l = 0; l < layers.size(); ++l) {
      auto& d = c.layers[l];
      const auto& s = layers[l];
      d.k = d.v = Matrix<T>(0, width);
      d.k_codes = d.v_codes = Matrix<Fp8Code>(0, width);
      d.q_scale = s.q_scale;
      d.k_scale = s.k_scale;
      d.v_scale = s.v_scale;
      d.calibrated = s.calibrated;
      d.needs_recalibration = s.needs_recalibration;
    }
    return c;
  }

  KvScales scales() const {
    KvScales s;
    s.version = scale_version;
    for (const auto& l : layers) {
      s.q.push_back(static_cast<float>(l.q_scale));
      s.k.push_back(static_cast<float>(l.k_scale));
      s.v.push_back(static_cast<float>(l.v_scale));
    }
    return s;
  }
};

template <typename T>
KvCacheState<T> make_kv_cache(std::size_t n_layers, std::size_t width, KvDtype dtype) {
  KvCacheState<T> c;
  c.dtype = dtype;
  c.width = width;
  c.layers.resize(n_layers);
  for (auto& l : c.layers) {
    l.k = l.v = Matrix<T>(0, width);
    l.k_codes = l.v_codes = Matrix<Fp8Code>(0, width);
  }
  return c;
}

// Raises the recalibration flag on every layer. Appending to an fp8 layer
// whose flag is raised is a protocol error until calibration is applied.
template <typename T>
void recalibrate_inference_side(KvCacheState<T>& cache) {
  for (auto& l : cache.layers) l.needs_recalibration = true;
}

// Installs amax-derived scales on every flagged layer and clears the flags.
template <typename T>
void apply_calibration(KvCacheState<T>& cache, const QkvAmax<T>& amax, std::int64_t version) {
  if (amax.k.size() != cache.n_layers()) throw ShapeError("apply_calibration: layer count mismatch");
  for (std::size_t l = 0; l < cache.n_layers(); ++l) {
    auto& L = cache.layers[l];
    if (!L.needs_recalibration) continue;
    L.q_scale = detail::scale_from_amax(amax.q[l]);
    L.k_scale = detail::scale_from_amax(amax.k[l]);
    L.v_scale = detail::scale_from_amax(amax.v[l]);
    L.calibrated = true;
    L.needs_recalibration = false;
  }
  cache.scale_version = version;
}

// Trainer-side path: scales computed elsewhere are installed verbatim.
template <typename T>
void install_scales(KvCacheState<T>& cache, const KvScales& s) {
  if (s.n_layers() != cache.n_layers()) throw ShapeError("install_scales: layer count mismatch");
  for (std::size_t l = 0; l < cache.n_layers(); ++l) {
    auto& L = cache.layers[l];
    if (!(s.q[l] > 0 && s.k[l] > 0 && s.v[l] > 0) || !std::isfinite(s.q[l]) || !std::isfinite(s.k[l]) ||
        !std::isfinite(s.v[l]))
      throw NumericError("install_scales: scales must be positive and finite");
    L.q_scale = static_cast<T>(s.q[l]);
    L.k_scale = static_cast<T>(s.k[l]);
    L.v_scale = static_cast<T>(s.v[l]);
    L.calibrated = true;
    L.needs_recalibration = false;
  }
  cache.scale_version = s.version;
}

namespace detail {

// Saturating fp8 encode of x / scale; returns whether x lay beyond the
// calibrated range. The calibrated amax itself can exceed 448 * scale by the
// rounding of the scale, which is not counted.
template <typename T>
bool encode_saturating(T x, T scale, Fp8Code& out) {
  constexpr float kFloatSlack = 1.0f + 8.0f * std::numeric_limits<float>::epsilon();
  const T r = x / scale;
  out = e4m3::encode(r, e4m3::Overflow::kSaturate);
  return std::fabs(r) > static_cast<T>(e4m3::kMaxFinite) * static_cast<T>(kFloatSlack);
}

}  // namespace detail

// Appends rows of K and V (one row per position) to a layer.
template <typename T>
void cache_append(KvCacheState<T>& cache, std::size_t layer, const Matrix<T>& k_new, const Matrix<T>& v_new) {
  if (layer >= cache.n_layers()) throw ShapeError("cache_append: layer index out of range");
  if (k_new.rows() != v_new.rows() || k_new.cols() != cache.width || v_new.cols() != cache.width)
    throw ShapeError("cache_append: K/V shape mismatch");
  auto& L = cache.layers[layer];
  if (!cache.fp8()) {
    for (std::size_t i = 0; i < k_new.rows(); ++i) {
      L.k.push_row(k_new.row(i));
      L.v.push_row(v_new.row(i));
    }
    return;
  }
  if (L.needs_recalibration || !L.calibrated)
    throw ProtocolError("cache_append: fp8 layer " + std::to_string(layer) + " has no frozen scales");
  std::vector<Fp8Code> codes(cache.width);
  std::vector<T> deq(cache.width);
  auto put = [&](const Matrix<T>& src, std::size_t i, T scale, Matrix<Fp8Code>& dst_codes, Matrix<T>& dst) {
    for (std::size_t j = 0; j < cache.width; ++j) {
      cache.saturations += detail::encode_saturating(src(i, j), scale, codes[j]);
      deq[j] = static_cast<T>(e4m3::decode(codes[j])) * scale;
    }
    dst_codes.push_row(codes);
    dst.push_row(deq);
  };
  for (std::size_t i = 0; i < k_new.rows(); ++i) {
    put(k_new, i, L.k_scale, L.k_codes, L.k);
    put(v_new, i, L.v_scale, L.v_codes, L.v);
  }
}

// Causal multi-head attention of query rows against the cache. Query row i
// sits at absolute position first_pos + i and attends to keys [0, pos].
// With attention_fp8 the query is quantize-dequantized with the layer's
// q_scale; K and V are whatever the cache holds. Softmax and both products
// run in the working precision. When probs is non-null it receives, per
// head, a (rows x seq_len) matrix of attention weights (zero beyond pos).
template <typename T>
Matrix<T> attention_forward(const Matrix<T>& q, std::size_t first_pos, const KvCacheState<T>& cache,
                            std::size_t layer, std::size_t n_heads, bool attention_fp8,
                            std::vector<Matrix<T>>* probs = nullptr) {
  if (layer >= cache.n_layers()) throw ShapeError("attention: layer index out of range");
  const auto& L = cache.layers[layer];
  if (q.cols() != cache.width || cache.width % n_heads != 0) throw ShapeError("attention: width mismatch");
  if (first_pos + q.rows() > L.k.rows()) throw ShapeError("attention: cache shorter than query positions");
  if (attention_fp8 && (!L.calibrated || L.needs_recalibration))
    throw ProtocolError("attention: fp8 attention requires calibrated scales");
  const std::size_t dh = cache.width / n_heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
  Matrix<T> out(q.rows(), cache.width);
  if (probs) probs->assign(n_heads, Matrix<T>(q.rows(), L.k.rows()));
  std::vector<T> qrow(cache.width), scores;
  for (std::size_t i = 0; i < q.rows(); ++i) {
    const std::size_t n_keys = first_pos + i + 1;
    std::copy(q.row(i).begin(), q.row(i).end(), qrow.begin());
    if (attention_fp8) {
      Fp8Code c;
      for (auto& x : qrow) {
        detail::encode_saturating(x, L.q_scale, c);
        x = static_cast<T>(e4m3::decode(c)) * L.q_scale;
      }
    }
    scores.resize(n_keys);
    for (std::size_t h = 0; h < n_heads; ++h) {
      const std::size_t off = h * dh;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < n_keys; ++j) {
        const T* kr = L.k.data() + j * cache.width + off;
        T s = 0;
        for (std::size_t c = 0; c < dh; ++c) s += qrow[off + c] * kr[c];
        scores[j] = s * inv_sqrt;
        mx = std::max(mx, scores[j]);
      }
      T sum = 0;
      for (std::size_t j = 0; j < n_keys; ++j) {
        scores[j] = std::exp(scores[j] - mx);
        sum += scores[j];
      }
      T* orow = out.data() + i * cache.width + off;
      for (std::size_t j = 0; j < n_keys; ++j) {
        const T p = scores[j] / sum;
        if (probs) (*probs)[h](i, j) = p;
        const T* vr = L.v.data() + j * cache.width + off;
        for (std::size_t c = 0; c < dh; ++c) orow[c] += p * vr[c];
      }
    }
  }
  return out;
}

}  // namespace fp8rl
