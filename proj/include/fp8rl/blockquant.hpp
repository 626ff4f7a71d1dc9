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

// Blockwise weight quantization, per-tile dynamic activation quantization
// and the emulated W8A8 GEMM. A block (or tile) scale is amax / 448 so the
// largest-magnitude element lands on the format maximum; an all-zero block
// uses scale 1.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>

#include "fp8rl/error.hpp"
#include "fp8rl/fp8num.hpp"
#include "fp8rl/tensor.hpp"

namespace fp8rl {

struct BlockShape {
  std::size_t rows = 128;
  std::size_t cols = 128;

  friend bool operator==(const BlockShape&, const BlockShape&) = default;
};

// Quantized weight matrix: E4M3 codes plus one scale per (rows x cols) block.
// Blocks at the right and bottom edges are clipped to the tensor.
template <typename T = float>
struct BlockQuantTensor {
  Matrix<Fp8Code> codes;
  Matrix<T> scales;
  BlockShape block;

  std::size_t rows() const noexcept { return codes.rows(); }
  std::size_t cols() const noexcept { return codes.cols(); }
  T scale_at(std::size_t i, std::size_t j) const noexcept {
    return scales(i / block.rows, j / block.cols);
  }
  T dequantized(std::size_t i, std::size_t j) const noexcept {
    return static_cast<T>(e4m3::decode(codes(i, j))) * scale_at(i, j);
  }
  // One byte per code; scales are accounted separately.
  std::size_t code_bytes() const noexcept { return codes.size(); }
  std::size_t scale_bytes() const noexcept { return scales.size() * sizeof(float); }
};

// Dynamically quantized activations: one scale per 1 x tile_len row tile.
template <typename T = float>
struct TileQuantActivation {
  Matrix<Fp8Code> codes;
  Matrix<T> scales;  // rows x n_tiles
  std::size_t tile_len = 0;

  std::size_t rows() const noexcept { return codes.rows(); }
  std::size_t cols() const noexcept { return codes.cols(); }
  T dequantized(std::size_t i, std::size_t j) const noexcept {
    return static_cast<T>(e4m3::decode(codes(i, j))) * scales(i, j / tile_len);
  }
};

namespace detail {

inline std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

template <typename T>
T scale_from_amax(T amax) {
  return amax > T(0) ? amax / static_cast<T>(e4m3::kMaxFinite) : T(1);
}

// x / scale is at most 448 up to the rounding of the scale itself; anything
// beyond that slack means the scale was computed from the wrong data.
template <typename T>
Fp8Code quantize_scaled(T x, T scale) {
  const T r = x / scale;
  constexpr T kSlack = T(1) + T(8) * std::numeric_limits<T>::epsilon();
  if (std::fabs(r) > static_cast<T>(e4m3::kMaxFinite) * kSlack) {
    throw OverflowError("quantize: scaled value " + std::to_string(static_cast<double>(r)) +
                        " outside the block range");
  }
  return e4m3::encode(r, e4m3::Overflow::kSaturate);
}

template <typename T>
void require_finite(const Matrix<T>& m, const char* what) {
  if (!all_finite(m)) throw NumericError(std::string(what) + ": non-finite input");
}

}  // namespace detail

template <typename T>
Matrix<T> compute_block_scales(const Matrix<T>& w, BlockShape block) {
  if (block.rows == 0 || block.cols == 0) throw ConfigError("block shape must be positive");
  detail::require_finite(w, "compute_block_scales");
  const std::size_t br = detail::ceil_div(w.rows(), block.rows);
  const std::size_t bc = detail::ceil_div(w.cols(), block.cols);
  Matrix<T> amax(br, bc, T(0));
  for (std::size_t i = 0; i < w.rows(); ++i)
    for (std::size_t j = 0; j < w.cols(); ++j) {
      T& m = amax(i / block.rows, j / block.cols);
      m = std::max(m, std::fabs(w(i, j)));
    }
  for (auto& s : amax.flat()) s = detail::scale_from_amax(s);
  return amax;
}

template <typename T>
BlockQuantTensor<T> quantize_blockwise(const Matrix<T>& w, BlockShape block) {
  BlockQuantTensor<T> q;
  q.block = block;
  q.scales = compute_block_scales(w, block);
  q.codes = Matrix<Fp8Code>(w.rows(), w.cols());
  for (std::size_t i = 0; i < w.rows(); ++i)
    for (std::size_t j = 0; j < w.cols(); ++j)
      q.codes(i, j) = detail::quantize_scaled(w(i, j), q.scale_at(i, j));
  return q;
}

template <typename T>
Matrix<T> dequantize(const BlockQuantTensor<T>& q) {
  Matrix<T> out(q.rows(), q.cols());
  for (std::size_t i = 0; i < q.rows(); ++i)
    for (std::size_t j = 0; j < q.cols(); ++j) out(i, j) = q.dequantized(i, j);
  return out;
}

template <typename T>
Matrix<T> dequantize(const TileQuantActivation<T>& q) {
  Matrix<T> out(q.rows(), q.cols());
  for (std::size_t i = 0; i < q.rows(); ++i)
    for (std::size_t j = 0; j < q.cols(); ++j) out(i, j) = q.dequantized(i, j);
  return out;
}

// tile_len == 0 selects one tile spanning the whole row.
inline std::size_t effective_tile_len(std::size_t tile_len, std::size_t width) {
  return tile_len == 0 ? std::max<std::size_t>(width, 1) : tile_len;
}

template <typename T>
TileQuantActivation<T> quantize_activation_tiles(const Matrix<T>& a, std::size_t tile_len) {
  detail::require_finite(a, "quantize_activation_tiles");
  TileQuantActivation<T> q;
  q.tile_len = effective_tile_len(tile_len, a.cols());
  const std::size_t nt = detail::ceil_div(a.cols(), q.tile_len);
  q.codes = Matrix<Fp8Code>(a.rows(), a.cols());
  q.scales = Matrix<T>(a.rows(), nt);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t t = 0; t < nt; ++t) {
      const std::size_t lo = t * q.tile_len;
      const std::size_t hi = std::min(a.cols(), lo + q.tile_len);
      T amax = 0;
      for (std::size_t j = lo; j < hi; ++j) amax = std::max(amax, std::fabs(a(i, j)));
      const T s = detail::scale_from_amax(amax);
      q.scales(i, t) = s;
      for (std::size_t j = lo; j < hi; ++j) q.codes(i, j) = detail::quantize_scaled(a(i, j), s);
    }
  }
  return q;
}

// Quantize-dequantize one activation row in place, tile by tile. Produces the
// same values as dequantize(quantize_activation_tiles(row)).
template <typename T>
void fake_quant_row(std::span<T> row, std::size_t tile_len) {
  const std::size_t len = effective_tile_len(tile_len, row.size());
  for (std::size_t lo = 0; lo < row.size(); lo += len) {
    const std::size_t hi = std::min(row.size(), lo + len);
    T amax = 0;
    for (std::size_t j = lo; j < hi; ++j) {
      if (!std::isfinite(row[j])) throw NumericError("fake_quant_row: non-finite activation");
      amax = std::max(amax, std::fabs(row[j]));
    }
    const T s = detail::scale_from_amax(amax);
    for (std::size_t j = lo; j < hi; ++j)
      row[j] = static_cast<T>(e4m3::decode(detail::quantize_scaled(row[j], s))) * s;
  }
}

// Emulated W8A8 GEMM: Y = deq(A) * deq(W), accumulated in the working
// precision in ascending inner index.
template <typename T>
Matrix<T> qgemm_w8a8(const TileQuantActivation<T>& a, const BlockQuantTensor<T>& w) {
  if (a.cols() != w.rows()) throw ShapeError("qgemm_w8a8: inner dimension mismatch");
  return gemm(dequantize(a), dequantize(w));
}

// Quantization switch shared by the weight and activation paths. With
// enabled == false both helpers are identities, which is how full-precision
// arms run through the same code as quantized ones.
struct QuantSpec {
  bool enabled = false;
  BlockShape block{};
  std::size_t act_tile = 0;
};

template <typename T>
Matrix<T> fake_quant_weight(const Matrix<T>& w, const QuantSpec& spec) {
  if (!spec.enabled) return w;
  return dequantize(quantize_blockwise(w, spec.block));
}

template <typename T>
Matrix<T> fake_quant_activation(const Matrix<T>& a, const QuantSpec& spec) {
  if (!spec.enabled) return a;
  return dequantize(quantize_activation_tiles(a, spec.act_tile));
}

}  // namespace fp8rl
