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
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "fp8rl/error.hpp"

namespace fp8rl {

// Dense row-major matrix. Rows are contiguous so a row can be handed out as
// a span; every kernel in the library walks rows in ascending column order.
template <typename T>
class Matrix {
 public:
  using value_type = T;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T{})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t i, std::size_t j) noexcept { return data_[i * cols_ + j]; }
  const T& operator()(std::size_t i, std::size_t j) const noexcept { return data_[i * cols_ + j]; }

  std::span<T> row(std::size_t i) noexcept { return {data_.data() + i * cols_, cols_}; }
  std::span<const T> row(std::size_t i) const noexcept { return {data_.data() + i * cols_, cols_}; }

  std::span<T> flat() noexcept { return data_; }
  std::span<const T> flat() const noexcept { return data_; }
  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  // Appends one row; the matrix must be empty or have matching width.
  void push_row(std::span<const T> r) {
    if (rows_ == 0 && cols_ == 0) cols_ = r.size();
    if (r.size() != cols_) throw ShapeError("push_row: width mismatch");
    data_.insert(data_.end(), r.begin(), r.end());
    ++rows_;
  }

  void resize_rows(std::size_t rows) {
    rows_ = rows;
    data_.resize(rows_ * cols_);
  }

  template <typename U>
  Matrix<U> cast() const {
    Matrix<U> out(rows_, cols_);
    for (std::size_t k = 0; k < data_.size(); ++k) out.flat()[k] = static_cast<U>(data_[k]);
    return out;
  }

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

template <typename T>
bool all_finite(std::span<const T> v) {
  return std::all_of(v.begin(), v.end(), [](T x) { return std::isfinite(x); });
}

template <typename T>
bool all_finite(const Matrix<T>& m) {
  return all_finite(m.flat());
}

// Y = X * W with X (m x k) and W (k x n). The k loop is outermost per output
// row, so each output element accumulates in ascending k regardless of how
// many rows are processed in one call; row i of Y depends only on row i of X.
template <typename T>
void gemm(const Matrix<T>& x, const Matrix<T>& w, Matrix<T>& y) {
  if (x.cols() != w.rows()) throw ShapeError("gemm: inner dimension mismatch");
  y = Matrix<T>(x.rows(), w.cols());
  const std::size_t n = w.cols();
  for (std::size_t i = 0; i < x.rows(); ++i) {
    T* yr = y.data() + i * n;
    const T* xr = x.data() + i * x.cols();
    for (std::size_t k = 0; k < x.cols(); ++k) {
      const T a = xr[k];
      const T* wr = w.data() + k * n;
      for (std::size_t j = 0; j < n; ++j) yr[j] += a * wr[j];
    }
  }
}

template <typename T>
Matrix<T> gemm(const Matrix<T>& x, const Matrix<T>& w) {
  Matrix<T> y;
  gemm(x, w, y);
  return y;
}

// Single-row product used by the decode path; identical accumulation order
// to gemm().
template <typename T>
void gemv_row(std::span<const T> x, const Matrix<T>& w, std::span<T> y) {
  if (x.size() != w.rows() || y.size() != w.cols()) throw ShapeError("gemv_row: shape mismatch");
  std::fill(y.begin(), y.end(), T{});
  const std::size_t n = w.cols();
  for (std::size_t k = 0; k < x.size(); ++k) {
    const T a = x[k];
    const T* wr = w.data() + k * n;
    for (std::size_t j = 0; j < n; ++j) y[j] += a * wr[j];
  }
}

}  // namespace fp8rl
