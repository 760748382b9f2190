// Copyright (c) 2026 The antkv Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef ANTKV_MATRIX_HPP
#define ANTKV_MATRIX_HPP

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <ranges>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "antkv/error.hpp"

namespace antkv {

/// Dense row-major matrix. Rows are tokens, columns are channels.
template <typename T>
class Matrix {
 public:
  using value_type = T;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T{})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    detail::require(data_.size() == rows_ * cols_,
                    "Matrix: data length " + std::to_string(data_.size()) +
                        " does not match shape " + std::to_string(rows_) + "x" +
                        std::to_string(cols_));
  }

  static Matrix from_rows(std::initializer_list<std::initializer_list<T>> rows) {
    Matrix out;
    out.rows_ = rows.size();
    out.cols_ = rows.size() == 0 ? 0 : rows.begin()->size();
    out.data_.reserve(out.rows_ * out.cols_);
    for (const auto& r : rows) {
      detail::require(r.size() == out.cols_, "Matrix::from_rows: ragged rows");
      out.data_.insert(out.data_.end(), r.begin(), r.end());
    }
    return out;
  }

  [[nodiscard]] std::size_t rows() const noexcept { return rows_; }
  [[nodiscard]] std::size_t cols() const noexcept { return cols_; }
  [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
  [[nodiscard]] bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const noexcept {
    return data_[r * cols_ + c];
  }

  std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  template <typename U>
  [[nodiscard]] Matrix<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Matrix<U>(rows_, cols_, std::move(out));
  }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

/// Per-token rows of Q, K or V for a single attention head.
using HeadTensor = Matrix<float>;

template <typename T>
[[nodiscard]] bool all_finite(std::span<const T> xs) {
  for (const T& x : xs)
    if (!std::isfinite(x)) return false;
  return true;
}

template <typename T>
[[nodiscard]] bool all_finite(const Matrix<T>& m) {
  return all_finite(m.values());
}

template <std::ranges::random_access_range R>
[[nodiscard]] double l1_norm(const R& xs) {
  double s = 0.0;
  for (const auto& x : xs) s += std::abs(static_cast<double>(x));
  return s;
}

template <typename T>
[[nodiscard]] double l1_norm(const Matrix<T>& m) {
  return l1_norm(m.values());
}

template <std::ranges::random_access_range R>
[[nodiscard]] double l2_norm(const R& xs) {
  double s = 0.0;
  for (const auto& x : xs) s += static_cast<double>(x) * static_cast<double>(x);
  return std::sqrt(s);
}

template <std::ranges::random_access_range A, std::ranges::random_access_range B>
[[nodiscard]] double squared_distance(const A& a, const B& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double diff = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += diff * diff;
  }
  return s;
}

template <typename A, typename B>
[[nodiscard]] double l1_distance(const Matrix<A>& a, const Matrix<B>& b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(),
                  "l1_distance: shape mismatch");
  double s = 0.0;
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i)
    s += std::abs(static_cast<double>(av[i]) - static_cast<double>(bv[i]));
  return s;
}

template <typename T>
[[nodiscard]] Matrix<T> subtract(const Matrix<T>& a, const Matrix<T>& b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "subtract: shape mismatch");
  Matrix<T> out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out.values()[i] = a.values()[i] - b.values()[i];
  return out;
}

template <typename T>
[[nodiscard]] Matrix<T> add(const Matrix<T>& a, const Matrix<T>& b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
  Matrix<T> out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out.values()[i] = a.values()[i] + b.values()[i];
  return out;
}

template <typename T>
[[nodiscard]] Matrix<T> scaled(const Matrix<T>& a, T factor) {
  Matrix<T> out = a;
  for (T& x : out.values()) x *= factor;
  return out;
}

}  // namespace antkv

#endif  // ANTKV_MATRIX_HPP
