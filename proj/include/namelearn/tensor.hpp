// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "namelearn/errors.hpp"

namespace namelearn {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

/// Dense row-major array. The last axis is the "column" axis for the
/// row-wise helpers; everything before it is flattened into rows.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

  Tensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != data_.size()) {
      throw DimensionError("tensor shape " + shape_str(shape_) + " needs " +
                           std::to_string(shape_numel(shape_)) +
                           " values, got " + std::to_string(data_.size()));
    }
  }

  static Tensor scalar(T value) { return Tensor(Shape{1}, std::vector<T>{value}); }

  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<T> values) {
    return Tensor(Shape{rows, cols}, std::move(values));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t numel() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::size_t cols() const noexcept { return shape_.empty() ? 0 : shape_.back(); }
  std::size_t rows() const noexcept {
    return cols() == 0 ? 0 : data_.size() / cols();
  }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T& at(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
  const T& at(std::size_t r, std::size_t c) const noexcept {
    return data_[r * cols() + c];
  }

  std::span<T> row(std::size_t r) noexcept {
    return std::span<T>(data_).subspan(r * cols(), cols());
  }
  std::span<const T> row(std::size_t r) const noexcept {
    return std::span<const T>(data_).subspan(r * cols(), cols());
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(),
                       [](T v) { return std::isfinite(v); });
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(),
                   [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape_, std::move(out));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

/// Bitwise comparison (distinguishes -0.0 from 0.0 and compares NaN payloads).
template <typename T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  const auto lhs = a.data();
  const auto rhs = b.data();
  return std::equal(lhs.begin(), lhs.end(), rhs.begin(), [](T x, T y) {
    return std::memcmp(&x, &y, sizeof(T)) == 0;
  });
}

}  // namespace namelearn
