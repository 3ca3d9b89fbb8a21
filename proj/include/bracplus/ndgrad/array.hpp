// Copyright 2026 The bracplus Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace bracplus::nd {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Raised when operand shapes are not conformable. The message carries both shapes.
class ShapeError : public std::invalid_argument {
 public:
  ShapeError(const std::string& op, const Shape& a, const Shape& b);
  explicit ShapeError(const std::string& what) : std::invalid_argument(what) {}
};

/// Allocator whose value-less construct() leaves elements uninitialized.
template <class T>
struct DefaultInitAllocator : std::allocator<T> {
  template <class U>
  struct rebind {
    using other = DefaultInitAllocator<U>;
  };
  using std::allocator<T>::allocator;
  template <class U>
  void construct(U* p) noexcept {
    ::new (static_cast<void*>(p)) U;
  }
  template <class U, class... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
};

/// Tag for arrays whose every element is written before being read.
struct Uninitialized {};
inline constexpr Uninitialized uninitialized{};

/// Dense row-major array of doubles. A rank-0 array holds one element.
class Array {
 public:
  Array() : shape_{}, data_(1, 0.0) {}
  explicit Array(Shape shape, double fill = 0.0);
  Array(Shape shape, Uninitialized);
  Array(Shape shape, const std::vector<double>& data);

  static Array scalar(double v) { return Array(Shape{}, v); }
  static Array matrix(std::size_t rows, std::size_t cols,
                      std::initializer_list<double> values);
  static Array vector(std::initializer_list<double> values);
  static Array zeros_like(const Array& a) { return Array(a.shape(), 0.0); }
  static Array ones_like(const Array& a) { return Array(a.shape(), 1.0); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t rows() const noexcept { return rank() == 2 ? shape_[0] : 1; }
  std::size_t cols() const { return rank() == 0 ? 1 : shape_.back(); }

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }
  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * shape_.back() + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept {
    return data_[r * shape_.back() + c];
  }

  /// Value of a single-element array.
  double item() const;

  Array reshaped(Shape shape) const;
  bool all_finite() const noexcept;

  friend bool operator==(const Array& a, const Array& b) = default;

 private:
  Shape shape_;
  std::vector<double, DefaultInitAllocator<double>> data_;
};

/// Broadcast result shape (numpy rules); throws ShapeError when not conformable.
Shape broadcast_shape(const Shape& a, const Shape& b, const std::string& op);

/// Rows `index` of a rank-2 array, in order.
Array take_rows(const Array& a, std::span<const std::size_t> index);
/// Rows [start, start + count) of a rank-2 array.
Array row_range(const Array& a, std::size_t start, std::size_t count);
/// `times` stacked copies of a rank-2 array.
Array tile_rows(const Array& a, std::size_t times);

}  // namespace bracplus::nd
