// Copyright 2026 The bracplus Authors
// SPDX-License-Identifier: Apache-2.0

#include "bracplus/ndgrad/array.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

namespace bracplus::nd {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

ShapeError::ShapeError(const std::string& op, const Shape& a, const Shape& b)
    : std::invalid_argument(op + ": shape mismatch " + to_string(a) + " vs " + to_string(b)) {}

Array::Array(Shape shape, double fill) : shape_(std::move(shape)), data_(numel(shape_), fill) {}

Array::Array(Shape shape, Uninitialized) : shape_(std::move(shape)), data_(numel(shape_)) {}

Array::Array(Shape shape, const std::vector<double>& data)
    : shape_(std::move(shape)), data_(data.begin(), data.end()) {
  if (data_.size() != numel(shape_)) {
    throw ShapeError("Array: " + std::to_string(data_.size()) + " values for shape " +
                     to_string(shape_));
  }
}

Array Array::matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values) {
  return Array(Shape{rows, cols}, std::vector<double>(values));
}

Array Array::vector(std::initializer_list<double> values) {
  return Array(Shape{values.size()}, std::vector<double>(values));
}

std::size_t Array::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + to_string(shape_));
  }
  return shape_[axis];
}

double Array::item() const {
  if (data_.size() != 1) throw ShapeError("item() on non-scalar " + to_string(shape_));
  return data_[0];
}

Array Array::reshaped(Shape shape) const {
  if (numel(shape) != data_.size()) throw ShapeError("reshape", shape_, shape);
  Array out = *this;
  out.shape_ = std::move(shape);
  return out;
}

bool Array::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Shape broadcast_shape(const Shape& a, const Shape& b, const std::string& op) {
  if (a == b) return a;
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) throw ShapeError(op, a, b);
    out[i] = da == 1 ? db : da;
  }
  return out;
}

Array take_rows(const Array& a, std::span<const std::size_t> index) {
  if (a.rank() != 2) throw ShapeError("take_rows", a.shape(), {});
  const std::size_t c = a.cols();
  Array out(Shape{index.size(), c}, uninitialized);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= a.rows()) throw std::out_of_range("take_rows: row " + std::to_string(index[i]));
    std::copy_n(a.data() + index[i] * c, c, out.data() + i * c);
  }
  return out;
}

Array row_range(const Array& a, std::size_t start, std::size_t count) {
  if (a.rank() != 2 || start + count > a.rows()) throw ShapeError("row_range", a.shape(), {start, count});
  const std::size_t c = a.cols();
  Array out(Shape{count, c}, uninitialized);
  std::copy_n(a.data() + start * c, count * c, out.data());
  return out;
}

Array tile_rows(const Array& a, std::size_t times) {
  if (a.rank() != 2) throw ShapeError("tile_rows", a.shape(), {});
  Array out(Shape{times * a.rows(), a.cols()}, uninitialized);
  for (std::size_t t = 0; t < times; ++t) std::copy_n(a.data(), a.size(), out.data() + t * a.size());
  return out;
}

}  // namespace bracplus::nd
