// Copyright 2026 The bracplus Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "bracplus/ndgrad/array.hpp"

namespace bracplus::nd {

class Var;
struct Node;

/// Vector-Jacobian product of one recorded op. Receives the op's own output and
/// the incoming gradient and returns one gradient per parent (undefined Var for
/// parents that receive nothing). Implementations are written in terms of Var
/// ops so the same code yields first-order gradients (grad mode off) or a
/// differentiable gradient graph (create-graph mode).
using BackwardFn = std::function<std::vector<Var>(const Var& out, const Var& grad_out)>;

struct Node {
  Array value;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<Var> parents;
  BackwardFn backward;
  std::optional<Array> grad;
};

/// Handle to a graph node. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(Array value, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }
  const Array& value() const { return node_->value; }
  /// In-place access for optimizers. Only valid on leaves.
  Array& mutable_value();
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t size() const { return node_->value.size(); }
  double item() const { return node_->value.item(); }

  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  bool is_leaf() const noexcept { return !node_ || !node_->backward; }
  const char* op() const noexcept { return node_ ? node_->op : "undefined"; }
  const std::vector<Var>& parents() const { return node_->parents; }

  /// Accumulated gradient after backward(); absent before.
  const std::optional<Array>& grad() const { return node_->grad; }
  void zero_grad() { node_->grad.reset(); }

  Node* node() const noexcept { return node_.get(); }

 private:
  friend Var make_op(Array, const char*, std::vector<Var>, BackwardFn);
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  std::shared_ptr<Node> node_;
};

/// Records an op result. The node only keeps parents and the VJP when grad
/// mode is on and some parent requires grad.
Var make_op(Array value, const char* op, std::vector<Var> parents, BackwardFn backward);

bool grad_enabled() noexcept;

/// Disables graph recording for its lifetime (thread-local).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class EnableGradGuard {
 public:
  EnableGradGuard();
  ~EnableGradGuard();
  EnableGradGuard(const EnableGradGuard&) = delete;
  EnableGradGuard& operator=(const EnableGradGuard&) = delete;

 private:
  bool previous_;
};

Var constant(Array value);
Var constant(double value);

// Elementwise, numpy broadcasting.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var minimum(const Var& a, const Var& b);
Var maximum(const Var& a, const Var& b);

Var neg(const Var& x);
Var exp(const Var& x);
Var log(const Var& x);
Var tanh(const Var& x);
Var sigmoid(const Var& x);
/// Subgradient 0 at x == 0.
Var relu(const Var& x);
Var softplus(const Var& x);
Var square(const Var& x);
Var sqrt(const Var& x);
/// Subgradient 0 at x == 0.
Var abs(const Var& x);
/// Gradient passes where lo <= x <= hi, zero outside.
Var clip(const Var& x, double lo, double hi);
Var stop_gradient(const Var& x);

// Linear algebra on rank-2 operands.
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& x);
/// x * weight + bias for x [n, in], weight [in, out], bias [1, out]; one recorded op.
Var linear(const Var& x, const Var& weight, const Var& bias);

// Reductions and shape ops.
Var sum(const Var& x);
Var mean(const Var& x);
Var sum(const Var& x, std::size_t axis, bool keepdims = false);
Var mean(const Var& x, std::size_t axis, bool keepdims = false);
Var reshape(const Var& x, Shape shape);
Var broadcast_to(const Var& x, const Shape& shape);
/// Sums broadcast axes away so the result has `shape`.
Var sum_to(const Var& x, const Shape& shape);
Var concat(std::span<const Var> xs, std::size_t axis);
Var concat(std::initializer_list<Var> xs, std::size_t axis);
/// Contiguous range [start, start+length) along `axis`.
Var slice(const Var& x, std::size_t axis, std::size_t start, std::size_t length);
/// Zero array of size `full` along `axis` with x written at `start`.
Var pad(const Var& x, std::size_t axis, std::size_t start, std::size_t full);

// Operator sugar.
inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator-(const Var& a) { return neg(a); }
inline Var operator+(const Var& a, double b) { return add(a, constant(b)); }
inline Var operator+(double a, const Var& b) { return add(constant(a), b); }
inline Var operator-(const Var& a, double b) { return sub(a, constant(b)); }
inline Var operator-(double a, const Var& b) { return sub(constant(a), b); }
inline Var operator*(const Var& a, double b) { return mul(a, constant(b)); }
inline Var operator*(double a, const Var& b) { return mul(constant(a), b); }
inline Var operator/(const Var& a, double b) { return mul(a, constant(1.0 / b)); }

}  // namespace bracplus::nd
