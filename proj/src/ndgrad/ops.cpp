// Copyright 2026 The bracplus Authors
// SPDX-License-Identifier: Apache-2.0

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "bracplus/ndgrad/var.hpp"

namespace bracplus::nd {

namespace {

thread_local bool g_grad_enabled = true;

// Strides of `in` laid over `out` (right-aligned), zero on broadcast axes.
std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    const std::size_t i = in.size() - 1 - k;
    const std::size_t o = out.size() - 1 - k;
    strides[o] = in[i] == 1 ? 0 : stride;
    stride *= in[i];
  }
  return strides;
}

// Calls f(out_index, a_offset, b_offset) over every element of `out`.
template <class F>
void broadcast_loop(const Shape& out, const std::vector<std::size_t>& sa,
                    const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t r = out.size();
  const std::size_t total = numel(out);
  if (r == 0) {
    f(0, 0, 0);
    return;
  }
  if (total == 0) return;
  std::vector<std::size_t> idx(r, 0);
  const std::size_t inner = out[r - 1];
  const std::size_t ia = sa[r - 1];
  const std::size_t ib = sb[r - 1];
  std::size_t oa = 0;
  std::size_t ob = 0;
  for (std::size_t o = 0; o < total; o += inner) {
    for (std::size_t j = 0; j < inner; ++j) f(o + j, oa + j * ia, ob + j * ib);
    for (std::size_t d = r - 1; d-- > 0;) {
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < out[d]) break;
      oa -= sa[d] * out[d];
      ob -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

template <class F>
Array binary_map(const Array& a, const Array& b, const char* op, F&& f) {
  if (a.shape() == b.shape()) {
    Array out(a.shape(), uninitialized);
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (std::size_t i = 0; i < out.size(); ++i) po[i] = f(pa[i], pb[i]);
    return out;
  }
  Shape shape = broadcast_shape(a.shape(), b.shape(), op);
  Array out(shape, uninitialized);
  double* po = out.data();
  const double* pa = a.data();
  const double* pb = b.data();
  if (b.size() == 1 && a.size() == out.size()) {
    const double bv = pb[0];
    for (std::size_t i = 0; i < out.size(); ++i) po[i] = f(pa[i], bv);
    return out;
  }
  if (a.size() == 1 && b.size() == out.size()) {
    const double av = pa[0];
    for (std::size_t i = 0; i < out.size(); ++i) po[i] = f(av, pb[i]);
    return out;
  }
  broadcast_loop(shape, broadcast_strides(a.shape(), shape), broadcast_strides(b.shape(), shape),
                 [&](std::size_t o, std::size_t ia, std::size_t ib) { po[o] = f(pa[ia], pb[ib]); });
  return out;
}

template <class F>
Array unary_map(const Array& x, F&& f) {
  Array out(x.shape(), uninitialized);
  const double* px = x.data();
  double* po = out.data();
  for (std::size_t i = 0; i < out.size(); ++i) po[i] = f(px[i]);
  return out;
}

Array sum_to_array(const Array& x, const Shape& shape) {
  if (x.shape() == shape) return x;
  if (numel(shape) == 1) {
    double s = 0.0;
    for (double v : x.values()) s += v;
    return Array(shape, s);
  }
  if (shape.size() > x.rank()) throw ShapeError("sum_to", x.shape(), shape);
  // Validate that `shape` broadcasts to x.
  if (broadcast_shape(shape, x.shape(), "sum_to") != x.shape()) {
    throw ShapeError("sum_to", x.shape(), shape);
  }
  Array out(shape, 0.0);
  double* po = out.data();
  const double* px = x.data();
  const auto st = broadcast_strides(shape, x.shape());
  const std::vector<std::size_t> unit(x.rank(), 0);
  broadcast_loop(x.shape(), st, unit,
                 [&](std::size_t i, std::size_t o, std::size_t) { po[o] += px[i]; });
  return out;
}

Array broadcast_array(const Array& x, const Shape& shape) {
  if (x.shape() == shape) return x;
  if (broadcast_shape(x.shape(), shape, "broadcast_to") != shape) {
    throw ShapeError("broadcast_to", x.shape(), shape);
  }
  Array out(shape, uninitialized);
  double* po = out.data();
  const double* px = x.data();
  if (x.size() == 1) {
    std::fill(po, po + out.size(), px[0]);
    return out;
  }
  const std::vector<std::size_t> unit(shape.size(), 0);
  broadcast_loop(shape, broadcast_strides(x.shape(), shape), unit,
                 [&](std::size_t o, std::size_t i, std::size_t) { po[o] = px[i]; });
  return out;
}

Var mask_mul(const Var& g, Array mask) { return mul(g, constant(std::move(mask))); }

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using MutMap = Eigen::Map<RowMajor>;

void require_rank2(const Array& a, const char* op) {
  if (a.rank() != 2) throw ShapeError(std::string(op) + ": expected rank-2 operand, got " + to_string(a.shape()));
}

// op(a) * op(b) where op transposes when the flag is set.
Array matmul_array(const Array& a, const Array& b, bool ta, bool tb) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = ta ? a.dim(1) : a.dim(0);
  const std::size_t k = ta ? a.dim(0) : a.dim(1);
  const std::size_t kb = tb ? b.dim(1) : b.dim(0);
  const std::size_t n = tb ? b.dim(0) : b.dim(1);
  if (k != kb) throw ShapeError("matmul", a.shape(), b.shape());
  Array out(Shape{m, n}, uninitialized);
  MutMap o(out.data(), m, n);
  const ConstMap am(a.data(), a.dim(0), a.dim(1));
  const ConstMap bm(b.data(), b.dim(0), b.dim(1));
  if (ta && tb) {
    o.noalias() = am.transpose() * bm.transpose();
  } else if (ta) {
    o.noalias() = am.transpose() * bm;
  } else if (tb) {
    o.noalias() = am * bm.transpose();
  } else {
    o.noalias() = am * bm;
  }
  return out;
}

Array transpose_array(const Array& x) {
  require_rank2(x, "transpose");
  Array out(Shape{x.dim(1), x.dim(0)}, uninitialized);
  MutMap(out.data(), x.dim(1), x.dim(0)) = ConstMap(x.data(), x.dim(0), x.dim(1)).transpose();
  return out;
}

// Decomposes `shape` around `axis` into (outer, axis length, inner).
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

void check_axis(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                     to_string(shape));
  }
}

}  // namespace

Var::Var(Array value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Array& Var::mutable_value() {
  if (node_->backward) throw std::logic_error("mutable_value() on a non-leaf node");
  return node_->value;
}

bool grad_enabled() noexcept { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
EnableGradGuard::EnableGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = true; }
EnableGradGuard::~EnableGradGuard() { g_grad_enabled = previous_; }

Var make_op(Array value, const char* op, std::vector<Var> parents, BackwardFn backward) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_grad_enabled &&
      std::any_of(parents.begin(), parents.end(), [](const Var& p) { return p.requires_grad(); })) {
    node->requires_grad = true;
    node->op = op;
    node->parents = std::move(parents);
    node->backward = std::move(backward);
  }
  return Var(std::move(node));
}

Var constant(Array value) { return Var(std::move(value), false); }
Var constant(double value) { return Var(Array::scalar(value), false); }

// ---------------------------------------------------------------- binary

Var add(const Var& a, const Var& b) {
  return make_op(binary_map(a.value(), b.value(), "add", std::plus<>()), "add", {a, b},
                 [](const Var& out, const Var& g) -> std::vector<Var> {
                   const auto& p = out.parents();
                   return {p[0].requires_grad() ? sum_to(g, p[0].shape()) : Var(),
                           p[1].requires_grad() ? sum_to(g, p[1].shape()) : Var()};
                 });
}

Var sub(const Var& a, const Var& b) {
  return make_op(binary_map(a.value(), b.value(), "sub", std::minus<>()), "sub", {a, b},
                 [](const Var& out, const Var& g) -> std::vector<Var> {
                   const auto& p = out.parents();
                   return {p[0].requires_grad() ? sum_to(g, p[0].shape()) : Var(),
                           p[1].requires_grad() ? sum_to(neg(g), p[1].shape()) : Var()};
                 });
}

Var mul(const Var& a, const Var& b) {
  return make_op(binary_map(a.value(), b.value(), "mul", std::multiplies<>()), "mul", {a, b},
                 [](const Var& out, const Var& g) -> std::vector<Var> {
                   const auto& p = out.parents();
                   Var ga = p[0].requires_grad() ? sum_to(mul(g, p[1]), p[0].shape()) : Var();
                   Var gb = p[1].requires_grad() ? sum_to(mul(g, p[0]), p[1].shape()) : Var();
                   return {ga, gb};
                 });
}

Var div(const Var& a, const Var& b) {
  return make_op(binary_map(a.value(), b.value(), "div", std::divides<>()), "div", {a, b},
                 [](const Var& out, const Var& g) -> std::vector<Var> {
                   const auto& p = out.parents();
                   Var ga = p[0].requires_grad() ? sum_to(div(g, p[1]), p[0].shape()) : Var();
                   Var gb = p[1].requires_grad()
                                ? sum_to(neg(div(mul(g, out), p[1])), p[1].shape())
                                : Var();
                   return {ga, gb};
                 });
}

namespace {

// Routes the gradient of an elementwise selection to whichever side was picked.
Var select_op(const Var& a, const Var& b, bool take_min) {
  const char* name = take_min ? "minimum" : "maximum";
  Array value = binary_map(a.value(), b.value(), name, [take_min](double x, double y) {
    return take_min ? std::min(x, y) : std::max(x, y);
  });
  return make_op(std::move(value), name, {a, b},
                 [take_min](const Var& out, const Var& g) -> std::vector<Var> {
                   const auto& p = out.parents();
                   // Ties go to the first operand.
                   Array pick_a = binary_map(p[0].value(), p[1].value(), "select",
                                             [take_min](double x, double y) {
                                               return (take_min ? x <= y : x >= y) ? 1.0 : 0.0;
                                             });
                   Array pick_b = unary_map(pick_a, [](double m) { return 1.0 - m; });
                   return {p[0].requires_grad() ? sum_to(mask_mul(g, std::move(pick_a)), p[0].shape()) : Var(),
                           p[1].requires_grad() ? sum_to(mask_mul(g, std::move(pick_b)), p[1].shape()) : Var()};
                 });
}

}  // namespace

Var minimum(const Var& a, const Var& b) { return select_op(a, b, true); }
Var maximum(const Var& a, const Var& b) { return select_op(a, b, false); }

// ---------------------------------------------------------------- unary

Var neg(const Var& x) {
  return make_op(unary_map(x.value(), std::negate<>()), "neg", {x},
                 [](const Var&, const Var& g) -> std::vector<Var> { return {neg(g)}; });
}

Var exp(const Var& x) {
  return make_op(unary_map(x.value(), [](double v) { return std::exp(v); }), "exp", {x},
                 [](const Var& out, const Var& g) -> std::vector<Var> { return {mul(g, out)}; });
}

Var log(const Var& x) {
  return make_op(unary_map(x.value(), [](double v) { return std::log(v); }), "log", {x},
                 [](const Var& out, const Var& g) -> std::vector<Var> {
                   return {div(g, out.parents()[0])};
                 });
}

Var tanh(const Var& x) {
  return make_op(unary_map(x.value(), [](double v) { return std::tanh(v); }), "tanh", {x},
                 [](const Var& out, const Var& g) -> std::vector<Var> {
                   return {mul(g, sub(constant(1.0), square(out)))};
                 });
}

Var sigmoid(const Var& x) {
  return make_op(unary_map(x.value(),
                           [](double v) {
                             return v >= 0 ? 1.0 / (1.0 + std::exp(-v))
                                           : std::exp(v) / (1.0 + std::exp(v));
                           }),
                 "sigmoid", {x}, [](const Var& out, const Var& g) -> std::vector<Var> {
                   return {mul(g, mul(out, sub(constant(1.0), out)))};
                 });
}

Var relu(const Var& x) {
  return make_op(unary_map(x.value(), [](double v) { return v > 0.0 ? v : 0.0; }), "relu", {x},
                 [](const Var& out, const Var& g) -> std::vector<Var> {
                   return {mask_mul(g, unary_map(out.parents()[0].value(),
                                                 [](double v) { return v > 0.0 ? 1.0 : 0.0; }))};
                 });
}

Var softplus(const Var& x) {
  return make_op(unary_map(x.value(),
                           [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); }),
                 "softplus", {x}, [](const Var& out, const Var& g) -> std::vector<Var> {
                   return {mul(g, sigmoid(out.parents()[0]))};
                 });
}

Var square(const Var& x) {
  return make_op(unary_map(x.value(), [](double v) { return v * v; }), "square", {x},
                 [](const Var& out, const Var& g) -> std::vector<Var> {
                   return {mul(g, mul(constant(2.0), out.parents()[0]))};
                 });
}

Var sqrt(const Var& x) {
  return make_op(unary_map(x.value(), [](double v) { return std::sqrt(v); }), "sqrt", {x},
                 [](const Var& out, const Var& g) -> std::vector<Var> {
                   return {div(mul(g, constant(0.5)), out)};
                 });
}

Var abs(const Var& x) {
  return make_op(unary_map(x.value(), [](double v) { return std::abs(v); }), "abs", {x},
                 [](const Var& out, const Var& g) -> std::vector<Var> {
                   return {mask_mul(g, unary_map(out.parents()[0].value(), [](double v) {
                                      return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
                                    }))};
                 });
}

Var clip(const Var& x, double lo, double hi) {
  return make_op(unary_map(x.value(), [lo, hi](double v) { return std::clamp(v, lo, hi); }),
                 "clip", {x}, [lo, hi](const Var& out, const Var& g) -> std::vector<Var> {
                   return {mask_mul(g, unary_map(out.parents()[0].value(), [lo, hi](double v) {
                                      return (v >= lo && v <= hi) ? 1.0 : 0.0;
                                    }))};
                 });
}

Var stop_gradient(const Var& x) { return constant(x.value()); }

// ---------------------------------------------------------------- linear algebra

namespace {

// Backward of op(a) * op(b) without materializing transposes.
template <bool TA, bool TB>
Var matmul_t(const Var& a, const Var& b) {
  return make_op(matmul_array(a.value(), b.value(), TA, TB), "matmul", {a, b},
                 [](const Var& out, const Var& g) -> std::vector<Var> {
                   const auto& p = out.parents();
                   Var ga;
                   Var gb;
                   if (p[0].requires_grad()) {
                     if constexpr (TA) {
                       ga = matmul_t<TB, true>(p[1], g);
                     } else {
                       ga = matmul_t<false, !TB>(g, p[1]);
                     }
                   }
                   if (p[1].requires_grad()) {
                     if constexpr (TB) {
                       gb = matmul_t<true, TA>(g, p[0]);
                     } else {
                       gb = matmul_t<!TA, false>(p[0], g);
                     }
                   }
                   return {ga, gb};
                 });
}

}  // namespace

Var matmul(const Var& a, const Var& b) { return matmul_t<false, false>(a, b); }

Var linear(const Var& x, const Var& weight, const Var& bias) {
  const Array& w = weight.value();
  const Array& b = bias.value();
  if (b.rank() != 2 || b.dim(0) != 1 || w.rank() != 2 || b.dim(1) != w.dim(1)) {
    throw ShapeError("linear", w.shape(), b.shape());
  }
  Array out = matmul_array(x.value(), w, false, false);
  const std::size_t n = out.dim(0);
  const std::size_t m = out.dim(1);
  MutMap(out.data(), n, m).rowwise() += ConstMap(b.data(), 1, m).row(0);
  return make_op(std::move(out), "linear", {x, weight, bias},
                 [](const Var& out_var, const Var& g) -> std::vector<Var> {
                   const auto& p = out_var.parents();
                   return {p[0].requires_grad() ? matmul_t<false, true>(g, p[1]) : Var(),
                           p[1].requires_grad() ? matmul_t<true, false>(p[0], g) : Var(),
                           p[2].requires_grad() ? sum(g, 0, true) : Var()};
                 });
}

Var transpose(const Var& x) {
  return make_op(transpose_array(x.value()), "transpose", {x},
                 [](const Var&, const Var& g) -> std::vector<Var> { return {transpose(g)}; });
}

// ---------------------------------------------------------------- reductions / shape

Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  return make_op(Array::scalar(s), "sum", {x}, [](const Var& out, const Var& g) -> std::vector<Var> {
    return {broadcast_to(g, out.parents()[0].shape())};
  });
}

Var mean(const Var& x) { return mul(sum(x), constant(1.0 / static_cast<double>(x.size()))); }

Var sum(const Var& x, std::size_t axis, bool keepdims) {
  const Shape& in = x.shape();
  check_axis(in, axis, "sum");
  const AxisSplit s = split_axis(in, axis);
  Shape kept = in;
  kept[axis] = 1;
  Array out(kept, 0.0);
  const double* px = x.value().data();
  double* po = out.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t l = 0; l < s.len; ++l) {
      const double* row = px + (o * s.len + l) * s.inner;
      double* dst = po + o * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) dst[i] += row[i];
    }
  }
  if (!keepdims) {
    Shape dropped = in;
    dropped.erase(dropped.begin() + static_cast<std::ptrdiff_t>(axis));
    out = out.reshaped(std::move(dropped));
  }
  return make_op(std::move(out), "sum_axis", {x},
                 [kept](const Var& out_var, const Var& g) -> std::vector<Var> {
                   return {broadcast_to(reshape(g, kept), out_var.parents()[0].shape())};
                 });
}

Var mean(const Var& x, std::size_t axis, bool keepdims) {
  check_axis(x.shape(), axis, "mean");
  return mul(sum(x, axis, keepdims), constant(1.0 / static_cast<double>(x.shape()[axis])));
}

Var reshape(const Var& x, Shape shape) {
  if (shape == x.shape()) return x;
  return make_op(x.value().reshaped(std::move(shape)), "reshape", {x},
                 [](const Var& out, const Var& g) -> std::vector<Var> {
                   return {reshape(g, out.parents()[0].shape())};
                 });
}

Var broadcast_to(const Var& x, const Shape& shape) {
  if (x.shape() == shape) return x;
  return make_op(broadcast_array(x.value(), shape), "broadcast_to", {x},
                 [](const Var& out, const Var& g) -> std::vector<Var> {
                   return {sum_to(g, out.parents()[0].shape())};
                 });
}

Var sum_to(const Var& x, const Shape& shape) {
  if (x.shape() == shape) return x;
  return make_op(sum_to_array(x.value(), shape), "sum_to", {x},
                 [](const Var& out, const Var& g) -> std::vector<Var> {
                   return {broadcast_to(g, out.parents()[0].shape())};
                 });
}

Var concat(std::initializer_list<Var> xs, std::size_t axis) {
  return concat(std::span<const Var>(xs.begin(), xs.size()), axis);
}

Var concat(std::span<const Var> xs, std::size_t axis) {
  if (xs.empty()) throw ShapeError("concat: no operands");
  const Shape& first = xs[0].shape();
  check_axis(first, axis, "concat");
  Shape shape = first;
  shape[axis] = 0;
  for (const Var& v : xs) {
    const Shape& s = v.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == first[i];
    if (!ok) throw ShapeError("concat", first, s);
    shape[axis] += s[axis];
  }
  Array out(shape, uninitialized);
  const AxisSplit total = split_axis(shape, axis);
  std::vector<std::size_t> starts;
  std::size_t offset = 0;
  for (const Var& v : xs) {
    const AxisSplit part = split_axis(v.shape(), axis);
    const double* src = v.value().data();
    for (std::size_t o = 0; o < part.outer; ++o) {
      std::copy_n(src + o * part.len * part.inner, part.len * part.inner,
                  out.data() + (o * total.len + offset) * total.inner);
    }
    starts.push_back(offset);
    offset += part.len;
  }
  return make_op(std::move(out), "concat", std::vector<Var>(xs.begin(), xs.end()),
                 [axis, starts](const Var& out_var, const Var& g) -> std::vector<Var> {
                   const auto& p = out_var.parents();
                   std::vector<Var> grads;
                   grads.reserve(p.size());
                   for (std::size_t i = 0; i < p.size(); ++i) {
                     grads.push_back(p[i].requires_grad()
                                         ? slice(g, axis, starts[i], p[i].shape()[axis])
                                         : Var());
                   }
                   return grads;
                 });
}

Var slice(const Var& x, std::size_t axis, std::size_t start, std::size_t length) {
  const Shape& in = x.shape();
  check_axis(in, axis, "slice");
  if (start + length > in[axis]) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " +
                     std::to_string(start + length) + ") exceeds " + to_string(in));
  }
  Shape shape = in;
  shape[axis] = length;
  Array out(shape, uninitialized);
  const AxisSplit s = split_axis(in, axis);
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(x.value().data() + (o * s.len + start) * s.inner, length * s.inner,
                out.data() + o * length * s.inner);
  }
  const std::size_t full = in[axis];
  return make_op(std::move(out), "slice", {x},
                 [axis, start, full](const Var&, const Var& g) -> std::vector<Var> {
                   return {pad(g, axis, start, full)};
                 });
}

Var pad(const Var& x, std::size_t axis, std::size_t start, std::size_t full) {
  const Shape& in = x.shape();
  check_axis(in, axis, "pad");
  if (start + in[axis] > full) {
    throw ShapeError("pad: " + to_string(in) + " does not fit at " + std::to_string(start) +
                     " in length " + std::to_string(full));
  }
  Shape shape = in;
  shape[axis] = full;
  Array out(shape, 0.0);
  const AxisSplit s = split_axis(in, axis);
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(x.value().data() + o * s.len * s.inner, s.len * s.inner,
                out.data() + (o * full + start) * s.inner);
  }
  const std::size_t length = in[axis];
  return make_op(std::move(out), "pad", {x},
                 [axis, start, length](const Var&, const Var& g) -> std::vector<Var> {
                   return {slice(g, axis, start, length)};
                 });
}

}  // namespace bracplus::nd
