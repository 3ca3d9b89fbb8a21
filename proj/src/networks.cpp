// Copyright 2026 The bracplus Authors
// SPDX-License-Identifier: Apache-2.0

#include "bracplus/networks.hpp"

#include <cmath>
#include <stdexcept>

#include "bracplus/errors.hpp"

namespace bracplus::nn {

Mlp::Mlp(const std::vector<std::size_t>& sizes, Rng& rng) {
  if (sizes.size() < 2) throw std::invalid_argument("Mlp: need at least input and output sizes");
  for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(sizes[i]));
    layers_.push_back({nd::Var(rng.uniform_array({sizes[i], sizes[i + 1]}, -bound, bound), true),
                       nd::Var(rng.uniform_array({1, sizes[i + 1]}, -bound, bound), true)});
  }
}

Mlp Mlp::zeros(const std::vector<std::size_t>& sizes) {
  if (sizes.size() < 2) throw std::invalid_argument("Mlp: need at least input and output sizes");
  Mlp m;
  for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
    m.layers_.push_back({nd::Var(nd::Array({sizes[i], sizes[i + 1]}, 0.0), true),
                         nd::Var(nd::Array({1, sizes[i + 1]}, 0.0), true)});
  }
  return m;
}

Mlp Mlp::from_layers(std::vector<nd::Array> weights, std::vector<nd::Array> biases) {
  if (weights.empty() || weights.size() != biases.size()) {
    throw std::invalid_argument("Mlp::from_layers: weights and biases must pair up");
  }
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const auto& w = weights[i].shape();
    const auto& b = biases[i].shape();
    if (w.size() != 2 || b != nd::Shape{1, w[1]}) throw nd::ShapeError("Mlp layer", w, b);
    if (i > 0 && weights[i - 1].shape()[1] != w[0]) {
      throw nd::ShapeError("Mlp layers", weights[i - 1].shape(), w);
    }
  }
  Mlp m;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    m.layers_.push_back({nd::Var(std::move(weights[i]), true), nd::Var(std::move(biases[i]), true)});
  }
  return m;
}

nd::Var Mlp::forward(const nd::Var& x) const {
  nd::Var h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = nd::linear(h, layers_[i].weight, layers_[i].bias);
    if (i + 1 < layers_.size()) h = nd::relu(h);
  }
  return h;
}

std::vector<nd::Var> Mlp::parameters() const {
  std::vector<nd::Var> p;
  p.reserve(2 * layers_.size());
  for (const auto& l : layers_) {
    p.push_back(l.weight);
    p.push_back(l.bias);
  }
  return p;
}

std::vector<std::size_t> Mlp::sizes() const {
  std::vector<std::size_t> s;
  if (layers_.empty()) return s;
  s.push_back(layers_.front().weight.shape()[0]);
  for (const auto& l : layers_) s.push_back(l.weight.shape()[1]);
  return s;
}

std::size_t Mlp::input_dim() const { return layers_.front().weight.shape()[0]; }
std::size_t Mlp::output_dim() const { return layers_.back().weight.shape()[1]; }

Mlp Mlp::clone() const {
  Mlp m;
  for (const auto& l : layers_) {
    m.layers_.push_back({nd::Var(l.weight.value(), true), nd::Var(l.bias.value(), true)});
  }
  return m;
}

Mlp Mlp::frozen() const {
  Mlp m;
  for (const auto& l : layers_) m.layers_.push_back({nd::constant(l.weight.value()), nd::constant(l.bias.value())});
  return m;
}

void Mlp::assign(const Mlp& other) {
  if (sizes() != other.sizes()) throw std::invalid_argument("Mlp::assign: architecture mismatch");
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    layers_[i].weight.mutable_value() = other.layers_[i].weight.value();
    layers_[i].bias.mutable_value() = other.layers_[i].bias.value();
  }
}

dist::TanhDiagGaussian policy_forward(const Mlp& net, const nd::Var& states,
                                      const dist::ActionBounds& bounds) {
  const std::size_t d = bounds.dim();
  if (net.output_dim() != 2 * d) {
    throw std::invalid_argument("policy_forward: network emits " +
                                std::to_string(net.output_dim()) + " values for action dim " +
                                std::to_string(d));
  }
  const nd::Var out = net.forward(states);
  nd::Var mean = nd::slice(out, 1, 0, d);
  nd::Var log_std = nd::clip(nd::slice(out, 1, d, d), kLogStdMin, kLogStdMax);
  return {{std::move(mean), std::move(log_std)}, bounds};
}

nd::Var q_forward(const Mlp& net, const nd::Var& states, const nd::Var& actions) {
  return net.forward(nd::concat({states, actions}, 1));
}

TwinQ TwinQ::make(const std::vector<std::size_t>& sizes, Rng& rng) {
  TwinQ t;
  t.q1 = Mlp(sizes, rng);
  t.q2 = Mlp(sizes, rng);
  t.q1_target = t.q1.clone();
  t.q2_target = t.q2.clone();
  return t;
}

nd::Var TwinQ::target_min(const nd::Var& states, const nd::Var& actions) const {
  return nd::minimum(q_forward(q1_target, states, actions), q_forward(q2_target, states, actions));
}

void TwinQ::polyak_update(double tau) {
  if (!(tau > 0.0 && tau <= 1.0)) {
    throw std::invalid_argument("polyak_update: tau must lie in (0, 1], got " + std::to_string(tau));
  }
  auto blend = [tau](const Mlp& online, Mlp& target) {
    const auto src = online.parameters();
    const auto dst = target.parameters();
    for (std::size_t i = 0; i < src.size(); ++i) {
      nd::Array& t = nd::Var(dst[i]).mutable_value();
      const nd::Array& o = src[i].value();
      for (std::size_t k = 0; k < t.size(); ++k) t[k] = tau * o[k] + (1.0 - tau) * t[k];
    }
  };
  blend(q1, q1_target);
  blend(q2, q2_target);
}

Adam::Adam(std::span<const nd::Var> params, AdamConfig config) : config_(config) {
  if (!(config_.lr > 0.0)) throw std::invalid_argument("Adam: learning rate must be positive");
  for (const auto& p : params) {
    m_.emplace_back(p.shape(), 0.0);
    v_.emplace_back(p.shape(), 0.0);
  }
}

void Adam::step(std::span<const nd::Var> params, std::span<const nd::Array> grads) {
  if (params.size() != m_.size() || grads.size() != m_.size()) {
    throw std::invalid_argument("Adam::step: expected " + std::to_string(m_.size()) +
                                " parameters and gradients");
  }
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (grads[i].shape() != m_[i].shape()) throw nd::ShapeError("Adam::step", grads[i].shape(), m_[i].shape());
    if (!grads[i].all_finite()) {
      throw NumericError("Adam::step: non-finite gradient for parameter " + std::to_string(i) +
                         " at step " + std::to_string(t_ + 1));
    }
  }
  ++t_;
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < grads.size(); ++i) {
    nd::Array& w = nd::Var(params[i]).mutable_value();
    double* m = m_[i].data();
    double* v = v_[i].data();
    const double* g = grads[i].data();
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = b1 * m[k] + (1.0 - b1) * g[k];
      v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
      w[k] -= config_.lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + config_.eps);
    }
  }
}

void Adam::restore(std::size_t step_count, std::vector<nd::Array> m, std::vector<nd::Array> v) {
  if (m.size() != m_.size() || v.size() != v_.size()) {
    throw std::invalid_argument("Adam::restore: moment count mismatch");
  }
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (m[i].shape() != m_[i].shape() || v[i].shape() != v_[i].shape()) {
      throw nd::ShapeError("Adam::restore", m[i].shape(), m_[i].shape());
    }
  }
  t_ = step_count;
  m_ = std::move(m);
  v_ = std::move(v);
}

}  // namespace bracplus::nn
