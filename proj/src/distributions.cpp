// Copyright 2026 The bracplus Authors
// SPDX-License-Identifier: Apache-2.0

#include "bracplus/distributions.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace bracplus::dist {

namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178;  // 0.5 * ln(2 pi)

std::size_t last_axis(const nd::Var& v) { return v.shape().size() - 1; }

nd::Array half_range(const ActionBounds& b) {
  nd::Array h(b.low.shape());
  for (std::size_t i = 0; i < h.size(); ++i) h[i] = 0.5 * (b.high[i] - b.low[i]);
  return h;
}

nd::Array mid_point(const ActionBounds& b) {
  nd::Array m(b.low.shape());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = 0.5 * (b.high[i] + b.low[i]);
  return m;
}

}  // namespace

nd::Var DiagGaussian::rsample(const nd::Array& noise) const {
  return mean + stddev() * nd::constant(noise);
}

nd::Var DiagGaussian::log_prob(const nd::Var& x) const {
  const nd::Var z = (x - mean) * nd::exp(-log_std);
  const nd::Var per_dim = nd::square(z) * -0.5 - log_std - kHalfLog2Pi;
  return nd::sum(per_dim, last_axis(per_dim), true);
}

nd::Var DiagGaussian::entropy() const {
  const double c = 0.5 * std::log(2.0 * std::numbers::pi * std::numbers::e);
  return nd::sum(log_std + c, last_axis(log_std), true);
}

nd::Var kl_diag_gaussian(const DiagGaussian& p, const DiagGaussian& q) {
  if (p.mean.shape().back() != q.mean.shape().back()) {
    throw nd::ShapeError("kl_diag_gaussian", p.mean.shape(), q.mean.shape());
  }
  const nd::Var inv_var_q = nd::exp(q.log_std * -2.0);
  const nd::Var var_p = nd::exp(p.log_std * 2.0);
  const nd::Var per_dim =
      q.log_std - p.log_std + (var_p + nd::square(p.mean - q.mean)) * inv_var_q * 0.5 - 0.5;
  return nd::sum(per_dim, last_axis(per_dim), true);
}

DiagGaussian standard_normal(const nd::Shape& shape) {
  return {nd::constant(nd::Array(shape, 0.0)), nd::constant(nd::Array(shape, 0.0))};
}

ActionBounds ActionBounds::symmetric(std::size_t dim, double limit) {
  return {nd::Array(nd::Shape{dim}, -limit), nd::Array(nd::Shape{dim}, limit)};
}

nd::Var TanhDiagGaussian::squash(const nd::Var& pre) const {
  return nd::tanh(pre) * nd::constant(half_range(bounds)) + nd::constant(mid_point(bounds));
}

SquashedSample TanhDiagGaussian::rsample(const nd::Array& noise) const {
  nd::Var pre = base.rsample(noise);
  return {pre, squash(pre)};
}

nd::Var TanhDiagGaussian::mode() const { return squash(base.mean); }

nd::Var TanhDiagGaussian::log_prob_pre(const nd::Var& pre) const {
  // log(1 - tanh(u)^2) = 2 (ln 2 - u - softplus(-2u)), stable for large |u|.
  const nd::Var log_jac = (nd::constant(std::numbers::ln2) - pre - nd::softplus(pre * -2.0)) * 2.0;
  nd::Array log_half = half_range(bounds);
  for (auto& v : log_half.values()) v = std::log(v);
  const nd::Var correction = log_jac + nd::constant(log_half);
  return base.log_prob(pre) - nd::sum(correction, last_axis(correction), true);
}

nd::Var TanhDiagGaussian::log_prob(const nd::Var& action) const {
  check_in_bounds(action.value(), bounds);
  // Pre-image of a constant action is itself constant; gradients flow through the base.
  return log_prob_pre(nd::constant(to_pre_squash(action.value(), bounds)));
}

nd::Var TanhDiagGaussian::entropy(const nd::Array& noise) const {
  const nd::Var lp = log_prob_pre(base.rsample(noise));
  if (lp.shape().size() == base.mean.shape().size()) return -lp;
  return -nd::mean(lp, 0);
}

void check_in_bounds(const nd::Array& actions, const ActionBounds& bounds) {
  const std::size_t d = bounds.dim();
  if (actions.shape().empty() || actions.shape().back() != d) {
    throw nd::ShapeError("action bounds", actions.shape(), bounds.low.shape());
  }
  for (std::size_t i = 0; i < actions.size(); ++i) {
    const std::size_t k = i % d;
    if (!(actions[i] >= bounds.low[k] && actions[i] <= bounds.high[k])) {
      throw std::domain_error("action " + std::to_string(actions[i]) + " outside bounds [" +
                              std::to_string(bounds.low[k]) + ", " +
                              std::to_string(bounds.high[k]) + "]");
    }
  }
}

nd::Array to_pre_squash(const nd::Array& actions, const ActionBounds& bounds) {
  const std::size_t d = bounds.dim();
  nd::Array pre(actions.shape());
  constexpr double lim = 1.0 - TanhDiagGaussian::kAtanhEpsilon;
  for (std::size_t i = 0; i < actions.size(); ++i) {
    const std::size_t k = i % d;
    const double half = 0.5 * (bounds.high[k] - bounds.low[k]);
    const double mid = 0.5 * (bounds.high[k] + bounds.low[k]);
    pre[i] = std::atanh(std::clamp((actions[i] - mid) / half, -lim, lim));
  }
  return pre;
}

GaussianMixture1D::GaussianMixture1D(std::vector<double> weights, std::vector<double> means,
                                     std::vector<double> stds)
    : weights_(std::move(weights)), means_(std::move(means)), stds_(std::move(stds)) {
  if (weights_.empty() || weights_.size() != means_.size() || means_.size() != stds_.size()) {
    throw std::invalid_argument("GaussianMixture1D: component arrays must be non-empty and equal");
  }
  const double total = std::accumulate(weights_.begin(), weights_.end(), 0.0);
  if (std::abs(total - 1.0) > 1e-12 ||
      std::any_of(weights_.begin(), weights_.end(), [](double w) { return w < 0.0; })) {
    throw std::invalid_argument("GaussianMixture1D: weights must lie on the simplex");
  }
  if (std::any_of(stds_.begin(), stds_.end(), [](double s) { return !(s > 0.0); })) {
    throw std::invalid_argument("GaussianMixture1D: stds must be positive");
  }
}

double GaussianMixture1D::log_pdf(double x) const {
  double best = -std::numeric_limits<double>::infinity();
  std::vector<double> terms(weights_.size());
  for (std::size_t k = 0; k < weights_.size(); ++k) {
    const double z = (x - means_[k]) / stds_[k];
    terms[k] = std::log(weights_[k]) - 0.5 * z * z - std::log(stds_[k]) - kHalfLog2Pi;
    best = std::max(best, terms[k]);
  }
  if (!std::isfinite(best)) return best;
  double acc = 0.0;
  for (double t : terms) acc += std::exp(t - best);
  return best + std::log(acc);
}

double GaussianMixture1D::pdf(double x) const { return std::exp(log_pdf(x)); }

double GaussianMixture1D::sample(Rng& rng) const {
  double u = rng.uniform();
  std::size_t k = 0;
  while (k + 1 < weights_.size() && u >= weights_[k]) u -= weights_[k++];
  return rng.normal(means_[k], stds_[k]);
}

double GaussianMixture1D::mean() const {
  double m = 0.0;
  for (std::size_t k = 0; k < weights_.size(); ++k) m += weights_[k] * means_[k];
  return m;
}

}  // namespace bracplus::dist
