// Copyright 2026 The bracplus Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "bracplus/ndgrad/var.hpp"
#include "bracplus/random.hpp"

namespace bracplus::dist {

/// Diagonal Gaussian over the last axis. `mean` and `log_std` share a shape,
/// usually [batch, dim]; log-densities, entropies and KLs reduce the last axis
/// and keep it as size 1.
struct DiagGaussian {
  nd::Var mean;
  nd::Var log_std;

  std::size_t dim() const { return mean.shape().back(); }
  nd::Var stddev() const { return nd::exp(log_std); }

  /// mean + std * noise; noise may carry extra leading axes (sample axis).
  nd::Var rsample(const nd::Array& noise) const;
  nd::Var log_prob(const nd::Var& x) const;
  nd::Var entropy() const;
};

/// KL(p || q) in closed form, summed over the last axis.
nd::Var kl_diag_gaussian(const DiagGaussian& p, const DiagGaussian& q);

/// N(0, I) with the given batch shape, as constants.
DiagGaussian standard_normal(const nd::Shape& shape);

struct ActionBounds {
  nd::Array low;   // [dim]
  nd::Array high;  // [dim]

  static ActionBounds symmetric(std::size_t dim, double limit = 1.0);
  std::size_t dim() const { return low.size(); }
};

/// Pre-squash sample `pre` and the bounded action it maps to.
struct SquashedSample {
  nd::Var pre;
  nd::Var action;
};

/// Gaussian pushed through a = mid + half * tanh(u), u ~ base.
struct TanhDiagGaussian {
  DiagGaussian base;
  ActionBounds bounds;

  static constexpr double kAtanhEpsilon = 1e-6;

  SquashedSample rsample(const nd::Array& noise) const;
  /// Deterministic action: squash of the base mean.
  nd::Var mode() const;
  nd::Var squash(const nd::Var& pre) const;

  /// Log-density of bounded actions. Throws std::domain_error if any action
  /// lies outside the closed bounds.
  nd::Var log_prob(const nd::Var& action) const;
  /// Log-density of squash(pre), written in terms of the pre-image.
  nd::Var log_prob_pre(const nd::Var& pre) const;

  /// Monte-Carlo entropy -mean log p(squash(u)); noise is [M, batch, dim]
  /// or [batch, dim] for a single draw.
  nd::Var entropy(const nd::Array& noise) const;
};

/// Pre-image of bounded actions, clamped to |tanh u| <= 1 - kAtanhEpsilon.
nd::Array to_pre_squash(const nd::Array& actions, const ActionBounds& bounds);
/// Throws std::domain_error when an action is outside the closed bounds.
void check_in_bounds(const nd::Array& actions, const ActionBounds& bounds);

/// Finite mixture of 1-D Gaussians. A single component is a plain Gaussian.
class GaussianMixture1D {
 public:
  GaussianMixture1D(std::vector<double> weights, std::vector<double> means,
                    std::vector<double> stds);
  static GaussianMixture1D gaussian(double mean, double stddev) {
    return GaussianMixture1D({1.0}, {mean}, {stddev});
  }

  double pdf(double x) const;
  double log_pdf(double x) const;
  double sample(Rng& rng) const;
  double mean() const;

  const std::vector<double>& weights() const { return weights_; }
  const std::vector<double>& means() const { return means_; }
  const std::vector<double>& stds() const { return stds_; }

 private:
  std::vector<double> weights_;
  std::vector<double> means_;
  std::vector<double> stds_;
};

}  // namespace bracplus::dist
