// Copyright 2026 The bracplus Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "bracplus/distributions.hpp"
#include "bracplus/ndgrad/var.hpp"
#include "bracplus/random.hpp"

namespace bracplus::divergence {

enum class KernelFamily { laplacian, gaussian };

/// laplacian: exp(-|x - y|_1 / h); gaussian: exp(-|x - y|_2^2 / (2 h^2)).
struct KernelSpec {
  KernelFamily family = KernelFamily::laplacian;
  double bandwidth = 1.0;

  double operator()(const double* x, const double* y, std::size_t dim) const;
  void validate() const;
};

KernelFamily parse_kernel_family(const std::string& name);
std::string to_string(KernelFamily family);

/// Unbiased (diagonal-excluded) estimate of MMD^2 between row samples
/// x [n, d] and y [m, d]. Needs at least two rows per side.
double mmd_squared(const nd::Array& x, const nd::Array& y, const KernelSpec& kernel);

/// Per-column U-statistic MMD^2 between sample sets x [n, batch, d] and
/// y [m, batch, d]; [batch, 1], differentiable in both arguments.
nd::Var mmd_squared(const nd::Var& x, const nd::Var& y, const KernelSpec& kernel);

struct McEstimate {
  double value = 0.0;
  double std_error = 0.0;
};

/// Mean of log p(x) - log q(x) over n draws x ~ p.
McEstimate mc_kl(const std::function<double(Rng&)>& p_sampler, const std::function<double(double)>& p_log_prob,
                 const std::function<double(double)>& q_log_prob, std::size_t n, Rng& rng);

/// Integral of f over the union of [b_i, b_{i+1}] for sorted breakpoints,
/// composite Simpson with `panels` panels per segment.
double integrate_piecewise(const std::function<double(double)>& f, std::vector<double> breakpoints,
                           int panels = 64);

/// KL(p || N(mu, sigma)) and KL(N(mu, sigma) || p) by quadrature.
double forward_kl(const dist::GaussianMixture1D& p, double mu, double sigma);
double backward_kl(const dist::GaussianMixture1D& p, double mu, double sigma);

struct SweepGrid {
  double x_min = -10.0;
  double x_max = 10.0;
  std::size_t points = 401;

  double at(std::size_t i) const;
  double cell() const { return (x_max - x_min) / static_cast<double>(points - 1); }
};

struct SweepConfig {
  KernelSpec kernel{};
  std::size_t mmd_samples = 1000;
  std::uint64_t seed = 0;
};

struct SweepRow {
  double x;
  double forward_kl;
  double backward_kl;
  double mmd_sq;
  double pi_b_density;
};

/// Divergences between pi_b and N(x, sigma) for every grid x. MMD uses
/// common random numbers: the same pi_b draws and the same standard-normal
/// draws (shifted to x) at every grid point.
std::vector<SweepRow> divergence_sweep(const dist::GaussianMixture1D& pi_b, double sigma, const SweepGrid& grid,
                                       const SweepConfig& config);

void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows);

struct Panel {
  std::string name;
  dist::GaussianMixture1D pi_b;
  double sigma;
};

/// The three landscape settings: "left" N(0, 1), "middle" the 0.3/0.7
/// mixture of N(-2, 0.3) and N(2, 0.5), "right" N(0, 0.001). Scales are
/// standard deviations; the policy width is 0.2 throughout.
Panel panel_preset(const std::string& name);

/// Index of the smallest value of `column` across rows.
std::size_t argmin(const std::vector<SweepRow>& rows, double SweepRow::*column);

}  // namespace bracplus::divergence
