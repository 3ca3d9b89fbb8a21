// Copyright 2026 The bracplus Authors
// SPDX-License-Identifier: Apache-2.0

#include "bracplus/divergences.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <ostream>
#include <stdexcept>

#include <fmt/format.h>

namespace bracplus::divergence {

double KernelSpec::operator()(const double* x, const double* y, std::size_t dim) const {
  double acc = 0.0;
  if (family == KernelFamily::laplacian) {
    for (std::size_t k = 0; k < dim; ++k) acc += std::abs(x[k] - y[k]);
    return std::exp(-acc / bandwidth);
  }
  for (std::size_t k = 0; k < dim; ++k) acc += (x[k] - y[k]) * (x[k] - y[k]);
  return std::exp(-acc / (2.0 * bandwidth * bandwidth));
}

void KernelSpec::validate() const {
  if (!(bandwidth > 0.0) || !std::isfinite(bandwidth)) {
    throw std::invalid_argument("kernel bandwidth must be positive, got " + std::to_string(bandwidth));
  }
}

KernelFamily parse_kernel_family(const std::string& name) {
  if (name == "laplacian") return KernelFamily::laplacian;
  if (name == "gaussian") return KernelFamily::gaussian;
  throw std::invalid_argument("unknown kernel family '" + name + "' (laplacian|gaussian)");
}

std::string to_string(KernelFamily family) {
  return family == KernelFamily::laplacian ? "laplacian" : "gaussian";
}

namespace {

double mean_offdiag(const nd::Array& x, const KernelSpec& k) {
  const std::size_t n = x.rows();
  const std::size_t d = x.cols();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) acc += k(x.data() + i * d, x.data() + j * d, d);
  }
  return 2.0 * acc / static_cast<double>(n * (n - 1));
}

double mean_cross(const nd::Array& x, const nd::Array& y, const KernelSpec& k) {
  const std::size_t d = x.cols();
  double acc = 0.0;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t j = 0; j < y.rows(); ++j) acc += k(x.data() + i * d, y.data() + j * d, d);
  }
  return acc / static_cast<double>(x.rows() * y.rows());
}

nd::Var kernel_sum(const nd::Var& a, const nd::Var& b, const KernelSpec& k) {
  // a [n, B, d], b [m, B, d] -> sum_{i,j} k(a_i, b_j) per column, [B].
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  const nd::Var diff = nd::reshape(a, {sa[0], 1, sa[1], sa[2]}) - nd::reshape(b, {1, sb[0], sb[1], sb[2]});
  nd::Var arg = k.family == KernelFamily::laplacian
                    ? nd::sum(nd::abs(diff), 3) * (-1.0 / k.bandwidth)
                    : nd::sum(nd::square(diff), 3) * (-0.5 / (k.bandwidth * k.bandwidth));
  return nd::sum(nd::sum(nd::exp(arg), 0), 0);
}

}  // namespace

double mmd_squared(const nd::Array& x, const nd::Array& y, const KernelSpec& kernel) {
  kernel.validate();
  if (x.rank() != 2 || y.rank() != 2 || x.cols() != y.cols()) throw nd::ShapeError("mmd_squared", x.shape(), y.shape());
  if (x.rows() < 2 || y.rows() < 2) throw std::invalid_argument("mmd_squared: need at least two samples per side");
  return mean_offdiag(x, kernel) - 2.0 * mean_cross(x, y, kernel) + mean_offdiag(y, kernel);
}

nd::Var mmd_squared(const nd::Var& x, const nd::Var& y, const KernelSpec& kernel) {
  kernel.validate();
  const auto& sx = x.shape();
  const auto& sy = y.shape();
  if (sx.size() != 3 || sy.size() != 3 || sx[1] != sy[1] || sx[2] != sy[2]) throw nd::ShapeError("mmd_squared", sx, sy);
  const double n = static_cast<double>(sx[0]);
  const double m = static_cast<double>(sy[0]);
  if (n < 2 || m < 2) throw std::invalid_argument("mmd_squared: need at least two samples per side");
  // k(x, x) = 1 for both families, so the excluded diagonal contributes exactly n.
  const nd::Var xx = (kernel_sum(x, x, kernel) - n) * (1.0 / (n * (n - 1)));
  const nd::Var yy = (kernel_sum(y, y, kernel) - m) * (1.0 / (m * (m - 1)));
  const nd::Var xy = kernel_sum(x, y, kernel) * (2.0 / (n * m));
  return nd::reshape(xx + yy - xy, {sx[1], 1});
}

McEstimate mc_kl(const std::function<double(Rng&)>& p_sampler, const std::function<double(double)>& p_log_prob,
                 const std::function<double(double)>& q_log_prob, std::size_t n, Rng& rng) {
  if (n == 0) throw std::invalid_argument("mc_kl: need at least one sample");
  double s1 = 0.0;
  double s2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = p_sampler(rng);
    const double v = p_log_prob(x) - q_log_prob(x);
    s1 += v;
    s2 += v * v;
  }
  const double mean = s1 / static_cast<double>(n);
  const double var = n > 1 ? std::max(0.0, (s2 - n * mean * mean) / static_cast<double>(n - 1)) : 0.0;
  return {mean, std::sqrt(var / static_cast<double>(n))};
}

double integrate_piecewise(const std::function<double(double)>& f, std::vector<double> breakpoints, int panels) {
  if (panels % 2) ++panels;
  std::sort(breakpoints.begin(), breakpoints.end());
  breakpoints.erase(std::unique(breakpoints.begin(), breakpoints.end()), breakpoints.end());
  double total = 0.0;
  for (std::size_t i = 0; i + 1 < breakpoints.size(); ++i) {
    const double a = breakpoints[i];
    const double b = breakpoints[i + 1];
    const double h = (b - a) / panels;
    double s = f(a) + f(b);
    for (int k = 1; k < panels; ++k) s += f(a + k * h) * (k % 2 ? 4.0 : 2.0);
    total += s * h / 3.0;
  }
  return total;
}

namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178;
constexpr double kTailWidths = 14.0;

double normal_log_pdf(double y, double mu, double sigma) {
  const double z = (y - mu) / sigma;
  return -0.5 * z * z - std::log(sigma) - kHalfLog2Pi;
}

// Breakpoints every standard deviation out to the tails around each centre.
void add_breaks(std::vector<double>& b, double mu, double sigma) {
  for (double k = -kTailWidths; k <= kTailWidths; k += 1.0) b.push_back(mu + k * sigma);
}

// Drops breakpoints outside the support window of the integrating density.
std::vector<double> clipped(std::vector<double> b, double lo, double hi) {
  std::erase_if(b, [&](double v) { return v < lo || v > hi; });
  b.push_back(lo);
  b.push_back(hi);
  return b;
}

}  // namespace

double forward_kl(const dist::GaussianMixture1D& p, double mu, double sigma) {
  std::vector<double> b;
  double lo = 1e300;
  double hi = -1e300;
  for (std::size_t k = 0; k < p.means().size(); ++k) {
    add_breaks(b, p.means()[k], p.stds()[k]);
    lo = std::min(lo, p.means()[k] - kTailWidths * p.stds()[k]);
    hi = std::max(hi, p.means()[k] + kTailWidths * p.stds()[k]);
  }
  add_breaks(b, mu, sigma);
  return integrate_piecewise(
      [&](double y) {
        const double lp = p.log_pdf(y);
        return std::exp(lp) * (lp - normal_log_pdf(y, mu, sigma));
      },
      clipped(std::move(b), lo, hi));
}

double backward_kl(const dist::GaussianMixture1D& p, double mu, double sigma) {
  std::vector<double> b;
  add_breaks(b, mu, sigma);
  for (std::size_t k = 0; k < p.means().size(); ++k) add_breaks(b, p.means()[k], p.stds()[k]);
  return integrate_piecewise(
      [&](double y) {
        const double lq = normal_log_pdf(y, mu, sigma);
        return std::exp(lq) * (lq - p.log_pdf(y));
      },
      clipped(std::move(b), mu - kTailWidths * sigma, mu + kTailWidths * sigma));
}

double SweepGrid::at(std::size_t i) const {
  return points == 1 ? x_min : x_min + (x_max - x_min) * static_cast<double>(i) / static_cast<double>(points - 1);
}

std::vector<SweepRow> divergence_sweep(const dist::GaussianMixture1D& pi_b, double sigma, const SweepGrid& grid,
                                       const SweepConfig& config) {
  config.kernel.validate();
  if (!(sigma > 0.0)) throw std::invalid_argument("divergence_sweep: sigma must be positive");
  if (grid.points < 2 || !(grid.x_max > grid.x_min)) throw std::invalid_argument("divergence_sweep: empty grid");
  const std::size_t n = config.mmd_samples;
  if (n < 2) throw std::invalid_argument("divergence_sweep: need at least two MMD samples");
  Rng rng(config.seed);
  nd::Array y({n, 1});
  for (auto& v : y.values()) v = pi_b.sample(rng);
  const nd::Array xi = rng.normal_array({n, 1});
  // Shift invariance: both same-set terms are the same at every grid point.
  nd::Array x0 = xi;
  for (auto& v : x0.values()) v *= sigma;
  const double same_set = mean_offdiag(x0, config.kernel) + mean_offdiag(y, config.kernel);

  std::vector<SweepRow> rows;
  rows.reserve(grid.points);
  nd::Array x({n, 1});
  for (std::size_t i = 0; i < grid.points; ++i) {
    const double mu = grid.at(i);
    for (std::size_t k = 0; k < n; ++k) x[k] = mu + x0[k];
    rows.push_back({mu, forward_kl(pi_b, mu, sigma), backward_kl(pi_b, mu, sigma),
                    same_set - 2.0 * mean_cross(x, y, config.kernel), pi_b.pdf(mu)});
  }
  return rows;
}

void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows) {
  os << "x,forward_kl,backward_kl,mmd_sq,pi_b_density\n";
  for (const auto& r : rows) {
    os << fmt::format("{:.6g},{:.10g},{:.10g},{:.10g},{:.10g}\n", r.x, r.forward_kl, r.backward_kl, r.mmd_sq,
                      r.pi_b_density);
  }
}

Panel panel_preset(const std::string& name) {
  if (name == "left") return {name, dist::GaussianMixture1D::gaussian(0.0, 1.0), 0.2};
  if (name == "middle") return {name, dist::GaussianMixture1D({0.3, 0.7}, {-2.0, 2.0}, {0.3, 0.5}), 0.2};
  if (name == "right") return {name, dist::GaussianMixture1D::gaussian(0.0, 0.001), 0.2};
  throw std::invalid_argument("unknown panel '" + name + "' (left|middle|right)");
}

std::size_t argmin(const std::vector<SweepRow>& rows, double SweepRow::*column) {
  if (rows.empty()) throw std::invalid_argument("argmin: no rows");
  return static_cast<std::size_t>(
      std::min_element(rows.begin(), rows.end(), [&](const auto& a, const auto& b) { return a.*column < b.*column; }) -
      rows.begin());
}

}  // namespace bracplus::divergence
