// Copyright 2026 The bracplus Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "bracplus/divergences.hpp"
#include "bracplus/ndgrad/autograd.hpp"
#include "support/oracles.hpp"

namespace nd = bracplus::nd;
namespace dv = bracplus::divergence;
namespace dist = bracplus::dist;
using bracplus::Rng;
using bracplus::testing::max_relative_error;
using bracplus::testing::normal_pdf;
using bracplus::testing::numeric_gradient;
using bracplus::testing::simpson;
using nd::Array;

namespace {

Array normal_samples(std::size_t n, double mu, double sigma, Rng& rng) {
  Array a({n, 1});
  for (auto& v : a.values()) v = rng.normal(mu, sigma);
  return a;
}

double phi(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

// E exp(-|Z| / h) for Z ~ N(m, v).
double laplace_mgf(double m, double v, double h) {
  const double s = std::sqrt(v);
  return std::exp(v / (2 * h * h)) *
         (std::exp(-m / h) * phi(m / s - s / h) + std::exp(m / h) * phi(-m / s - s / h));
}

// Population MMD^2 between N(x, sigma) and a mixture under the Laplacian kernel.
double population_mmd(const dist::GaussianMixture1D& p, double x, double sigma, double h) {
  const auto& w = p.weights();
  const auto& m = p.means();
  const auto& s = p.stds();
  double pp = 0.0;
  double pq = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    for (std::size_t j = 0; j < w.size(); ++j) pp += w[i] * w[j] * laplace_mgf(m[i] - m[j], s[i] * s[i] + s[j] * s[j], h);
    pq += w[i] * laplace_mgf(x - m[i], sigma * sigma + s[i] * s[i], h);
  }
  return laplace_mgf(0.0, 2 * sigma * sigma, h) - 2.0 * pq + pp;
}

// Entropy of a mixture by plain Simpson quadrature.
double mixture_entropy(const dist::GaussianMixture1D& p) {
  return simpson([&](double y) { return -p.pdf(y) * p.log_pdf(y); }, -15.0, 15.0, 200000);
}

}  // namespace

TEST(Mmd, IdenticalSetsGiveSmallNonPositive) {
  Rng rng(1);
  const Array x = normal_samples(300, 0.0, 1.0, rng);
  const double v = dv::mmd_squared(x, x, {});
  EXPECT_LE(v, 0.0);
  EXPECT_LT(std::abs(v), 2.0 / 300);
}

TEST(Mmd, SeparatedDistributionsDominateNoise) {
  Rng rng(2);
  const Array a = normal_samples(500, 0.0, 1.0, rng);
  const Array b = normal_samples(500, 0.0, 1.0, rng);
  const Array c = normal_samples(500, 5.0, 1.0, rng);
  const double same = std::abs(dv::mmd_squared(a, b, {}));
  const double apart = dv::mmd_squared(a, c, {});
  EXPECT_GT(apart, 0.0);
  EXPECT_GT(apart, 10.0 * same);
}

TEST(Mmd, SymmetricInArguments) {
  Rng rng(3);
  const Array a = rng.normal_array({50, 2});
  const Array b = rng.uniform_array({70, 2}, -1.0, 2.0);
  for (auto fam : {dv::KernelFamily::laplacian, dv::KernelFamily::gaussian}) {
    const dv::KernelSpec k{fam, 0.7};
    EXPECT_NEAR(dv::mmd_squared(a, b, k), dv::mmd_squared(b, a, k), 1e-14);
  }
}

TEST(Mmd, UnbiasedUnderEqualDistributions) {
  Rng rng(4);
  const int reps = 200;
  double s1 = 0.0;
  double s2 = 0.0;
  for (int r = 0; r < reps; ++r) {
    const double v = dv::mmd_squared(normal_samples(40, 0.0, 1.0, rng), normal_samples(40, 0.0, 1.0, rng), {});
    s1 += v;
    s2 += v * v;
  }
  const double mean = s1 / reps;
  const double se = std::sqrt((s2 / reps - mean * mean) / reps);
  EXPECT_LT(std::abs(mean), 3.0 * se);
}

TEST(Mmd, MatchesPopulationValue) {
  const auto p = dist::GaussianMixture1D({0.3, 0.7}, {-2.0, 2.0}, {0.3, 0.5});
  Rng rng(5);
  Array y({2000, 1});
  for (auto& v : y.values()) v = p.sample(rng);
  const Array x = normal_samples(2000, 0.5, 0.2, rng);
  EXPECT_NEAR(dv::mmd_squared(x, y, {}), population_mmd(p, 0.5, 0.2, 1.0), 0.01);
}

TEST(Mmd, RejectsTooFewSamplesAndBadBandwidth) {
  EXPECT_THROW(dv::mmd_squared(Array({1, 1}, 0.0), Array({3, 1}, 0.0), {}), std::invalid_argument);
  EXPECT_THROW(dv::mmd_squared(Array({3, 1}, 0.0), Array({3, 1}, 0.0), {dv::KernelFamily::gaussian, 0.0}),
               std::invalid_argument);
  EXPECT_THROW(dv::parse_kernel_family("cosine"), std::invalid_argument);
}

TEST(Mmd, BatchedMatchesPerColumn) {
  Rng rng(6);
  const Array x = rng.normal_array({5, 4, 2});
  const Array y = rng.normal_array({6, 4, 2});
  for (auto fam : {dv::KernelFamily::laplacian, dv::KernelFamily::gaussian}) {
    const dv::KernelSpec k{fam, 1.3};
    const Array batched = dv::mmd_squared(nd::constant(x), nd::constant(y), k).value();
    ASSERT_EQ(batched.shape(), (nd::Shape{4, 1}));
    for (std::size_t b = 0; b < 4; ++b) {
      Array xc({5, 2});
      Array yc({6, 2});
      for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t d = 0; d < 2; ++d) xc(i, d) = x[(i * 4 + b) * 2 + d];
      for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t d = 0; d < 2; ++d) yc(i, d) = y[(i * 4 + b) * 2 + d];
      EXPECT_NEAR(batched[b], dv::mmd_squared(xc, yc, k), 1e-13);
    }
  }
}

TEST(Mmd, BatchedGradientMatchesFiniteDifferences) {
  Rng rng(7);
  const Array x0 = rng.normal_array({5, 3, 2});
  const Array y = rng.normal_array({5, 3, 2});
  for (auto fam : {dv::KernelFamily::laplacian, dv::KernelFamily::gaussian}) {
    const dv::KernelSpec k{fam, 0.9};
    auto f = [&](const Array& x) { return nd::sum(dv::mmd_squared(nd::constant(x), nd::constant(y), k)).item(); };
    const nd::Var xv(x0, true);
    const Array g = nd::grad(nd::sum(dv::mmd_squared(xv, nd::constant(y), k)), xv).value();
    EXPECT_LT(max_relative_error(g, numeric_gradient(f, x0)), 1e-5);
  }
}

TEST(McKl, EqualDistributionsGiveZero) {
  Rng rng(8);
  auto lp = [](double x) { return std::log(normal_pdf(x, 0.3, 1.2)); };
  const auto est = dv::mc_kl([](Rng& r) { return r.normal(0.3, 1.2); }, lp, lp, 1000, rng);
  EXPECT_LE(std::abs(est.value), 3.0 / std::sqrt(1000.0));
}

TEST(McKl, UnitShiftIsHalf) {
  Rng rng(9);
  const auto est = dv::mc_kl([](Rng& r) { return r.normal(1.0, 1.0); },
                              [](double x) { return std::log(normal_pdf(x, 1.0, 1.0)); },
                              [](double x) { return std::log(normal_pdf(x, 0.0, 1.0)); }, 100000, rng);
  EXPECT_NEAR(est.value, 0.5, 0.02);
}

TEST(McKl, NotSignificantlyNegative) {
  Rng rng(10);
  for (int k = 0; k < 20; ++k) {
    const double m1 = rng.normal();
    const double s1 = rng.uniform(0.2, 2.0);
    const double m2 = rng.normal();
    const double s2 = rng.uniform(0.2, 2.0);
    const auto est = dv::mc_kl([&](Rng& r) { return r.normal(m1, s1); },
                                [&](double x) { return std::log(normal_pdf(x, m1, s1)); },
                                [&](double x) { return std::log(normal_pdf(x, m2, s2)); }, 2000, rng);
    EXPECT_GE(est.value, -3.0 * est.std_error);
  }
}

TEST(QuadratureKl, ValidatesClosedFormGaussianKl) {
  Rng rng(11);
  for (int k = 0; k < 100; ++k) {
    const double mp = rng.normal(0.0, 2.0);
    const double lp = rng.uniform(-2.0, 1.0);
    const double mq = rng.normal(0.0, 2.0);
    const double lq = rng.uniform(-2.0, 1.0);
    const dist::DiagGaussian p{nd::constant(Array({1, 1}, mp)), nd::constant(Array({1, 1}, lp))};
    const dist::DiagGaussian q{nd::constant(Array({1, 1}, mq)), nd::constant(Array({1, 1}, lq))};
    const auto gp = dist::GaussianMixture1D::gaussian(mp, std::exp(lp));
    const auto gq = dist::GaussianMixture1D::gaussian(mq, std::exp(lq));
    EXPECT_NEAR(dv::forward_kl(gp, mq, std::exp(lq)), dist::kl_diag_gaussian(p, q).item(), 1e-4);
    EXPECT_NEAR(dv::backward_kl(gq, mp, std::exp(lp)), dist::kl_diag_gaussian(p, q).item(), 1e-4);
  }
}

TEST(QuadratureKl, ForwardKlOfMixtureMatchesCrossEntropyIdentity) {
  const auto p = dv::panel_preset("middle").pi_b;
  const double h = mixture_entropy(p);
  for (double x : {-3.0, 0.0, 1.7, 4.0}) {
    const double sigma = 0.2;
    double second = 0.0;
    for (std::size_t k = 0; k < 2; ++k) {
      second += p.weights()[k] * (p.stds()[k] * p.stds()[k] + (p.means()[k] - x) * (p.means()[k] - x));
    }
    const double cross = std::log(sigma) + 0.5 * std::log(2 * std::numbers::pi) + second / (2 * sigma * sigma);
    EXPECT_NEAR(dv::forward_kl(p, x, sigma), cross - h, 1e-6 * std::max(1.0, cross));
  }
}

TEST(QuadratureKl, ForwardAndBackwardDisagreeOnMixture) {
  const auto p = dv::panel_preset("middle").pi_b;
  for (double x : {-2.0, -1.0, 0.0, 1.0, 2.0, 3.0}) {
    for (double s : {0.2, 0.5, 1.0, 2.0}) {
      EXPECT_GT(std::abs(dv::forward_kl(p, x, s) - dv::backward_kl(p, x, s)), 0.1) << x << " " << s;
    }
  }
}

TEST(Sweep, LeftPanelMinimizedAtZero) {
  const auto panel = dv::panel_preset("left");
  const dv::SweepGrid grid{};
  const auto rows = dv::divergence_sweep(panel.pi_b, panel.sigma, grid, {});
  ASSERT_EQ(rows.size(), grid.points);
  for (auto col : {&dv::SweepRow::forward_kl, &dv::SweepRow::backward_kl, &dv::SweepRow::mmd_sq}) {
    EXPECT_LE(std::abs(rows[dv::argmin(rows, col)].x), grid.cell() + 1e-12);
  }
}

TEST(Sweep, MiddlePanelBackwardKlSeeksModeAndMmdMatchesPopulation) {
  const auto panel = dv::panel_preset("middle");
  const auto rows = dv::divergence_sweep(panel.pi_b, panel.sigma, {}, {});
  const double xb = rows[dv::argmin(rows, &dv::SweepRow::backward_kl)].x;
  EXPECT_LT(std::min(std::abs(xb - 2.0), std::abs(xb + 2.0)), 0.3);
  // Population MMD by closed-form Gaussian integrals fixes the true minimizer.
  double best = 1e300;
  double x_pop = 0.0;
  for (const auto& r : rows) {
    const double v = population_mmd(panel.pi_b, r.x, panel.sigma, 1.0);
    // n = 1000 draws per side; the shared draws make the error coherent across x.
    EXPECT_NEAR(r.mmd_sq, v, 0.04) << "x=" << r.x;
    if (v < best) {
      best = v;
      x_pop = r.x;
    }
  }
  EXPECT_NEAR(rows[dv::argmin(rows, &dv::SweepRow::mmd_sq)].x, x_pop, 0.2);
}

TEST(Sweep, RightPanelBackwardKlRisesFastest) {
  const auto panel = dv::panel_preset("right");
  const dv::SweepGrid grid{};
  const auto rows = dv::divergence_sweep(panel.pi_b, panel.sigma, grid, {});
  for (auto col : {&dv::SweepRow::forward_kl, &dv::SweepRow::backward_kl, &dv::SweepRow::mmd_sq}) {
    EXPECT_LE(std::abs(rows[dv::argmin(rows, col)].x), grid.cell() + 1e-12);
  }
  const auto& at0 = rows[grid.points / 2];
  for (const auto& r : rows) {
    if (std::abs(r.x) < 0.5) continue;
    EXPECT_GT(r.backward_kl - at0.backward_kl, r.forward_kl - at0.forward_kl);
    EXPECT_GT(r.backward_kl - at0.backward_kl, r.mmd_sq - at0.mmd_sq);
  }
}

TEST(Sweep, CsvLayout) {
  const auto panel = dv::panel_preset("left");
  const auto rows = dv::divergence_sweep(panel.pi_b, panel.sigma, {-1.0, 1.0, 5}, {.mmd_samples = 50});
  std::ostringstream os;
  dv::write_sweep_csv(os, rows);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "x,forward_kl,backward_kl,mmd_sq,pi_b_density");
  int n = 0;
  while (std::getline(is, line)) ++n;
  EXPECT_EQ(n, 5);
}

TEST(Sweep, UnknownPanelRejected) { EXPECT_THROW(dv::panel_preset("top"), std::invalid_argument); }
