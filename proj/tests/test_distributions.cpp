// Copyright 2026 The bracplus Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "bracplus/distributions.hpp"
#include "bracplus/ndgrad/autograd.hpp"
#include "support/oracles.hpp"

namespace nd = bracplus::nd;
namespace dist = bracplus::dist;
using bracplus::Rng;
using bracplus::testing::max_relative_error;
using bracplus::testing::normal_pdf;
using bracplus::testing::numeric_gradient;
using bracplus::testing::simpson;
using nd::Array;
using nd::Var;

namespace {

dist::DiagGaussian gaussian(double mu, double log_sigma) {
  return {nd::constant(Array::matrix(1, 1, {mu})), nd::constant(Array::matrix(1, 1, {log_sigma}))};
}

dist::TanhDiagGaussian tanh_gaussian(double mu, double log_sigma) {
  return {gaussian(mu, log_sigma), dist::ActionBounds::symmetric(1)};
}

// Column of grid points x_i = a + i (b - a) / n.
Array grid(double a, double b, int n) {
  Array g({static_cast<std::size_t>(n + 1), 1});
  for (int i = 0; i <= n; ++i) g[i] = a + (b - a) * i / n;
  return g;
}

// Simpson weights applied to precomputed values on `grid(a, b, n)`.
double simpson_values(const Array& f, double a, double b) {
  const std::size_t n = f.size() - 1;
  const double h = (b - a) / static_cast<double>(n);
  double s = f[0] + f[n];
  for (std::size_t i = 1; i < n; ++i) s += f[i] * (i % 2 ? 4.0 : 2.0);
  return s * h / 3.0;
}

}  // namespace

TEST(DiagGaussian, ZeroNoiseSampleIsMean) {
  auto g = gaussian(0.7, -0.3);
  EXPECT_DOUBLE_EQ(g.rsample(Array::matrix(1, 1, {0.0})).item(), 0.7);
}

TEST(TanhDiagGaussian, ZeroNoiseAtZeroMeanIsZero) {
  auto t = tanh_gaussian(0.0, 0.0);
  EXPECT_DOUBLE_EQ(t.rsample(Array::matrix(1, 1, {0.0})).action.item(), 0.0);
}

TEST(TanhDiagGaussian, SampleGradientWrtLogStdMatchesFiniteDifferences) {
  const Array mean = Array::matrix(2, 3, {0.1, -0.4, 0.9, 0.0, 0.3, -1.2});
  const Array log_std0 = Array::matrix(2, 3, {-0.5, 0.2, -1.0, 0.4, -0.1, 0.0});
  const Array noise = Array::matrix(2, 3, {0.3, -1.1, 0.7, 1.5, -0.2, 0.05});
  auto f = [&](const Array& ls) {
    dist::TanhDiagGaussian t{{nd::constant(mean), nd::constant(ls)}, dist::ActionBounds::symmetric(3, 2.0)};
    return nd::sum(t.rsample(noise).action).item();
  };
  Var ls(log_std0, true);
  dist::TanhDiagGaussian t{{nd::constant(mean), ls}, dist::ActionBounds::symmetric(3, 2.0)};
  const Array analytic = nd::grad(nd::sum(t.rsample(noise).action), ls).value();
  EXPECT_LT(max_relative_error(analytic, numeric_gradient(f, log_std0)), 1e-5);
}

TEST(DiagGaussian, StandardNormalLogDensityAtZero) {
  EXPECT_NEAR(gaussian(0.0, 0.0).log_prob(nd::constant(Array::matrix(1, 1, {0.0}))).item(),
              -0.5 * std::log(2.0 * std::numbers::pi), 1e-15);
}

TEST(DiagGaussian, LogDensitySumsOverDimensions) {
  dist::DiagGaussian g{nd::constant(Array::matrix(1, 2, {0.5, -1.0})),
                       nd::constant(Array::matrix(1, 2, {0.2, -0.7}))};
  const double lp = g.log_prob(nd::constant(Array::matrix(1, 2, {0.1, 0.3}))).item();
  const double expected = std::log(normal_pdf(0.1, 0.5, std::exp(0.2))) +
                          std::log(normal_pdf(0.3, -1.0, std::exp(-0.7)));
  EXPECT_NEAR(lp, expected, 1e-12);
}

TEST(GaussianMixture1D, LogDensityMatchesDirectEvaluation) {
  dist::GaussianMixture1D m({0.3, 0.7}, {-2.0, 2.0}, {0.3, 0.5});
  const double expected = std::log(0.3 * normal_pdf(2.0, -2.0, 0.3) + 0.7 * normal_pdf(2.0, 2.0, 0.5));
  EXPECT_NEAR(m.log_pdf(2.0), expected, 1e-12);
  // Far tail stays finite through log-sum-exp.
  EXPECT_TRUE(std::isfinite(m.log_pdf(60.0)));
}

TEST(GaussianMixture1D, DensityIntegratesToOne) {
  dist::GaussianMixture1D m({0.3, 0.7}, {-2.0, 2.0}, {0.3, 0.5});
  EXPECT_NEAR(simpson([&](double x) { return m.pdf(x); }, -10.0, 10.0, 20000), 1.0, 1e-3);
}

TEST(GaussianMixture1D, RejectsInvalidParameters) {
  EXPECT_THROW(dist::GaussianMixture1D({0.5, 0.6}, {0.0, 1.0}, {1.0, 1.0}), std::invalid_argument);
  EXPECT_THROW(dist::GaussianMixture1D({0.5, 0.5}, {0.0, 1.0}, {1.0, 0.0}), std::invalid_argument);
  EXPECT_THROW(dist::GaussianMixture1D({1.0}, {0.0, 1.0}, {1.0}), std::invalid_argument);
}

TEST(GaussianMixture1D, SampleMeanMatchesMixtureMean) {
  dist::GaussianMixture1D m({0.3, 0.7}, {-2.0, 2.0}, {0.3, 0.5});
  Rng rng(11);
  const int n = 100000;
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += m.sample(rng);
  // Var = E[x^2] - mean^2 = 0.3*(4.09) + 0.7*(4.25) - 0.8^2
  const double sd = std::sqrt(0.3 * 4.09 + 0.7 * 4.25 - 0.64);
  EXPECT_NEAR(s / n, m.mean(), 4.0 * sd / std::sqrt(n));
}

TEST(TanhDiagGaussian, DensityIntegratesToOne) {
  auto t = tanh_gaussian(0.3, std::log(0.5));
  const int n = 20000;
  const Array a = grid(-1.0, 1.0, n);
  const Array lp = t.log_prob(nd::constant(a)).value();
  Array p = lp;
  for (auto& v : p.values()) v = std::exp(v);
  EXPECT_NEAR(simpson_values(p, -1.0, 1.0), 1.0, 1e-3);
}

TEST(TanhDiagGaussian, ScaledBoundsDensityIntegratesToOne) {
  dist::TanhDiagGaussian t{gaussian(-0.2, std::log(0.8)), {Array::vector({-3.0}), Array::vector({1.0})}};
  const Array a = grid(-3.0, 1.0, 20000);
  Array p = t.log_prob(nd::constant(a)).value();
  for (auto& v : p.values()) v = std::exp(v);
  EXPECT_NEAR(simpson_values(p, -3.0, 1.0), 1.0, 1e-3);
}

TEST(TanhDiagGaussian, LogProbRejectsOutOfBoundsAction) {
  auto t = tanh_gaussian(0.0, 0.0);
  EXPECT_THROW(t.log_prob(nd::constant(Array::matrix(1, 1, {1.0001}))), std::domain_error);
  EXPECT_NO_THROW(t.log_prob(nd::constant(Array::matrix(1, 1, {1.0}))));
}

TEST(TanhDiagGaussian, LogProbFiniteOnSamples) {
  Rng rng(5);
  dist::TanhDiagGaussian t{{nd::constant(Array({1000, 2}, 3.0)), nd::constant(Array({1000, 2}, 1.5))},
                           dist::ActionBounds::symmetric(2)};
  const auto s = t.rsample(rng.normal_array({1000, 2}));
  EXPECT_TRUE(t.log_prob_pre(s.pre).value().all_finite());
  EXPECT_TRUE(t.log_prob(s.action).value().all_finite());
}

TEST(KlDiagGaussian, IdenticalIsZero) {
  EXPECT_NEAR(dist::kl_diag_gaussian(gaussian(0, 0), gaussian(0, 0)).item(), 0.0, 1e-15);
}

TEST(KlDiagGaussian, UnitShiftMatchesIntegration) {
  const double closed = dist::kl_diag_gaussian(gaussian(1, 0), gaussian(0, 0)).item();
  EXPECT_NEAR(closed, 0.5, 1e-14);
  const double integrated = simpson(
      [](double x) {
        const double p = normal_pdf(x, 1, 1);
        return p * (std::log(p) - std::log(normal_pdf(x, 0, 1)));
      },
      -12.0, 14.0, 20000);
  EXPECT_NEAR(closed, integrated, 1e-8);
}

TEST(KlDiagGaussian, GeneralCaseMatchesIntegration) {
  const double closed = dist::kl_diag_gaussian(gaussian(0.4, -0.6), gaussian(-0.3, 0.2)).item();
  const double sp = std::exp(-0.6);
  const double sq = std::exp(0.2);
  const double integrated = simpson(
      [&](double x) {
        const double p = normal_pdf(x, 0.4, sp);
        return p * (std::log(p) - std::log(normal_pdf(x, -0.3, sq)));
      },
      -10.0, 10.0, 20000);
  EXPECT_NEAR(closed, integrated, 1e-8);
}

TEST(KlDiagGaussian, NonNegativeOnRandomDraws) {
  Rng rng(17);
  const Array mp = rng.normal_array({1000, 3});
  const Array lp = rng.uniform_array({1000, 3}, -2.0, 2.0);
  const Array mq = rng.normal_array({1000, 3});
  const Array lq = rng.uniform_array({1000, 3}, -2.0, 2.0);
  const Array kl = dist::kl_diag_gaussian({nd::constant(mp), nd::constant(lp)},
                                          {nd::constant(mq), nd::constant(lq)})
                       .value();
  EXPECT_EQ(kl.shape(), (nd::Shape{1000, 1}));
  for (double v : kl.values()) EXPECT_GE(v, 0.0);
}

TEST(DiagGaussian, StandardNormalEntropy) {
  EXPECT_NEAR(gaussian(0, 0).entropy().item(), 0.5 * std::log(2 * std::numbers::pi * std::numbers::e),
              1e-15);
}

TEST(DiagGaussian, EntropyIgnoresMean) {
  EXPECT_DOUBLE_EQ(gaussian(-3.0, 0.4).entropy().item(), gaussian(5.0, 0.4).entropy().item());
}

TEST(TanhDiagGaussian, MonteCarloEntropyMatchesIntegration) {
  const double mu = 0.4;
  const double sigma = 0.8;
  const double integrated = simpson(
      [&](double u) {
        const double p = normal_pdf(u, mu, sigma);
        const double th = std::tanh(u);
        return -p * (std::log(p) - std::log(1.0 - th * th));
      },
      mu - 12 * sigma, mu + 12 * sigma, 20000);
  Rng rng(23);
  const double mc = tanh_gaussian(mu, std::log(sigma)).entropy(rng.normal_array({100000, 1, 1})).item();
  EXPECT_LT(std::abs(mc - integrated), 0.01);
}

TEST(TanhDiagGaussian, KlInvariantUnderSharedSquashing) {
  auto p = tanh_gaussian(0.5, std::log(0.6));
  auto q = tanh_gaussian(-0.2, std::log(0.9));
  const double closed = dist::kl_diag_gaussian(p.base, q.base).item();
  Rng rng(29);
  const int n = 100000;
  const auto s = p.rsample(rng.normal_array({static_cast<std::size_t>(n), 1}));
  const Array diff = (p.log_prob(s.action) - q.log_prob(s.action)).value();
  double m = 0.0;
  double m2 = 0.0;
  for (double v : diff.values()) {
    m += v;
    m2 += v * v;
  }
  m /= n;
  const double se = std::sqrt((m2 / n - m * m) / n);
  EXPECT_LT(std::abs(m - closed), 3.0 * se);
}

TEST(DiagGaussian, ReparameterizedSampleMeanMatches) {
  Rng rng(31);
  const std::size_t n = 100000;
  dist::DiagGaussian g{nd::constant(Array({n, 1}, 1.3)), nd::constant(Array({n, 1}, std::log(2.0)))};
  const double mean = nd::mean(g.rsample(rng.normal_array({n, 1}))).item();
  EXPECT_LT(std::abs(mean - 1.3), 4.0 * 2.0 / std::sqrt(static_cast<double>(n)));
}
