// Copyright 2026 The bracplus Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>

#include "bracplus/behavior_model.hpp"
#include "bracplus/errors.hpp"
#include "support/oracles.hpp"

namespace nd = bracplus::nd;
namespace nn = bracplus::nn;
namespace bm = bracplus::bm;
namespace dist = bracplus::dist;
using bracplus::Rng;
using bracplus::testing::normal_pdf;
using bracplus::testing::simpson;
using nd::Array;
using nd::Var;

namespace {

constexpr double kSlope = 0.5;
constexpr double kNoise = 0.2;

// s ~ U(-1, 1)^2, pre-squash action u ~ N(kSlope * s0, kNoise).
struct ToyData {
  Array states;
  Array pre;
};

ToyData linear_gaussian_data(std::size_t n, Rng& rng) {
  ToyData d{rng.uniform_array({n, 2}, -1.0, 1.0), Array({n, 1})};
  for (std::size_t i = 0; i < n; ++i) d.pre[i] = kSlope * d.states(i, 0) + rng.normal(0.0, kNoise);
  return d;
}

// Single-state bimodal data drawn from a two-component mixture.
ToyData mixture_data(const dist::GaussianMixture1D& mix, std::size_t n, Rng& rng) {
  ToyData d{Array({n, 1}, 0.0), Array({n, 1})};
  for (std::size_t i = 0; i < n; ++i) d.pre[i] = mix.sample(rng);
  return d;
}

// Draws u ~ p(u|s) by ancestral sampling through the prior and decoder.
Array sample_model(const bm::CvaeModel& m, const Array& s_row, std::size_t n, Rng& rng) {
  nd::NoGradGuard g;
  const auto dec = m.decode(nd::constant(nd::tile_rows(s_row, n)), nd::constant(rng.normal_array({n, m.latent_dim()})));
  return dec.rsample(rng.normal_array({n, m.action_dim()})).value();
}

// Output-bias-only network emitting `bias` for any input.
nn::Mlp bias_net(std::size_t in, const std::vector<double>& bias) {
  nn::Mlp m = nn::Mlp::zeros({in, 4, bias.size()});
  Var(m.layers().back().bias).mutable_value() = Array({1, bias.size()}, bias);
  return m;
}

double mean_of(const Array& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  return s / static_cast<double>(a.size());
}

// log p(u|s) for a one-dimensional latent by quadrature over z.
double quadrature_log_likelihood(const bm::CvaeModel& m, const Array& s_row, double u) {
  nd::NoGradGuard g;
  const int n = 4000;
  const double lo = -9.0;
  const double hi = 9.0;
  Array z({static_cast<std::size_t>(n + 1), 1});
  for (int i = 0; i <= n; ++i) z[i] = lo + (hi - lo) * i / n;
  const auto dec = m.decode(nd::constant(nd::tile_rows(s_row, n + 1)), nd::constant(z));
  const Array lp = dec.log_prob(nd::constant(Array({static_cast<std::size_t>(n + 1), 1}, u))).value();
  const double h = (hi - lo) / n;
  double acc = 0.0;
  for (int i = 0; i <= n; ++i) {
    const double w = (i == 0 || i == n) ? 1.0 : (i % 2 ? 4.0 : 2.0);
    acc += w * std::exp(lp[i]) * normal_pdf(z[i], 0.0, 1.0);
  }
  return std::log(acc * h / 3.0);
}

struct Trained {
  bm::CvaeEnsemble ensemble;
  bm::PretrainReport report;
  ToyData data;
};

const Trained& trained_linear() {
  static const Trained t = [] {
    Rng rng(100);
    Trained t;
    t.data = linear_gaussian_data(5000, rng);
    bm::CvaeConfig cfg{.hidden = 32};
    t.ensemble = bm::CvaeEnsemble(2, 1, cfg, 3, rng);
    t.report = bm::pretrain(t.ensemble, t.data.states, t.data.pre, 3000, cfg, rng);
    return t;
  }();
  return t;
}

const bm::CvaeModel& trained_mixture() {
  static const bm::CvaeModel m = [] {
    const dist::GaussianMixture1D mix({0.3, 0.7}, {-2.0, 2.0}, {0.3, 0.5});
    Rng rng(5);
    const ToyData d = mixture_data(mix, 5000, rng);
    bm::CvaeConfig cfg{.hidden = 32};
    bm::CvaeEnsemble ens(1, 1, cfg, 1, rng);
    bm::pretrain(ens, d.states, d.pre, 3000, cfg, rng);
    return ens.members[0];
  }();
  return m;
}

}  // namespace

TEST(Cvae, CollapsedPosteriorElbo) {
  // Encoder emits the prior; decoder ignores z and emits N(a, 1).
  const double a = 0.37;
  bm::CvaeModel m(bias_net(3, {0.0, 0.0, 0.0, 0.0}), bias_net(4, {a, 0.0}), 2, 1);
  Rng rng(1);
  const Var elbo = m.elbo(nd::constant(Array({5, 2}, 0.4)), nd::constant(Array({5, 1}, a)), rng.normal_array({5, 2}));
  for (double v : elbo.value().values()) EXPECT_NEAR(v, -0.5 * std::log(2.0 * std::numbers::pi), 1e-12);
}

TEST(Cvae, ShapesAndLatentDefault) {
  Rng rng(2);
  bm::CvaeModel m(3, 2, {}, rng);
  EXPECT_EQ(m.latent_dim(), 4u);
  EXPECT_EQ(m.encoder().input_dim(), 5u);
  EXPECT_EQ(m.decoder().input_dim(), 7u);
  EXPECT_EQ(m.decoder().output_dim(), 4u);
  EXPECT_THROW(bm::CvaeModel(bias_net(3, {0, 0}), bias_net(4, {0, 0}), 2, 2), std::invalid_argument);
}

TEST(Cvae, ElboBelowImportanceWeightedAndQuadratureLikelihood) {
  Rng rng(3);
  bm::CvaeModel m(2, 1, {.hidden = 16, .latent_dim = 1}, rng);
  const Array s = Array::matrix(1, 2, {0.3, -0.6});
  const double u = 0.25;
  const double exact = quadrature_log_likelihood(m, s, u);

  const std::size_t n = 20000;
  const Array elbo =
      m.elbo(nd::constant(nd::tile_rows(s, n)), nd::constant(Array({n, 1}, u)), rng.normal_array({n, 1})).value();
  double mean = 0.0;
  double sq = 0.0;
  for (double v : elbo.values()) {
    mean += v;
    sq += v * v;
  }
  mean /= n;
  const double se = std::sqrt((sq / n - mean * mean) / n);

  const double iw = m.log_likelihood(s, Array::matrix(1, 1, {u}), 1000, rng)[0];
  EXPECT_LE(mean, iw + 3.0 * se);
  EXPECT_LE(mean, exact + 3.0 * se);
  EXPECT_NEAR(iw, exact, 0.02);
}

TEST(Cvae, PretrainingElboIncreases) {
  const auto& hist = trained_linear().report.elbo;
  ASSERT_EQ(hist.size(), 3u);
  for (const auto& h : hist) {
    ASSERT_EQ(h.size(), 3000u);
    // 100-step block means. A block may sit below its predecessor only by
    // sampling noise or the plateau wander of the optimizer near convergence.
    constexpr double kPlateau = 0.05;
    double first = 0.0;
    double prev = -1e300;
    double last = 0.0;
    for (std::size_t b = 0; b + 100 <= h.size(); b += 100) {
      double s1 = 0.0;
      double s2 = 0.0;
      for (std::size_t i = b; i < b + 100; ++i) {
        s1 += h[i];
        s2 += h[i] * h[i];
      }
      const double mean = s1 / 100.0;
      const double se = std::sqrt(std::max(0.0, s2 / 100.0 - mean * mean) / 100.0);
      if (b == 0) first = mean;
      EXPECT_GE(mean, prev - std::max(3.0 * se, kPlateau)) << "block at step " << b;
      prev = mean;
      last = mean;
    }
    EXPECT_GT(last, first + 0.2);
  }
}

TEST(Cvae, RecoversConditionalMean) {
  const auto& t = trained_linear();
  Rng rng(4);
  const Array s = Array::matrix(1, 2, {0.6, -0.2});
  for (const auto& m : t.ensemble.members) {
    EXPECT_NEAR(mean_of(sample_model(m, s, 20000, rng)), kSlope * 0.6, 0.05);
  }
}

TEST(Cvae, LearnsBimodalMixture) {
  Rng rng(5);
  const Array u = sample_model(trained_mixture(), Array::matrix(1, 1, {0.0}), 10000, rng);
  const auto left = std::count_if(u.values().begin(), u.values().end(), [](double v) { return v < 0.0; });
  EXPECT_GT(left, 1000);
  EXPECT_GT(10000 - left, 1000);
}

TEST(Cvae, PretrainRejectsEmptyDataset) {
  Rng rng(6);
  bm::CvaeEnsemble ens(2, 1, {}, 1, rng);
  EXPECT_THROW(bm::pretrain(ens, Array({0, 2}), Array({0, 1}), 10, {}, rng), std::invalid_argument);
}

TEST(Cvae, PretrainAbortsOnNonFiniteData) {
  Rng rng(7);
  bm::CvaeEnsemble ens(2, 1, {}, 1, rng);
  Array s({4, 2}, 0.0);
  Array u({4, 1}, std::nan(""));
  EXPECT_THROW(bm::pretrain(ens, s, u, 10, {}, rng), bracplus::NumericError);
}

TEST(KlUpperBound, VanishesWhenDecoderIsPolicyAndEncoderIsPrior) {
  const double mu = -0.4;
  const double ls = -0.7;
  bm::CvaeModel m(bias_net(3, {0.0, 0.0, 0.0, 0.0}), bias_net(4, {mu, ls}), 2, 1);
  dist::DiagGaussian pi{nd::constant(Array({6, 1}, mu)), nd::constant(Array({6, 1}, ls))};
  Rng rng(8);
  const Array b = bm::kl_upper_bound(m, pi, nd::constant(Array({6, 2}, 0.1)), rng.normal_array({6, 1}),
                                     rng.normal_array({6, 2}))
                      .value();
  for (double v : b.values()) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(KlUpperBound, NonNegative) {
  Rng rng(9);
  bm::CvaeModel m(3, 2, {.hidden = 16}, rng);
  dist::DiagGaussian pi{nd::constant(rng.normal_array({500, 2})),
                        nd::constant(rng.uniform_array({500, 2}, -3.0, 1.0))};
  const Array b = bm::kl_upper_bound(m, pi, nd::constant(rng.normal_array({500, 3})), rng.normal_array({500, 2}),
                                     rng.normal_array({500, 4}))
                      .value();
  for (double v : b.values()) EXPECT_GE(v, 0.0);
}

namespace {

struct BoundAndKl {
  double bound;
  double bound_se;
  double kl;
  double kl_se;
};

// Averages the bound over `n` noise draws and estimates KL(pi || p_b) by
// sampling u ~ pi and importance-weighted log p_b(u|s).
BoundAndKl bound_vs_kl(const bm::CvaeModel& m, const Array& s, double mu, double log_sigma, std::size_t n,
                       Rng& rng) {
  const Array s_rep = nd::tile_rows(s, n);
  dist::DiagGaussian pi{nd::constant(Array({n, 1}, mu)), nd::constant(Array({n, 1}, log_sigma))};
  const Array b = bm::kl_upper_bound(m, pi, nd::constant(s_rep), rng.normal_array({n, 1}),
                                     rng.normal_array({n, m.latent_dim()}))
                      .value();
  Array u({n, 1});
  for (std::size_t i = 0; i < n; ++i) u[i] = rng.normal(mu, std::exp(log_sigma));
  const Array log_b = m.log_likelihood(s_rep, u, 300, rng);
  Array diff({n});
  for (std::size_t i = 0; i < n; ++i) {
    diff[i] = std::log(normal_pdf(u[i], mu, std::exp(log_sigma))) - log_b[i];
  }
  auto stats = [n](const Array& a, double& mean, double& se) {
    double s1 = 0.0;
    double s2 = 0.0;
    for (double v : a.values()) {
      s1 += v;
      s2 += v * v;
    }
    mean = s1 / n;
    se = std::sqrt(std::max(0.0, s2 / n - mean * mean) / n);
  };
  BoundAndKl r{};
  stats(b, r.bound, r.bound_se);
  stats(diff, r.kl, r.kl_se);
  return r;
}

}  // namespace

TEST(KlUpperBound, DominatesMonteCarloKlAcrossStates) {
  const auto& m = trained_linear().ensemble.members[0];
  Rng rng(10);
  for (int k = 0; k < 50; ++k) {
    const Array s = rng.uniform_array({1, 2}, -1.0, 1.0);
    const double mu = kSlope * s[0] + rng.normal(0.0, 0.3);
    const double log_sigma = std::log(rng.uniform(0.1, 0.4));
    const auto r = bound_vs_kl(m, s, mu, log_sigma, 100, rng);
    EXPECT_GE(r.bound, r.kl - 3.0 * std::hypot(r.bound_se, r.kl_se)) << "state " << k;
  }
}

TEST(KlUpperBound, GapRoughlyConstantAcrossPolicies) {
  const auto& m = trained_mixture();
  Rng rng(11);
  const Array s = Array::matrix(1, 1, {0.0});
  std::vector<double> gaps;
  for (int p = 0; p < 5; ++p) {
    const double mu = 2.0 + rng.normal(0.0, 0.2);
    const double log_sigma = std::log(rng.uniform(0.3, 0.6));
    const auto r = bound_vs_kl(m, s, mu, log_sigma, 3000, rng);
    gaps.push_back(r.bound - r.kl);
  }
  double mean = 0.0;
  for (double g : gaps) mean += g / gaps.size();
  double var = 0.0;
  for (double g : gaps) var += (g - mean) * (g - mean) / (gaps.size() - 1);
  EXPECT_GT(mean, 0.0);
  EXPECT_LT(std::sqrt(var), 0.25 * mean);
}

TEST(DensityEstimate, FarOutOfSupportIsNegligible) {
  const auto& t = trained_linear();
  Rng rng(12);
  const auto bounds = dist::ActionBounds::symmetric(1);
  const Array s = Array::matrix(2, 2, {0.2, 0.0, 0.2, 0.0});
  const double u_in = kSlope * 0.2;
  const double u_out = u_in + 10.0 * kNoise;
  const Array a = Array::matrix(2, 1, {std::tanh(u_in), std::tanh(u_out)});
  const Array p = bm::density_estimate(t.ensemble, s, a, bounds, 1000, rng);
  EXPECT_GT(p[0], 0.0);
  EXPECT_LT(p[1], 1e-4 * p[0]);
}

TEST(DensityEstimate, IntegratesToOneOverActions) {
  const auto& t = trained_linear();
  Rng rng(13);
  const auto bounds = dist::ActionBounds::symmetric(1);
  const std::size_t n = 800;
  const double lo = -0.9;
  const double hi = 0.95;
  Array a({n + 1, 1});
  for (std::size_t i = 0; i <= n; ++i) a[i] = lo + (hi - lo) * static_cast<double>(i) / n;
  const Array s = nd::tile_rows(Array::matrix(1, 2, {0.6, 0.3}), n + 1);
  const Array p = bm::density_estimate(t.ensemble, s, a, bounds, 200, rng);
  double integral = 0.0;
  for (std::size_t i = 0; i <= n; ++i) {
    const double w = (i == 0 || i == n) ? 1.0 : (i % 2 ? 4.0 : 2.0);
    integral += w * p[i];
  }
  integral *= (hi - lo) / n / 3.0;
  EXPECT_NEAR(integral, 1.0, 0.05);
}

TEST(DensityEstimate, IdenticalMembersMatchSingleMember) {
  const auto& single = trained_linear().ensemble.members[1];
  bm::CvaeEnsemble one;
  one.members = {single};
  bm::CvaeEnsemble three;
  three.members = {single, single, single};
  const auto bounds = dist::ActionBounds::symmetric(1);
  const Array s = Array::matrix(3, 2, {0.1, 0.2, -0.5, 0.9, 0.7, -0.3});
  const Array a = Array::matrix(3, 1, {0.05, -0.2, 0.4});
  // Same stream per member: the single-member run repeats its draws three times.
  Rng r1(14);
  Array p1({3}, 0.0);
  for (int k = 0; k < 3; ++k) {
    const Array pk = bm::density_estimate(one, s, a, bounds, 100, r1);
    for (std::size_t i = 0; i < 3; ++i) p1[i] += pk[i] / 3.0;
  }
  Rng r3(14);
  const Array p3 = bm::density_estimate(three, s, a, bounds, 100, r3);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(p3[i], p1[i], 1e-12 * p1[i]);
}

TEST(DensityEstimate, MembersDisagreeMoreOffSupport) {
  const auto& t = trained_linear();
  Rng rng(15);
  const auto bounds = dist::ActionBounds::symmetric(1);
  // Relative spread (coefficient of variation) of member densities.
  auto spread = [&](double s0, double u) {
    const Array s = Array::matrix(1, 2, {s0, 0.0});
    const Array a = Array::matrix(1, 1, {std::tanh(u)});
    std::vector<double> d;
    for (const auto& m : t.ensemble.members) {
      bm::CvaeEnsemble e;
      e.members = {m};
      d.push_back(bm::density_estimate(e, s, a, bounds, 1000, rng)[0]);
    }
    double mean = 0.0;
    for (double v : d) mean += v / d.size();
    double var = 0.0;
    for (double v : d) var += (v - mean) * (v - mean) / d.size();
    return std::sqrt(var) / mean;
  };
  EXPECT_GT(spread(0.3, kSlope * 0.3 + 4.0 * kNoise), spread(0.3, kSlope * 0.3));
}

TEST(Ensemble, MembersAreSeedDistinct) {
  Rng rng(16);
  bm::CvaeEnsemble e(2, 1, {}, 3, rng);
  EXPECT_NE(e.members[0].encoder().layers()[0].weight.value(), e.members[1].encoder().layers()[0].weight.value());
  EXPECT_NE(e.members[1].decoder().layers()[0].weight.value(), e.members[2].decoder().layers()[0].weight.value());
}

TEST(Ensemble, SaveLoadRoundTrip) {
  const auto& t = trained_linear();
  const auto dir = std::filesystem::temp_directory_path() / "bracplus_ensemble_rt";
  bm::save_ensemble(dir, t.ensemble);
  const auto loaded = bm::load_ensemble(dir);
  ASSERT_EQ(loaded.size(), 3u);
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_EQ(loaded.members[k].latent_dim(), t.ensemble.members[k].latent_dim());
    EXPECT_EQ(loaded.members[k].decoder().layers()[1].weight.value(),
              t.ensemble.members[k].decoder().layers()[1].weight.value());
  }
  std::filesystem::remove_all(dir);
  EXPECT_THROW(bm::load_ensemble(dir), bracplus::FormatError);
}
