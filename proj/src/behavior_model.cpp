// Copyright 2026 The bracplus Authors
// SPDX-License-Identifier: Apache-2.0

#include "bracplus/behavior_model.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>

#include <json.hpp>

#include "bracplus/errors.hpp"
#include "bracplus/ndgrad/autograd.hpp"

namespace bracplus::bm {

namespace {

dist::DiagGaussian gaussian_head(const nd::Var& out, std::size_t d) {
  return {nd::slice(out, 1, 0, d), nd::clip(nd::slice(out, 1, d, d), nn::kLogStdMin, nn::kLogStdMax)};
}

// Rows per importance-sampling chunk, bounding memory at samples * rows.
constexpr std::size_t kChunkRows = 50000;

}  // namespace

CvaeModel::CvaeModel(std::size_t state_dim, std::size_t action_dim, const CvaeConfig& config, Rng& rng)
    : state_dim_(state_dim),
      action_dim_(action_dim),
      latent_dim_(config.latent_dim ? config.latent_dim : 2 * action_dim) {
  if (state_dim == 0 || action_dim == 0) throw std::invalid_argument("CvaeModel: zero dimension");
  const std::size_t h = config.hidden;
  encoder_ = nn::Mlp({state_dim + action_dim, h, h, 2 * latent_dim_}, rng);
  decoder_ = nn::Mlp({state_dim + latent_dim_, h, h, 2 * action_dim}, rng);
}

CvaeModel::CvaeModel(nn::Mlp encoder, nn::Mlp decoder, std::size_t state_dim, std::size_t action_dim)
    : encoder_(std::move(encoder)),
      decoder_(std::move(decoder)),
      state_dim_(state_dim),
      action_dim_(action_dim),
      latent_dim_(encoder_.output_dim() / 2) {
  if (encoder_.input_dim() != state_dim + action_dim || encoder_.output_dim() % 2 ||
      decoder_.input_dim() != state_dim + latent_dim_ || decoder_.output_dim() != 2 * action_dim) {
    throw std::invalid_argument("CvaeModel: encoder/decoder shapes do not fit state " +
                                std::to_string(state_dim) + ", action " + std::to_string(action_dim));
  }
}

dist::DiagGaussian CvaeModel::encode(const nd::Var& states, const nd::Var& pre_actions) const {
  return gaussian_head(encoder_.forward(nd::concat({states, pre_actions}, 1)), latent_dim_);
}

dist::DiagGaussian CvaeModel::decode(const nd::Var& states, const nd::Var& latents) const {
  return gaussian_head(decoder_.forward(nd::concat({states, latents}, 1)), action_dim_);
}

nd::Var CvaeModel::elbo(const nd::Var& states, const nd::Var& pre_actions,
                        const nd::Array& latent_noise) const {
  const auto q = encode(states, pre_actions);
  const nd::Var z = q.rsample(latent_noise);
  const auto prior = dist::standard_normal(q.mean.shape());
  return decode(states, z).log_prob(pre_actions) - dist::kl_diag_gaussian(q, prior);
}

nd::Array CvaeModel::log_likelihood(const nd::Array& states, const nd::Array& pre_actions,
                                    std::size_t samples, Rng& rng) const {
  if (samples == 0) throw std::invalid_argument("log_likelihood: need at least one sample");
  nd::NoGradGuard no_grad;
  const std::size_t n = states.rows();
  nd::Array result({n});
  const std::size_t chunk = std::max<std::size_t>(1, kChunkRows / samples);
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t b = std::min(chunk, n - start);
    const nd::Array s = nd::row_range(states, start, b);
    const nd::Array u = nd::row_range(pre_actions, start, b);
    const auto q = encode(nd::constant(s), nd::constant(u));
    const nd::Var z = q.rsample(rng.normal_array({samples, b, latent_dim_}));
    const nd::Array log_q = q.log_prob(z).value();
    const nd::Array log_prior = dist::standard_normal({b, latent_dim_}).log_prob(z).value();
    const nd::Var z_flat = nd::reshape(z, {samples * b, latent_dim_});
    const nd::Array log_p =
        decode(nd::constant(nd::tile_rows(s, samples)), z_flat).log_prob(nd::constant(nd::tile_rows(u, samples))).value();
    for (std::size_t i = 0; i < b; ++i) {
      double best = -std::numeric_limits<double>::infinity();
      for (std::size_t m = 0; m < samples; ++m) {
        const std::size_t k = m * b + i;
        best = std::max(best, log_p[k] + log_prior[k] - log_q[k]);
      }
      double acc = 0.0;
      for (std::size_t m = 0; m < samples; ++m) {
        const std::size_t k = m * b + i;
        acc += std::exp(log_p[k] + log_prior[k] - log_q[k] - best);
      }
      result[start + i] = best + std::log(acc / static_cast<double>(samples));
    }
  }
  return result;
}

std::vector<nd::Var> CvaeModel::parameters() const {
  auto p = encoder_.parameters();
  for (auto& v : decoder_.parameters()) p.push_back(v);
  return p;
}

CvaeModel CvaeModel::frozen() const {
  CvaeModel m = *this;
  m.encoder_ = encoder_.frozen();
  m.decoder_ = decoder_.frozen();
  return m;
}

CvaeEnsemble::CvaeEnsemble(std::size_t state_dim, std::size_t action_dim, const CvaeConfig& config,
                           std::size_t count, Rng& rng) {
  if (count == 0) throw std::invalid_argument("CvaeEnsemble: need at least one member");
  for (std::size_t k = 0; k < count; ++k) {
    Rng member_rng(rng.next_seed());
    members.emplace_back(state_dim, action_dim, config, member_rng);
  }
}

PretrainReport pretrain(CvaeEnsemble& ensemble, const nd::Array& states, const nd::Array& pre_actions,
                        std::size_t steps, const CvaeConfig& config, Rng& rng,
                        const std::function<void(std::size_t, std::size_t, double)>& on_step) {
  const std::size_t n = states.rank() == 2 ? states.rows() : 0;
  if (n == 0) throw std::invalid_argument("pretrain: dataset is empty");
  if (pre_actions.rank() != 2 || pre_actions.rows() != n) {
    throw nd::ShapeError("pretrain", states.shape(), pre_actions.shape());
  }
  PretrainReport report;
  const std::size_t batch = std::min(config.batch_size, n);
  for (std::size_t k = 0; k < ensemble.size(); ++k) {
    auto& model = ensemble.members[k];
    const auto params = model.parameters();
    nn::Adam opt(params, {.lr = config.lr});
    auto& history = report.elbo.emplace_back();
    history.reserve(steps);
    std::vector<std::size_t> idx(batch);
    for (std::size_t step = 0; step < steps; ++step) {
      for (auto& i : idx) i = rng.index(n);
      const nd::Var s = nd::constant(nd::take_rows(states, idx));
      const nd::Var u = nd::constant(nd::take_rows(pre_actions, idx));
      const nd::Var loss = -nd::mean(model.elbo(s, u, rng.normal_array({batch, model.latent_dim()})));
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw NumericError("behavior pretraining: non-finite loss for member " + std::to_string(k) +
                           " at step " + std::to_string(step));
      }
      const auto grads = nd::grad(loss, params);
      std::vector<nd::Array> g;
      g.reserve(grads.size());
      for (const auto& v : grads) g.push_back(v.value());
      opt.step(params, g);
      history.push_back(-value);
      if (on_step) on_step(k, step, -value);
    }
  }
  return report;
}

nd::Var kl_upper_bound(const CvaeModel& model, const dist::DiagGaussian& policy, const nd::Var& states,
                       const nd::Array& policy_noise, const nd::Array& latent_noise) {
  const nd::Var u = policy.rsample(policy_noise);
  const auto q = model.encode(states, u);
  const nd::Var z = q.rsample(latent_noise);
  const auto decoded = model.decode(states, z);
  return dist::kl_diag_gaussian(policy, decoded) +
         dist::kl_diag_gaussian(q, dist::standard_normal(q.mean.shape()));
}

nd::Array density_estimate(const CvaeEnsemble& ensemble, const nd::Array& states, const nd::Array& actions,
                           const dist::ActionBounds& bounds, std::size_t samples, Rng& rng) {
  if (ensemble.size() == 0) throw std::invalid_argument("density_estimate: empty ensemble");
  const nd::Array pre = dist::to_pre_squash(actions, bounds);
  const std::size_t n = pre.rows();
  const std::size_t d = bounds.dim();
  // log |da/du| per row.
  nd::Array log_jac({n}, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < d; ++k) {
      const double t = std::tanh(pre(i, k));
      log_jac[i] += std::log1p(-t * t) + std::log(0.5 * (bounds.high[k] - bounds.low[k]));
    }
  }
  nd::Array density({n}, 0.0);
  for (const auto& member : ensemble.members) {
    const nd::Array ll = member.log_likelihood(states, pre, samples, rng);
    for (std::size_t i = 0; i < n; ++i) {
      density[i] += std::exp(ll[i] - log_jac[i]) / static_cast<double>(ensemble.size());
    }
  }
  return density;
}

void save_ensemble(const std::filesystem::path& dir, const CvaeEnsemble& ensemble) {
  std::filesystem::create_directories(dir);
  for (std::size_t k = 0; k < ensemble.size(); ++k) {
    const auto& m = ensemble.members[k];
    const nlohmann::json meta = {{"member", k}, {"state_dim", m.state_dim()}, {"action_dim", m.action_dim()}};
    nn::save_mlp(dir / ("member_" + std::to_string(k) + "_encoder.bin"), m.encoder(), meta);
    nn::save_mlp(dir / ("member_" + std::to_string(k) + "_decoder.bin"), m.decoder(), meta);
  }
  const auto& first = ensemble.members.front();
  const nlohmann::json index = {{"members", ensemble.size()},
                                {"state_dim", first.state_dim()},
                                {"action_dim", first.action_dim()},
                                {"latent_dim", first.latent_dim()}};
  std::ofstream(dir / "ensemble.json") << index.dump(2) << '\n';
}

CvaeEnsemble load_ensemble(const std::filesystem::path& dir) {
  std::ifstream is(dir / "ensemble.json");
  if (!is) throw FormatError("no ensemble.json in " + dir.string());
  nlohmann::json index;
  try {
    index = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("ensemble.json: " + std::string(e.what()));
  }
  CvaeEnsemble ensemble;
  const auto count = index.at("members").get<std::size_t>();
  const auto sd = index.at("state_dim").get<std::size_t>();
  const auto ad = index.at("action_dim").get<std::size_t>();
  for (std::size_t k = 0; k < count; ++k) {
    try {
      ensemble.members.emplace_back(nn::load_mlp(dir / ("member_" + std::to_string(k) + "_encoder.bin")),
                                    nn::load_mlp(dir / ("member_" + std::to_string(k) + "_decoder.bin")),
                                    sd, ad);
    } catch (const std::invalid_argument& e) {
      throw FormatError(dir.string() + ": " + e.what());
    }
  }
  return ensemble;
}

}  // namespace bracplus::bm
