// Copyright 2026 The bracplus Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <functional>
#include <vector>

#include "bracplus/distributions.hpp"
#include "bracplus/networks.hpp"
#include "bracplus/random.hpp"

namespace bracplus::bm {

struct CvaeConfig {
  std::size_t hidden = 64;
  std::size_t latent_dim = 0;  // 0 selects 2 * action_dim
  double lr = 1e-3;
  std::size_t batch_size = 100;
};

/// Conditional VAE over pre-squash actions: encoder q(z|s,u), decoder
/// p(u|s,z), prior N(0, I).
class CvaeModel {
 public:
  CvaeModel() = default;
  CvaeModel(std::size_t state_dim, std::size_t action_dim, const CvaeConfig& config, Rng& rng);
  CvaeModel(nn::Mlp encoder, nn::Mlp decoder, std::size_t state_dim, std::size_t action_dim);

  dist::DiagGaussian encode(const nd::Var& states, const nd::Var& pre_actions) const;
  dist::DiagGaussian decode(const nd::Var& states, const nd::Var& latents) const;

  /// Single-sample reparameterized ELBO per row, [batch, 1].
  nd::Var elbo(const nd::Var& states, const nd::Var& pre_actions, const nd::Array& latent_noise) const;

  /// Importance-weighted log p(u|s) with `samples` latent draws from the
  /// encoder; no graph is recorded. Returns [batch].
  nd::Array log_likelihood(const nd::Array& states, const nd::Array& pre_actions, std::size_t samples,
                           Rng& rng) const;

  std::vector<nd::Var> parameters() const;
  /// Copy with constant weights, for use inside losses of other networks.
  CvaeModel frozen() const;
  nn::Mlp& encoder() { return encoder_; }
  nn::Mlp& decoder() { return decoder_; }
  const nn::Mlp& encoder() const { return encoder_; }
  const nn::Mlp& decoder() const { return decoder_; }
  std::size_t state_dim() const { return state_dim_; }
  std::size_t action_dim() const { return action_dim_; }
  std::size_t latent_dim() const { return latent_dim_; }

 private:
  nn::Mlp encoder_;
  nn::Mlp decoder_;
  std::size_t state_dim_ = 0;
  std::size_t action_dim_ = 0;
  std::size_t latent_dim_ = 0;
};

struct CvaeEnsemble {
  std::vector<CvaeModel> members;

  CvaeEnsemble() = default;
  /// `count` members, each initialized from its own seed drawn from `rng`.
  CvaeEnsemble(std::size_t state_dim, std::size_t action_dim, const CvaeConfig& config,
               std::size_t count, Rng& rng);

  std::size_t size() const { return members.size(); }
  const CvaeModel& pick(Rng& rng) const { return members[rng.index(members.size())]; }
};

/// Per-member mean ELBO of every minibatch seen during pretraining.
struct PretrainReport {
  std::vector<std::vector<double>> elbo;
};

/// Maximizes the ELBO of every member independently on minibatches drawn
/// with replacement. `pre_actions` are dataset actions mapped through
/// to_pre_squash. Throws std::invalid_argument on an empty dataset and
/// NumericError on a non-finite loss.
PretrainReport pretrain(CvaeEnsemble& ensemble, const nd::Array& states, const nd::Array& pre_actions,
                        std::size_t steps, const CvaeConfig& config, Rng& rng,
                        const std::function<void(std::size_t member, std::size_t step, double elbo)>&
                            on_step = {});

/// E_{u~pi, z~q(z|s,u)}[KL(pi(.|s) || p(.|s,z)) + KL(q(z|s,u) || N(0,I))]
/// with one reparameterized draw per row; [batch, 1], differentiable in the
/// policy parameters. `policy_noise` is [batch, action_dim] and
/// `latent_noise` is [batch, latent_dim].
nd::Var kl_upper_bound(const CvaeModel& model, const dist::DiagGaussian& policy, const nd::Var& states,
                       const nd::Array& policy_noise, const nd::Array& latent_noise);

/// Behavior density pi_b(a|s) for bounded actions, averaged over members;
/// each member contributes exp of its importance-weighted log-likelihood
/// pushed through the tanh change of variables. Returns [batch].
nd::Array density_estimate(const CvaeEnsemble& ensemble, const nd::Array& states, const nd::Array& actions,
                           const dist::ActionBounds& bounds, std::size_t samples, Rng& rng);

/// One `member_<k>_encoder.bin` / `member_<k>_decoder.bin` pair per member
/// plus `ensemble.json`.
void save_ensemble(const std::filesystem::path& dir, const CvaeEnsemble& ensemble);
CvaeEnsemble load_ensemble(const std::filesystem::path& dir);

}  // namespace bracplus::bm
