// Copyright 2026 The bracplus Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "bracplus/behavior_model.hpp"
#include "bracplus/distributions.hpp"
#include "bracplus/divergences.hpp"
#include "bracplus/envs_data.hpp"
#include "bracplus/networks.hpp"
#include "bracplus/random.hpp"

namespace bracplus::agent {

enum class Regularizer { kl_upper, mmd };

Regularizer parse_regularizer(const std::string& name);
std::string to_string(Regularizer r);

struct AgentConfig {
  double gamma = 0.99;
  double tau = 1e-3;
  std::size_t batch_size = 100;
  double policy_lr = 5e-6;
  double q_lr = 3e-4;
  std::size_t steps_per_epoch = 2000;
  std::size_t epochs = 50;
  std::size_t hidden = 64;

  /// Slack added to the best bound reached during initialization.
  double eps_generalization = 2.0;
  /// Same role for the MMD arm, whose divergence lives on a different scale.
  double mmd_eps_generalization = 0.05;
  double target_entropy_fraction = 0.25;
  bool gp_enabled = true;
  Regularizer regularizer = Regularizer::kl_upper;
  /// Bound on E[|grad_a Q| softplus(D)] that drives the penalty weight.
  double lambda_constraint_target = 1.0;
  double dual_lr = 1e-3;
  double initial_alpha_kl = 1.0;
  double initial_alpha_ent = 1.0;
  double initial_lambda_gp = 1.0;

  std::size_t init_policy_steps = 5000;
  double init_policy_lr = 1e-3;
  std::size_t init_q_steps = 10000;
  /// Loss magnitude that aborts initialization.
  double init_abort_loss = 1e6;

  std::size_t mmd_samples = 5;
  double mmd_bandwidth = 1.0;

  std::size_t eval_episodes = 10;
  /// Dataset states used for the per-epoch Q / bound / entropy metrics.
  std::size_t metric_states = 1000;
  /// Stop training once the epoch's mean dataset Q exceeds this (0 disables).
  double stop_when_q_exceeds = 0.0;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
  nlohmann::json to_json() const;
  /// Fields absent from `j` keep the values of `base`; unknown keys throw.
  static AgentConfig from_json(const nlohmann::json& j, const AgentConfig& base);
  static AgentConfig from_json(const nlohmann::json& j);
};

/// r' = (r - r_min) / (r_max - r_min) with the range taken from the reward
/// column; the raw range stays in metadata (r_min, r_max) and
/// metadata.rewards_scaled becomes true. Throws std::invalid_argument on a
/// constant-reward or already scaled dataset.
env::Dataset scale_rewards(const env::Dataset& data);

struct Batch {
  nd::Array states;
  nd::Array actions;
  nd::Array rewards;
  nd::Array next_states;
  nd::Array dones;
};

/// Uniform draw with replacement.
Batch sample_batch(const env::Dataset& data, std::size_t size, Rng& rng);
Batch take_batch(const env::Dataset& data, std::span<const std::size_t> rows);

/// Noise for one divergence estimate. KL arm: `policy` [B, d] and `latent`
/// [B, L]. MMD arm: `policy` [m, B, d], `latent` [m*B, L] and `behavior`
/// [m*B, d] for the behavior-model draws.
struct DivergenceNoise {
  nd::Array policy;
  nd::Array latent;
  nd::Array behavior;
};

struct EvaluationNoise {
  nd::Array next_action;  // [B, d], a' ~ pi(.|s') for the target
  nd::Array gp_action;    // [B, d], a'' ~ pi(.|s) for the penalty
  DivergenceNoise divergence;
};

struct PolicyNoise {
  nd::Array action;  // [B, d]
  DivergenceNoise divergence;
};

struct EvaluationLoss {
  nd::Var total;
  nd::Var td;
  /// Per network: mean over the batch of |grad_a Q_j(s, a'')| softplus(D).
  std::vector<nd::Var> penalty;
  /// Per network: mean |grad_a Q_j(s, a'')|.
  std::vector<double> grad_norm;
};

struct PolicyLoss {
  nd::Var total;
  double q_mean = 0.0;
  double divergence = 0.0;
  double entropy = 0.0;
};

struct EvaluationReport {
  double loss = 0.0;
  double td_loss = 0.0;
  double penalty = 0.0;
  double grad_norm = 0.0;
};

struct PolicyReport {
  double loss = 0.0;
  double q_mean = 0.0;
  double divergence = 0.0;
  double entropy = 0.0;
};

struct StepReport {
  EvaluationReport evaluation;
  PolicyReport policy;
};

struct InitReport {
  double eps_min = 0.0;
  double epsilon = 0.0;
  double behavior_entropy = 0.0;
  double target_entropy = 0.0;
  /// Mean bound on the metric states at every evaluation point.
  std::vector<double> bound_curve;
  double final_td_loss = 0.0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double mean_dataset_q = 0.0;
  double kl_bound_mean = 0.0;
  double entropy_mean = 0.0;
  double alpha_kl = 0.0;
  double alpha_ent = 0.0;
  double lambda_gp = 0.0;
  double eval_return_raw = 0.0;
  double eval_return_normalized = 0.0;
  // Extras.
  double divergence_mean = 0.0;
  double epsilon = 0.0;
  double target_entropy = 0.0;
  double td_loss = 0.0;
  double action_grad_norm = 0.0;
  std::size_t steps = 0;

  nlohmann::json to_json() const;
  static EpochRecord from_json(const nlohmann::json& j);
};

/// Behavior-regularized actor-critic state: tanh-Gaussian policy, twin Q
/// with targets, frozen behavior ensemble, multipliers and optimizers.
class Agent {
 public:
  Agent(AgentConfig config, const bm::CvaeEnsemble& behavior, dist::ActionBounds bounds,
        std::size_t state_dim, std::uint64_t seed);

  const AgentConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }
  std::size_t state_dim() const { return state_dim_; }
  std::size_t action_dim() const { return bounds_.dim(); }
  const dist::ActionBounds& bounds() const { return bounds_; }

  // ------------------------------------------------------------ initialization
  /// Policy to the minimum-bound solution, thresholds, then Q to Q^pi.
  InitReport initialize(const env::Dataset& scaled);
  /// Minimizes the mean bound over dataset states; keeps the best snapshot
  /// and sets eps_min, epsilon, the behavior-entropy proxy and H0.
  InitReport initialize_policy(const env::Dataset& scaled);
  /// Plain TD evaluation of the current policy; returns the last loss.
  double initialize_q(const env::Dataset& scaled, std::size_t steps);
  bool initialized() const { return initialized_; }

  // ------------------------------------------------------------------- steps
  EvaluationNoise draw_evaluation_noise(std::size_t batch);
  PolicyNoise draw_policy_noise(std::size_t batch);

  /// TD loss on both networks; when `member` is given, plus `lambda` times
  /// the action-gradient penalty weighted by softplus of its divergence.
  EvaluationLoss evaluation_loss(const Batch& batch, const EvaluationNoise& noise,
                                 const bm::CvaeModel* member, double lambda) const;
  /// -E[min_j Q_j] + alpha_kl (D - eps) + alpha_ent (H0 - H).
  PolicyLoss policy_loss(const Batch& batch, const PolicyNoise& noise, const bm::CvaeModel& member) const;
  /// Per-state divergence of the active regularizer, [B, 1].
  nd::Var divergence(const dist::TanhDiagGaussian& pi, const nd::Var& states, const bm::CvaeModel& member,
                     const DivergenceNoise& noise) const;

  EvaluationReport policy_evaluation_step(const Batch& batch);
  PolicyReport policy_update_step(const Batch& batch);
  /// One evaluation step, one policy step and the Polyak update.
  StepReport train_step(const env::Dataset& scaled);

  // ----------------------------------------------------------------- metrics
  EpochRecord run_epoch(const env::Dataset& scaled, const env::ScoreReference& ref);
  /// Metrics of the current state without training (epoch field = epoch()).
  EpochRecord measure(const env::Dataset& scaled, const env::ScoreReference& ref) const;
  /// Mean over `states` of the ensemble-averaged bound, fixed noise from `seed`.
  double mean_kl_bound(const nd::Array& states, std::uint64_t seed) const;
  double mean_entropy(const nd::Array& states, std::uint64_t seed, std::size_t samples = 10) const;
  /// Mean of (Q1 + Q2) / 2 at the deterministic policy action.
  double mean_q(const nd::Array& states) const;
  /// Mean |grad_a Q1| at the deterministic policy action.
  double mean_action_grad_norm(const nd::Array& states) const;
  nd::Array act_deterministic(const nd::Array& states) const;
  env::Policy as_policy() const;

  // ------------------------------------------------------------------- state
  nn::Mlp& policy() { return policy_; }
  const nn::Mlp& policy() const { return policy_; }
  nn::TwinQ& twin() { return twin_; }
  const nn::TwinQ& twin() const { return twin_; }
  const bm::CvaeEnsemble& behavior() const { return behavior_; }
  Rng& rng() { return rng_; }

  double alpha_kl() const;
  double alpha_ent() const { return alpha_ent_; }
  double lambda_gp() const;
  double log_alpha_kl() const { return log_alpha_kl_; }
  double log_lambda_gp() const { return log_lambda_gp_; }
  void set_alpha_kl(double v);
  void set_alpha_ent(double v);
  void set_lambda_gp(double v);

  double epsilon() const { return epsilon_; }
  double eps_min() const { return eps_min_; }
  double target_entropy() const { return target_entropy_; }
  double behavior_entropy() const { return behavior_entropy_; }
  void set_thresholds(double epsilon, double target_entropy);
  std::size_t epoch() const { return epoch_; }
  /// Changes the total epoch count, e.g. to extend a resumed run.
  void set_epoch_budget(std::size_t epochs) { config_.epochs = epochs; }
  std::size_t total_steps() const { return steps_; }

  /// Directory with networks, optimizer moments, behavior ensemble and a
  /// JSON state file (multipliers, thresholds, RNG state, config).
  void save(const std::filesystem::path& dir) const;
  static Agent load(const std::filesystem::path& dir);

 private:
  Agent() = default;
  nd::Array metric_states(const env::Dataset& data) const;
  void update_duals_policy(double divergence, double entropy);

  AgentConfig config_;
  std::uint64_t seed_ = 0;
  std::size_t state_dim_ = 0;
  dist::ActionBounds bounds_;
  divergence::KernelSpec kernel_;
  bm::CvaeEnsemble behavior_;
  nn::Mlp policy_;
  nn::TwinQ twin_;
  nn::Adam policy_opt_;
  nn::Adam q_opt_;
  Rng rng_;

  double log_alpha_kl_ = 0.0;
  double alpha_ent_ = 1.0;
  double log_lambda_gp_ = 0.0;
  double epsilon_ = 0.0;
  double eps_min_ = 0.0;
  double target_entropy_ = 0.0;
  double behavior_entropy_ = 0.0;
  bool initialized_ = false;
  std::size_t epoch_ = 0;
  std::size_t steps_ = 0;
};

/// H0 from the behavior entropy: a fraction of it when positive; for a
/// negative entropy the same absolute reduction |H_b| (1 - fraction) below it.
double target_entropy_from(double behavior_entropy, double fraction);

struct TrainHooks {
  std::function<void(const EpochRecord&)> on_epoch;
};

/// Runs epochs epoch()+1 .. config.epochs. Emits the initialization record
/// (epoch 0) first when the agent has not trained yet.
std::vector<EpochRecord> train(Agent& agent, const env::Dataset& scaled, const env::ScoreReference& ref,
                               const TrainHooks& hooks = {});

// ----------------------------------------------------------------- baseline

inline AgentConfig AgentConfig::from_json(const nlohmann::json& j) { return from_json(j, AgentConfig{}); }

struct BcConfig {
  std::size_t hidden = 64;
  double lr = 1e-3;
  std::size_t steps = 20000;
  std::size_t batch_size = 100;
};

/// Maximum-likelihood tanh-Gaussian policy on the dataset actions.
nn::Mlp train_bc(const env::Dataset& data, const BcConfig& config, std::uint64_t seed,
                 const std::function<void(std::size_t step, double nll)>& on_step = {});
/// Deterministic action mid + half * tanh(mean) of a policy network.
env::Policy deterministic_policy(const nn::Mlp& net, const dist::ActionBounds& bounds);

// ------------------------------------------------------------------ pinsker

/// Quadrature grid over a 1-D or 2-D action box: cell centers and cell volume.
struct ActionGrid {
  std::vector<std::vector<double>> points;
  double cell_volume = 0.0;

  /// `per_axis` centers per dimension on [low, high]^dim.
  static ActionGrid uniform(std::size_t dim, double low, double high, std::size_t per_axis);
};

struct PinskerSides {
  double lhs = 0.0;
  double rhs = 0.0;
  double kl = 0.0;
  double sup_delta = 0.0;
};

using ActionFunction = std::function<double(std::span<const double>)>;

/// lhs = |E_new[Q_new - Q_old] - E_b[Q_new - Q_old]| and
/// rhs = 2 sup |Q_new - Q_old| sqrt(KL(pi_new || pi_b) / 2), all on the grid
/// with both densities renormalized over it. The factor 2 converts total
/// variation to the L1 distance that bounds the difference of expectations.
PinskerSides pinsker_gap(const ActionFunction& q_new, const ActionFunction& q_old, const ActionFunction& pi_new,
                         const ActionFunction& pi_b, const ActionGrid& grid);

}  // namespace bracplus::agent
