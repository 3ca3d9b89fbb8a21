// Copyright 2026 The bracplus Authors
// SPDX-License-Identifier: Apache-2.0

#include "bracplus/agent.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

#include <fmt/format.h>

#include "bracplus/errors.hpp"
#include "bracplus/ndgrad/autograd.hpp"

namespace bracplus::agent {

namespace {

constexpr double kLogMultiplierLimit = 50.0;
constexpr double kSignedMultiplierLimit = 1e6;
constexpr double kNormFloor = 1e-12;
constexpr std::uint64_t kMetricStream = 0x9e3779b97f4a7c15ULL;

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double mean_of(const nd::Array& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  return s / static_cast<double>(a.size());
}

std::vector<nd::Var> concat_params(const nn::Mlp& a, const nn::Mlp& b) {
  auto p = a.parameters();
  const auto q = b.parameters();
  p.insert(p.end(), q.begin(), q.end());
  return p;
}

std::vector<nd::Array> grad_values(const nd::Var& root, const std::vector<nd::Var>& params) {
  const auto g = nd::grad(root, params);
  std::vector<nd::Array> out;
  out.reserve(g.size());
  for (const auto& v : g) out.push_back(v.value());
  return out;
}

nd::Array row_vector(const env::Vec4& s) { return nd::Array({1, s.size()}, std::vector<double>(s.begin(), s.end())); }

void check_positive(double v, const char* name) {
  if (!(v > 0.0) || !std::isfinite(v)) {
    throw std::invalid_argument(fmt::format("AgentConfig: {} must be positive, got {}", name, v));
  }
}

template <class T>
void read_field(const nlohmann::json& j, const char* key, T& field) {
  if (j.contains(key)) field = j.at(key).get<T>();
}

}  // namespace

Regularizer parse_regularizer(const std::string& name) {
  if (name == "kl" || name == "kl_upper") return Regularizer::kl_upper;
  if (name == "mmd") return Regularizer::mmd;
  throw std::invalid_argument("unknown regularizer '" + name + "' (expected kl_upper or mmd)");
}

std::string to_string(Regularizer r) { return r == Regularizer::mmd ? "mmd" : "kl_upper"; }

// ------------------------------------------------------------------- config

void AgentConfig::validate() const {
  if (!(gamma > 0.0 && gamma < 1.0)) throw std::invalid_argument(fmt::format("AgentConfig: gamma must lie in (0, 1), got {}", gamma));
  if (!(tau > 0.0 && tau <= 1.0)) throw std::invalid_argument(fmt::format("AgentConfig: tau must lie in (0, 1], got {}", tau));
  check_positive(policy_lr, "policy_lr");
  check_positive(q_lr, "q_lr");
  check_positive(dual_lr, "dual_lr");
  check_positive(init_policy_lr, "init_policy_lr");
  check_positive(initial_alpha_kl, "initial_alpha_kl");
  check_positive(initial_lambda_gp, "initial_lambda_gp");
  check_positive(mmd_bandwidth, "mmd_bandwidth");
  check_positive(init_abort_loss, "init_abort_loss");
  if (batch_size == 0) throw std::invalid_argument("AgentConfig: batch_size must be positive");
  if (steps_per_epoch == 0) throw std::invalid_argument("AgentConfig: steps_per_epoch must be positive");
  if (hidden == 0) throw std::invalid_argument("AgentConfig: hidden must be positive");
  if (mmd_samples < 2) throw std::invalid_argument("AgentConfig: mmd_samples must be at least 2");
  if (metric_states == 0) throw std::invalid_argument("AgentConfig: metric_states must be positive");
  if (!(target_entropy_fraction > 0.0 && target_entropy_fraction <= 1.0)) {
    throw std::invalid_argument("AgentConfig: target_entropy_fraction must lie in (0, 1]");
  }
  if (!(eps_generalization >= 0.0) || !(mmd_eps_generalization >= 0.0)) {
    throw std::invalid_argument("AgentConfig: generalization slack must be non-negative");
  }
  if (!std::isfinite(initial_alpha_ent)) throw std::invalid_argument("AgentConfig: initial_alpha_ent must be finite");
  if (!(lambda_constraint_target > 0.0)) throw std::invalid_argument("AgentConfig: lambda_constraint_target must be positive");
  if (!(stop_when_q_exceeds >= 0.0)) throw std::invalid_argument("AgentConfig: stop_when_q_exceeds must be >= 0");
}

nlohmann::json AgentConfig::to_json() const {
  return {{"gamma", gamma},
          {"tau", tau},
          {"batch_size", batch_size},
          {"policy_lr", policy_lr},
          {"q_lr", q_lr},
          {"steps_per_epoch", steps_per_epoch},
          {"epochs", epochs},
          {"hidden", hidden},
          {"eps_generalization", eps_generalization},
          {"mmd_eps_generalization", mmd_eps_generalization},
          {"target_entropy_fraction", target_entropy_fraction},
          {"gp_enabled", gp_enabled},
          {"regularizer", to_string(regularizer)},
          {"lambda_constraint_target", lambda_constraint_target},
          {"dual_lr", dual_lr},
          {"initial_alpha_kl", initial_alpha_kl},
          {"initial_alpha_ent", initial_alpha_ent},
          {"initial_lambda_gp", initial_lambda_gp},
          {"init_policy_steps", init_policy_steps},
          {"init_policy_lr", init_policy_lr},
          {"init_q_steps", init_q_steps},
          {"init_abort_loss", init_abort_loss},
          {"mmd_samples", mmd_samples},
          {"mmd_bandwidth", mmd_bandwidth},
          {"eval_episodes", eval_episodes},
          {"metric_states", metric_states},
          {"stop_when_q_exceeds", stop_when_q_exceeds}};
}

AgentConfig AgentConfig::from_json(const nlohmann::json& j, const AgentConfig& base) {
  if (!j.is_object()) throw std::invalid_argument("agent config must be a JSON object");
  const auto known = base.to_json();
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw std::invalid_argument("unknown agent config key '" + key + "'");
  }
  AgentConfig c = base;
  try {
    read_field(j, "gamma", c.gamma);
    read_field(j, "tau", c.tau);
    read_field(j, "batch_size", c.batch_size);
    read_field(j, "policy_lr", c.policy_lr);
    read_field(j, "q_lr", c.q_lr);
    read_field(j, "steps_per_epoch", c.steps_per_epoch);
    read_field(j, "epochs", c.epochs);
    read_field(j, "hidden", c.hidden);
    read_field(j, "eps_generalization", c.eps_generalization);
    read_field(j, "mmd_eps_generalization", c.mmd_eps_generalization);
    read_field(j, "target_entropy_fraction", c.target_entropy_fraction);
    read_field(j, "gp_enabled", c.gp_enabled);
    if (j.contains("regularizer")) c.regularizer = parse_regularizer(j.at("regularizer").get<std::string>());
    read_field(j, "lambda_constraint_target", c.lambda_constraint_target);
    read_field(j, "dual_lr", c.dual_lr);
    read_field(j, "initial_alpha_kl", c.initial_alpha_kl);
    read_field(j, "initial_alpha_ent", c.initial_alpha_ent);
    read_field(j, "initial_lambda_gp", c.initial_lambda_gp);
    read_field(j, "init_policy_steps", c.init_policy_steps);
    read_field(j, "init_policy_lr", c.init_policy_lr);
    read_field(j, "init_q_steps", c.init_q_steps);
    read_field(j, "init_abort_loss", c.init_abort_loss);
    read_field(j, "mmd_samples", c.mmd_samples);
    read_field(j, "mmd_bandwidth", c.mmd_bandwidth);
    read_field(j, "eval_episodes", c.eval_episodes);
    read_field(j, "metric_states", c.metric_states);
    read_field(j, "stop_when_q_exceeds", c.stop_when_q_exceeds);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("agent config: ") + e.what());
  }
  c.validate();
  return c;
}

// --------------------------------------------------------------------- data

env::Dataset scale_rewards(const env::Dataset& data) {
  if (data.size() == 0) throw std::invalid_argument("scale_rewards: empty dataset");
  if (data.metadata.value("rewards_scaled", false)) {
    throw std::invalid_argument("scale_rewards: rewards are already scaled");
  }
  const auto [lo_it, hi_it] = std::minmax_element(data.rewards.values().begin(), data.rewards.values().end());
  const double lo = *lo_it;
  const double hi = *hi_it;
  if (!(hi > lo)) {
    throw std::invalid_argument(fmt::format("scale_rewards: constant rewards ({}) cannot be rescaled", lo));
  }
  env::Dataset out = data;
  for (auto& r : out.rewards.values()) r = std::clamp((r - lo) / (hi - lo), 0.0, 1.0);
  out.metadata["r_min"] = lo;
  out.metadata["r_max"] = hi;
  out.metadata["rewards_scaled"] = true;
  return out;
}

Batch take_batch(const env::Dataset& data, std::span<const std::size_t> rows) {
  return {nd::take_rows(data.states, rows), nd::take_rows(data.actions, rows), nd::take_rows(data.rewards, rows),
          nd::take_rows(data.next_states, rows), nd::take_rows(data.dones, rows)};
}

Batch sample_batch(const env::Dataset& data, std::size_t size, Rng& rng) {
  if (data.size() == 0) throw std::invalid_argument("sample_batch: empty dataset");
  std::vector<std::size_t> rows(size);
  for (auto& r : rows) r = rng.index(data.size());
  return take_batch(data, rows);
}

double target_entropy_from(double behavior_entropy, double fraction) {
  return behavior_entropy - (1.0 - fraction) * std::abs(behavior_entropy);
}

// -------------------------------------------------------------------- agent

Agent::Agent(AgentConfig config, const bm::CvaeEnsemble& behavior, dist::ActionBounds bounds,
             std::size_t state_dim, std::uint64_t seed)
    : config_(std::move(config)), seed_(seed), state_dim_(state_dim), bounds_(std::move(bounds)), rng_(seed) {
  config_.validate();
  if (behavior.size() == 0) throw std::invalid_argument("Agent: behavior ensemble is empty");
  for (const auto& m : behavior.members) {
    if (m.state_dim() != state_dim || m.action_dim() != bounds_.dim()) {
      throw std::invalid_argument("Agent: behavior model dimensions do not match the environment");
    }
    behavior_.members.push_back(m.frozen());
  }
  kernel_ = {divergence::KernelFamily::laplacian, config_.mmd_bandwidth};
  const std::size_t d = bounds_.dim();
  const std::size_t h = config_.hidden;
  policy_ = nn::Mlp({state_dim, h, h, 2 * d}, rng_);
  twin_ = nn::TwinQ::make({state_dim + d, h, h, 1}, rng_);
  policy_opt_ = nn::Adam(policy_.parameters(), {.lr = config_.policy_lr});
  q_opt_ = nn::Adam(concat_params(twin_.q1, twin_.q2), {.lr = config_.q_lr});
  log_alpha_kl_ = std::log(config_.initial_alpha_kl);
  alpha_ent_ = config_.initial_alpha_ent;
  log_lambda_gp_ = std::log(config_.initial_lambda_gp);
}

double Agent::alpha_kl() const { return std::exp(log_alpha_kl_); }
double Agent::lambda_gp() const { return std::exp(log_lambda_gp_); }

void Agent::set_alpha_kl(double v) {
  if (!(v > 0.0) || !std::isfinite(v)) throw std::invalid_argument("alpha_kl must be positive and finite");
  log_alpha_kl_ = std::log(v);
}

void Agent::set_alpha_ent(double v) {
  if (!std::isfinite(v)) throw std::invalid_argument("alpha_ent must be finite");
  alpha_ent_ = v;
}

void Agent::set_lambda_gp(double v) {
  if (!(v > 0.0) || !std::isfinite(v)) throw std::invalid_argument("lambda_gp must be positive and finite");
  log_lambda_gp_ = std::log(v);
}

void Agent::set_thresholds(double epsilon, double target_entropy) {
  if (!std::isfinite(epsilon) || !std::isfinite(target_entropy)) {
    throw std::invalid_argument("thresholds must be finite");
  }
  epsilon_ = epsilon;
  target_entropy_ = target_entropy;
}

nd::Array Agent::metric_states(const env::Dataset& data) const {
  const std::size_t n = std::min(config_.metric_states, data.size());
  std::vector<std::size_t> rows(data.size());
  std::iota(rows.begin(), rows.end(), 0);
  Rng r(seed_ ^ kMetricStream);
  std::shuffle(rows.begin(), rows.end(), r.engine());
  rows.resize(n);
  return nd::take_rows(data.states, rows);
}

namespace {

DivergenceNoise make_divergence_noise(Rng& rng, Regularizer reg, std::size_t batch, std::size_t action_dim,
                                      std::size_t latent_dim, std::size_t samples) {
  if (reg == Regularizer::kl_upper) {
    return {rng.normal_array({batch, action_dim}), rng.normal_array({batch, latent_dim}), nd::Array()};
  }
  return {rng.normal_array({samples, batch, action_dim}), rng.normal_array({samples * batch, latent_dim}),
          rng.normal_array({samples * batch, action_dim})};
}

}  // namespace

EvaluationNoise Agent::draw_evaluation_noise(std::size_t batch) {
  const std::size_t d = action_dim();
  EvaluationNoise n;
  n.next_action = rng_.normal_array({batch, d});
  n.gp_action = rng_.normal_array({batch, d});
  n.divergence = make_divergence_noise(rng_, config_.regularizer, batch, d, behavior_.members[0].latent_dim(),
                                       config_.mmd_samples);
  return n;
}

PolicyNoise Agent::draw_policy_noise(std::size_t batch) {
  const std::size_t d = action_dim();
  PolicyNoise n;
  n.action = rng_.normal_array({batch, d});
  n.divergence = make_divergence_noise(rng_, config_.regularizer, batch, d, behavior_.members[0].latent_dim(),
                                       config_.mmd_samples);
  return n;
}

nd::Var Agent::divergence(const dist::TanhDiagGaussian& pi, const nd::Var& states, const bm::CvaeModel& member,
                          const DivergenceNoise& noise) const {
  if (config_.regularizer == Regularizer::kl_upper) {
    return bm::kl_upper_bound(member, pi.base, states, noise.policy, noise.latent);
  }
  const std::size_t m = config_.mmd_samples;
  const std::size_t b = states.shape()[0];
  const std::size_t d = action_dim();
  const nd::Var policy_actions = pi.rsample(noise.policy).action;  // [m, B, d]
  nd::Var behavior_actions;
  {
    nd::NoGradGuard no_grad;
    const nd::Var tiled = nd::constant(nd::tile_rows(states.value(), m));
    const auto decoded = member.decode(tiled, nd::constant(noise.latent));
    behavior_actions = nd::constant(pi.squash(decoded.rsample(noise.behavior)).value());
  }
  return divergence::mmd_squared(policy_actions, nd::reshape(behavior_actions, {m, b, d}), kernel_);
}

EvaluationLoss Agent::evaluation_loss(const Batch& batch, const EvaluationNoise& noise, const bm::CvaeModel* member,
                                      double lambda) const {
  const nd::Var s = nd::constant(batch.states);
  const nd::Var a = nd::constant(batch.actions);
  nd::Array y;
  {
    nd::NoGradGuard no_grad;
    const auto pi_next = nn::policy_forward(policy_, nd::constant(batch.next_states), bounds_);
    const nd::Var a_next = pi_next.rsample(noise.next_action).action;
    const nd::Array target = twin_.target_min(nd::constant(batch.next_states), a_next).value();
    y = nd::Array(target.shape());
    for (std::size_t i = 0; i < y.size(); ++i) {
      y[i] = batch.rewards[i] + config_.gamma * (1.0 - batch.dones[i]) * target[i];
    }
  }
  const nd::Var yv = nd::constant(y);
  EvaluationLoss out;
  out.td = nd::mean(nd::square(nn::q_forward(twin_.q1, s, a) - yv)) +
           nd::mean(nd::square(nn::q_forward(twin_.q2, s, a) - yv));
  out.total = out.td;
  if (member == nullptr) return out;

  nd::Array weight;
  nd::Array gp_actions;
  {
    nd::NoGradGuard no_grad;
    const auto pi = nn::policy_forward(policy_, s, bounds_);
    weight = divergence(pi, s, *member, noise.divergence).value();
    for (auto& v : weight.values()) v = softplus(v);
    gp_actions = pi.rsample(noise.gp_action).action.value();
  }
  // The penalty differentiates Q inside the loss, so it needs a recorded graph
  // even when the caller only wants values.
  nd::EnableGradGuard with_grad;
  const nd::Var w = nd::constant(weight);
  nd::Var penalty_sum;
  for (const nn::Mlp* net : {&twin_.q1, &twin_.q2}) {
    const nd::Var av(gp_actions, true);
    const nd::Var g = nd::grad(nd::sum(nn::q_forward(*net, s, av)), av, true);
    const nd::Var norm = nd::sqrt(nd::sum(nd::square(g), 1, true) + kNormFloor);
    const nd::Var pen = nd::mean(norm * w);
    out.grad_norm.push_back(mean_of(norm.value()));
    out.penalty.push_back(pen);
    penalty_sum = penalty_sum.defined() ? penalty_sum + pen : pen;
  }
  out.total = out.td + penalty_sum * lambda;
  return out;
}

PolicyLoss Agent::policy_loss(const Batch& batch, const PolicyNoise& noise, const bm::CvaeModel& member) const {
  const nd::Var s = nd::constant(batch.states);
  const auto pi = nn::policy_forward(policy_, s, bounds_);
  const auto sample = pi.rsample(noise.action);
  const nn::Mlp q1 = twin_.q1.frozen();
  const nn::Mlp q2 = twin_.q2.frozen();
  const nd::Var q = nd::minimum(nn::q_forward(q1, s, sample.action), nn::q_forward(q2, s, sample.action));
  const nd::Var entropy = -nd::mean(pi.log_prob_pre(sample.pre));
  const nd::Var div = nd::mean(divergence(pi, s, member, noise.divergence));
  PolicyLoss out;
  out.total = -nd::mean(q) + (div - epsilon_) * alpha_kl() + (target_entropy_ - entropy) * alpha_ent_;
  out.q_mean = mean_of(q.value());
  out.divergence = div.item();
  out.entropy = entropy.item();
  return out;
}

EvaluationReport Agent::policy_evaluation_step(const Batch& batch) {
  const EvaluationNoise noise = draw_evaluation_noise(batch.states.rows());
  const bm::CvaeModel& member = behavior_.pick(rng_);
  const EvaluationLoss loss = evaluation_loss(batch, noise, config_.gp_enabled ? &member : nullptr, lambda_gp());
  const double total = loss.total.item();
  if (!std::isfinite(total)) {
    nd::NoGradGuard no_grad;
    const double q = mean_of(nn::q_forward(twin_.q1, nd::constant(batch.states), nd::constant(batch.actions)).value());
    throw NumericError(fmt::format("policy evaluation: non-finite loss at step {} (last batch mean Q {})", steps_, q));
  }
  const auto params = concat_params(twin_.q1, twin_.q2);
  q_opt_.step(params, grad_values(loss.total, params));

  EvaluationReport r{total, loss.td.item(), 0.0, 0.0};
  if (!loss.penalty.empty()) {
    r.penalty = 0.5 * (loss.penalty[0].item() + loss.penalty[1].item());
    r.grad_norm = 0.5 * (loss.grad_norm[0] + loss.grad_norm[1]);
    log_lambda_gp_ = std::clamp(log_lambda_gp_ + config_.dual_lr * (r.penalty - config_.lambda_constraint_target),
                                -kLogMultiplierLimit, kLogMultiplierLimit);
  }
  return r;
}

void Agent::update_duals_policy(double divergence_value, double entropy) {
  log_alpha_kl_ = std::clamp(log_alpha_kl_ + config_.dual_lr * (divergence_value - epsilon_), -kLogMultiplierLimit,
                             kLogMultiplierLimit);
  alpha_ent_ = std::clamp(alpha_ent_ + config_.dual_lr * (target_entropy_ - entropy), -kSignedMultiplierLimit,
                          kSignedMultiplierLimit);
}

PolicyReport Agent::policy_update_step(const Batch& batch) {
  const PolicyNoise noise = draw_policy_noise(batch.states.rows());
  const bm::CvaeModel& member = behavior_.pick(rng_);
  const PolicyLoss loss = policy_loss(batch, noise, member);
  const double total = loss.total.item();
  if (!std::isfinite(total)) {
    throw NumericError(fmt::format("policy update: non-finite loss at step {} (batch mean Q {})", steps_, loss.q_mean));
  }
  const auto params = policy_.parameters();
  policy_opt_.step(params, grad_values(loss.total, params));
  update_duals_policy(loss.divergence, loss.entropy);
  return {total, loss.q_mean, loss.divergence, loss.entropy};
}

StepReport Agent::train_step(const env::Dataset& scaled) {
  const Batch batch = sample_batch(scaled, config_.batch_size, rng_);
  StepReport r;
  r.evaluation = policy_evaluation_step(batch);
  r.policy = policy_update_step(batch);
  twin_.polyak_update(config_.tau);
  ++steps_;
  return r;
}

// ----------------------------------------------------------- initialization

InitReport Agent::initialize_policy(const env::Dataset& scaled) {
  if (scaled.size() == 0) throw std::invalid_argument("initialize: empty dataset");
  const nd::Array states = metric_states(scaled);
  const std::uint64_t eval_seed = seed_ + 1;
  const std::size_t d = action_dim();
  const std::size_t latent = behavior_.members[0].latent_dim();
  const std::size_t n_steps = config_.init_policy_steps;
  const std::size_t every = std::max<std::size_t>(1, n_steps / 20);

  InitReport report;
  nn::Adam opt(policy_.parameters(), {.lr = config_.init_policy_lr});
  nn::Mlp best_policy = policy_.clone();
  double best = mean_kl_bound(states, eval_seed);
  report.bound_curve.push_back(best);
  for (std::size_t t = 1; t <= n_steps; ++t) {
    std::vector<std::size_t> rows(config_.batch_size);
    for (auto& r : rows) r = rng_.index(scaled.size());
    const nd::Var s = nd::constant(nd::take_rows(scaled.states, rows));
    const bm::CvaeModel& member = behavior_.pick(rng_);
    const nd::Array pn = rng_.normal_array({rows.size(), d});
    const nd::Array ln = rng_.normal_array({rows.size(), latent});
    const auto pi = nn::policy_forward(policy_, s, bounds_);
    const nd::Var loss = nd::mean(bm::kl_upper_bound(member, pi.base, s, pn, ln));
    const double v = loss.item();
    if (!std::isfinite(v) || std::abs(v) > config_.init_abort_loss) {
      throw NumericError(fmt::format("policy initialization diverged at step {} (bound {})", t, v));
    }
    const auto params = policy_.parameters();
    opt.step(params, grad_values(loss, params));
    if (t % every == 0 || t == n_steps) {
      const double m = mean_kl_bound(states, eval_seed);
      report.bound_curve.push_back(m);
      if (m < best) {
        best = m;
        best_policy.assign(policy_);
      }
    }
  }
  policy_.assign(best_policy);

  if (config_.regularizer == Regularizer::kl_upper) {
    eps_min_ = best;
    epsilon_ = eps_min_ + config_.eps_generalization;
  } else {
    // Mean per-state MMD of the initialized policy, averaged over members.
    nd::NoGradGuard no_grad;
    Rng r(eval_seed);
    const nd::Var s = nd::constant(states);
    const auto pi = nn::policy_forward(policy_, s, bounds_);
    double acc = 0.0;
    for (const auto& member : behavior_.members) {
      const auto noise = make_divergence_noise(r, config_.regularizer, states.rows(), d, latent, config_.mmd_samples);
      acc += mean_of(divergence(pi, s, member, noise).value());
    }
    eps_min_ = acc / static_cast<double>(behavior_.size());
    epsilon_ = eps_min_ + config_.mmd_eps_generalization;
  }
  behavior_entropy_ = mean_entropy(states, seed_ + 2);
  target_entropy_ = target_entropy_from(behavior_entropy_, config_.target_entropy_fraction);
  report.eps_min = eps_min_;
  report.epsilon = epsilon_;
  report.behavior_entropy = behavior_entropy_;
  report.target_entropy = target_entropy_;
  return report;
}

double Agent::initialize_q(const env::Dataset& scaled, std::size_t steps) {
  double last = 0.0;
  const auto params = concat_params(twin_.q1, twin_.q2);
  for (std::size_t t = 1; t <= steps; ++t) {
    const Batch batch = sample_batch(scaled, config_.batch_size, rng_);
    const EvaluationNoise noise = draw_evaluation_noise(batch.states.rows());
    const EvaluationLoss loss = evaluation_loss(batch, noise, nullptr, 0.0);
    last = loss.total.item();
    if (!std::isfinite(last) || last > config_.init_abort_loss) {
      throw NumericError(fmt::format("Q initialization diverged at step {} (TD loss {})", t, last));
    }
    q_opt_.step(params, grad_values(loss.total, params));
    twin_.polyak_update(config_.tau);
  }
  return last;
}

InitReport Agent::initialize(const env::Dataset& scaled) {
  InitReport report = initialize_policy(scaled);
  report.final_td_loss = initialize_q(scaled, config_.init_q_steps);
  initialized_ = true;
  return report;
}

// ------------------------------------------------------------------ metrics

double Agent::mean_kl_bound(const nd::Array& states, std::uint64_t seed) const {
  nd::NoGradGuard no_grad;
  Rng r(seed);
  const nd::Var s = nd::constant(states);
  const auto pi = nn::policy_forward(policy_, s, bounds_);
  double acc = 0.0;
  for (const auto& member : behavior_.members) {
    const nd::Array pn = r.normal_array({states.rows(), action_dim()});
    const nd::Array ln = r.normal_array({states.rows(), member.latent_dim()});
    acc += mean_of(bm::kl_upper_bound(member, pi.base, s, pn, ln).value());
  }
  return acc / static_cast<double>(behavior_.size());
}

double Agent::mean_entropy(const nd::Array& states, std::uint64_t seed, std::size_t samples) const {
  nd::NoGradGuard no_grad;
  Rng r(seed);
  const auto pi = nn::policy_forward(policy_, nd::constant(states), bounds_);
  return mean_of(pi.entropy(r.normal_array({samples, states.rows(), action_dim()})).value());
}

nd::Array Agent::act_deterministic(const nd::Array& states) const {
  nd::NoGradGuard no_grad;
  return nn::policy_forward(policy_, nd::constant(states), bounds_).mode().value();
}

double Agent::mean_q(const nd::Array& states) const {
  nd::NoGradGuard no_grad;
  const nd::Var s = nd::constant(states);
  const nd::Var a = nd::constant(act_deterministic(states));
  return 0.5 * (mean_of(nn::q_forward(twin_.q1, s, a).value()) + mean_of(nn::q_forward(twin_.q2, s, a).value()));
}

double Agent::mean_action_grad_norm(const nd::Array& states) const {
  const nd::Var s = nd::constant(states);
  const nd::Var a(act_deterministic(states), true);
  const nn::Mlp q1 = twin_.q1.frozen();
  const nd::Array g = nd::grad(nd::sum(nn::q_forward(q1, s, a)), a).value();
  double acc = 0.0;
  for (std::size_t i = 0; i < g.rows(); ++i) {
    double sq = 0.0;
    for (std::size_t k = 0; k < g.cols(); ++k) sq += g(i, k) * g(i, k);
    acc += std::sqrt(sq);
  }
  return acc / static_cast<double>(g.rows());
}

env::Policy Agent::as_policy() const { return deterministic_policy(policy_, bounds_); }

EpochRecord Agent::measure(const env::Dataset& scaled, const env::ScoreReference& ref) const {
  const nd::Array states = metric_states(scaled);
  const std::uint64_t stream = seed_ * 1000003ULL + epoch_;
  EpochRecord r;
  r.epoch = epoch_;
  r.mean_dataset_q = mean_q(states);
  r.kl_bound_mean = mean_kl_bound(states, stream + 11);
  r.entropy_mean = mean_entropy(states, stream + 13);
  r.alpha_kl = alpha_kl();
  r.alpha_ent = alpha_ent_;
  r.lambda_gp = lambda_gp();
  if (config_.eval_episodes > 0) {
    const auto eval = env::evaluate_policy(as_policy(), config_.eval_episodes, stream + 17);
    r.eval_return_raw = eval.mean_return;
    r.eval_return_normalized = env::normalized_score(eval.mean_return, ref);
  }
  r.divergence_mean = r.kl_bound_mean;
  r.epsilon = epsilon_;
  r.target_entropy = target_entropy_;
  r.action_grad_norm = mean_action_grad_norm(states);
  r.steps = steps_;
  return r;
}

EpochRecord Agent::run_epoch(const env::Dataset& scaled, const env::ScoreReference& ref) {
  if (!initialized_) throw std::logic_error("Agent::run_epoch: agent is not initialized");
  double div = 0.0;
  double td = 0.0;
  for (std::size_t t = 0; t < config_.steps_per_epoch; ++t) {
    const StepReport s = train_step(scaled);
    div += s.policy.divergence;
    td += s.evaluation.td_loss;
  }
  ++epoch_;
  EpochRecord r = measure(scaled, ref);
  const double n = static_cast<double>(config_.steps_per_epoch);
  r.divergence_mean = div / n;
  r.td_loss = td / n;
  return r;
}

std::vector<EpochRecord> train(Agent& agent, const env::Dataset& scaled, const env::ScoreReference& ref,
                               const TrainHooks& hooks) {
  if (!agent.initialized()) throw std::logic_error("train: agent is not initialized");
  std::vector<EpochRecord> log;
  auto emit = [&](EpochRecord r) {
    if (hooks.on_epoch) hooks.on_epoch(r);
    log.push_back(std::move(r));
  };
  if (agent.epoch() == 0 && agent.total_steps() == 0) emit(agent.measure(scaled, ref));
  const double stop = agent.config().stop_when_q_exceeds;
  while (agent.epoch() < agent.config().epochs) {
    emit(agent.run_epoch(scaled, ref));
    if (stop > 0.0 && log.back().mean_dataset_q > stop) break;
  }
  return log;
}

nlohmann::json EpochRecord::to_json() const {
  return {{"epoch", epoch},
          {"mean_dataset_q", mean_dataset_q},
          {"kl_bound_mean", kl_bound_mean},
          {"entropy_mean", entropy_mean},
          {"alpha_kl", alpha_kl},
          {"alpha_ent", alpha_ent},
          {"lambda_gp", lambda_gp},
          {"eval_return_raw", eval_return_raw},
          {"eval_return_normalized", eval_return_normalized},
          {"divergence_mean", divergence_mean},
          {"epsilon", epsilon},
          {"target_entropy", target_entropy},
          {"td_loss", td_loss},
          {"action_grad_norm", action_grad_norm},
          {"steps", steps}};
}

EpochRecord EpochRecord::from_json(const nlohmann::json& j) {
  EpochRecord r;
  r.epoch = j.at("epoch").get<std::size_t>();
  r.mean_dataset_q = j.at("mean_dataset_q").get<double>();
  r.kl_bound_mean = j.at("kl_bound_mean").get<double>();
  r.entropy_mean = j.at("entropy_mean").get<double>();
  r.alpha_kl = j.at("alpha_kl").get<double>();
  r.alpha_ent = j.at("alpha_ent").get<double>();
  r.lambda_gp = j.at("lambda_gp").get<double>();
  r.eval_return_raw = j.at("eval_return_raw").get<double>();
  r.eval_return_normalized = j.at("eval_return_normalized").get<double>();
  r.divergence_mean = j.value("divergence_mean", 0.0);
  r.epsilon = j.value("epsilon", 0.0);
  r.target_entropy = j.value("target_entropy", 0.0);
  r.td_loss = j.value("td_loss", 0.0);
  r.action_grad_norm = j.value("action_grad_norm", 0.0);
  r.steps = j.value("steps", std::size_t{0});
  return r;
}

// -------------------------------------------------------------- checkpoints

namespace {

void save_adam(const std::filesystem::path& path, const nn::Adam& opt) {
  std::vector<nd::Array> arrays = opt.first_moments();
  arrays.insert(arrays.end(), opt.second_moments().begin(), opt.second_moments().end());
  nn::save_arrays(path, arrays);
}

void load_adam(const std::filesystem::path& path, nn::Adam& opt, std::size_t step_count) {
  auto arrays = nn::load_arrays(path);
  const std::size_t n = opt.first_moments().size();
  if (arrays.size() != 2 * n) throw FormatError(path.string() + ": optimizer moment count mismatch");
  std::vector<nd::Array> m(std::make_move_iterator(arrays.begin()), std::make_move_iterator(arrays.begin() + n));
  std::vector<nd::Array> v(std::make_move_iterator(arrays.begin() + n), std::make_move_iterator(arrays.end()));
  try {
    opt.restore(step_count, std::move(m), std::move(v));
  } catch (const std::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void require_same_sizes(const nn::Mlp& got, const nn::Mlp& expected, const std::string& what) {
  if (got.sizes() != expected.sizes()) throw FormatError(what + ": architecture does not match the config");
}

}  // namespace

void Agent::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  nn::save_mlp(dir / "policy.bin", policy_);
  nn::save_mlp(dir / "q1.bin", twin_.q1);
  nn::save_mlp(dir / "q2.bin", twin_.q2);
  nn::save_mlp(dir / "q1_target.bin", twin_.q1_target);
  nn::save_mlp(dir / "q2_target.bin", twin_.q2_target);
  save_adam(dir / "policy_adam.bin", policy_opt_);
  save_adam(dir / "q_adam.bin", q_opt_);
  bm::save_ensemble(dir / "behavior", behavior_);
  const nlohmann::json state = {
      {"format", "bracplus-agent"},
      {"version", 1},
      {"config", config_.to_json()},
      {"seed", seed_},
      {"state_dim", state_dim_},
      {"action_low", bounds_.low.values()},
      {"action_high", bounds_.high.values()},
      {"log_alpha_kl", log_alpha_kl_},
      {"alpha_ent", alpha_ent_},
      {"log_lambda_gp", log_lambda_gp_},
      {"epsilon", epsilon_},
      {"eps_min", eps_min_},
      {"target_entropy", target_entropy_},
      {"behavior_entropy", behavior_entropy_},
      {"initialized", initialized_},
      {"epoch", epoch_},
      {"steps", steps_},
      {"policy_adam_steps", policy_opt_.step_count()},
      {"q_adam_steps", q_opt_.step_count()},
      {"rng_state", rng_.state()}};
  std::ofstream os(dir / "agent.json", std::ios::trunc);
  if (!os) throw FormatError("cannot write " + (dir / "agent.json").string());
  os << state.dump(2) << '\n';
}

Agent Agent::load(const std::filesystem::path& dir) {
  std::ifstream is(dir / "agent.json");
  if (!is) throw FormatError("cannot open " + (dir / "agent.json").string());
  nlohmann::json j;
  try {
    is >> j;
    if (j.at("format") != "bracplus-agent" || j.at("version") != 1) {
      throw FormatError((dir / "agent.json").string() + ": not an agent checkpoint");
    }
    Agent a;
    a.config_ = AgentConfig::from_json(j.at("config"));
    a.seed_ = j.at("seed").get<std::uint64_t>();
    a.state_dim_ = j.at("state_dim").get<std::size_t>();
    const auto low = j.at("action_low").get<std::vector<double>>();
    const auto high = j.at("action_high").get<std::vector<double>>();
    a.bounds_ = {nd::Array({low.size()}, low), nd::Array({high.size()}, high)};
    a.kernel_ = {divergence::KernelFamily::laplacian, a.config_.mmd_bandwidth};
    for (const auto& m : bm::load_ensemble(dir / "behavior").members) a.behavior_.members.push_back(m.frozen());

    const std::size_t d = a.bounds_.dim();
    const std::size_t h = a.config_.hidden;
    a.policy_ = nn::load_mlp(dir / "policy.bin");
    require_same_sizes(a.policy_, nn::Mlp::zeros({a.state_dim_, h, h, 2 * d}), "policy.bin");
    a.twin_.q1 = nn::load_mlp(dir / "q1.bin");
    a.twin_.q2 = nn::load_mlp(dir / "q2.bin");
    a.twin_.q1_target = nn::load_mlp(dir / "q1_target.bin");
    a.twin_.q2_target = nn::load_mlp(dir / "q2_target.bin");
    const nn::Mlp q_shape = nn::Mlp::zeros({a.state_dim_ + d, h, h, 1});
    for (const nn::Mlp* q : {&a.twin_.q1, &a.twin_.q2, &a.twin_.q1_target, &a.twin_.q2_target}) {
      require_same_sizes(*q, q_shape, "Q checkpoint");
    }
    a.policy_opt_ = nn::Adam(a.policy_.parameters(), {.lr = a.config_.policy_lr});
    a.q_opt_ = nn::Adam(concat_params(a.twin_.q1, a.twin_.q2), {.lr = a.config_.q_lr});
    load_adam(dir / "policy_adam.bin", a.policy_opt_, j.at("policy_adam_steps").get<std::size_t>());
    load_adam(dir / "q_adam.bin", a.q_opt_, j.at("q_adam_steps").get<std::size_t>());

    a.log_alpha_kl_ = j.at("log_alpha_kl").get<double>();
    a.alpha_ent_ = j.at("alpha_ent").get<double>();
    a.log_lambda_gp_ = j.at("log_lambda_gp").get<double>();
    a.epsilon_ = j.at("epsilon").get<double>();
    a.eps_min_ = j.at("eps_min").get<double>();
    a.target_entropy_ = j.at("target_entropy").get<double>();
    a.behavior_entropy_ = j.at("behavior_entropy").get<double>();
    a.initialized_ = j.at("initialized").get<bool>();
    a.epoch_ = j.at("epoch").get<std::size_t>();
    a.steps_ = j.at("steps").get<std::size_t>();
    a.rng_.restore(j.at("rng_state").get<std::string>());
    return a;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError((dir / "agent.json").string() + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw FormatError((dir / "agent.json").string() + ": " + e.what());
  }
}

// ----------------------------------------------------------------- baseline

nn::Mlp train_bc(const env::Dataset& data, const BcConfig& config, std::uint64_t seed,
                 const std::function<void(std::size_t, double)>& on_step) {
  if (data.size() == 0) throw std::invalid_argument("train_bc: empty dataset");
  if (config.batch_size == 0 || config.hidden == 0 || !(config.lr > 0.0)) {
    throw std::invalid_argument("train_bc: batch_size, hidden and lr must be positive");
  }
  Rng rng(seed);
  const auto bounds = data.action_bounds();
  const std::size_t d = bounds.dim();
  nn::Mlp net({data.state_dim(), config.hidden, config.hidden, 2 * d}, rng);
  nn::Adam opt(net.parameters(), {.lr = config.lr});
  const nd::Array pre_all = dist::to_pre_squash(data.actions, bounds);
  for (std::size_t t = 1; t <= config.steps; ++t) {
    std::vector<std::size_t> rows(config.batch_size);
    for (auto& r : rows) r = rng.index(data.size());
    const auto pi = nn::policy_forward(net, nd::constant(nd::take_rows(data.states, rows)), bounds);
    const nd::Var nll = -nd::mean(pi.log_prob_pre(nd::constant(nd::take_rows(pre_all, rows))));
    const double v = nll.item();
    if (!std::isfinite(v)) throw NumericError(fmt::format("behavior cloning: non-finite loss at step {}", t));
    const auto params = net.parameters();
    opt.step(params, grad_values(nll, params));
    if (on_step) on_step(t, v);
  }
  return net;
}

env::Policy deterministic_policy(const nn::Mlp& net, const dist::ActionBounds& bounds) {
  return [net = net.frozen(), bounds](const env::Vec4& s) {
    nd::NoGradGuard no_grad;
    const nd::Array a = nn::policy_forward(net, nd::constant(row_vector(s)), bounds).mode().value();
    return env::Vec2{a[0], a[1]};
  };
}

// ------------------------------------------------------------------ pinsker

ActionGrid ActionGrid::uniform(std::size_t dim, double low, double high, std::size_t per_axis) {
  if (dim != 1 && dim != 2) throw std::invalid_argument("ActionGrid: only 1-D and 2-D grids are supported");
  if (per_axis == 0 || !(high > low)) throw std::invalid_argument("ActionGrid: need per_axis > 0 and high > low");
  const double h = (high - low) / static_cast<double>(per_axis);
  ActionGrid g;
  g.cell_volume = dim == 1 ? h : h * h;
  for (std::size_t i = 0; i < per_axis; ++i) {
    const double x = low + (static_cast<double>(i) + 0.5) * h;
    if (dim == 1) {
      g.points.push_back({x});
      continue;
    }
    for (std::size_t k = 0; k < per_axis; ++k) g.points.push_back({x, low + (static_cast<double>(k) + 0.5) * h});
  }
  return g;
}

PinskerSides pinsker_gap(const ActionFunction& q_new, const ActionFunction& q_old, const ActionFunction& pi_new,
                         const ActionFunction& pi_b, const ActionGrid& grid) {
  const std::size_t n = grid.points.size();
  if (n == 0) throw std::invalid_argument("pinsker_gap: empty grid");
  std::vector<double> p(n);
  std::vector<double> q(n);
  std::vector<double> dq(n);
  double zp = 0.0;
  double zq = 0.0;
  PinskerSides out;
  for (std::size_t i = 0; i < n; ++i) {
    const std::span<const double> a(grid.points[i]);
    p[i] = pi_new(a) * grid.cell_volume;
    q[i] = pi_b(a) * grid.cell_volume;
    if (!(p[i] >= 0.0) || !(q[i] >= 0.0)) throw std::invalid_argument("pinsker_gap: densities must be non-negative");
    zp += p[i];
    zq += q[i];
    dq[i] = q_new(a) - q_old(a);
    out.sup_delta = std::max(out.sup_delta, std::abs(dq[i]));
  }
  if (!(zp > 0.0) || !(zq > 0.0)) throw std::invalid_argument("pinsker_gap: densities vanish on the grid");
  double e_new = 0.0;
  double e_b = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    p[i] /= zp;
    q[i] /= zq;
    e_new += p[i] * dq[i];
    e_b += q[i] * dq[i];
    if (p[i] > 0.0) {
      out.kl += q[i] > 0.0 ? p[i] * std::log(p[i] / q[i]) : std::numeric_limits<double>::infinity();
    }
  }
  out.kl = std::max(out.kl, 0.0);
  out.lhs = std::abs(e_new - e_b);
  // |E_p f - E_q f| <= sup|f| * ||p - q||_1 = 2 sup|f| TV <= 2 sup|f| sqrt(KL / 2).
  out.rhs = 2.0 * out.sup_delta * std::sqrt(out.kl / 2.0);
  return out;
}

}  // namespace bracplus::agent
