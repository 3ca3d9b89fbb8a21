// Copyright 2026 The bracplus Authors
// SPDX-License-Identifier: Apache-2.0

#include "bracplus/envs_data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <ostream>
#include <stdexcept>

#include <fmt/format.h>

#include "binary_io.hpp"
#include "bracplus/errors.hpp"

namespace bracplus::env {

namespace {

constexpr double kMediumGain = 0.5;
constexpr double kExpertGain = 4.0;
constexpr double kExpertDamping = 3.0;
constexpr double kMediumSigma = 0.3;
constexpr double kExpertSigma = 0.05;
constexpr double kMixedSigmaStart = 0.5;
constexpr double kMixedSigmaEnd = 0.05;

double clip1(double v) { return std::clamp(v, -1.0, 1.0); }

}  // namespace

Vec4 TwoGoalPointMass::reset(Rng& rng) {
  state_ = {rng.uniform(-kStartJitter, kStartJitter), rng.uniform(-kStartJitter, kStartJitter), 0.0, 0.0};
  t_ = 0;
  return state_;
}

void TwoGoalPointMass::reset_to(const Vec4& state) {
  for (std::size_t i = 0; i < 4; ++i) state_[i] = clip1(state[i]);
  t_ = 0;
}

StepResult TwoGoalPointMass::step(const Vec2& action) {
  if (t_ >= kHorizon) throw std::logic_error("TwoGoalPointMass::step past the horizon; call reset");
  const Vec2 a{clip1(action[0]), clip1(action[1])};
  for (std::size_t i = 0; i < 2; ++i) {
    // Semi-implicit Euler: the position moves with the updated velocity.
    state_[2 + i] = clip1(state_[2 + i] + kDt * a[i] - kFriction * state_[2 + i]);
    state_[i] = clip1(state_[i] + kDt * state_[2 + i]);
  }
  ++t_;
  return {state_, reward(state_), t_ == kHorizon};
}

double TwoGoalPointMass::goal_distance(const Vec4& s, std::size_t goal) {
  return std::hypot(s[0] - kGoals[goal][0], s[1] - kGoals[goal][1]);
}

std::size_t TwoGoalPointMass::nearest_goal(const Vec4& s) { return goal_distance(s, 0) <= goal_distance(s, 1) ? 0 : 1; }

double TwoGoalPointMass::reward(const Vec4& s) { return -std::min(goal_distance(s, 0), goal_distance(s, 1)); }

ControllerKind parse_controller(const std::string& name) {
  if (name == "random") return ControllerKind::random;
  if (name == "medium") return ControllerKind::medium;
  if (name == "expert") return ControllerKind::expert;
  if (name == "mixed") return ControllerKind::mixed;
  throw std::invalid_argument("unknown controller '" + name + "' (random|medium|expert|mixed)");
}

std::string to_string(ControllerKind kind) {
  switch (kind) {
    case ControllerKind::random: return "random";
    case ControllerKind::medium: return "medium";
    case ControllerKind::expert: return "expert";
    case ControllerKind::mixed: return "mixed";
  }
  return "?";
}

ScriptedController::ScriptedController(ControllerSpec spec, std::size_t total_episodes)
    : spec_(spec), total_episodes_(std::max<std::size_t>(1, total_episodes)) {}

void ScriptedController::begin_episode(std::size_t episode, Rng& rng) {
  switch (spec_.kind) {
    case ControllerKind::random: sigma_ = 0.0; break;
    case ControllerKind::medium: sigma_ = spec_.noise_sigma >= 0 ? spec_.noise_sigma : kMediumSigma; break;
    case ControllerKind::expert: sigma_ = spec_.noise_sigma >= 0 ? spec_.noise_sigma : kExpertSigma; break;
    case ControllerKind::mixed: {
      const double frac =
          total_episodes_ > 1 ? static_cast<double>(episode) / static_cast<double>(total_episodes_ - 1) : 1.0;
      sigma_ = spec_.noise_sigma >= 0 ? spec_.noise_sigma : kMixedSigmaStart + (kMixedSigmaEnd - kMixedSigmaStart) * frac;
      break;
    }
  }
  goal_ = rng.uniform() < 0.5 ? 0 : 1;
}

Vec2 ScriptedController::mean_pre_squash(const Vec4& s) const {
  if (spec_.kind == ControllerKind::random) return {0.0, 0.0};
  if (spec_.kind == ControllerKind::medium) {
    const auto& g = TwoGoalPointMass::kGoals[TwoGoalPointMass::nearest_goal(s)];
    return {kMediumGain * (g[0] - s[0]), kMediumGain * (g[1] - s[1])};
  }
  const auto& g = TwoGoalPointMass::kGoals[goal_];
  return {kExpertGain * (g[0] - s[0]) - kExpertDamping * s[2], kExpertGain * (g[1] - s[1]) - kExpertDamping * s[3]};
}

Vec2 ScriptedController::act(const Vec4& s, Rng& rng) const {
  if (spec_.kind == ControllerKind::random) return {rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
  const Vec2 m = mean_pre_squash(s);
  return {std::tanh(m[0] + sigma_ * rng.normal()), std::tanh(m[1] + sigma_ * rng.normal())};
}

dist::ActionBounds Dataset::action_bounds() const {
  const auto lo = metadata.at("action_low").get<std::vector<double>>();
  const auto hi = metadata.at("action_high").get<std::vector<double>>();
  return {nd::Array({lo.size()}, lo), nd::Array({hi.size()}, hi)};
}

void Dataset::validate() const {
  const std::size_t n = size();
  auto check = [n](const nd::Array& a, const char* name) {
    if (a.rank() != 2 || a.rows() != n) {
      throw std::invalid_argument(std::string("dataset column '") + name + "' has shape " + nd::to_string(a.shape()) +
                                  ", expected " + std::to_string(n) + " rows");
    }
  };
  check(actions, "actions");
  check(rewards, "rewards");
  check(next_states, "next_states");
  check(dones, "dones");
  if (rewards.cols() != 1 || dones.cols() != 1 || next_states.cols() != states.cols()) {
    throw std::invalid_argument("dataset columns have inconsistent widths");
  }
  dist::check_in_bounds(actions, action_bounds());
  for (double d : dones.values()) {
    if (d != 0.0 && d != 1.0) throw std::invalid_argument("dataset dones must be 0 or 1");
  }
}

namespace {

nlohmann::json base_metadata(const std::string& policy, std::size_t n, std::size_t episodes, std::uint64_t seed) {
  const auto b = TwoGoalPointMass::action_bounds();
  return {{"env", TwoGoalPointMass::kId},
          {"policies", nlohmann::json::array({policy})},
          {"action_low", std::vector<double>(b.low.values().begin(), b.low.values().end())},
          {"action_high", std::vector<double>(b.high.values().begin(), b.high.values().end())},
          {"size", n},
          {"episodes", episodes},
          {"seed", seed}};
}

void set_reward_range(Dataset& d) {
  const auto [lo, hi] = std::minmax_element(d.rewards.values().begin(), d.rewards.values().end());
  d.metadata["r_min"] = d.size() ? *lo : 0.0;
  d.metadata["r_max"] = d.size() ? *hi : 0.0;
}

}  // namespace

Dataset collect(const ControllerSpec& controller, std::size_t episodes, std::uint64_t seed) {
  if (episodes == 0) throw std::invalid_argument("collect: need at least one episode");
  constexpr std::size_t H = TwoGoalPointMass::kHorizon;
  const std::size_t n = episodes * H;
  Dataset d{nd::Array({n, 4}), nd::Array({n, 2}), nd::Array({n, 1}), nd::Array({n, 4}), nd::Array({n, 1})};
  Rng rng(seed);
  TwoGoalPointMass env;
  ScriptedController ctl(controller, episodes);
  std::size_t row = 0;
  for (std::size_t ep = 0; ep < episodes; ++ep) {
    ctl.begin_episode(ep, rng);
    Vec4 s = env.reset(rng);
    for (std::size_t t = 0; t < H; ++t, ++row) {
      const Vec2 a = ctl.act(s, rng);
      const auto r = env.step(a);
      for (std::size_t i = 0; i < 4; ++i) {
        d.states(row, i) = s[i];
        d.next_states(row, i) = r.next_state[i];
      }
      d.actions(row, 0) = a[0];
      d.actions(row, 1) = a[1];
      d.rewards[row] = r.reward;
      d.dones[row] = r.done ? 1.0 : 0.0;
      s = r.next_state;
    }
  }
  d.metadata = base_metadata(to_string(controller.kind), n, episodes, seed);
  set_reward_range(d);
  return d;
}

Dataset concatenate(const Dataset& a, const Dataset& b) {
  auto stack = [](const nd::Array& x, const nd::Array& y) {
    if (x.cols() != y.cols()) throw nd::ShapeError("concatenate", x.shape(), y.shape());
    nd::Array out({x.rows() + y.rows(), x.cols()});
    std::copy(x.values().begin(), x.values().end(), out.data());
    std::copy(y.values().begin(), y.values().end(), out.data() + x.size());
    return out;
  };
  Dataset d{stack(a.states, b.states), stack(a.actions, b.actions), stack(a.rewards, b.rewards),
            stack(a.next_states, b.next_states), stack(a.dones, b.dones), a.metadata};
  auto policies = a.metadata.at("policies");
  for (const auto& p : b.metadata.at("policies")) policies.push_back(p);
  d.metadata["policies"] = policies;
  d.metadata["size"] = d.size();
  d.metadata["episodes"] = a.metadata.value("episodes", 0) + b.metadata.value("episodes", 0);
  d.metadata["seed"] = {a.metadata.value("seed", 0), b.metadata.value("seed", 0)};
  d.metadata["r_min"] = std::min(a.r_min(), b.r_min());
  d.metadata["r_max"] = std::max(a.r_max(), b.r_max());
  return d;
}

Dataset make_dataset(const std::string& mode, std::size_t episodes, std::uint64_t seed) {
  if (mode == "medium-expert") {
    return concatenate(collect({ControllerKind::medium}, episodes, seed),
                       collect({ControllerKind::expert}, episodes, seed + 1));
  }
  return collect({parse_controller(mode)}, episodes, seed);
}

void save_dataset(const std::filesystem::path& path, const Dataset& data) {
  data.validate();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  os.write(kDatasetMagic, 6);
  io::write_pod<std::uint32_t>(os, kDatasetVersion);
  io::write_pod<std::uint64_t>(os, data.size());
  io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(data.state_dim()));
  io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(data.action_dim()));
  for (const auto* col : {&data.states, &data.actions, &data.rewards, &data.next_states, &data.dones}) {
    io::write_doubles(os, col->data(), col->size());
  }
  const std::string meta = data.metadata.dump();
  io::write_pod<std::uint64_t>(os, meta.size());
  os.write(meta.data(), static_cast<std::streamsize>(meta.size()));
  if (!os) throw FormatError("write failed for " + path.string());
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open dataset " + path.string());
  io::Reader r(is, path.string());
  r.expect_magic(kDatasetMagic);
  const auto version = r.pod<std::uint32_t>();
  if (version != kDatasetVersion) {
    throw FormatError(path.string() + ": unsupported dataset version " + std::to_string(version));
  }
  const auto n = r.pod<std::uint64_t>();
  const auto sd = r.pod<std::uint32_t>();
  const auto ad = r.pod<std::uint32_t>();
  const auto file_size = std::filesystem::file_size(path);
  if (sd == 0 || ad == 0 || n * (2 * sd + ad + 2) * sizeof(double) > file_size) {
    throw FormatError(path.string() + ": header claims more data than the file holds (truncated?)");
  }
  Dataset d{nd::Array({n, sd}), nd::Array({n, ad}), nd::Array({n, 1}), nd::Array({n, sd}), nd::Array({n, 1})};
  for (auto* col : {&d.states, &d.actions, &d.rewards, &d.next_states, &d.dones}) r.doubles(col->data(), col->size());
  const auto len = r.pod<std::uint64_t>();
  if (len > file_size) throw FormatError(path.string() + ": metadata length exceeds file size");
  std::string meta(len, '\0');
  r.bytes(meta.data(), len);
  if (!r.at_end()) throw FormatError(path.string() + ": trailing bytes after metadata");
  try {
    d.metadata = nlohmann::json::parse(meta);
    d.validate();
  } catch (const std::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return d;
}

void write_dataset_csv(std::ostream& os, const Dataset& data) {
  os << "s0,s1,s2,s3,a0,a1,reward,ns0,ns1,ns2,ns3,done\n";
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (std::size_t k = 0; k < data.state_dim(); ++k) os << fmt::format("{:.17g},", data.states(i, k));
    for (std::size_t k = 0; k < data.action_dim(); ++k) os << fmt::format("{:.17g},", data.actions(i, k));
    os << fmt::format("{:.17g},", data.rewards[i]);
    for (std::size_t k = 0; k < data.state_dim(); ++k) os << fmt::format("{:.17g},", data.next_states(i, k));
    os << data.dones[i] << '\n';
  }
}

void ScoreReference::validate() const {
  if (!(expert_return > random_return)) {
    throw std::invalid_argument(fmt::format("score reference: expert return {} must exceed random return {}",
                                            expert_return, random_return));
  }
}

nlohmann::json ScoreReference::to_json() const {
  return {{"env", env_id}, {"random_return", random_return}, {"expert_return", expert_return}};
}

ScoreReference ScoreReference::from_json(const nlohmann::json& j) {
  ScoreReference r{j.at("env").get<std::string>(), j.at("random_return").get<double>(),
                   j.at("expert_return").get<double>()};
  r.validate();
  return r;
}

double normalized_score(double raw_return, const ScoreReference& ref) {
  ref.validate();
  return 100.0 * (raw_return - ref.random_return) / (ref.expert_return - ref.random_return);
}

namespace {

EvalResult summarize(std::vector<double> returns) {
  double m = 0.0;
  for (double r : returns) m += r;
  m /= static_cast<double>(returns.size());
  double v = 0.0;
  for (double r : returns) v += (r - m) * (r - m);
  v /= static_cast<double>(returns.size());
  return {m, std::sqrt(v), std::move(returns)};
}

}  // namespace

EvalResult evaluate_policy(const Policy& policy, std::size_t episodes, std::uint64_t seed) {
  if (episodes == 0) throw std::invalid_argument("evaluate_policy: need at least one episode");
  Rng rng(seed);
  TwoGoalPointMass env;
  std::vector<double> returns;
  for (std::size_t ep = 0; ep < episodes; ++ep) {
    Vec4 s = env.reset(rng);
    double total = 0.0;
    for (;;) {
      const auto r = env.step(policy(s));
      total += r.reward;
      s = r.next_state;
      if (r.done) break;
    }
    returns.push_back(total);
  }
  return summarize(std::move(returns));
}

EvalResult evaluate_controller(const ControllerSpec& controller, std::size_t episodes, std::uint64_t seed) {
  const Dataset d = collect(controller, episodes, seed);
  std::vector<double> returns(episodes, 0.0);
  for (std::size_t i = 0; i < d.size(); ++i) returns[i / TwoGoalPointMass::kHorizon] += d.rewards[i];
  return summarize(std::move(returns));
}

ScoreReference compute_score_reference(std::size_t episodes, std::uint64_t seed) {
  ScoreReference ref{TwoGoalPointMass::kId, evaluate_controller({ControllerKind::random}, episodes, seed).mean_return,
                     evaluate_controller({ControllerKind::expert}, episodes, seed + 1).mean_return};
  ref.validate();
  return ref;
}

}  // namespace bracplus::env
