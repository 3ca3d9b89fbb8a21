// Copyright 2026 The bracplus Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>

#include <json.hpp>

#include "bracplus/distributions.hpp"
#include "bracplus/ndgrad/array.hpp"
#include "bracplus/random.hpp"

namespace bracplus::env {

using Vec2 = std::array<double, 2>;
using Vec4 = std::array<double, 4>;  // position x, y, velocity x, y

struct StepResult {
  Vec4 next_state;
  double reward;
  bool done;
};

/// Point mass on [-1, 1]^2 rewarded for staying near either of two goals.
class TwoGoalPointMass {
 public:
  static constexpr std::size_t kStateDim = 4;
  static constexpr std::size_t kActionDim = 2;
  static constexpr std::size_t kHorizon = 100;
  static constexpr double kDt = 0.05;
  static constexpr double kFriction = 0.1;
  static constexpr double kStartJitter = 0.05;
  static constexpr std::array<Vec2, 2> kGoals{{{0.7, 0.7}, {-0.7, -0.7}}};
  static constexpr const char* kId = "two-goal-point-mass";

  /// Position U(-jitter, jitter)^2 around the origin, zero velocity.
  Vec4 reset(Rng& rng);
  /// Starts from an explicit state (clipped to bounds).
  void reset_to(const Vec4& state);
  /// Out-of-bounds actions are clipped.
  StepResult step(const Vec2& action);

  const Vec4& state() const { return state_; }
  std::size_t t() const { return t_; }

  static double reward(const Vec4& state);
  static double goal_distance(const Vec4& state, std::size_t goal);
  static std::size_t nearest_goal(const Vec4& state);
  static dist::ActionBounds action_bounds() { return dist::ActionBounds::symmetric(kActionDim); }

 private:
  Vec4 state_{};
  std::size_t t_ = 0;
};

enum class ControllerKind { random, medium, expert, mixed };

ControllerKind parse_controller(const std::string& name);
std::string to_string(ControllerKind kind);

struct ControllerSpec {
  ControllerKind kind = ControllerKind::expert;
  /// Exploration noise in pre-squash space; negative selects the default
  /// of the controller (medium 0.3, expert 0.05, mixed anneals 0.5 -> 0.05).
  double noise_sigma = -1.0;
};

/// Scripted data-collection policy. Non-random controllers emit
/// a = tanh(f(s) + sigma * xi), so their action density is a tanh-Gaussian.
class ScriptedController {
 public:
  ScriptedController(ControllerSpec spec, std::size_t total_episodes);

  void begin_episode(std::size_t episode, Rng& rng);
  Vec2 act(const Vec4& state, Rng& rng) const;
  /// Pre-squash mean f(s) of the current episode's controller.
  Vec2 mean_pre_squash(const Vec4& state) const;

  double sigma() const { return sigma_; }
  std::size_t goal() const { return goal_; }

 private:
  ControllerSpec spec_;
  std::size_t total_episodes_;
  double sigma_ = 0.0;
  std::size_t goal_ = 0;
};

/// Columnar transitions plus JSON metadata (env, policies, r_min, r_max,
/// action_low, action_high, size, episodes, seed).
struct Dataset {
  nd::Array states;       // [N, 4]
  nd::Array actions;      // [N, 2]
  nd::Array rewards;      // [N, 1]
  nd::Array next_states;  // [N, 4]
  nd::Array dones;        // [N, 1]
  nlohmann::json metadata = nlohmann::json::object();

  std::size_t size() const { return states.rank() == 2 ? states.rows() : 0; }
  std::size_t state_dim() const { return states.cols(); }
  std::size_t action_dim() const { return actions.cols(); }
  double r_min() const { return metadata.at("r_min").get<double>(); }
  double r_max() const { return metadata.at("r_max").get<double>(); }
  dist::ActionBounds action_bounds() const;

  /// Throws std::invalid_argument on unequal columns, out-of-bounds actions
  /// or non-binary dones.
  void validate() const;
};

/// `episodes` full-horizon rollouts; a pure function of its arguments.
Dataset collect(const ControllerSpec& controller, std::size_t episodes, std::uint64_t seed);

/// Rows of `a` followed by rows of `b`; metadata merged (policies joined,
/// reward range widened).
Dataset concatenate(const Dataset& a, const Dataset& b);

/// "random", "medium", "expert", "mixed" or "medium-expert" (medium and
/// expert halves collected from seed and seed + 1).
Dataset make_dataset(const std::string& mode, std::size_t episodes, std::uint64_t seed);

inline constexpr char kDatasetMagic[6] = {'B', 'R', 'A', 'C', 'D', '1'};
inline constexpr std::uint32_t kDatasetVersion = 1;

void save_dataset(const std::filesystem::path& path, const Dataset& data);
/// Throws FormatError on bad magic, version, truncation or trailing bytes.
Dataset load_dataset(const std::filesystem::path& path);
void write_dataset_csv(std::ostream& os, const Dataset& data);

struct ScoreReference {
  std::string env_id = TwoGoalPointMass::kId;
  double random_return = 0.0;
  double expert_return = 0.0;

  void validate() const;
  nlohmann::json to_json() const;
  static ScoreReference from_json(const nlohmann::json& j);
};

/// 100 * (raw - random) / (expert - random).
double normalized_score(double raw_return, const ScoreReference& ref);

using Policy = std::function<Vec2(const Vec4&)>;

struct EvalResult {
  double mean_return;
  double std_return;
  std::vector<double> returns;
};

/// Undiscounted returns of `episodes` rollouts; reset positions drawn from `seed`.
EvalResult evaluate_policy(const Policy& policy, std::size_t episodes, std::uint64_t seed);
EvalResult evaluate_controller(const ControllerSpec& controller, std::size_t episodes, std::uint64_t seed);

/// Mean returns of the random and expert controllers over `episodes` rollouts.
ScoreReference compute_score_reference(std::size_t episodes = 100, std::uint64_t seed = 12345);

}  // namespace bracplus::env
