// Copyright 2026 The bracplus Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "bracplus/agent.hpp"
#include "bracplus/behavior_model.hpp"
#include "bracplus/envs_data.hpp"

namespace bracplus::harness {

/// Everything one experiment needs besides the command-line overrides.
/// JSON keys mirror the field names; `agent`, `cvae` and `bc` are objects.
struct ExperimentConfig {
  std::string env = "twogoal";
  std::string mode = "mixed";
  std::size_t episodes = 100;
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  std::filesystem::path out = "runs";

  agent::AgentConfig agent;
  bm::CvaeConfig cvae;
  std::size_t cvae_members = 3;
  std::size_t cvae_steps = 5000;
  agent::BcConfig bc;

  /// Throws std::invalid_argument on unknown keys or invalid values.
  static ExperimentConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  void validate() const;
};

/// Reads and validates a JSON config file; std::invalid_argument on any problem.
ExperimentConfig load_config(const std::filesystem::path& path);

/// Canonical dataset mode name; accepts "med-exp" for "medium-expert".
std::string canonical_mode(const std::string& mode);
/// Accepts "twogoal" and the full environment id.
void check_env(const std::string& env);

env::Dataset generate_dataset(const std::string& env, const std::string& mode, std::size_t episodes,
                              std::uint64_t seed);

/// Score reference shared by every command (100 rollouts per controller).
const env::ScoreReference& score_reference();

/// Pretrains a CVAE ensemble on the dataset's pre-squash actions, writes it to
/// `out_dir` (when non-empty) with `elbo.csv` (member,step,elbo).
bm::CvaeEnsemble train_behavior(const env::Dataset& data, const bm::CvaeConfig& config, std::size_t members,
                                std::size_t steps, std::uint64_t seed, const std::filesystem::path& out_dir,
                                bm::PretrainReport* report = nullptr);

struct RunOptions {
  /// Continue from `out/checkpoint` when it exists.
  bool resume = false;
  /// Save `checkpoint/` after every epoch and `best/` on improvement.
  bool checkpoints = true;
  std::function<void(const agent::EpochRecord&)> on_epoch;
};

struct RunResult {
  agent::InitReport init;
  std::vector<agent::EpochRecord> log;
  std::optional<std::string> numeric_error;
};

/// Scales rewards, initializes (or resumes) the agent and trains it, writing
/// `log.jsonl`, `init.json`, `checkpoint/` and `best/` under `out_dir`.
/// A NumericError ends the run; the log written so far is kept and the
/// message is returned in `numeric_error`.
RunResult run_training(const env::Dataset& raw, const bm::CvaeEnsemble& behavior, const agent::AgentConfig& config,
                       std::uint64_t seed, const std::filesystem::path& out_dir, const RunOptions& options = {});

struct BcResult {
  env::EvalResult eval;
  double normalized = 0.0;
};

/// Trains the maximum-likelihood baseline and evaluates it; writes
/// `policy.bin` and `eval.json` under `out_dir` when non-empty.
BcResult run_bc(const env::Dataset& raw, const agent::BcConfig& config, std::uint64_t seed, std::size_t episodes,
                const std::filesystem::path& out_dir);

struct EvalReport {
  env::EvalResult eval;
  double normalized = 0.0;
  nlohmann::json to_json() const;
};

/// Evaluates an agent checkpoint directory or a BRACP1 policy file.
EvalReport evaluate_checkpoint(const std::filesystem::path& path, std::size_t episodes, std::uint64_t seed);

/// Trailing moving average: element i averages the last min(i+1, window) values.
std::vector<double> smooth_trailing(const std::vector<double>& xs, std::size_t window);

struct Arm {
  std::string name;
  agent::Regularizer regularizer;
  bool gp;
};

/// KL / MMD crossed with penalty on / off.
std::vector<Arm> ablation_arms();

struct CurveRow {
  std::size_t epoch;
  std::string arm;
  std::string metric;  // "normalized_score" or "mean_dataset_q"
  double mean;
  double std;
  double smoothed_mean;
  double smoothed_std;
  std::size_t seeds;
};

/// Per-epoch mean/std over seeds for epochs 1..epochs of every arm, both
/// metrics, smoothed with `window`. Missing epochs (aborted runs) average
/// over the seeds that reached them and are NaN when none did.
std::vector<CurveRow> aggregate_curves(const std::vector<std::pair<std::string, std::vector<std::vector<agent::EpochRecord>>>>& runs,
                                       std::size_t epochs, std::size_t window);
void write_curves_csv(const std::filesystem::path& path, const std::vector<CurveRow>& rows);

/// Runs every arm for every seed under `out_dir/<arm>/seed_<s>/` and writes
/// `out_dir/ablation.csv`.
std::vector<CurveRow> ablate(const env::Dataset& raw, const bm::CvaeEnsemble& behavior, const agent::AgentConfig& base,
                             const std::vector<std::uint64_t>& seeds, const std::filesystem::path& out_dir,
                             std::size_t window = 20);

/// Reads a JSONL run log, skipping a trailing partial line.
std::vector<agent::EpochRecord> read_log(const std::filesystem::path& path);

}  // namespace bracplus::harness
