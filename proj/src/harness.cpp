// Copyright 2026 The bracplus Authors
// SPDX-License-Identifier: Apache-2.0

#include "bracplus/harness.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include <fmt/format.h>

#include "bracplus/errors.hpp"

namespace bracplus::harness {

namespace fs = std::filesystem;

namespace {

template <class T>
void read_field(const nlohmann::json& j, const char* key, T& field) {
  if (j.contains(key)) field = j.at(key).get<T>();
}

void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument(where + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (std::find_if(keys.begin(), keys.end(), [&](const char* k) { return key == k; }) == keys.end()) {
      throw std::invalid_argument("unknown key '" + key + "' in " + where);
    }
  }
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw FormatError("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

nlohmann::json init_to_json(const agent::InitReport& r) {
  return {{"eps_min", r.eps_min},
          {"epsilon", r.epsilon},
          {"behavior_entropy", r.behavior_entropy},
          {"target_entropy", r.target_entropy},
          {"bound_curve", r.bound_curve},
          {"final_td_loss", r.final_td_loss}};
}

agent::InitReport init_from_json(const nlohmann::json& j) {
  agent::InitReport r;
  r.eps_min = j.at("eps_min").get<double>();
  r.epsilon = j.at("epsilon").get<double>();
  r.behavior_entropy = j.at("behavior_entropy").get<double>();
  r.target_entropy = j.at("target_entropy").get<double>();
  r.bound_curve = j.at("bound_curve").get<std::vector<double>>();
  r.final_td_loss = j.at("final_td_loss").get<double>();
  return r;
}

// Rewrites `path` keeping only records with epoch <= last_epoch.
std::vector<agent::EpochRecord> truncate_log(const fs::path& path, std::size_t last_epoch) {
  std::vector<agent::EpochRecord> kept;
  for (auto& r : read_log(path)) {
    if (r.epoch <= last_epoch) kept.push_back(std::move(r));
  }
  std::ofstream os(path, std::ios::trunc);
  for (const auto& r : kept) os << r.to_json().dump() << '\n';
  return kept;
}

}  // namespace

// ------------------------------------------------------------------- config

void ExperimentConfig::validate() const {
  check_env(env);
  canonical_mode(mode);
  if (episodes == 0) throw std::invalid_argument("episodes must be positive");
  if (seeds.empty()) throw std::invalid_argument("seed list must not be empty");
  if (cvae_members == 0) throw std::invalid_argument("cvae_members must be positive");
  if (cvae.hidden == 0 || cvae.batch_size == 0 || !(cvae.lr > 0.0)) {
    throw std::invalid_argument("cvae hidden, batch_size and lr must be positive");
  }
  if (bc.hidden == 0 || bc.batch_size == 0 || !(bc.lr > 0.0)) {
    throw std::invalid_argument("bc hidden, batch_size and lr must be positive");
  }
  agent.validate();
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  reject_unknown(j, {"env", "mode", "episodes", "seeds", "out", "agent", "cvae", "cvae_members", "cvae_steps", "bc"},
                 "experiment config");
  ExperimentConfig c;
  try {
    read_field(j, "env", c.env);
    read_field(j, "mode", c.mode);
    read_field(j, "episodes", c.episodes);
    read_field(j, "seeds", c.seeds);
    if (j.contains("out")) c.out = j.at("out").get<std::string>();
    if (j.contains("agent")) c.agent = agent::AgentConfig::from_json(j.at("agent"));
    if (j.contains("cvae")) {
      const auto& v = j.at("cvae");
      reject_unknown(v, {"hidden", "latent_dim", "lr", "batch_size"}, "cvae config");
      read_field(v, "hidden", c.cvae.hidden);
      read_field(v, "latent_dim", c.cvae.latent_dim);
      read_field(v, "lr", c.cvae.lr);
      read_field(v, "batch_size", c.cvae.batch_size);
    }
    read_field(j, "cvae_members", c.cvae_members);
    read_field(j, "cvae_steps", c.cvae_steps);
    if (j.contains("bc")) {
      const auto& v = j.at("bc");
      reject_unknown(v, {"hidden", "lr", "steps", "batch_size"}, "bc config");
      read_field(v, "hidden", c.bc.hidden);
      read_field(v, "lr", c.bc.lr);
      read_field(v, "steps", c.bc.steps);
      read_field(v, "batch_size", c.bc.batch_size);
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("experiment config: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::json ExperimentConfig::to_json() const {
  return {{"env", env},
          {"mode", mode},
          {"episodes", episodes},
          {"seeds", seeds},
          {"out", out.string()},
          {"agent", agent.to_json()},
          {"cvae", {{"hidden", cvae.hidden}, {"latent_dim", cvae.latent_dim}, {"lr", cvae.lr}, {"batch_size", cvae.batch_size}}},
          {"cvae_members", cvae_members},
          {"cvae_steps", cvae_steps},
          {"bc", {{"hidden", bc.hidden}, {"lr", bc.lr}, {"steps", bc.steps}, {"batch_size", bc.batch_size}}}};
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::invalid_argument("cannot open config " + path.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
  return ExperimentConfig::from_json(j);
}

std::string canonical_mode(const std::string& mode) {
  if (mode == "med-exp" || mode == "medium-expert") return "medium-expert";
  if (mode == "random" || mode == "medium" || mode == "expert" || mode == "mixed") return mode;
  throw std::invalid_argument("unknown dataset mode '" + mode +
                              "' (expected random, medium, expert, mixed or med-exp)");
}

void check_env(const std::string& env) {
  if (env != "twogoal" && env != env::TwoGoalPointMass::kId) {
    throw std::invalid_argument("unknown environment '" + env + "' (expected twogoal)");
  }
}

env::Dataset generate_dataset(const std::string& env, const std::string& mode, std::size_t episodes,
                              std::uint64_t seed) {
  check_env(env);
  if (episodes == 0) throw std::invalid_argument("episodes must be positive");
  return env::make_dataset(canonical_mode(mode), episodes, seed);
}

const env::ScoreReference& score_reference() {
  static const env::ScoreReference ref = env::compute_score_reference(100, 12345);
  return ref;
}

// ---------------------------------------------------------------- behavior

bm::CvaeEnsemble train_behavior(const env::Dataset& data, const bm::CvaeConfig& config, std::size_t members,
                                std::size_t steps, std::uint64_t seed, const fs::path& out_dir,
                                bm::PretrainReport* report) {
  data.validate();
  Rng rng(seed);
  bm::CvaeEnsemble ens(data.state_dim(), data.action_dim(), config, members, rng);
  const nd::Array pre = dist::to_pre_squash(data.actions, data.action_bounds());
  bm::PretrainReport r = bm::pretrain(ens, data.states, pre, steps, config, rng);
  if (!out_dir.empty()) {
    bm::save_ensemble(out_dir, ens);
    std::ofstream os(out_dir / "elbo.csv", std::ios::trunc);
    os << "member,step,elbo\n";
    for (std::size_t m = 0; m < r.elbo.size(); ++m) {
      for (std::size_t t = 0; t < r.elbo[m].size(); ++t) os << fmt::format("{},{},{:.17g}\n", m, t + 1, r.elbo[m][t]);
    }
  }
  if (report) *report = std::move(r);
  return ens;
}

// ----------------------------------------------------------------- training

std::vector<agent::EpochRecord> read_log(const fs::path& path) {
  std::vector<agent::EpochRecord> out;
  std::ifstream is(path);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(agent::EpochRecord::from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception&) {
      break;  // partial trailing line from an interrupted run
    }
  }
  return out;
}

RunResult run_training(const env::Dataset& raw, const bm::CvaeEnsemble& behavior, const agent::AgentConfig& config,
                       std::uint64_t seed, const fs::path& out_dir, const RunOptions& options) {
  const env::Dataset scaled = agent::scale_rewards(raw);
  const auto& ref = score_reference();
  fs::create_directories(out_dir);
  const fs::path log_path = out_dir / "log.jsonl";
  const fs::path ckpt = out_dir / "checkpoint";
  const fs::path best = out_dir / "best";

  RunResult result;
  std::optional<agent::Agent> a;
  double best_score = -std::numeric_limits<double>::infinity();
  if (options.resume && fs::exists(ckpt / "agent.json")) {
    a.emplace(agent::Agent::load(ckpt));
    a->set_epoch_budget(config.epochs);
    result.log = truncate_log(log_path, a->epoch());
    if (fs::exists(out_dir / "init.json")) {
      std::ifstream is(out_dir / "init.json");
      result.init = init_from_json(nlohmann::json::parse(is));
    }
    if (fs::exists(best / "score.json")) {
      std::ifstream is(best / "score.json");
      best_score = nlohmann::json::parse(is).at("eval_return_normalized").get<double>();
    }
  } else {
    a.emplace(config, behavior, scaled.action_bounds(), scaled.state_dim(), seed);
    std::ofstream(log_path, std::ios::trunc);
    try {
      result.init = a->initialize(scaled);
    } catch (const NumericError& e) {
      result.numeric_error = e.what();
      return result;
    }
    write_json(out_dir / "init.json", init_to_json(result.init));
  }

  std::ofstream log(log_path, std::ios::app);
  agent::TrainHooks hooks;
  hooks.on_epoch = [&](const agent::EpochRecord& r) {
    log << r.to_json().dump() << '\n';
    log.flush();
    if (options.checkpoints) {
      if (r.epoch > 0 && r.eval_return_normalized > best_score) {
        best_score = r.eval_return_normalized;
        a->save(best);
        write_json(best / "score.json", r.to_json());
      }
      a->save(ckpt);
    }
    if (options.on_epoch) options.on_epoch(r);
  };
  try {
    auto more = agent::train(*a, scaled, ref, hooks);
    result.log.insert(result.log.end(), more.begin(), more.end());
  } catch (const NumericError& e) {
    result.numeric_error = e.what();
    result.log = read_log(log_path);
  }
  return result;
}

BcResult run_bc(const env::Dataset& raw, const agent::BcConfig& config, std::uint64_t seed, std::size_t episodes,
                const fs::path& out_dir) {
  const nn::Mlp net = agent::train_bc(raw, config, seed);
  BcResult r;
  r.eval = env::evaluate_policy(agent::deterministic_policy(net, raw.action_bounds()), episodes, seed + 7919);
  r.normalized = env::normalized_score(r.eval.mean_return, score_reference());
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    nn::save_mlp(out_dir / "policy.bin", net, {{"kind", "bc"}, {"seed", seed}});
    EvalReport rep{r.eval, r.normalized};
    write_json(out_dir / "eval.json", rep.to_json());
  }
  return r;
}

nlohmann::json EvalReport::to_json() const {
  return {{"episodes", eval.returns.size()},
          {"mean_return", eval.mean_return},
          {"std_return", eval.std_return},
          {"normalized_score", normalized}};
}

EvalReport evaluate_checkpoint(const fs::path& path, std::size_t episodes, std::uint64_t seed) {
  if (episodes == 0) throw std::invalid_argument("episodes must be positive");
  env::Policy policy;
  if (fs::is_directory(path)) {
    if (!fs::exists(path / "agent.json")) throw std::invalid_argument(path.string() + " is not an agent checkpoint");
    policy = agent::Agent::load(path).as_policy();
  } else if (fs::exists(path)) {
    policy = agent::deterministic_policy(nn::load_mlp(path), env::TwoGoalPointMass::action_bounds());
  } else {
    throw std::invalid_argument("checkpoint " + path.string() + " does not exist");
  }
  EvalReport r;
  r.eval = env::evaluate_policy(policy, episodes, seed);
  r.normalized = env::normalized_score(r.eval.mean_return, score_reference());
  return r;
}

// ----------------------------------------------------------------- ablation

std::vector<double> smooth_trailing(const std::vector<double>& xs, std::size_t window) {
  if (window == 0) throw std::invalid_argument("smoothing window must be positive");
  std::vector<double> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const std::size_t lo = i + 1 >= window ? i + 1 - window : 0;
    double s = 0.0;
    for (std::size_t k = lo; k <= i; ++k) s += xs[k];
    out[i] = s / static_cast<double>(i - lo + 1);
  }
  return out;
}

std::vector<Arm> ablation_arms() {
  return {{"kl_gp", agent::Regularizer::kl_upper, true},
          {"kl_nogp", agent::Regularizer::kl_upper, false},
          {"mmd_gp", agent::Regularizer::mmd, true},
          {"mmd_nogp", agent::Regularizer::mmd, false}};
}

std::vector<CurveRow> aggregate_curves(
    const std::vector<std::pair<std::string, std::vector<std::vector<agent::EpochRecord>>>>& runs, std::size_t epochs,
    std::size_t window) {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  std::vector<CurveRow> rows;
  for (const auto& [arm, logs] : runs) {
    for (const std::string metric : {"normalized_score", "mean_dataset_q"}) {
      std::vector<double> mean(epochs, nan);
      std::vector<double> sd(epochs, nan);
      std::vector<std::size_t> count(epochs, 0);
      for (std::size_t e = 1; e <= epochs; ++e) {
        std::vector<double> xs;
        for (const auto& log : logs) {
          for (const auto& r : log) {
            if (r.epoch == e) xs.push_back(metric == "mean_dataset_q" ? r.mean_dataset_q : r.eval_return_normalized);
          }
        }
        count[e - 1] = xs.size();
        if (xs.empty()) continue;
        double m = 0.0;
        for (double x : xs) m += x;
        m /= static_cast<double>(xs.size());
        double v = 0.0;
        for (double x : xs) v += (x - m) * (x - m);
        mean[e - 1] = m;
        sd[e - 1] = std::sqrt(v / static_cast<double>(xs.size()));
      }
      const auto sm = smooth_trailing(mean, window);
      const auto ss = smooth_trailing(sd, window);
      for (std::size_t e = 1; e <= epochs; ++e) {
        rows.push_back({e, arm, metric, mean[e - 1], sd[e - 1], sm[e - 1], ss[e - 1], count[e - 1]});
      }
    }
  }
  return rows;
}

void write_curves_csv(const fs::path& path, const std::vector<CurveRow>& rows) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw FormatError("cannot write " + path.string());
  os << "epoch,arm,metric,mean,std,smoothed_mean,smoothed_std,seeds\n";
  for (const auto& r : rows) {
    os << fmt::format("{},{},{},{:.10g},{:.10g},{:.10g},{:.10g},{}\n", r.epoch, r.arm, r.metric, r.mean, r.std,
                      r.smoothed_mean, r.smoothed_std, r.seeds);
  }
}

std::vector<CurveRow> ablate(const env::Dataset& raw, const bm::CvaeEnsemble& behavior, const agent::AgentConfig& base,
                             const std::vector<std::uint64_t>& seeds, const fs::path& out_dir, std::size_t window) {
  if (seeds.empty()) throw std::invalid_argument("ablate: seed list must not be empty");
  std::vector<std::pair<std::string, std::vector<std::vector<agent::EpochRecord>>>> runs;
  for (const auto& arm : ablation_arms()) {
    agent::AgentConfig c = base;
    c.regularizer = arm.regularizer;
    c.gp_enabled = arm.gp;
    c.stop_when_q_exceeds = 0.0;
    std::vector<std::vector<agent::EpochRecord>> logs;
    for (const auto seed : seeds) {
      RunOptions opts;
      opts.checkpoints = false;
      logs.push_back(run_training(raw, behavior, c, seed, out_dir / arm.name / fmt::format("seed_{}", seed), opts).log);
    }
    runs.emplace_back(arm.name, std::move(logs));
  }
  auto rows = aggregate_curves(runs, base.epochs, window);
  write_curves_csv(out_dir / "ablation.csv", rows);
  return rows;
}

}  // namespace bracplus::harness
