// Copyright 2026 The bracplus Authors
// SPDX-License-Identifier: Apache-2.0

// bracplus: dataset generation, behavior pretraining, training, evaluation,
// divergence sweeps and the regularizer x penalty ablation.

#include <CLI11.hpp>
#include <fmt/format.h>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "bracplus/divergences.hpp"
#include "bracplus/errors.hpp"
#include "bracplus/harness.hpp"

namespace fs = std::filesystem;
namespace h = bracplus::harness;
namespace ag = bracplus::agent;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;

struct Common {
  std::string config;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "JSON experiment config")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "Random seed")->each([&](const std::string&) { c.seed_set = true; });
  cmd->add_option("--out", c.out, "Output directory");
}

h::ExperimentConfig base_config(const Common& c) {
  h::ExperimentConfig cfg = c.config.empty() ? h::ExperimentConfig{} : h::load_config(c.config);
  if (!c.out.empty()) cfg.out = c.out;
  return cfg;
}

std::uint64_t seed_of(const Common& c, const h::ExperimentConfig& cfg) {
  return c.seed_set ? c.seed : cfg.seeds.front();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw bracplus::FormatError("cannot write " + path.string());
  os << text;
}

bracplus::env::Dataset load_data(const std::string& path) {
  if (!fs::exists(path)) throw std::invalid_argument("dataset " + path + " does not exist");
  return bracplus::env::load_dataset(path);
}

bracplus::bm::CvaeEnsemble load_behavior(const std::string& dir) {
  if (!fs::exists(fs::path(dir) / "ensemble.json")) {
    throw std::invalid_argument("behavior checkpoint " + dir + " does not exist (run train-bc first)");
  }
  return bracplus::bm::load_ensemble(dir);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Behavior-regularized offline actor-critic experiments"};
  app.require_subcommand(1);

  // gen-data
  Common gd;
  std::string gd_env = "twogoal";
  std::string gd_mode;
  std::size_t gd_episodes = 0;
  bool gd_csv = false;
  auto* gen = app.add_subcommand("gen-data", "Collect a dataset with the scripted controllers");
  add_common(gen, gd);
  gen->add_option("--env", gd_env, "Environment (twogoal)");
  gen->add_option("--mode", gd_mode, "random | medium | expert | mixed | med-exp");
  gen->add_option("--episodes", gd_episodes, "Episodes of 100 steps");
  gen->add_flag("--csv", gd_csv, "Also write dataset.csv");

  // train-bc
  Common tb;
  std::string tb_data;
  std::size_t tb_members = 0;
  std::size_t tb_steps = 0;
  std::size_t tb_batch = 0;
  auto* tbc = app.add_subcommand("train-bc", "Pretrain the behavior model ensemble");
  add_common(tbc, tb);
  tbc->add_option("--data", tb_data, "Dataset file")->required();
  tbc->add_option("--members", tb_members, "Ensemble size");
  tbc->add_option("--steps", tb_steps, "Gradient steps per member");
  tbc->add_option("--batch", tb_batch, "Minibatch size");

  // train
  Common tr;
  std::string tr_data;
  std::string tr_behavior;
  bool tr_no_gp = false;
  std::string tr_reg;
  std::size_t tr_epochs = 0;
  std::size_t tr_spe = 0;
  bool tr_resume = false;
  bool tr_bc = false;
  auto* train = app.add_subcommand("train", "Train an agent (or the behavior-cloning baseline)");
  add_common(train, tr);
  train->add_option("--data", tr_data, "Dataset file")->required();
  train->add_option("--behavior", tr_behavior, "Behavior ensemble directory");
  train->add_flag("--no-gp", tr_no_gp, "Disable the action-gradient penalty");
  train->add_option("--regularizer", tr_reg, "kl_upper | mmd");
  train->add_option("--epochs", tr_epochs, "Epochs");
  train->add_option("--steps-per-epoch", tr_spe, "Gradient steps per epoch");
  train->add_flag("--resume", tr_resume, "Continue from <out>/checkpoint");
  train->add_flag("--bc-baseline", tr_bc, "Train the maximum-likelihood baseline instead");

  // eval
  Common ev;
  std::string ev_ckpt;
  std::size_t ev_episodes = 100;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  add_common(eval, ev);
  eval->add_option("--checkpoint", ev_ckpt, "Agent checkpoint directory or policy file")->required();
  eval->add_option("--episodes", ev_episodes, "Rollouts");

  // sweep-divergence
  Common sw;
  std::string sw_panel = "middle";
  std::string sw_kernel = "laplacian";
  double sw_bandwidth = 1.0;
  std::size_t sw_samples = 1000;
  std::size_t sw_points = 401;
  auto* sweep = app.add_subcommand("sweep-divergence", "Divergences of a sliding Gaussian against a mixture");
  add_common(sweep, sw);
  sweep->add_option("--panel", sw_panel, "left | middle | right");
  sweep->add_option("--kernel", sw_kernel, "laplacian | gaussian");
  sweep->add_option("--bandwidth", sw_bandwidth, "Kernel bandwidth");
  sweep->add_option("--samples", sw_samples, "MMD samples per side");
  sweep->add_option("--points", sw_points, "Grid points on [-10, 10]");

  // ablate
  Common ab;
  std::string ab_data;
  std::string ab_behavior;
  std::vector<std::uint64_t> ab_seeds;
  std::size_t ab_window = 20;
  std::size_t ab_epochs = 0;
  auto* ablate = app.add_subcommand("ablate", "KL/MMD x penalty on/off grid over seeds");
  add_common(ablate, ab);
  ablate->add_option("--data", ab_data, "Dataset file")->required();
  ablate->add_option("--behavior", ab_behavior, "Behavior ensemble directory")->required();
  ablate->add_option("--seeds", ab_seeds, "Seeds")->delimiter(',');
  ablate->add_option("--window", ab_window, "Smoothing window (epochs)");
  ablate->add_option("--epochs", ab_epochs, "Epochs per run");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (gen->parsed()) {
      auto cfg = base_config(gd);
      if (!gd_mode.empty()) cfg.mode = gd_mode;
      if (gd_episodes) cfg.episodes = gd_episodes;
      cfg.env = gd_env;
      cfg.validate();
      const auto data = h::generate_dataset(cfg.env, cfg.mode, cfg.episodes, seed_of(gd, cfg));
      fs::create_directories(cfg.out);
      bracplus::env::save_dataset(cfg.out / "dataset.bin", data);
      if (gd_csv) {
        std::ofstream os(cfg.out / "dataset.csv");
        bracplus::env::write_dataset_csv(os, data);
      }
      std::cout << fmt::format("wrote {} transitions to {}\n", data.size(), (cfg.out / "dataset.bin").string());
    } else if (tbc->parsed()) {
      auto cfg = base_config(tb);
      if (tb_members) cfg.cvae_members = tb_members;
      if (tb_steps) cfg.cvae_steps = tb_steps;
      if (tb_batch) cfg.cvae.batch_size = tb_batch;
      cfg.validate();
      const auto data = load_data(tb_data);
      bracplus::bm::PretrainReport rep;
      h::train_behavior(data, cfg.cvae, cfg.cvae_members, cfg.cvae_steps, seed_of(tb, cfg), cfg.out, &rep);
      std::cout << fmt::format("trained {} members for {} steps; final ELBO", cfg.cvae_members, cfg.cvae_steps);
      for (const auto& curve : rep.elbo) std::cout << fmt::format(" {:.4f}", curve.empty() ? 0.0 : curve.back());
      std::cout << '\n';
    } else if (train->parsed()) {
      auto cfg = base_config(tr);
      if (tr_no_gp) cfg.agent.gp_enabled = false;
      if (!tr_reg.empty()) cfg.agent.regularizer = ag::parse_regularizer(tr_reg);
      if (tr_epochs) cfg.agent.epochs = tr_epochs;
      if (tr_spe) cfg.agent.steps_per_epoch = tr_spe;
      cfg.validate();
      const auto data = load_data(tr_data);
      const std::uint64_t seed = seed_of(tr, cfg);
      if (tr_bc) {
        const auto r = h::run_bc(data, cfg.bc, seed, 100, cfg.out);
        std::cout << fmt::format("bc: return {:.3f} +- {:.3f}, normalized {:.2f}\n", r.eval.mean_return,
                                 r.eval.std_return, r.normalized);
        return 0;
      }
      if (tr_behavior.empty()) throw std::invalid_argument("--behavior is required unless --bc-baseline is given");
      const auto behavior = load_behavior(tr_behavior);
      fs::create_directories(cfg.out);
      write_text(cfg.out / "config.json", cfg.to_json().dump(2) + "\n");
      h::RunOptions opts;
      opts.resume = tr_resume;
      opts.on_epoch = [](const ag::EpochRecord& r) {
        std::cout << fmt::format("epoch {:4d}  Q {:9.3f}  D {:7.3f}  H {:7.3f}  score {:7.2f}\n", r.epoch,
                                 r.mean_dataset_q, r.kl_bound_mean, r.entropy_mean, r.eval_return_normalized)
                  << std::flush;
      };
      const auto res = h::run_training(data, behavior, cfg.agent, seed, cfg.out, opts);
      if (res.numeric_error) {
        std::cerr << "numeric abort: " << *res.numeric_error << '\n';
        return kExitNumeric;
      }
    } else if (eval->parsed()) {
      auto cfg = base_config(ev);
      const auto rep = h::evaluate_checkpoint(ev_ckpt, ev_episodes, seed_of(ev, cfg));
      std::cout << fmt::format("return {:.3f} +- {:.3f} over {} episodes, normalized {:.2f}\n",
                               rep.eval.mean_return, rep.eval.std_return, rep.eval.returns.size(), rep.normalized);
      if (!ev.out.empty()) {
        fs::create_directories(ev.out);
        write_text(fs::path(ev.out) / "eval.json", rep.to_json().dump(2) + "\n");
      }
    } else if (sweep->parsed()) {
      auto cfg = base_config(sw);
      bracplus::divergence::SweepConfig sc;
      sc.kernel = {bracplus::divergence::parse_kernel_family(sw_kernel), sw_bandwidth};
      sc.kernel.validate();
      sc.mmd_samples = sw_samples;
      sc.seed = seed_of(sw, cfg);
      const auto preset = bracplus::divergence::panel_preset(sw_panel);
      bracplus::divergence::SweepGrid grid;
      grid.points = sw_points;
      const auto rows = bracplus::divergence::divergence_sweep(preset.pi_b, preset.sigma, grid, sc);
      fs::create_directories(cfg.out);
      const fs::path csv = cfg.out / fmt::format("sweep_{}.csv", sw_panel);
      {
        std::ofstream os(csv);
        bracplus::divergence::write_sweep_csv(os, rows);
      }
      using Row = bracplus::divergence::SweepRow;
      std::cout << fmt::format("argmin forward KL {:.3f}, backward KL {:.3f}, MMD {:.3f}; wrote {}\n",
                               rows[bracplus::divergence::argmin(rows, &Row::forward_kl)].x,
                               rows[bracplus::divergence::argmin(rows, &Row::backward_kl)].x,
                               rows[bracplus::divergence::argmin(rows, &Row::mmd_sq)].x, csv.string());
    } else if (ablate->parsed()) {
      auto cfg = base_config(ab);
      if (!ab_seeds.empty()) cfg.seeds = ab_seeds;
      if (ab_epochs) cfg.agent.epochs = ab_epochs;
      if (ab.seed_set) cfg.seeds = {ab.seed};
      cfg.validate();
      const auto data = load_data(ab_data);
      const auto behavior = load_behavior(ab_behavior);
      fs::create_directories(cfg.out);
      const auto rows = h::ablate(data, behavior, cfg.agent, cfg.seeds, cfg.out, ab_window);
      std::cout << fmt::format("wrote {} rows to {}\n", rows.size(), (cfg.out / "ablation.csv").string());
    }
  } catch (const bracplus::NumericError& e) {
    std::cerr << "numeric abort: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const bracplus::FormatError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
