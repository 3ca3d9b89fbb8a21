// Copyright 2026 The bracplus Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "bracplus/envs_data.hpp"
#include "bracplus/harness.hpp"

namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("bracplus_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

int run(const std::string& args) {
  const std::string cmd = std::string(BRACPLUS_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Cli, UnknownModeIsUsageError) {
  const auto dir = scratch("mode");
  EXPECT_EQ(run("gen-data --mode bogus --out " + dir.string()), 2);
  EXPECT_FALSE(fs::exists(dir / "dataset.bin"));
}

TEST(Cli, MissingSubcommandIsUsageError) {
  EXPECT_EQ(run(""), 2);
  EXPECT_EQ(run("train --no-such-flag"), 2);
}

TEST(Cli, OneEpisodeIsOneHundredTransitions) {
  const auto dir = scratch("gen");
  ASSERT_EQ(run("gen-data --mode medium --episodes 1 --seed 4 --out " + dir.string()), 0);
  const auto data = bracplus::env::load_dataset(dir / "dataset.bin");
  EXPECT_EQ(data.size(), 100u);
}

TEST(Cli, MissingBehaviorCheckpointIsUsageError) {
  const auto dir = scratch("nobehavior");
  ASSERT_EQ(run("gen-data --mode medium --episodes 1 --out " + dir.string()), 0);
  EXPECT_EQ(run("train --data " + (dir / "dataset.bin").string() + " --behavior " + (dir / "absent").string() +
                " --out " + (dir / "run").string()),
            2);
}

TEST(Cli, UnknownConfigKeyIsUsageError) {
  const auto dir = scratch("config");
  std::ofstream(dir / "bad.json") << R"({"agent": {"gamma": 0.99, "not_a_key": 1}})";
  EXPECT_EQ(run("gen-data --config " + (dir / "bad.json").string() + " --out " + dir.string()), 2);
}

TEST(Cli, TrainResumeAndEvaluate) {
  const auto dir = scratch("train");
  std::ofstream(dir / "small.json")
      << R"({"agent": {"hidden": 16, "batch_size": 32, "steps_per_epoch": 10, "epochs": 1,
                      "init_policy_steps": 20, "init_q_steps": 10, "eval_episodes": 1, "metric_states": 32},
            "cvae_members": 1, "cvae_steps": 20})";
  const std::string cfg = " --config " + (dir / "small.json").string();
  const std::string data = (dir / "d" / "dataset.bin").string();
  ASSERT_EQ(run("gen-data --mode mixed --episodes 2 --out " + (dir / "d").string()), 0);
  ASSERT_EQ(run("train-bc" + cfg + " --data " + data + " --out " + (dir / "b").string()), 0);
  const std::string train = "train" + cfg + " --data " + data + " --behavior " + (dir / "b").string() + " --out " +
                            (dir / "r").string();
  ASSERT_EQ(run(train), 0);
  EXPECT_EQ(bracplus::harness::read_log(dir / "r" / "log.jsonl").size(), 2u);
  ASSERT_EQ(run(train + " --resume --epochs 2"), 0);
  const auto log = bracplus::harness::read_log(dir / "r" / "log.jsonl");
  ASSERT_EQ(log.size(), 3u);
  EXPECT_EQ(log.back().epoch, 2u);
  EXPECT_EQ(run("eval --episodes 2 --checkpoint " + (dir / "r" / "checkpoint").string() + " --out " +
                (dir / "e").string()),
            0);
  EXPECT_TRUE(fs::exists(dir / "e" / "eval.json"));
  EXPECT_EQ(run("eval --checkpoint " + (dir / "missing").string()), 2);
}

TEST(Cli, SweepWritesPanelCsv) {
  const auto dir = scratch("sweep");
  ASSERT_EQ(run("sweep-divergence --panel left --samples 50 --points 21 --out " + dir.string()), 0);
  std::ifstream is(dir / "sweep_left.csv");
  std::string line;
  std::size_t lines = 0;
  while (std::getline(is, line)) ++lines;
  EXPECT_EQ(lines, 22u);
  EXPECT_EQ(run("sweep-divergence --panel nowhere --out " + dir.string()), 2);
}
