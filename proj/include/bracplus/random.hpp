// Copyright 2026 The bracplus Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>
#include <string>

#include "bracplus/ndgrad/array.hpp"

namespace bracplus {

/// Seeded random stream. All state lives in the engine, so `state()` /
/// `restore()` capture it completely (distribution objects are per call).
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  std::size_t index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
  }
  std::uint64_t next_seed() { return engine_(); }

  nd::Array normal_array(const nd::Shape& shape);
  nd::Array uniform_array(const nd::Shape& shape, double lo, double hi);

  std::string state() const;
  void restore(const std::string& state);

  std::mt19937_64& engine() noexcept { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace bracplus
