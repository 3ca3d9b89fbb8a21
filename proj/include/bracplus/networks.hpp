// Copyright 2026 The bracplus Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "bracplus/distributions.hpp"
#include "bracplus/ndgrad/var.hpp"
#include "bracplus/random.hpp"

namespace bracplus::nn {

struct Linear {
  nd::Var weight;  // [in, out]
  nd::Var bias;    // [1, out]
};

/// Feed-forward network with relu after every hidden layer and a linear head.
class Mlp {
 public:
  Mlp() = default;
  /// Uniform fan-in initialization: W, b ~ U(-1/sqrt(in), 1/sqrt(in)).
  Mlp(const std::vector<std::size_t>& sizes, Rng& rng);
  static Mlp zeros(const std::vector<std::size_t>& sizes);
  static Mlp from_layers(std::vector<nd::Array> weights, std::vector<nd::Array> biases);

  nd::Var forward(const nd::Var& x) const;

  std::vector<nd::Var> parameters() const;
  std::vector<std::size_t> sizes() const;
  std::size_t input_dim() const;
  std::size_t output_dim() const;
  const std::vector<Linear>& layers() const { return layers_; }

  /// Independent copy with fresh leaves.
  Mlp clone() const;
  /// Copy whose parameters are constants: gradients stop at its weights.
  Mlp frozen() const;
  /// Overwrites parameter values from a network of identical shape.
  void assign(const Mlp& other);

 private:
  std::vector<Linear> layers_;
};

inline constexpr double kLogStdMin = -20.0;
inline constexpr double kLogStdMax = 2.0;

/// Gaussian policy head: the network emits [mean, log_std] (2*d outputs); the
/// log_std half is clipped to [kLogStdMin, kLogStdMax].
dist::TanhDiagGaussian policy_forward(const Mlp& net, const nd::Var& states,
                                      const dist::ActionBounds& bounds);

/// Q(s, a) as a [batch, 1] column.
nd::Var q_forward(const Mlp& net, const nd::Var& states, const nd::Var& actions);

struct TwinQ {
  Mlp q1;
  Mlp q2;
  Mlp q1_target;
  Mlp q2_target;

  /// Independently initialized online pair; targets start as copies.
  static TwinQ make(const std::vector<std::size_t>& sizes, Rng& rng);

  nd::Var target_min(const nd::Var& states, const nd::Var& actions) const;
  /// target <- tau * online + (1 - tau) * target, tau in (0, 1].
  void polyak_update(double tau);
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected first/second moment optimizer over a fixed parameter list.
class Adam {
 public:
  Adam() = default;
  Adam(std::span<const nd::Var> params, AdamConfig config);

  /// Throws NumericError (naming the parameter index) on non-finite gradients.
  void step(std::span<const nd::Var> params, std::span<const nd::Array> grads);

  const AdamConfig& config() const { return config_; }
  std::size_t step_count() const { return t_; }
  const std::vector<nd::Array>& first_moments() const { return m_; }
  const std::vector<nd::Array>& second_moments() const { return v_; }
  void restore(std::size_t step_count, std::vector<nd::Array> m, std::vector<nd::Array> v);

 private:
  AdamConfig config_;
  std::size_t t_ = 0;
  std::vector<nd::Array> m_;
  std::vector<nd::Array> v_;
};

// ---------------------------------------------------------------- checkpoints

/// Writes `path` in the BRACP1 layout (magic, u32 version, u32 layer count,
/// then per layer u64 in, u64 out, in*out weights, out biases, all
/// little-endian float64) and a JSON sidecar `path + ".json"` holding the
/// architecture plus `metadata`.
void save_mlp(const std::filesystem::path& path, const Mlp& net,
              const nlohmann::json& metadata = nlohmann::json::object());
/// Throws FormatError on bad magic, version or truncation.
Mlp load_mlp(const std::filesystem::path& path);
nlohmann::json load_sidecar(const std::filesystem::path& path);

/// Ordered list of arrays (optimizer moments and similar state) in the
/// BRACA1 layout: magic, u32 version, u32 count, then per array u32 rank,
/// u64 dims and float64 values.
void save_arrays(const std::filesystem::path& path, std::span<const nd::Array> arrays);
std::vector<nd::Array> load_arrays(const std::filesystem::path& path);

inline constexpr char kArrayListMagic[6] = {'B', 'R', 'A', 'C', 'A', '1'};
inline constexpr char kCheckpointMagic[6] = {'B', 'R', 'A', 'C', 'P', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace bracplus::nn
