// Copyright 2026 The bracplus Authors
// SPDX-License-Identifier: Apache-2.0

#include <fstream>

#include "binary_io.hpp"
#include "bracplus/networks.hpp"

namespace bracplus::nn {

namespace {

std::filesystem::path sidecar_path(const std::filesystem::path& path) {
  return std::filesystem::path(path.string() + ".json");
}

}  // namespace

void save_mlp(const std::filesystem::path& path, const Mlp& net, const nlohmann::json& metadata) {
  {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot open " + path.string() + " for writing");
    os.write(kCheckpointMagic, 6);
    io::write_pod<std::uint32_t>(os, kCheckpointVersion);
    io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(net.layers().size()));
    for (const auto& layer : net.layers()) {
      const auto& w = layer.weight.value();
      io::write_pod<std::uint64_t>(os, w.dim(0));
      io::write_pod<std::uint64_t>(os, w.dim(1));
      io::write_doubles(os, w.data(), w.size());
      io::write_doubles(os, layer.bias.value().data(), layer.bias.size());
    }
    if (!os) throw FormatError("write failed for " + path.string());
  }
  nlohmann::json side = {{"format", "BRACP1"},
                         {"version", kCheckpointVersion},
                         {"layer_sizes", net.sizes()},
                         {"activation", "relu"},
                         {"metadata", metadata}};
  std::ofstream js(sidecar_path(path), std::ios::trunc);
  js << side.dump(2) << '\n';
}

Mlp load_mlp(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint " + path.string());
  io::Reader r(is, path.string());
  r.expect_magic(kCheckpointMagic);
  const auto version = r.pod<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  const auto layers = r.pod<std::uint32_t>();
  if (layers == 0 || layers > 1024) throw FormatError(path.string() + ": implausible layer count");
  std::vector<nd::Array> weights;
  std::vector<nd::Array> biases;
  for (std::uint32_t i = 0; i < layers; ++i) {
    const auto in = r.pod<std::uint64_t>();
    const auto out = r.pod<std::uint64_t>();
    if (in == 0 || out == 0 || in > (1u << 24) || out > (1u << 24)) {
      throw FormatError(path.string() + ": implausible layer shape");
    }
    nd::Array w({in, out});
    r.doubles(w.data(), w.size());
    nd::Array b({1, out});
    r.doubles(b.data(), b.size());
    weights.push_back(std::move(w));
    biases.push_back(std::move(b));
  }
  if (!r.at_end()) throw FormatError(path.string() + ": trailing bytes after last layer");
  try {
    return Mlp::from_layers(std::move(weights), std::move(biases));
  } catch (const std::invalid_argument& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

nlohmann::json load_sidecar(const std::filesystem::path& path) {
  std::ifstream is(sidecar_path(path));
  if (!is) throw FormatError("missing sidecar for " + path.string());
  return nlohmann::json::parse(is);
}

void save_arrays(const std::filesystem::path& path, std::span<const nd::Array> arrays) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  os.write(kArrayListMagic, 6);
  io::write_pod<std::uint32_t>(os, kCheckpointVersion);
  io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(arrays.size()));
  for (const auto& a : arrays) {
    io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(a.rank()));
    for (std::size_t d : a.shape()) io::write_pod<std::uint64_t>(os, d);
    io::write_doubles(os, a.data(), a.size());
  }
  if (!os) throw FormatError("write failed for " + path.string());
}

std::vector<nd::Array> load_arrays(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  io::Reader r(is, path.string());
  r.expect_magic(kArrayListMagic);
  const auto version = r.pod<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw FormatError(path.string() + ": unsupported version " + std::to_string(version));
  }
  const auto count = r.pod<std::uint32_t>();
  if (count > (1u << 20)) throw FormatError(path.string() + ": implausible array count");
  std::vector<nd::Array> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto rank = r.pod<std::uint32_t>();
    if (rank > 8) throw FormatError(path.string() + ": implausible rank");
    nd::Shape shape(rank);
    std::uint64_t total = 1;
    for (auto& d : shape) {
      d = r.pod<std::uint64_t>();
      total *= d;
      if (d > (1u << 24) || total > (1u << 28)) throw FormatError(path.string() + ": implausible shape");
    }
    nd::Array a(shape);
    r.doubles(a.data(), a.size());
    out.push_back(std::move(a));
  }
  if (!r.at_end()) throw FormatError(path.string() + ": trailing bytes");
  return out;
}

}  // namespace bracplus::nn
