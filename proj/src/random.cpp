// Copyright 2026 The bracplus Authors
// SPDX-License-Identifier: Apache-2.0

#include "bracplus/random.hpp"

#include <sstream>

namespace bracplus {

nd::Array Rng::normal_array(const nd::Shape& shape) {
  nd::Array a(shape);
  std::normal_distribution<double> dist(0.0, 1.0);
  for (auto& v : a.values()) v = dist(engine_);
  return a;
}

nd::Array Rng::uniform_array(const nd::Shape& shape, double lo, double hi) {
  nd::Array a(shape);
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : a.values()) v = dist(engine_);
  return a;
}

std::string Rng::state() const {
  std::ostringstream os;
  os << engine_;
  return os.str();
}

void Rng::restore(const std::string& state) {
  std::istringstream is(state);
  is >> engine_;
  if (!is) throw std::invalid_argument("Rng::restore: malformed engine state");
}

}  // namespace bracplus
