// Copyright 2026 The bracplus Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <vector>

#include "bracplus/ndgrad/var.hpp"

namespace bracplus::nd {

/// Reverse pass from a scalar `root`; adds d root / d leaf into the `grad` of
/// every reachable leaf that requires grad. Throws ShapeError on a non-scalar root.
void backward(const Var& root);

/// Gradients of scalar `root` with respect to `inputs`, returned in order.
/// Inputs the root does not depend on get zeros. With `create_graph` the
/// returned gradients are themselves recorded, so any scalar built from them
/// can be differentiated again (used by the action-gradient penalty).
std::vector<Var> grad(const Var& root, std::span<const Var> inputs, bool create_graph = false);

inline Var grad(const Var& root, const Var& input, bool create_graph = false) {
  return grad(root, std::span<const Var>(&input, 1), create_graph).front();
}

}  // namespace bracplus::nd
