// Copyright 2026 The bracplus Authors
// SPDX-License-Identifier: Apache-2.0

#include "bracplus/ndgrad/autograd.hpp"

#include <optional>
#include <unordered_map>
#include <unordered_set>

namespace bracplus::nd {

namespace {

// Nodes reachable from root through grad-requiring edges, parents before children.
std::vector<Var> topo_order(const Var& root) {
  std::vector<Var> order;
  std::unordered_set<Node*> visited;
  struct Frame {
    Var v;
    std::size_t next = 0;
  };
  std::vector<Frame> stack;
  stack.push_back({root, 0});
  visited.insert(root.node());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (!f.v.is_leaf() && f.next < f.v.parents().size()) {
      const Var p = f.v.parents()[f.next++];
      if (p.requires_grad() && visited.insert(p.node()).second) stack.push_back({p, 0});
      continue;
    }
    order.push_back(f.v);
    stack.pop_back();
  }
  return order;
}

void require_scalar(const Var& root) {
  if (!root.defined()) throw std::invalid_argument("backward: undefined root");
  if (root.size() != 1) {
    throw ShapeError("backward: root must be scalar, got shape " + to_string(root.shape()));
  }
}

// Reverse sweep; returns the accumulated gradient of every node in `keep`, plus
// every reached leaf when `keep_leaves` is set.
std::unordered_map<Node*, Var> run_reverse(const Var& root, const std::unordered_set<Node*>& keep,
                                           bool keep_leaves, bool create_graph) {
  std::unordered_map<Node*, Var> result;
  if (!root.requires_grad()) return result;

  std::optional<NoGradGuard> no_grad;
  std::optional<EnableGradGuard> with_grad;
  if (create_graph) {
    with_grad.emplace();
  } else {
    no_grad.emplace();
  }

  const std::vector<Var> order = topo_order(root);
  std::unordered_map<Node*, Var> grads;
  grads.emplace(root.node(), constant(Array(root.shape(), 1.0)));

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const Var& v = *it;
    auto found = grads.find(v.node());
    if (found == grads.end()) continue;
    Var g = found->second;
    if (keep.count(v.node()) || (keep_leaves && v.is_leaf())) result.emplace(v.node(), g);
    grads.erase(found);
    if (v.is_leaf()) continue;

    const std::vector<Var> pg = v.node()->backward(v, g);
    const auto& parents = v.parents();
    for (std::size_t i = 0; i < parents.size(); ++i) {
      if (!parents[i].requires_grad() || i >= pg.size() || !pg[i].defined()) continue;
      auto [slot, inserted] = grads.try_emplace(parents[i].node(), pg[i]);
      if (!inserted) slot->second = add(slot->second, pg[i]);
    }
  }
  return result;
}

}  // namespace

void backward(const Var& root) {
  require_scalar(root);
  for (const auto& [node, g] : run_reverse(root, {}, true, false)) {
    auto& slot = node->grad;
    if (!slot) {
      slot = g.value();
    } else {
      double* dst = slot->data();
      const double* src = g.value().data();
      for (std::size_t i = 0; i < slot->size(); ++i) dst[i] += src[i];
    }
  }
}

std::vector<Var> grad(const Var& root, std::span<const Var> inputs, bool create_graph) {
  require_scalar(root);
  std::unordered_set<Node*> keep;
  for (const Var& in : inputs) keep.insert(in.node());
  const auto grads = run_reverse(root, keep, false, create_graph);
  std::vector<Var> out;
  out.reserve(inputs.size());
  for (const Var& in : inputs) {
    auto it = grads.find(in.node());
    out.push_back(it != grads.end() ? it->second : constant(Array::zeros_like(in.value())));
  }
  return out;
}

}  // namespace bracplus::nd
