/*
 * Copyright 2026 The mmfuse Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Minimal tape-free reverse-mode automatic differentiation over dense
// row-major double matrices. Every op records its parents and a backward
// closure on a heap node; `backward(root)` walks the graph in reverse
// topological order. Graphs are built per step and freed when the last Var
// referencing them goes away. Parameters are leaf nodes that outlive graphs.

#pragma once

#include <cstddef>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mmfuse/core/error.hpp"
#include "mmfuse/core/tensor.hpp"

namespace mmfuse::ad {

struct Node {
  Mat value;
  Mat grad;  // empty until something flows into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  bool defined() const { return node_ != nullptr; }
  const Mat& value() const { return node_->value; }
  // Direct write access, used by optimizers and parameter restore.
  Mat& mutable_value() { return node_->value; }
  const Mat& grad() const { return node_->grad; }
  bool requires_grad() const { return node_->requires_grad; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  double item() const { return node_->value(0, 0); }
  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& shared() const { return node_; }

  void zero_grad() { node_->grad.resize(0, 0); }

 private:
  std::shared_ptr<Node> node_;
};

inline Var constant(Mat value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return Var(std::move(n));
}

inline Var parameter(Mat value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  return Var(std::move(n));
}

inline void accumulate(Node& n, const Mat& g) {
  if (!n.requires_grad) return;
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

// Creates an interior node. The backward closure is only kept when at least
// one input needs a gradient.
template <class Backward>
Var make_node(Mat value, std::initializer_list<Var> inputs, Backward&& backward) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  for (const Var& in : inputs) {
    if (in.requires_grad()) n->requires_grad = true;
  }
  if (n->requires_grad) {
    for (const Var& in : inputs) n->parents.push_back(in.shared());
    n->backward = std::forward<Backward>(backward);
  }
  return Var(std::move(n));
}

template <class Backward>
Var make_node(Mat value, const std::vector<Var>& inputs, Backward&& backward) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  for (const Var& in : inputs) {
    if (in.requires_grad()) n->requires_grad = true;
  }
  if (n->requires_grad) {
    for (const Var& in : inputs) n->parents.push_back(in.shared());
    n->backward = std::forward<Backward>(backward);
  }
  return Var(std::move(n));
}

// Accumulates d(root)/d(node) into every reachable node that requires a
// gradient. `root` must be 1x1. Call once per graph.
inline void backward(const Var& root) {
  if (root.value().size() != 1) {
    throw ShapeError("backward() needs a scalar root, got " +
                     std::to_string(root.rows()) + "x" + std::to_string(root.cols()));
  }
  if (!root.requires_grad()) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->grad = Mat::Ones(1, 1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->grad.size() != 0) n->backward(*n);
  }
}

}  // namespace mmfuse::ad
