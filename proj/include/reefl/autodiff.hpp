// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string_view>
#include <vector>

#include "reefl/tensor.hpp"

namespace reefl {

class Graph;

/// One executed op on the tape. `backward` reads `grad` and accumulates into
/// the grads of the nodes it captured.
struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::string_view op;
  std::function<void(Node&)> backward;

  /// Zero-initialised on first use so untouched branches cost nothing.
  Tensor& grad_buffer();
  bool has_grad() const noexcept { return !grad.empty(); }
};

/// Non-owning handle to a node of a Graph. The graph must outlive it.
class Var {
 public:
  Var() = default;
  Var(Graph* graph, Node* node) : graph_(graph), node_(node) {}

  Graph& graph() const { return *graph_; }
  Node* node() const noexcept { return node_; }
  bool valid() const noexcept { return node_ != nullptr; }

  const Tensor& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_->requires_grad; }
  /// Gradient after Graph::backward; zeros if nothing reached this node.
  Tensor grad() const;

 private:
  Graph* graph_ = nullptr;
  Node* node_ = nullptr;
};

/// Define-by-run tape. Nodes are appended in execution order and backward
/// visits them in exactly the reverse order.
class Graph {
 public:
  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var param(Tensor value);
  Var constant(Tensor value);

  /// Appends an op result. Throws on non-finite output.
  Var record(Tensor value, std::string_view op, bool requires_grad, std::function<void(Node&)> backward);

  void backward(const Var& loss);

  bool grad_enabled() const noexcept { return grad_enabled_; }
  std::size_t size() const noexcept { return nodes_.size(); }
  const Node& node(std::size_t i) const { return *nodes_.at(i); }
  /// Tape positions whose backward ran during the last backward call, in call order.
  const std::vector<std::size_t>& backward_order() const noexcept { return backward_order_; }

 private:
  bool grad_enabled_;
  std::vector<std::unique_ptr<Node>> nodes_;
  std::vector<std::size_t> backward_order_;
};

}  // namespace reefl
