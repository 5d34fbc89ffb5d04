// SPDX-License-Identifier: Apache-2.0
#include "reefl/autodiff.hpp"

#include "reefl/error.hpp"

namespace reefl {

Tensor& Node::grad_buffer() {
  if (grad.empty()) grad = Tensor(value.shape(), 0.0);
  return grad;
}

Tensor Var::grad() const {
  if (node_->has_grad()) return node_->grad;
  return Tensor(node_->value.shape(), 0.0);
}

Var Graph::param(Tensor value) {
  require_finite(value, "parameter");
  auto node = std::make_unique<Node>();
  node->value = std::move(value);
  node->requires_grad = grad_enabled_;
  node->op = "param";
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.back().get());
}

Var Graph::constant(Tensor value) {
  require_finite(value, "constant");
  auto node = std::make_unique<Node>();
  node->value = std::move(value);
  node->op = "constant";
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.back().get());
}

Var Graph::record(Tensor value, std::string_view op, bool requires_grad,
                  std::function<void(Node&)> backward) {
  if (!value.all_finite()) {
    throw Error(ErrorKind::kNonFinite, "op '" + std::string(op) + "' produced NaN or Inf");
  }
  auto node = std::make_unique<Node>();
  node->value = std::move(value);
  node->op = op;
  node->requires_grad = requires_grad && grad_enabled_;
  if (node->requires_grad) node->backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.back().get());
}

void Graph::backward(const Var& loss) {
  if (&loss.graph() != this) throw Error(ErrorKind::kState, "loss belongs to a different graph");
  if (loss.value().numel() != 1) {
    throw Error(ErrorKind::kDimension, "backward needs a scalar loss, got " + shape_str(loss.shape()));
  }
  backward_order_.clear();
  if (!loss.requires_grad()) return;
  loss.node()->grad_buffer()[0] += 1.0;
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    Node& n = *nodes_[i];
    if (!n.requires_grad || !n.has_grad() || !n.backward) continue;
    backward_order_.push_back(i);
    n.backward(n);
  }
}

}  // namespace reefl
