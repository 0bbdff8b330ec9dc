#include "rpt/graph.hpp"

namespace rpt {

const Tensor& Var::value() const { return graph_->value(*this); }
bool Var::requires_grad() const { return graph_->requires_grad(*this); }

const Tensor& BackwardContext::grad_out() const { return graph_.node(node_).grad; }
const Tensor& BackwardContext::out() const { return graph_.node(node_).value(); }

const Tensor& BackwardContext::in(int k) const {
  return graph_.node(graph_.node(node_).inputs[static_cast<std::size_t>(k)]).value();
}

Tensor* BackwardContext::in_grad(int k) {
  auto& parent = graph_.node(graph_.node(node_).inputs[static_cast<std::size_t>(k)]);
  if (!parent.requires_grad) return nullptr;
  if (parent.grad.empty()) parent.grad = Tensor::zeros(parent.value().shape());
  return &parent.grad;
}

const Tensor& GradientMap::operator[](Var leaf) const {
  const auto& n = graph_->node(leaf.id());
  if (!n.grad.empty()) return n.grad;
  zeros_.push_back(Tensor::zeros(n.value().shape()));
  return zeros_.back();
}

Var Graph::add_leaf(Tensor owned, const Tensor* borrowed, bool requires_grad) {
  Node n;
  n.owned = std::move(owned);
  n.borrowed = borrowed;
  n.requires_grad = requires_grad;
  n.leaf = true;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Graph::param(Tensor value) { return add_leaf(std::move(value), nullptr, true); }
Var Graph::constant(Tensor value) { return add_leaf(std::move(value), nullptr, false); }
Var Graph::borrow(const Tensor& value, bool requires_grad) { return add_leaf({}, &value, requires_grad); }

void Graph::check_owner(Var v) const {
  if (v.graph_ != this) throw ContractError("variable belongs to a different graph");
}

Var Graph::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
  return record(std::move(value), std::vector<Var>(inputs), std::move(backward));
}

Var Graph::record(Tensor value, const std::vector<Var>& inputs, BackwardFn backward) {
  Node n;
  n.owned = std::move(value);
  n.inputs.reserve(inputs.size());
  for (Var v : inputs) {
    check_owner(v);
    n.inputs.push_back(v.id());
    n.requires_grad = n.requires_grad || node(v.id()).requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

GradientMap Graph::backward(Var loss) {
  check_owner(loss);
  if (value(loss).size() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " + shape_str(value(loss).shape()));
  }
  for (auto& n : nodes_) n.grad = Tensor();
  auto& root = node(loss.id());
  if (root.requires_grad) {
    root.grad = Tensor(root.value().shape(), 1.0f);
    for (int id = loss.id(); id >= 0; --id) {
      auto& n = node(id);
      if (n.leaf || !n.backward || n.grad.empty()) continue;
      BackwardContext ctx(*this, id);
      n.backward(ctx);
    }
  }
  GradientMap map;
  map.graph_ = this;
  return map;
}

Tensor Graph::grad(Var v) const {
  const auto& n = node(v.id());
  if (n.grad.empty()) return Tensor::zeros(n.value().shape());
  return n.grad;
}

}  // namespace rpt
