#pragma once

#include <deque>
#include <functional>
#include <initializer_list>
#include <vector>

#include "rpt/tensor.hpp"

namespace rpt {

class Graph;

/// Handle to a value recorded in a Graph. Cheap to copy; valid while the graph lives.
class Var {
 public:
  Var() = default;

  bool valid() const { return graph_ != nullptr; }
  Graph& graph() const { return *graph_; }
  int id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  friend class Graph;
  Var(Graph* g, int id) : graph_(g), id_(id) {}

  Graph* graph_ = nullptr;
  int id_ = -1;
};

/// View handed to an op's backward closure.
class BackwardContext {
 public:
  const Tensor& grad_out() const;
  const Tensor& out() const;
  const Tensor& in(int k) const;
  /// Gradient buffer of input k, or nullptr when that input does not need one.
  Tensor* in_grad(int k);

 private:
  friend class Graph;
  BackwardContext(Graph& g, int node) : graph_(g), node_(node) {}
  Graph& graph_;
  int node_;
};

using BackwardFn = std::function<void(BackwardContext&)>;

/// Gradients of a scalar loss, keyed by leaf. Leaves off every path read as zero.
class GradientMap {
 public:
  const Tensor& operator[](Var leaf) const;

 private:
  friend class Graph;
  const Graph* graph_ = nullptr;
  mutable std::deque<Tensor> zeros_;
};

/// Reverse-mode tape. Nodes are appended in creation order, which is a
/// topological order, and backward walks it once in reverse.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Trainable leaf; the value is copied into the graph.
  Var param(Tensor value);
  /// Non-trainable leaf.
  Var constant(Tensor value);
  /// Leaf that borrows `value`; the tensor must outlive the graph.
  Var borrow(const Tensor& value, bool requires_grad = false);

  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward);
  Var record(Tensor value, const std::vector<Var>& inputs, BackwardFn backward);

  const Tensor& value(Var v) const { return node(v.id()).value(); }
  bool requires_grad(Var v) const { return node(v.id()).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Runs reverse accumulation from a scalar loss.
  GradientMap backward(Var loss);
  /// Gradient of `v` from the last backward; zeros when `v` was not reached.
  Tensor grad(Var v) const;

 private:
  friend class BackwardContext;
  friend class GradientMap;

  struct Node {
    Tensor owned;
    const Tensor* borrowed = nullptr;
    Tensor grad;
    std::vector<int> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    bool leaf = false;
    const Tensor& value() const { return borrowed ? *borrowed : owned; }
  };

  Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  Var add_leaf(Tensor owned, const Tensor* borrowed, bool requires_grad);
  void check_owner(Var v) const;

  std::deque<Node> nodes_;
};

}  // namespace rpt
