#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <string>
#include <utility>
#include <vector>

#include "lidarflow/error.hpp"
#include "lidarflow/tensor.hpp"

namespace lidarflow {

template <typename T>
class Graph;

/// Handle to a value recorded in a Graph.
template <typename T>
struct Var {
  Graph<T>* graph = nullptr;
  std::size_t id = 0;

  [[nodiscard]] bool valid() const { return graph != nullptr; }
  [[nodiscard]] const Tensor<T>& value() const { return graph->value(*this); }
  [[nodiscard]] const Shape4& shape() const { return graph->value(*this).shape(); }
};

/// Tape of recorded operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every node's inputs have
/// smaller ids and a reverse sweep is a valid topological order. One graph
/// is owned by one thread; independent graphs may run concurrently.
template <typename T>
class Graph {
 public:
  /// Receives the graph and the id of the node whose output gradient is ready.
  using BackwardFn = std::function<void(Graph&, std::size_t)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Constant input; never receives a gradient.
  Var<T> input(Tensor<T> value) { return push(std::move(value), false, {}, nullptr, "input"); }

  /// Leaf whose gradient is populated by backward().
  Var<T> parameter(Tensor<T> value) { return push(std::move(value), true, {}, nullptr, "parameter"); }

  /// Record the result of an operation. The node requires a gradient iff any
  /// input does; `op` names the operation in error messages.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn, const char* op) {
    std::vector<std::size_t> ids;
    ids.reserve(inputs.size());
    bool needs = false;
    for (const auto& v : inputs) {
      if (v.graph != this) throw Error(std::string(op) + ": input belongs to a different graph");
      ids.push_back(v.id);
      needs = needs || nodes_[v.id].requires_grad;
    }
    if (!value.all_finite()) throw NumericalError(std::string(op) + ": produced a non-finite value");
    return push(std::move(value), needs, std::move(ids), needs ? std::move(fn) : BackwardFn{}, op);
  }

  [[nodiscard]] const Tensor<T>& value(Var<T> v) const { return nodes_.at(v.id).value; }
  [[nodiscard]] const Tensor<T>& value(std::size_t id) const { return nodes_[id].value; }
  [[nodiscard]] bool requires_grad(Var<T> v) const { return nodes_.at(v.id).requires_grad; }
  [[nodiscard]] const std::vector<std::size_t>& inputs_of(std::size_t id) const { return nodes_[id].inputs; }
  [[nodiscard]] std::size_t size() const { return nodes_.size(); }

  /// Gradient of the last backward() target w.r.t. `v`; null if none reached it.
  [[nodiscard]] const Tensor<T>* grad(Var<T> v) const {
    const auto& node = nodes_.at(v.id);
    return node.grad.empty() && node.value.size() != 0 ? nullptr : &node.grad;
  }

  /// Output gradient of node `id` (valid inside a BackwardFn).
  [[nodiscard]] const Tensor<T>& out_grad(std::size_t id) const { return nodes_[id].grad; }

  /// Accumulator for the gradient of node `id`, zero-initialised on first use;
  /// null when the node does not require a gradient.
  Tensor<T>* grad_sink(std::size_t id) {
    auto& node = nodes_[id];
    if (!node.requires_grad) return nullptr;
    if (node.grad.shape() != node.value.shape() || (node.grad.empty() && node.value.size() != 0)) {
      node.grad = Tensor<T>(node.value.shape());
    }
    return &node.grad;
  }

  /// Populate gradients of `loss` (a single-element node) w.r.t. every
  /// reachable node that requires one.
  void backward(Var<T> loss) {
    if (loss.graph != this) throw Error("backward: loss belongs to a different graph");
    if (backward_done_) throw ReentrancyError("backward called twice without zero_grad()");
    auto& root = nodes_.at(loss.id);
    if (root.value.size() != 1) {
      throw ShapeError("backward: loss must be a scalar, got " + to_string(root.value.shape()));
    }
    backward_done_ = true;
    if (!root.requires_grad) return;
    root.grad = Tensor<T>(root.value.shape(), T{1});
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      auto& node = nodes_[i];
      if (!node.requires_grad || !node.backward || node.grad.empty()) continue;
      node.backward(*this, i);
    }
  }

  /// Clear every gradient and re-arm backward().
  void zero_grad() {
    for (auto& node : nodes_) node.grad = Tensor<T>();
    backward_done_ = false;
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    const char* op = "";
  };

  Var<T> push(Tensor<T> value, bool requires_grad, std::vector<std::size_t> inputs, BackwardFn fn, const char* op) {
    nodes_.push_back(Node{std::move(value), Tensor<T>(), requires_grad, std::move(inputs), std::move(fn), op});
    return Var<T>{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

}  // namespace lidarflow
