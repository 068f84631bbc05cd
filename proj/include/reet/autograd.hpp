#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <vector>

#include "reet/tensor.hpp"

namespace reet {

/// Handle to a value recorded in a Graph.
struct Var {
  std::uint32_t id = 0;
};

class GraphConsumed : public std::logic_error {
public:
  GraphConsumed() : std::logic_error("backward already ran on this recording; record a new graph") {}
};

/// A single-use reverse-mode recording.
///
/// Values are appended in execution order, so reverse insertion order is a
/// valid topological order for the backward sweep. A graph belongs to one
/// thread from its first node until backward().
class Graph {
public:
  /// Receives d(loss)/d(node output) and accumulates into the parents.
  using BackwardFn = std::function<void(Graph&, const Tensor& grad_out)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var leaf(Tensor value, bool requires_grad = false);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Records an op result. `fn` is dropped when no parent needs a gradient.
  Var record(Tensor value, std::span<const Var> parents, BackwardFn fn);
  Var record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn) {
    return record(std::move(value), std::span<const Var>(parents.begin(), parents.size()), std::move(fn));
  }

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  /// Gradient of a leaf after backward(); zeros if nothing reached it.
  Tensor grad(Var v) const;

  /// Adds `g` to the gradient buffer of `v`; no-op unless v requires grad.
  void accumulate(Var v, const Tensor& g);
  /// Raw buffer access for ops that scatter directly into parent grads.
  float* grad_buffer(Var v);

  void backward(Var loss);
  bool consumed() const { return consumed_; }
  std::size_t size() const { return nodes_.size(); }

private:
  struct Node {
    Tensor value;
    Tensor grad;
    BackwardFn backward;
    bool requires_grad = false;
  };
  // deque: references returned by value() stay valid while recording.
  std::deque<Node> nodes_;
  bool consumed_ = false;
};

}  // namespace reet
