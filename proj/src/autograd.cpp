#include "reet/autograd.hpp"

#include <string>

namespace reet {

Var Graph::leaf(Tensor value, bool requires_grad) {
  if (consumed_) throw GraphConsumed();
  nodes_.push_back(Node{std::move(value), {}, {}, requires_grad});
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Graph::record(Tensor value, std::span<const Var> parents, BackwardFn fn) {
  if (consumed_) throw GraphConsumed();
  bool needs = false;
  for (Var p : parents) needs = needs || nodes_.at(p.id).requires_grad;
  nodes_.push_back(Node{std::move(value), {}, needs ? std::move(fn) : BackwardFn{}, needs});
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Tensor Graph::grad(Var v) const {
  const Node& n = nodes_.at(v.id);
  if (n.grad.empty()) return Tensor(n.value.shape(), 0.0f);
  return n.grad;
}

float* Graph::grad_buffer(Var v) {
  Node& n = nodes_.at(v.id);
  if (!n.requires_grad) return nullptr;
  if (n.grad.empty()) n.grad = Tensor(n.value.shape(), 0.0f);
  return n.grad.ptr();
}

void Graph::accumulate(Var v, const Tensor& g) {
  float* buf = grad_buffer(v);
  if (!buf) return;
  const Tensor& value = nodes_[v.id].value;
  if (g.numel() != value.numel()) {
    throw std::logic_error("gradient shape " + shape_str(g.shape()) + " does not match value shape " +
                           shape_str(value.shape()));
  }
  for (std::size_t i = 0; i < g.numel(); ++i) buf[i] += g[i];
}

void Graph::backward(Var loss) {
  if (consumed_) throw GraphConsumed();
  Node& root = nodes_.at(loss.id);
  if (root.value.numel() != 1) {
    throw std::invalid_argument("backward needs a scalar loss, got shape " + shape_str(root.value.shape()));
  }
  consumed_ = true;
  if (!root.requires_grad) return;
  root.grad = Tensor(root.value.shape(), 1.0f);
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward || n.grad.empty()) continue;
    // Moved out of the node before the call.
    Tensor g = std::move(n.grad);
    n.grad = Tensor();
    n.backward(*this, g);
    n.backward = nullptr;
  }
}

}  // namespace reet
