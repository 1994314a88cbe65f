#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "ahbd/error.hpp"
#include "ahbd/tensor.hpp"

namespace ahbd {

template <class Real>
class BasicTape;

// Handle to a value recorded on a tape. Cheap to copy; only valid while the
// tape that produced it is alive.
template <class Real>
struct BasicVar {
  BasicTape<Real>* tape = nullptr;
  std::uint32_t id = 0;

  const BasicTensor<Real>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
};

// Define-by-run record of differentiable operations. A fresh tape is built
// for every forward pass; backward() replays it once in reverse creation
// order, which is a valid topological order because nodes can only refer to
// earlier nodes.
template <class Real>
class BasicTape {
 public:
  using Tensor = BasicTensor<Real>;
  using Var = BasicVar<Real>;
  using BackwardFn = std::function<void(BasicTape&)>;

  BasicTape() = default;
  BasicTape(const BasicTape&) = delete;
  BasicTape& operator=(const BasicTape&) = delete;

  // Records a parameter by reference. With requires_grad, backward() adds
  // d(root)/d(param) into param.grad().
  Var leaf(Tensor& param, bool requires_grad = true) {
    Node node;
    node.ref = &param;
    node.sink = requires_grad ? &param : nullptr;
    node.requires_grad = requires_grad;
    return push(std::move(node));
  }

  // Read-only parameter reference; never receives gradient.
  Var input(const Tensor& value) {
    Node node;
    node.ref = &value;
    return push(std::move(node));
  }

  Var constant(Tensor value) {
    Node node;
    node.owned = std::move(value);
    return push(std::move(node));
  }

  // Marks an intermediate value as differentiable so that its gradient is
  // available after backward() even when nothing upstream requires grad.
  Var watch(Var v) {
    nodes_.at(v.id).requires_grad = true;
    return v;
  }

  Var record(Tensor value, bool requires_grad, BackwardFn fn) {
    Node node;
    node.owned = std::move(value);
    node.requires_grad = requires_grad;
    if (requires_grad) node.backward = std::move(fn);
    return push(std::move(node));
  }

  const Tensor& value(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.ref ? *n.ref : n.owned;
  }

  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }

  // Gradient of the last backward() root w.r.t. v; empty when v was not
  // reached.
  std::span<const Real> grad(Var v) const { return nodes_.at(v.id).grad; }

  // Accumulation buffer for node id, allocated on first use. For ops.
  std::span<Real> grad_buffer(std::uint32_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(value_of(id).size(), Real{0});
    return n.grad;
  }
  std::span<const Real> grad_of(std::uint32_t id) const { return nodes_[id].grad; }
  const Tensor& value_of(std::uint32_t id) const {
    const Node& n = nodes_[id];
    return n.ref ? *n.ref : n.owned;
  }

  void backward(Var root) {
    if (root.tape != this) throw ContractError("backward: root belongs to another tape");
    if (value(root).size() != 1) {
      throw ContractError("backward: root must be scalar, got shape " + shape_string(value(root).shape()));
    }
    if (!nodes_[root.id].requires_grad) {
      throw ContractError("backward: root does not depend on any differentiable value");
    }
    if (backward_done_) throw ContractError("backward: tape already consumed");
    backward_done_ = true;
    grad_buffer(root.id)[0] = Real{1};
    visits_ = 0;
    for (std::uint32_t id = root.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      ++visits_;
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(*this);
      if (n.sink) {
        auto dst = n.sink->grad();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += n.grad[i];
      }
    }
  }

  std::size_t size() const { return nodes_.size(); }
  // Nodes visited by the last backward(): every node from the root down.
  std::size_t backward_visits() const { return visits_; }

 private:
  struct Node {
    Tensor owned;
    const Tensor* ref = nullptr;
    Tensor* sink = nullptr;
    std::vector<Real> grad;
    BackwardFn backward;
    bool requires_grad = false;
  };

  Var push(Node node) {
    nodes_.push_back(std::move(node));
    return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  std::vector<Node> nodes_;
  std::size_t visits_ = 0;
  bool backward_done_ = false;
};

using Tape = BasicTape<float>;
using Var = BasicVar<float>;

}  // namespace ahbd
