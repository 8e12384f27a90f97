#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "aenet/tensor.hpp"

namespace aenet {

// Trainable tensor plus its gradient accumulator. Owned by layers; the tape
// only holds a pointer while a graph is alive.
template <typename T>
struct Parameter {
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  explicit Parameter(Tensor<T> v) : value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad = Tensor<T>(value.shape()); }
};

template <typename T>
class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor<T>& value() const { return tape_->value(id_); }
  const Tensor<T>& grad() const { return tape_->grad(id_); }
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
  bool requires_grad() const { return tape_->requires_grad(id_); }

  Tape<T>* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Linear record of operations. Nodes are appended in evaluation order, so
// index order is a topological order and the backward sweep is a single
// reverse pass over indices.
//
// backward() zeroes interior gradients before each sweep; leaf gradients
// (Tape::leaf) accumulate across repeated calls until zero_leaf_grads().
// Parameter leaves flush their contribution into Parameter::grad at the end
// of every sweep, so Parameter::grad also accumulates across calls.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value) { return push(std::move(value), false, {}, nullptr); }
  Var<T> leaf(Tensor<T> value, bool requires_grad = true) {
    return push(std::move(value), requires_grad, {}, nullptr);
  }
  Var<T> param(Parameter<T>& p) { return push(p.value, true, {}, &p); }

  // Record an op result. `backward` receives (tape, self id) and must push
  // the node's gradient into its inputs via accumulate().
  Var<T> record(Tensor<T> value, bool requires_grad, BackwardFn backward) {
    return push(std::move(value), requires_grad, std::move(backward), nullptr);
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  // Gradient of node `id`; an all-zero tensor if nothing reached it.
  const Tensor<T>& grad(std::size_t id) {
    auto& n = nodes_.at(id);
    if (!matches(n.grad, n.value)) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  Tensor<T>& grad_buffer(std::size_t id) {
    auto& n = nodes_[id];
    if (!matches(n.grad, n.value)) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  void accumulate(std::size_t id, const Tensor<T>& g) {
    auto& n = nodes_[id];
    if (!n.requires_grad) return;
    auto& dst = grad_buffer(id);
    require_same_shape(dst, g, "accumulate");
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  }

  std::size_t size() const { return nodes_.size(); }

  // Non-smooth ops (relu, clamp, min/max selection) fold their branch
  // decisions into this signature. Two evaluations with equal signatures
  // took the same piecewise-smooth branch everywhere.
  void note_branch(std::uint64_t v) { branch_ = (branch_ ^ v) * 0x100000001B3ULL; }
  std::uint64_t branch_signature() const { return branch_; }

  // Reverse sweep from a single-element loss. Visits every node at or below
  // the loss index exactly once, in reverse order.
  void backward(const Var<T>& loss) {
    if (loss.tape() != this) throw ContractError("backward: loss belongs to another tape");
    if (value(loss.id()).size() != 1)
      throw DimensionError("backward: loss must be scalar, got " +
                           shape_str(value(loss.id()).shape()));
    for (auto& n : nodes_)
      if (n.backward) n.grad = Tensor<T>();
    if (!nodes_[loss.id()].requires_grad) return;
    grad_buffer(loss.id())[0] += T{1};
    last_visits_ = 0;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.requires_grad) continue;
      ++last_visits_;
      if (n.backward && n.grad.size() == n.value.size()) n.backward(*this, i);
    }
    for (auto& n : nodes_) {
      if (n.param == nullptr || n.grad.size() != n.value.size()) continue;
      auto& pg = n.param->grad;
      if (!matches(pg, n.value)) pg = Tensor<T>(n.value.shape());
      for (std::size_t j = 0; j < pg.size(); ++j) pg[j] += n.grad[j];
      n.grad = Tensor<T>();
    }
  }

  void zero_leaf_grads() {
    for (auto& n : nodes_)
      if (!n.backward) n.grad = Tensor<T>();
  }

  // Number of nodes visited by the most recent backward().
  std::size_t last_visit_count() const { return last_visits_; }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
    Parameter<T>* param = nullptr;
  };

  // A default-constructed tensor has shape {} but no storage, so compare
  // sizes as well as shapes.
  static bool matches(const Tensor<T>& a, const Tensor<T>& b) {
    return a.size() == b.size() && a.shape() == b.shape();
  }

  Var<T> push(Tensor<T> value, bool requires_grad, BackwardFn backward, Parameter<T>* p) {
    nodes_.push_back(Node{std::move(value), Tensor<T>(), requires_grad, std::move(backward), p});
    return Var<T>(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  std::size_t last_visits_ = 0;
  std::uint64_t branch_ = 0xCBF29CE484222325ULL;
};

template <typename T>
Tape<T>& same_tape(const Var<T>& a, const Var<T>& b) {
  if (a.tape() != b.tape() || a.tape() == nullptr)
    throw ContractError("op: operands live on different tapes");
  return *a.tape();
}

}  // namespace aenet
