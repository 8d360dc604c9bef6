#pragma once

#include <deque>
#include <functional>
#include <initializer_list>
#include <string>

#include "smn/tensor.hpp"

namespace smn {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  bool valid() const noexcept { return tape_ != nullptr; }
  Tape* tape() const noexcept { return tape_; }
  int id() const noexcept { return id_; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// Records a computation for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and backward() walks it once in reverse. A tape belongs to
/// one roll-out and is not thread-safe.
class Tape {
 public:
  // grad_out is the gradient w.r.t. the node's output; out is its value.
  using BackwardFn = std::function<void(const Tensor& grad_out, const Tensor& out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var variable(Tensor value);
  // Leaf whose gradient is added into *sink at the end of backward().
  // A null sink makes it a constant.
  Var parameter(const Tensor& value, Tensor* sink);

  // Output node of an operation. The closure is kept only if some input
  // requires a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);

  // Same value, but no gradient flows back through this node.
  Var stop_gradient(const Var& x);

  // Seeds d(loss)/d(loss) = 1. The loss must hold exactly one element.
  void backward(const Var& loss);

  // Gradient accumulated for v by the last backward(); zeros if none reached it.
  Tensor grad(const Var& v) const;

  // Mutable gradient buffer of v, allocated on first use; nullptr if v does not
  // require a gradient. Backward closures accumulate into it.
  Tensor* grad_buffer(const Var& v);

  const Tensor& value(int id) const { return nodes_[id].value; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }
  std::size_t stop_markers() const noexcept { return stop_markers_; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool has_grad = false;
    BackwardFn backward;
    Tensor* sink = nullptr;
  };

  Var push(Node node);
  void check_owner(const Var& v) const;

  std::deque<Node> nodes_;
  std::size_t stop_markers_ = 0;
};

}  // namespace smn
