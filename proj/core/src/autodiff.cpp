#include "smn/autodiff.hpp"

#include "smn/error.hpp"

namespace smn {

const Tensor& Var::value() const {
  if (!tape_) throw Error("use of an unbound Var");
  return tape_->value(id_);
}

bool Var::requires_grad() const { return tape_ && tape_->requires_grad(id_); }

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

void Tape::check_owner(const Var& v) const {
  if (v.tape() != this) throw Error("Var belongs to a different tape");
}

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::variable(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  return push(std::move(n));
}

Var Tape::parameter(const Tensor& value, Tensor* sink) {
  Node n;
  n.value = value;
  n.requires_grad = sink != nullptr;
  n.sink = sink;
  return push(std::move(n));
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  for (const Var& in : inputs) {
    check_owner(in);
    if (in.requires_grad()) n.requires_grad = true;
  }
  if (n.requires_grad) n.backward = std::move(fn);
  return push(std::move(n));
}

Var Tape::stop_gradient(const Var& x) {
  check_owner(x);
  ++stop_markers_;
  return constant(x.value());
}

Tensor* Tape::grad_buffer(const Var& v) {
  check_owner(v);
  Node& n = nodes_[v.id()];
  if (!n.requires_grad) return nullptr;
  if (!n.has_grad) {
    n.grad = Tensor(n.value.shape(), 0.0);
    n.has_grad = true;
  }
  return &n.grad;
}

Tensor Tape::grad(const Var& v) const {
  check_owner(v);
  const Node& n = nodes_[v.id()];
  if (n.has_grad) return n.grad;
  return Tensor(n.value.shape(), 0.0);
}

void Tape::backward(const Var& loss) {
  check_owner(loss);
  if (loss.value().size() != 1) {
    throw ShapeError("backward() needs a single-element loss, got " + shape_str(loss.shape()));
  }
  if (!loss.value().all_finite()) throw NumericalError("non-finite loss");
  Tensor* seed = grad_buffer(loss);
  if (!seed) return;
  (*seed)[0] += 1.0;
  for (int id = loss.id(); id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.has_grad) continue;
    if (n.backward) n.backward(n.grad, n.value);
    if (n.sink) {
      if (n.sink->shape() != n.value.shape()) *n.sink = Tensor(n.value.shape(), 0.0);
      double* dst = n.sink->data();
      const double* src = n.grad.data();
      for (std::size_t i = 0; i < n.grad.size(); ++i) dst[i] += src[i];
    }
  }
}

}  // namespace smn
