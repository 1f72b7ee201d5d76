#include "mhssm/tape.hpp"

#include <stdexcept>

namespace mhssm {

const Tensor& Var::value() const {
  if (!tape) throw std::logic_error("value() on an unbound Var");
  return tape->value(*this);
}

bool Adjoints::wants(std::size_t k) const {
  return tape_.nodes_[inputs_[k]].requires_grad;
}

std::span<double> Adjoints::grad(std::size_t k) {
  const auto id = inputs_[k];
  auto& buf = tape_.adjoints_[id];
  if (buf.empty()) buf.assign(tape_.nodes_[id].value.size(), 0.0);
  return buf;
}

const Tensor& Gradients::of(const Var& leaf) const {
  auto it = grads_.find(leaf.id);
  if (it == grads_.end()) {
    throw std::invalid_argument("no gradient recorded for node " +
                                std::to_string(leaf.id) +
                                " (not a trainable leaf)");
  }
  return it->second;
}

Var GradTape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, false, false});
  return Var{this, nodes_.size() - 1};
}

Var GradTape::parameter(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, true, true});
  return Var{this, nodes_.size() - 1};
}

Var GradTape::record(Tensor value, const std::vector<Var>& inputs,
                     BackwardFn backward) {
  Node node;
  node.value = std::move(value);
  node.inputs.reserve(inputs.size());
  for (const auto& in : inputs) {
    check_owned(in, "record");
    node.inputs.push_back(in.id);
    node.requires_grad = node.requires_grad || nodes_[in.id].requires_grad;
  }
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

const Tensor& GradTape::value(const Var& v) const {
  check_owned(v, "value");
  return nodes_[v.id].value;
}

bool GradTape::requires_grad(const Var& v) const {
  check_owned(v, "requires_grad");
  return nodes_[v.id].requires_grad;
}

void GradTape::check_owned(const Var& v, const char* what) const {
  if (v.tape != this || v.id >= nodes_.size()) {
    throw std::invalid_argument(std::string(what) +
                                ": variable is not recorded on this tape");
  }
}

Gradients GradTape::backward(const Var& loss,
                             const std::function<void(std::size_t)>& visit) {
  if (loss.tape != this || loss.id >= nodes_.size()) {
    throw std::invalid_argument("backward: loss is not recorded on this tape");
  }
  if (nodes_[loss.id].value.size() != 1) {
    throw DimensionError("backward: loss must be a scalar, got shape " +
                         to_string(nodes_[loss.id].value.shape()));
  }
  adjoints_.assign(nodes_.size(), {});
  adjoints_[loss.id] = {1.0};

  Gradients out;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.requires_grad || adjoints_[i].empty()) continue;
    if (node.trainable) {
      out.grads_.emplace(i, Tensor(node.value.shape(), std::move(adjoints_[i])));
      adjoints_[i] = {};
      continue;
    }
    if (!node.backward) continue;
    if (visit) visit(i);
    Tensor grad_out(node.value.shape(), std::move(adjoints_[i]));
    adjoints_[i] = {};
    Adjoints adj(*this, node.inputs);
    node.backward(grad_out, adj);
  }
  // Trainable leaves that the loss does not depend on get zero gradients.
  for (std::size_t i = 0; i <= loss.id; ++i) {
    if (nodes_[i].trainable && !out.grads_.count(i)) {
      out.grads_.emplace(i, Tensor(nodes_[i].value.shape()));
    }
  }
  adjoints_.clear();
  return out;
}

}  // namespace mhssm
