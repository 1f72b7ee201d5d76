#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <unordered_map>
#include <vector>

#include "mhssm/tensor.hpp"

namespace mhssm {

class GradTape;

/// Handle to a value recorded on a GradTape.
struct Var {
  GradTape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool valid() const { return tape != nullptr; }
};

/// Adjoint buffers of a node's inputs, handed to its backward function.
class Adjoints {
 public:
  // False when input k does not lead to any trainable leaf.
  bool wants(std::size_t k) const;
  // Accumulation buffer of input k, zero-initialised on first use.
  std::span<double> grad(std::size_t k);

 private:
  friend class GradTape;
  Adjoints(GradTape& tape, std::span<const std::size_t> inputs)
      : tape_(tape), inputs_(inputs) {}
  GradTape& tape_;
  std::span<const std::size_t> inputs_;
};

class Gradients {
 public:
  // Gradient of the loss with respect to a trainable leaf.
  const Tensor& of(const Var& leaf) const;
  bool contains(const Var& leaf) const { return grads_.count(leaf.id) != 0; }

 private:
  friend class GradTape;
  std::unordered_map<std::size_t, Tensor> grads_;
};

/// Reverse-mode record of tensor operations.
///
/// Nodes are appended in execution order; backward() walks them in exact
/// reverse order and accumulates adjoints additively, so a value consumed k
/// times receives the sum of k partial adjoints. Single-threaded.
class GradTape {
 public:
  using BackwardFn = std::function<void(const Tensor& grad_out, Adjoints& adj)>;

  GradTape() = default;
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  Var constant(Tensor value);
  Var parameter(Tensor value);
  // Records an op output. The backward function is dropped when no input
  // requires a gradient.
  Var record(Tensor value, const std::vector<Var>& inputs, BackwardFn backward);

  const Tensor& value(const Var& v) const;
  bool requires_grad(const Var& v) const;
  std::size_t size() const { return nodes_.size(); }

  // `visit` observes node ids in the order backward functions run.
  Gradients backward(const Var& loss,
                     const std::function<void(std::size_t)>& visit = {});

 private:
  friend class Adjoints;

  struct Node {
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    bool trainable = false;
  };

  void check_owned(const Var& v, const char* what) const;

  std::deque<Node> nodes_;  // stable references across push_back
  std::vector<std::vector<double>> adjoints_;
};

}  // namespace mhssm
