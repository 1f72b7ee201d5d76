#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "mhssm/ops.hpp"

namespace mhssm {

using Rng = std::mt19937_64;

// Stateless 64-bit mixer used to derive independent seeds.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

/// Named trainable tensors in declaration order.
class ParameterSet {
 public:
  // Adds `name` initialised by `init()` unless it already exists; an existing
  // entry is returned as-is and must have the requested shape.
  const Tensor& declare(const std::string& name, const Shape& shape,
                        const std::function<Tensor()>& init);

  bool contains(const std::string& name) const { return values_.count(name) != 0; }
  const Tensor& get(const std::string& name) const;
  void set(const std::string& name, Tensor value);

  const std::vector<std::string>& names() const { return order_; }
  std::size_t num_tensors() const { return order_.size(); }
  std::size_t num_scalars() const;

 private:
  std::vector<std::string> order_;
  std::unordered_map<std::string, Tensor> values_;
};

using NamedTensors = std::unordered_map<std::string, Tensor>;

enum class Mode { eval, train };

/// One forward pass: owns the tape, binds parameters lazily as trainable
/// leaves, and carries the dropout stream.
class Context {
 public:
  explicit Context(const ParameterSet& params, Mode mode = Mode::eval,
                   std::uint64_t dropout_seed = 0);

  GradTape& tape() { return tape_; }
  Var param(const std::string& name);
  Var constant(Tensor value) { return tape_.constant(std::move(value)); }

  bool training() const { return mode_ == Mode::train; }
  Rng& rng() { return rng_; }

  // Gradients for every parameter in the set; unused ones are zero.
  NamedTensors gradients(Var loss);

 private:
  const ParameterSet* params_;
  Mode mode_;
  Rng rng_;
  GradTape tape_;
  std::unordered_map<std::string, Var> bound_;
};

Tensor uniform_tensor(const Shape& shape, double lo, double hi, Rng& rng);
Tensor normal_tensor(const Shape& shape, double stddev, Rng& rng);

class Linear {
 public:
  Linear() = default;
  Linear(ParameterSet& params, std::string prefix, std::size_t in, std::size_t out, Rng& rng,
         bool bias = true);

  Var operator()(Context& ctx, Var x) const;

  std::size_t in_dim() const { return in_; }
  std::size_t out_dim() const { return out_; }
  const std::string& weight_name() const { return weight_; }
  // Empty for a bias-free projection.
  const std::string& bias_name() const { return bias_; }

 private:
  std::string weight_, bias_;
  std::size_t in_ = 0, out_ = 0;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParameterSet& params, std::string prefix, std::size_t dim);

  Var operator()(Context& ctx, Var x) const;

 private:
  std::string gain_, bias_;
  static constexpr double kEps = 1e-5;
};

}  // namespace mhssm
