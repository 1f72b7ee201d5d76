#include "mhssm/nn.hpp"

#include <cmath>

namespace mhssm {

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  // splitmix64 finaliser over a combined word
  std::uint64_t z = a * 0x9E3779B97F4A7C15ull + b + 0x632BE59BD9B4E019ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

const Tensor& ParameterSet::declare(const std::string& name, const Shape& shape,
                                    const std::function<Tensor()>& init) {
  auto it = values_.find(name);
  if (it != values_.end()) {
    if (it->second.shape() != shape) {
      throw DimensionError("parameter '" + name + "' already declared with shape " +
                           to_string(it->second.shape()) + ", requested " + to_string(shape));
    }
    return it->second;
  }
  Tensor value = init();
  if (value.shape() != shape) {
    throw DimensionError("initialiser for '" + name + "' produced shape " +
                         to_string(value.shape()) + ", expected " + to_string(shape));
  }
  order_.push_back(name);
  return values_.emplace(name, std::move(value)).first->second;
}

const Tensor& ParameterSet::get(const std::string& name) const {
  auto it = values_.find(name);
  if (it == values_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return it->second;
}

void ParameterSet::set(const std::string& name, Tensor value) {
  auto it = values_.find(name);
  if (it == values_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  if (it->second.shape() != value.shape()) {
    throw DimensionError("parameter '" + name + "' has shape " + to_string(it->second.shape()) +
                         ", cannot assign " + to_string(value.shape()));
  }
  it->second = std::move(value);
}

std::size_t ParameterSet::num_scalars() const {
  std::size_t n = 0;
  for (const auto& [_, t] : values_) n += t.size();
  return n;
}

Context::Context(const ParameterSet& params, Mode mode, std::uint64_t dropout_seed)
    : params_(&params), mode_(mode), rng_(dropout_seed) {}

Var Context::param(const std::string& name) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  Var v = tape_.parameter(params_->get(name));
  bound_.emplace(name, v);
  return v;
}

NamedTensors Context::gradients(Var loss) {
  Gradients g = tape_.backward(loss);
  NamedTensors out;
  for (const auto& name : params_->names()) {
    auto it = bound_.find(name);
    if (it != bound_.end()) {
      out.emplace(name, g.of(it->second));
    } else {
      out.emplace(name, Tensor(params_->get(name).shape()));
    }
  }
  return out;
}

Tensor uniform_tensor(const Shape& shape, double lo, double hi, Rng& rng) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(shape, std::move(v));
}

Tensor normal_tensor(const Shape& shape, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(shape, std::move(v));
}

Linear::Linear(ParameterSet& params, std::string prefix, std::size_t in, std::size_t out,
               Rng& rng, bool bias)
    : weight_(prefix + ".weight"), bias_(bias ? prefix + ".bias" : ""), in_(in), out_(out) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  params.declare(weight_, {in, out}, [&] { return uniform_tensor({in, out}, -bound, bound, rng); });
  if (bias) params.declare(bias_, {out}, [&] { return uniform_tensor({out}, -bound, bound, rng); });
}

Var Linear::operator()(Context& ctx, Var x) const {
  if (x.shape().empty() || x.shape().back() != in_) {
    throw DimensionError("linear " + weight_ + ": expected last dim " + std::to_string(in_) +
                         ", got " + to_string(x.shape()));
  }
  Var y = matmul(x, ctx.param(weight_));
  return bias_.empty() ? y : add(y, ctx.param(bias_));
}

LayerNorm::LayerNorm(ParameterSet& params, std::string prefix, std::size_t dim)
    : gain_(prefix + ".gain"), bias_(prefix + ".bias") {
  params.declare(gain_, {dim}, [&] { return Tensor::full({dim}, 1.0); });
  params.declare(bias_, {dim}, [&] { return Tensor::zeros({dim}); });
}

Var LayerNorm::operator()(Context& ctx, Var x) const {
  return layer_norm(x, ctx.param(gain_), ctx.param(bias_), kEps);
}

}  // namespace mhssm
