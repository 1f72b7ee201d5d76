#pragma once

#include <functional>
#include <string>

#include "mhssm/nn.hpp"

namespace mhssm {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  std::size_t elements_checked = 0;
};

// Compares analytic gradients of `loss_fn` against central differences for
// every element of every parameter in `params`. The per-element error is
// |a - n| / max(|a|, |n|, floor).
GradCheckReport check_gradients(const ParameterSet& params,
                                const std::function<Var(Context&)>& loss_fn,
                                double step = 1e-5, double floor = 1e-5);

// sum(x * w) for a fixed pseudo-random w of x's shape; turns any output into
// a scalar whose gradient exercises every element.
Var random_projection(Var x, std::uint64_t seed);

}  // namespace mhssm
