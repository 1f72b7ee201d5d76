#include "mhssm/gradcheck.hpp"

#include <cmath>

namespace mhssm {

GradCheckReport check_gradients(const ParameterSet& params,
                                const std::function<Var(Context&)>& loss_fn, double step,
                                double floor) {
  NamedTensors analytic;
  {
    Context ctx(params);
    analytic = ctx.gradients(loss_fn(ctx));
  }
  auto evaluate = [&](const ParameterSet& p) {
    Context ctx(p);
    return loss_fn(ctx).value().item();
  };

  GradCheckReport report;
  ParameterSet probe = params;
  for (const auto& name : params.names()) {
    const Tensor base = params.get(name);
    const Tensor& grad = analytic.at(name);
    for (std::size_t i = 0; i < base.size(); ++i) {
      Tensor plus = base;
      plus.mutable_data()[i] += step;
      probe.set(name, plus);
      const double fp = evaluate(probe);
      Tensor minus = base;
      minus.mutable_data()[i] -= step;
      probe.set(name, minus);
      const double fm = evaluate(probe);
      probe.set(name, base);

      const double numeric = (fp - fm) / (2.0 * step);
      const double a = grad[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), floor});
      const double err = std::abs(a - numeric) / denom;
      ++report.elements_checked;
      if (err > report.max_rel_error || !std::isfinite(err)) {
        report.max_rel_error = std::isfinite(err) ? err : INFINITY;
        report.worst_parameter = name;
        report.worst_index = i;
        report.analytic_at_worst = a;
        report.numeric_at_worst = numeric;
      }
    }
  }
  return report;
}

Var random_projection(Var x, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x9A3u));
  Tensor w = uniform_tensor(x.shape(), -1.0, 1.0, rng);
  return sum(mul(x, x.tape->constant(std::move(w))));
}

}  // namespace mhssm
