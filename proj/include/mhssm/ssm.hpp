#pragma once

#include <cstdint>
#include <string>

#include "mhssm/nn.hpp"

namespace mhssm {

// Complex quantities are stored as trailing (re, im) pairs.

enum class InitScheme { s4d_lin, random_stable };

/// Continuous-time diagonal SSM for P independent single-input single-output
/// channels with N complex modes each.
///
/// Re(lambda) = -exp(log_neg_re) is negative for every parameter value, so
/// the discretised transition always has modulus below one.
struct DiagonalSsm {
  std::size_t state_dim = 0;
  std::size_t channels = 0;
  Tensor log_neg_re;  // [P, N]
  Tensor imag;        // [P, N]
  Tensor b;           // [P, N, 2]
  Tensor c;           // [P, N, 2]
  Tensor d;           // [P]
  Tensor log_dt;      // [P]
};

// s4d_lin: lambda_n = -1/2 + i*pi*n, B = 1, C complex normal / sqrt(N),
// D standard normal, dt log-uniform in [0.001, 0.1].
// random_stable: Re(lambda) ~ U[-1, -0.1], Im(lambda) ~ U[-pi, pi], rest as s4d_lin.
DiagonalSsm init_ssm(std::size_t state_dim, std::size_t channels, std::uint64_t seed,
                     InitScheme scheme);

struct SsmVars {
  Var log_neg_re, imag, b, c, d, log_dt;
};

struct DiscreteSsm {
  Var a_bar;  // [P, N, 2]
  Var b_bar;  // [P, N, 2]
  Var c;      // [P, N, 2]
  Var d;      // [P]
};

SsmVars bind_constants(GradTape& tape, const DiagonalSsm& ssm);
SsmVars bind_parameters(GradTape& tape, const DiagonalSsm& ssm);

// Registers an SSM's tensors under `prefix` and binds them from a Context.
void declare_ssm(ParameterSet& params, const std::string& prefix, std::size_t state_dim,
                 std::size_t channels, std::uint64_t seed, InitScheme scheme);
SsmVars bind_ssm(Context& ctx, const std::string& prefix);

// Zero-order hold: A_bar = exp(lambda dt), B_bar = (A_bar - 1) / lambda * B.
DiscreteSsm discretize(const SsmVars& ssm);

// K[p, k] = 2 Re(sum_n C B_bar A_bar^k). Kernels longer than 4096 taps take
// powers in log-magnitude/angle form.
Var materialize_kernel(const DiscreteSsm& ssm, std::size_t length);

// y[b, t, p] = sum_{s <= t} kernel[p, s] u[b, t - s, p]; kernel [P, >= L],
// u [B, L, P]. FFT with zero padding to at least 2L.
Var causal_conv(Var kernel, Var u);

// Both compute x_k = A_bar x_{k-1} + B_bar u_k, y_k = 2 Re(C x_k) + D u_k
// from x_0 = 0 on u [B, L, P]. The scan runs the recurrence directly; the
// convolution path materialises the kernel.
Var ssm_scan(const DiscreteSsm& ssm, Var u);
Var ssm_conv(const DiscreteSsm& ssm, Var u);

// Max |A_bar| over all modes of a continuous system.
double max_transition_modulus(const DiagonalSsm& ssm);

}  // namespace mhssm
