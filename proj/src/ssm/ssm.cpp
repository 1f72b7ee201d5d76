#include "mhssm/ssm.hpp"

#include <cmath>
#include <complex>
#include <numbers>

#include "mhssm/fft.hpp"

namespace mhssm {
namespace {

using cplx = std::complex<double>;

cplx load(std::span<const double> s, std::size_t i) { return {s[2 * i], s[2 * i + 1]}; }

void store(std::span<double> s, std::size_t i, cplx v) {
  s[2 * i] = v.real();
  s[2 * i + 1] = v.imag();
}

void accumulate(std::span<double> s, std::size_t i, cplx v) {
  s[2 * i] += v.real();
  s[2 * i + 1] += v.imag();
}

// exp(z) - 1 without cancellation for small |z|.
cplx expm1c(cplx z) {
  const double x = z.real();
  const double y = z.imag();
  const double s = std::sin(0.5 * y);
  return {std::expm1(x) * std::cos(y) - 2.0 * s * s, std::exp(x) * std::sin(y)};
}

constexpr std::size_t kLogSpaceThreshold = 4096;

struct PN {
  std::size_t p, n;
};

PN check_ssm_shapes(const SsmVars& s) {
  const Shape& sr = s.log_neg_re.shape();
  if (sr.size() != 2) throw DimensionError("ssm: log_neg_re must be [P, N], got " + to_string(sr));
  const std::size_t p = sr[0], n = sr[1];
  auto expect = [](const Var& v, const Shape& shape, const char* name) {
    if (v.shape() != shape) {
      throw DimensionError(std::string("ssm: ") + name + " must be " + to_string(shape) +
                           ", got " + to_string(v.shape()));
    }
  };
  expect(s.imag, {p, n}, "imag");
  expect(s.b, {p, n, 2}, "b");
  expect(s.c, {p, n, 2}, "c");
  expect(s.d, {p}, "d");
  expect(s.log_dt, {p}, "log_dt");
  return {p, n};
}

Var zoh_transition(Var log_neg_re, Var imag, Var log_dt) {
  const Tensor rv = log_neg_re.value();
  const Tensor wv = imag.value();
  const Tensor sv = log_dt.value();
  const std::size_t p = rv.dim(0), n = rv.dim(1);
  std::vector<double> out(p * n * 2);
  for (std::size_t i = 0; i < p; ++i) {
    const double dt = std::exp(sv[i]);
    for (std::size_t j = 0; j < n; ++j) {
      const cplx lambda(-std::exp(rv[i * n + j]), wv[i * n + j]);
      store(out, i * n + j, std::exp(lambda * dt));
    }
  }
  Tensor a_bar(Shape{p, n, 2}, std::move(out));
  return log_neg_re.tape->record(
      a_bar, {log_neg_re, imag, log_dt},
      [a_bar, rv, wv, sv, p, n](const Tensor& g, Adjoints& adj) {
        const auto gs = g.data();
        const auto as = a_bar.data();
        std::span<double> gr, gw, gdt;
        if (adj.wants(0)) gr = adj.grad(0);
        if (adj.wants(1)) gw = adj.grad(1);
        if (adj.wants(2)) gdt = adj.grad(2);
        for (std::size_t i = 0; i < p; ++i) {
          const double dt = std::exp(sv[i]);
          for (std::size_t j = 0; j < n; ++j) {
            const std::size_t k = i * n + j;
            const cplx gz = std::conj(load(as, k)) * load(gs, k);
            const double er = std::exp(rv[k]);
            if (!gr.empty()) gr[k] += -er * dt * gz.real();
            if (!gw.empty()) gw[k] += dt * gz.imag();
            if (!gdt.empty()) {
              const cplx dz_ds(-er * dt, wv[k] * dt);  // lambda * dt
              gdt[i] += (gz * std::conj(dz_ds)).real();
            }
          }
        }
      });
}

Var zoh_input(Var log_neg_re, Var imag, Var log_dt, Var b) {
  const Tensor rv = log_neg_re.value();
  const Tensor wv = imag.value();
  const Tensor sv = log_dt.value();
  const Tensor bv = b.value();
  const std::size_t p = rv.dim(0), n = rv.dim(1);
  std::vector<double> out(p * n * 2);
  for (std::size_t i = 0; i < p; ++i) {
    const double dt = std::exp(sv[i]);
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t k = i * n + j;
      const cplx lambda(-std::exp(rv[k]), wv[k]);
      const cplx q = expm1c(lambda * dt) / lambda;
      store(out, k, q * load(bv.data(), k));
    }
  }
  return log_neg_re.tape->record(
      Tensor(Shape{p, n, 2}, std::move(out)), {log_neg_re, imag, log_dt, b},
      [rv, wv, sv, bv, p, n](const Tensor& g, Adjoints& adj) {
        const auto gs = g.data();
        std::span<double> gr, gw, gdt, gb;
        if (adj.wants(0)) gr = adj.grad(0);
        if (adj.wants(1)) gw = adj.grad(1);
        if (adj.wants(2)) gdt = adj.grad(2);
        if (adj.wants(3)) gb = adj.grad(3);
        for (std::size_t i = 0; i < p; ++i) {
          const double dt = std::exp(sv[i]);
          for (std::size_t j = 0; j < n; ++j) {
            const std::size_t k = i * n + j;
            const double er = std::exp(rv[k]);
            const cplx lambda(-er, wv[k]);
            const cplx z = lambda * dt;
            const cplx ez = std::exp(z);
            const cplx q = expm1c(z) / lambda;
            const cplx gout = load(gs, k);
            const cplx bk = load(bv.data(), k);
            if (!gb.empty()) accumulate(gb, k, std::conj(q) * gout);
            const cplx gq = std::conj(bk) * gout;
            const cplx dq_dlambda = (dt * ez - q) / lambda;
            const cplx glambda = std::conj(dq_dlambda) * gq;
            if (!gr.empty()) gr[k] += -er * glambda.real();
            if (!gw.empty()) gw[k] += glambda.imag();
            if (!gdt.empty()) gdt[i] += dt * (gq * std::conj(ez)).real();
          }
        }
      });
}

// Writes A^k for k < length into pw (complex, length entries).
void powers(cplx a, std::size_t length, std::vector<cplx>& pw) {
  pw.resize(length);
  if (length == 0) return;
  if (length > kLogSpaceThreshold) {
    const double mag = std::abs(a);
    if (mag == 0.0) {
      std::fill(pw.begin(), pw.end(), cplx(0.0, 0.0));
      pw[0] = 1.0;
      return;
    }
    const double log_mag = std::log(mag);
    const double angle = std::arg(a);
    for (std::size_t k = 0; k < length; ++k) {
      const double kk = static_cast<double>(k);
      pw[k] = std::polar(std::exp(kk * log_mag), kk * angle);
    }
    return;
  }
  cplx cur(1.0, 0.0);
  for (std::size_t k = 0; k < length; ++k) {
    pw[k] = cur;
    cur *= a;
  }
}

}  // namespace

DiagonalSsm init_ssm(std::size_t state_dim, std::size_t channels, std::uint64_t seed,
                     InitScheme scheme) {
  if (state_dim < 1 || channels < 1) {
    throw ConfigError("init_ssm: state_dim and channels must be >= 1 (got N=" +
                      std::to_string(state_dim) + ", P=" + std::to_string(channels) + ")");
  }
  const std::size_t p = channels, n = state_dim;
  Rng rng(mix_seed(seed, 0x55u));
  DiagonalSsm s;
  s.state_dim = n;
  s.channels = p;
  std::vector<double> r(p * n), w(p * n);
  if (scheme == InitScheme::s4d_lin) {
    for (std::size_t i = 0; i < p; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        r[i * n + j] = std::log(0.5);
        w[i * n + j] = std::numbers::pi * static_cast<double>(j);
      }
    }
  } else {
    std::uniform_real_distribution<double> re(0.1, 1.0);
    std::uniform_real_distribution<double> im(-std::numbers::pi, std::numbers::pi);
    for (std::size_t k = 0; k < p * n; ++k) {
      r[k] = std::log(re(rng));
      w[k] = im(rng);
    }
  }
  s.log_neg_re = Tensor({p, n}, std::move(r));
  s.imag = Tensor({p, n}, std::move(w));
  std::vector<double> b(p * n * 2, 0.0);
  for (std::size_t k = 0; k < p * n; ++k) b[2 * k] = 1.0;
  s.b = Tensor({p, n, 2}, std::move(b));
  // Complex standard normal has unit second moment: each part has variance 1/2.
  s.c = normal_tensor({p, n, 2}, std::sqrt(0.5 / static_cast<double>(n)), rng);
  s.d = normal_tensor({p}, 1.0, rng);
  s.log_dt = uniform_tensor({p}, std::log(0.001), std::log(0.1), rng);
  return s;
}

SsmVars bind_constants(GradTape& tape, const DiagonalSsm& s) {
  return {tape.constant(s.log_neg_re), tape.constant(s.imag), tape.constant(s.b),
          tape.constant(s.c),          tape.constant(s.d),    tape.constant(s.log_dt)};
}

SsmVars bind_parameters(GradTape& tape, const DiagonalSsm& s) {
  return {tape.parameter(s.log_neg_re), tape.parameter(s.imag), tape.parameter(s.b),
          tape.parameter(s.c),          tape.parameter(s.d),    tape.parameter(s.log_dt)};
}

void declare_ssm(ParameterSet& params, const std::string& prefix, std::size_t state_dim,
                 std::size_t channels, std::uint64_t seed, InitScheme scheme) {
  // Initialise once so every field comes from the same draw sequence.
  std::optional<DiagonalSsm> init;
  auto get = [&]() -> const DiagonalSsm& {
    if (!init) init = init_ssm(state_dim, channels, seed, scheme);
    return *init;
  };
  const std::size_t p = channels, n = state_dim;
  params.declare(prefix + ".log_neg_re", {p, n}, [&] { return get().log_neg_re; });
  params.declare(prefix + ".imag", {p, n}, [&] { return get().imag; });
  params.declare(prefix + ".b", {p, n, 2}, [&] { return get().b; });
  params.declare(prefix + ".c", {p, n, 2}, [&] { return get().c; });
  params.declare(prefix + ".d", {p}, [&] { return get().d; });
  params.declare(prefix + ".log_dt", {p}, [&] { return get().log_dt; });
}

SsmVars bind_ssm(Context& ctx, const std::string& prefix) {
  return {ctx.param(prefix + ".log_neg_re"), ctx.param(prefix + ".imag"),
          ctx.param(prefix + ".b"),          ctx.param(prefix + ".c"),
          ctx.param(prefix + ".d"),          ctx.param(prefix + ".log_dt")};
}

DiscreteSsm discretize(const SsmVars& s) {
  check_ssm_shapes(s);
  DiscreteSsm out;
  out.a_bar = zoh_transition(s.log_neg_re, s.imag, s.log_dt);
  out.b_bar = zoh_input(s.log_neg_re, s.imag, s.log_dt, s.b);
  out.c = s.c;
  out.d = s.d;
  return out;
}

Var materialize_kernel(const DiscreteSsm& s, std::size_t length) {
  if (length < 1) throw DimensionError("materialize_kernel: length must be >= 1");
  const Tensor av = s.a_bar.value();
  const Tensor bv = s.b_bar.value();
  const Tensor cv = s.c.value();
  const std::size_t p = av.dim(0), n = av.dim(1);
  if (bv.shape() != av.shape() || cv.shape() != av.shape()) {
    throw DimensionError("materialize_kernel: A_bar " + to_string(av.shape()) + ", B_bar " +
                         to_string(bv.shape()) + ", C " + to_string(cv.shape()));
  }
  std::vector<double> out(p * length, 0.0);
  std::vector<cplx> pw;
  for (std::size_t i = 0; i < p; ++i) {
    double* row = out.data() + i * length;
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t k = i * n + j;
      const cplx w = load(cv.data(), k) * load(bv.data(), k);
      powers(load(av.data(), k), length, pw);
      for (std::size_t t = 0; t < length; ++t) {
        row[t] += 2.0 * (w.real() * pw[t].real() - w.imag() * pw[t].imag());
      }
    }
  }
  return s.a_bar.tape->record(
      Tensor(Shape{p, length}, std::move(out)), {s.a_bar, s.b_bar, s.c},
      [av, bv, cv, p, n, length](const Tensor& g, Adjoints& adj) {
        const auto gs = g.data();
        std::span<double> ga, gb, gc;
        if (adj.wants(0)) ga = adj.grad(0);
        if (adj.wants(1)) gb = adj.grad(1);
        if (adj.wants(2)) gc = adj.grad(2);
        std::vector<cplx> pw;
        for (std::size_t i = 0; i < p; ++i) {
          const double* grow = gs.data() + i * length;
          for (std::size_t j = 0; j < n; ++j) {
            const std::size_t k = i * n + j;
            const cplx a = load(av.data(), k);
            const cplx bb = load(bv.data(), k);
            const cplx c = load(cv.data(), k);
            const cplx w = c * bb;
            powers(a, length, pw);
            // sum_t g_t conj(A^t) and sum_t g_t t conj(A^{t-1})
            cplx s0(0.0, 0.0), s1(0.0, 0.0);
            for (std::size_t t = 0; t < length; ++t) {
              s0 += grow[t] * std::conj(pw[t]);
              if (t > 0) s1 += grow[t] * static_cast<double>(t) * std::conj(pw[t - 1]);
            }
            const cplx gw = 2.0 * s0;
            if (!gc.empty()) accumulate(gc, k, std::conj(bb) * gw);
            if (!gb.empty()) accumulate(gb, k, std::conj(c) * gw);
            if (!ga.empty()) accumulate(ga, k, 2.0 * std::conj(w) * s1);
          }
        }
      });
}

namespace {

// Spectra of two real sequences packed as re/im of one transform.
void unpack_pair(const std::vector<cplx>& z, std::size_t k, cplx& first, cplx& second) {
  const std::size_t n = z.size();
  const cplx zk = z[k];
  const cplx zr = std::conj(z[(n - k) % n]);
  first = 0.5 * (zk + zr);
  second = cplx(0.0, -0.5) * (zk - zr);
}

}  // namespace

Var causal_conv(Var kernel, Var u) {
  const Tensor kv = kernel.value();
  const Tensor uv = u.value();
  if (uv.rank() != 3) throw DimensionError("causal_conv: u must be [B, L, P], got " + to_string(uv.shape()));
  const std::size_t nb = uv.dim(0), len = uv.dim(1), p = uv.dim(2);
  if (kv.rank() != 2 || kv.dim(0) != p || kv.dim(1) < len) {
    throw DimensionError("causal_conv: kernel " + to_string(kv.shape()) +
                         " incompatible with input " + to_string(uv.shape()));
  }
  const std::size_t klen = kv.dim(1);
  const std::size_t nfft = fft::next_power_of_two(2 * len);
  const std::size_t pairs = (nb + 1) / 2;

  // Kernel spectra, two channels per transform.
  std::vector<std::vector<cplx>> kf(p, std::vector<cplx>(nfft));
  {
    std::vector<cplx> z(nfft);
    for (std::size_t c = 0; c < p; c += 2) {
      std::fill(z.begin(), z.end(), cplx(0.0, 0.0));
      for (std::size_t t = 0; t < len; ++t) {
        z[t] = {kv[c * klen + t], c + 1 < p ? kv[(c + 1) * klen + t] : 0.0};
      }
      fft::transform(z, false);
      for (std::size_t k = 0; k < nfft; ++k) {
        cplx a, b;
        unpack_pair(z, k, a, b);
        kf[c][k] = a;
        if (c + 1 < p) kf[c + 1][k] = b;
      }
    }
  }

  // Input spectra, two batch rows per transform; kept for the backward pass.
  const auto us = uv.data();
  std::vector<std::vector<cplx>> uf(pairs * p, std::vector<cplx>(nfft));
  std::vector<double> out(uv.size(), 0.0);
  std::vector<cplx> z(nfft);
  for (std::size_t pr = 0; pr < pairs; ++pr) {
    const std::size_t b0 = 2 * pr, b1 = 2 * pr + 1;
    for (std::size_t c = 0; c < p; ++c) {
      auto& spec = uf[pr * p + c];
      std::fill(spec.begin(), spec.end(), cplx(0.0, 0.0));
      for (std::size_t t = 0; t < len; ++t) {
        spec[t] = {us[(b0 * len + t) * p + c], b1 < nb ? us[(b1 * len + t) * p + c] : 0.0};
      }
      fft::transform(spec, false);
      for (std::size_t k = 0; k < nfft; ++k) z[k] = spec[k] * kf[c][k];
      fft::transform(z, true);
      for (std::size_t t = 0; t < len; ++t) {
        out[(b0 * len + t) * p + c] = z[t].real();
        if (b1 < nb) out[(b1 * len + t) * p + c] = z[t].imag();
      }
    }
  }

  return kernel.tape->record(
      Tensor(uv.shape(), std::move(out)), {kernel, u},
      [kf = std::move(kf), uf = std::move(uf), nb, len, p, klen, nfft, pairs](const Tensor& g,
                                                                              Adjoints& adj) {
        const auto gs = g.data();
        const bool want_k = adj.wants(0);
        const bool want_u = adj.wants(1);
        std::span<double> gk, gu;
        if (want_k) gk = adj.grad(0);
        if (want_u) gu = adj.grad(1);
        std::vector<cplx> gz(nfft), tmp(nfft);
        std::vector<std::vector<cplx>> kacc;
        if (want_k) kacc.assign(p, std::vector<cplx>(nfft, cplx(0.0, 0.0)));
        for (std::size_t pr = 0; pr < pairs; ++pr) {
          const std::size_t b0 = 2 * pr, b1 = 2 * pr + 1;
          for (std::size_t c = 0; c < p; ++c) {
            std::fill(gz.begin(), gz.end(), cplx(0.0, 0.0));
            for (std::size_t t = 0; t < len; ++t) {
              gz[t] = {gs[(b0 * len + t) * p + c], b1 < nb ? gs[(b1 * len + t) * p + c] : 0.0};
            }
            fft::transform(gz, false);
            if (want_u) {
              // Correlation with the kernel: multiply by conj(K).
              for (std::size_t k = 0; k < nfft; ++k) tmp[k] = gz[k] * std::conj(kf[c][k]);
              fft::transform(tmp, true);
              for (std::size_t t = 0; t < len; ++t) {
                gu[(b0 * len + t) * p + c] += tmp[t].real();
                if (b1 < nb) gu[(b1 * len + t) * p + c] += tmp[t].imag();
              }
            }
            if (want_k) {
              const auto& spec = uf[pr * p + c];
              auto& acc = kacc[c];
              for (std::size_t k = 0; k < nfft; ++k) {
                cplx g0, g1, u0, u1;
                unpack_pair(gz, k, g0, g1);
                unpack_pair(spec, k, u0, u1);
                acc[k] += g0 * std::conj(u0) + g1 * std::conj(u1);
              }
            }
          }
        }
        if (want_k) {
          for (std::size_t c = 0; c < p; ++c) {
            fft::transform(kacc[c], true);
            for (std::size_t t = 0; t < len; ++t) gk[c * klen + t] += kacc[c][t].real();
          }
        }
      });
}

namespace {

Var scan_core(const DiscreteSsm& s, Var u) {
  const Tensor av = s.a_bar.value();
  const Tensor bv = s.b_bar.value();
  const Tensor cv = s.c.value();
  const Tensor uv = u.value();
  const std::size_t p = av.dim(0), n = av.dim(1);
  const std::size_t nb = uv.dim(0), len = uv.dim(1);
  const auto us = uv.data();
  // States for every (b, t, p, n), needed by the backward pass.
  std::vector<cplx> states(nb * len * p * n);
  std::vector<double> out(uv.size());
  for (std::size_t b = 0; b < nb; ++b) {
    for (std::size_t c = 0; c < p; ++c) {
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t k = c * n + j;
        const cplx a = load(av.data(), k);
        const cplx bb = load(bv.data(), k);
        cplx x(0.0, 0.0);
        for (std::size_t t = 0; t < len; ++t) {
          x = a * x + bb * us[(b * len + t) * p + c];
          states[((b * len + t) * p + c) * n + j] = x;
        }
      }
      for (std::size_t t = 0; t < len; ++t) {
        cplx acc(0.0, 0.0);
        for (std::size_t j = 0; j < n; ++j) {
          acc += load(cv.data(), c * n + j) * states[((b * len + t) * p + c) * n + j];
        }
        out[(b * len + t) * p + c] = 2.0 * acc.real();
      }
    }
  }
  return s.a_bar.tape->record(
      Tensor(uv.shape(), std::move(out)), {s.a_bar, s.b_bar, s.c, u},
      [av, bv, cv, uv, states = std::move(states), p, n, nb, len](const Tensor& g,
                                                                  Adjoints& adj) {
        const auto gs = g.data();
        const auto us = uv.data();
        std::span<double> ga, gb, gc, gu;
        if (adj.wants(0)) ga = adj.grad(0);
        if (adj.wants(1)) gb = adj.grad(1);
        if (adj.wants(2)) gc = adj.grad(2);
        if (adj.wants(3)) gu = adj.grad(3);
        for (std::size_t b = 0; b < nb; ++b) {
          for (std::size_t c = 0; c < p; ++c) {
            for (std::size_t j = 0; j < n; ++j) {
              const std::size_t k = c * n + j;
              const cplx a = load(av.data(), k);
              const cplx bb = load(bv.data(), k);
              const cplx cc = load(cv.data(), k);
              cplx lam(0.0, 0.0);  // adjoint of x_t
              cplx sa(0.0, 0.0), sb(0.0, 0.0), sc(0.0, 0.0);
              for (std::size_t t = len; t-- > 0;) {
                const double gy = gs[(b * len + t) * p + c];
                const cplx x = states[((b * len + t) * p + c) * n + j];
                lam = 2.0 * std::conj(cc) * gy + std::conj(a) * lam;
                sc += 2.0 * gy * std::conj(x);
                if (t > 0) sa += lam * std::conj(states[((b * len + t - 1) * p + c) * n + j]);
                sb += lam * us[(b * len + t) * p + c];
                if (!gu.empty()) gu[(b * len + t) * p + c] += (lam * std::conj(bb)).real();
              }
              if (!ga.empty()) accumulate(ga, k, sa);
              if (!gb.empty()) accumulate(gb, k, sb);
              if (!gc.empty()) accumulate(gc, k, sc);
            }
          }
        }
      });
}

void check_input(const DiscreteSsm& s, const Var& u, const char* op) {
  const std::size_t p = s.a_bar.value().dim(0);
  if (u.shape().size() != 3 || u.shape()[2] != p) {
    throw DimensionError(std::string(op) + ": input " + to_string(u.shape()) +
                         " does not have " + std::to_string(p) + " channels");
  }
}

}  // namespace

Var ssm_scan(const DiscreteSsm& s, Var u) {
  check_input(s, u, "ssm_scan");
  return add(scan_core(s, u), mul(u, s.d));
}

Var ssm_conv(const DiscreteSsm& s, Var u) {
  check_input(s, u, "ssm_conv");
  const Var k = materialize_kernel(s, u.shape()[1]);
  return add(causal_conv(k, u), mul(u, s.d));
}

double max_transition_modulus(const DiagonalSsm& s) {
  double m = 0.0;
  for (std::size_t i = 0; i < s.channels; ++i) {
    const double dt = std::exp(s.log_dt[i]);
    for (std::size_t j = 0; j < s.state_dim; ++j) {
      m = std::max(m, std::exp(-std::exp(s.log_neg_re[i * s.state_dim + j]) * dt));
    }
  }
  return m;
}

}  // namespace mhssm
