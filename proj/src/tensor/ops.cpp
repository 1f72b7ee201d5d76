#include "mhssm/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace mhssm {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

GradTape& tape_of(const Var& a) {
  if (!a.tape) throw std::invalid_argument("operation on an unbound Var");
  return *a.tape;
}

GradTape& tape_of(const Var& a, const Var& b) {
  if (a.tape != b.tape) {
    throw std::invalid_argument("operands are recorded on different tapes");
  }
  return tape_of(a);
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

// Size of the broadcast operand; throws unless b's shape is a suffix of a's.
std::size_t broadcast_size(const Var& a, const Var& b, const char* op) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (!is_suffix(sb, sa)) {
    throw DimensionError(std::string(op) + ": shapes " + to_string(sa) +
                         " and " + to_string(sb) + " are not compatible");
  }
  return shape_size(sb);
}

template <class Fwd, class Deriv>
Var unary(Var x, Fwd f, Deriv df) {
  const Tensor& xv = x.value();
  const auto xs = xv.data();
  std::vector<double> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = f(xs[i]);
  Tensor y(xv.shape(), std::move(out));
  return tape_of(x).record(y, {x}, [xv, y, df](const Tensor& g, Adjoints& adj) {
    auto gx = adj.grad(0);
    const auto gs = g.data();
    const auto xs = xv.data();
    const auto ys = y.data();
    for (std::size_t i = 0; i < gs.size(); ++i) gx[i] += gs[i] * df(xs[i], ys[i]);
  });
}

double phi_cdf(double x) { return 0.5 * std::erfc(-x * std::numbers::sqrt2 / 2.0); }

}  // namespace

Var add(Var a, Var b) {
  auto& tape = tape_of(a, b);
  const std::size_t m = broadcast_size(a, b, "add");
  const auto as = a.value().data();
  const auto bs = b.value().data();
  std::vector<double> out(as.size());
  for (std::size_t i = 0; i < as.size(); ++i) out[i] = as[i] + bs[i % m];
  return tape.record(Tensor(a.shape(), std::move(out)), {a, b},
                     [m](const Tensor& g, Adjoints& adj) {
                       const auto gs = g.data();
                       if (adj.wants(0)) {
                         auto ga = adj.grad(0);
                         for (std::size_t i = 0; i < gs.size(); ++i) ga[i] += gs[i];
                       }
                       if (adj.wants(1)) {
                         auto gb = adj.grad(1);
                         for (std::size_t i = 0; i < gs.size(); ++i) gb[i % m] += gs[i];
                       }
                     });
}

Var sub(Var a, Var b) {
  auto& tape = tape_of(a, b);
  const std::size_t m = broadcast_size(a, b, "sub");
  const auto as = a.value().data();
  const auto bs = b.value().data();
  std::vector<double> out(as.size());
  for (std::size_t i = 0; i < as.size(); ++i) out[i] = as[i] - bs[i % m];
  return tape.record(Tensor(a.shape(), std::move(out)), {a, b},
                     [m](const Tensor& g, Adjoints& adj) {
                       const auto gs = g.data();
                       if (adj.wants(0)) {
                         auto ga = adj.grad(0);
                         for (std::size_t i = 0; i < gs.size(); ++i) ga[i] += gs[i];
                       }
                       if (adj.wants(1)) {
                         auto gb = adj.grad(1);
                         for (std::size_t i = 0; i < gs.size(); ++i) gb[i % m] -= gs[i];
                       }
                     });
}

Var mul(Var a, Var b) {
  auto& tape = tape_of(a, b);
  const std::size_t m = broadcast_size(a, b, "mul");
  const Tensor av = a.value();
  const Tensor bv = b.value();
  const auto as = av.data();
  const auto bs = bv.data();
  std::vector<double> out(as.size());
  for (std::size_t i = 0; i < as.size(); ++i) out[i] = as[i] * bs[i % m];
  return tape.record(Tensor(a.shape(), std::move(out)), {a, b},
                     [m, av, bv](const Tensor& g, Adjoints& adj) {
                       const auto gs = g.data();
                       const auto as = av.data();
                       const auto bs = bv.data();
                       if (adj.wants(0)) {
                         auto ga = adj.grad(0);
                         for (std::size_t i = 0; i < gs.size(); ++i) ga[i] += gs[i] * bs[i % m];
                       }
                       if (adj.wants(1)) {
                         auto gb = adj.grad(1);
                         for (std::size_t i = 0; i < gs.size(); ++i) gb[i % m] += gs[i] * as[i];
                       }
                     });
}

Var scale(Var a, double s) {
  const auto as = a.value().data();
  std::vector<double> out(as.size());
  for (std::size_t i = 0; i < as.size(); ++i) out[i] = as[i] * s;
  return tape_of(a).record(Tensor(a.shape(), std::move(out)), {a},
                           [s](const Tensor& g, Adjoints& adj) {
                             auto ga = adj.grad(0);
                             const auto gs = g.data();
                             for (std::size_t i = 0; i < gs.size(); ++i) ga[i] += gs[i] * s;
                           });
}

Var sigmoid(Var x) {
  return unary(
      x,
      [](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var gelu(Var x) {
  return unary(
      x, [](double v) { return v * phi_cdf(v); },
      [](double v, double) {
        const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * std::numbers::pi);
        return phi_cdf(v) + v * pdf;
      });
}

Var relu(Var x) {
  return unary(
      x, [](double v) { return v > 0 ? v : 0.0; },
      [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Var matmul(Var a, Var b) {
  auto& tape = tape_of(a, b);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2) {
    throw DimensionError("matmul: operands need rank >= 2, got " + to_string(sa) +
                         " and " + to_string(sb));
  }
  const std::size_t m = sa[sa.size() - 2];
  const std::size_t k = sa.back();
  const std::size_t n = sb.back();
  if (sb[sb.size() - 2] != k) {
    throw DimensionError("matmul: inner dimensions differ for " + to_string(sa) +
                         " @ " + to_string(sb));
  }
  const Shape batch_a(sa.begin(), sa.end() - 2);
  const Shape batch_b(sb.begin(), sb.end() - 2);
  const bool b_shared = batch_b.empty();
  const bool a_shared = batch_a.empty() && !batch_b.empty();
  if (!b_shared && !a_shared && batch_a != batch_b) {
    throw DimensionError("matmul: batch dimensions of " + to_string(sa) + " and " +
                         to_string(sb) + " are not broadcastable");
  }
  const Shape& batch = a_shared ? batch_b : batch_a;
  const std::size_t nb = shape_size(batch);
  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);

  const Tensor av = a.value();
  const Tensor bv = b.value();
  std::vector<double> out(nb * m * n);
  if (b_shared) {
    // Fold the batch into rows: one GEMM.
    ConstMatMap A(av.data().data(), static_cast<Eigen::Index>(nb * m), static_cast<Eigen::Index>(k));
    ConstMatMap B(bv.data().data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
    MatMap C(out.data(), static_cast<Eigen::Index>(nb * m), static_cast<Eigen::Index>(n));
    C.noalias() = A * B;
  } else {
    for (std::size_t i = 0; i < nb; ++i) {
      ConstMatMap A(av.data().data() + (a_shared ? 0 : i * m * k), m, k);
      ConstMatMap B(bv.data().data() + i * k * n, k, n);
      MatMap C(out.data() + i * m * n, m, n);
      C.noalias() = A * B;
    }
  }
  return tape.record(
      Tensor(std::move(out_shape), std::move(out)), {a, b},
      [av, bv, nb, m, k, n, a_shared, b_shared](const Tensor& g, Adjoints& adj) {
        const double* gd = g.data().data();
        if (b_shared) {
          ConstMatMap G(gd, nb * m, n);
          if (adj.wants(0)) {
            MatMap GA(adj.grad(0).data(), nb * m, k);
            GA.noalias() += G * ConstMatMap(bv.data().data(), k, n).transpose();
          }
          if (adj.wants(1)) {
            MatMap GB(adj.grad(1).data(), k, n);
            GB.noalias() += ConstMatMap(av.data().data(), nb * m, k).transpose() * G;
          }
          return;
        }
        for (std::size_t i = 0; i < nb; ++i) {
          ConstMatMap G(gd + i * m * n, m, n);
          const std::size_t aoff = a_shared ? 0 : i * m * k;
          if (adj.wants(0)) {
            MatMap GA(adj.grad(0).data() + aoff, m, k);
            GA.noalias() += G * ConstMatMap(bv.data().data() + i * k * n, k, n).transpose();
          }
          if (adj.wants(1)) {
            MatMap GB(adj.grad(1).data() + i * k * n, k, n);
            GB.noalias() += ConstMatMap(av.data().data() + aoff, m, k).transpose() * G;
          }
        }
      });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  auto& tape = tape_of(x, gain);
  tape_of(x, bias);
  const std::size_t d = x.value().dim(-1);
  if (d == 0) throw DimensionError("layer_norm: last dimension must be >= 1");
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
    throw DimensionError("layer_norm: gain/bias must have shape [" + std::to_string(d) +
                         "], got " + to_string(gain.shape()) + " and " +
                         to_string(bias.shape()));
  }
  const auto xs = x.value().data();
  const auto gs = gain.value().data();
  const auto bs = bias.value().data();
  const std::size_t rows = xs.size() / d;
  std::vector<double> xhat(xs.size());
  std::vector<double> inv_std(rows);
  std::vector<double> out(xs.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xs.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mu) * inv;
      xhat[r * d + j] = h;
      out[r * d + j] = h * gs[j] + bs[j];
    }
  }
  const Tensor gv = gain.value();
  return tape.record(
      Tensor(x.shape(), std::move(out)), {x, gain, bias},
      [xhat = std::move(xhat), inv_std = std::move(inv_std), gv, d, rows](
          const Tensor& g, Adjoints& adj) {
        const auto gs = g.data();
        const auto gain = gv.data();
        if (adj.wants(0)) {
          auto gx = adj.grad(0);
          std::vector<double> dh(d);
          for (std::size_t r = 0; r < rows; ++r) {
            double mean_dh = 0.0;
            double mean_dh_h = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              dh[j] = gs[r * d + j] * gain[j];
              mean_dh += dh[j];
              mean_dh_h += dh[j] * xhat[r * d + j];
            }
            mean_dh /= static_cast<double>(d);
            mean_dh_h /= static_cast<double>(d);
            for (std::size_t j = 0; j < d; ++j) {
              gx[r * d + j] += inv_std[r] * (dh[j] - mean_dh - xhat[r * d + j] * mean_dh_h);
            }
          }
        }
        if (adj.wants(1)) {
          auto gg = adj.grad(1);
          for (std::size_t i = 0; i < gs.size(); ++i) gg[i % d] += gs[i] * xhat[i];
        }
        if (adj.wants(2)) {
          auto gb = adj.grad(2);
          for (std::size_t i = 0; i < gs.size(); ++i) gb[i % d] += gs[i];
        }
      });
}

namespace {

// Per-element mask lookup with numpy broadcasting of `mask` against `shape`.
std::vector<unsigned char> expand_mask(const Tensor& mask, const Shape& shape) {
  const Shape& ms = mask.shape();
  if (ms.size() > shape.size()) {
    throw DimensionError("softmax: mask " + to_string(ms) + " has higher rank than input " +
                         to_string(shape));
  }
  const std::size_t offset = shape.size() - ms.size();
  std::vector<std::size_t> mstride(shape.size(), 0);
  std::size_t s = 1;
  for (std::size_t i = ms.size(); i-- > 0;) {
    const std::size_t ax = i + offset;
    if (ms[i] != 1 && ms[i] != shape[ax]) {
      throw DimensionError("softmax: mask " + to_string(ms) + " does not broadcast to " +
                           to_string(shape));
    }
    mstride[ax] = ms[i] == 1 ? 0 : s;
    s *= ms[i];
  }
  const std::size_t n = shape_size(shape);
  std::vector<unsigned char> out(n);
  std::vector<std::size_t> idx(shape.size(), 0);
  const auto md = mask.data();
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t mi = 0;
    for (std::size_t ax = 0; ax < shape.size(); ++ax) mi += idx[ax] * mstride[ax];
    out[flat] = md[mi] != 0.0;
    for (std::size_t ax = shape.size(); ax-- > 0;) {
      if (++idx[ax] < shape[ax]) break;
      idx[ax] = 0;
    }
  }
  return out;
}

}  // namespace

Tensor softmax_value(const Tensor& x, const std::optional<Tensor>& mask) {
  const std::size_t n = x.dim(-1);
  const auto xs = x.data();
  const std::size_t rows = n ? xs.size() / n : 0;
  std::vector<unsigned char> keep;
  if (mask) keep = expand_mask(*mask, x.shape());
  std::vector<double> out(xs.size(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xs.data() + r * n;
    double mx = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < n; ++j) {
      if (!keep.empty() && !keep[r * n + j]) continue;
      any = true;
      mx = std::max(mx, row[j]);
    }
    if (!any) {
      throw std::invalid_argument("softmax: row " + std::to_string(r) +
                                  " is fully masked");
    }
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (!keep.empty() && !keep[r * n + j]) continue;
      const double e = std::exp(row[j] - mx);
      out[r * n + j] = e;
      total += e;
    }
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] /= total;
  }
  return Tensor(x.shape(), std::move(out));
}

Var softmax(Var x, const std::optional<Tensor>& mask) {
  Tensor y = softmax_value(x.value(), mask);
  const std::size_t n = y.dim(-1);
  return tape_of(x).record(y, {x}, [y, n](const Tensor& g, Adjoints& adj) {
    auto gx = adj.grad(0);
    const auto gs = g.data();
    const auto ys = y.data();
    const std::size_t rows = ys.size() / n;
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += ys[r * n + j] * gs[r * n + j];
      for (std::size_t j = 0; j < n; ++j) {
        gx[r * n + j] += ys[r * n + j] * (gs[r * n + j] - dot);
      }
    }
  });
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return tape_of(x).record(Tensor::scalar(s), {x}, [](const Tensor& g, Adjoints& adj) {
    const double gv = g[0];
    for (auto& v : adj.grad(0)) v += gv;
  });
}

Var mean(Var x) {
  const double n = static_cast<double>(x.value().size());
  return scale(sum(x), 1.0 / n);
}

Var reshape(Var x, Shape shape) {
  Tensor y = x.value().reshaped(std::move(shape));
  return tape_of(x).record(y, {x}, [](const Tensor& g, Adjoints& adj) {
    auto gx = adj.grad(0);
    const auto gs = g.data();
    for (std::size_t i = 0; i < gs.size(); ++i) gx[i] += gs[i];
  });
}

Var slice_last(Var x, std::size_t begin, std::size_t width) {
  const std::size_t d = x.value().dim(-1);
  if (begin + width > d) {
    throw DimensionError("slice_last: [" + std::to_string(begin) + ", " +
                         std::to_string(begin + width) + ") out of range for " +
                         to_string(x.shape()));
  }
  const auto xs = x.value().data();
  const std::size_t rows = xs.size() / d;
  std::vector<double> out(rows * width);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(xs.data() + r * d + begin, width, out.data() + r * width);
  }
  Shape shape = x.shape();
  shape.back() = width;
  return tape_of(x).record(Tensor(std::move(shape), std::move(out)), {x},
                           [d, begin, width, rows](const Tensor& g, Adjoints& adj) {
                             auto gx = adj.grad(0);
                             const auto gs = g.data();
                             for (std::size_t r = 0; r < rows; ++r) {
                               for (std::size_t j = 0; j < width; ++j) {
                                 gx[r * d + begin + j] += gs[r * width + j];
                               }
                             }
                           });
}

Var concat_last(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_last: no operands");
  auto& tape = tape_of(parts.front());
  Shape lead = parts.front().shape();
  lead.pop_back();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    tape_of(parts.front(), p);
    Shape s = p.shape();
    const std::size_t w = s.back();
    s.pop_back();
    if (s != lead) {
      throw DimensionError("concat_last: leading dims " + to_string(s) + " vs " +
                           to_string(lead));
    }
    widths.push_back(w);
    total += w;
  }
  const std::size_t rows = shape_size(lead);
  std::vector<double> out(rows * total);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto ps = parts[k].value().data();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(ps.data() + r * widths[k], widths[k], out.data() + r * total + off);
    }
    off += widths[k];
  }
  Shape shape = lead;
  shape.push_back(total);
  return tape.record(Tensor(std::move(shape), std::move(out)), parts,
                     [widths, total, rows](const Tensor& g, Adjoints& adj) {
                       const auto gs = g.data();
                       std::size_t off = 0;
                       for (std::size_t k = 0; k < widths.size(); ++k) {
                         if (adj.wants(k)) {
                           auto gp = adj.grad(k);
                           for (std::size_t r = 0; r < rows; ++r) {
                             for (std::size_t j = 0; j < widths[k]; ++j) {
                               gp[r * widths[k] + j] += gs[r * total + off + j];
                             }
                           }
                         }
                         off += widths[k];
                       }
                     });
}

namespace {

void transpose_blocks(std::span<const double> in, std::span<double> out, std::size_t nb,
                      std::size_t m, std::size_t n, bool accumulate) {
  for (std::size_t b = 0; b < nb; ++b) {
    const double* src = in.data() + b * m * n;
    double* dst = out.data() + b * m * n;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        if (accumulate) {
          dst[j * m + i] += src[i * n + j];
        } else {
          dst[j * m + i] = src[i * n + j];
        }
      }
    }
  }
}

void permute_0213_into(std::span<const double> in, std::span<double> out, std::size_t a,
                       std::size_t b, std::size_t c, std::size_t d, bool accumulate) {
  for (std::size_t i = 0; i < a; ++i) {
    for (std::size_t j = 0; j < b; ++j) {
      for (std::size_t k = 0; k < c; ++k) {
        const double* src = in.data() + ((i * b + j) * c + k) * d;
        double* dst = out.data() + ((i * c + k) * b + j) * d;
        for (std::size_t l = 0; l < d; ++l) {
          if (accumulate) {
            dst[l] += src[l];
          } else {
            dst[l] = src[l];
          }
        }
      }
    }
  }
}

}  // namespace

Var transpose_last2(Var x) {
  const Shape& s = x.shape();
  if (s.size() < 2) throw DimensionError("transpose_last2: rank < 2");
  const std::size_t m = s[s.size() - 2];
  const std::size_t n = s.back();
  const std::size_t nb = shape_size(s) / std::max<std::size_t>(m * n, 1);
  std::vector<double> out(x.value().size());
  transpose_blocks(x.value().data(), out, nb, m, n, false);
  Shape shape = s;
  std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
  return tape_of(x).record(Tensor(std::move(shape), std::move(out)), {x},
                           [nb, m, n](const Tensor& g, Adjoints& adj) {
                             transpose_blocks(g.data(), adj.grad(0), nb, n, m, true);
                           });
}

Var permute_0213(Var x) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw DimensionError("permute_0213: expected rank 4, got " + to_string(s));
  const auto [a, b, c, d] = std::array{s[0], s[1], s[2], s[3]};
  std::vector<double> out(x.value().size());
  permute_0213_into(x.value().data(), out, a, b, c, d, false);
  return tape_of(x).record(Tensor(Shape{a, c, b, d}, std::move(out)), {x},
                           [a, b, c, d](const Tensor& g, Adjoints& adj) {
                             permute_0213_into(g.data(), adj.grad(0), a, c, b, d, true);
                           });
}

namespace {

struct SeqDims {
  std::size_t batch, time, dim;
};

SeqDims seq_dims(const Var& x, std::span<const std::size_t> lengths, const char* op) {
  const Shape& s = x.shape();
  if (s.size() != 3) {
    throw DimensionError(std::string(op) + ": expected [batch, time, dim], got " + to_string(s));
  }
  if (lengths.size() != s[0]) {
    throw DimensionError(std::string(op) + ": " + std::to_string(lengths.size()) +
                         " lengths for batch of " + std::to_string(s[0]));
  }
  for (auto len : lengths) {
    if (len > s[1]) {
      throw DimensionError(std::string(op) + ": length " + std::to_string(len) +
                           " exceeds time axis " + std::to_string(s[1]));
    }
  }
  return {s[0], s[1], s[2]};
}

}  // namespace

Var reverse_time(Var x, std::span<const std::size_t> lengths) {
  const auto [nb, nt, nd] = seq_dims(x, lengths, "reverse_time");
  std::vector<std::size_t> src(nb * nt);
  for (std::size_t b = 0; b < nb; ++b) {
    for (std::size_t t = 0; t < nt; ++t) {
      src[b * nt + t] = t < lengths[b] ? lengths[b] - 1 - t : t;
    }
  }
  const auto xs = x.value().data();
  std::vector<double> out(xs.size());
  for (std::size_t b = 0; b < nb; ++b) {
    for (std::size_t t = 0; t < nt; ++t) {
      std::copy_n(xs.data() + (b * nt + src[b * nt + t]) * nd, nd,
                  out.data() + (b * nt + t) * nd);
    }
  }
  return tape_of(x).record(Tensor(x.shape(), std::move(out)), {x},
                           [src = std::move(src), nb, nt, nd](const Tensor& g, Adjoints& adj) {
                             auto gx = adj.grad(0);
                             const auto gs = g.data();
                             for (std::size_t b = 0; b < nb; ++b) {
                               for (std::size_t t = 0; t < nt; ++t) {
                                 const double* gp = gs.data() + (b * nt + t) * nd;
                                 double* dst = gx.data() + (b * nt + src[b * nt + t]) * nd;
                                 for (std::size_t j = 0; j < nd; ++j) dst[j] += gp[j];
                               }
                             }
                           });
}

Var pad_time(Var x, std::size_t new_length) {
  const Shape& s = x.shape();
  if (s.size() != 3 || new_length < s[1]) {
    throw DimensionError("pad_time: cannot pad " + to_string(s) + " to time length " +
                         std::to_string(new_length));
  }
  const std::size_t nb = s[0], nt = s[1], nd = s[2];
  if (new_length == nt) return x;
  const auto xs = x.value().data();
  std::vector<double> out(nb * new_length * nd, 0.0);
  for (std::size_t b = 0; b < nb; ++b) {
    std::copy_n(xs.data() + b * nt * nd, nt * nd, out.data() + b * new_length * nd);
  }
  return tape_of(x).record(Tensor(Shape{nb, new_length, nd}, std::move(out)), {x},
                           [nb, nt, nd, new_length](const Tensor& g, Adjoints& adj) {
                             auto gx = adj.grad(0);
                             const auto gs = g.data();
                             for (std::size_t b = 0; b < nb; ++b) {
                               for (std::size_t i = 0; i < nt * nd; ++i) {
                                 gx[b * nt * nd + i] += gs[b * new_length * nd + i];
                               }
                             }
                           });
}

Var mask_time(Var x, std::span<const std::size_t> lengths) {
  const auto [nb, nt, nd] = seq_dims(x, lengths, "mask_time");
  bool full = true;
  for (auto len : lengths) full = full && len == nt;
  if (full) return x;
  std::vector<std::size_t> lens(lengths.begin(), lengths.end());
  const auto xs = x.value().data();
  std::vector<double> out(xs.begin(), xs.end());
  for (std::size_t b = 0; b < nb; ++b) {
    std::fill(out.begin() + static_cast<std::ptrdiff_t>((b * nt + lens[b]) * nd),
              out.begin() + static_cast<std::ptrdiff_t>((b + 1) * nt * nd), 0.0);
  }
  return tape_of(x).record(Tensor(x.shape(), std::move(out)), {x},
                           [lens = std::move(lens), nt, nd](const Tensor& g, Adjoints& adj) {
                             auto gx = adj.grad(0);
                             const auto gs = g.data();
                             for (std::size_t b = 0; b < lens.size(); ++b) {
                               for (std::size_t i = 0; i < lens[b] * nd; ++i) {
                                 gx[b * nt * nd + i] += gs[b * nt * nd + i];
                               }
                             }
                           });
}

Var dropout(Var x, double rate, std::mt19937_64& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw std::invalid_argument("dropout: rate must be < 1");
  const double keep_scale = 1.0 / (1.0 - rate);
  std::bernoulli_distribution keep(1.0 - rate);
  const auto xs = x.value().data();
  std::vector<double> m(xs.size());
  std::vector<double> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    m[i] = keep(rng) ? keep_scale : 0.0;
    out[i] = xs[i] * m[i];
  }
  return tape_of(x).record(Tensor(x.shape(), std::move(out)), {x},
                           [m = std::move(m)](const Tensor& g, Adjoints& adj) {
                             auto gx = adj.grad(0);
                             const auto gs = g.data();
                             for (std::size_t i = 0; i < gs.size(); ++i) gx[i] += gs[i] * m[i];
                           });
}

Var cross_entropy(Var logits, std::span<const int> targets, int ignore_index) {
  const std::size_t v = logits.value().dim(-1);
  const auto ls = logits.value().data();
  const std::size_t rows = ls.size() / v;
  if (targets.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) +
                         " targets for " + std::to_string(rows) + " rows");
  }
  std::vector<double> probs(ls.size(), 0.0);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const int t = targets[r];
    if (t == ignore_index) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= v) {
      throw std::invalid_argument("cross_entropy: target " + std::to_string(t) +
                                  " out of range for " + std::to_string(v) + " classes");
    }
    const double* row = ls.data() + r * v;
    const double mx = *std::max_element(row, row + v);
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      probs[r * v + j] = std::exp(row[j] - mx);
      z += probs[r * v + j];
    }
    for (std::size_t j = 0; j < v; ++j) probs[r * v + j] /= z;
    total += std::log(z) + mx - row[t];
    ++count;
  }
  const double norm = count ? 1.0 / static_cast<double>(count) : 0.0;
  std::vector<int> tg(targets.begin(), targets.end());
  return tape_of(logits).record(
      Tensor::scalar(total * norm), {logits},
      [probs = std::move(probs), tg = std::move(tg), v, norm, ignore_index](const Tensor& g,
                                                                            Adjoints& adj) {
        auto gx = adj.grad(0);
        const double s = g[0] * norm;
        for (std::size_t r = 0; r < tg.size(); ++r) {
          if (tg[r] == ignore_index) continue;
          for (std::size_t j = 0; j < v; ++j) gx[r * v + j] += s * probs[r * v + j];
          gx[r * v + static_cast<std::size_t>(tg[r])] -= s;
        }
      });
}

std::vector<int> argmax_last(const Tensor& x) {
  const std::size_t v = x.dim(-1);
  const auto xs = x.data();
  std::vector<int> out(xs.size() / v);
  for (std::size_t r = 0; r < out.size(); ++r) {
    const double* row = xs.data() + r * v;
    out[r] = static_cast<int>(std::max_element(row, row + v) - row);
  }
  return out;
}

}  // namespace mhssm
