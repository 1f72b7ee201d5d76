#include "mhssm/fft.hpp"

#include <fftw3.h>

#include <cstring>
#include <map>

namespace mhssm::fft {
namespace {

// One plan per (length, direction), run on its own aligned buffer.
struct Plan {
  fftw_complex* buf = nullptr;
  fftw_plan plan = nullptr;
  ~Plan() {
    if (plan) fftw_destroy_plan(plan);
    if (buf) fftw_free(buf);
  }
};

Plan& plan_for(std::size_t n, bool inverse) {
  thread_local std::map<std::pair<std::size_t, bool>, Plan> cache;
  auto [it, fresh] = cache.try_emplace({n, inverse});
  if (fresh) {
    it->second.buf = fftw_alloc_complex(n);
    it->second.plan = fftw_plan_dft_1d(static_cast<int>(n), it->second.buf, it->second.buf,
                                       inverse ? FFTW_BACKWARD : FFTW_FORWARD, FFTW_ESTIMATE);
  }
  return it->second;
}

}  // namespace

bool is_power_of_two(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

std::size_t next_power_of_two(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

void transform(std::span<std::complex<double>> data, bool inverse) {
  const std::size_t n = data.size();
  if (!is_power_of_two(n)) {
    throw DimensionError("fft: length " + std::to_string(n) +
                         " is not a power of two; zero-pad the input to " +
                         std::to_string(next_power_of_two(n)));
  }
  Plan& p = plan_for(n, inverse);
  static_assert(sizeof(fftw_complex) == sizeof(std::complex<double>));
  std::memcpy(p.buf, data.data(), n * sizeof(fftw_complex));
  fftw_execute(p.plan);
  std::memcpy(static_cast<void*>(data.data()), p.buf, n * sizeof(fftw_complex));
  if (inverse) {
    const double s = 1.0 / static_cast<double>(n);
    for (auto& v : data) v *= s;
  }
}

Tensor fft_real(const Tensor& x) {
  if (x.rank() != 1) throw DimensionError("fft_real: expected rank 1, got " + to_string(x.shape()));
  std::vector<std::complex<double>> buf(x.data().begin(), x.data().end());
  transform(buf, false);
  std::vector<double> out(2 * buf.size());
  for (std::size_t i = 0; i < buf.size(); ++i) {
    out[2 * i] = buf[i].real();
    out[2 * i + 1] = buf[i].imag();
  }
  return Tensor(Shape{buf.size(), 2}, std::move(out));
}

Tensor ifft_real(const Tensor& spectrum) {
  if (spectrum.rank() != 2 || spectrum.dim(1) != 2) {
    throw DimensionError("ifft_real: expected [N, 2], got " + to_string(spectrum.shape()));
  }
  const std::size_t n = spectrum.dim(0);
  std::vector<std::complex<double>> buf(n);
  for (std::size_t i = 0; i < n; ++i) buf[i] = {spectrum[2 * i], spectrum[2 * i + 1]};
  transform(buf, true);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = buf[i].real();
  return Tensor(Shape{n}, std::move(out));
}

std::vector<double> convolve(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) return {};
  const std::size_t out_len = a.size() + b.size() - 1;
  const std::size_t n = next_power_of_two(out_len);
  // Pack a into the real part and b into the imaginary part: one forward FFT.
  std::vector<std::complex<double>> z(n);
  for (std::size_t i = 0; i < a.size(); ++i) z[i].real(a[i]);
  for (std::size_t i = 0; i < b.size(); ++i) z[i].imag(b[i]);
  transform(z, false);
  std::vector<std::complex<double>> prod(n);
  for (std::size_t k = 0; k < n; ++k) {
    const auto zk = z[k];
    const auto zr = std::conj(z[(n - k) % n]);
    const auto fa = 0.5 * (zk + zr);
    const auto fb = std::complex<double>(0.0, -0.5) * (zk - zr);
    prod[k] = fa * fb;
  }
  transform(prod, true);
  std::vector<double> out(out_len);
  for (std::size_t i = 0; i < out_len; ++i) out[i] = prod[i].real();
  return out;
}

}  // namespace mhssm::fft
