#pragma once

#include <complex>
#include <cstddef>
#include <span>
#include <vector>

#include "mhssm/tensor.hpp"

namespace mhssm::fft {

bool is_power_of_two(std::size_t n);
std::size_t next_power_of_two(std::size_t n);

// In-place transform. The inverse includes the 1/N factor.
// Throws DimensionError unless data.size() is a power of two.
void transform(std::span<std::complex<double>> data, bool inverse);

// Real sequence [N] -> spectrum [N, 2] as (re, im) pairs.
Tensor fft_real(const Tensor& x);
// Spectrum [N, 2] -> real part of the inverse transform, [N].
Tensor ifft_real(const Tensor& spectrum);

// Full linear convolution (length a + b - 1) through a zero-padded FFT.
std::vector<double> convolve(std::span<const double> a, std::span<const double> b);

}  // namespace mhssm::fft
