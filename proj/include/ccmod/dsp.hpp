#pragma once

#include <complex>
#include <cstddef>
#include <span>
#include <vector>

namespace ccmod {

using cplx = std::complex<double>;
using cvec = std::vector<cplx>;

std::size_t next_pow2(std::size_t n);

// In-place radix-2 FFT; size must be a power of two. Inverse includes 1/N.
void fft_inplace(cvec& a, bool inverse = false);

cvec fft(std::span<const cplx> x, std::size_t nfft);

// (1/N) * sum_t x[t] * exp(-i*2*pi*freq*t). freq in cycles/sample.
cplx dft_bin(std::span<const cplx> x, double freq);

std::vector<double> hamming_window(std::size_t n);

double mean_power(std::span<const cplx> x);

// Peak refinement: parabolic interpolation of log-magnitudes around bin i.
// Returns fractional offset in [-0.5, 0.5].
double parabolic_peak_offset(double left, double center, double right);

}  // namespace ccmod
