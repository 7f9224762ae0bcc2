#include "ccmod/dsp.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace ccmod {

std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

void fft_inplace(cvec& a, bool inverse) {
  const std::size_t n = a.size();
  if (n == 0 || (n & (n - 1)) != 0)
    throw std::invalid_argument("fft size must be a power of two");
  // bit reversal
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang =
        2.0 * std::numbers::pi / static_cast<double>(len) * (inverse ? 1.0 : -1.0);
    const cplx wlen(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      cplx w(1.0, 0.0);
      for (std::size_t j = 0; j < len / 2; ++j) {
        const cplx u = a[i + j];
        const cplx v = a[i + j + len / 2] * w;
        a[i + j] = u + v;
        a[i + j + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
  if (inverse) {
    const double inv = 1.0 / static_cast<double>(n);
    for (auto& v : a) v *= inv;
  }
}

cvec fft(std::span<const cplx> x, std::size_t nfft) {
  cvec a(nfft, cplx(0.0, 0.0));
  const std::size_t m = std::min(nfft, x.size());
  for (std::size_t i = 0; i < m; ++i) a[i] = x[i];
  fft_inplace(a);
  return a;
}

cplx dft_bin(std::span<const cplx> x, double freq) {
  const double ang = -2.0 * std::numbers::pi * freq;
  const cplx step(std::cos(ang), std::sin(ang));
  cplx acc(0.0, 0.0);
  cplx w(1.0, 0.0);
  const std::size_t n = x.size();
  for (std::size_t t = 0; t < n; ++t) {
    acc += x[t] * w;
    w *= step;
    // phasor recurrence drifts; refresh periodically
    if ((t & 1023u) == 1023u)
      w = cplx(std::cos(ang * static_cast<double>(t + 1)),
               std::sin(ang * static_cast<double>(t + 1)));
  }
  return acc / static_cast<double>(n);
}

std::vector<double> hamming_window(std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i)
    w[i] = 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) /
                                  static_cast<double>(n - 1));
  return w;
}

double mean_power(std::span<const cplx> x) {
  double p = 0.0;
  for (const auto& v : x) p += std::norm(v);
  return x.empty() ? 0.0 : p / static_cast<double>(x.size());
}

double parabolic_peak_offset(double left, double center, double right) {
  const double denom = left - 2.0 * center + right;
  if (denom == 0.0) return 0.0;
  double d = 0.5 * (left - right) / denom;
  if (d > 0.5) d = 0.5;
  if (d < -0.5) d = -0.5;
  return d;
}

}  // namespace ccmod
