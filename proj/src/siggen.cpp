#include "ccmod/siggen.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace ccmod::siggen {

namespace {

constexpr double kPi = std::numbers::pi;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d4a4f4d4a4c2b5ULL;
  return x ^ (x >> 31);
}

std::vector<cplx> square_qam(int side) {
  std::vector<cplx> pts;
  pts.reserve(static_cast<std::size_t>(side) * side);
  double e = 0.0;
  for (int i = 0; i < side; ++i) {
    for (int q = 0; q < side; ++q) {
      const double a = 2.0 * i - (side - 1);
      const double b = 2.0 * q - (side - 1);
      pts.emplace_back(a, b);
      e += a * a + b * b;
    }
  }
  const double scale = std::sqrt(static_cast<double>(pts.size()) / e);
  for (auto& p : pts) p *= scale;
  return pts;
}

}  // namespace

const char* scheme_name(ModulationScheme s) {
  switch (s) {
    case ModulationScheme::BPSK: return "bpsk";
    case ModulationScheme::QPSK: return "qpsk";
    case ModulationScheme::PSK8: return "8psk";
    case ModulationScheme::DQPSK_PI4: return "pi4dqpsk";
    case ModulationScheme::MSK: return "msk";
    case ModulationScheme::QAM16: return "16qam";
    case ModulationScheme::QAM64: return "64qam";
    case ModulationScheme::QAM256: return "256qam";
  }
  return "?";
}

std::optional<ModulationScheme> scheme_from_name(std::string_view name) {
  for (int i = 0; i < kNumSchemes; ++i) {
    const auto s = static_cast<ModulationScheme>(i);
    if (name == scheme_name(s)) return s;
  }
  return std::nullopt;
}

std::vector<cplx> alphabet(ModulationScheme s) {
  switch (s) {
    case ModulationScheme::BPSK:
      return {cplx(1, 0), cplx(-1, 0)};
    case ModulationScheme::QPSK: {
      const double r = 1.0 / std::sqrt(2.0);
      return {cplx(r, r), cplx(-r, r), cplx(-r, -r), cplx(r, -r)};
    }
    case ModulationScheme::PSK8:
    case ModulationScheme::DQPSK_PI4: {
      std::vector<cplx> pts;
      for (int k = 0; k < 8; ++k)
        pts.push_back(std::polar(1.0, kPi / 4.0 * k));
      return pts;
    }
    case ModulationScheme::MSK:
      return {cplx(1, 0), cplx(-1, 0)};
    case ModulationScheme::QAM16: return square_qam(4);
    case ModulationScheme::QAM64: return square_qam(8);
    case ModulationScheme::QAM256: return square_qam(16);
  }
  throw std::invalid_argument("unknown scheme");
}

void DatasetConfig::validate() const {
  if (T0_min >= T0_max || beta_min > beta_max || f0_min >= f0_max ||
      snr_min_db >= snr_max_db)
    throw std::invalid_argument("dataset config: empty or inverted range");
  if (beta_min < 0.0 || beta_max > 1.0)
    throw std::invalid_argument("dataset config: beta outside [0,1]");
  if (snr_mean_db <= snr_min_db || snr_mean_db >= snr_max_db)
    throw std::invalid_argument("dataset config: SNR center of mass outside range");
  if (T0_max < 1.0 + beta_min)
    throw std::invalid_argument("dataset config: T0 range cannot satisfy T0 >= 1+beta");
  if (signals_per_class == 0 || length == 0)
    throw std::invalid_argument("dataset config: zero count/length");
}

DatasetConfig cfg2018() {
  DatasetConfig c;
  c.name = "cfg2018";
  c.T0_min = 1.0; c.T0_max = 23.0;
  c.f0_min = -0.001; c.f0_max = 0.001;
  c.beta_min = 0.1; c.beta_max = 1.0;
  c.snr_min_db = 0.0; c.snr_max_db = 12.0;
  c.snr_mean_db = 9.0;
  return c;
}

DatasetConfig cfg2022() {
  DatasetConfig c;
  c.name = "cfg2022";
  c.T0_min = 1.0; c.T0_max = 29.0;
  // CFO support chosen disjoint from cfg2018's U(-0.001, 0.001).
  c.f0_min = 0.002; c.f0_max = 0.004;
  c.beta_min = 0.1; c.beta_max = 1.0;
  c.snr_min_db = 1.0; c.snr_max_db = 18.0;
  c.snr_mean_db = 12.0;
  return c;
}

std::optional<DatasetConfig> builtin_config(std::string_view name) {
  if (name == "cfg2018") return cfg2018();
  if (name == "cfg2022") return cfg2022();
  return std::nullopt;
}

SignalMeta draw_params(const DatasetConfig& config, ModulationScheme scheme,
                       std::mt19937_64& rng) {
  config.validate();
  std::uniform_real_distribution<double> uni(0.0, 1.0);

  SignalMeta m;
  m.scheme = scheme;
  m.beta = config.beta_min + (config.beta_max - config.beta_min) * uni(rng);

  // T0 uniform over range, resampled until T0 >= 1+beta (no aliasing).
  int guard = 0;
  do {
    m.T0 = config.T0_min + (config.T0_max - config.T0_min) * uni(rng);
    if (++guard > 10000)
      throw std::invalid_argument("draw_params: cannot satisfy T0 >= 1+beta");
  } while (m.T0 < 1.0 + m.beta);

  m.f0 = config.f0_min + (config.f0_max - config.f0_min) * uni(rng);

  // Scaled Beta(a,1) whose mean matches the config's SNR center of mass.
  const double span = config.snr_max_db - config.snr_min_db;
  const double mean01 = (config.snr_mean_db - config.snr_min_db) / span;
  const double a = mean01 / (1.0 - mean01);
  m.snr_inband_db = config.snr_min_db + span * std::pow(uni(rng), 1.0 / a);

  m.phase = 2.0 * kPi * uni(rng);
  m.power = 1.0;
  m.length = config.length;
  m.clock_offset = config.random_clock_offset ? m.T0 * uni(rng) : 0.0;
  return m;
}

cvec gen_symbols(ModulationScheme scheme, std::size_t count, std::mt19937_64& rng) {
  if (count < 1) throw std::invalid_argument("gen_symbols: count must be >= 1");
  cvec out;
  out.reserve(count);
  if (scheme == ModulationScheme::DQPSK_PI4) {
    // Differential: phase increment pi/4 + m*pi/2, m uniform in {0..3}.
    std::uniform_int_distribution<int> pick(0, 3);
    double ph = 0.0;
    for (std::size_t i = 0; i < count; ++i) {
      ph += kPi / 4.0 + pick(rng) * kPi / 2.0;
      out.push_back(std::polar(1.0, ph));
    }
    return out;
  }
  if (scheme == ModulationScheme::MSK) {
    // Two offset binary rails packed as I + jQ per rail-symbol interval.
    std::uniform_int_distribution<int> bit(0, 1);
    for (std::size_t i = 0; i < count; ++i) {
      const double ii = bit(rng) ? 1.0 : -1.0;
      const double qq = bit(rng) ? 1.0 : -1.0;
      out.emplace_back(ii, qq);
    }
    return out;
  }
  const auto pts = alphabet(scheme);
  std::uniform_int_distribution<std::size_t> pick(0, pts.size() - 1);
  for (std::size_t i = 0; i < count; ++i) out.push_back(pts[pick(rng)]);
  return out;
}

double srrc_pulse(double beta, double T0, double t) {
  if (beta <= 0.0 || beta > 1.0)
    throw std::invalid_argument("srrc_pulse: beta must be in (0,1]");
  const double x = t / T0;
  if (std::abs(x) < 1e-10)
    return 1.0 - beta + 4.0 * beta / kPi;
  const double fourbx = 4.0 * beta * x;
  const double denom = kPi * x * (1.0 - fourbx * fourbx);
  if (std::abs(1.0 - fourbx * fourbx) < 1e-8) {
    // t = +/- T0/(4 beta) singularity, analytic limit
    const double s = kPi / (4.0 * beta);
    return beta / std::sqrt(2.0) *
           ((1.0 + 2.0 / kPi) * std::sin(s) + (1.0 - 2.0 / kPi) * std::cos(s));
  }
  return (std::sin(kPi * x * (1.0 - beta)) +
          fourbx * std::cos(kPi * x * (1.0 + beta))) / denom;
}

std::vector<double> srrc_taps(double beta, double T0, int span_symbols) {
  if (span_symbols < 8)
    throw std::invalid_argument("srrc_taps: span_symbols must be >= 8");
  std::size_t len = static_cast<std::size_t>(std::lround(span_symbols * T0));
  if (len % 2 == 0) ++len;
  const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(len / 2);
  std::vector<double> taps(len);
  double e = 0.0;
  for (std::size_t i = 0; i < len; ++i) {
    const double t = static_cast<double>(static_cast<std::ptrdiff_t>(i) - half);
    taps[i] = srrc_pulse(beta, T0, t);
    e += taps[i] * taps[i];
  }
  const double scale = 1.0 / std::sqrt(e);
  for (auto& v : taps) v *= scale;
  return taps;
}

namespace {

// Oversampled pulse lookup, linear interpolation.
class PulseLut {
 public:
  PulseLut(double beta, double T0, double half_width, int oversample = 32)
      : step_(1.0 / oversample), half_width_(half_width) {
    const std::size_t n =
        static_cast<std::size_t>(std::ceil(2.0 * half_width * oversample)) + 2;
    vals_.resize(n);
    for (std::size_t i = 0; i < n; ++i)
      vals_[i] = srrc_pulse(beta, T0, -half_width + step_ * static_cast<double>(i));
  }

  double operator()(double t) const {
    const double u = (t + half_width_) / step_;
    if (u < 0.0) return 0.0;
    const auto i = static_cast<std::size_t>(u);
    if (i + 1 >= vals_.size()) return 0.0;
    const double fr = u - static_cast<double>(i);
    return vals_[i] + fr * (vals_[i + 1] - vals_[i]);
  }

 private:
  double step_;
  double half_width_;
  std::vector<double> vals_;
};

double msk_half_sine(double t, double T0) {
  // half-sine of duration 2*T0 starting at t=0
  if (t < 0.0 || t > 2.0 * T0) return 0.0;
  return std::sin(kPi * t / (2.0 * T0));
}

}  // namespace

std::size_t required_symbol_count(const SignalMeta& meta, int span_symbols) {
  if (meta.scheme == ModulationScheme::MSK) {
    const double u0 = std::ceil(2.0 * meta.T0 + meta.clock_offset);
    return static_cast<std::size_t>(
               std::ceil((u0 + static_cast<double>(meta.length)) / (2.0 * meta.T0))) + 2;
  }
  const double half = span_symbols * meta.T0 / 2.0;
  const double u0 = std::ceil(half + meta.clock_offset);
  return static_cast<std::size_t>(
             std::ceil((u0 + static_cast<double>(meta.length) + half) / meta.T0)) + 1;
}

cvec modulate(std::span<const cplx> symbols, const SignalMeta& meta, int span_symbols) {
  if (meta.T0 < 1.0 + meta.beta && meta.scheme != ModulationScheme::MSK)
    throw std::invalid_argument("modulate: T0 < 1+beta");
  if (symbols.size() < required_symbol_count(meta, span_symbols))
    throw std::invalid_argument("modulate: insufficient symbols for requested length");

  cvec out;
  if (meta.scheme == ModulationScheme::MSK) {
    const double T0 = meta.T0;
    const std::size_t u0 =
        static_cast<std::size_t>(std::ceil(2.0 * T0 + meta.clock_offset));
    const std::size_t total = u0 + meta.length;
    cvec buf(total, cplx(0, 0));
    for (std::size_t k = 0; k < symbols.size(); ++k) {
      const double ti = 2.0 * T0 * static_cast<double>(k) + meta.clock_offset;
      const double tq = ti + T0;
      const double ik = symbols[k].real();
      const double qk = symbols[k].imag();
      const auto lo = static_cast<std::size_t>(std::max(0.0, std::floor(ti)));
      const auto hi = std::min(total, static_cast<std::size_t>(
                                          std::max(0.0, std::ceil(tq + 2.0 * T0))));
      for (std::size_t u = lo; u < hi; ++u) {
        const double t = static_cast<double>(u);
        buf[u] += cplx(ik * msk_half_sine(t - ti, T0), qk * msk_half_sine(t - tq, T0));
      }
    }
    out.assign(buf.begin() + static_cast<std::ptrdiff_t>(u0), buf.end());
  } else {
    const double T0 = meta.T0;
    const double half = span_symbols * T0 / 2.0;
    const PulseLut lut(meta.beta, T0, half);
    const std::size_t u0 = static_cast<std::size_t>(std::ceil(half + meta.clock_offset));
    const std::size_t total = u0 + meta.length;
    cvec buf(total, cplx(0, 0));
    for (std::size_t k = 0; k < symbols.size(); ++k) {
      const double tk = T0 * static_cast<double>(k) + meta.clock_offset;
      const auto lo = static_cast<std::size_t>(std::max(0.0, std::ceil(tk - half)));
      if (lo >= total) break;
      const auto hi = std::min(total, static_cast<std::size_t>(
                                          std::max(0.0, std::floor(tk + half) + 1.0)));
      const cplx a = symbols[k];
      for (std::size_t u = lo; u < hi; ++u)
        buf[u] += a * lut(static_cast<double>(u) - tk);
    }
    out.assign(buf.begin() + static_cast<std::ptrdiff_t>(u0), buf.end());
  }

  const double p = mean_power(out);
  if (p <= 0.0) throw std::runtime_error("modulate: degenerate zero-power block");
  const double scale = std::sqrt(meta.power / p);
  for (auto& v : out) v *= scale;
  return out;
}

double noise_power_for(const SignalMeta& meta) {
  if (std::isinf(meta.snr_inband_db)) return 0.0;
  const double snr = std::pow(10.0, meta.snr_inband_db / 10.0);
  return meta.power * meta.T0 / ((1.0 + meta.beta) * snr);
}

cvec apply_cfo_and_noise(const cvec& x, const SignalMeta& meta, std::mt19937_64& rng) {
  cvec y(x.size());
  const double ang = 2.0 * kPi * meta.f0;
  for (std::size_t t = 0; t < x.size(); ++t)
    y[t] = x[t] * std::polar(1.0, ang * static_cast<double>(t) + meta.phase);
  const double sigma2 = noise_power_for(meta);
  if (sigma2 > 0.0) {
    std::normal_distribution<double> g(0.0, std::sqrt(sigma2 / 2.0));
    for (auto& v : y) {
      const double re = g(rng);
      const double im = g(rng);
      v += cplx(re, im);
    }
  }
  return y;
}

cvec synthesize(const SignalMeta& meta) {
  std::mt19937_64 rng(meta.seed);
  const auto syms = gen_symbols(meta.scheme, required_symbol_count(meta), rng);
  const auto clean = modulate(syms, meta);
  return apply_cfo_and_noise(clean, meta, rng);
}

std::uint64_t derive_seed(std::uint64_t dataset_seed, std::uint32_t class_index,
                          std::uint32_t signal_index) {
  const std::uint64_t mix =
      (static_cast<std::uint64_t>(class_index) << 32) | signal_index;
  return splitmix64(splitmix64(dataset_seed) ^ mix);
}

}  // namespace ccmod::siggen
