#pragma once

#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ccmod/dsp.hpp"

namespace ccmod::siggen {

enum class ModulationScheme : std::uint8_t {
  BPSK = 0,
  QPSK,
  PSK8,
  DQPSK_PI4,
  MSK,
  QAM16,
  QAM64,
  QAM256,
};
inline constexpr int kNumSchemes = 8;

const char* scheme_name(ModulationScheme s);
std::optional<ModulationScheme> scheme_from_name(std::string_view name);

// Unit-average-power symbol alphabet. For MSK this is the per-rail binary
// alphabet {+1,-1}; the offset-quadrature construction lives in modulate().
// For pi/4-DQPSK it is the 8-point constellation the differential encoder
// walks over.
std::vector<cplx> alphabet(ModulationScheme s);

struct SignalMeta {
  ModulationScheme scheme = ModulationScheme::BPSK;
  double T0 = 10.0;           // symbol period, samples (bit interval for MSK)
  double f0 = 0.0;            // carrier frequency offset, cycles/sample
  double beta = 0.35;         // SRRC roll-off
  double snr_inband_db = std::numeric_limits<double>::infinity();
  double phase = 0.0;         // carrier phase, radians
  double power = 1.0;         // average signal power, linear
  std::uint64_t seed = 0;
  std::size_t length = 32768;
  double clock_offset = 0.0;  // symbol-clock offset t_b in samples
};

struct DatasetConfig {
  std::string name;
  double T0_min = 1.0, T0_max = 23.0;
  double f0_min = -0.001, f0_max = 0.001;  // uniform support
  double beta_min = 0.1, beta_max = 1.0;
  double snr_min_db = 0.0, snr_max_db = 12.0;
  double snr_mean_db = 9.0;  // center of mass of the scaled Beta draw
  std::size_t signals_per_class = 1000;
  std::size_t length = 32768;
  bool random_clock_offset = false;

  void validate() const;  // throws std::invalid_argument on bad ranges
};

DatasetConfig cfg2018();
DatasetConfig cfg2022();
std::optional<DatasetConfig> builtin_config(std::string_view name);

SignalMeta draw_params(const DatasetConfig& config, ModulationScheme scheme,
                       std::mt19937_64& rng);

// i.i.d. (or differentially encoded / rail-packed) unit-power symbols.
cvec gen_symbols(ModulationScheme scheme, std::size_t count, std::mt19937_64& rng);

// Square-root raised-cosine pulse p(t), peak at t=0, unnormalized
// (p(0) = 1 - beta + 4*beta/pi). Singular points handled analytically.
double srrc_pulse(double beta, double T0, double t);

// Sampled SRRC taps, length round(span_symbols*T0) forced odd, scaled to unit
// energy so the self-convolved (raised-cosine) response is 1 at its center.
std::vector<double> srrc_taps(double beta, double T0, int span_symbols);

inline constexpr int kDefaultSpanSymbols = 16;

// Symbols needed by modulate() to cover meta.length plus filter transients.
std::size_t required_symbol_count(const SignalMeta& meta,
                                  int span_symbols = kDefaultSpanSymbols);

// Pulse-shaped complex baseband at unit rate, trimmed of edge transients,
// rescaled to exactly meta.power mean power. No CFO/phase/noise applied.
cvec modulate(std::span<const cplx> symbols, const SignalMeta& meta,
              int span_symbols = kDefaultSpanSymbols);

// Total noise power sigma^2 giving the requested in-band SNR:
// snr = power / (sigma^2 * (1+beta)/T0).
double noise_power_for(const SignalMeta& meta);

cvec apply_cfo_and_noise(const cvec& x, const SignalMeta& meta, std::mt19937_64& rng);

// gen_symbols + modulate + apply_cfo_and_noise with meta.seed.
cvec synthesize(const SignalMeta& meta);

// Per-signal generator seed derived from (dataset seed, class, signal index).
std::uint64_t derive_seed(std::uint64_t dataset_seed, std::uint32_t class_index,
                          std::uint32_t signal_index);

}  // namespace ccmod::siggen
