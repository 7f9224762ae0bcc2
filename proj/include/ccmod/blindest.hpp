#pragma once

#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "ccmod/dsp.hpp"

namespace ccmod::blindest {

struct NoDetection : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Psd {
  int nfft = 0;
  int averages = 0;
  std::vector<double> density;  // fftshifted; sum(density)/nfft == total power

  double freq_of_bin(int b) const {
    return (static_cast<double>(b) - nfft / 2) / nfft;
  }
};

// Averaged periodogram (Hamming, 50% overlap), unit-area normalization:
// integrating the density over f in [-1/2, 1/2) gives the signal power.
Psd psd_estimate(std::span<const cplx> x, int nfft);

struct ScfPoint {
  double alpha;
  double f;
  cplx value;
  double coherence;  // |value| normalized by the PSD at f +/- alpha/2
  bool conjugate;
};

// Strip spectral correlation analyzer surface. Cycle-frequency resolution is
// 1/n over alpha in [-1, 1); channel count np sets the spectral resolution.
class SscaSurface {
 public:
  SscaSurface(std::size_t n, int np, bool conjugate);

  bool conjugate() const { return conjugate_; }
  std::size_t length() const { return n_; }
  int channels() const { return np_; }

  // max-over-f coherence statistic per global alpha bin; bin b covers
  // alpha = b/n for b in [-n, n), stored at index b + n.
  const std::vector<double>& alpha_profile() const { return profile_; }
  double alpha_of_bin(std::size_t idx) const {
    return (static_cast<double>(idx) - static_cast<double>(n_)) /
           static_cast<double>(n_);
  }
  std::size_t bin_of_alpha(double alpha) const;

  // Detection threshold on the coherence statistic (see detection_threshold).
  double threshold() const { return threshold_; }

  std::vector<ScfPoint> peaks_above(double threshold) const;

  // PSD proxy taken from the alpha ~ 0 strips (used for rate disambiguation).
  const std::vector<double>& channel_power() const { return channel_power_; }

 private:
  friend SscaSurface ssca(std::span<const cplx>, int, bool);
  std::size_t n_;
  int np_;
  bool conjugate_;
  double threshold_;
  std::vector<double> profile_;
  std::vector<ScfPoint> best_points_;  // best point per alpha bin
  std::vector<double> channel_power_;
};

inline constexpr int kDefaultChannels = 64;

// Coherence threshold calibrated for < 1e-3 false alarms per surface.
double detection_threshold(std::size_t n, int np);

SscaSurface ssca(std::span<const cplx> x, int np = kDefaultChannels,
                 bool conjugate = false);

struct RateDetection {
  double T0_hat;
  double confidence;
};

// Rate proxy from the RMS width of the noise-corrected PSD (~0.3/T0 for
// SRRC at any roll-off); used to resolve the folded-rate image ambiguity.
double rms_rate_hint(const Psd& psd);

// Strongest non-conjugate CF in (0, 1/2] after harmonic consolidation.
// The SSCA folds alpha mod 1, so a rate a and its image 1-a land in the
// same bin (and no second-order statistic can split them: C(1-a) = C(a)*);
// the image is resolved against rate_hint when given, else against the
// coarse occupied bandwidth. With the raw signal available, near-threshold
// candidates can be confirmed by a squared-envelope line test.
RateDetection detect_symbol_rate(const SscaSurface& scf, double rate_hint = 0.0,
                                 std::span<const cplx> x = {});

// Rate from a pair of conjugate spectral lines (offset-quadrature MSK-like
// signals, whose non-conjugate feature can be too weak): adjacent conjugate
// peaks are spaced by exactly 1/T0.
RateDetection detect_symbol_rate_conjugate(const SscaSurface& scf_conj);

struct CfoEstimate {
  double f0_hat;
  double confidence;
  int order_used;  // 2 (conjugate cluster), 4 or 8 (lag-product grid search)
};

// bandwidth_hint (occupied bandwidth, cycles/sample; 0 = unknown) tightens the
// band-limiting prefilter, which the order-8 path needs to stay above the
// lag-product noise floor.
CfoEstimate estimate_cfo(std::span<const cplx> x, double T0_hat,
                         const SscaSurface& scf_conj, double f0_min, double f0_max,
                         double bandwidth_hint = 0.0);

struct BandNoise {
  double bandwidth_hat;  // occupied bandwidth, cycles/sample
  double sigma2_hat;     // total noise power over the full band
  double snr_hat_db;     // in-band SNR
};

BandNoise estimate_band_and_noise(const Psd& psd);

struct BlindEstimates {
  double T0_hat = 0.0;
  double f0_hat = 0.0;
  double sigma2_hat = 0.0;
  double snr_hat_db = 0.0;
  double bandwidth_hat = 0.0;
  double rate_confidence = 0.0;
  double cfo_confidence = 0.0;
  int cfo_order = 0;
  bool rate_fallback = false;  // detection failed, caller supplied no truth
  bool cfo_fallback = false;   // detection failed, f0_hat forced to 0
};

struct BlindOptions {
  int np = kDefaultChannels;
  int psd_nfft = 2048;
  double f0_min = -0.005;
  double f0_max = 0.005;
};

// Full blind chain. Rate failure throws NoDetection unless fallback_T0 is
// given; CFO failure falls back to f0_hat = 0 with the flag set.
BlindEstimates estimate_all(std::span<const cplx> x, const BlindOptions& opt = {},
                            std::optional<double> fallback_T0 = std::nullopt);

}  // namespace ccmod::blindest
