#include "ccmod/blindest.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace ccmod::blindest {

namespace {
constexpr double kPi = std::numbers::pi;

// 5th percentile of a unit-mean averaged periodogram bin (Gamma(K,1/K)),
// Wilson-Hilferty approximation. Used to de-bias the noise-floor estimate.
double gamma_q05(int k) {
  if (k < 1) k = 1;
  const double u = 1.0 / (9.0 * k);
  const double w = 1.0 - u - 1.6449 * std::sqrt(u);
  return w * w * w;
}

double wrap_half(double f) {
  while (f >= 0.5) f -= 1.0;
  while (f < -0.5) f += 1.0;
  return f;
}

struct BandRun {
  int start = 0, len = 0;  // bin run in an fftshifted spectrum
};

// floor + 3 dB threshold, morphological closing, longest contiguous run.
BandRun occupied_run(const std::vector<double>& dens, double floor_level,
                     int close_width) {
  const int n = static_cast<int>(dens.size());
  std::vector<char> mask(dens.size());
  for (int i = 0; i < n; ++i)
    mask[static_cast<std::size_t>(i)] = dens[static_cast<std::size_t>(i)] >
                                        2.0 * floor_level;
  // close gaps up to close_width
  int gap_start = -1;
  bool inside = false;
  for (int i = 0; i < n; ++i) {
    if (mask[static_cast<std::size_t>(i)]) {
      if (!inside && gap_start >= 0 && i - gap_start <= close_width)
        for (int j = gap_start; j < i; ++j) mask[static_cast<std::size_t>(j)] = 1;
      inside = true;
    } else {
      if (inside) gap_start = i;
      inside = false;
    }
  }
  BandRun best;
  int run_start = 0;
  int run_len = 0;
  for (int i = 0; i <= n; ++i) {
    if (i < n && mask[static_cast<std::size_t>(i)]) {
      if (run_len == 0) run_start = i;
      ++run_len;
    } else {
      if (run_len > best.len) best = {run_start, run_len};
      run_len = 0;
    }
  }
  return best;
}

double decile_floor(const std::vector<double>& dens, int averages) {
  std::vector<double> sorted(dens);
  std::sort(sorted.begin(), sorted.end());
  const std::size_t decile = std::max<std::size_t>(1, sorted.size() / 10);
  const double raw = sorted[decile / 2];
  return raw / gamma_q05(averages);
}

}  // namespace

Psd psd_estimate(std::span<const cplx> x, int nfft) {
  if (nfft <= 0 || (nfft & (nfft - 1)) != 0)
    throw std::invalid_argument("psd_estimate: nfft must be a power of two");
  if (x.size() < static_cast<std::size_t>(nfft))
    throw std::invalid_argument("psd_estimate: nfft exceeds signal length");

  const auto w = hamming_window(static_cast<std::size_t>(nfft));
  double wen = 0.0;
  for (double v : w) wen += v * v;

  Psd out;
  out.nfft = nfft;
  out.density.assign(static_cast<std::size_t>(nfft), 0.0);
  const std::size_t hop = static_cast<std::size_t>(nfft) / 2;
  cvec seg(static_cast<std::size_t>(nfft));
  std::size_t pos = 0;
  int count = 0;
  while (pos + static_cast<std::size_t>(nfft) <= x.size()) {
    for (std::size_t i = 0; i < seg.size(); ++i) seg[i] = x[pos + i] * w[i];
    fft_inplace(seg);
    for (int b = 0; b < nfft; ++b) {
      const int shifted = (b + nfft / 2) % nfft;
      out.density[static_cast<std::size_t>(shifted)] +=
          std::norm(seg[static_cast<std::size_t>(b)]) / wen;
    }
    pos += hop;
    ++count;
  }
  for (auto& v : out.density) v /= count;
  out.averages = count;
  return out;
}

double detection_threshold(std::size_t n, int np) {
  // Calibrated on white-noise Monte Carlo at np=64 (120+ surfaces per
  // length): the observed per-surface maximum of the coherence statistic
  // decays like ~n^-0.85, faster than the sqrt(1/n) a per-bin argument
  // would give, because the full-sliding strips also average across f.
  // Table holds 1.45x the observed maxima; log-log interpolation between
  // points, slope-extrapolated outside.
  static const double ln_n[] = {8.3178, 9.0109, 9.7041, 10.3972, 11.0904};
  static const double ln_t[] = {std::log(0.0540), std::log(0.0214),
                                std::log(0.0132), std::log(0.0074),
                                std::log(0.0048)};
  const int m = 5;
  const double x = std::log(static_cast<double>(n));
  int i = 0;
  while (i < m - 2 && x > ln_n[i + 1]) ++i;
  const double s = (ln_t[i + 1] - ln_t[i]) / (ln_n[i + 1] - ln_n[i]);
  const double thr = std::exp(ln_t[i] + s * (x - ln_n[i]));
  return thr * std::sqrt(64.0 / static_cast<double>(np));
}

SscaSurface::SscaSurface(std::size_t n, int np, bool conjugate)
    : n_(n), np_(np), conjugate_(conjugate),
      threshold_(detection_threshold(n, np)) {}

std::size_t SscaSurface::bin_of_alpha(double alpha) const {
  const auto idx = static_cast<std::ptrdiff_t>(
      std::llround(alpha * static_cast<double>(n_))) +
                   static_cast<std::ptrdiff_t>(n_);
  return static_cast<std::size_t>(
      std::clamp<std::ptrdiff_t>(idx, 0, static_cast<std::ptrdiff_t>(2 * n_ - 1)));
}

std::vector<ScfPoint> SscaSurface::peaks_above(double threshold) const {
  std::vector<ScfPoint> out;
  for (std::size_t i = 0; i < profile_.size(); ++i)
    if (profile_[i] > threshold) out.push_back(best_points_[i]);
  return out;
}

SscaSurface ssca(std::span<const cplx> x, int np, bool conjugate) {
  if (np < 8 || (np & (np - 1)) != 0)
    throw std::invalid_argument("ssca: channel count must be a power of two >= 8");
  if (x.size() < static_cast<std::size_t>(16 * np))
    throw std::invalid_argument("ssca: signal shorter than 16 channels");

  const std::size_t len = x.size();
  const std::size_t n = next_pow2(len);
  SscaSurface surf(n, np, conjugate);

  auto window = hamming_window(static_cast<std::size_t>(np));
  double wsum = 0.0;
  for (double v : window) wsum += v;
  for (auto& v : window) v /= wsum;  // unity gain at channel center

  // np-th roots for the channel demodulation e^{-i 2 pi k n / np}
  std::vector<cplx> roots(static_cast<std::size_t>(np));
  for (int r = 0; r < np; ++r)
    roots[static_cast<std::size_t>(r)] = std::polar(1.0, -2.0 * kPi * r / np);

  std::vector<cvec> strips(static_cast<std::size_t>(np));
  for (auto& s : strips) s.assign(n, cplx(0, 0));
  surf.channel_power_.assign(static_cast<std::size_t>(np), 0.0);

  cvec seg(static_cast<std::size_t>(np));
  const int half = np / 2;
  for (std::size_t t = 0; t < len; ++t) {
    for (int s = 0; s < np; ++s) {
      const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t) - half + s;
      seg[static_cast<std::size_t>(s)] =
          (src < 0 || src >= static_cast<std::ptrdiff_t>(len))
              ? cplx(0, 0)
              : x[static_cast<std::size_t>(src)] * window[static_cast<std::size_t>(s)];
    }
    fft_inplace(seg);
    const cplx xc = conjugate ? x[t] : std::conj(x[t]);
    for (int j = 0; j < np; ++j) {
      // window is centered at t, so channel j picks up a phase (-1)^j;
      // the demodulate factor removes the channel carrier.
      const cplx demod =
          roots[static_cast<std::size_t>((static_cast<std::size_t>(j) * t) % np)];
      cplx v = seg[static_cast<std::size_t>(j)] * demod;
      if (j & 1) v = -v;
      const std::size_t jj = static_cast<std::size_t>(j);
      surf.channel_power_[(jj + static_cast<std::size_t>(half)) %
                          static_cast<std::size_t>(np)] += std::norm(v);
      strips[jj][t] = v * xc;
    }
  }
  for (auto& v : surf.channel_power_) v /= static_cast<double>(len);

  // PSD for the coherence normalization
  int nfft = 1024;
  while (static_cast<std::size_t>(nfft) > len / 4) nfft /= 2;
  const Psd psd = psd_estimate(x, nfft);
  auto psd_at = [&](double f) {
    f = wrap_half(f);
    int b = static_cast<int>(std::lround((f + 0.5) * nfft)) % nfft;
    return std::max(psd.density[static_cast<std::size_t>(b)], 1e-30);
  };

  surf.profile_.assign(2 * n, 0.0);
  surf.best_points_.assign(2 * n, ScfPoint{0, 0, {0, 0}, 0, conjugate});

  const std::ptrdiff_t ratio = static_cast<std::ptrdiff_t>(n) / np;
  for (int j = 0; j < np; ++j) {
    const int k = j < half ? j : j - np;  // signed channel index
    auto& g = strips[static_cast<std::size_t>(j)];
    fft_inplace(g);
    const double fk = static_cast<double>(k) / np;
    for (std::size_t q = 0; q < n; ++q) {
      const std::ptrdiff_t qs =
          q < n / 2 ? static_cast<std::ptrdiff_t>(q)
                    : static_cast<std::ptrdiff_t>(q) - static_cast<std::ptrdiff_t>(n);
      const double alpha = fk + static_cast<double>(qs) / static_cast<double>(n);
      const double f = fk / 2.0 - static_cast<double>(qs) / (2.0 * static_cast<double>(n));
      const cplx value = g[q] / static_cast<double>(len);
      const double f1 = f + alpha / 2.0;
      const double f2 = conjugate ? alpha / 2.0 - f : f - alpha / 2.0;
      const double coh = std::abs(value) / std::sqrt(psd_at(f1) * psd_at(f2));
      const std::size_t bin =
          static_cast<std::size_t>(qs + static_cast<std::ptrdiff_t>(k) * ratio +
                                   static_cast<std::ptrdiff_t>(n));
      if (coh > surf.profile_[bin]) {
        surf.profile_[bin] = coh;
        surf.best_points_[bin] = {alpha, f, value, coh, conjugate};
      }
    }
  }
  return surf;
}

namespace {

// Occupied bandwidth from the channelizer power (np coarse PSD bins).
double coarse_bandwidth(const SscaSurface& surf) {
  const auto& cp = surf.channel_power();
  std::vector<double> dens(cp.begin(), cp.end());
  const double floor_level = decile_floor(dens, static_cast<int>(surf.length()));
  const auto run = occupied_run(dens, floor_level, 1);
  if (run.len == 0) return 0.0;
  return static_cast<double>(run.len) / static_cast<double>(dens.size());
}

struct FoldedPeak {
  double alpha = 0.0;  // folded into (0, 1/2]
  double stat = 0.0;
  bool valid = false;
};

// statistic at folded cycle frequency a: max over the images {a,-a,1-a,a-1},
// parabolic-refined on the winning image.
FoldedPeak folded_stat(const SscaSurface& surf, double a, bool refine) {
  const auto& prof = surf.alpha_profile();
  const double images[4] = {a, -a, 1.0 - a, a - 1.0};
  FoldedPeak pk;
  for (double im : images) {
    if (im <= -1.0 || im >= 1.0) continue;
    const std::size_t b = surf.bin_of_alpha(im);
    if (prof[b] > pk.stat) {
      pk.stat = prof[b];
      double alpha = surf.alpha_of_bin(b);
      if (refine && b > 0 && b + 1 < prof.size()) {
        const double d = parabolic_peak_offset(prof[b - 1], prof[b], prof[b + 1]);
        alpha += d / static_cast<double>(surf.length());
      }
      alpha = std::abs(alpha);
      if (alpha > 0.5) alpha = 1.0 - alpha;
      pk.alpha = alpha;
      pk.valid = true;
    }
  }
  return pk;
}

}  // namespace

// RMS width of the noise-corrected PSD. For SRRC spectra the RMS width is
// 0.289/T0 (beta=0) to 0.318/T0 (beta=1) -- a rate proxy good to ~10%
// independent of roll-off, unlike any threshold-crossing width.
double rms_rate_hint(const Psd& psd) {
  // Subtract 1.5x the (debiased) noise floor: for a narrowband signal almost
  // every bin is noise, and any residual after subtraction -- weighted by
  // f^2 -- would drag the RMS width toward the white-spectrum value 0.289.
  std::vector<double> excess(psd.density.size());
  const double floor_level = decile_floor(psd.density, psd.averages);
  for (std::size_t i = 0; i < excess.size(); ++i)
    excess[i] = std::max(0.0, psd.density[i] - 1.5 * floor_level);

  double lo = -0.5, hi = 0.5;
  double frms = 0.0;
  for (int pass = 0; pass < 2; ++pass) {
    double w = 0.0, m1 = 0.0;
    for (std::size_t i = 0; i < excess.size(); ++i) {
      const double f = psd.freq_of_bin(static_cast<int>(i));
      if (f < lo || f > hi) continue;
      w += excess[i];
      m1 += excess[i] * f;
    }
    if (w <= 0.0) return 0.0;
    const double mean = m1 / w;
    double m2 = 0.0;
    for (std::size_t i = 0; i < excess.size(); ++i) {
      const double f = psd.freq_of_bin(static_cast<int>(i));
      if (f < lo || f > hi) continue;
      m2 += excess[i] * (f - mean) * (f - mean);
    }
    frms = std::sqrt(m2 / w);
    // second pass: clip the integration to the main lobe so residual noise
    // excess far out in the tails (weighted by f^2) cannot dominate
    lo = mean - 3.0 * frms;
    hi = mean + 3.0 * frms;
  }
  return frms / 0.30;
}

namespace {

// Line sharpness of the squared-envelope spectrum at cycle frequency a:
// symbol-rate cyclostationarity puts a spectral line at 1/T0 in |x|^2,
// which noise maxima of the SSCA scan do not reproduce.
double envelope_line_sharpness(std::span<const cplx> x, double a) {
  const double n = static_cast<double>(x.size());
  double mean = 0.0;
  for (const auto& v : x) mean += std::norm(v);
  mean /= n;
  cvec u(x.size());
  for (std::size_t t = 0; t < x.size(); ++t)
    u[t] = cplx(std::norm(x[t]) - mean, 0.0);
  double lo = a - 2.0 / n, hi = a + 2.0 / n;
  for (int iter = 0; iter < 28; ++iter) {
    const double m1 = lo + (hi - lo) / 3.0, m2 = hi - (hi - lo) / 3.0;
    if (std::abs(dft_bin(u, m1)) < std::abs(dft_bin(u, m2))) lo = m1;
    else hi = m2;
  }
  const double ar = 0.5 * (lo + hi);
  const double s0 = std::abs(dft_bin(u, ar));
  double bg = 0.0;
  for (double d : {-5.0, -3.0, 3.0, 5.0})
    bg += std::abs(dft_bin(u, ar + d / n));
  return s0 / std::max(bg / 4.0, 1e-30);
}

}  // namespace

RateDetection detect_symbol_rate(const SscaSurface& scf, double rate_hint,
                                 std::span<const cplx> x) {
  if (scf.conjugate())
    throw std::invalid_argument("detect_symbol_rate: needs the non-conjugate surface");
  const auto& prof = scf.alpha_profile();
  const std::size_t n = scf.length();
  const double guard = 0.01;  // keep clear of the alpha=0 PSD ridge

  // strongest folded CF in (guard, 1/2]
  double best_stat = 0.0;
  std::size_t best_bin = 0;
  for (std::size_t b = 0; b < prof.size(); ++b) {
    const double alpha = scf.alpha_of_bin(b);
    double a = std::abs(alpha);
    if (a > 0.5) a = 1.0 - a;
    if (a <= guard || a > 0.5) continue;
    if (prof[b] > best_stat) {
      best_stat = prof[b];
      best_bin = b;
    }
  }
  if (best_stat < scf.threshold()) {
    // Weak-feature second chance: a near-threshold candidate is accepted if
    // the squared-envelope spectrum independently shows a line there.
    bool confirmed = false;
    if (!x.empty() && best_stat >= 0.75 * scf.threshold()) {
      double a = std::abs(scf.alpha_of_bin(best_bin));
      if (a > 0.5) a = 1.0 - a;
      confirmed = envelope_line_sharpness(x, a) > 4.0;
    }
    if (!confirmed)
      throw NoDetection("detect_symbol_rate: no cycle frequency above threshold");
  }

  double alpha = scf.alpha_of_bin(best_bin);
  if (best_bin > 0 && best_bin + 1 < prof.size()) {
    const double d =
        parabolic_peak_offset(prof[best_bin - 1], prof[best_bin], prof[best_bin + 1]);
    alpha += d / static_cast<double>(n);
  }
  double a = std::abs(alpha);
  if (a > 0.5) a = 1.0 - a;
  double stat = best_stat;

  // harmonic consolidation: prefer a/2 if a comparable detection sits there
  while (a / 2.0 > guard) {
    const auto sub = folded_stat(scf, a / 2.0, true);
    if (!sub.valid || sub.stat < std::max(stat / 2.0, scf.threshold())) break;
    if (std::abs(sub.alpha - a / 2.0) > 2.0 / static_cast<double>(n)) break;
    a = sub.alpha;
    stat = sub.stat;
  }

  // a and 1-a alias to the same folded bin; resolve the image
  double rate = a;
  if (rate_hint > 0.0) {
    if (std::abs(std::log((1.0 - a) / rate_hint)) <
        std::abs(std::log(a / rate_hint)))
      rate = 1.0 - a;
  } else {
    const double bw = coarse_bandwidth(scf);
    if (bw > 0.0) {
      const double cand[2] = {a, 1.0 - a};
      double best_score = -1.0;
      for (double r : cand) {
        if (r <= 0.0 || r > 1.0) continue;
        const double excess = bw / r - 1.0;  // implied roll-off
        double score = (excess >= -0.15 && excess <= 1.45) ? 1.0 : 0.0;
        score -= std::abs(excess - 0.55) * 0.1;
        if (score > best_score) {
          best_score = score;
          rate = r;
        }
      }
    }
  }
  return {1.0 / rate, stat / scf.threshold()};
}

RateDetection detect_symbol_rate_conjugate(const SscaSurface& scf) {
  if (!scf.conjugate())
    throw std::invalid_argument("detect_symbol_rate_conjugate: needs the conjugate surface");
  const auto& prof = scf.alpha_profile();
  const auto n = static_cast<double>(scf.length());

  // local maxima above threshold, parabolic-refined
  struct Peak { double alpha; double stat; };
  std::vector<Peak> peaks;
  for (std::size_t b = 1; b + 1 < prof.size(); ++b) {
    if (prof[b] <= 1.5 * scf.threshold()) continue;
    if (prof[b] < prof[b - 1] || prof[b] < prof[b + 1]) continue;
    const double d = parabolic_peak_offset(prof[b - 1], prof[b], prof[b + 1]);
    peaks.push_back({scf.alpha_of_bin(b) + d / n, prof[b]});
  }
  std::sort(peaks.begin(), peaks.end(),
            [](const Peak& l, const Peak& r) { return l.stat > r.stat; });
  if (peaks.size() > 5) peaks.resize(5);
  if (peaks.size() < 2)
    throw NoDetection("detect_symbol_rate_conjugate: need two conjugate lines");

  // adjacent conjugate lines are spaced by 1/T0 for both the k/T0 (BPSK) and
  // the (k+1/2)/T0 (MSK) grids; take the smallest well-resolved spacing
  std::sort(peaks.begin(), peaks.end(),
            [](const Peak& l, const Peak& r) { return l.alpha < r.alpha; });
  const double resolve = 8.0 / n;
  double spacing = 0.0;
  double stat = 0.0;
  for (std::size_t i = 0; i + 1 < peaks.size(); ++i) {
    const double d = peaks[i + 1].alpha - peaks[i].alpha;
    if (d < resolve) continue;
    if (spacing == 0.0 || d < spacing) {
      spacing = d;
      stat = std::min(peaks[i].stat, peaks[i + 1].stat);
    }
  }
  if (spacing <= 0.0 || 1.0 / spacing <= 1.05)
    throw NoDetection("detect_symbol_rate_conjugate: no plausible line spacing");
  return {1.0 / spacing, stat / scf.threshold()};
}

BandNoise estimate_band_and_noise(const Psd& psd) {
  const double floor_level = decile_floor(psd.density, psd.averages);
  const auto run = occupied_run(psd.density, floor_level, 5);
  if (run.len > static_cast<int>(0.95 * psd.nfft))
    throw std::runtime_error("estimate_band_and_noise: degenerate band (>95% of spectrum)");

  BandNoise bn;
  bn.sigma2_hat = floor_level;  // density x unit bandwidth
  bn.bandwidth_hat = static_cast<double>(std::max(run.len, 1)) / psd.nfft;
  double excess = 0.0;
  for (int i = run.start; i < run.start + run.len; ++i)
    excess += std::max(0.0, psd.density[static_cast<std::size_t>(i)] - floor_level);
  const double inband_noise = floor_level * std::max(run.len, 1);
  bn.snr_hat_db = 10.0 * std::log10(std::max(excess, 1e-12) / inband_noise);
  return bn;
}

CfoEstimate estimate_cfo(std::span<const cplx> x, double T0_hat,
                         const SscaSurface& scf_conj, double f0_min, double f0_max,
                         double bandwidth_hint) {
  if (T0_hat <= 1.0) throw std::invalid_argument("estimate_cfo: bad T0_hat");

  // Band-limit to the occupied band before any nonlinearity: out-of-band
  // noise is what buries the order-n lines (the x^n noise floor scales with
  // the filtered noise power to the n-th power). With a bandwidth estimate
  // the filter is matched to 1.1x the occupied half-width; otherwise the
  // half-width has to cover beta up to 1.
  cvec xf;
  {
    const double margin = std::max(std::abs(f0_min), std::abs(f0_max));
    const double W = (bandwidth_hint > 0.0
                          ? std::max(0.55 * bandwidth_hint, 0.6 / T0_hat)
                          : 1.05 / T0_hat) +
                     margin;
    const std::size_t nf = next_pow2(x.size());
    cvec X = fft(x, nf);
    for (std::size_t i = 0; i < nf; ++i) {
      double f = static_cast<double>(i) / static_cast<double>(nf);
      if (f >= 0.5) f -= 1.0;
      if (std::abs(f) > W) X[i] = 0;
    }
    fft_inplace(X, true);
    xf.assign(X.begin(), X.begin() + x.size());
  }

  // Path 1: conjugate CF cluster (BPSK/MSK-like). Peaks sit at
  // 2 f0 + k/T0 (BPSK) or 2 f0 + (k +/- 1/2)/T0 (offset-quadrature MSK).
  // Candidates are scanned in order of |k| so the T0_hat error is not
  // amplified through the comb offset; k=0 (doubled carrier) wins outright
  // for BPSK-like signals.
  {
    const auto& prof = scf_conj.alpha_profile();
    const auto n = static_cast<double>(scf_conj.length());
    const double margin = 4.0 / n;

    cvec sq;  // built lazily for the fine search
    auto refine = [&](double alpha) {
      if (sq.empty()) {
        sq.resize(xf.size());
        for (std::size_t t = 0; t < xf.size(); ++t) sq[t] = xf[t] * xf[t];
      }
      double lo = alpha - 2.0 / n, hi = alpha + 2.0 / n;
      for (int iter = 0; iter < 28; ++iter) {
        const double m1 = lo + (hi - lo) / 3.0, m2 = hi - (hi - lo) / 3.0;
        if (std::abs(dft_bin(sq, m1)) < std::abs(dft_bin(sq, m2))) lo = m1;
        else hi = m2;
      }
      return 0.5 * (lo + hi);
    };

    const std::vector<double> k_order = {0.0, -0.5, 0.5, -1.0, 1.0, -1.5, 1.5,
                                         -2.0, 2.0, -2.5, 2.5, -3.0, 3.0};
    for (double k : k_order) {
      const double center = k / T0_hat;
      if (std::abs(center) > 0.95) continue;
      const double lo = center + 2.0 * f0_min - margin;
      const double hi = center + 2.0 * f0_max + margin;
      double best = 0.0;
      std::size_t best_bin = 0;
      for (std::size_t b = scf_conj.bin_of_alpha(lo); b <= scf_conj.bin_of_alpha(hi);
           ++b)
        if (prof[b] > best) {
          best = prof[b];
          best_bin = b;
        }
      // Margin above the noise-calibrated threshold: signal self-noise on the
      // conjugate surface of balanced (QAM-like) schemes can graze the bare
      // threshold, and those schemes have far stronger fourth-order lines.
      if (best <= 2.5 * scf_conj.threshold()) continue;
      double alpha = scf_conj.alpha_of_bin(best_bin);
      if (best_bin > 0 && best_bin + 1 < prof.size()) {
        const double d = parabolic_peak_offset(prof[best_bin - 1], prof[best_bin],
                                               prof[best_bin + 1]);
        alpha += d / n;
      }
      alpha = refine(alpha);
      // A real conjugate feature is a spectral line in x^2; QAM-like
      // self-noise can graze the threshold but is a smooth continuum, so
      // demand the refined peak to stand well above its local background.
      const double s0 = std::abs(dft_bin(sq, alpha));
      double bg = 0.0;
      for (double d : {-5.0, -3.0, 3.0, 5.0})
        bg += std::abs(dft_bin(sq, alpha + d / n));
      bg /= 4.0;
      if (s0 < 8.0 * bg) continue;
      const double f0 = (alpha - center) / 2.0;
      if (f0 >= f0_min - margin && f0 <= f0_max + margin)
        return {f0, best / scf_conj.threshold(), 2};
    }
  }

  // Path 2/3: grid search on an order-n lag product. The objective sums
  // |FFT(y)| over the candidate comb n*f0 + (k+off)/T0. Variants:
  //   (4, off=0):   QPSK/QAM, x^4 lines on the k/T0 grid
  //   (4, off=1/2): pi/4-DQPSK, whose s^4 alternates sign each symbol
  //   (8, off=0):   8PSK (s^8 = 1), viable only thanks to the prefilter
  const std::size_t nfft = next_pow2(xf.size()) * 4;
  struct Variant { int order; double offset; };
  const Variant variants[] = {{4, 0.0}, {4, 0.5}, {8, 0.0}};
  std::vector<CfoEstimate> candidates;
  for (const auto& var : variants) {
    cvec y(xf.size());
    for (std::size_t t = 0; t < xf.size(); ++t) {
      cplx v = xf[t];
      for (int j = 1; j < var.order; ++j) v *= xf[t];
      y[t] = v;
    }
    cvec spec = fft(y, nfft);
    std::vector<double> mag(nfft);
    for (std::size_t i = 0; i < nfft; ++i)
      mag[i] = std::abs(spec[i]) / static_cast<double>(xf.size());

    // Squared magnitudes over the inner comb (|k| <= 1, where the lines
    // actually live) with +/- 1 bin slack: keeps the strong bins dominant
    // instead of letting noise bins dilute the sum.
    auto line_power = [&](double freq, int slack) {
      freq -= std::floor(freq);
      const auto b = static_cast<std::size_t>(
                         std::llround(freq * static_cast<double>(nfft))) % nfft;
      double mx = 0.0;
      for (int d = -slack; d <= slack; ++d)
        mx = std::max(mx, mag[(b + nfft + static_cast<std::size_t>(d)) % nfft]);
      return mx * mx;
    };
    auto objective = [&](double f0) {
      // A tooth at the comb origin has no T0 dependence; the others get
      // extra bin slack because the T0_hat error is amplified by T0^2 into
      // their positions.
      double s = 0.0;
      for (int k = -1; k <= 1; ++k) {
        const double tooth = static_cast<double>(k) + var.offset;
        s += line_power(var.order * f0 + tooth / T0_hat,
                        std::abs(tooth) < 1e-9 ? 1 : 3);
      }
      return s;
    };

    const double step = 1.0 / (static_cast<double>(nfft) * var.order);
    double best_f0 = f0_min, best_obj = -1.0;
    std::vector<double> samples;
    for (double f0 = f0_min; f0 <= f0_max + step / 2.0; f0 += step) {
      const double o = objective(f0);
      samples.push_back(o);
      if (o > best_obj) {
        best_obj = o;
        best_f0 = f0;
      }
    }
    std::vector<double> sorted(samples);
    std::sort(sorted.begin(), sorted.end());
    const double median = std::max(sorted[sorted.size() / 2], 1e-30);
    const double contrast = best_obj / median;
    // Order 4 needs a high bar (noise maxima of the scan reach ~5); the
    // order-8 line is intrinsically weaker, and order 4 would have fired
    // already for every scheme that has fourth-order lines.
    const double accept = var.order == 8 ? 4.5 : 8.0;
    if (contrast > accept) {
      // Fine search on the exact (unbinned) inner-comb DFT magnitudes.
      auto exact = [&](double f0) {
        double s = 0.0;
        for (int k = -1; k <= 1; ++k)
          s += std::abs(dft_bin(y, var.order * f0 +
                                       (static_cast<double>(k) + var.offset) /
                                           T0_hat));
        return s;
      };
      double lo = best_f0 - 2.0 * step, hi = best_f0 + 2.0 * step;
      for (int iter = 0; iter < 40; ++iter) {
        const double m1 = lo + (hi - lo) / 3.0, m2 = hi - (hi - lo) / 3.0;
        if (exact(m1) < exact(m2)) lo = m1;
        else hi = m2;
      }
      candidates.push_back({0.5 * (lo + hi), contrast, var.order});
    }
  }
  if (!candidates.empty()) {
    // The off=0 and off=1/2 combs alias onto each other under an f0 shift of
    // 1/(order*2*T0), so near-equal contrasts need an external arbiter: the
    // power centroid of the (band-limited) spectrum sits at the true f0.
    double cmax = 0.0;
    for (const auto& c : candidates) cmax = std::max(cmax, c.confidence);
    double centroid = 0.0;
    {
      const std::size_t nf = next_pow2(xf.size());
      cvec X = fft(xf, nf);
      double w = 0.0, m1 = 0.0;
      for (std::size_t i = 0; i < nf; ++i) {
        double f = static_cast<double>(i) / static_cast<double>(nf);
        if (f >= 0.5) f -= 1.0;
        const double p = std::norm(X[i]);
        w += p;
        m1 += p * f;
      }
      centroid = w > 0.0 ? m1 / w : 0.0;
    }
    const CfoEstimate* pick = nullptr;
    for (const auto& c : candidates) {
      if (c.confidence < 0.6 * cmax) continue;
      if (!pick ||
          std::abs(c.f0_hat - centroid) < std::abs(pick->f0_hat - centroid))
        pick = &c;
    }
    return *pick;
  }
  throw NoDetection("estimate_cfo: flat objective, no carrier feature found");
}

BlindEstimates estimate_all(std::span<const cplx> x, const BlindOptions& opt,
                            std::optional<double> fallback_T0) {
  BlindEstimates est;

  int nfft = opt.psd_nfft;
  while (static_cast<std::size_t>(nfft) > x.size() / 4) nfft /= 2;
  const Psd psd = psd_estimate(x, nfft);
  try {
    const BandNoise bn = estimate_band_and_noise(psd);
    est.sigma2_hat = bn.sigma2_hat;
    est.snr_hat_db = bn.snr_hat_db;
    est.bandwidth_hat = bn.bandwidth_hat;
  } catch (const std::runtime_error&) {
    est.sigma2_hat = mean_power(x) * 0.01;  // degenerate band; rough floor
    est.snr_hat_db = 20.0;
    est.bandwidth_hat = 1.0;
  }

  const auto nonconj = ssca(x, opt.np, false);
  const auto conj = ssca(x, opt.np, true);
  try {
    const auto rd = detect_symbol_rate(nonconj, rms_rate_hint(psd), x);
    est.T0_hat = rd.T0_hat;
    est.rate_confidence = rd.confidence;
  } catch (const NoDetection&) {
    try {
      const auto rd = detect_symbol_rate_conjugate(conj);
      est.T0_hat = rd.T0_hat;
      est.rate_confidence = rd.confidence;
    } catch (const NoDetection&) {
      if (!fallback_T0) throw;
      est.T0_hat = *fallback_T0;
      est.rate_fallback = true;
    }
  }
  try {
    const auto ce = estimate_cfo(x, est.T0_hat, conj, opt.f0_min, opt.f0_max,
                                 est.bandwidth_hat);
    est.f0_hat = ce.f0_hat;
    est.cfo_confidence = ce.confidence;
    est.cfo_order = ce.order_used;
  } catch (const NoDetection&) {
    est.f0_hat = 0.0;
    est.cfo_fallback = true;
  }
  return est;
}

}  // namespace ccmod::blindest
