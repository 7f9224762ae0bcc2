#include "ccmod/cspcore.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace ccmod::cspcore {

namespace {
constexpr double kPi = std::numbers::pi;

double factorial(int n) {
  double f = 1.0;
  for (int i = 2; i <= n; ++i) f *= i;
  return f;
}

std::vector<Partition> make_partitions(int n) {
  // restricted growth strings
  std::vector<Partition> out;
  std::vector<int> a(static_cast<std::size_t>(n), 0);
  while (true) {
    int p = 0;
    for (int i = 0; i < n; ++i) p = std::max(p, a[static_cast<std::size_t>(i)] + 1);
    Partition part;
    part.blocks.assign(static_cast<std::size_t>(p), {});
    for (int i = 0; i < n; ++i)
      part.blocks[static_cast<std::size_t>(a[static_cast<std::size_t>(i)])].push_back(i);
    part.h = ((p - 1) % 2 == 0 ? 1.0 : -1.0) * factorial(p - 1);
    out.push_back(std::move(part));
    // next RGS
    int i = n - 1;
    for (; i > 0; --i) {
      int mx = 0;
      for (int j = 0; j < i; ++j) mx = std::max(mx, a[static_cast<std::size_t>(j)]);
      if (a[static_cast<std::size_t>(i)] <= mx) break;
    }
    if (i == 0) break;
    ++a[static_cast<std::size_t>(i)];
    for (int j = i + 1; j < n; ++j) a[static_cast<std::size_t>(j)] = 0;
  }
  return out;
}

}  // namespace

const std::vector<MomentOrder>& order_pairs() {
  static const std::vector<MomentOrder> pairs = [] {
    std::vector<MomentOrder> v;
    for (int n : {2, 4, 6})
      for (int m = 0; m <= n; ++m) v.push_back({n, m});
    return v;
  }();
  return pairs;
}

CyclePattern cf_pattern(double f0, double T0, int kmax) {
  if (T0 <= 1.0) throw std::invalid_argument("cf_pattern: T0 must be > 1");
  CyclePattern pat;
  pat.f0 = f0;
  pat.T0 = T0;
  pat.kmax = kmax;
  for (const auto& o : order_pairs())
    for (int k = -kmax; k <= kmax; ++k)
      pat.slots.push_back({o.n, o.m, k, (o.n - 2 * o.m) * f0 + k / T0});
  return pat;
}

cplx cyclic_moment(std::span<const cplx> x, double alpha, MomentOrder order) {
  if (x.empty()) throw std::invalid_argument("cyclic_moment: empty signal");
  if (order.n < 1 || order.n > 6 || order.m < 0 || order.m > order.n)
    throw std::invalid_argument("cyclic_moment: bad order");
  cvec y(x.size());
  for (std::size_t t = 0; t < x.size(); ++t) {
    cplx v(1.0, 0.0);
    for (int j = 0; j < order.n - order.m; ++j) v *= x[t];
    for (int j = 0; j < order.m; ++j) v *= std::conj(x[t]);
    y[t] = v;
  }
  return dft_bin(y, alpha);
}

const std::vector<Partition>& set_partitions(int n) {
  if (n != 2 && n != 4 && n != 6)
    throw std::invalid_argument("set_partitions: n must be 2, 4 or 6");
  static const std::vector<Partition> p2 = make_partitions(2);
  static const std::vector<Partition> p4 = make_partitions(4);
  static const std::vector<Partition> p6 = make_partitions(6);
  switch (n) {
    case 2: return p2;
    case 4: return p4;
    default: return p6;
  }
}

CumulantEstimator::CumulantEstimator(std::span<const cplx> x, double f0, double T0,
                                     int kmax, double noise_power)
    : x_(x), f0_(f0), T0_(T0), kmax_(kmax), noise_power_(noise_power) {
  if (x.empty()) throw std::invalid_argument("CumulantEstimator: empty signal");
  if (T0 <= 1.0) throw std::invalid_argument("CumulantEstimator: T0 must be > 1");
}

const cvec& CumulantEstimator::lag_product(int n, int m) {
  const auto key = std::make_pair(n, m);
  if (auto it = lags_.find(key); it != lags_.end()) return it->second;
  cvec y(x_.size());
  for (std::size_t t = 0; t < x_.size(); ++t) {
    cplx v(1.0, 0.0);
    for (int j = 0; j < n - m; ++j) v *= x_[t];
    for (int j = 0; j < m; ++j) v *= std::conj(x_[t]);
    y[t] = v;
  }
  return lags_.emplace(key, std::move(y)).first->second;
}

cplx CumulantEstimator::moment(int n, int m, int k) {
  const auto key = std::make_tuple(n, m, k);
  if (auto it = cache_.find(key); it != cache_.end()) return it->second;
  const double alpha = (n - 2 * m) * f0_ + static_cast<double>(k) / T0_;
  cplx v = dft_bin(lag_product(n, m), alpha);
  cache_.emplace(key, v);
  return v;
}

cplx CumulantEstimator::cumulant(const CycleSlot& slot) {
  const auto& parts = set_partitions(slot.n);
  cplx total(0.0, 0.0);
  for (const auto& part : parts) {
    bool has_singleton = false;
    for (const auto& b : part.blocks)
      if (b.size() == 1) { has_singleton = true; break; }
    if (has_singleton) continue;  // first-order moments are zero for these alphabets

    // block orders: index i conjugated iff i >= n-m
    const std::size_t p = part.blocks.size();
    std::vector<int> bn(p), bm(p);
    for (std::size_t j = 0; j < p; ++j) {
      bn[j] = static_cast<int>(part.blocks[j].size());
      int cm = 0;
      for (int idx : part.blocks[j])
        if (idx >= slot.n - slot.m) ++cm;
      bm[j] = cm;
    }

    // Every block CF is (bn-2bm) f0 + k_j/T0; the f0 multiples of the blocks
    // always sum to (n-2m) f0, so matching the slot CF reduces to
    // sum(k_j) == slot.k over |k_j| <= kmax.
    cplx acc(0.0, 0.0);
    std::vector<int> ks(p, 0);
    auto recurse = [&](auto&& self, std::size_t j, int ksum) -> void {
      if (j == p) {
        if (ksum == slot.k) {
          cplx prod(1.0, 0.0);
          for (std::size_t b = 0; b < p; ++b) prod *= moment(bn[b], bm[b], ks[b]);
          acc += prod;
        }
        return;
      }
      const int remain = static_cast<int>(p - 1 - j) * kmax_;
      for (int k = -kmax_; k <= kmax_; ++k) {
        if (std::abs(slot.k - ksum - k) > remain) continue;
        ks[j] = k;
        self(self, j + 1, ksum + k);
      }
    };
    recurse(recurse, 0, 0);
    total += part.h * acc;
  }
  // AWGN is Gaussian: its cumulants of order > 2 vanish, and combining raw
  // moments of x cancels every noise cross term exactly. Only the emitted
  // (2,1,0) slot still carries sigma^2, so compensate it here, at top level.
  if (slot.n == 2 && slot.m == 1 && slot.k == 0) total -= noise_power_;
  return total;
}

cplx cyclic_cumulant(std::span<const cplx> x, const CycleSlot& slot, double f0,
                     double T0, int k_lower, double noise_power) {
  CumulantEstimator est(x, f0, T0, k_lower, noise_power);
  return est.cumulant(slot);
}

cplx alphabet_cumulant(ModulationScheme scheme, MomentOrder order) {
  if (scheme == ModulationScheme::MSK || scheme == ModulationScheme::DQPSK_PI4)
    throw std::invalid_argument("alphabet_cumulant: scheme has non-i.i.d. symbols");
  const auto pts = siggen::alphabet(scheme);

  auto mu = [&](int n, int m) {
    cplx acc(0.0, 0.0);
    for (const auto& s : pts) {
      cplx v(1.0, 0.0);
      for (int j = 0; j < n - m; ++j) v *= s;
      for (int j = 0; j < m; ++j) v *= std::conj(s);
      acc += v;
    }
    return acc / static_cast<double>(pts.size());
  };

  const auto parts = make_partitions(order.n);
  cplx total(0.0, 0.0);
  for (const auto& part : parts) {
    cplx prod(1.0, 0.0);
    for (const auto& b : part.blocks) {
      int cm = 0;
      for (int idx : b)
        if (idx >= order.n - order.m) ++cm;
      prod *= mu(static_cast<int>(b.size()), cm);
    }
    total += part.h * prod;
  }
  return total;
}

cplx theoretical_cc(ModulationScheme scheme, int n, int m, int k, double T0,
                    double beta, double f0, PulseKind pulse) {
  (void)f0;  // the CC magnitude at alpha=(n-2m)f0 + k/T0 does not depend on f0
  const cplx c = alphabet_cumulant(scheme, {n, m});
  if (std::abs(c) == 0.0) return {0.0, 0.0};

  // Pulse sampled at unit rate, scaled so sum(p^2) = T0 (unit signal power);
  // matches the expectation of the estimator on sampled data.
  cplx integral(0.0, 0.0);
  if (pulse == PulseKind::Rect) {
    const int iT0 = static_cast<int>(std::lround(T0));
    for (int u = 0; u < iT0; ++u)
      integral += std::polar(1.0, -2.0 * kPi * k * static_cast<double>(u) / T0);
  } else {
    const int span = 32;
    const int half = static_cast<int>(std::ceil(span * T0 / 2.0));
    double e = 0.0;
    std::vector<double> p(static_cast<std::size_t>(2 * half + 1));
    for (int u = -half; u <= half; ++u) {
      const double v = siggen::srrc_pulse(beta, T0, static_cast<double>(u));
      p[static_cast<std::size_t>(u + half)] = v;
      e += v * v;
    }
    const double scale = std::sqrt(T0 / e);
    for (int u = -half; u <= half; ++u) {
      const double v = p[static_cast<std::size_t>(u + half)] * scale;
      integral += std::pow(v, n) *
                  std::polar(1.0, -2.0 * kPi * k * static_cast<double>(u) / T0);
    }
  }
  return c * integral / T0;
}

namespace {

// Band-of-interest prefilter: an SRRC signal occupies |f - f0| <= (1+beta)/(2 T0)
// <= 1/T0, so everything past ~1.4/T0 is pure noise. Removing it does not move
// any cumulant expectation (filtered Gaussian noise still cancels in the
// combination; the signal band sees unit gain and linear phase), it only cuts
// the estimator variance of the higher-order lag products. Returns the valid
// (transient-free) region and scales noise_power by the filter's noise gain.
cvec boi_filter(std::span<const cplx> x, double f0, double T0,
                double& noise_power) {
  const double pass = 1.0 / T0;
  const double stop = 1.4 / T0;
  cvec raw(x.begin(), x.end());
  if (stop >= 0.5) return raw;  // band already fills Nyquist
  std::size_t L = static_cast<std::size_t>(std::ceil(3.3 / (stop - pass)));
  L |= 1;  // odd, symmetric taps -> linear phase
  if (x.size() < 4 * L) return raw;  // too short to spend samples on edges
  const double fc = 0.5 * (pass + stop);
  const std::size_t M = L / 2;
  const auto win = hamming_window(L);
  std::vector<cplx> h(L);
  double gain = 0.0, ngain = 0.0;
  for (std::size_t k = 0; k < L; ++k) {
    const double t = static_cast<double>(k) - static_cast<double>(M);
    const double arg = 2.0 * kPi * fc * t;
    const double lp = (t == 0.0 ? 2.0 * fc : std::sin(arg) / (kPi * t)) * win[k];
    h[k] = lp * std::polar(1.0, 2.0 * kPi * f0 * t);  // shift up to the carrier
    gain += lp;
    ngain += lp * lp;
  }
  // unit gain at the band center; noise power scales by sum |h|^2 / gain^2
  noise_power *= ngain / (gain * gain);
  cvec y(x.size() - L + 1);
  for (std::size_t t = 0; t < y.size(); ++t) {
    cplx acc(0.0, 0.0);
    for (std::size_t k = 0; k < L; ++k) acc += h[k] * x[t + k];
    y[t] = acc / gain;
  }
  return y;
}

}  // namespace

CCFeatureVector extract_features(std::span<const cplx> x, double f0, double T0,
                                 double noise_power, double signal_power) {
  if (signal_power <= 0.0)
    throw std::invalid_argument("extract_features: signal power estimate <= 0");
  const auto pat = cf_pattern(f0, T0);
  const cvec xf = boi_filter(x, f0, T0, noise_power);
  CumulantEstimator est(xf, f0, T0, pat.kmax, noise_power);
  CCFeatureVector fv;
  for (std::size_t i = 0; i < pat.slots.size(); ++i) {
    const auto& slot = pat.slots[i];
    const cplx c = est.cumulant(slot);
    const double w = std::pow(std::abs(c), 2.0 / slot.n);
    const double v = w / signal_power;
    if (!std::isfinite(v))
      throw std::runtime_error("extract_features: non-finite value at slot " +
                               std::to_string(i));
    fv.values[i] = static_cast<float>(v);
  }
  return fv;
}

}  // namespace ccmod::cspcore
