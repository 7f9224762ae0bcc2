#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "ccmod/dsp.hpp"
#include "ccmod/siggen.hpp"

namespace ccmod::cspcore {

using siggen::ModulationScheme;

struct MomentOrder {
  int n = 2;  // total order, 1..6
  int m = 0;  // conjugated factors (the last m of the n)
};

struct CycleSlot {
  int n, m, k;
  double alpha;  // (n-2m)*f0 + k/T0
};

inline constexpr int kMaxHarmonic = 5;
inline constexpr int kFeatureCount = 165;  // 15 (n,m) pairs x 11 k values

// The 15 (n,m) pairs in fixed order (2,0)(2,1)(2,2)(4,0)..(4,4)(6,0)..(6,6).
const std::vector<MomentOrder>& order_pairs();

struct CyclePattern {
  double f0 = 0.0;
  double T0 = 0.0;
  int kmax = kMaxHarmonic;
  std::vector<CycleSlot> slots;  // (n,m)-major, k from -kmax..+kmax
};

CyclePattern cf_pattern(double f0, double T0, int kmax = kMaxHarmonic);

// Finite-T estimate of the order-(n,m) cyclic temporal moment at tau=0:
// (1/T) sum_t x(t)^(n-m) conj(x(t))^m exp(-i 2 pi alpha t).
cplx cyclic_moment(std::span<const cplx> x, double alpha, MomentOrder order);

struct Partition {
  std::vector<std::vector<int>> blocks;  // 0-based indices
  double h;                              // (-1)^(p-1) (p-1)!
};

// All distinct set partitions of {1..n}; n in {2,4,6}.
const std::vector<Partition>& set_partitions(int n);

// Moment-to-cumulant combination machine for one signal at fixed (f0, T0).
// Caches every lower-order cyclic moment it touches; reusable across the
// 165 slots of a pattern. noise_power is subtracted from the (2,1) moment
// at alpha=0 before combination.
class CumulantEstimator {
 public:
  CumulantEstimator(std::span<const cplx> x, double f0, double T0,
                    int kmax = kMaxHarmonic, double noise_power = 0.0);

  cplx cumulant(const CycleSlot& slot);
  cplx moment(int n, int m, int k);  // cached R(n,m) at (n-2m)f0 + k/T0

 private:
  const cvec& lag_product(int n, int m);

  std::span<const cplx> x_;
  double f0_, T0_;
  int kmax_;
  double noise_power_;
  std::map<std::tuple<int, int, int>, cplx> cache_;
  std::map<std::pair<int, int>, cvec> lags_;
};

cplx cyclic_cumulant(std::span<const cplx> x, const CycleSlot& slot, double f0,
                     double T0, int k_lower = kMaxHarmonic, double noise_power = 0.0);

// Stationary alphabet cumulant by brute-force moment-to-cumulant combination
// over the unit-power constellation. i.i.d.-symbol schemes only.
cplx alphabet_cumulant(ModulationScheme scheme, MomentOrder order);

enum class PulseKind { Srrc, Rect };

// Analytic oracle for the cyclic cumulant of the single-signal model at
// alpha = (n-2m)f0 + k/T0, unit signal power, noiseless.
cplx theoretical_cc(ModulationScheme scheme, int n, int m, int k, double T0,
                    double beta, double f0, PulseKind pulse = PulseKind::Srrc);

enum class FeatureMode : std::uint8_t { Oracle = 0, Blind = 1 };

struct CCFeatureVector {
  std::array<float, kFeatureCount> values{};  // warped, power-normalized
  ModulationScheme label = ModulationScheme::BPSK;
  float snr_db = 0.0f;
  FeatureMode mode = FeatureMode::Oracle;
};

CCFeatureVector extract_features(std::span<const cplx> x, double f0, double T0,
                                 double noise_power, double signal_power);

}  // namespace ccmod::cspcore
