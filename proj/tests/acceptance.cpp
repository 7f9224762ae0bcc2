// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits nonzero if any hard criterion fails. Heavy artifacts (datasets,
// features, trained checkpoints) are cached under ./acceptance_work so a
// rerun after an unrelated failure picks up where it left off.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "ccmod/blindest.hpp"
#include "ccmod/cspcore.hpp"
#include "ccmod/nn.hpp"
#include "ccmod/pipeline.hpp"
#include "ccmod/siggen.hpp"

using namespace ccmod;
using siggen::ModulationScheme;
namespace fsys = std::filesystem;

namespace {

int failures = 0;

void report(int crit, bool pass, const std::string& detail, bool hard = true) {
  std::printf("[criterion %d] %s %s\n", crit,
              pass ? "PASS" : (hard ? "FAIL" : "WARN"), detail.c_str());
  std::fflush(stdout);
  if (!pass && hard) ++failures;
}

double now_s() {
  return std::chrono::duration<double>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

cvec make_signal(ModulationScheme s, double T0, double beta, double f0,
                 double snr_db, std::size_t len, std::uint64_t seed) {
  siggen::SignalMeta m;
  m.scheme = s;
  m.T0 = T0;
  m.beta = beta;
  m.f0 = f0;
  m.snr_inband_db = snr_db;
  m.length = len;
  m.seed = seed;
  return siggen::synthesize(m);
}

constexpr double kInf = std::numeric_limits<double>::infinity();

// ---- criterion 1: full 165-slot extraction under a second -----------------
void criterion1() {
  const auto x =
      make_signal(ModulationScheme::QAM16, 10.0, 0.35, 0.0005, 9.0, 32768, 1);
  const double t0 = now_s();
  const auto f = cspcore::extract_features(x, 0.0005, 10.0, 0.0, 1.0);
  const double dt = now_s() - t0;
  char buf[128];
  std::snprintf(buf, sizeof buf, "165-slot extraction: %.3f s (limit 1.0)", dt);
  report(1, f.values.size() == 165 && dt < 1.0, buf);
}

// ---- criterion 2: estimates match the analytic oracle ---------------------
void criterion2() {
  const ModulationScheme schemes[] = {ModulationScheme::BPSK,
                                      ModulationScheme::QPSK,
                                      ModulationScheme::QAM16};
  double worst = 0;
  int checked = 0;
  bool ok = true;
  // single-realization n=6 estimates fluctuate by ~0.01-0.08 absolute at
  // T=65536; the criterion targets estimator correctness, so average the
  // complex estimates coherently over independent symbol streams (noiseless,
  // zero phase: the cumulant phase is deterministic)
  const int reps = 100;
  const auto pat = cspcore::cf_pattern(0.0, 10.0);
  for (const auto s : schemes) {
    std::vector<cplx> acc(pat.slots.size(), cplx(0, 0));
    for (int r = 0; r < reps; ++r) {
      const auto x = make_signal(s, 10.0, 0.35, 0.0, kInf, 65536,
                                 9000 + static_cast<std::uint64_t>(r));
      cspcore::CumulantEstimator est(x, 0.0, 10.0);
      for (std::size_t i = 0; i < pat.slots.size(); ++i)
        acc[i] += est.cumulant(pat.slots[i]);
    }
    for (std::size_t i = 0; i < pat.slots.size(); ++i) {
      const auto& slot = pat.slots[i];
      const cplx th = cspcore::theoretical_cc(s, slot.n, slot.m, slot.k, 10.0,
                                              0.35, 0.0);
      if (std::abs(th) <= 0.05) continue;
      const double rel =
          std::abs(acc[i] / static_cast<double>(reps) - th) / std::abs(th);
      worst = std::max(worst, rel);
      ++checked;
      if (rel >= 0.05) ok = false;
    }
  }
  char buf[160];
  std::snprintf(buf, sizeof buf,
                "BPSK/QPSK/QAM16 vs analytic values: %d slots checked, "
                "worst rel err %.4f (limit 0.05)",
                checked, worst);
  report(2, ok && checked > 30, buf);
}

// ---- criterion 3: Gaussian input leaves higher orders empty ---------------
void criterion3() {
  const std::size_t T = 65536;
  const double rt = std::sqrt(static_cast<double>(T));
  const double thr4 = 10.0 * std::sqrt(24.0) / rt;
  const double thr6 = 10.0 * std::sqrt(720.0) / rt;
  int clean = 0;
  const int trials = 100;
  const auto pat = cspcore::cf_pattern(0.001, 10.0);
  for (int trial = 0; trial < trials; ++trial) {
    std::mt19937_64 rng(300 + static_cast<std::uint64_t>(trial));
    std::normal_distribution<double> nd(0.0, std::sqrt(0.5));
    cvec x(T);
    for (auto& v : x) v = cplx(nd(rng), nd(rng));
    cspcore::CumulantEstimator est(x, 0.001, 10.0);
    bool quiet = true;
    for (const auto& s : pat.slots) {
      if (s.n < 4) continue;
      const double c = std::abs(est.cumulant(s));
      if (c >= (s.n == 4 ? thr4 : thr6)) quiet = false;
    }
    if (quiet) ++clean;
  }
  char buf[160];
  std::snprintf(buf, sizeof buf,
                "Gaussian n>=4 below order-matched floor in %d/%d trials "
                "(need 99)",
                clean, trials);
  report(3, clean >= 99, buf);
}

// ---- criterion 4: feature vector invariant to the carrier offset ----------
void criterion4() {
  std::mt19937_64 top(2024);
  double worst = 0;
  const int pairs = 50;
  bool ok = true;
  for (int p = 0; p < pairs; ++p) {
    siggen::SignalMeta m;
    m.scheme = static_cast<ModulationScheme>(p % 8);
    m.T0 = 2.0 + 20.0 * static_cast<double>(top() % 1000) / 1000.0;
    m.beta = 0.1 + 0.9 * static_cast<double>(top() % 1000) / 1000.0;
    if (m.T0 < 1 + m.beta) m.T0 = 1 + m.beta + 0.5;
    m.snr_inband_db = kInf;
    m.length = 32768;
    m.seed = top();
    siggen::SignalMeta m1 = m, m2 = m;
    m1.f0 = 0.0005;
    m2.f0 = 0.003;
    const auto f1 = cspcore::extract_features(siggen::synthesize(m1), m1.f0,
                                              m1.T0, 0.0, 1.0);
    const auto f2 = cspcore::extract_features(siggen::synthesize(m2), m2.f0,
                                              m2.T0, 0.0, 1.0);
    double num = 0, den = 0;
    for (int i = 0; i < 165; ++i) {
      const double d = f1.values[static_cast<std::size_t>(i)] -
                       f2.values[static_cast<std::size_t>(i)];
      num += d * d;
      den += static_cast<double>(f1.values[static_cast<std::size_t>(i)]) *
             f1.values[static_cast<std::size_t>(i)];
    }
    const double rel = std::sqrt(num / den);
    worst = std::max(worst, rel);
    if (rel >= 0.02) ok = false;
  }
  char buf[160];
  std::snprintf(buf, sizeof buf,
                "CFO shift invariance over %d pairs: worst RMS rel diff %.5f "
                "(limit 0.02)",
                pairs, worst);
  report(4, ok, buf);
}

// ---- criterion 5: blind chain on random signals at SNR >= 9 dB ------------
void criterion5() {
  std::mt19937_64 rng(12345);
  std::uniform_real_distribution<double> u01(0, 1);
  const int n = 200;
  int ok = 0;
  for (int i = 0; i < n; ++i) {
    siggen::SignalMeta m;
    m.scheme = static_cast<ModulationScheme>(i % 8);
    m.beta = 0.1 + 0.9 * u01(rng);
    do { m.T0 = 1.0 + 22.0 * u01(rng); } while (m.T0 < 1.0 + m.beta);
    m.f0 = -0.001 + 0.002 * u01(rng);
    m.snr_inband_db = 9 + 3 * u01(rng);
    m.phase = 2 * std::numbers::pi * u01(rng);
    m.seed = 5000 + static_cast<std::uint64_t>(i);
    m.length = 32768;
    const auto x = siggen::synthesize(m);
    try {
      const auto est = blindest::estimate_all(x);
      if (std::abs(est.T0_hat - m.T0) / m.T0 < 0.02 && !est.cfo_fallback &&
          std::abs(est.f0_hat - m.f0) < 1e-4)
        ++ok;
    } catch (const std::exception&) {
    }
  }
  char buf[128];
  std::snprintf(buf, sizeof buf,
                "blind rate+CFO joint success %d/%d (need 180)", ok, n);
  report(5, ok >= 180, buf);
}

// ---- criterion 6: network layouts match the published tables --------------
void criterion6() {
  using nn::Shape;
  bool ok = true;
  std::string detail = "capsule + cnn shape tables exact";
  const auto cap = nn::build_capsule_net();
  const auto cs = nn::propagate_shapes(cap);
  auto expect = [&](const nn::NetworkSpec& spec, const std::vector<Shape>& sh,
                    const std::string& name, Shape want) {
    for (std::size_t i = 0; i < spec.nodes.size(); ++i)
      if (spec.nodes[i].name == name) {
        if (!(sh[i] == want)) {
          ok = false;
          detail = "mismatch at " + name;
        }
        return;
      }
    ok = false;
    detail = "missing node " + name;
  };
  if (!(cap.input == Shape{11, 15, 1})) ok = false;
  expect(cap, cs, "stem_conv", {11, 8, 56});
  for (int b = 0; b < 8; ++b) {
    const std::string p = "b" + std::to_string(b) + "_";
    expect(cap, cs, p + "conv1", {11, 4, 56});
    expect(cap, cs, p + "conv2", {11, 2, 72});
    expect(cap, cs, p + "fc", {1, 1, 7});
    expect(cap, cs, p + "point_fc", {1, 1, 1});
  }
  if (!(cs.back() == Shape{1, 1, 8})) ok = false;

  const auto cnn = nn::build_cnn();
  const auto ns = nn::propagate_shapes(cnn);
  if (!(cnn.input == Shape{165, 1, 1})) ok = false;
  const int filt[5] = {16, 24, 32, 48, 64};
  const int len[6] = {165, 82, 41, 20, 10, 5};
  for (int b = 0; b < 5; ++b) {
    const std::string p = "cmp" + std::to_string(b + 1) + "_";
    expect(cnn, ns, p + "conv", {len[b], 1, filt[b]});
    expect(cnn, ns, p + "pool", {len[b + 1], 1, filt[b]});
  }
  expect(cnn, ns, "cap_conv", {5, 1, 96});
  expect(cnn, ns, "cap_pool", {1, 1, 96});
  if (!(ns.back() == Shape{1, 1, 8})) ok = false;
  report(6, ok, detail);
}

// ---- criterion 7: analytic gradients agree with finite differences --------
double spot_gradcheck(const nn::NetworkSpec& spec, int coords, int batch,
                      std::uint64_t seed) {
  nn::Network<double> net(spec, seed);
  std::mt19937_64 rng(seed + 1);
  std::normal_distribution<double> nd(0.0, 1.0);
  Eigen::MatrixXd x(spec.input.size(), batch);
  for (int i = 0; i < x.rows(); ++i)
    for (int j = 0; j < x.cols(); ++j) x(i, j) = std::abs(nd(rng));
  std::vector<int> y(static_cast<std::size_t>(batch));
  for (int j = 0; j < batch; ++j)
    y[static_cast<std::size_t>(j)] = j % spec.classes;

  const auto p = net.forward(x, true);
  Eigen::MatrixXd dlogits = p;
  for (int j = 0; j < batch; ++j)
    dlogits(y[static_cast<std::size_t>(j)], j) -= 1.0;
  dlogits /= static_cast<double>(batch);
  net.backward(dlogits);
  const auto g = net.get_gradients();
  auto theta = net.get_parameters();

  auto loss = [&] {
    const auto q = net.forward(x, true);
    double l = 0;
    for (int j = 0; j < batch; ++j)
      l -= std::log(q(y[static_cast<std::size_t>(j)], j));
    return l / batch;
  };
  const double h = 1e-6;
  double worst = 0;
  for (int t = 0; t < coords; ++t) {
    const std::size_t i =
        (static_cast<std::size_t>(t) * theta.size()) / static_cast<std::size_t>(coords);
    const double save = theta[i];
    theta[i] = save + h;
    net.set_parameters(theta);
    const double lp = loss();
    theta[i] = save - h;
    net.set_parameters(theta);
    const double lm = loss();
    theta[i] = save;
    const double num = (lp - lm) / (2 * h);
    worst = std::max(worst, std::abs(num - g[i]) /
                                std::max(1e-8, std::abs(num) + std::abs(g[i])));
  }
  net.set_parameters(theta);
  return worst;
}

void criterion7() {
  const double wcap = spot_gradcheck(nn::build_capsule_net(), 24, 3, 7);
  const double wcnn = spot_gradcheck(nn::build_cnn(), 24, 3, 9);
  char buf[160];
  std::snprintf(buf, sizeof buf,
                "64-bit gradient spot checks: capsule worst rel %.2e, cnn "
                "worst rel %.2e (limit 1e-4)",
                wcap, wcnn);
  report(7, wcap < 1e-4 && wcnn < 1e-4, buf);
}

// ---- criteria 8/9: desk-scale training runs -------------------------------
struct Workspace {
  fsys::path root = "acceptance_work";

  fsys::path features(const std::string& cfg_name) {
    const auto dir = root / cfg_name;
    const auto feat = dir / "features.bin";
    if (fsys::exists(feat)) return feat;
    auto cfg = *siggen::builtin_config(cfg_name);
    const auto ds_dir = dir / "dataset";
    std::printf("  [setup] generating %s (%zu/class x 8)...\n",
                cfg_name.c_str(), cfg.signals_per_class);
    std::fflush(stdout);
    pipeline::generate_dataset(cfg, cfg_name == "cfg2018" ? 1000 : 2000,
                               ds_dir, 1);
    std::printf("  [setup] extracting oracle features for %s...\n",
                cfg_name.c_str());
    std::fflush(stdout);
    pipeline::extract_dataset_features(ds_dir, cspcore::FeatureMode::Oracle,
                                       dir, 1);
    fsys::remove(ds_dir / "signals.f32");  // 2 GB per config; features suffice
    return feat;
  }

  // run (or resume) one experiment, persisting the fresh-training wall time
  pipeline::Report run(const std::string& tag, const std::string& net,
                       std::uint64_t seed, bool with_cross,
                       double* train_seconds) {
    pipeline::ExperimentPlan plan;
    plan.train_config = "cfg2018";
    plan.net = net;
    plan.seed = seed;
    pipeline::ExperimentInputs in;
    in.train_features = features("cfg2018");
    if (with_cross) in.cross.emplace_back("cfg2022", features("cfg2022"));
    const auto out = root / tag;
    const auto time_file = out / "train_seconds.txt";
    const bool fresh =
        !fsys::exists(out / ("checkpoint_" + net + "_cfg2018.bin"));
    const double t0 = now_s();
    const auto rep = pipeline::run_experiment(plan, in, out);
    if (fresh) {
      std::ofstream(time_file) << (now_s() - t0) << "\n";
    }
    if (train_seconds) {
      *train_seconds = 1e9;
      std::ifstream tf(time_file);
      tf >> *train_seconds;
    }
    return rep;
  }
};

void criteria_8_9(Workspace& ws) {
  // 8: capsule on cfg2018 oracle features; self-accuracy, cross-config gap,
  // wall-clock budget
  double cap0_seconds = 0;
  const auto cap0 = ws.run("run_cap_s0", "cap", 0, true, &cap0_seconds);
  {
    const double gap = cap0.gap(0);
    char buf[200];
    std::snprintf(buf, sizeof buf,
                  "capsule self P_CC %.4f (need >=0.85), cfg2022 gap %+.4f "
                  "(|gap| <= 0.05), train %.0f s (limit 3600)",
                  cap0.self.eval.pcc, gap, cap0_seconds);
    report(8, cap0.self.eval.pcc >= 0.85 && std::abs(gap) <= 0.05 &&
                  cap0_seconds <= 3600.0,
           buf);
  }

  // 9 (soft): capsule vs cnn over three seeds
  double cap_sum = cap0.self.eval.pcc, cnn_sum = 0;
  for (std::uint64_t s : {1ull, 2ull})
    cap_sum += ws.run("run_cap_s" + std::to_string(s), "cap", s, false, nullptr)
                   .self.eval.pcc;
  for (std::uint64_t s : {0ull, 1ull, 2ull})
    cnn_sum += ws.run("run_cnn_s" + std::to_string(s), "cnn", s, false, nullptr)
                   .self.eval.pcc;
  const double cap_mean = cap_sum / 3, cnn_mean = cnn_sum / 3;
  char buf[160];
  std::snprintf(buf, sizeof buf,
                "3-seed mean P_CC: capsule %.4f vs cnn %.4f (soft bar: "
                "capsule >= cnn - 0.01)",
                cap_mean, cnn_mean);
  report(9, cap_mean >= cnn_mean - 0.01, buf, /*hard=*/false);
}

// ---- criterion 10: reproducibility ----------------------------------------
std::string file_bytes(const fsys::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(f)),
                     std::istreambuf_iterator<char>());
}

void criterion10(Workspace& ws) {
  auto cfg = siggen::cfg2018();
  cfg.name = "repro";
  cfg.signals_per_class = 4;
  cfg.length = 4096;
  const auto d1 = ws.root / "repro1";
  const auto d2 = ws.root / "repro2";
  fsys::remove_all(d1);
  fsys::remove_all(d2);
  pipeline::generate_dataset(cfg, 77, d1, 1);
  pipeline::generate_dataset(cfg, 77, d2, 3);
  const bool bytes_ok =
      file_bytes(d1 / "signals.f32") == file_bytes(d2 / "signals.f32") &&
      file_bytes(d1 / "meta.jsonl") == file_bytes(d2 / "meta.jsonl");

  // 64-bit training determinism on a fixed random feature set
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Eigen::MatrixXf raw(165, 256);
  nn::FeatureSet fs;
  fs.labels.resize(256);
  fs.snr_db.assign(256, 0.0f);
  for (int j = 0; j < 256; ++j) {
    for (int i = 0; i < 165; ++i) raw(i, j) = u(rng);
    fs.labels[static_cast<std::size_t>(j)] = static_cast<std::uint8_t>(j % 8);
  }
  fs.x = nn::cnn_input(raw);
  nn::TrainOptions opt;
  opt.max_epochs = 3;
  opt.batch = 64;
  opt.seed = 11;
  auto run = [&] {
    nn::Network<double> net(nn::build_cnn(), 8);
    return net.train(fs, fs, opt);
  };
  const auto h1 = run(), h2 = run();
  bool curves_ok = h1.size() == h2.size();
  for (std::size_t i = 0; curves_ok && i < h1.size(); ++i)
    curves_ok = h1[i].train_loss == h2[i].train_loss &&
                h1[i].val_accuracy == h2[i].val_accuracy;

  std::string detail = std::string("dataset bytes ") +
                       (bytes_ok ? "identical" : "DIFFER") +
                       " across seeds/jobs; 64-bit loss curves " +
                       (curves_ok ? "bit-identical" : "DIFFER");
  report(10, bytes_ok && curves_ok, detail);
}

}  // namespace

int main() {
  std::printf("acceptance run (work dir: acceptance_work)\n");
  criterion1();
  criterion2();
  criterion3();
  criterion4();
  criterion5();
  criterion6();
  criterion7();
  Workspace ws;
  fsys::create_directories(ws.root);
  criteria_8_9(ws);
  criterion10(ws);
  if (failures == 0)
    std::printf("all hard criteria passed\n");
  else
    std::printf("%d hard criterion failure(s)\n", failures);
  return failures == 0 ? 0 : 1;
}
