#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <vector>

#include "ccmod/nn.hpp"

using namespace ccmod::nn;

namespace {

// small all-kinds DAG for numerical gradient checks: conv stem, two branches
// (tanh / relu+maxpool+avgpool), concat, fc, softmax
NetworkSpec tiny_dag() {
  NetworkSpec s;
  s.input = {6, 5, 2};
  s.classes = 3;
  auto add = [&](LayerSpec spec, std::vector<int> in, std::string name) {
    s.nodes.push_back({spec, std::move(in), std::move(name)});
    return static_cast<int>(s.nodes.size()) - 1;
  };
  LayerSpec conv{LayerKind::Conv2d};
  conv.filters = 4;
  conv.kh = 3;
  conv.kw = 3;
  conv.pad = Padding::Same;
  conv.init = Init::He;
  const int c0 = add(conv, {-1}, "stem");
  const int b0 = add({LayerKind::BatchNorm}, {c0}, "stem_bn");

  const int t1 = add({LayerKind::Tanh}, {b0}, "a_tanh");
  LayerSpec fca{LayerKind::Fc};
  fca.units = 4;
  const int f1 = add(fca, {t1}, "a_fc");

  const int r2 = add({LayerKind::Relu}, {b0}, "b_relu");
  LayerSpec mp{LayerKind::MaxPool};
  mp.kh = 2;
  mp.kw = 1;
  mp.sh = 2;
  mp.sw = 1;
  const int m2 = add(mp, {r2}, "b_pool");
  const int a2 = add({LayerKind::AvgPool}, {m2}, "b_gap");
  LayerSpec fcb{LayerKind::Fc};
  fcb.units = 4;
  fcb.init = Init::He;
  const int f2 = add(fcb, {a2}, "b_fc");

  const int cc = add({LayerKind::Concat}, {f1, f2}, "concat");
  LayerSpec out{LayerKind::Fc};
  out.units = 3;
  const int fo = add(out, {cc}, "head");
  add({LayerKind::Softmax}, {fo}, "softmax");
  return s;
}

template <class Scalar>
double xent(Network<Scalar>& net,
            const typename Network<Scalar>::Matrix& x,
            const std::vector<int>& y) {
  const auto p = net.forward(x, true);
  double loss = 0;
  for (int j = 0; j < p.cols(); ++j)
    loss -= std::log(static_cast<double>(p(y[static_cast<std::size_t>(j)], j)));
  return loss / static_cast<double>(p.cols());
}

}  // namespace

TEST_CASE("propagate_shapes: capsule and cnn layouts are exact") {
  const auto cap = build_capsule_net();
  const auto cs = propagate_shapes(cap);
  REQUIRE(cap.input == Shape{11, 15, 1});
  // stem
  CHECK(cs[0] == Shape{11, 8, 56});
  // branch 0: conv1 -> 11x4x56, conv2 -> 11x2x72, fc 7, point fc 1
  bool saw_b_conv1 = false, saw_b_conv2 = false, saw_fc7 = false,
       saw_point = false;
  for (std::size_t i = 0; i < cap.nodes.size(); ++i) {
    const auto& n = cap.nodes[i];
    if (n.name == "b0_conv1") { CHECK(cs[i] == Shape{11, 4, 56}); saw_b_conv1 = true; }
    if (n.name == "b0_conv2") { CHECK(cs[i] == Shape{11, 2, 72}); saw_b_conv2 = true; }
    if (n.name == "b0_fc") { CHECK(cs[i] == Shape{1, 1, 7}); saw_fc7 = true; }
    if (n.name == "b0_point_fc") { CHECK(cs[i] == Shape{1, 1, 1}); saw_point = true; }
  }
  CHECK(saw_b_conv1);
  CHECK(saw_b_conv2);
  CHECK(saw_fc7);
  CHECK(saw_point);
  CHECK(cs.back() == Shape{1, 1, 8});

  const auto cnn = build_cnn();
  const auto ns = propagate_shapes(cnn);
  REQUIRE(cnn.input == Shape{165, 1, 1});
  const std::vector<std::pair<std::string, Shape>> expect = {
      {"cmp1_conv", {165, 1, 16}}, {"cmp1_pool", {82, 1, 16}},
      {"cmp2_conv", {82, 1, 24}},  {"cmp2_pool", {41, 1, 24}},
      {"cmp3_conv", {41, 1, 32}},  {"cmp3_pool", {20, 1, 32}},
      {"cmp4_conv", {20, 1, 48}},  {"cmp4_pool", {10, 1, 48}},
      {"cmp5_conv", {10, 1, 64}},  {"cmp5_pool", {5, 1, 64}},
      {"cap_conv", {5, 1, 96}},    {"cap_pool", {1, 1, 96}},
  };
  for (const auto& [name, sh] : expect) {
    bool found = false;
    for (std::size_t i = 0; i < cnn.nodes.size(); ++i)
      if (cnn.nodes[i].name == name) {
        CHECK(ns[i] == sh);
        found = true;
      }
    CHECK_MESSAGE(found, name);
  }
  CHECK(ns.back() == Shape{1, 1, 8});
}

TEST_CASE("propagate_shapes: error names the offending layer") {
  NetworkSpec s;
  s.input = {3, 3, 1};
  s.classes = 2;
  LayerSpec mp{LayerKind::MaxPool};
  mp.kh = 5;
  mp.kw = 5;
  mp.sh = 5;
  mp.sw = 5;
  s.nodes.push_back({mp, {-1}, "bigpool"});
  s.nodes.push_back({{LayerKind::Softmax}, {0}, "sm"});
  try {
    propagate_shapes(s);
    FAIL("expected throw");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("bigpool") != std::string::npos);
  }
}

TEST_CASE("forward: softmax columns sum to one; zero head is uniform") {
  auto spec = build_capsule_net();
  Network<float> net(spec, 1);
  Eigen::MatrixXf raw = Eigen::MatrixXf::Random(165, 5).cwiseAbs();
  const auto p = net.forward(capsule_input(raw), false);
  REQUIRE(p.rows() == 8);
  REQUIRE(p.cols() == 5);
  for (int j = 0; j < 5; ++j)
    CHECK(p.col(j).sum() == doctest::Approx(1.0f).epsilon(1e-5));

  // zeroing every parameter forces exactly uniform class probabilities
  Network<float> net0(spec, 1);
  auto flat = net0.get_parameters();
  for (auto& v : flat) v = 0.0f;
  net0.set_parameters(flat);
  const auto p0 = net0.forward(capsule_input(raw), false);
  for (int j = 0; j < p0.cols(); ++j)
    for (int i = 0; i < 8; ++i)
      CHECK(p0(i, j) == doctest::Approx(0.125f).epsilon(1e-5));
}

TEST_CASE("numerical gradient check across every layer kind") {
  const auto spec = tiny_dag();
  Network<double> net(spec, 7);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd(0.0, 1.0);
  Eigen::MatrixXd x(6 * 5 * 2, 4);
  for (int i = 0; i < x.rows(); ++i)
    for (int j = 0; j < x.cols(); ++j) x(i, j) = nd(rng);
  const std::vector<int> y = {0, 1, 2, 1};

  // analytic gradients
  const auto p = net.forward(x, true);
  Eigen::MatrixXd dlogits = p;
  for (int j = 0; j < 4; ++j) dlogits(y[static_cast<std::size_t>(j)], j) -= 1.0;
  dlogits /= 4.0;
  net.backward(dlogits);
  const auto g = net.get_gradients();
  auto theta = net.get_parameters();

  // 80 coordinates spread across the whole vector
  const double h = 1e-6;
  double worst = 0;
  for (std::size_t t = 0; t < 80; ++t) {
    const std::size_t i = (t * theta.size()) / 80;
    const double save = theta[i];
    theta[i] = save + h;
    net.set_parameters(theta);
    const double lp = xent(net, x, y);
    theta[i] = save - h;
    net.set_parameters(theta);
    const double lm = xent(net, x, y);
    theta[i] = save;
    const double num = (lp - lm) / (2 * h);
    const double rel = std::abs(num - g[i]) /
                       std::max(1e-8, std::abs(num) + std::abs(g[i]));
    worst = std::max(worst, rel);
  }
  net.set_parameters(theta);
  CHECK(worst < 1e-4);
}

TEST_CASE("batchnorm inference is batch-size independent") {
  auto spec = build_cnn();
  Network<float> net(spec, 5);
  Eigen::MatrixXf raw = Eigen::MatrixXf::Random(165, 128).cwiseAbs();
  // a few training steps to move the running stats off their init
  FeatureSet fs;
  fs.x = cnn_input(raw);
  fs.labels.assign(128, 0);
  for (std::size_t i = 0; i < 128; ++i)
    fs.labels[i] = static_cast<std::uint8_t>(i % 8);
  fs.snr_db.assign(128, 5.0f);
  TrainOptions opt;
  opt.max_epochs = 2;
  opt.batch = 32;
  net.train(fs, fs, opt);

  const auto full = net.forward(fs.x, false);
  for (int j : {0, 17, 127}) {
    const auto one = net.forward(fs.x.col(j), false);
    for (int i = 0; i < 8; ++i)
      CHECK(one(i, 0) == doctest::Approx(full(i, j)).epsilon(1e-5));
  }
}

TEST_CASE("head row permutation permutes class probabilities") {
  const auto spec = tiny_dag();
  Network<double> net(spec, 11);
  Eigen::MatrixXd x = Eigen::MatrixXd::Random(6 * 5 * 2, 3);
  const auto p = net.forward(x, false);

  // swap rows 0 and 2 of the head FC (weights and bias)
  auto theta = net.get_parameters();
  // the head FC is the penultimate node; locate its block from the back:
  // softmax has no params, head has units*(in+1). in = 8 (concat of two 4s).
  const std::size_t wb = theta.size() - (3 * 8 + 3);
  for (int c = 0; c < 8; ++c)
    std::swap(theta[wb + static_cast<std::size_t>(3 * c)],
              theta[wb + static_cast<std::size_t>(3 * c + 2)]);
  std::swap(theta[theta.size() - 3], theta[theta.size() - 1]);
  net.set_parameters(theta);
  const auto q = net.forward(x, false);
  for (int j = 0; j < 3; ++j) {
    CHECK(q(0, j) == doctest::Approx(p(2, j)).epsilon(1e-9));
    CHECK(q(2, j) == doctest::Approx(p(0, j)).epsilon(1e-9));
    CHECK(q(1, j) == doctest::Approx(p(1, j)).epsilon(1e-9));
  }
}

TEST_CASE("capsule branches feed disjoint logits") {
  auto spec = build_capsule_net();
  Network<double> net(spec, 13);
  Eigen::MatrixXd raw = Eigen::MatrixXd::Random(165, 2).cwiseAbs();
  Eigen::MatrixXd x(11 * 15, 2);
  {
    Eigen::MatrixXf rf = raw.cast<float>();
    x = capsule_input(rf).cast<double>();
  }
  const auto p = net.forward(x, false);

  // perturb branch 0's point FC weight; only logit 0 may change, so the
  // log-ratio of any two other classes is invariant
  auto theta = net.get_parameters();
  bool touched = false;
  // find node named b0_out and bump its weights via set_parameters round trip
  std::size_t off = 0;
  for (std::size_t i = 0; i < spec.nodes.size(); ++i) {
    const auto& n = spec.nodes[i];
    std::size_t nparams = 0;
    const auto sh = propagate_shapes(spec);
    const int in_size = n.inputs[0] == -1
                            ? spec.input.size()
                            : sh[static_cast<std::size_t>(n.inputs[0])].size();
    if (n.spec.kind == LayerKind::Fc)
      nparams = static_cast<std::size_t>(n.spec.units) *
                    static_cast<std::size_t>(in_size) +
                static_cast<std::size_t>(n.spec.units);
    else if (n.spec.kind == LayerKind::Conv2d)
      nparams = static_cast<std::size_t>(n.spec.filters) *
                    static_cast<std::size_t>(n.spec.kh * n.spec.kw) *
                    static_cast<std::size_t>(
                        n.inputs[0] == -1
                            ? spec.input.c
                            : sh[static_cast<std::size_t>(n.inputs[0])].c) +
                static_cast<std::size_t>(n.spec.filters);
    else if (n.spec.kind == LayerKind::BatchNorm)
      nparams = 2 * static_cast<std::size_t>(sh[i].c);
    if (n.name == "b0_point_fc") {
      for (std::size_t k = 0; k < nparams; ++k) theta[off + k] += 0.37;
      touched = true;
      break;
    }
    off += nparams;
  }
  REQUIRE(touched);
  net.set_parameters(theta);
  const auto q = net.forward(x, false);
  for (int j = 0; j < 2; ++j) {
    const double before = std::log(p(3, j)) - std::log(p(6, j));
    const double after = std::log(q(3, j)) - std::log(q(6, j));
    CHECK(after == doctest::Approx(before).epsilon(1e-6));
    CHECK(q(0, j) != doctest::Approx(p(0, j)).epsilon(1e-12));
  }
}

TEST_CASE("training solves a separable toy problem") {
  // class = argmax over 3 disjoint slot groups of the mean feature level
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<float> u(0.0f, 0.2f);
  const int n = 600;
  Eigen::MatrixXf raw(165, n);
  FeatureSet fs;
  fs.labels.resize(static_cast<std::size_t>(n));
  fs.snr_db.assign(static_cast<std::size_t>(n), 0.0f);
  for (int j = 0; j < n; ++j) {
    const int cls = j % 3;
    for (int i = 0; i < 165; ++i) raw(i, j) = u(rng);
    for (int i = cls * 55; i < (cls + 1) * 55; ++i) raw(i, j) += 1.0f;
    fs.labels[static_cast<std::size_t>(j)] = static_cast<std::uint8_t>(cls);
  }
  auto spec = build_cnn();
  Network<float> net(spec, 0);
  fs.x = cnn_input(raw);
  TrainOptions opt;
  opt.max_epochs = 20;
  opt.batch = 64;
  opt.lr = 2e-3;
  net.train(fs, fs, opt);
  const auto ev = net.evaluate(fs);
  CHECK(ev.pcc == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("training is bit-deterministic in double precision") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Eigen::MatrixXf raw(165, 256);
  FeatureSet fs;
  fs.labels.resize(256);
  fs.snr_db.assign(256, 0.0f);
  for (int j = 0; j < 256; ++j) {
    for (int i = 0; i < 165; ++i) raw(i, j) = u(rng);
    fs.labels[static_cast<std::size_t>(j)] = static_cast<std::uint8_t>(j % 8);
  }
  fs.x = cnn_input(raw);
  TrainOptions opt;
  opt.max_epochs = 3;
  opt.batch = 64;
  opt.seed = 9;

  auto run = [&] {
    Network<float> net(build_cnn(), 42);
    return net.train(fs, fs, opt);
  };
  const auto h1 = run(), h2 = run();
  REQUIRE(h1.size() == h2.size());
  for (std::size_t i = 0; i < h1.size(); ++i) {
    CHECK(h1[i].train_loss == h2[i].train_loss);  // bitwise
    CHECK(h1[i].val_accuracy == h2[i].val_accuracy);
  }
}

TEST_CASE("divergence raises TrainingDiverged carrying the last good state") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Eigen::MatrixXf raw(165, 64);
  FeatureSet fs;
  fs.labels.resize(64);
  fs.snr_db.assign(64, 0.0f);
  for (int j = 0; j < 64; ++j) {
    for (int i = 0; i < 165; ++i) raw(i, j) = u(rng);
    fs.labels[static_cast<std::size_t>(j)] = static_cast<std::uint8_t>(j % 8);
  }
  fs.x = cnn_input(raw);
  TrainOptions opt;
  opt.max_epochs = 5;
  opt.batch = 32;
  opt.lr = 1e38;  // overflows float32 params to inf -> NaN batch stats
  Network<float> net(build_cnn(), 3);
  try {
    net.train(fs, fs, opt);
    FAIL("expected divergence");
  } catch (const TrainingDiverged& e) {
    CHECK(!e.last_good.params.empty());
    CHECK(e.last_good.signature == build_cnn().signature());
  }
}

TEST_CASE("checkpoint roundtrip is bit-exact; bad magic rejected") {
  const auto dir = std::filesystem::temp_directory_path() / "ccmod_nn_test";
  std::filesystem::create_directories(dir);
  const auto path = (dir / "ck.bin").string();

  Network<float> net(build_capsule_net(), 21);
  std::vector<EpochStats> hist = {{1, 0.5, 0.25}, {2, 0.25, 0.5}};
  const auto ck = net.make_checkpoint(2, 0.5, hist, "rngstate");
  save_checkpoint(ck, path);
  const auto back = load_checkpoint(path);
  CHECK(back.signature == ck.signature);
  CHECK(back.epoch == 2);
  CHECK(back.val_accuracy == ck.val_accuracy);
  CHECK(back.rng_state == "rngstate");
  REQUIRE(back.params.size() == ck.params.size());
  for (std::size_t i = 0; i < ck.params.size(); ++i)
    CHECK(back.params[i] == ck.params[i]);  // bitwise float equality
  REQUIRE(back.history.size() == 2);
  CHECK(back.history[1].train_loss == 0.25);

  // restore into a differently-seeded network reproduces outputs exactly
  Network<float> other(build_capsule_net(), 99);
  other.restore(back);
  Eigen::MatrixXf raw = Eigen::MatrixXf::Random(165, 3).cwiseAbs();
  const auto x = capsule_input(raw);
  const auto pa = net.forward(x, false);
  const auto pb = other.forward(x, false);
  CHECK((pa - pb).cwiseAbs().maxCoeff() == 0.0f);

  // corrupt the magic
  {
    std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
    f.write("XXXX", 4);
  }
  CHECK_THROWS(load_checkpoint(path));
  std::filesystem::remove_all(dir);
}

TEST_CASE("evaluate: confusion bookkeeping and per-SNR bins") {
  // train a tiny perfect classifier then verify the counters
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<float> u(0.0f, 0.1f);
  Eigen::MatrixXf raw(165, 240);
  FeatureSet fs;
  fs.labels.resize(240);
  fs.snr_db.resize(240);
  for (int j = 0; j < 240; ++j) {
    const int cls = j % 3;
    for (int i = 0; i < 165; ++i) raw(i, j) = u(rng);
    for (int i = cls * 55; i < (cls + 1) * 55; ++i) raw(i, j) += 1.0f;
    fs.labels[static_cast<std::size_t>(j)] = static_cast<std::uint8_t>(cls);
    fs.snr_db[static_cast<std::size_t>(j)] = (j < 120) ? 2.3f : 7.9f;
  }
  fs.x = cnn_input(raw);
  Network<float> net(build_cnn(), 1);
  TrainOptions opt;
  opt.max_epochs = 15;
  opt.batch = 60;
  opt.lr = 2e-3;
  net.train(fs, fs, opt);
  const auto ev = net.evaluate(fs);
  REQUIRE(ev.confusion.size() == 8);
  std::int64_t total = 0, diag = 0;
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 8; ++j) {
      total += ev.confusion[i][j];
      if (i == j) diag += ev.confusion[i][j];
    }
  CHECK(total == 240);
  CHECK(ev.pcc == doctest::Approx(static_cast<double>(diag) / 240).epsilon(1e-12));
  REQUIRE(ev.per_snr.size() == 2);
  CHECK(ev.per_snr[0].lo_db == 2);
  CHECK(ev.per_snr[1].lo_db == 7);
  CHECK(ev.per_snr[0].total == 120);
  CHECK(ev.per_snr[1].total == 120);
}
