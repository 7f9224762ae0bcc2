#include "ccmod/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include "json.hpp"

namespace ccmod::nn {

namespace {

const char* kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Conv2d: return "conv2d";
    case LayerKind::BatchNorm: return "batchnorm";
    case LayerKind::Tanh: return "tanh";
    case LayerKind::Relu: return "relu";
    case LayerKind::MaxPool: return "maxpool";
    case LayerKind::AvgPool: return "avgpool";
    case LayerKind::Fc: return "fc";
    case LayerKind::Concat: return "concat";
    case LayerKind::Softmax: return "softmax";
  }
  return "?";
}

struct ConvGeom {
  int ho = 0, wo = 0;
  int pad_top = 0, pad_left = 0;
};

ConvGeom conv_geometry(const Shape& in, const LayerSpec& s,
                       const std::string& name) {
  ConvGeom g;
  if (s.pad == Padding::Same) {
    g.ho = (in.h + s.sh - 1) / s.sh;
    g.wo = (in.w + s.sw - 1) / s.sw;
    const int ph = std::max(0, (g.ho - 1) * s.sh + s.kh - in.h);
    const int pw = std::max(0, (g.wo - 1) * s.sw + s.kw - in.w);
    g.pad_top = ph / 2;
    g.pad_left = pw / 2;
  } else {
    if (in.h < s.kh || in.w < s.kw)
      throw std::invalid_argument("layer '" + name +
                                  "': kernel larger than valid input");
    g.ho = (in.h - s.kh) / s.sh + 1;
    g.wo = (in.w - s.kw) / s.sw + 1;
  }
  return g;
}

}  // namespace

std::string NetworkSpec::signature() const {
  std::ostringstream os;
  os << "in:" << input.h << "x" << input.w << "x" << input.c << ";";
  for (const auto& n : nodes) {
    os << kind_name(n.spec.kind);
    switch (n.spec.kind) {
      case LayerKind::Conv2d:
        os << n.spec.filters << "-" << n.spec.kh << "x" << n.spec.kw << "-s"
           << n.spec.sh << "x" << n.spec.sw
           << (n.spec.pad == Padding::Same ? "-same" : "-valid");
        break;
      case LayerKind::MaxPool:
        os << n.spec.kh << "x" << n.spec.kw << "-s" << n.spec.sh << "x"
           << n.spec.sw;
        break;
      case LayerKind::Fc:
        os << n.spec.units;
        break;
      default:
        break;
    }
    os << "(";
    for (std::size_t i = 0; i < n.inputs.size(); ++i)
      os << (i ? "," : "") << n.inputs[i];
    os << ");";
  }
  return os.str();
}

std::vector<Shape> propagate_shapes(const NetworkSpec& spec) {
  std::vector<Shape> out(spec.nodes.size());
  auto shape_of = [&](int idx) -> const Shape& {
    return idx < 0 ? spec.input : out[static_cast<std::size_t>(idx)];
  };
  for (std::size_t i = 0; i < spec.nodes.size(); ++i) {
    const Node& n = spec.nodes[i];
    const LayerSpec& s = n.spec;
    if (n.inputs.empty())
      throw std::invalid_argument("layer '" + n.name + "': no inputs");
    const Shape& in = shape_of(n.inputs[0]);
    switch (s.kind) {
      case LayerKind::Conv2d: {
        const ConvGeom g = conv_geometry(in, s, n.name);
        out[i] = {g.ho, g.wo, s.filters};
        break;
      }
      case LayerKind::MaxPool: {
        if (in.h < s.kh || in.w < s.kw)
          throw std::invalid_argument("layer '" + n.name +
                                      "': pool window exceeds input");
        out[i] = {(in.h - s.kh) / s.sh + 1, (in.w - s.kw) / s.sw + 1, in.c};
        break;
      }
      case LayerKind::AvgPool:
        out[i] = {1, 1, in.c};
        break;
      case LayerKind::Fc:
        out[i] = {1, 1, s.units};
        break;
      case LayerKind::Concat: {
        int c = 0;
        for (int src : n.inputs) {
          const Shape& sh = shape_of(src);
          if (sh.h != 1 || sh.w != 1)
            throw std::invalid_argument("layer '" + n.name +
                                        "': concat expects flattened inputs");
          c += sh.c;
        }
        out[i] = {1, 1, c};
        break;
      }
      case LayerKind::BatchNorm:
      case LayerKind::Tanh:
      case LayerKind::Relu:
      case LayerKind::Softmax:
        out[i] = in;
        break;
    }
  }
  return out;
}

NetworkSpec build_capsule_net() {
  NetworkSpec net;
  net.input = {11, 15, 1};
  net.classes = 8;
  auto add = [&](LayerSpec s, std::vector<int> in, std::string name) {
    net.nodes.push_back({s, std::move(in), std::move(name)});
    return static_cast<int>(net.nodes.size()) - 1;
  };
  LayerSpec conv{LayerKind::Conv2d};
  conv.filters = 56; conv.kh = 6; conv.kw = 4; conv.sh = 1; conv.sw = 2;
  conv.pad = Padding::Same; conv.init = Init::Glorot;
  int stem = add(conv, {-1}, "stem_conv");
  stem = add({LayerKind::BatchNorm}, {stem}, "stem_bn");
  stem = add({LayerKind::Tanh}, {stem}, "stem_tanh");

  std::vector<int> points;
  for (int b = 0; b < 8; ++b) {
    const std::string p = "b" + std::to_string(b) + "_";
    LayerSpec c1{LayerKind::Conv2d};
    c1.filters = 56; c1.kh = 4; c1.kw = 4; c1.sh = 1; c1.sw = 2;
    c1.pad = Padding::Same; c1.init = Init::Glorot;
    int t = add(c1, {stem}, p + "conv1");
    t = add({LayerKind::BatchNorm}, {t}, p + "bn1");
    t = add({LayerKind::Tanh}, {t}, p + "tanh1");
    LayerSpec c2{LayerKind::Conv2d};
    c2.filters = 72; c2.kh = 4; c2.kw = 6; c2.sh = 1; c2.sw = 2;
    c2.pad = Padding::Same; c2.init = Init::Glorot;
    t = add(c2, {t}, p + "conv2");
    t = add({LayerKind::BatchNorm}, {t}, p + "bn2");
    t = add({LayerKind::Tanh}, {t}, p + "tanh2");
    LayerSpec fc{LayerKind::Fc};
    fc.units = 7; fc.init = Init::He;
    t = add(fc, {t}, p + "fc");
    t = add({LayerKind::BatchNorm}, {t}, p + "fc_bn");
    t = add({LayerKind::Relu}, {t}, p + "relu");
    LayerSpec point{LayerKind::Fc};
    point.units = 1; point.init = Init::Glorot;
    t = add(point, {t}, p + "point_fc");
    points.push_back(t);
  }
  int cat = add({LayerKind::Concat}, points, "concat");
  add({LayerKind::Softmax}, {cat}, "softmax");
  return net;
}

NetworkSpec build_cnn() {
  NetworkSpec net;
  net.input = {165, 1, 1};
  net.classes = 8;
  auto add = [&](LayerSpec s, std::vector<int> in, std::string name) {
    net.nodes.push_back({s, std::move(in), std::move(name)});
    return static_cast<int>(net.nodes.size()) - 1;
  };
  int t = -1;
  const int filters[5] = {16, 24, 32, 48, 64};
  for (int blk = 0; blk < 5; ++blk) {
    const std::string p = "cmp" + std::to_string(blk + 1) + "_";
    LayerSpec c{LayerKind::Conv2d};
    c.filters = filters[blk]; c.kh = 23; c.kw = 1; c.sh = 1; c.sw = 1;
    c.pad = Padding::Same; c.init = Init::He;
    t = add(c, {t}, p + "conv");
    t = add({LayerKind::BatchNorm}, {t}, p + "bn");
    t = add({LayerKind::Relu}, {t}, p + "relu");
    LayerSpec mp{LayerKind::MaxPool};
    mp.kh = 2; mp.kw = 1; mp.sh = 2; mp.sw = 1; mp.pad = Padding::Valid;
    t = add(mp, {t}, p + "pool");
  }
  LayerSpec c{LayerKind::Conv2d};
  c.filters = 96; c.kh = 23; c.kw = 1; c.sh = 1; c.sw = 1;
  c.pad = Padding::Same; c.init = Init::He;
  t = add(c, {t}, "cap_conv");
  t = add({LayerKind::BatchNorm}, {t}, "cap_bn");
  t = add({LayerKind::Relu}, {t}, "cap_relu");
  t = add({LayerKind::AvgPool}, {t}, "cap_pool");
  LayerSpec fc{LayerKind::Fc};
  fc.units = 8; fc.init = Init::He;
  t = add(fc, {t}, "fc");
  add({LayerKind::Softmax}, {t}, "softmax");
  return net;
}

Eigen::MatrixXf capsule_input(const Eigen::MatrixXf& raw) {
  if (raw.rows() != 165)
    throw std::invalid_argument("capsule_input: expected 165 feature rows");
  Eigen::MatrixXf out(165, raw.cols());
  for (int p = 0; p < 15; ++p)
    for (int k = 0; k < 11; ++k)
      out.row(p + 15 * k) = raw.row(p * 11 + k);
  return out;
}

Eigen::MatrixXf cnn_input(const Eigen::MatrixXf& raw) {
  if (raw.rows() != 165)
    throw std::invalid_argument("cnn_input: expected 165 feature rows");
  return raw;
}

// ---------------------------------------------------------------------------

template <class Scalar>
struct Network<Scalar>::NodeState {
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  using Vector = Eigen::Vector<Scalar, Eigen::Dynamic>;

  // parameters
  Matrix W;            // conv: F x (kh*kw*Cin); fc: units x in
  Vector b;
  Vector gamma, beta, rmean, rvar;  // batchnorm (+ running stats)

  // gradients
  Matrix dW;
  Vector db, dgamma, dbeta;

  // adam first/second moments (trainable params only)
  Matrix mW, vW;
  Vector mb, vb, mgamma, vgamma, mbeta, vbeta;

  // forward caches
  Matrix out;
  Matrix cols;         // conv im2col
  Matrix xhat;         // bn normalized input
  Vector istd;         // bn 1/sqrt(var+eps)
  Vector bmean, bvar;  // bn batch stats used in the forward pass
  std::vector<std::int32_t> argmax;  // maxpool winners (input linear index)
  Matrix dout;         // accumulated output gradient

  ConvGeom geom;
  bool cached_training = false;
};

template <class Scalar>
Network<Scalar>::Network(NetworkSpec spec, std::uint64_t init_seed)
    : spec_(std::move(spec)), shapes_(propagate_shapes(spec_)) {
  states_.resize(spec_.nodes.size());
  std::mt19937_64 rng(init_seed);
  auto uniform = [&](double limit) {
    std::uniform_real_distribution<double> d(-limit, limit);
    return static_cast<Scalar>(d(rng));
  };
  for (std::size_t i = 0; i < spec_.nodes.size(); ++i) {
    const Node& n = spec_.nodes[i];
    const LayerSpec& s = n.spec;
    NodeState& st = states_[i];
    const Shape in =
        n.inputs[0] < 0 ? spec_.input : shapes_[static_cast<std::size_t>(n.inputs[0])];
    switch (s.kind) {
      case LayerKind::Conv2d: {
        const int k = s.kh * s.kw * in.c;
        const double fan_in = k;
        const double fan_out = static_cast<double>(s.kh) * s.kw * s.filters;
        const double limit = s.init == Init::He
                                 ? std::sqrt(6.0 / fan_in)
                                 : std::sqrt(6.0 / (fan_in + fan_out));
        st.W.resize(s.filters, k);
        for (int col = 0; col < st.W.cols(); ++col)
          for (int row = 0; row < st.W.rows(); ++row)
            st.W(row, col) = uniform(limit);
        st.b = NodeState::Vector::Zero(s.filters);
        st.geom = conv_geometry(in, s, n.name);
        break;
      }
      case LayerKind::Fc: {
        const int fan_in = in.size();
        const double limit = s.init == Init::He
                                 ? std::sqrt(6.0 / fan_in)
                                 : std::sqrt(6.0 / (fan_in + s.units));
        st.W.resize(s.units, fan_in);
        for (int col = 0; col < st.W.cols(); ++col)
          for (int row = 0; row < st.W.rows(); ++row)
            st.W(row, col) = uniform(limit);
        st.b = NodeState::Vector::Zero(s.units);
        break;
      }
      case LayerKind::BatchNorm: {
        st.gamma = NodeState::Vector::Ones(in.c);
        st.beta = NodeState::Vector::Zero(in.c);
        st.rmean = NodeState::Vector::Zero(in.c);
        st.rvar = NodeState::Vector::Ones(in.c);
        break;
      }
      default:
        break;
    }
  }
}

template <class Scalar>
Network<Scalar>::~Network() = default;
template <class Scalar>
Network<Scalar>::Network(Network&&) noexcept = default;
template <class Scalar>
Network<Scalar>& Network<Scalar>::operator=(Network&&) noexcept = default;

template <class Scalar>
typename Network<Scalar>::Matrix Network<Scalar>::forward(const Matrix& input,
                                                          bool training) {
  if (input.rows() != spec_.input.size())
    throw std::invalid_argument("forward: input rows != network input size");
  const auto B = input.cols();
  if (training) input_cache_ = input;
  for (std::size_t i = 0; i < spec_.nodes.size(); ++i) {
    const Node& n = spec_.nodes[i];
    const LayerSpec& s = n.spec;
    NodeState& st = states_[i];
    st.cached_training = training;
    auto act_of = [&](int idx) -> const Matrix& {
      return idx < 0 ? input : states_[static_cast<std::size_t>(idx)].out;
    };
    const Matrix& in = act_of(n.inputs[0]);
    const Shape ish =
        n.inputs[0] < 0 ? spec_.input : shapes_[static_cast<std::size_t>(n.inputs[0])];
    const Shape osh = shapes_[i];
    switch (s.kind) {
      case LayerKind::Conv2d: {
        const int K = s.kh * s.kw * ish.c;
        const int P = st.geom.ho * st.geom.wo;
        st.cols.resize(K, static_cast<Eigen::Index>(P) * B);
        for (Eigen::Index bb = 0; bb < B; ++bb) {
          const Scalar* src = in.col(bb).data();
          for (int oy = 0; oy < st.geom.ho; ++oy)
            for (int ox = 0; ox < st.geom.wo; ++ox) {
              Scalar* dst =
                  st.cols.col(static_cast<Eigen::Index>(ox + st.geom.wo * oy) +
                              static_cast<Eigen::Index>(P) * bb)
                      .data();
              for (int ky = 0; ky < s.kh; ++ky) {
                const int iy = oy * s.sh - st.geom.pad_top + ky;
                for (int kx = 0; kx < s.kw; ++kx) {
                  const int ix = ox * s.sw - st.geom.pad_left + kx;
                  Scalar* cell = dst + ish.c * (kx + s.kw * ky);
                  if (iy < 0 || iy >= ish.h || ix < 0 || ix >= ish.w) {
                    std::fill(cell, cell + ish.c, Scalar(0));
                  } else {
                    const Scalar* px = src + ish.c * (ix + ish.w * iy);
                    std::copy(px, px + ish.c, cell);
                  }
                }
              }
            }
        }
        Matrix prod = st.W * st.cols;  // F x (P*B)
        prod.colwise() += st.b;
        st.out.resize(osh.size(), B);
        for (Eigen::Index bb = 0; bb < B; ++bb)
          for (int p = 0; p < P; ++p)
            st.out.col(bb).segment(static_cast<Eigen::Index>(s.filters) * p,
                                   s.filters) =
                prod.col(static_cast<Eigen::Index>(p) +
                         static_cast<Eigen::Index>(P) * bb);
        if (!training) st.cols.resize(0, 0);
        break;
      }
      case LayerKind::BatchNorm: {
        const int C = ish.c;
        const Eigen::Index cols = in.size() / C;
        Eigen::Map<const Matrix> view(in.data(), C, cols);
        st.out.resize(in.rows(), in.cols());
        Eigen::Map<Matrix> oview(st.out.data(), C, cols);
        if (training) {
          st.bmean = view.rowwise().mean();
          Matrix centered = view.colwise() - st.bmean;
          st.bvar = centered.array().square().matrix().rowwise().mean();
          st.istd =
              (st.bvar.array() + static_cast<Scalar>(bn_eps_)).rsqrt().matrix();
          st.xhat = (centered.array().colwise() * st.istd.array()).matrix();
          oview = (st.xhat.array().colwise() * st.gamma.array()).matrix();
          oview.colwise() += st.beta;
          const Scalar mom = static_cast<Scalar>(bn_momentum_);
          st.rmean = mom * st.rmean + (Scalar(1) - mom) * st.bmean;
          st.rvar = mom * st.rvar + (Scalar(1) - mom) * st.bvar;
        } else {
          const typename NodeState::Vector scale =
              (st.gamma.array() *
               (st.rvar.array() + static_cast<Scalar>(bn_eps_)).rsqrt())
                  .matrix();
          const typename NodeState::Vector shift =
              st.beta - (st.rmean.array() * scale.array()).matrix();
          oview = (view.array().colwise() * scale.array()).matrix();
          oview.colwise() += shift;
        }
        break;
      }
      case LayerKind::Tanh:
        st.out = in.array().tanh().matrix();
        break;
      case LayerKind::Relu:
        st.out = in.cwiseMax(Scalar(0));
        break;
      case LayerKind::MaxPool: {
        const int C = ish.c;
        st.out.resize(osh.size(), B);
        st.argmax.assign(static_cast<std::size_t>(osh.size()) *
                             static_cast<std::size_t>(B),
                         0);
        for (Eigen::Index bb = 0; bb < B; ++bb) {
          const Scalar* src = in.col(bb).data();
          Scalar* dst = st.out.col(bb).data();
          for (int oy = 0; oy < osh.h; ++oy)
            for (int ox = 0; ox < osh.w; ++ox)
              for (int c = 0; c < C; ++c) {
                Scalar best = -std::numeric_limits<Scalar>::infinity();
                int best_idx = 0;
                for (int ky = 0; ky < s.kh; ++ky)
                  for (int kx = 0; kx < s.kw; ++kx) {
                    const int iy = oy * s.sh + ky;
                    const int ix = ox * s.sw + kx;
                    const int idx = c + C * (ix + ish.w * iy);
                    if (src[idx] > best) {
                      best = src[idx];
                      best_idx = idx;
                    }
                  }
                const int oidx = c + C * (ox + osh.w * oy);
                dst[oidx] = best;
                st.argmax[static_cast<std::size_t>(oidx) +
                          static_cast<std::size_t>(osh.size()) *
                              static_cast<std::size_t>(bb)] = best_idx;
              }
        }
        break;
      }
      case LayerKind::AvgPool: {
        const int C = ish.c;
        const int hw = ish.h * ish.w;
        st.out.resize(C, B);
        for (Eigen::Index bb = 0; bb < B; ++bb) {
          Eigen::Map<const Matrix> view(in.col(bb).data(), C, hw);
          st.out.col(bb) = view.rowwise().mean();
        }
        break;
      }
      case LayerKind::Fc:
        st.out = st.W * in;
        st.out.colwise() += st.b;
        break;
      case LayerKind::Concat: {
        st.out.resize(osh.size(), B);
        Eigen::Index off = 0;
        for (int src : n.inputs) {
          const Matrix& a = act_of(src);
          st.out.middleRows(off, a.rows()) = a;
          off += a.rows();
        }
        break;
      }
      case LayerKind::Softmax: {
        st.out.resize(in.rows(), B);
        for (Eigen::Index bb = 0; bb < B; ++bb) {
          const Scalar mx = in.col(bb).maxCoeff();
          st.out.col(bb) = (in.col(bb).array() - mx).exp();
          st.out.col(bb) /= st.out.col(bb).sum();
        }
        break;
      }
    }
  }
  return states_.back().out;
}

template <class Scalar>
void Network<Scalar>::backward(const Matrix& dlogits) {
  const auto B = dlogits.cols();
  for (std::size_t i = 0; i < states_.size(); ++i) {
    NodeState& st = states_[i];
    st.dout.setZero(st.out.rows(), st.out.cols());
    if (st.W.size()) st.dW.setZero(st.W.rows(), st.W.cols());
    if (st.b.size()) st.db.setZero(st.b.size());
    if (st.gamma.size()) {
      st.dgamma.setZero(st.gamma.size());
      st.dbeta.setZero(st.beta.size());
    }
  }
  // dlogits feeds the producer of the softmax node
  const Node& last = spec_.nodes.back();
  if (last.spec.kind != LayerKind::Softmax)
    throw std::logic_error("backward: network must end in softmax");
  states_[static_cast<std::size_t>(last.inputs[0])].dout = dlogits;

  for (int ii = static_cast<int>(spec_.nodes.size()) - 1; ii >= 0; --ii) {
    const std::size_t i = static_cast<std::size_t>(ii);
    const Node& n = spec_.nodes[i];
    if (n.spec.kind == LayerKind::Softmax) continue;
    const LayerSpec& s = n.spec;
    NodeState& st = states_[i];
    const Shape ish =
        n.inputs[0] < 0 ? spec_.input : shapes_[static_cast<std::size_t>(n.inputs[0])];
    auto add_dinput = [&](int src, const Matrix& d) {
      if (src >= 0) states_[static_cast<std::size_t>(src)].dout += d;
    };
    auto in_act = [&](int src) -> const Matrix& {
      return src < 0 ? input_cache_ : states_[static_cast<std::size_t>(src)].out;
    };
    switch (s.kind) {
      case LayerKind::Conv2d: {
        const int K = s.kh * s.kw * ish.c;
        const int P = st.geom.ho * st.geom.wo;
        Matrix dprod(s.filters, static_cast<Eigen::Index>(P) * B);
        for (Eigen::Index bb = 0; bb < B; ++bb)
          for (int p = 0; p < P; ++p)
            dprod.col(static_cast<Eigen::Index>(p) +
                      static_cast<Eigen::Index>(P) * bb) =
                st.dout.col(bb).segment(static_cast<Eigen::Index>(s.filters) * p,
                                        s.filters);
        st.dW = dprod * st.cols.transpose();
        st.db = dprod.rowwise().sum();
        Matrix dcols = st.W.transpose() * dprod;  // K x (P*B)
        Matrix dinput = Matrix::Zero(ish.size(), B);
        for (Eigen::Index bb = 0; bb < B; ++bb) {
          Scalar* dst = dinput.col(bb).data();
          for (int oy = 0; oy < st.geom.ho; ++oy)
            for (int ox = 0; ox < st.geom.wo; ++ox) {
              const Scalar* src = dcols
                                      .col(static_cast<Eigen::Index>(
                                               ox + st.geom.wo * oy) +
                                           static_cast<Eigen::Index>(P) * bb)
                                      .data();
              for (int ky = 0; ky < s.kh; ++ky) {
                const int iy = oy * s.sh - st.geom.pad_top + ky;
                if (iy < 0 || iy >= ish.h) continue;
                for (int kx = 0; kx < s.kw; ++kx) {
                  const int ix = ox * s.sw - st.geom.pad_left + kx;
                  if (ix < 0 || ix >= ish.w) continue;
                  const Scalar* cell = src + ish.c * (kx + s.kw * ky);
                  Scalar* px = dst + ish.c * (ix + ish.w * iy);
                  for (int c = 0; c < ish.c; ++c) px[c] += cell[c];
                }
              }
            }
        }
        (void)K;
        add_dinput(n.inputs[0], dinput);
        break;
      }
      case LayerKind::BatchNorm: {
        const int C = ish.c;
        const Eigen::Index cols = st.dout.size() / C;
        Eigen::Map<const Matrix> dview(st.dout.data(), C, cols);
        if (!st.cached_training)
          throw std::logic_error("batchnorm backward requires training forward");
        st.dgamma = (dview.array() * st.xhat.array()).rowwise().sum().matrix();
        st.dbeta = dview.rowwise().sum();
        const auto Nf = static_cast<Scalar>(cols);
        Matrix dx = dview * Nf;
        dx.colwise() -= st.dbeta;
        dx -= (st.xhat.array().colwise() * st.dgamma.array()).matrix();
        dx = (dx.array().colwise() *
              (st.gamma.array() * st.istd.array() / Nf))
                 .matrix();
        Matrix dinput(st.dout.rows(), st.dout.cols());
        Eigen::Map<Matrix>(dinput.data(), C, cols) = dx;
        add_dinput(n.inputs[0], dinput);
        break;
      }
      case LayerKind::Tanh: {
        const Matrix& y = st.out;
        add_dinput(
            n.inputs[0],
            (st.dout.array() * (Scalar(1) - y.array().square())).matrix());
        break;
      }
      case LayerKind::Relu: {
        const Matrix& in = in_act(n.inputs[0]);
        add_dinput(
            n.inputs[0],
            (st.dout.array() * (in.array() > Scalar(0)).template cast<Scalar>())
                .matrix());
        break;
      }
      case LayerKind::MaxPool: {
        Matrix dinput = Matrix::Zero(ish.size(), B);
        const auto osz = static_cast<std::size_t>(st.out.rows());
        for (Eigen::Index bb = 0; bb < B; ++bb) {
          Scalar* dst = dinput.col(bb).data();
          const Scalar* src = st.dout.col(bb).data();
          for (std::size_t o = 0; o < osz; ++o)
            dst[st.argmax[o + osz * static_cast<std::size_t>(bb)]] +=
                src[o];
        }
        add_dinput(n.inputs[0], dinput);
        break;
      }
      case LayerKind::AvgPool: {
        const int C = ish.c;
        const int hw = ish.h * ish.w;
        Matrix dinput(ish.size(), B);
        for (Eigen::Index bb = 0; bb < B; ++bb) {
          Eigen::Map<Matrix> view(dinput.col(bb).data(), C, hw);
          view = (st.dout.col(bb) / static_cast<Scalar>(hw))
                     .replicate(1, hw);
        }
        add_dinput(n.inputs[0], dinput);
        break;
      }
      case LayerKind::Fc: {
        const Matrix& in = in_act(n.inputs[0]);
        st.dW = st.dout * in.transpose();
        st.db = st.dout.rowwise().sum();
        add_dinput(n.inputs[0], st.W.transpose() * st.dout);
        break;
      }
      case LayerKind::Concat: {
        Eigen::Index off = 0;
        for (int src : n.inputs) {
          const Eigen::Index rows = in_act(src).rows();
          add_dinput(src, st.dout.middleRows(off, rows));
          off += rows;
        }
        break;
      }
      case LayerKind::Softmax:
        break;
    }
  }
}

template <class Scalar>
void Network<Scalar>::adam_step(const TrainOptions& opt) {
  ++adam_t_;
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(adam_t_));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(adam_t_));
  const Scalar lr = static_cast<Scalar>(opt.lr);
  const Scalar b1 = static_cast<Scalar>(opt.beta1);
  const Scalar b2 = static_cast<Scalar>(opt.beta2);
  const Scalar eps = static_cast<Scalar>(opt.adam_eps);
  auto update = [&](auto& p, auto& g, auto& m, auto& v) {
    if (!p.size()) return;
    if (!m.size()) {
      m = g;  // shape init
      m.setZero();
      v = m;
    }
    m = b1 * m + (Scalar(1) - b1) * g;
    v = (b2 * v.array() + (Scalar(1) - b2) * g.array().square()).matrix();
    const auto mhat = m.array() / static_cast<Scalar>(bc1);
    const auto vhat = v.array() / static_cast<Scalar>(bc2);
    p = (p.array() - lr * mhat / (vhat.sqrt() + eps)).matrix();
  };
  for (auto& st : states_) {
    update(st.W, st.dW, st.mW, st.vW);
    update(st.b, st.db, st.mb, st.vb);
    update(st.gamma, st.dgamma, st.mgamma, st.vgamma);
    update(st.beta, st.dbeta, st.mbeta, st.vbeta);
  }
}

template <class Scalar>
std::size_t Network<Scalar>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& st : states_)
    n += static_cast<std::size_t>(st.W.size() + st.b.size() + st.gamma.size() +
                                  st.beta.size());
  return n;
}

template <class Scalar>
std::vector<Scalar> Network<Scalar>::get_parameters() const {
  std::vector<Scalar> flat;
  flat.reserve(parameter_count());
  for (const auto& st : states_) {
    flat.insert(flat.end(), st.W.data(), st.W.data() + st.W.size());
    flat.insert(flat.end(), st.b.data(), st.b.data() + st.b.size());
    flat.insert(flat.end(), st.gamma.data(), st.gamma.data() + st.gamma.size());
    flat.insert(flat.end(), st.beta.data(), st.beta.data() + st.beta.size());
  }
  return flat;
}

template <class Scalar>
void Network<Scalar>::set_parameters(const std::vector<Scalar>& flat) {
  if (flat.size() != parameter_count())
    throw std::invalid_argument("set_parameters: size mismatch");
  std::size_t off = 0;
  for (auto& st : states_) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), st.W.size(),
                st.W.data());
    off += static_cast<std::size_t>(st.W.size());
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), st.b.size(),
                st.b.data());
    off += static_cast<std::size_t>(st.b.size());
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off),
                st.gamma.size(), st.gamma.data());
    off += static_cast<std::size_t>(st.gamma.size());
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off),
                st.beta.size(), st.beta.data());
    off += static_cast<std::size_t>(st.beta.size());
  }
}

template <class Scalar>
std::vector<Scalar> Network<Scalar>::get_gradients() const {
  std::vector<Scalar> flat;
  flat.reserve(parameter_count());
  for (const auto& st : states_) {
    flat.insert(flat.end(), st.dW.data(), st.dW.data() + st.dW.size());
    flat.insert(flat.end(), st.db.data(), st.db.data() + st.db.size());
    flat.insert(flat.end(), st.dgamma.data(),
                st.dgamma.data() + st.dgamma.size());
    flat.insert(flat.end(), st.dbeta.data(),
                st.dbeta.data() + st.dbeta.size());
  }
  return flat;
}

template <class Scalar>
Checkpoint Network<Scalar>::make_checkpoint(
    int epoch, double val_acc, const std::vector<EpochStats>& history,
    const std::string& rng_state) const {
  Checkpoint ck;
  ck.signature = spec_.signature();
  ck.epoch = epoch;
  ck.val_accuracy = val_acc;
  ck.adam_t = adam_t_;
  ck.rng_state = rng_state;
  ck.history = history;
  auto push = [](std::vector<float>& blk, const auto& arr) {
    for (Eigen::Index i = 0; i < arr.size(); ++i)
      blk.push_back(static_cast<float>(arr.data()[i]));
  };
  for (const auto& st : states_) {
    std::vector<float> blk, bm, bv;
    push(blk, st.W);
    push(blk, st.b);
    push(blk, st.gamma);
    push(blk, st.beta);
    push(blk, st.rmean);
    push(blk, st.rvar);
    push(bm, st.mW);
    push(bm, st.mb);
    push(bm, st.mgamma);
    push(bm, st.mbeta);
    push(bv, st.vW);
    push(bv, st.vb);
    push(bv, st.vgamma);
    push(bv, st.vbeta);
    ck.params.push_back(std::move(blk));
    ck.adam_m.push_back(std::move(bm));
    ck.adam_v.push_back(std::move(bv));
  }
  return ck;
}

template <class Scalar>
void Network<Scalar>::restore(const Checkpoint& ck) {
  if (ck.signature != spec_.signature())
    throw std::invalid_argument("checkpoint signature does not match network");
  if (ck.params.size() != states_.size())
    throw std::invalid_argument("checkpoint block count mismatch");
  adam_t_ = ck.adam_t;
  auto pull = [](const std::vector<float>& blk, std::size_t& off, auto& arr) {
    for (Eigen::Index i = 0; i < arr.size(); ++i)
      arr.data()[i] = static_cast<Scalar>(blk.at(off++));
  };
  for (std::size_t i = 0; i < states_.size(); ++i) {
    NodeState& st = states_[i];
    std::size_t off = 0;
    pull(ck.params[i], off, st.W);
    pull(ck.params[i], off, st.b);
    pull(ck.params[i], off, st.gamma);
    pull(ck.params[i], off, st.beta);
    pull(ck.params[i], off, st.rmean);
    pull(ck.params[i], off, st.rvar);
    if (off != ck.params[i].size())
      throw std::invalid_argument("checkpoint block size mismatch");
    std::size_t moff = 0, voff = 0;
    if (!ck.adam_m[i].empty()) {
      st.mW = st.W; st.mW.setZero();
      st.mb = st.b; st.mb.setZero();
      st.mgamma = st.gamma; st.mgamma.setZero();
      st.mbeta = st.beta; st.mbeta.setZero();
      pull(ck.adam_m[i], moff, st.mW);
      pull(ck.adam_m[i], moff, st.mb);
      pull(ck.adam_m[i], moff, st.mgamma);
      pull(ck.adam_m[i], moff, st.mbeta);
      st.vW = st.W; st.vW.setZero();
      st.vb = st.b; st.vb.setZero();
      st.vgamma = st.gamma; st.vgamma.setZero();
      st.vbeta = st.beta; st.vbeta.setZero();
      pull(ck.adam_v[i], voff, st.vW);
      pull(ck.adam_v[i], voff, st.vb);
      pull(ck.adam_v[i], voff, st.vgamma);
      pull(ck.adam_v[i], voff, st.vbeta);
    }
  }
}

template <class Scalar>
std::vector<EpochStats> Network<Scalar>::train(const FeatureSet& train_set,
                                               const FeatureSet& val_set,
                                               const TrainOptions& opt) {
  bn_momentum_ = opt.bn_momentum;
  bn_eps_ = opt.bn_eps;
  const auto N = static_cast<Eigen::Index>(train_set.count());
  if (N == 0) throw std::invalid_argument("train: empty training set");
  const int classes = spec_.classes;

  std::mt19937_64 rng(opt.seed);
  std::vector<Eigen::Index> order(static_cast<std::size_t>(N));
  for (Eigen::Index i = 0; i < N; ++i) order[static_cast<std::size_t>(i)] = i;

  std::vector<EpochStats> history;
  Checkpoint best;
  double best_val = -1.0;
  int best_epoch = -1;
  int since_best = 0;

  auto snapshot_rng = [&] {
    std::ostringstream os;
    os << rng;
    return os.str();
  };

  for (int epoch = 1; epoch <= opt.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    Eigen::Index seen = 0;
    for (Eigen::Index start = 0; start < N; start += opt.batch) {
      const Eigen::Index bs = std::min<Eigen::Index>(opt.batch, N - start);
      Matrix batch(train_set.x.rows(), bs);
      for (Eigen::Index j = 0; j < bs; ++j)
        batch.col(j) = train_set.x
                           .col(order[static_cast<std::size_t>(start + j)])
                           .template cast<Scalar>();
      Matrix probs = forward(batch, true);
      Matrix dlogits = probs;
      double batch_loss = 0.0;
      for (Eigen::Index j = 0; j < bs; ++j) {
        const int y =
            train_set.labels[static_cast<std::size_t>(
                order[static_cast<std::size_t>(start + j)])];
        if (y < 0 || y >= classes)
          throw std::invalid_argument("train: label out of range");
        const double p = std::max<double>(probs(y, j), 1e-12);
        batch_loss -= std::log(p);
        dlogits(y, j) -= Scalar(1);
      }
      dlogits /= static_cast<Scalar>(bs);
      loss_sum += batch_loss;
      seen += bs;
      backward(dlogits);
      adam_step(opt);
    }
    const double train_loss = loss_sum / static_cast<double>(seen);

    double val_acc = 0.0;
    if (val_set.count() > 0) {
      const Evaluation ev = evaluate(val_set);
      val_acc = ev.pcc;
    }
    history.push_back({epoch, train_loss, val_acc});

    if (!std::isfinite(train_loss)) {
      if (best_epoch < 0)
        best = make_checkpoint(0, 0.0, history, snapshot_rng());
      throw TrainingDiverged("training diverged (non-finite loss) at epoch " +
                                 std::to_string(epoch),
                             std::move(best));
    }

    if (val_acc > best_val) {
      best_val = val_acc;
      best_epoch = epoch;
      since_best = 0;
      best = make_checkpoint(epoch, val_acc, history, snapshot_rng());
    } else if (++since_best >= opt.patience) {
      break;
    }
  }
  if (best_epoch >= 0) {
    best.history = history;  // keep the full curve in the retained checkpoint
    restore(best);
  }
  return history;
}

template <class Scalar>
Evaluation Network<Scalar>::evaluate(const FeatureSet& test_set, int batch) {
  const auto N = static_cast<Eigen::Index>(test_set.count());
  const int classes = spec_.classes;
  Evaluation ev;
  ev.confusion.assign(static_cast<std::size_t>(classes),
                      std::vector<std::int64_t>(static_cast<std::size_t>(classes), 0));
  std::map<int, std::pair<std::int64_t, std::int64_t>> bins;  // lo -> {tot, ok}
  std::int64_t correct = 0;
  for (Eigen::Index start = 0; start < N; start += batch) {
    const Eigen::Index bs = std::min<Eigen::Index>(batch, N - start);
    Matrix b(test_set.x.rows(), bs);
    for (Eigen::Index j = 0; j < bs; ++j)
      b.col(j) = test_set.x.col(start + j).template cast<Scalar>();
    Matrix probs = forward(b, false);
    for (Eigen::Index j = 0; j < bs; ++j) {
      Eigen::Index pred = 0;
      probs.col(j).maxCoeff(&pred);
      const int truth = test_set.labels[static_cast<std::size_t>(start + j)];
      ev.confusion[static_cast<std::size_t>(truth)]
                  [static_cast<std::size_t>(pred)]++;
      const bool ok = pred == truth;
      if (ok) ++correct;
      const int lo = static_cast<int>(std::floor(
          test_set.snr_db[static_cast<std::size_t>(start + j)]));
      auto& bin = bins[lo];
      bin.first++;
      if (ok) bin.second++;
    }
  }
  ev.pcc = N > 0 ? static_cast<double>(correct) / static_cast<double>(N) : 0.0;
  for (const auto& [lo, tc] : bins)
    ev.per_snr.push_back({lo, tc.first, tc.second});
  return ev;
}

template class Network<float>;
template class Network<double>;

// ---------------------------------------------------------------------------

namespace {
constexpr char kMagic[9] = "CCNETCK1";  // 8 chars + NUL
}

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  f.write(kMagic, 8);
  auto write_u64 = [&](std::uint64_t v) {
    f.write(reinterpret_cast<const char*>(&v), 8);
  };
  const std::uint64_t nblocks = ck.params.size();
  write_u64(nblocks * 3);
  auto write_block = [&](const std::vector<float>& blk) {
    write_u64(blk.size());
    f.write(reinterpret_cast<const char*>(blk.data()),
            static_cast<std::streamsize>(blk.size() * sizeof(float)));
  };
  for (const auto& b : ck.params) write_block(b);
  for (const auto& b : ck.adam_m) write_block(b);
  for (const auto& b : ck.adam_v) write_block(b);
  nlohmann::json j;
  j["signature"] = ck.signature;
  j["epoch"] = ck.epoch;
  j["val_accuracy"] = ck.val_accuracy;
  j["adam_t"] = ck.adam_t;
  j["rng_state"] = ck.rng_state;
  j["param_blocks"] = nblocks;
  auto& hist = j["history"] = nlohmann::json::array();
  for (const auto& h : ck.history)
    hist.push_back({{"epoch", h.epoch},
                    {"train_loss", h.train_loss},
                    {"val_accuracy", h.val_accuracy}});
  const std::string trailer = j.dump();
  f.write(trailer.data(), static_cast<std::streamsize>(trailer.size()));
  if (!f) throw std::runtime_error("checkpoint write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error("bad checkpoint magic: " + path);
  auto read_u64 = [&] {
    std::uint64_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 8);
    if (!f) throw std::runtime_error("truncated checkpoint: " + path);
    return v;
  };
  const std::uint64_t total = read_u64();
  if (total % 3 != 0)
    throw std::runtime_error("corrupt checkpoint block table: " + path);
  const std::uint64_t nblocks = total / 3;
  auto read_block = [&] {
    const std::uint64_t n = read_u64();
    std::vector<float> blk(n);
    f.read(reinterpret_cast<char*>(blk.data()),
           static_cast<std::streamsize>(n * sizeof(float)));
    if (!f) throw std::runtime_error("truncated checkpoint: " + path);
    return blk;
  };
  Checkpoint ck;
  for (std::uint64_t i = 0; i < nblocks; ++i) ck.params.push_back(read_block());
  for (std::uint64_t i = 0; i < nblocks; ++i) ck.adam_m.push_back(read_block());
  for (std::uint64_t i = 0; i < nblocks; ++i) ck.adam_v.push_back(read_block());
  std::string trailer((std::istreambuf_iterator<char>(f)),
                      std::istreambuf_iterator<char>());
  const nlohmann::json j = nlohmann::json::parse(trailer);
  ck.signature = j.at("signature").get<std::string>();
  ck.epoch = j.at("epoch").get<int>();
  ck.val_accuracy = j.at("val_accuracy").get<double>();
  ck.adam_t = j.at("adam_t").get<std::uint64_t>();
  ck.rng_state = j.at("rng_state").get<std::string>();
  for (const auto& h : j.at("history"))
    ck.history.push_back({h.at("epoch").get<int>(),
                          h.at("train_loss").get<double>(),
                          h.at("val_accuracy").get<double>()});
  return ck;
}

void write_history_csv(const std::vector<EpochStats>& history,
                       const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open history csv: " + path);
  f << "epoch,train_loss,val_accuracy\n";
  for (const auto& h : history)
    f << h.epoch << "," << h.train_loss << "," << h.val_accuracy << "\n";
}

}  // namespace ccmod::nn
