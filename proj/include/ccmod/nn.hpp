#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace ccmod::nn {

enum class LayerKind {
  Conv2d,
  BatchNorm,
  Tanh,
  Relu,
  MaxPool,
  AvgPool,
  Fc,
  Concat,
  Softmax,
};

enum class Padding { Same, Valid };
enum class Init { Glorot, He };

struct LayerSpec {
  LayerKind kind;
  int filters = 0;        // conv2d
  int kh = 0, kw = 0;     // conv2d / maxpool kernel
  int sh = 1, sw = 1;     // stride
  Padding pad = Padding::Valid;
  int units = 0;          // fc
  Init init = Init::Glorot;
};

struct Shape {
  int h = 1, w = 1, c = 1;
  int size() const { return h * w * c; }
  bool operator==(const Shape&) const = default;
};

struct Node {
  LayerSpec spec;
  std::vector<int> inputs;  // indices of producer nodes; -1 = network input
  std::string name;
};

struct NetworkSpec {
  std::vector<Node> nodes;  // topological order; last node is the output
  Shape input;
  int classes = 8;

  // stable layout signature (hashed into checkpoints)
  std::string signature() const;
};

NetworkSpec build_capsule_net();
NetworkSpec build_cnn();

// Output shape of every node; throws std::invalid_argument naming the first
// layer whose configuration is illegal for its input shape.
std::vector<Shape> propagate_shapes(const NetworkSpec& spec);

// Labeled feature set: column j of `x` is one example laid out for the
// network input (see capsule_input / cnn_input).
struct FeatureSet {
  Eigen::MatrixXf x;
  std::vector<std::uint8_t> labels;
  std::vector<float> snr_db;

  std::size_t count() const { return labels.size(); }
};

// Reshape raw 165-value feature vectors ((n,m)-pair major, k minor) into the
// 11 x 15 grid the capsule net consumes (rows = k, cols = (n,m) pair), or
// pass them through unchanged for the 1-D CNN.
Eigen::MatrixXf capsule_input(const Eigen::MatrixXf& raw);
Eigen::MatrixXf cnn_input(const Eigen::MatrixXf& raw);

struct TrainOptions {
  double lr = 1e-3;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  int batch = 128;
  int max_epochs = 60;
  int patience = 10;  // early stop on validation accuracy
  std::uint64_t seed = 0;
  double bn_momentum = 0.9;
  double bn_eps = 1e-5;
};

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double val_accuracy = 0.0;
};

struct Checkpoint {
  std::string signature;
  int epoch = 0;
  double val_accuracy = 0.0;
  std::vector<std::vector<float>> params;      // layer-ordered blocks
  std::vector<std::vector<float>> adam_m;
  std::vector<std::vector<float>> adam_v;
  std::uint64_t adam_t = 0;
  std::string rng_state;
  std::vector<EpochStats> history;
};

void save_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);
void write_history_csv(const std::vector<EpochStats>& history,
                       const std::string& path);

struct TrainingDiverged : std::runtime_error {
  explicit TrainingDiverged(std::string msg, Checkpoint last_good)
      : std::runtime_error(std::move(msg)), last_good(std::move(last_good)) {}
  Checkpoint last_good;
};

struct Evaluation {
  double pcc = 0.0;
  std::vector<std::vector<std::int64_t>> confusion;  // [truth][predicted]
  struct SnrBin {
    int lo_db = 0;  // bin covers [lo_db, lo_db + 1)
    std::int64_t total = 0;
    std::int64_t correct = 0;
  };
  std::vector<SnrBin> per_snr;  // empty bins omitted
};

template <class Scalar>
class Network {
 public:
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

  explicit Network(NetworkSpec spec, std::uint64_t init_seed = 0);
  ~Network();
  Network(Network&&) noexcept;
  Network& operator=(Network&&) noexcept;

  const NetworkSpec& spec() const { return spec_; }
  const std::vector<Shape>& shapes() const { return shapes_; }

  // columns = examples; returns class probabilities (classes x batch)
  Matrix forward(const Matrix& input, bool training);

  // dlogits = dL/d(pre-softmax logits), classes x batch; accumulates
  // parameter gradients (zeroed at the start of each call)
  void backward(const Matrix& dlogits);

  void adam_step(const TrainOptions& opt);

  // flat parameter access for gradient checks and serialization
  std::size_t parameter_count() const;
  std::vector<Scalar> get_parameters() const;
  void set_parameters(const std::vector<Scalar>& flat);
  std::vector<Scalar> get_gradients() const;

  Checkpoint make_checkpoint(int epoch, double val_acc,
                             const std::vector<EpochStats>& history,
                             const std::string& rng_state) const;
  void restore(const Checkpoint& ck);

  std::vector<EpochStats> train(const FeatureSet& train_set,
                                const FeatureSet& val_set,
                                const TrainOptions& opt);

  Evaluation evaluate(const FeatureSet& test_set, int batch = 256);

 private:
  struct NodeState;
  NetworkSpec spec_;
  std::vector<Shape> shapes_;
  std::vector<NodeState> states_;
  std::uint64_t adam_t_ = 0;
  double bn_momentum_ = 0.9;
  double bn_eps_ = 1e-5;
  Matrix input_cache_;  // network input from the last training forward
};

extern template class Network<float>;
extern template class Network<double>;

}  // namespace ccmod::nn
