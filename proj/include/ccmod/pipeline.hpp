#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ccmod/cspcore.hpp"
#include "ccmod/nn.hpp"
#include "ccmod/siggen.hpp"

namespace ccmod::pipeline {

namespace fs = std::filesystem;

// Dataset on disk: meta.jsonl (one JSON object per signal, including the
// complex-sample offset into the f32 file), signals.f32 (LE float32
// interleaved I,Q), config.json.
void generate_dataset(const siggen::DatasetConfig& config, std::uint64_t seed,
                      const fs::path& out_dir, int jobs = 1);

struct DatasetRecord {
  siggen::SignalMeta meta;
  std::uint64_t offset = 0;  // complex samples into signals.f32
  bool has_truth = true;     // imported captures without a sidecar lack truth
};

struct Dataset {
  fs::path dir;
  std::vector<DatasetRecord> records;
  bool blind_only = false;

  static Dataset open(const fs::path& dir);
  cvec load_signal(std::size_t index) const;
};

enum class RawFormat { F32, I16 };

// Convert an interleaved I/Q capture into the native dataset layout. The
// optional JSON sidecar supplies format/signal length/labels; without it the
// whole file becomes one signal and the dataset is flagged blind-only.
void import_raw_iq(const fs::path& file, const fs::path& sidecar,
                   const fs::path& out_dir, RawFormat format = RawFormat::F32);

// features.bin: packed records of [165 x float32 | label u8 | snr_db float32
// | mode u8]; estimates.jsonl sidecar carries the per-signal parameter
// estimates (truth echoed back in oracle mode) and fallback flags.
void extract_dataset_features(const fs::path& dataset_dir,
                              cspcore::FeatureMode mode, const fs::path& out_dir,
                              int jobs = 1);

struct FeatureFile {
  std::vector<cspcore::CCFeatureVector> records;

  static FeatureFile load(const fs::path& path);
  void save(const fs::path& path) const;

  // columns = examples, raw 165-row layout; labels 255 (unknown truth) are
  // rejected here since they cannot feed supervised training/eval.
  nn::FeatureSet to_feature_set() const;
};

struct ExperimentPlan {
  std::string train_config;
  double split_train = 0.70, split_val = 0.05, split_test = 0.25;
  cspcore::FeatureMode mode = cspcore::FeatureMode::Oracle;
  std::string net = "cap";  // "cap" | "cnn"
  std::uint64_t seed = 0;
  nn::TrainOptions train_options;
};

struct ExperimentInputs {
  fs::path train_features;
  // generalization targets, evaluated on the full feature file
  std::vector<std::pair<std::string, fs::path>> cross;
};

struct Report {
  std::string net, train_config, mode;
  std::uint64_t seed = 0;
  bool degenerate = false;  // too few signals for a meaningful split
  int best_epoch = 0;
  double val_accuracy = 0.0;
  std::int64_t blind_fallbacks = -1;  // -1 = no estimates sidecar found

  struct Entry {
    std::string test_name;
    nn::Evaluation eval;
  };
  Entry self;                // held-out test split of the train config
  std::vector<Entry> cross;  // one per plan cross target

  double gap(std::size_t cross_index) const {
    return self.eval.pcc - cross[cross_index].eval.pcc;
  }
};

// Train on the 70% split (per-class, by signal index), evaluate on the 25%
// held-out split and on every cross target; emits report.json,
// confusion_{net}_{train}_{test}.csv, per_snr_{...}.csv/.svg, checkpoint,
// history.csv. A failed stage leaves state.json behind; rerunning with an
// intact checkpoint skips straight to evaluation.
Report run_experiment(const ExperimentPlan& plan, const ExperimentInputs& in,
                      const fs::path& out_dir);

// Quick analytic-oracle invariant suite (CLI `selftest`); prints one line per
// check, returns the number of failures.
int selftest();

}  // namespace ccmod::pipeline
