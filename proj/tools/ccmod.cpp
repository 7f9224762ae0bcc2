#include <cstdio>
#include <fstream>

#include "CLI11.hpp"
#include "ccmod/pipeline.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ccmod;

namespace {

siggen::DatasetConfig load_config(const std::string& name_or_path) {
  if (auto c = siggen::builtin_config(name_or_path)) return *c;
  std::ifstream f(name_or_path);
  if (!f)
    throw CLI::ValidationError("--config",
                               "not a builtin config or readable file: " +
                                   name_or_path);
  const json j = json::parse(f, nullptr, true, true);
  siggen::DatasetConfig c;
  if (j.contains("base"))
    c = load_config(j["base"].get<std::string>());
  c.name = j.value("name", name_or_path);
  c.T0_min = j.value("T0_min", c.T0_min);
  c.T0_max = j.value("T0_max", c.T0_max);
  c.f0_min = j.value("f0_min", c.f0_min);
  c.f0_max = j.value("f0_max", c.f0_max);
  c.beta_min = j.value("beta_min", c.beta_min);
  c.beta_max = j.value("beta_max", c.beta_max);
  c.snr_min_db = j.value("snr_min_db", c.snr_min_db);
  c.snr_max_db = j.value("snr_max_db", c.snr_max_db);
  c.snr_mean_db = j.value("snr_mean_db", c.snr_mean_db);
  c.signals_per_class = j.value("signals_per_class", c.signals_per_class);
  c.length = j.value("length", c.length);
  c.random_clock_offset = j.value("random_clock_offset", c.random_clock_offset);
  return c;
}

cspcore::FeatureMode parse_mode(const std::string& m) {
  if (m == "oracle") return cspcore::FeatureMode::Oracle;
  if (m == "blind") return cspcore::FeatureMode::Blind;
  throw CLI::ValidationError("--mode", "must be oracle or blind");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cyclic-cumulant modulation classification pipeline"};
  app.require_subcommand(1);

  std::string config = "cfg2018", mode = "oracle", net = "cap", out = ".";
  std::uint64_t seed = 0;
  int jobs = 1;
  std::size_t per_class = 0, length = 0;

  auto* gen = app.add_subcommand("generate", "synthesize a dataset");
  gen->add_option("--config", config, "builtin name (cfg2018|cfg2022) or JSON");
  gen->add_option("--seed", seed, "dataset seed");
  gen->add_option("--out", out, "output directory")->required();
  gen->add_option("--jobs", jobs, "worker threads");
  gen->add_option("--per-class", per_class, "override signals per class");
  gen->add_option("--length", length, "override samples per signal");

  std::string in_file, sidecar, raw_format = "f32";
  auto* imp = app.add_subcommand("import", "convert a raw I/Q capture");
  imp->add_option("--in", in_file, "interleaved I/Q file")->required();
  imp->add_option("--sidecar", sidecar, "JSON metadata sidecar");
  imp->add_option("--format", raw_format, "f32|i16 (sidecar overrides)");
  imp->add_option("--out", out, "output directory")->required();

  std::string dataset_dir;
  auto* ext = app.add_subcommand("extract", "extract 165-slot feature vectors");
  ext->add_option("--in", dataset_dir, "dataset directory")->required();
  ext->add_option("--mode", mode, "oracle|blind");
  ext->add_option("--out", out, "output directory")->required();
  ext->add_option("--jobs", jobs, "worker threads");

  std::string features, train_name = "train";
  std::vector<std::string> cross;
  int epochs = 0;
  auto* trn = app.add_subcommand("train", "train a classifier and report");
  trn->add_option("--features", features, "features.bin of the train config")
      ->required();
  trn->add_option("--net", net, "cap|cnn");
  trn->add_option("--mode", mode, "oracle|blind (recorded in the report)");
  trn->add_option("--seed", seed, "init/shuffle seed");
  trn->add_option("--name", train_name, "train-config label for report files");
  trn->add_option("--cross", cross, "name=features.bin generalization targets");
  trn->add_option("--epochs", epochs, "override max epochs");
  trn->add_option("--out", out, "output directory")->required();

  std::string checkpoint, eval_name = "eval";
  auto* evl = app.add_subcommand("eval", "evaluate a checkpoint on features");
  evl->add_option("--features", features, "features.bin")->required();
  evl->add_option("--checkpoint", checkpoint, "trained checkpoint")->required();
  evl->add_option("--net", net, "cap|cnn");
  evl->add_option("--name", eval_name, "label for the output file");
  evl->add_option("--out", out, "output directory")->required();

  std::vector<std::string> eval_files;
  auto* rpt = app.add_subcommand("report", "tabulate eval outputs as CSV");
  rpt->add_option("evals", eval_files, "eval JSON files (first = reference)")
      ->required();
  rpt->add_option("--out", out, "output directory")->required();

  app.add_subcommand("selftest", "run the analytic-oracle invariant suite");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;  // usage problems are exit 1
  }

  try {
    if (gen->parsed()) {
      auto cfg = load_config(config);
      if (per_class) cfg.signals_per_class = per_class;
      if (length) cfg.length = length;
      pipeline::generate_dataset(cfg, seed, out, jobs);
      std::printf("wrote dataset %s (%zu signals)\n", out.c_str(),
                  cfg.signals_per_class * static_cast<std::size_t>(
                                              siggen::kNumSchemes));
    } else if (imp->parsed()) {
      pipeline::RawFormat f = pipeline::RawFormat::F32;
      if (raw_format == "i16") f = pipeline::RawFormat::I16;
      else if (raw_format != "f32")
        throw CLI::ValidationError("--format", "must be f32 or i16");
      pipeline::import_raw_iq(in_file, sidecar, out, f);
      std::printf("imported %s -> %s\n", in_file.c_str(), out.c_str());
    } else if (ext->parsed()) {
      pipeline::extract_dataset_features(dataset_dir, parse_mode(mode), out,
                                         jobs);
      std::printf("wrote %s/features.bin\n", out.c_str());
    } else if (trn->parsed()) {
      pipeline::ExperimentPlan plan;
      plan.train_config = train_name;
      plan.mode = parse_mode(mode);
      plan.net = net;
      plan.seed = seed;
      if (epochs > 0) plan.train_options.max_epochs = epochs;
      pipeline::ExperimentInputs in;
      in.train_features = features;
      for (const auto& c : cross) {
        const auto eq = c.find('=');
        if (eq == std::string::npos)
          throw CLI::ValidationError("--cross", "expected name=path: " + c);
        in.cross.emplace_back(c.substr(0, eq), c.substr(eq + 1));
      }
      const auto rep = pipeline::run_experiment(plan, in, out);
      std::printf("%s on %s: self P_CC %.4f\n", rep.net.c_str(),
                  rep.train_config.c_str(), rep.self.eval.pcc);
      for (std::size_t i = 0; i < rep.cross.size(); ++i)
        std::printf("  cross %s: P_CC %.4f (gap %+.4f)\n",
                    rep.cross[i].test_name.c_str(), rep.cross[i].eval.pcc,
                    rep.gap(i));
    } else if (evl->parsed()) {
      const auto ck = nn::load_checkpoint(checkpoint);
      nn::NetworkSpec spec =
          net == "cnn" ? nn::build_cnn() : nn::build_capsule_net();
      nn::Network<float> model(spec, 0);
      model.restore(ck);
      auto ff = pipeline::FeatureFile::load(features);
      auto set = ff.to_feature_set();
      set.x = net == "cnn" ? nn::cnn_input(set.x) : nn::capsule_input(set.x);
      const auto ev = model.evaluate(set);
      json j;
      j["net"] = net;
      j["name"] = eval_name;
      j["features"] = features;
      j["pcc"] = ev.pcc;
      j["confusion"] = ev.confusion;
      auto& ps = j["per_snr"] = json::array();
      for (const auto& b : ev.per_snr)
        ps.push_back({{"snr_lo_db", b.lo_db},
                      {"total", b.total},
                      {"correct", b.correct}});
      fs::create_directories(out);
      std::ofstream f(fs::path(out) / ("eval_" + eval_name + ".json"));
      f << j.dump(2) << "\n";
      std::printf("%s P_CC %.4f\n", eval_name.c_str(), ev.pcc);
    } else if (rpt->parsed()) {
      fs::create_directories(out);
      std::ofstream f(fs::path(out) / "report.csv");
      f << "name,net,pcc,gap_vs_first\n";
      double first_pcc = 0.0;
      for (std::size_t i = 0; i < eval_files.size(); ++i) {
        std::ifstream ef(eval_files[i]);
        if (!ef)
          throw std::runtime_error("cannot open eval file " + eval_files[i]);
        const json j = json::parse(ef);
        const double pcc = j.at("pcc").get<double>();
        if (i == 0) first_pcc = pcc;
        f << j.value("name", eval_files[i]) << ","
          << j.value("net", std::string("?")) << "," << pcc << ","
          << (i == 0 ? 0.0 : first_pcc - pcc) << "\n";
      }
      std::printf("wrote %s/report.csv\n", out.c_str());
    } else {  // selftest
      return pipeline::selftest() == 0 ? 0 : 2;
    }
  } catch (const CLI::ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
