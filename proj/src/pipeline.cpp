#include "ccmod/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include "ccmod/blindest.hpp"
#include "json.hpp"

namespace ccmod::pipeline {

using nlohmann::json;
using siggen::ModulationScheme;

namespace {

// Chunked ordered map: compute fans out over a worker pool, write always
// runs in index order so outputs are byte-identical for any job count.
template <class Fn, class Writer>
void ordered_parallel(std::size_t n, int jobs, Fn compute, Writer write) {
  jobs = std::max(1, jobs);
  if (jobs == 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) write(i, compute(i));
    return;
  }
  using Result = std::invoke_result_t<Fn, std::size_t>;
  const std::size_t chunk = static_cast<std::size_t>(jobs) * 4;
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t m = std::min(chunk, n - start);
    std::vector<Result> buf(m);
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    const int workers = static_cast<int>(std::min<std::size_t>(jobs, m));
    std::atomic<bool> failed{false};
    std::string first_error;
    std::mutex err_mu;
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (;;) {
          const std::size_t j = next.fetch_add(1);
          if (j >= m || failed.load()) return;
          try {
            buf[j] = compute(start + j);
          } catch (const std::exception& e) {
            std::scoped_lock lk(err_mu);
            if (!failed.exchange(true)) first_error = e.what();
            return;
          }
        }
      });
    for (auto& t : pool) t.join();
    if (failed.load()) throw std::runtime_error(first_error);
    for (std::size_t j = 0; j < m; ++j) write(start + j, std::move(buf[j]));
  }
}

json meta_to_json(const siggen::SignalMeta& m, bool has_truth,
                  std::uint64_t offset, std::size_t index) {
  json j;
  j["index"] = index;
  j["offset"] = offset;
  j["length"] = m.length;
  if (has_truth) {
    j["scheme"] = siggen::scheme_name(m.scheme);
    j["T0"] = m.T0;
    j["f0"] = m.f0;
    j["beta"] = m.beta;
    j["snr_inband_db"] = m.snr_inband_db;
    j["phase"] = m.phase;
    j["power"] = m.power;
    j["seed"] = m.seed;
    j["clock_offset"] = m.clock_offset;
  } else {
    for (const char* k :
         {"scheme", "T0", "f0", "beta", "snr_inband_db", "phase", "power",
          "seed", "clock_offset"})
      j[k] = nullptr;
  }
  return j;
}

void cleanup_partial(const fs::path& dir) {
  std::error_code ec;
  for (const char* f : {"meta.jsonl", "signals.f32", "config.json"})
    fs::remove(dir / f, ec);
}

std::string sanitize(std::string s) {
  for (auto& c : s)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_')
      c = '_';
  return s;
}

void write_confusion_csv(const fs::path& path,
                         const std::vector<std::vector<std::int64_t>>& cm) {
  std::ofstream f(path, std::ios::trunc);
  f << "truth\\pred";
  for (int c = 0; c < siggen::kNumSchemes; ++c)
    f << "," << siggen::scheme_name(static_cast<ModulationScheme>(c));
  f << "\n";
  for (int r = 0; r < siggen::kNumSchemes; ++r) {
    f << siggen::scheme_name(static_cast<ModulationScheme>(r));
    for (int c = 0; c < siggen::kNumSchemes; ++c)
      f << "," << cm[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
    f << "\n";
  }
}

void write_per_snr_csv(const fs::path& path,
                       const std::vector<nn::Evaluation::SnrBin>& bins) {
  std::ofstream f(path, std::ios::trunc);
  f << "snr_lo_db,total,correct,accuracy\n";
  for (const auto& b : bins)
    f << b.lo_db << "," << b.total << "," << b.correct << ","
      << (b.total ? static_cast<double>(b.correct) / b.total : 0.0) << "\n";
}

void write_per_snr_svg(const fs::path& path,
                       const std::vector<nn::Evaluation::SnrBin>& bins,
                       const std::string& title) {
  std::ofstream f(path, std::ios::trunc);
  const int W = 480, H = 320, ML = 50, MR = 15, MT = 30, MB = 40;
  f << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='"
    << H << "'>\n";
  f << "<text x='" << W / 2 << "' y='18' text-anchor='middle' "
       "font-family='sans-serif' font-size='13'>"
    << title << "</text>\n";
  f << "<rect x='" << ML << "' y='" << MT << "' width='" << W - ML - MR
    << "' height='" << H - MT - MB << "' fill='none' stroke='black'/>\n";
  if (!bins.empty()) {
    const int lo = bins.front().lo_db, hi = bins.back().lo_db;
    const double span = std::max(1, hi - lo);
    auto px = [&](double snr) {
      return ML + (snr - lo) / span * (W - ML - MR);
    };
    auto py = [&](double acc) { return (H - MB) - acc * (H - MT - MB); };
    f << "<polyline fill='none' stroke='#1f6fb2' stroke-width='2' points='";
    for (const auto& b : bins)
      f << px(b.lo_db + 0.5) << ","
        << py(b.total ? static_cast<double>(b.correct) / b.total : 0.0) << " ";
    f << "'/>\n";
    f << "<text x='" << ML << "' y='" << H - 10
      << "' font-family='sans-serif' font-size='11'>" << lo << " dB</text>\n";
    f << "<text x='" << W - MR << "' y='" << H - 10
      << "' text-anchor='end' font-family='sans-serif' font-size='11'>"
      << hi + 1 << " dB</text>\n";
    f << "<text x='" << ML - 5 << "' y='" << MT + 10
      << "' text-anchor='end' font-family='sans-serif' font-size='11'>1.0"
         "</text>\n";
    f << "<text x='" << ML - 5 << "' y='" << H - MB
      << "' text-anchor='end' font-family='sans-serif' font-size='11'>0.0"
         "</text>\n";
  }
  f << "</svg>\n";
}

json eval_to_json(const nn::Evaluation& ev) {
  json j;
  j["pcc"] = ev.pcc;
  j["confusion"] = ev.confusion;
  auto& ps = j["per_snr"] = json::array();
  for (const auto& b : ev.per_snr)
    ps.push_back(
        {{"snr_lo_db", b.lo_db}, {"total", b.total}, {"correct", b.correct}});
  return j;
}

}  // namespace

void generate_dataset(const siggen::DatasetConfig& config, std::uint64_t seed,
                      const fs::path& out_dir, int jobs) {
  config.validate();
  fs::create_directories(out_dir);
  try {
    std::ofstream meta_f(out_dir / "meta.jsonl", std::ios::trunc);
    std::ofstream sig_f(out_dir / "signals.f32",
                        std::ios::binary | std::ios::trunc);
    if (!meta_f || !sig_f)
      throw std::runtime_error("generate_dataset: cannot open outputs in " +
                               out_dir.string());

    const std::size_t per = config.signals_per_class;
    const std::size_t total = per * siggen::kNumSchemes;
    struct Item {
      siggen::SignalMeta meta;
      std::vector<float> iq;
    };
    std::uint64_t offset = 0;
    ordered_parallel(
        total, jobs,
        [&](std::size_t g) {
          const auto cls = static_cast<std::uint32_t>(g / per);
          const auto idx = static_cast<std::uint32_t>(g % per);
          std::mt19937_64 rng(siggen::derive_seed(seed, cls, idx));
          Item it;
          it.meta = siggen::draw_params(
              config, static_cast<ModulationScheme>(cls), rng);
          it.meta.seed = rng();  // independent stream for symbols/noise
          const cvec x = siggen::synthesize(it.meta);
          it.iq.resize(2 * x.size());
          for (std::size_t t = 0; t < x.size(); ++t) {
            it.iq[2 * t] = static_cast<float>(x[t].real());
            it.iq[2 * t + 1] = static_cast<float>(x[t].imag());
          }
          return it;
        },
        [&](std::size_t g, Item it) {
          meta_f << meta_to_json(it.meta, true, offset, g).dump() << "\n";
          sig_f.write(reinterpret_cast<const char*>(it.iq.data()),
                      static_cast<std::streamsize>(it.iq.size() *
                                                   sizeof(float)));
          offset += it.iq.size() / 2;
          if (!meta_f || !sig_f)
            throw std::runtime_error("generate_dataset: write failed in " +
                                     out_dir.string());
        });
    json cfg;
    cfg["name"] = config.name;
    cfg["T0_min"] = config.T0_min; cfg["T0_max"] = config.T0_max;
    cfg["f0_min"] = config.f0_min; cfg["f0_max"] = config.f0_max;
    cfg["beta_min"] = config.beta_min; cfg["beta_max"] = config.beta_max;
    cfg["snr_min_db"] = config.snr_min_db; cfg["snr_max_db"] = config.snr_max_db;
    cfg["snr_mean_db"] = config.snr_mean_db;
    cfg["signals_per_class"] = config.signals_per_class;
    cfg["length"] = config.length;
    cfg["random_clock_offset"] = config.random_clock_offset;
    cfg["dataset_seed"] = seed;
    cfg["blind_only"] = false;
    std::ofstream cfg_f(out_dir / "config.json", std::ios::trunc);
    cfg_f << cfg.dump(2) << "\n";
    if (!cfg_f)
      throw std::runtime_error("generate_dataset: write failed in " +
                               out_dir.string());
  } catch (...) {
    cleanup_partial(out_dir);
    throw;
  }
}

Dataset Dataset::open(const fs::path& dir) {
  Dataset ds;
  ds.dir = dir;
  {
    std::ifstream cfg_f(dir / "config.json");
    if (cfg_f) {
      const json cfg = json::parse(cfg_f, nullptr, true, true);
      ds.blind_only = cfg.value("blind_only", false);
    }
  }
  std::ifstream meta_f(dir / "meta.jsonl");
  if (!meta_f)
    throw std::runtime_error("dataset: cannot open " +
                             (dir / "meta.jsonl").string());
  std::string line;
  std::size_t lineno = 0;
  std::uint64_t expected_samples = 0;
  while (std::getline(meta_f, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const std::exception& e) {
      throw std::runtime_error("dataset: meta.jsonl parse error at line " +
                               std::to_string(lineno) + ": " + e.what());
    }
    DatasetRecord r;
    r.offset = j.at("offset").get<std::uint64_t>();
    r.meta.length = j.at("length").get<std::size_t>();
    if (j.contains("scheme") && !j["scheme"].is_null()) {
      const auto s = siggen::scheme_from_name(j["scheme"].get<std::string>());
      if (!s)
        throw std::runtime_error("dataset: unknown scheme at line " +
                                 std::to_string(lineno));
      r.meta.scheme = *s;
      r.meta.T0 = j.at("T0").get<double>();
      r.meta.f0 = j.at("f0").get<double>();
      r.meta.beta = j.at("beta").get<double>();
      r.meta.snr_inband_db = j.at("snr_inband_db").get<double>();
      r.meta.phase = j.at("phase").get<double>();
      r.meta.power = j.at("power").get<double>();
      r.meta.seed = j.at("seed").get<std::uint64_t>();
      r.meta.clock_offset = j.value("clock_offset", 0.0);
    } else {
      r.has_truth = false;
    }
    if (r.offset != expected_samples)
      throw std::runtime_error("dataset: bad sample offset at line " +
                               std::to_string(lineno));
    expected_samples += r.meta.length;
    ds.records.push_back(std::move(r));
  }
  std::error_code ec;
  const auto bytes = fs::file_size(dir / "signals.f32", ec);
  if (ec)
    throw std::runtime_error("dataset: cannot stat " +
                             (dir / "signals.f32").string());
  if (bytes != expected_samples * 2 * sizeof(float))
    throw std::runtime_error(
        "dataset: signals.f32 length mismatch (have " + std::to_string(bytes) +
        " bytes, meta implies " +
        std::to_string(expected_samples * 2 * sizeof(float)) + ")");
  if (!ds.records.empty() &&
      !std::all_of(ds.records.begin(), ds.records.end(),
                   [](const DatasetRecord& r) { return r.has_truth; }))
    ds.blind_only = true;
  return ds;
}

cvec Dataset::load_signal(std::size_t index) const {
  const DatasetRecord& r = records.at(index);
  std::ifstream f(dir / "signals.f32", std::ios::binary);
  if (!f)
    throw std::runtime_error("dataset: cannot open " +
                             (dir / "signals.f32").string());
  f.seekg(static_cast<std::streamoff>(r.offset * 2 * sizeof(float)));
  std::vector<float> buf(2 * r.meta.length);
  f.read(reinterpret_cast<char*>(buf.data()),
         static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!f)
    throw std::runtime_error("dataset: truncated read at signal " +
                             std::to_string(index));
  cvec x(r.meta.length);
  for (std::size_t t = 0; t < x.size(); ++t)
    x[t] = cplx(buf[2 * t], buf[2 * t + 1]);
  return x;
}

void import_raw_iq(const fs::path& file, const fs::path& sidecar,
                   const fs::path& out_dir, RawFormat format) {
  json side;
  bool have_side = false;
  if (!sidecar.empty() && fs::exists(sidecar)) {
    std::ifstream sf(sidecar);
    side = json::parse(sf, nullptr, true, true);
    have_side = true;
    if (side.contains("format")) {
      const auto fstr = side["format"].get<std::string>();
      if (fstr == "f32") format = RawFormat::F32;
      else if (fstr == "i16") format = RawFormat::I16;
      else throw std::runtime_error("import: unknown sidecar format " + fstr);
    }
  }
  std::ifstream in(file, std::ios::binary);
  if (!in) throw std::runtime_error("import: cannot open " + file.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                          std::istreambuf_iterator<char>());
  const std::size_t unit = format == RawFormat::F32 ? 8 : 4;  // bytes/sample
  if (bytes.size() % unit != 0)
    throw std::runtime_error(
        "import: length mismatch: " + std::to_string(bytes.size()) +
        " bytes is not a whole number of complex samples");
  const std::size_t total = bytes.size() / unit;
  std::vector<float> iq(2 * total);
  if (format == RawFormat::F32) {
    std::memcpy(iq.data(), bytes.data(), bytes.size());
  } else {
    const auto* p = reinterpret_cast<const std::int16_t*>(bytes.data());
    for (std::size_t i = 0; i < 2 * total; ++i)
      iq[i] = static_cast<float>(p[i]) / 32768.0f;
  }

  struct Entry {
    siggen::SignalMeta meta;
    bool has_truth = false;
  };
  std::vector<Entry> entries;
  if (have_side && side.contains("signals")) {
    for (const auto& sj : side["signals"]) {
      Entry e;
      e.meta.length = sj.contains("length")
                          ? sj["length"].get<std::size_t>()
                          : side.at("signal_length").get<std::size_t>();
      if (sj.contains("scheme") && !sj["scheme"].is_null()) {
        const auto s = siggen::scheme_from_name(sj["scheme"].get<std::string>());
        if (!s) throw std::runtime_error("import: unknown scheme in sidecar");
        e.meta.scheme = *s;
        e.meta.T0 = sj.at("T0").get<double>();
        e.meta.f0 = sj.value("f0", 0.0);
        e.meta.beta = sj.value("beta", 0.35);
        e.meta.snr_inband_db = sj.value("snr_inband_db", 0.0);
        e.meta.phase = sj.value("phase", 0.0);
        e.meta.power = sj.value("power", 1.0);
        e.meta.seed = sj.value("seed", std::uint64_t{0});
        e.has_truth = true;
      }
      entries.push_back(e);
    }
  } else if (have_side && side.contains("signal_length")) {
    const auto L = side["signal_length"].get<std::size_t>();
    if (L == 0 || total % L != 0)
      throw std::runtime_error("import: length mismatch: file holds " +
                               std::to_string(total) +
                               " samples, not divisible by signal_length " +
                               std::to_string(L));
    for (std::size_t i = 0; i < total / L; ++i) {
      Entry e;
      e.meta.length = L;
      entries.push_back(e);
    }
  } else {
    Entry e;
    e.meta.length = total;
    entries.push_back(e);
  }
  std::size_t sum = 0;
  for (const auto& e : entries) sum += e.meta.length;
  if (sum != total)
    throw std::runtime_error("import: length mismatch: sidecar sums to " +
                             std::to_string(sum) + " samples, file holds " +
                             std::to_string(total));

  fs::create_directories(out_dir);
  try {
    std::ofstream meta_f(out_dir / "meta.jsonl", std::ios::trunc);
    std::ofstream sig_f(out_dir / "signals.f32",
                        std::ios::binary | std::ios::trunc);
    sig_f.write(reinterpret_cast<const char*>(iq.data()),
                static_cast<std::streamsize>(iq.size() * sizeof(float)));
    std::uint64_t offset = 0;
    const bool blind_only =
        std::any_of(entries.begin(), entries.end(),
                    [](const Entry& e) { return !e.has_truth; });
    for (std::size_t i = 0; i < entries.size(); ++i) {
      meta_f << meta_to_json(entries[i].meta, entries[i].has_truth, offset, i)
                    .dump()
             << "\n";
      offset += entries[i].meta.length;
    }
    json cfg;
    cfg["name"] = "imported";
    cfg["blind_only"] = blind_only;
    cfg["source"] = file.string();
    std::ofstream cfg_f(out_dir / "config.json", std::ios::trunc);
    cfg_f << cfg.dump(2) << "\n";
    if (!meta_f || !sig_f || !cfg_f)
      throw std::runtime_error("import: write failed in " + out_dir.string());
  } catch (...) {
    cleanup_partial(out_dir);
    throw;
  }
}

void extract_dataset_features(const fs::path& dataset_dir,
                              cspcore::FeatureMode mode, const fs::path& out_dir,
                              int jobs) {
  const Dataset ds = Dataset::open(dataset_dir);
  if (mode == cspcore::FeatureMode::Oracle && ds.blind_only)
    throw std::invalid_argument(
        "extract: oracle mode requires ground-truth metadata");
  fs::create_directories(out_dir);
  std::ofstream feat_f(out_dir / "features.bin",
                       std::ios::binary | std::ios::trunc);
  std::ofstream est_f(out_dir / "estimates.jsonl", std::ios::trunc);
  if (!feat_f || !est_f)
    throw std::runtime_error("extract: cannot open outputs in " +
                             out_dir.string());

  struct Item {
    cspcore::CCFeatureVector fv;
    std::string est_line;
  };
  ordered_parallel(
      ds.records.size(), jobs,
      [&](std::size_t i) {
        const DatasetRecord& r = ds.records[i];
        const cvec x = ds.load_signal(i);
        Item it;
        json ej;
        ej["index"] = i;
        if (mode == cspcore::FeatureMode::Oracle) {
          it.fv = cspcore::extract_features(x, r.meta.f0, r.meta.T0,
                                            siggen::noise_power_for(r.meta),
                                            r.meta.power);
          it.fv.label = r.meta.scheme;
          it.fv.snr_db = static_cast<float>(r.meta.snr_inband_db);
          it.fv.mode = cspcore::FeatureMode::Oracle;
          ej["T0_hat"] = r.meta.T0;
          ej["f0_hat"] = r.meta.f0;
          ej["snr_hat_db"] = r.meta.snr_inband_db;
          ej["rate_fallback"] = false;
          ej["cfo_fallback"] = false;
        } else {
          std::optional<double> fallback_T0;
          if (r.has_truth) {
            fallback_T0 = r.meta.T0;
          } else {
            const auto psd = blindest::psd_estimate(x, 2048);
            const double hint = blindest::rms_rate_hint(psd);
            fallback_T0 = 1.0 / std::clamp(hint, 1.0 / 64.0, 1.0);
          }
          const auto est = blindest::estimate_all(x, {}, fallback_T0);
          double power = 0.0;
          for (const auto& v : x) power += std::norm(v);
          power /= static_cast<double>(x.size());
          const double sig_power =
              std::max(power - est.sigma2_hat, 0.05 * power);
          it.fv = cspcore::extract_features(x, est.f0_hat, est.T0_hat,
                                            est.sigma2_hat, sig_power);
          it.fv.label = r.has_truth ? r.meta.scheme
                                    : static_cast<ModulationScheme>(255);
          it.fv.snr_db = static_cast<float>(
              r.has_truth ? r.meta.snr_inband_db : est.snr_hat_db);
          it.fv.mode = cspcore::FeatureMode::Blind;
          ej["T0_hat"] = est.T0_hat;
          ej["f0_hat"] = est.f0_hat;
          ej["snr_hat_db"] = est.snr_hat_db;
          ej["sigma2_hat"] = est.sigma2_hat;
          ej["bandwidth_hat"] = est.bandwidth_hat;
          ej["rate_confidence"] = est.rate_confidence;
          ej["cfo_confidence"] = est.cfo_confidence;
          ej["cfo_order"] = est.cfo_order;
          ej["rate_fallback"] = est.rate_fallback;
          ej["cfo_fallback"] = est.cfo_fallback;
        }
        it.est_line = ej.dump();
        return it;
      },
      [&](std::size_t, Item it) {
        feat_f.write(reinterpret_cast<const char*>(it.fv.values.data()),
                     cspcore::kFeatureCount * sizeof(float));
        const auto label = static_cast<std::uint8_t>(it.fv.label);
        feat_f.write(reinterpret_cast<const char*>(&label), 1);
        feat_f.write(reinterpret_cast<const char*>(&it.fv.snr_db),
                     sizeof(float));
        const auto mb = static_cast<std::uint8_t>(it.fv.mode);
        feat_f.write(reinterpret_cast<const char*>(&mb), 1);
        est_f << it.est_line << "\n";
        if (!feat_f || !est_f)
          throw std::runtime_error("extract: write failed in " +
                                   out_dir.string());
      });
}

namespace {
constexpr std::size_t kFeatureRecordBytes =
    cspcore::kFeatureCount * sizeof(float) + 1 + sizeof(float) + 1;
}

FeatureFile FeatureFile::load(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::error_code ec;
  const auto bytes = fs::file_size(path, ec);
  if (ec || bytes % kFeatureRecordBytes != 0)
    throw std::runtime_error("features file " + path.string() +
                             " is not a whole number of records");
  FeatureFile ff;
  ff.records.resize(bytes / kFeatureRecordBytes);
  for (auto& r : ff.records) {
    f.read(reinterpret_cast<char*>(r.values.data()),
           cspcore::kFeatureCount * sizeof(float));
    std::uint8_t label = 0, mode = 0;
    f.read(reinterpret_cast<char*>(&label), 1);
    f.read(reinterpret_cast<char*>(&r.snr_db), sizeof(float));
    f.read(reinterpret_cast<char*>(&mode), 1);
    r.label = static_cast<ModulationScheme>(label);
    r.mode = static_cast<cspcore::FeatureMode>(mode);
  }
  if (!f) throw std::runtime_error("truncated features file " + path.string());
  return ff;
}

void FeatureFile::save(const fs::path& path) const {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  for (const auto& r : records) {
    f.write(reinterpret_cast<const char*>(r.values.data()),
            cspcore::kFeatureCount * sizeof(float));
    const auto label = static_cast<std::uint8_t>(r.label);
    f.write(reinterpret_cast<const char*>(&label), 1);
    f.write(reinterpret_cast<const char*>(&r.snr_db), sizeof(float));
    const auto mode = static_cast<std::uint8_t>(r.mode);
    f.write(reinterpret_cast<const char*>(&mode), 1);
  }
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

nn::FeatureSet FeatureFile::to_feature_set() const {
  nn::FeatureSet fs;
  fs.x.resize(cspcore::kFeatureCount,
              static_cast<Eigen::Index>(records.size()));
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto label = static_cast<std::uint8_t>(records[i].label);
    if (label >= siggen::kNumSchemes)
      throw std::invalid_argument(
          "feature record without a truth label cannot feed training/eval");
    fs.labels.push_back(label);
    fs.snr_db.push_back(records[i].snr_db);
    for (int k = 0; k < cspcore::kFeatureCount; ++k)
      fs.x(k, static_cast<Eigen::Index>(i)) = records[i].values[k];
  }
  return fs;
}

Report run_experiment(const ExperimentPlan& plan, const ExperimentInputs& in,
                      const fs::path& out_dir) {
  if (plan.net != "cap" && plan.net != "cnn")
    throw std::invalid_argument("run_experiment: net must be cap or cnn");
  if (std::abs(plan.split_train + plan.split_val + plan.split_test - 1.0) >
      1e-9)
    throw std::invalid_argument("run_experiment: split must sum to 1");
  fs::create_directories(out_dir);
  std::string stage = "load";
  auto write_state = [&](const std::string& status, const std::string& err) {
    json s;
    s["stage"] = stage;
    s["status"] = status;
    if (!err.empty()) s["error"] = err;
    std::ofstream f(out_dir / "state.json", std::ios::trunc);
    f << s.dump(2) << "\n";
  };
  try {
    const FeatureFile train_file = FeatureFile::load(in.train_features);
    const nn::FeatureSet all = train_file.to_feature_set();
    const bool capsule = plan.net == "cap";
    auto shape_input = [&](const Eigen::MatrixXf& raw) {
      return capsule ? nn::capsule_input(raw) : nn::cnn_input(raw);
    };

    // per-class split by signal index: first 70% train, next 5% val, rest test
    std::vector<std::vector<Eigen::Index>> by_class(siggen::kNumSchemes);
    for (std::size_t i = 0; i < all.count(); ++i)
      by_class[all.labels[i]].push_back(static_cast<Eigen::Index>(i));
    Report rep;
    rep.net = plan.net;
    rep.train_config = plan.train_config;
    rep.mode = plan.mode == cspcore::FeatureMode::Oracle ? "oracle" : "blind";
    rep.seed = plan.seed;
    std::vector<Eigen::Index> itr, iva, ite;
    for (const auto& idx : by_class) {
      const std::size_t n = idx.size();
      if (n < 4) rep.degenerate = true;
      std::size_t ntr =
          n ? std::max<std::size_t>(
                  1, static_cast<std::size_t>(plan.split_train *
                                              static_cast<double>(n)))
            : 0;
      ntr = std::min(ntr, n);
      std::size_t ntrva = static_cast<std::size_t>(
          (plan.split_train + plan.split_val) * static_cast<double>(n));
      ntrva = std::clamp(ntrva, ntr, n);
      std::size_t p = 0;
      for (; p < ntr; ++p) itr.push_back(idx[p]);
      for (; p < ntrva; ++p) iva.push_back(idx[p]);
      for (; p < n; ++p) ite.push_back(idx[p]);
    }
    auto subset = [&](const std::vector<Eigen::Index>& ids) {
      nn::FeatureSet s;
      s.x.resize(all.x.rows(), static_cast<Eigen::Index>(ids.size()));
      for (std::size_t j = 0; j < ids.size(); ++j) {
        s.x.col(static_cast<Eigen::Index>(j)) = all.x.col(ids[j]);
        s.labels.push_back(all.labels[static_cast<std::size_t>(ids[j])]);
        s.snr_db.push_back(all.snr_db[static_cast<std::size_t>(ids[j])]);
      }
      s.x = shape_input(s.x);
      return s;
    };
    nn::FeatureSet tr = subset(itr), va = subset(iva), te = subset(ite);

    nn::NetworkSpec spec = capsule ? nn::build_capsule_net() : nn::build_cnn();
    nn::Network<float> net(spec, plan.seed);
    const fs::path ckpt_path =
        out_dir / ("checkpoint_" + sanitize(plan.net) + "_" +
                   sanitize(plan.train_config) + ".bin");

    stage = "train";
    std::vector<nn::EpochStats> history;
    bool resumed = false;
    if (fs::exists(ckpt_path)) {
      try {
        const nn::Checkpoint ck = nn::load_checkpoint(ckpt_path);
        if (ck.signature == spec.signature()) {
          net.restore(ck);
          history = ck.history;
          rep.best_epoch = ck.epoch;
          rep.val_accuracy = ck.val_accuracy;
          resumed = true;
        }
      } catch (const std::exception&) {
        resumed = false;  // unreadable checkpoint: retrain from scratch
      }
    }
    if (!resumed) {
      nn::TrainOptions opt = plan.train_options;
      opt.seed = plan.seed;
      try {
        history = net.train(tr, va, opt);
      } catch (const nn::TrainingDiverged& e) {
        nn::save_checkpoint(e.last_good, ckpt_path);
        throw;
      }
      int best_epoch = 0;
      double best_val = -1.0;
      for (const auto& h : history)
        if (h.val_accuracy > best_val) {
          best_val = h.val_accuracy;
          best_epoch = h.epoch;
        }
      rep.best_epoch = best_epoch;
      rep.val_accuracy = std::max(0.0, best_val);
      nn::save_checkpoint(
          net.make_checkpoint(best_epoch, rep.val_accuracy, history, ""),
          ckpt_path);
    }
    nn::write_history_csv(history, out_dir / "history.csv");

    stage = "eval";
    rep.self = {plan.train_config + "-test", net.evaluate(te)};
    for (const auto& [name, path] : in.cross) {
      FeatureFile ff = FeatureFile::load(path);
      nn::FeatureSet cs = ff.to_feature_set();
      cs.x = shape_input(cs.x);
      rep.cross.push_back({name, net.evaluate(cs)});
    }

    // blind-estimation failure count from the sibling estimates.jsonl
    const fs::path est_path = in.train_features.parent_path() /
                              "estimates.jsonl";
    if (fs::exists(est_path)) {
      rep.blind_fallbacks = 0;
      std::ifstream ef(est_path);
      std::string line;
      while (std::getline(ef, line)) {
        if (line.empty()) continue;
        const json ej = json::parse(line);
        if (ej.value("rate_fallback", false) || ej.value("cfo_fallback", false))
          rep.blind_fallbacks++;
      }
    }

    stage = "report";
    json rj;
    rj["net"] = rep.net;
    rj["train_config"] = rep.train_config;
    rj["mode"] = rep.mode;
    rj["seed"] = rep.seed;
    rj["degenerate"] = rep.degenerate;
    rj["best_epoch"] = rep.best_epoch;
    rj["val_accuracy"] = rep.val_accuracy;
    rj["blind_fallbacks"] = rep.blind_fallbacks;
    auto emit_entry = [&](const Report::Entry& e) {
      const std::string tag = sanitize(plan.net) + "_" +
                              sanitize(plan.train_config) + "_" +
                              sanitize(e.test_name);
      write_confusion_csv(out_dir / ("confusion_" + tag + ".csv"),
                          e.eval.confusion);
      write_per_snr_csv(out_dir / ("per_snr_" + tag + ".csv"), e.eval.per_snr);
      write_per_snr_svg(out_dir / ("per_snr_" + tag + ".svg"), e.eval.per_snr,
                        plan.net + " on " + e.test_name);
      json ej = eval_to_json(e.eval);
      ej["test"] = e.test_name;
      return ej;
    };
    rj["self"] = emit_entry(rep.self);
    auto& cj = rj["cross"] = json::array();
    for (std::size_t i = 0; i < rep.cross.size(); ++i) {
      json ej = emit_entry(rep.cross[i]);
      ej["generalization_gap"] = rep.gap(i);
      cj.push_back(std::move(ej));
    }
    std::ofstream rf(out_dir / "report.json", std::ios::trunc);
    rf << rj.dump(2) << "\n";
    if (!rf) throw std::runtime_error("report write failed");
    stage = "done";
    write_state("ok", "");
    return rep;
  } catch (const std::exception& e) {
    write_state("failed", e.what());
    throw;
  }
}

int selftest() {
  int failures = 0;
  auto check = [&](const char* name, bool ok) {
    std::printf("[selftest] %s %s\n", ok ? "PASS" : "FAIL", name);
    if (!ok) ++failures;
  };
  try {
    const auto pat = cspcore::cf_pattern(0.001, 10.0);
    check("cf_pattern emits 165 slots", pat.slots.size() == 165);

    bool unit = true;
    for (int s = 0; s < siggen::kNumSchemes; ++s) {
      const auto alpha = siggen::alphabet(static_cast<ModulationScheme>(s));
      double p = 0;
      for (const auto& a : alpha) p += std::norm(a);
      p /= static_cast<double>(alpha.size());
      if (std::abs(p - 1.0) > 1e-12) unit = false;
    }
    check("alphabets have unit average power", unit);

    const auto cap_shapes = nn::propagate_shapes(nn::build_capsule_net());
    const auto cnn_shapes = nn::propagate_shapes(nn::build_cnn());
    check("capsule stem shape 11x8x56",
          cap_shapes[0] == nn::Shape{11, 8, 56});
    check("capsule output 8-way", cap_shapes.back() == nn::Shape{1, 1, 8});
    check("cnn first pool 82x1x16", cnn_shapes[3] == nn::Shape{82, 1, 16});
    check("cnn output 8-way", cnn_shapes.back() == nn::Shape{1, 1, 8});

    siggen::SignalMeta m;
    m.scheme = ModulationScheme::QPSK;
    m.T0 = 7.0; m.beta = 0.35; m.snr_inband_db = 10.0;
    m.seed = 99; m.length = 4096;
    const cvec a = siggen::synthesize(m), b = siggen::synthesize(m);
    check("synthesis deterministic per seed", a == b);

    nn::Network<double> net(nn::build_cnn(), 11);
    std::mt19937_64 rng(5);
    std::normal_distribution<double> nd;
    nn::Network<double>::Matrix x(165, 3);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = nd(rng);
    auto probs = net.forward(x, true);
    bool norm_ok = true;
    for (int j = 0; j < 3; ++j)
      if (std::abs(probs.col(j).sum() - 1.0) > 1e-12) norm_ok = false;
    check("softmax columns sum to 1", norm_ok);

    nn::Network<double>::Matrix dl = probs;
    for (int j = 0; j < 3; ++j) dl(j % 8, j) -= 1.0;
    dl /= 3.0;
    net.backward(dl);
    auto g = net.get_gradients();
    auto params = net.get_parameters();
    std::mt19937_64 pick(17);
    bool grads_ok = true;
    for (int t = 0; t < 20; ++t) {
      const std::size_t i = pick() % params.size();
      const double h = 1e-5;
      auto loss = [&] {
        auto p = net.forward(x, true);
        double L = 0;
        for (int j = 0; j < 3; ++j)
          L -= std::log(std::max(1e-300, p(j % 8, j)));
        return L / 3.0;
      };
      auto pp = params;
      pp[i] += h;
      net.set_parameters(pp);
      const double lp = loss();
      pp[i] -= 2 * h;
      net.set_parameters(pp);
      const double lm = loss();
      net.set_parameters(params);
      const double fd = (lp - lm) / (2 * h);
      const double rel = std::abs(fd - g[i]) /
                         std::max({1e-8, std::abs(fd), std::abs(g[i])});
      if (rel > 1e-4 && !(std::abs(fd) < 1e-10 && std::abs(g[i]) < 1e-10))
        grads_ok = false;
    }
    check("spot gradient check (1e-4 rel)", grads_ok);
  } catch (const std::exception& e) {
    std::printf("[selftest] FAIL exception: %s\n", e.what());
    ++failures;
  }
  return failures;
}

}  // namespace ccmod::pipeline
