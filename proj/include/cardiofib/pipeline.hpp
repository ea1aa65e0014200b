#ifndef CARDIOFIB_PIPELINE_HPP
#define CARDIOFIB_PIPELINE_HPP

// Stage orchestration over a run directory: configuration profiles, artifact
// layout, the hash manifest used for resuming, and CSV/SVG export.
//
// Stages, in dependency order:
//   phantom      tensors.dtv, mask.msk, bundles.fft, bundle_labels.csv
//   track        streamlines.fib, tracking.json
//   features     tracked.fft, dataset.fft, split.json, features.json
//   train-blstm  blstm.ckpt          train-tae  tae.ckpt
//   embed        blstm.emb, tae.emb  fuse       fused.emb
//   pca          pca.emb, pca.json   grid       grid.csv, grid.json
//   cluster      labels.csv, stability.json
//   metrics      metrics.json, metrics.csv
//   tsne         tsne.csv            plot       tsne.svg
// Every artifact lives under <output_dir>/<stage>/.

#include "binary_format.hpp"
#include "clustering.hpp"
#include "embedding.hpp"
#include "features.hpp"
#include "phantom.hpp"
#include "seqmodel/train.hpp"
#include "tractography.hpp"
#include "tsne.hpp"
#include "validation.hpp"

#include <openssl/evp.h>

#include <array>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace cardiofib {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Configuration

inline std::string pooling_name(seq::Pooling p) {
  switch (p) {
    case seq::Pooling::kFirst: return "first";
    case seq::Pooling::kMax: return "max";
    default: return "mean";
  }
}

struct FeatureStageConfig {
  std::string source = "bundles";  // bundles | tracked | file
  std::string input;               // .fft path when source == file
  std::size_t min_points = kMinSequencePoints;
  std::size_t max_points = 0;      // 0: no cap
  double ha_tolerance = 2.0;       // degrees, mid-wall check on tracked fibers
};

struct EmbeddingStageConfig {
  seq::Pooling pooling = seq::Pooling::kMean;
  PcaOptions pca;
};

struct ClusterStageConfig {
  int min_samples = 0;       // 0: take the best grid row
  int min_cluster_size = 0;  // 0: take the best grid row
  bool allow_single_cluster = false;
};

struct GridStageConfig {
  std::vector<int> min_samples{5, 10, 25};
  std::vector<int> min_cluster_size{10, 20, 40, 80};
};

/// Stage seeds are derived from `seed` by fixed offsets so that a single
/// number reproduces a run; the snapshot in the manifest lists all of them.
struct PipelineConfig {
  std::string profile = "desk";
  std::string output_dir = "runs/desk";
  std::uint64_t seed = 2024;
  std::size_t threads = 1;
  PhantomSpec phantom;
  BundleSpec bundles = BundleSpec::four_family_default();
  TrackingParams tracking;
  FeatureStageConfig features;
  seq::BlstmConfig blstm;
  seq::TrainConfig blstm_train;
  seq::TaeConfig tae;
  seq::TrainConfig tae_train;
  EmbeddingStageConfig embedding;
  GridStageConfig grid;
  ClusterStageConfig clustering;
  TsneParams tsne;

  enum SeedSlot : std::uint64_t { kBundles = 0, kSplit, kBlstmInit, kBlstmTrain, kTaeInit, kTaeTrain, kTsne };
  std::uint64_t seed_for(SeedSlot s) const { return seed + 1000003ull * static_cast<std::uint64_t>(s); }

  static PipelineConfig desk() {
    PipelineConfig c;
    c.tracking.step = 0.5;
    c.tracking.seed_stride = 4;
    c.tracking.max_steps = 200;
    c.blstm_train.batch_size = 16;
    c.blstm_train.epochs = 30;
    c.blstm_train.lr = 3e-3;
    c.tae_train.batch_size = 16;
    c.tae_train.epochs = 20;
    c.tae_train.lr = 1e-3;
    return c;
  }

  /// Model and training hyperparameters at full scale; intended for user
  /// supplied fiber sets (features.source = file).
  static PipelineConfig paper() {
    PipelineConfig c;
    c.profile = "paper";
    c.output_dir = "runs/paper";
    c.features.source = "tracked";
    c.features.max_points = 591;
    c.blstm = seq::BlstmConfig::paper();
    c.blstm_train = seq::TrainConfig::paper_blstm();
    c.tae = seq::TaeConfig::paper();
    c.tae_train = seq::TrainConfig::paper_tae();
    c.grid.min_samples = {10, 25, 50, 100, 250, 500, 750};
    c.grid.min_cluster_size = {100, 250, 500, 750, 1000, 1500, 2000, 5000};
    return c;
  }

  static PipelineConfig for_profile(const std::string& name) {
    if (name == "desk") return desk();
    if (name == "paper") return paper();
    throw ConfigError("unknown profile '" + name + "' (expected desk or paper)");
  }

  void validate() const {
    phantom.validate(tracking.fa_min);
    bundles.validate();
    tracking.validate();
    blstm.validate();
    blstm_train.validate();
    tae.validate();
    tae_train.validate();
    if (features.source != "bundles" && features.source != "tracked" && features.source != "file")
      throw ConfigError("features.source must be bundles, tracked or file");
    if (features.source == "file" && features.input.empty())
      throw ConfigError("features.input is required when features.source is file");
    if (features.max_points && features.max_points < features.min_points)
      throw ConfigError("features.max_points must be 0 or >= min_points");
    if (grid.min_samples.empty() || grid.min_cluster_size.empty()) throw ConfigError("grid lists must be non-empty");
    for (int v : grid.min_samples)
      if (v < 1) throw ConfigError("grid.min_samples entries must be >= 1");
    for (int v : grid.min_cluster_size)
      if (v < 2) throw ConfigError("grid.min_cluster_size entries must be >= 2");
    if ((clustering.min_samples == 0) != (clustering.min_cluster_size == 0))
      throw ConfigError("clustering: set both min_samples and min_cluster_size, or neither");
    if (clustering.min_samples) ClusterParams{clustering.min_samples, clustering.min_cluster_size, false}.validate();
    if (!(tsne.perplexity > 0.0) || tsne.iterations < 1) throw ConfigError("tsne: bad perplexity or iterations");
    if (threads == 0) throw ConfigError("threads must be >= 1");
  }

  io::Json tracking_json() const {
    io::Json j{{"step", tracking.step},
               {"fa_min", tracking.fa_min},
               {"max_angle", tracking.max_angle},
               {"max_steps", tracking.max_steps},
               {"seed_stride", tracking.seed_stride}};
    j["min_length"] = tracking.min_length ? io::Json(*tracking.min_length) : io::Json(nullptr);
    return j;
  }

  io::Json to_json() const {
    return {{"profile", profile},
            {"output_dir", output_dir},
            {"seed", seed},
            {"threads", threads},
            {"phantom", phantom.to_json()},
            {"bundles", bundles.to_json()},
            {"tracking", tracking_json()},
            {"features",
             {{"source", features.source},
              {"input", features.input},
              {"min_points", features.min_points},
              {"max_points", features.max_points},
              {"ha_tolerance", features.ha_tolerance}}},
            {"blstm", {{"model", blstm.to_json()}, {"train", blstm_train.to_json()}}},
            {"tae", {{"model", tae.to_json()}, {"train", tae_train.to_json()}}},
            {"embedding",
             {{"pooling", pooling_name(embedding.pooling)},
              {"variance_target", embedding.pca.variance_target},
              {"fixed_k", embedding.pca.fixed_k}}},
            {"grid", {{"min_samples", grid.min_samples}, {"min_cluster_size", grid.min_cluster_size}}},
            {"clustering",
             {{"min_samples", clustering.min_samples},
              {"min_cluster_size", clustering.min_cluster_size},
              {"allow_single_cluster", clustering.allow_single_cluster}}},
            {"tsne",
             {{"perplexity", tsne.perplexity},
              {"iterations", tsne.iterations},
              {"learning_rate", tsne.learning_rate},
              {"early_exaggeration", tsne.early_exaggeration},
              {"exaggeration_iters", tsne.exaggeration_iters}}},
            {"derived_seeds",
             {{"bundles", seed_for(kBundles)},
              {"split", seed_for(kSplit)},
              {"blstm_init", seed_for(kBlstmInit)},
              {"blstm_train", seed_for(kBlstmTrain)},
              {"tae_init", seed_for(kTaeInit)},
              {"tae_train", seed_for(kTaeTrain)},
              {"tsne", seed_for(kTsne)}}}};
  }

  /// Profile defaults, then every key present in j. Unknown top-level keys
  /// are rejected so that typos do not pass silently.
  static PipelineConfig from_json(const io::Json& j, std::optional<std::string> profile_override = std::nullopt) {
    static const std::set<std::string> known{"profile", "output_dir", "seed",     "threads",   "phantom",
                                             "bundles", "tracking",   "features", "blstm",     "tae",
                                             "embedding", "grid",     "clustering", "tsne",    "derived_seeds"};
    if (!j.is_object()) throw ConfigError("config: top level must be an object");
    for (const auto& [k, v] : j.items())
      if (!known.count(k)) throw ConfigError("config: unknown key '" + k + "'");
    try {
      PipelineConfig c = for_profile(profile_override ? *profile_override : j.value("profile", std::string("desk")));
      c.output_dir = j.value("output_dir", c.output_dir);
      c.seed = j.value("seed", c.seed);
      c.threads = j.value("threads", c.threads);
      if (j.contains("phantom")) c.phantom = PhantomSpec::from_json(j["phantom"]);
      if (j.contains("bundles")) c.bundles = BundleSpec::from_json(j["bundles"]);
      if (j.contains("tracking")) {
        const auto& t = j["tracking"];
        c.tracking.step = t.value("step", c.tracking.step);
        c.tracking.fa_min = t.value("fa_min", c.tracking.fa_min);
        c.tracking.max_angle = t.value("max_angle", c.tracking.max_angle);
        c.tracking.max_steps = t.value("max_steps", c.tracking.max_steps);
        c.tracking.seed_stride = t.value("seed_stride", c.tracking.seed_stride);
        if (t.contains("min_length") && !t["min_length"].is_null()) c.tracking.min_length = t["min_length"].get<double>();
      }
      if (j.contains("features")) {
        const auto& f = j["features"];
        c.features.source = f.value("source", c.features.source);
        c.features.input = f.value("input", c.features.input);
        c.features.min_points = f.value("min_points", c.features.min_points);
        c.features.max_points = f.value("max_points", c.features.max_points);
        c.features.ha_tolerance = f.value("ha_tolerance", c.features.ha_tolerance);
      }
      if (j.contains("blstm")) {
        if (j["blstm"].contains("model")) c.blstm = seq::BlstmConfig::from_json(j["blstm"]["model"]);
        if (j["blstm"].contains("train")) c.blstm_train = seq::TrainConfig::from_json(j["blstm"]["train"], c.blstm_train);
      }
      if (j.contains("tae")) {
        if (j["tae"].contains("model")) c.tae = seq::TaeConfig::from_json(j["tae"]["model"]);
        if (j["tae"].contains("train")) c.tae_train = seq::TrainConfig::from_json(j["tae"]["train"], c.tae_train);
      }
      if (j.contains("embedding")) {
        const auto& e = j["embedding"];
        if (e.contains("pooling")) c.embedding.pooling = seq::pooling_from_string(e["pooling"].get<std::string>());
        c.embedding.pca.variance_target = e.value("variance_target", c.embedding.pca.variance_target);
        c.embedding.pca.fixed_k = e.value("fixed_k", c.embedding.pca.fixed_k);
      }
      if (j.contains("grid")) {
        c.grid.min_samples = j["grid"].value("min_samples", c.grid.min_samples);
        c.grid.min_cluster_size = j["grid"].value("min_cluster_size", c.grid.min_cluster_size);
      }
      if (j.contains("clustering")) {
        const auto& k = j["clustering"];
        c.clustering.min_samples = k.value("min_samples", c.clustering.min_samples);
        c.clustering.min_cluster_size = k.value("min_cluster_size", c.clustering.min_cluster_size);
        c.clustering.allow_single_cluster = k.value("allow_single_cluster", c.clustering.allow_single_cluster);
      }
      if (j.contains("tsne")) {
        const auto& t = j["tsne"];
        c.tsne.perplexity = t.value("perplexity", c.tsne.perplexity);
        c.tsne.iterations = t.value("iterations", c.tsne.iterations);
        c.tsne.learning_rate = t.value("learning_rate", c.tsne.learning_rate);
        c.tsne.early_exaggeration = t.value("early_exaggeration", c.tsne.early_exaggeration);
        c.tsne.exaggeration_iters = t.value("exaggeration_iters", c.tsne.exaggeration_iters);
        c.tsne.momentum_switch = c.tsne.exaggeration_iters;
      }
      return c;
    } catch (const io::Json::exception& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
  }

  static PipelineConfig load(const std::string& path, std::optional<std::string> profile_override = std::nullopt) {
    io::Json j;
    try {
      j = io::Json::parse(io::read_file(path));
    } catch (const io::Json::exception& e) {
      throw ConfigError(path + ": " + e.what());
    } catch (const DataError& e) {
      throw ConfigError(e.what());
    }
    return from_json(j, std::move(profile_override));
  }
};

// ---------------------------------------------------------------------------
// Hashing

/// Hex SHA-256 of a file's bytes.
inline std::string sha256_file(const std::string& path) {
  const std::string bytes = io::read_file(path);
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(), nullptr) != 1)
    throw Error("sha256 failed for " + path);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV and SVG export

inline void write_text(const std::string& path, const std::string& text) { io::write_file(path, text); }

inline std::string labels_csv(const std::vector<std::size_t>& ids, const std::vector<int>& labels) {
  if (ids.size() != labels.size()) throw DataError("labels csv: id count != label count");
  std::string out = "fiber_id,label\n";
  for (std::size_t i = 0; i < ids.size(); ++i) out += std::to_string(ids[i]) + "," + std::to_string(labels[i]) + "\n";
  return out;
}

inline std::string tsne_csv(const std::vector<std::size_t>& ids, const Matrix& coords) {
  if (static_cast<Eigen::Index>(ids.size()) != coords.rows() || coords.cols() != 2)
    throw DataError("tsne csv: shape mismatch");
  std::string out = "fiber_id,x,y\n";
  for (std::size_t i = 0; i < ids.size(); ++i)
    out += std::to_string(ids[i]) + "," + number_token(coords(i, 0)) + "," + number_token(coords(i, 1)) + "\n";
  return out;
}

namespace detail {

inline std::vector<std::vector<std::string>> read_csv(const std::string& path, const std::vector<std::string>& header) {
  std::istringstream in(io::read_file(path));
  std::string line;
  std::vector<std::vector<std::string>> rows;
  auto split = [](const std::string& s) {
    std::vector<std::string> f;
    std::string cur;
    for (char ch : s) {
      if (ch == ',') {
        f.push_back(cur);
        cur.clear();
      } else if (ch != '\r') {
        cur += ch;
      }
    }
    f.push_back(cur);
    return f;
  };
  if (!std::getline(in, line) || split(line) != header) throw DataError(path + ": unexpected CSV header");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto f = split(line);
    if (f.size() != header.size()) throw DataError(path + ": malformed CSV row '" + line + "'");
    rows.push_back(std::move(f));
  }
  return rows;
}

template <typename T>
T parse_number(const std::string& s, const std::string& path) {
  try {
    std::size_t used = 0;
    T v;
    if constexpr (std::is_same_v<T, double>)
      v = std::stod(s, &used);
    else if constexpr (std::is_same_v<T, int>)
      v = std::stoi(s, &used);
    else
      v = static_cast<T>(std::stoull(s, &used));
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DataError(path + ": bad number '" + s + "'");
  }
}

}  // namespace detail

struct LabelTable {
  std::vector<std::size_t> ids;
  std::vector<int> labels;
};

inline LabelTable read_labels_csv(const std::string& path) {
  LabelTable t;
  for (const auto& r : detail::read_csv(path, {"fiber_id", "label"})) {
    t.ids.push_back(detail::parse_number<std::size_t>(r[0], path));
    t.labels.push_back(detail::parse_number<int>(r[1], path));
  }
  return t;
}

struct TsneTable {
  std::vector<std::size_t> ids;
  Matrix coords;
};

inline TsneTable read_tsne_csv(const std::string& path) {
  const auto rows = detail::read_csv(path, {"fiber_id", "x", "y"});
  TsneTable t;
  t.coords.resize(static_cast<Eigen::Index>(rows.size()), 2);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    t.ids.push_back(detail::parse_number<std::size_t>(rows[i][0], path));
    t.coords(i, 0) = detail::parse_number<double>(rows[i][1], path);
    t.coords(i, 1) = detail::parse_number<double>(rows[i][2], path);
  }
  return t;
}

inline constexpr const char* kNoiseColor = "#9e9e9e";

/// Label k >= 0 maps to a fixed 12-entry palette, cycling.
inline const char* label_color(int label) {
  static constexpr std::array<const char*, 12> palette{"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
                                                      "#9467bd", "#8c564b", "#e377c2", "#17becf",
                                                      "#bcbd22", "#393b79", "#637939", "#843c39"};
  return label < 0 ? kNoiseColor : palette[static_cast<std::size_t>(label) % palette.size()];
}

/// Scatter plot of the 2-D projection, one circle per fiber colored by
/// label; noise is drawn first so clusters stay visible on top.
inline std::string scatter_svg(const TsneTable& pts, const LabelTable& labels) {
  if (pts.ids.empty()) throw DataError("plot: empty input");
  if (pts.ids != labels.ids) throw DataError("plot: fiber ids of the projection and the labels differ");
  const double size = 640.0, margin = 24.0;
  const Eigen::RowVector2d lo = pts.coords.colwise().minCoeff();
  const Eigen::RowVector2d hi = pts.coords.colwise().maxCoeff();
  const double span = std::max({hi[0] - lo[0], hi[1] - lo[1], 1e-12});
  const double scale = (size - 2.0 * margin) / span;
  char buf[160];
  std::string out;
  std::snprintf(buf, sizeof buf,
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%.0f\" height=\"%.0f\" viewBox=\"0 0 %.0f %.0f\">\n",
                size, size + 40.0, size, size + 40.0);
  out += buf;
  out += "<rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>\n";
  for (int pass = 0; pass < 2; ++pass)
    for (std::size_t i = 0; i < pts.ids.size(); ++i) {
      const int l = labels.labels[i];
      if ((l < 0) != (pass == 0)) continue;
      const double x = margin + (pts.coords(i, 0) - lo[0]) * scale;
      const double y = size - margin - (pts.coords(i, 1) - lo[1]) * scale;
      std::snprintf(buf, sizeof buf, "<circle class=\"fiber\" cx=\"%.2f\" cy=\"%.2f\" r=\"3\" fill=\"%s\"/>\n", x, y,
                    label_color(l));
      out += buf;
    }
  std::set<int> present(labels.labels.begin(), labels.labels.end());
  double lx = margin;
  for (int l : present) {
    std::snprintf(buf, sizeof buf,
                  "<rect x=\"%.0f\" y=\"%.0f\" width=\"10\" height=\"10\" fill=\"%s\"/>"
                  "<text x=\"%.0f\" y=\"%.0f\" font-family=\"sans-serif\" font-size=\"11\">%s</text>\n",
                  lx, size + 12.0, label_color(l), lx + 14.0, size + 21.0,
                  l < 0 ? "noise" : ("cluster " + std::to_string(l)).c_str());
    out += buf;
    lx += 80.0;
  }
  out += "</svg>\n";
  return out;
}

// ---------------------------------------------------------------------------
// Manifest

struct StageRecord {
  std::map<std::string, std::string> inputs;   // relative path -> sha256
  std::map<std::string, std::string> outputs;  // relative path -> sha256
  io::Json config;
  double seconds = 0.0;
  std::string status;  // ok | warning: ... | failed: ...
};

struct RunManifest {
  io::Json config_snapshot;
  std::map<std::string, StageRecord> stages;

  io::Json to_json() const {
    io::Json st = io::Json::object();
    for (const auto& [name, r] : stages)
      st[name] = {{"inputs", r.inputs},
                  {"outputs", r.outputs},
                  {"config", r.config},
                  {"seconds", r.seconds},
                  {"status", r.status}};
    return {{"config", config_snapshot}, {"stages", st}};
  }

  static RunManifest from_json(const io::Json& j) {
    RunManifest m;
    m.config_snapshot = j.value("config", io::Json::object());
    const io::Json stages = j.value("stages", io::Json::object());
    for (const auto& [name, r] : stages.items()) {
      StageRecord rec;
      rec.inputs = r.value("inputs", std::map<std::string, std::string>{});
      rec.outputs = r.value("outputs", std::map<std::string, std::string>{});
      rec.config = r.value("config", io::Json::object());
      rec.seconds = r.value("seconds", 0.0);
      rec.status = r.value("status", std::string());
      m.stages[name] = std::move(rec);
    }
    return m;
  }
};

// ---------------------------------------------------------------------------
// Stages

inline const std::vector<std::string>& stage_order() {
  static const std::vector<std::string> order{"phantom", "track", "features", "train-blstm", "train-tae",
                                              "embed",   "fuse",  "pca",      "grid",        "cluster",
                                              "metrics", "tsne",  "plot"};
  return order;
}

struct StageOutcome {
  std::string name;
  bool executed = false;  // false when resumed from the manifest
  std::string status;
  double seconds = 0.0;
};

class Pipeline {
 public:
  using Logger = std::function<void(const std::string&)>;

  explicit Pipeline(PipelineConfig cfg, Logger log = {}) : cfg_(std::move(cfg)), log_(std::move(log)) {
    cfg_.validate();
    set_max_threads(cfg_.threads);
  }

  const PipelineConfig& config() const { return cfg_; }
  fs::path root() const { return fs::path(cfg_.output_dir); }
  fs::path manifest_path() const { return root() / "manifest.json"; }
  std::string path(const std::string& stage, const std::string& file) const { return (root() / stage / file).string(); }
  /// Artifact paths are relative to the run directory; external inputs are absolute.
  fs::path resolve(const std::string& rel) const { return fs::path(rel).is_absolute() ? fs::path(rel) : root() / rel; }

  /// Relative artifact paths a stage reads and writes.
  std::vector<std::string> inputs_of(const std::string& stage) const {
    if (stage == "phantom") return {};
    if (stage == "track") return {"phantom/tensors.dtv", "phantom/mask.msk"};
    if (stage == "features") {
      std::vector<std::string> in{"phantom/mask.msk", "track/streamlines.fib"};
      if (cfg_.features.source == "bundles") in.push_back("phantom/bundles.fft");
      if (cfg_.features.source == "file") in.push_back(fs::absolute(cfg_.features.input).string());
      return in;
    }
    if (stage == "train-blstm" || stage == "train-tae") return {"features/dataset.fft", "features/split.json"};
    if (stage == "embed") return {"features/dataset.fft", "features/split.json", "train-blstm/blstm.ckpt", "train-tae/tae.ckpt"};
    if (stage == "fuse") return {"embed/blstm.emb", "embed/tae.emb"};
    if (stage == "pca") return {"fuse/fused.emb"};
    if (stage == "grid") return {"pca/pca.emb"};
    if (stage == "cluster") return {"pca/pca.emb", "grid/grid.json"};
    if (stage == "metrics") {
      std::vector<std::string> in{"pca/pca.emb", "cluster/labels.csv", "cluster/stability.json"};
      if (cfg_.features.source == "bundles") in.push_back("phantom/bundle_labels.csv");
      return in;
    }
    if (stage == "tsne") return {"pca/pca.emb"};
    if (stage == "plot") return {"tsne/tsne.csv", "cluster/labels.csv"};
    throw ConfigError("unknown stage '" + stage + "'");
  }

  std::vector<std::string> outputs_of(const std::string& stage) const {
    if (stage == "phantom")
      return {"phantom/tensors.dtv", "phantom/mask.msk", "phantom/bundles.fft", "phantom/bundle_labels.csv"};
    if (stage == "track") return {"track/streamlines.fib", "track/tracking.json"};
    if (stage == "features")
      return {"features/tracked.fft", "features/dataset.fft", "features/split.json", "features/features.json"};
    if (stage == "train-blstm") return {"train-blstm/blstm.ckpt"};
    if (stage == "train-tae") return {"train-tae/tae.ckpt"};
    if (stage == "embed") return {"embed/blstm.emb", "embed/tae.emb"};
    if (stage == "fuse") return {"fuse/fused.emb"};
    if (stage == "pca") return {"pca/pca.emb", "pca/pca.json"};
    if (stage == "grid") return {"grid/grid.csv", "grid/grid.json"};
    if (stage == "cluster") return {"cluster/labels.csv", "cluster/stability.json"};
    if (stage == "metrics") return {"metrics/metrics.json", "metrics/metrics.csv"};
    if (stage == "tsne") return {"tsne/tsne.csv"};
    if (stage == "plot") return {"plot/tsne.svg"};
    throw ConfigError("unknown stage '" + stage + "'");
  }

  /// Configuration subset a stage depends on; a change forces a re-run.
  io::Json stage_config(const std::string& stage) const {
    const io::Json all = cfg_.to_json();
    if (stage == "phantom") return {{"phantom", all["phantom"]}, {"bundles", all["bundles"]}, {"seed", cfg_.seed_for(PipelineConfig::kBundles)}};
    if (stage == "track") return {{"tracking", all["tracking"]}};
    if (stage == "features") return {{"features", all["features"]}, {"seed", cfg_.seed_for(PipelineConfig::kSplit)}};
    if (stage == "train-blstm") return {{"blstm", all["blstm"]}, {"seed", cfg_.seed}};
    if (stage == "train-tae") return {{"tae", all["tae"]}, {"seed", cfg_.seed}};
    if (stage == "embed") return {{"pooling", all["embedding"]["pooling"]}};
    if (stage == "pca") return {{"embedding", all["embedding"]}};
    if (stage == "grid") return {{"grid", all["grid"]}};
    if (stage == "cluster") return {{"clustering", all["clustering"]}};
    if (stage == "tsne") return {{"tsne", all["tsne"]}, {"seed", cfg_.seed_for(PipelineConfig::kTsne)}};
    return io::Json::object();
  }

  RunManifest load_manifest() const {
    if (!fs::exists(manifest_path())) return {};
    try {
      return RunManifest::from_json(io::Json::parse(io::read_file(manifest_path().string())));
    } catch (const io::Json::exception& e) {
      throw DataError(manifest_path().string() + ": " + e.what());
    }
  }

  void save_manifest(const RunManifest& m) const {
    fs::create_directories(root());
    io::write_file(manifest_path().string(), m.to_json().dump(2) + "\n");
  }

  /// True when the manifest records a successful run of this stage with the
  /// current configuration, current input hashes and intact outputs.
  bool up_to_date(const std::string& stage, const RunManifest& m) const {
    const auto it = m.stages.find(stage);
    if (it == m.stages.end() || it->second.status.rfind("failed", 0) == 0) return false;
    const StageRecord& r = it->second;
    if (r.config != stage_config(stage)) return false;
    for (const auto& rel : inputs_of(stage)) {
      const auto f = r.inputs.find(rel);
      if (f == r.inputs.end() || !fs::exists(resolve(rel)) || sha256_file(resolve(rel).string()) != f->second) return false;
    }
    for (const auto& rel : outputs_of(stage)) {
      const auto f = r.outputs.find(rel);
      if (f == r.outputs.end() || !fs::exists(root() / rel) || sha256_file((root() / rel).string()) != f->second) return false;
    }
    return true;
  }

  /// Runs one stage unconditionally and records it in the manifest. Module
  /// errors propagate unchanged after the failure is recorded.
  StageOutcome run_stage(const std::string& stage) {
    RunManifest m = load_manifest();
    m.config_snapshot = cfg_.to_json();
    StageRecord rec;
    rec.config = stage_config(stage);
    for (const auto& rel : inputs_of(stage)) {
      if (!fs::exists(resolve(rel)))
        throw DataError("stage " + stage + ": missing input " + resolve(rel).string() + " (run the producing stage first)");
      rec.inputs[rel] = sha256_file(resolve(rel).string());
    }
    fs::create_directories(root() / stage);
    log("stage " + stage + ": running");
    const auto t0 = std::chrono::steady_clock::now();
    std::string status;
    try {
      status = execute(stage);
    } catch (const std::exception& e) {
      rec.status = std::string("failed: ") + e.what();
      rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      m.stages[stage] = rec;
      save_manifest(m);
      throw;
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    for (const auto& rel : outputs_of(stage)) rec.outputs[rel] = sha256_file((root() / rel).string());
    rec.status = status;
    m.stages[stage] = rec;
    save_manifest(m);
    char buf[64];
    std::snprintf(buf, sizeof buf, " (%.1f s)", rec.seconds);
    log("stage " + stage + ": " + status + buf);
    return {stage, true, status, rec.seconds};
  }

  /// All stages in order. With resume, stages recorded as up to date are
  /// skipped until the first one that must run; everything after it runs.
  std::vector<StageOutcome> run_all(bool resume = true) {
    std::vector<StageOutcome> out;
    bool dirty = !resume;
    for (const auto& stage : stage_order()) {
      if (!dirty) {
        const RunManifest m = load_manifest();
        if (up_to_date(stage, m)) {
          log("stage " + stage + ": up to date");
          out.push_back({stage, false, m.stages.at(stage).status, 0.0});
          continue;
        }
        dirty = true;
      }
      out.push_back(run_stage(stage));
    }
    return out;
  }

 private:
  PipelineConfig cfg_;
  Logger log_;

  void log(const std::string& msg) const {
    if (log_) log_(msg);
  }

  std::string execute(const std::string& stage) {
    if (stage == "phantom") return stage_phantom();
    if (stage == "track") return stage_track();
    if (stage == "features") return stage_features();
    if (stage == "train-blstm") return stage_train_blstm();
    if (stage == "train-tae") return stage_train_tae();
    if (stage == "embed") return stage_embed();
    if (stage == "fuse") return stage_fuse();
    if (stage == "pca") return stage_pca();
    if (stage == "grid") return stage_grid();
    if (stage == "cluster") return stage_cluster();
    if (stage == "metrics") return stage_metrics();
    if (stage == "tsne") return stage_tsne();
    if (stage == "plot") return stage_plot();
    throw ConfigError("unknown stage '" + stage + "'");
  }

  LVAxis phantom_axis() const { return LVAxis(cfg_.phantom.center(), cfg_.phantom.axis()); }

  std::string stage_phantom() {
    const auto vols = generate_annulus_phantom(cfg_.phantom);
    write_tensor_volume(path("phantom", "tensors.dtv"), vols.tensors);
    write_mask_volume(path("phantom", "mask.msk"), vols.mask);
    BundleSpec b = cfg_.bundles;
    b.seed = cfg_.seed_for(PipelineConfig::kBundles);
    const auto bundles = generate_labeled_bundles(b);
    write_feature_sequences(path("phantom", "bundles.fft"), bundles.sequences);
    write_text(path("phantom", "bundle_labels.csv"), labels_csv(sequential_ids(bundles.labels.size()), bundles.labels));
    return "ok";
  }

  std::string stage_track() {
    const auto tensors = read_tensor_volume(path("phantom", "tensors.dtv"));
    const auto mask = read_mask_volume(path("phantom", "mask.msk"));
    const auto res = track_volume(tensors, mask, cfg_.tracking);
    write_streamlines(path("track", "streamlines.fib"), res.streamlines);
    write_text(path("track", "tracking.json"),
               io::Json{{"seeds", res.seeds}, {"streamlines", res.streamlines.size()}, {"warning", res.warning}}.dump(2) +
                   "\n");
    return res.warning.empty() ? "ok" : "warning: " + res.warning;
  }

  /// Mid-wall helix-angle error of tracked fibers against the phantom rule.
  io::Json helix_angle_check(const std::vector<FeatureSequence>& tracked) const {
    const PhantomSpec& ph = cfg_.phantom;
    const double mid = 0.5 * (ph.inner_radius + ph.outer_radius);
    const double band = 0.5 * ph.spacing.minCoeff();
    const double cap = 0.5 * ph.height - 2.0 * ph.spacing.maxCoeff();
    double worst = 0.0, sum = 0.0;
    std::size_t count = 0;
    for (const auto& f : tracked)
      for (Eigen::Index i = 0; i < f.values.rows(); ++i) {
        const Vec3 p(f.values(i, kX), f.values(i, kY), f.values(i, kZ));
        const auto cc = annulus_coords(ph, p);
        if (std::abs(cc.radius - mid) > band || std::abs(cc.axial) > cap) continue;
        const double err = std::abs(f.values(i, kHA) - phantom_helix_angle(ph, cc.radius));
        worst = std::max(worst, err);
        sum += err;
        ++count;
      }
    return {{"midwall_points", count},
            {"max_abs_error_deg", worst},
            {"mean_abs_error_deg", count ? sum / static_cast<double>(count) : 0.0},
            {"tolerance_deg", cfg_.features.ha_tolerance},
            {"pass", count > 0 && worst < cfg_.features.ha_tolerance}};
  }

  std::string stage_features() {
    const auto mask = read_mask_volume(path("phantom", "mask.msk"));
    const auto lines = read_streamlines(path("track", "streamlines.fib"));
    std::vector<FeatureSequence> tracked;
    io::Json report = io::Json::object();
    std::string status = "ok";
    if (!lines.empty()) {
      const auto td = solve_transmural_depth(mask);
      report["laplace"] = {{"cg_iterations", td.report.cg_iterations}, {"residual", td.report.residual}};
      for (const auto& s : lines)
        if (auto f = streamline_features(s, td.depth, phantom_axis())) tracked.push_back(std::move(*f));
      report["ha_check"] = helix_angle_check(tracked);
      if (!report["ha_check"]["pass"].get<bool>()) status = "warning: mid-wall helix angle check failed";
    } else {
      status = "warning: no tracked streamlines";
    }
    write_feature_sequences(path("features", "tracked.fft"), tracked);

    std::vector<FeatureSequence> source;
    if (cfg_.features.source == "bundles")
      source = read_feature_sequences(path("phantom", "bundles.fft")).sequences;
    else if (cfg_.features.source == "tracked")
      source = tracked;
    else
      source = read_feature_sequences(cfg_.features.input).sequences;
    std::size_t dropped_long = 0;
    if (cfg_.features.max_points) {
      for (auto& f : source)
        if (f.size() > cfg_.features.max_points) {
          f = FeatureSequence();
          ++dropped_long;
        }
    }
    const auto ds = dataset_from_sequences(std::move(source), cfg_.seed_for(PipelineConfig::kSplit), cfg_.features.min_points);
    write_feature_sequences(path("features", "dataset.fft"), ds.all, ds.stats);
    write_text(path("features", "split.json"),
               io::Json{{"source", cfg_.features.source},
                        {"source_index", ds.source_index},
                        {"train", ds.train_ids},
                        {"val", ds.val_ids},
                        {"test", ds.test_ids}}
                       .dump() +
                   "\n");
    report["dataset"] = {{"source", cfg_.features.source},
                         {"kept", ds.all.size()},
                         {"dropped_short_or_long", ds.dropped_short},
                         {"dropped_long", dropped_long},
                         {"train", ds.train.size()},
                         {"val", ds.val.size()},
                         {"test", ds.test.size()}};
    report["tracked_fibers"] = tracked.size();
    write_text(path("features", "features.json"), report.dump(2) + "\n");
    return status;
  }

  struct LoadedDataset {
    std::vector<FeatureSequence> all, train, val;
    std::vector<std::size_t> ids;
    FeatureStats stats;
  };

  LoadedDataset load_dataset() const {
    auto file = read_feature_sequences(path("features", "dataset.fft"));
    io::Json split;
    try {
      split = io::Json::parse(io::read_file(path("features", "split.json")));
    } catch (const io::Json::exception& e) {
      throw DataError(path("features", "split.json") + ": " + e.what());
    }
    LoadedDataset d;
    d.all = std::move(file.sequences);
    d.stats = file.stats ? *file.stats : FeatureStats::estimate(d.all);
    d.ids = split.at("source_index").get<std::vector<std::size_t>>();
    if (d.ids.size() != d.all.size()) throw DataError("split.json does not match dataset.fft");
    for (auto i : split.at("train").get<std::vector<std::size_t>>()) d.train.push_back(d.all.at(i));
    for (auto i : split.at("val").get<std::vector<std::size_t>>()) d.val.push_back(d.all.at(i));
    return d;
  }

  template <typename Model>
  std::string train_and_save(Model model, const seq::TrainConfig& tc, const std::string& stage, const std::string& file) {
    const auto d = load_dataset();
    const auto ck = seq::train_model(model, d.train, d.val, d.stats, tc);
    ck.save(path(stage, file));
    if (ck.status != "ok") return "warning: " + ck.status;
    char buf[128];
    std::snprintf(buf, sizeof buf, "ok, best epoch %d, val loss %.6g", ck.best_epoch,
                  ck.history.at(static_cast<std::size_t>(ck.best_epoch - 1)).val_loss);
    return buf;
  }

  std::string stage_train_blstm() {
    seq::TrainConfig tc = cfg_.blstm_train;
    tc.seed = cfg_.seed_for(PipelineConfig::kBlstmTrain);
    return train_and_save(seq::BlstmModel::create(cfg_.blstm, cfg_.seed_for(PipelineConfig::kBlstmInit)), tc,
                          "train-blstm", "blstm.ckpt");
  }

  std::string stage_train_tae() {
    seq::TrainConfig tc = cfg_.tae_train;
    tc.seed = cfg_.seed_for(PipelineConfig::kTaeTrain);
    return train_and_save(seq::TaeModel::create(cfg_.tae, cfg_.seed_for(PipelineConfig::kTaeInit)), tc, "train-tae",
                          "tae.ckpt");
  }

  std::string stage_embed() {
    const auto d = load_dataset();
    const auto b = seq::ModelCheckpoint::load(path("train-blstm", "blstm.ckpt"));
    const auto t = seq::ModelCheckpoint::load(path("train-tae", "tae.ckpt"));
    write_embedding(path("embed", "blstm.emb"), extract_blstm_embedding(b, d.all, d.ids));
    write_embedding(path("embed", "tae.emb"), extract_tae_embedding(t, d.all, d.ids, cfg_.embedding.pooling));
    return "ok";
  }

  std::string stage_fuse() {
    const auto f = fuse(read_embedding(path("embed", "blstm.emb")), read_embedding(path("embed", "tae.emb")));
    write_embedding(path("fuse", "fused.emb"), f);
    return "ok, " + std::to_string(f.dims()) + " dims";
  }

  std::string stage_pca() {
    const auto [model, reduced] = pca_fit_transform(read_embedding(path("fuse", "fused.emb")), cfg_.embedding.pca);
    write_embedding(path("pca", "pca.emb"), reduced);
    write_text(path("pca", "pca.json"), model.to_json().dump(2) + "\n");
    return "ok, k = " + std::to_string(model.k());
  }

  std::string stage_grid() {
    const auto e = read_embedding(path("pca", "pca.emb"));
    const auto rows = grid_search(e.data, cfg_.grid.min_samples, cfg_.grid.min_cluster_size);
    std::ostringstream csv;
    write_metrics_csv(csv, rows);
    write_text(path("grid", "grid.csv"), csv.str());
    io::Json best = nullptr;
    if (rows.front().ranked())
      best = {{"min_samples", rows.front().min_samples},
              {"min_cluster_size", rows.front().min_cluster_size},
              {"dbcv", rows.front().dbcv},
              {"n_clusters", rows.front().n_clusters},
              {"noise_fraction", rows.front().noise_fraction}};
    write_text(path("grid", "grid.json"), io::Json{{"rows", rows.size()}, {"best", best}}.dump(2) + "\n");
    return best.is_null() ? "warning: no grid cell produced a finite DBCV" : "ok";
  }

  std::string stage_cluster() {
    const auto e = read_embedding(path("pca", "pca.emb"));
    ClusterParams p{cfg_.clustering.min_samples, cfg_.clustering.min_cluster_size, cfg_.clustering.allow_single_cluster};
    if (p.min_samples == 0) {
      const auto grid = io::Json::parse(io::read_file(path("grid", "grid.json")));
      if (grid.at("best").is_null())
        throw DataError("cluster: grid found no usable configuration; set clustering.min_samples/min_cluster_size");
      p.min_samples = grid["best"].at("min_samples").get<int>();
      p.min_cluster_size = grid["best"].at("min_cluster_size").get<int>();
    }
    const auto res = hdbscan(e.data, p);
    write_text(path("cluster", "labels.csv"), labels_csv(e.ids, res.labels));
    write_text(path("cluster", "stability.json"), res.stability_json().dump(2) + "\n");
    return "ok, " + std::to_string(res.n_clusters) + " clusters";
  }

  std::string stage_metrics() {
    const auto e = read_embedding(path("pca", "pca.emb"));
    const auto labels = read_labels_csv(path("cluster", "labels.csv"));
    if (labels.ids != e.ids) throw DataError("metrics: labels.csv ids do not match the embedding");
    const auto row = compute_metrics(e.data, labels.labels);
    io::Json j{{"n_clusters", row.n_clusters},
               {"noise_fraction", row.noise_fraction},
               {"silhouette", number_token(row.silhouette)},
               {"davies_bouldin", number_token(row.davies_bouldin)},
               {"calinski_harabasz", number_token(row.calinski_harabasz)},
               {"dbcv", number_token(row.dbcv)},
               {"flags", row.flags}};
    std::string status = "ok";
    if (cfg_.features.source == "bundles") {
      const auto truth = read_labels_csv(path("phantom", "bundle_labels.csv"));
      std::vector<int> t;
      for (auto id : labels.ids) {
        if (id >= truth.labels.size()) throw DataError("metrics: fiber id outside the bundle label table");
        t.push_back(truth.labels[id]);
      }
      const double ari = adjusted_rand_index(labels.labels, t);
      j["ari_vs_bundles"] = ari;
      char buf[96];
      std::snprintf(buf, sizeof buf, "ok, ARI %.4f, noise %.4f", ari, row.noise_fraction);
      status = buf;
    }
    MetricsRow r = row;
    const auto stab = io::Json::parse(io::read_file(path("cluster", "stability.json")));
    r.min_samples = stab.at("min_samples").get<int>();
    r.min_cluster_size = stab.at("min_cluster_size").get<int>();
    j["min_samples"] = r.min_samples;
    j["min_cluster_size"] = r.min_cluster_size;
    write_text(path("metrics", "metrics.json"), j.dump(2) + "\n");
    std::ostringstream csv;
    write_metrics_csv(csv, {r});
    write_text(path("metrics", "metrics.csv"), csv.str());
    return status;
  }

  std::string stage_tsne() {
    const auto e = read_embedding(path("pca", "pca.emb"));
    TsneParams p = cfg_.tsne;
    p.seed = cfg_.seed_for(PipelineConfig::kTsne);
    const auto r = tsne_2d(e.data, p);
    write_text(path("tsne", "tsne.csv"), tsne_csv(e.ids, r.coords));
    return "ok";
  }

  std::string stage_plot() {
    write_text(path("plot", "tsne.svg"),
               scatter_svg(read_tsne_csv(path("tsne", "tsne.csv")), read_labels_csv(path("cluster", "labels.csv"))));
    return "ok";
  }
};

}  // namespace cardiofib

#endif  // CARDIOFIB_PIPELINE_HPP
