// Copyright 2026 The drtab Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// End-to-end runs: configuration, the run directory, and the phase sequence
//
//   data -> pretrain -> robustify -> classify -> eval
//
// Every phase records a key (a hash of the settings and upstream keys it
// depends on) and the hashes of the files it wrote in <run>/manifest.json.
// A rerun reuses any phase whose key and files still match, so an
// interrupted run resumes at the first incomplete phase. A phase recorded
// under different settings is never silently replaced.
//
// Run directory layout:
//   manifest.json              config snapshot, seeds, per-phase keys and file hashes
//   schema.json, splits.json   data phase
//   base/model.{bin,json}, base/loss_history.csv
//   banks/<name>/              one model bank per strategy setting (jtt_w20, dfr, ...)
//   classifiers/<name>.json
//   predictions/<method>_test.csv
//   reports/                   report_<method>.json, metrics.csv, subgroups.csv,
//                              slices.csv, subgroups.svg, grid.json

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "drtab/csv.hpp"
#include "drtab/data.hpp"
#include "drtab/ensemble.hpp"
#include "drtab/error.hpp"
#include "drtab/eval.hpp"
#include "drtab/hash.hpp"
#include "drtab/model.hpp"
#include "drtab/robust.hpp"
#include "nlohmann/json.hpp"

namespace drtab {

inline constexpr const char* kSeedEnvVar = "DRTAB_SEED";

// ---------------------------------------------------------------------------
// Configuration

struct DataConfig {
  std::string csv;  // empty: use the synthetic generator
  std::string target;
  std::string delimiter = ",";
  std::vector<std::string> columns;  // feature subset; empty keeps all
  std::size_t max_rows = 0;          // 0 keeps all
  std::size_t max_cardinality = 64;
  std::string positive_label;  // empty: lexicographically larger value
};

struct PipelineConfig {
  DataConfig data;
  SynthSpec synth;
  SplitRatios split;
  std::uint64_t split_seed = 43;
  ModelConfig model;
  double mask_rate = 0.15;
  FitConfig stage1;
  std::vector<Strategy> strategies{Strategy::kJtt, Strategy::kDfr};
  std::vector<double> upweights{20.0};
  Stage2Config stage2;
  ClassifierConfig classifier;
  RoutingLoss routing = RoutingLoss::kBase;
  double delta = 0.05;
  std::size_t min_support = 30;
  std::set<ReportFormat> formats{ReportFormat::kJson, ReportFormat::kCsv, ReportFormat::kSvg};
  std::uint64_t seed = 43;
};

inline nlohmann::json config_to_json(const PipelineConfig& c) {
  nlohmann::json strategies = nlohmann::json::array();
  for (auto s : c.strategies) strategies.push_back(to_string(s));
  nlohmann::json formats = nlohmann::json::array();
  for (auto f : c.formats) {
    formats.push_back(f == ReportFormat::kJson ? "json" : f == ReportFormat::kCsv ? "csv" : "svg");
  }
  return {
      {"data",
       {{"csv", c.data.csv},
        {"target", c.data.target},
        {"delimiter", c.data.delimiter},
        {"columns", c.data.columns},
        {"max_rows", c.data.max_rows},
        {"max_cardinality", c.data.max_cardinality},
        {"positive_label", c.data.positive_label}}},
      {"synth",
       {{"n", c.synth.n},
        {"k", c.synth.k},
        {"bias", c.synth.bias},
        {"minority_frac", c.synth.minority_frac},
        {"seed", c.synth.seed}}},
      {"split",
       {{"train", c.split.train}, {"val", c.split.val}, {"test", c.split.test}, {"seed", c.split_seed}}},
      {"model", {{"d", c.model.d}, {"variant", to_string(c.model.variant)}, {"mask_rate", c.mask_rate}}},
      {"stage1", {{"epochs", c.stage1.epochs}, {"lr", c.stage1.lr}, {"batch", c.stage1.batch_size}}},
      {"stage2",
       {{"strategy", strategies},
        {"upweight", c.upweights},
        {"epochs", c.stage2.epochs},
        {"lr", c.stage2.lr},
        {"batch", c.stage2.batch_size},
        {"dfr_train_encoder", c.stage2.dfr_train_encoder}}},
      {"classifier",
       {{"epochs", c.classifier.epochs},
        {"lr", c.classifier.lr},
        {"batch", c.classifier.batch_size},
        {"threshold", c.classifier.threshold},
        {"routing", to_string(c.routing)}}},
      {"eval", {{"delta", c.delta}, {"min_support", c.min_support}, {"formats", formats}}},
      {"seed", c.seed}};
}

namespace detail {

inline std::uint64_t seed_from_env() {
  const char* v = std::getenv(kSeedEnvVar);
  if (!v || !*v) return 43;
  const auto parsed = parse_number(v);
  if (!parsed || *parsed < 0 || *parsed != static_cast<double>(static_cast<std::uint64_t>(*parsed))) {
    throw ConfigError(std::string(kSeedEnvVar) + " must be a non-negative integer, got '" + v + "'");
  }
  return static_cast<std::uint64_t>(*parsed);
}

// Copies overlay leaves into base, rejecting keys the base does not have and
// values whose JSON type differs from the default's.
inline void merge_checked(nlohmann::json& base, const nlohmann::json& overlay, const std::string& path) {
  if (!overlay.is_object()) throw ConfigError("config " + (path.empty() ? "root" : path) + " must be an object");
  for (const auto& [key, value] : overlay.items()) {
    const std::string full = path.empty() ? key : path + "." + key;
    if (!base.contains(key)) throw ConfigError("unknown config key '" + full + "'");
    auto& slot = base[key];
    if (slot.is_object()) {
      merge_checked(slot, value, full);
      continue;
    }
    const bool same = (slot.is_number() && value.is_number()) ||
                      (slot.is_string() && value.is_string()) ||
                      (slot.is_boolean() && value.is_boolean()) ||
                      (slot.is_array() && value.is_array());
    if (!same) throw ConfigError("config key '" + full + "' has the wrong type");
    if (slot.is_number_unsigned() && !value.is_number_unsigned()) {
      throw ConfigError("config key '" + full + "' must be a non-negative integer");
    }
    slot = value;
  }
}

template <typename T>
T get_as(const nlohmann::json& j, const char* key, const std::string& section) {
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config key '" + section + "." + key + "' has an invalid value");
  }
}

}  // namespace detail

// Defaults, with the seed defaults taken from DRTAB_SEED when set.
inline PipelineConfig default_config() {
  PipelineConfig c;
  const auto seed = detail::seed_from_env();
  c.seed = seed;
  c.split_seed = seed;
  c.synth.seed = seed;
  return c;
}

// Parses and validates a complete config document.
inline PipelineConfig config_from_json(const nlohmann::json& doc) {
  nlohmann::json j = config_to_json(default_config());
  detail::merge_checked(j, doc, "");
  PipelineConfig c;
  using detail::get_as;
  const auto& d = j["data"];
  c.data.csv = get_as<std::string>(d, "csv", "data");
  c.data.target = get_as<std::string>(d, "target", "data");
  c.data.delimiter = get_as<std::string>(d, "delimiter", "data");
  c.data.columns = get_as<std::vector<std::string>>(d, "columns", "data");
  c.data.max_rows = get_as<std::size_t>(d, "max_rows", "data");
  c.data.max_cardinality = get_as<std::size_t>(d, "max_cardinality", "data");
  c.data.positive_label = get_as<std::string>(d, "positive_label", "data");
  const auto& s = j["synth"];
  c.synth = {get_as<std::size_t>(s, "n", "synth"), get_as<std::size_t>(s, "k", "synth"),
             get_as<double>(s, "bias", "synth"), get_as<double>(s, "minority_frac", "synth"),
             get_as<std::uint64_t>(s, "seed", "synth")};
  const auto& sp = j["split"];
  c.split = {get_as<double>(sp, "train", "split"), get_as<double>(sp, "val", "split"),
             get_as<double>(sp, "test", "split")};
  c.split_seed = get_as<std::uint64_t>(sp, "seed", "split");
  const auto& m = j["model"];
  c.model.d = get_as<std::size_t>(m, "d", "model");
  c.model.variant = parse_encoder_variant(get_as<std::string>(m, "variant", "model"));
  c.mask_rate = get_as<double>(m, "mask_rate", "model");
  const auto& s1 = j["stage1"];
  c.stage1 = {get_as<std::size_t>(s1, "epochs", "stage1"), get_as<double>(s1, "lr", "stage1"),
              get_as<std::size_t>(s1, "batch", "stage1"), c.mask_rate};
  const auto& s2 = j["stage2"];
  c.strategies.clear();
  for (const auto& name : get_as<std::vector<std::string>>(s2, "strategy", "stage2")) {
    const auto st = parse_strategy(name);
    if (std::find(c.strategies.begin(), c.strategies.end(), st) == c.strategies.end()) {
      c.strategies.push_back(st);
    }
  }
  c.upweights = get_as<std::vector<double>>(s2, "upweight", "stage2");
  c.stage2.epochs = get_as<std::size_t>(s2, "epochs", "stage2");
  c.stage2.lr = get_as<double>(s2, "lr", "stage2");
  c.stage2.batch_size = get_as<std::size_t>(s2, "batch", "stage2");
  c.stage2.dfr_train_encoder = get_as<bool>(s2, "dfr_train_encoder", "stage2");
  const auto& cl = j["classifier"];
  c.classifier = {get_as<std::size_t>(cl, "epochs", "classifier"), get_as<double>(cl, "lr", "classifier"),
                  get_as<std::size_t>(cl, "batch", "classifier"),
                  get_as<double>(cl, "threshold", "classifier")};
  c.routing = parse_routing_loss(get_as<std::string>(cl, "routing", "classifier"));
  const auto& ev = j["eval"];
  c.delta = get_as<double>(ev, "delta", "eval");
  c.min_support = get_as<std::size_t>(ev, "min_support", "eval");
  c.formats.clear();
  for (const auto& f : get_as<std::vector<std::string>>(ev, "formats", "eval")) {
    c.formats.insert(parse_report_format(f));
  }
  c.seed = get_as<std::uint64_t>(j, "seed", "");

  // Range checks before any work starts.
  if (c.data.csv.empty() == false && c.data.target.empty()) {
    throw ConfigError("data.target is required when data.csv is set");
  }
  if (c.data.delimiter.size() != 1) throw ConfigError("data.delimiter must be a single character");
  if (c.data.max_cardinality < 2) throw ConfigError("data.max_cardinality must be >= 2");
  if (c.data.csv.empty()) {
    if (c.synth.n < 100) throw ConfigError("synth.n must be >= 100");
    if (c.synth.k < 2) throw ConfigError("synth.k must be >= 2");
    if (!(c.synth.bias >= 0.5 && c.synth.bias <= 1.0)) throw ConfigError("synth.bias must be in [0.5, 1]");
    if (!(c.synth.minority_frac >= 0.0 && c.synth.minority_frac < 1.0)) {
      throw ConfigError("synth.minority_frac must be in [0, 1)");
    }
  }
  validate_ratios(c.split);
  if (c.model.d < 2) throw ConfigError("model.d must be >= 2");
  validate(c.stage1, "stage1");
  Stage2Config probe = c.stage2;
  if (c.upweights.empty()) throw ConfigError("stage2.upweight needs at least one value");
  for (double w : c.upweights) {
    probe.upweight = w;
    validate(probe);
  }
  validate(c.classifier);
  if (!(c.delta >= 0.0) || !std::isfinite(c.delta)) throw ConfigError("eval.delta must be >= 0");
  if (c.min_support < 1) throw ConfigError("eval.min_support must be >= 1");
  return c;
}

// Applies a dotted-name override such as ("model.d", "16"). The value is
// read as JSON when it parses, else as a string; array-valued keys take a
// comma-separated list.
inline void apply_override(nlohmann::json& doc, const std::string& dotted, const std::string& value) {
  const auto defaults = config_to_json(default_config());
  const nlohmann::json::json_pointer ptr("/" + [&] {
    std::string p = dotted;
    std::replace(p.begin(), p.end(), '.', '/');
    return p;
  }());
  if (!defaults.contains(ptr) || defaults.at(ptr).is_object()) {
    throw ConfigError("unknown config key '" + dotted + "'");
  }
  auto parse_scalar = [](const std::string& v) {
    auto parsed = nlohmann::json::parse(v, nullptr, false);
    return parsed.is_discarded() ? nlohmann::json(v) : parsed;
  };
  nlohmann::json v;
  if (defaults.at(ptr).is_array()) {
    v = nlohmann::json::array();
    if (!value.empty()) {
      std::size_t start = 0;
      while (true) {
        const auto comma = value.find(',', start);
        v.push_back(parse_scalar(value.substr(start, comma - start)));
        if (comma == std::string::npos) break;
        start = comma + 1;
      }
    }
  } else if (defaults.at(ptr).is_string()) {
    v = value;
  } else {
    v = parse_scalar(value);
  }
  doc[ptr] = v;
}

// All dotted leaf keys of the config, in document order.
inline std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  const auto flat = config_to_json(default_config()).flatten();
  for (const auto& [k, v] : flat.items()) {
    std::string dotted = k.substr(1);
    std::replace(dotted.begin(), dotted.end(), '/', '.');
    // Flattened arrays expand into indexed entries; collapse them.
    const auto last = dotted.rfind('.');
    if (last != std::string::npos &&
        dotted.find_first_not_of("0123456789", last + 1) == std::string::npos) {
      dotted.resize(last);
    }
    if (keys.empty() || keys.back() != dotted) keys.push_back(dotted);
  }
  // Empty arrays vanish when flattened.
  for (const char* k : {"data.columns"}) {
    if (std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(k);
  }
  return keys;
}

// ---------------------------------------------------------------------------
// Data

struct PreparedData {
  EncodedDataset all;
  SplitBundle splits;
  std::string source_hash;
};

inline PreparedData prepare_data(const PipelineConfig& c) {
  PreparedData p;
  if (c.data.csv.empty()) {
    p.all = synth_spurious(c.synth);
    p.source_hash = "synthetic";
  } else {
    p.source_hash = hash_file(c.data.csv);
    auto table = read_csv(c.data.csv, c.data.delimiter[0]);
    if (!c.data.columns.empty()) {
      auto names = c.data.columns;
      names.push_back(c.data.target);
      table = table.select(names);
    }
    if (c.data.max_rows > 0 && table.rows.size() > c.data.max_rows) table.rows.resize(c.data.max_rows);
    InferOptions opt;
    opt.max_card = c.data.max_cardinality;
    if (!c.data.positive_label.empty()) opt.positive_label = c.data.positive_label;
    auto schema = std::make_shared<const Schema>(infer_schema(table, c.data.target, opt));
    p.all = encode(table, schema);
  }
  p.splits = stratified_split(p.all, c.split, c.split_seed);
  return p;
}

// ---------------------------------------------------------------------------
// Run directory

enum class Phase { kData = 0, kPretrain = 1, kRobustify = 2, kClassify = 3, kEval = 4 };

class RunDir {
 public:
  RunDir(std::filesystem::path dir, bool overwrite) : dir_(std::move(dir)) {
    namespace fs = std::filesystem;
    std::error_code ec;
    if (overwrite && fs::exists(dir_)) fs::remove_all(dir_, ec);
    if (ec) throw DataError("cannot clear '" + dir_.string() + "': " + ec.message());
    if (fs::exists(dir_ / "manifest.json")) {
      manifest_ = read_json_file(dir_ / "manifest.json");
      if (manifest_.value("kind", "") != "drtab-run") {
        throw DataError("'" + dir_.string() + "' holds a manifest that is not a drtab run");
      }
    } else if (fs::exists(dir_) && !fs::is_empty(dir_)) {
      throw ConfigError("output directory '" + dir_.string() +
                        "' is not empty and holds no run manifest; pass --overwrite to replace it");
    }
    fs::create_directories(dir_, ec);
    if (ec) throw DataError("cannot create '" + dir_.string() + "': " + ec.message());
    if (manifest_.is_null()) manifest_ = {{"kind", "drtab-run"}, {"version", 1}, {"phases", nlohmann::json::object()}};
  }

  const std::filesystem::path& path() const { return dir_; }
  const nlohmann::json& manifest() const { return manifest_; }
  std::optional<nlohmann::json> recorded_config() const {
    if (manifest_.contains("config")) return std::optional<nlohmann::json>(manifest_.at("config"));
    return std::nullopt;
  }

  // Staged until the next record() so a refused run leaves the manifest as it was.
  void set_config(const nlohmann::json& config, const nlohmann::json& seeds) {
    pending_ = {{"config", config}, {"seeds", seeds}};
  }

  // True when `name` was completed with the same key and its files are
  // intact. A different key throws, unless the phase is `replaceable`
  // (nothing downstream reads its artifacts), in which case it is redone.
  bool reusable(const std::string& name, const std::string& key, bool replaceable = false) {
    auto& phases = manifest_["phases"];
    if (!phases.contains(name)) return false;
    const auto& rec = phases[name];
    if (rec.at("key") != key && replaceable) {
      phases.erase(name);
      return false;
    }
    if (rec.at("key") != key) {
      throw ConfigError("run directory '" + dir_.string() + "' already holds phase '" + name +
                        "' produced with different settings; use a fresh --out or pass --overwrite");
    }
    for (const auto& [rel, h] : rec.at("artifacts").items()) {
      const auto p = dir_ / rel;
      if (!std::filesystem::exists(p) || hash_file(p.string()) != h.get<std::string>()) {
        phases.erase(name);  // damaged or partial; recompute
        return false;
      }
    }
    return true;
  }

  // Records `name` as complete with the hashes of every file under `paths`.
  void record(const std::string& name, const std::string& key,
              const std::vector<std::filesystem::path>& paths) {
    nlohmann::json artifacts = nlohmann::json::object();
    for (const auto& rel : paths) {
      const auto abs = dir_ / rel;
      if (std::filesystem::is_directory(abs)) {
        std::vector<std::filesystem::path> files;
        for (const auto& e : std::filesystem::recursive_directory_iterator(abs)) {
          if (e.is_regular_file()) files.push_back(e.path());
        }
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
          artifacts[std::filesystem::relative(f, dir_).generic_string()] = hash_file(f.string());
        }
      } else {
        artifacts[rel.generic_string()] = hash_file(abs.string());
      }
    }
    manifest_["phases"][name] = {{"key", key}, {"artifacts", artifacts}};
    if (!pending_.is_null()) {
      manifest_["config"] = pending_["config"];
      manifest_["seeds"] = pending_["seeds"];
    }
    save();
  }

 private:
  void save() const {
    const auto tmp = dir_ / "manifest.json.tmp";
    {
      std::ofstream out(tmp, std::ios::binary);
      out << manifest_.dump(2) << '\n';
      if (!out) throw DataError("cannot write run manifest in '" + dir_.string() + "'");
    }
    std::filesystem::rename(tmp, dir_ / "manifest.json");
  }

  std::filesystem::path dir_;
  nlohmann::json manifest_;
  nlohmann::json pending_;
};

// ---------------------------------------------------------------------------
// Pipeline

struct PipelineOptions {
  bool overwrite = false;
  Phase stop_after = Phase::kEval;
};

struct GridEntry {
  double upweight = 0.0;
  double val_auroc = 0.0;
  double test_auroc = 0.0;
  bool selected = false;
};

struct PipelineResult {
  std::vector<MethodReport> reports;  // erm first, then strategies in config order
  std::vector<GridEntry> grid;        // jtt upweight sweep
  std::vector<std::string> executed;  // phases computed in this call
  std::vector<std::string> reused;    // phases taken from an earlier call
  nlohmann::json manifest;
};

namespace detail {

inline std::string key_of(std::initializer_list<nlohmann::json> parts) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& p : parts) arr.push_back(p);
  return hex64(fnv1a(arr.dump()));
}

inline std::string bank_name(Strategy s, double w) {
  return s == Strategy::kJtt ? "jtt_w" + format_real(w) : "dfr";
}

inline void write_splits(const std::filesystem::path& path, const SplitBundle& s) {
  nlohmann::json j{{"train", s.train.row_ids}, {"val", s.val.row_ids}, {"test", s.test.row_ids}};
  write_text(path, j.dump() + "\n");
}

inline double split_auroc(const Predictions& p, const EncodedDataset& ds) {
  std::size_t pos = ds.count_label(1);
  if (pos == 0 || pos == ds.n) return 0.5;
  return auroc(p.scores, ds.labels);
}

}  // namespace detail

inline PipelineResult run_pipeline(const PipelineConfig& cfg, const std::filesystem::path& out,
                                   const PipelineOptions& opt = {}) {
  namespace fs = std::filesystem;
  using detail::key_of;
  RunDir run(out, opt.overwrite);
  PipelineResult res;
  const auto cj = config_to_json(cfg);
  const nlohmann::json seeds{{"seed", cfg.seed},
                             {"split", cfg.split_seed},
                             {"synth", cfg.synth.seed},
                             {"pretrain", derive_seed(cfg.seed, {1})},
                             {"stage2", derive_seed(cfg.seed, {2})},
                             {"classifier", derive_seed(cfg.seed, {3})}};
  run.set_config(cj, seeds);
  auto done = [&](const std::string& name, bool reused) {
    (reused ? res.reused : res.executed).push_back(name);
  };

  // data
  const auto data = prepare_data(cfg);
  const auto data_key = key_of({"data", cj["data"], cj["synth"], cj["split"], data.source_hash});
  if (!run.reusable("data", data_key)) {
    detail::write_text(run.path() / "schema.json", data.all.schema->to_json().dump(2) + "\n");
    detail::write_splits(run.path() / "splits.json", data.splits);
    run.record("data", data_key, {"schema.json", "splits.json"});
    done("data", false);
  } else {
    done("data", true);
  }
  if (opt.stop_after == Phase::kData) {
    res.manifest = run.manifest();
    return res;
  }

  // pretrain
  const auto pre_key = key_of({"pretrain", data_key, cj["model"], cj["stage1"], cfg.seed});
  ModelParams base;
  if (run.reusable("pretrain", pre_key)) {
    base = load_model(run.path() / "base" / "model");
    done("pretrain", true);
  } else {
    fs::create_directories(run.path() / "base");
    FitConfig s1 = cfg.stage1;
    s1.mask_rate = cfg.mask_rate;
    auto pre = pretrain_erm(data.splits.train, cfg.model, s1, seeds["pretrain"].get<std::uint64_t>());
    base = std::move(pre.params);
    save_model(run.path() / "base" / "model", base);
    Table hist{{"epoch", "loss"}, {}};
    for (std::size_t e = 0; e < pre.loss_history.size(); ++e) {
      hist.rows.push_back({std::to_string(e + 1), detail::format_real(pre.loss_history[e])});
    }
    write_csv((run.path() / "base" / "loss_history.csv").string(), hist);
    run.record("pretrain", pre_key, {"base"});
    done("pretrain", false);
  }
  if (opt.stop_after == Phase::kPretrain) {
    res.manifest = run.manifest();
    return res;
  }

  // robustify: one bank per (strategy, upweight)
  struct BankEntry {
    std::string name;
    Strategy strategy;
    double upweight;
    std::string key;
    ModelBank bank;
  };
  std::vector<BankEntry> banks;
  for (auto s : cfg.strategies) {
    const std::vector<double> ws = s == Strategy::kJtt ? cfg.upweights : std::vector<double>{1.0};
    for (double w : ws) {
      BankEntry b{detail::bank_name(s, w), s, w, "", {}};
      Stage2Config s2 = cfg.stage2;
      s2.upweight = s == Strategy::kJtt ? w : s2.upweight;
      b.key = key_of({"bank", pre_key, to_string(s), s == Strategy::kJtt ? nlohmann::json(w) : nlohmann::json(nullptr),
                      cj["stage2"]["epochs"], cj["stage2"]["lr"], cj["stage2"]["batch"],
                      s == Strategy::kDfr ? cj["stage2"]["dfr_train_encoder"] : nlohmann::json(nullptr)});
      const auto phase = "robustify/" + b.name;
      const auto rel = fs::path("banks") / b.name;
      if (run.reusable(phase, b.key)) {
        b.bank = load_bank(run.path() / rel);
        done(phase, true);
      } else {
        b.bank = robustify_all(base, data.splits, s, s2, seeds["stage2"].get<std::uint64_t>());
        fs::remove_all(run.path() / rel);
        save_bank(run.path() / rel, b.bank);
        run.record(phase, b.key, {rel});
        done(phase, false);
      }
      banks.push_back(std::move(b));
    }
  }
  if (opt.stop_after == Phase::kRobustify) {
    res.manifest = run.manifest();
    return res;
  }

  // classify
  const auto clf_seed = seeds["classifier"].get<std::uint64_t>();
  fs::create_directories(run.path() / "classifiers");
  auto classify = [&](const std::string& name, const std::string& upstream, auto&& train) {
    const auto key = key_of({"classifier", upstream, cj["classifier"]});
    const auto rel = fs::path("classifiers") / (name + ".json");
    const auto phase = "classify/" + name;
    if (run.reusable(phase, key)) {
      done(phase, true);
      return std::pair{load_classifier(run.path() / rel), key};
    }
    auto clf = train();
    save_classifier(run.path() / rel, clf);
    run.record(phase, key, {rel});
    done(phase, false);
    return std::pair{clf, key};
  };
  const auto [erm_clf, erm_key] = classify("erm", pre_key, [&] {
    return train_classifier(base, data.splits.train, cfg.classifier, clf_seed);
  });
  std::vector<std::pair<Classifier, std::string>> bank_clfs;
  for (const auto& b : banks) {
    bank_clfs.push_back(classify(b.name, b.key, [&] {
      return train_classifier(b.bank, data.splits.train, cfg.classifier, clf_seed, cfg.routing);
    }));
  }
  if (opt.stop_after == Phase::kClassify) {
    res.manifest = run.manifest();
    return res;
  }

  // eval: pick the jtt upweight by validation AUROC (first best in grid order)
  struct Method {
    std::string name;
    Predictions test;
    std::string key;
  };
  std::vector<Method> methods;
  methods.push_back({"erm", predict(base, erm_clf, data.splits.test), erm_key});
  std::optional<std::size_t> best_jtt;
  for (std::size_t i = 0; i < banks.size(); ++i) {
    if (banks[i].strategy != Strategy::kJtt) continue;
    const auto val = predict(banks[i].bank, bank_clfs[i].first, data.splits.val);
    const auto test = predict(banks[i].bank, bank_clfs[i].first, data.splits.test);
    res.grid.push_back({banks[i].upweight, detail::split_auroc(val, data.splits.val),
                        detail::split_auroc(test, data.splits.test), false});
    if (!best_jtt || res.grid.back().val_auroc > res.grid[*best_jtt].val_auroc) {
      best_jtt = res.grid.size() - 1;
    }
  }
  for (auto s : cfg.strategies) {
    for (std::size_t i = 0, g = 0; i < banks.size(); ++i) {
      if (banks[i].strategy != s) continue;
      const bool pick = s == Strategy::kDfr || g++ == best_jtt.value_or(0);
      if (!pick) continue;
      methods.push_back({to_string(s), predict(banks[i].bank, bank_clfs[i].first, data.splits.test),
                         bank_clfs[i].second});
    }
  }
  if (best_jtt) res.grid[*best_jtt].selected = true;

  nlohmann::json method_keys = nlohmann::json::array();
  for (const auto& m : methods) method_keys.push_back({m.name, m.key});
  const auto eval_key = key_of({"eval", method_keys, cj["eval"]});
  for (const auto& m : methods) {
    MethodReport r;
    r.method = m.name;
    r.split = "test";
    r.metrics = classification_metrics(m.test.scores, m.test.labels, data.splits.test.labels);
    r.subgroup_class = 1;
    r.subgroups = subgroup_accuracy(m.test.labels, data.splits.test, 1);
    r.slices = discover_slices(m.test.labels, data.splits.test, 1, cfg.delta, cfg.min_support);
    res.reports.push_back(std::move(r));
  }
  if (run.reusable("eval", eval_key, /*replaceable=*/true)) {
    done("eval", true);
  } else {
    fs::remove_all(run.path() / "reports");
    fs::remove_all(run.path() / "predictions");
    fs::create_directories(run.path() / "reports");
    fs::create_directories(run.path() / "predictions");
    for (const auto& m : methods) {
      write_predictions_csv(run.path() / "predictions" / (m.name + "_test.csv"), m.test);
    }
    emit_report(res.reports, run.path() / "reports", cfg.formats);
    if (!res.grid.empty()) {
      nlohmann::json g = nlohmann::json::array();
      for (const auto& e : res.grid) {
        g.push_back({{"upweight", e.upweight},
                     {"val_auroc", e.val_auroc},
                     {"test_auroc", e.test_auroc},
                     {"selected", e.selected}});
      }
      detail::write_text(run.path() / "reports" / "grid.json",
                         nlohmann::json{{"selection", "validation AUROC"}, {"grid", g}}.dump(2) + "\n");
    }
    run.record("eval", eval_key, {"reports", "predictions"});
    done("eval", false);
  }
  res.manifest = run.manifest();
  return res;
}

}  // namespace drtab
