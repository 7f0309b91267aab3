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

// Per-feature robustification of a pre-trained reconstruction model.
//
// Two strategies produce one specialized checkpoint per categorical feature:
//
//   jtt  Find the training rows whose feature j the base model reconstructs
//        wrongly, then fine-tune the encoder and head j with the feature-j
//        loss of those rows multiplied by an upweight factor.
//   dfr  Draw a category-balanced subset of the validation split and retrain
//        head j alone on it.
//
// The resulting ModelBank holds the base checkpoint plus the k specialized
// ones and is persisted as a directory with a JSON manifest.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <unordered_set>
#include <vector>

#include "drtab/data.hpp"
#include "drtab/error.hpp"
#include "drtab/hash.hpp"
#include "drtab/log.hpp"
#include "drtab/model.hpp"
#include "drtab/rng.hpp"
#include "nlohmann/json.hpp"

namespace drtab {

enum class Strategy { kJtt, kDfr };

inline std::string to_string(Strategy s) { return s == Strategy::kJtt ? "jtt" : "dfr"; }

inline Strategy parse_strategy(const std::string& s) {
  if (s == "jtt") return Strategy::kJtt;
  if (s == "dfr") return Strategy::kDfr;
  throw ConfigError("unknown strategy '" + s + "' (expected jtt or dfr)");
}

struct Stage2Config {
  std::size_t epochs = 10;
  double lr = 0.01;
  std::size_t batch_size = 1024;
  double upweight = 20.0;
  // Also train the encoder during balanced retraining. Off by default, which
  // keeps the representation of every dfr checkpoint identical to the base.
  bool dfr_train_encoder = false;
};

inline void validate(const Stage2Config& cfg) {
  if (cfg.epochs < 1) throw ConfigError("stage2.epochs must be >= 1");
  if (!(cfg.lr > 0.0) || !std::isfinite(cfg.lr)) throw ConfigError("stage2.lr must be > 0");
  if (cfg.batch_size < 1) throw ConfigError("stage2.batch must be >= 1");
  if (!(cfg.upweight >= 1.0) || !std::isfinite(cfg.upweight)) {
    throw ConfigError("stage2.upweight must be >= 1");
  }
}

// ---------------------------------------------------------------------------
// Error sets (jtt)

struct ErrorSet {
  std::size_t feature = 0;
  std::vector<std::int64_t> row_ids;
  std::string source_checkpoint;
};

namespace detail {

inline void check_categorical(const ModelParams& m, std::size_t j) {
  if (j >= m.k()) {
    throw ConfigError("feature index " + std::to_string(j) +
                      " is out of range or not categorical (k = " + std::to_string(m.k()) + ")");
  }
}

inline void check_schema(const ModelParams& m, const EncodedDataset& ds, const std::string& what) {
  if (ds.schema->hash() != m.schema->hash()) {
    throw DataError(what + " schema does not match the checkpoint schema");
  }
}

}  // namespace detail

// Rows of `train` whose feature-j value the model mispredicts on clean input.
// Rows holding UNK for feature j carry no reconstruction term and are skipped.
inline ErrorSet build_error_set(const ModelParams& base, const EncodedDataset& train,
                                std::size_t j) {
  detail::check_categorical(base, j);
  detail::check_schema(base, train, "training data");
  ErrorSet es{j, {}, checkpoint_hash(base)};
  const auto pred = predict_category(base, train, j);
  const auto unk = train.schema->categorical(j).unk_index();
  for (std::size_t i = 0; i < train.n; ++i) {
    const auto x = train.cat_at(i, j);
    if (x != unk && pred[i] != x) es.row_ids.push_back(train.row_ids[i]);
  }
  return es;
}

namespace detail {

inline void restore_trainable(ModelParams& m) { m.set_all_trainable(true); }

inline FitConfig stage2_fit(const Stage2Config& cfg, const ModelParams& base) {
  return {cfg.epochs, cfg.lr, cfg.batch_size, base.mask_rate};
}

}  // namespace detail

// Upweighted fine-tune of the encoder and head j starting from a copy of base.
// Every other head stays bit-identical.
inline ModelParams jtt_finetune(const ModelParams& base, const EncodedDataset& train,
                                const ErrorSet& eset, double w, const Stage2Config& cfg,
                                std::uint64_t seed) {
  validate(cfg);
  if (!(w >= 1.0) || !std::isfinite(w)) throw ConfigError("upweight must be >= 1");
  detail::check_categorical(base, eset.feature);
  detail::check_schema(base, train, "training data");
  if (train.n == 0) throw DataError("training split is empty");

  const std::unordered_set<std::int64_t> members(eset.row_ids.begin(), eset.row_ids.end());
  FeatureRowWeights weights{eset.feature, std::vector<double>(train.n, 1.0)};
  std::size_t found = 0;
  for (std::size_t i = 0; i < train.n; ++i) {
    if (members.count(train.row_ids[i])) {
      weights.row_weight[i] = w;
      ++found;
    }
  }
  if (found != members.size()) {
    throw DataError("error set for feature '" + base.schema->categorical(eset.feature).name +
                    "' references rows outside the training split");
  }
  if (members.empty()) {
    warn("error set for feature '" + base.schema->categorical(eset.feature).name +
         "' is empty; fine-tuning without upweighting");
  }

  ModelParams m = base;
  m.set_all_trainable(false);
  m.set_encoder_trainable(true);
  m.set_head_trainable(eset.feature, true);
  fit_reconstruction(m, train, detail::stage2_fit(cfg, base), seed, &weights);
  detail::restore_trainable(m);
  return m;
}

// ---------------------------------------------------------------------------
// Balanced subsets (dfr)

struct BalancedSubset {
  std::size_t feature = 0;
  std::vector<std::int64_t> row_ids;  // in dataset order
  std::size_t per_category = 0;
  std::vector<std::int32_t> categories;  // categories present in the source split
  std::vector<std::int32_t> excluded;    // vocabulary categories with no rows
};

// Downsamples every present category of feature j to the rarest one's count,
// without replacement. UNK rows are never drawn.
inline BalancedSubset build_balanced_subset(const EncodedDataset& val, std::size_t j,
                                            std::uint64_t seed) {
  if (j >= val.k()) {
    throw ConfigError("feature index " + std::to_string(j) + " is out of range or not categorical");
  }
  const auto& spec = val.schema->categorical(j);
  const auto card = spec.cardinality();
  std::vector<std::vector<std::size_t>> by_cat(static_cast<std::size_t>(card));
  for (std::size_t i = 0; i < val.n; ++i) {
    const auto x = val.cat_at(i, j);
    if (x >= 0 && x < card) by_cat[static_cast<std::size_t>(x)].push_back(i);
  }
  BalancedSubset bs{j, {}, 0, {}, {}};
  for (std::int32_t v = 0; v < card; ++v) {
    (by_cat[static_cast<std::size_t>(v)].empty() ? bs.excluded : bs.categories).push_back(v);
  }
  if (bs.categories.size() < 2) {
    throw DataError("feature '" + spec.name + "' has fewer than two categories present in the " +
                    "validation split; cannot balance");
  }
  for (auto v : bs.excluded) {
    warn("feature '" + spec.name + "': category '" + spec.vocabulary[static_cast<std::size_t>(v)] +
         "' has no validation rows and is excluded from the balanced subset");
  }
  bs.per_category = val.n;
  for (auto v : bs.categories) {
    bs.per_category = std::min(bs.per_category, by_cat[static_cast<std::size_t>(v)].size());
  }
  std::vector<std::size_t> picked;
  for (auto v : bs.categories) {
    auto& rows = by_cat[static_cast<std::size_t>(v)];
    Rng rng(derive_seed(seed, {0xdf5u, j, static_cast<std::uint64_t>(v)}));
    rng.shuffle(std::span(rows));
    picked.insert(picked.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(bs.per_category));
  }
  std::sort(picked.begin(), picked.end());
  for (auto i : picked) bs.row_ids.push_back(val.row_ids[i]);
  return bs;
}

// Retrains head j on the balanced rows starting from a copy of base. The
// encoder and every other head stay bit-identical unless
// cfg.dfr_train_encoder is set, which also unfreezes the encoder.
inline ModelParams dfr_finetune(const ModelParams& base, const EncodedDataset& rows,
                                std::size_t j, const Stage2Config& cfg, std::uint64_t seed) {
  validate(cfg);
  detail::check_categorical(base, j);
  detail::check_schema(base, rows, "balanced subset");
  if (rows.n == 0) throw DataError("balanced subset is empty");
  ModelParams m = base;
  m.set_all_trainable(false);
  m.set_head_trainable(j, true);
  if (cfg.dfr_train_encoder) m.set_encoder_trainable(true);
  fit_reconstruction(m, rows, detail::stage2_fit(cfg, base), seed);
  detail::restore_trainable(m);
  return m;
}

// ---------------------------------------------------------------------------
// Model bank

struct FeatureTrainingInfo {
  std::size_t feature = 0;
  std::string name;
  double upweight = 1.0;        // jtt only
  std::size_t epochs = 0;
  std::size_t error_set_size = 0;  // jtt only
  std::size_t balance_count = 0;   // dfr only: rows per category
  std::size_t train_rows = 0;
  std::uint64_t seed = 0;
  std::string checkpoint_hash;
};

struct ModelBank {
  ModelParams base;
  std::vector<ModelParams> specialized;  // index j = categorical feature j
  Strategy strategy = Strategy::kJtt;
  std::vector<FeatureTrainingInfo> info;
  bool dfr_train_encoder = false;

  std::size_t k() const { return specialized.size(); }
};

// Throws DataError unless the bank has one checkpoint per categorical feature,
// each sharing schema and width with the base.
inline void validate(const ModelBank& bank) {
  if (bank.specialized.size() != bank.base.k() || bank.info.size() != bank.base.k()) {
    throw DataError("model bank has " + std::to_string(bank.specialized.size()) +
                    " specialized checkpoints for " + std::to_string(bank.base.k()) +
                    " categorical features");
  }
  const auto h = bank.base.schema->hash();
  for (std::size_t j = 0; j < bank.specialized.size(); ++j) {
    const auto& s = bank.specialized[j];
    if (s.schema->hash() != h || s.d != bank.base.d || s.variant != bank.base.variant) {
      throw DataError("specialized checkpoint " + std::to_string(j) +
                      " does not match the base schema or width");
    }
  }
}

// Identity of a bank: base and specialized checkpoint hashes plus strategy.
inline std::string bank_hash(const ModelBank& bank) {
  Fnv1a h;
  h.update(to_string(bank.strategy));
  h.update(checkpoint_hash(bank.base));
  for (const auto& s : bank.specialized) h.update(checkpoint_hash(s));
  return hex64(h.digest());
}

namespace detail {

[[noreturn]] inline void rethrow_for_feature(const Error& e, const std::string& feature) {
  const std::string msg = "feature '" + feature + "': " + e.what();
  switch (e.code()) {
    case ExitCode::kConfig: throw ConfigError(msg);
    case ExitCode::kNumeric: throw NumericError(msg);
    default: throw DataError(msg);
  }
}

}  // namespace detail

// Runs the chosen strategy once per categorical feature. jtt draws on the
// training split, dfr on the validation split.
inline ModelBank robustify_all(const ModelParams& base, const SplitBundle& splits,
                               Strategy strategy, const Stage2Config& cfg, std::uint64_t seed) {
  validate(cfg);
  if (base.k() == 0) throw DataError("schema has no categorical features to robustify");
  ModelBank bank{base, {}, strategy, {}, cfg.dfr_train_encoder};
  for (std::size_t j = 0; j < base.k(); ++j) {
    const auto& name = base.schema->categorical(j).name;
    FeatureTrainingInfo info;
    info.feature = j;
    info.name = name;
    info.epochs = cfg.epochs;
    info.seed = derive_seed(seed, {0x5e1u, j});
    try {
      if (strategy == Strategy::kJtt) {
        const auto eset = build_error_set(base, splits.train, j);
        info.upweight = cfg.upweight;
        info.error_set_size = eset.row_ids.size();
        info.train_rows = splits.train.n;
        bank.specialized.push_back(jtt_finetune(base, splits.train, eset, cfg.upweight, cfg, info.seed));
      } else {
        const auto bs = build_balanced_subset(splits.val, j, derive_seed(info.seed, {0xba1u}));
        const auto rows = splits.val.select_row_ids(bs.row_ids);
        info.balance_count = bs.per_category;
        info.train_rows = rows.n;
        bank.specialized.push_back(dfr_finetune(base, rows, j, cfg, info.seed));
      }
    } catch (const Error& e) {
      detail::rethrow_for_feature(e, name);
    }
    info.checkpoint_hash = checkpoint_hash(bank.specialized.back());
    bank.info.push_back(std::move(info));
  }
  validate(bank);
  return bank;
}

// ---------------------------------------------------------------------------
// Persistence: <dir>/base.{bin,json}, <dir>/f<j>_<name>.{bin,json},
// <dir>/manifest.json.

namespace detail {

inline std::string checkpoint_stem(std::size_t j, const std::string& name) {
  std::string safe;
  for (char ch : name) {
    safe += (std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '_') ? ch : '_';
  }
  return "f" + std::to_string(j) + "_" + safe;
}

}  // namespace detail

inline nlohmann::json bank_manifest(const ModelBank& bank) {
  nlohmann::json feats = nlohmann::json::array();
  for (std::size_t j = 0; j < bank.info.size(); ++j) {
    const auto& fi = bank.info[j];
    nlohmann::json f{{"index", j},
                     {"name", fi.name},
                     {"checkpoint", detail::checkpoint_stem(j, fi.name)},
                     {"checkpoint_hash", checkpoint_hash(bank.specialized[j])},
                     {"epochs", fi.epochs},
                     {"train_rows", fi.train_rows},
                     {"seed", fi.seed}};
    if (bank.strategy == Strategy::kJtt) {
      f["upweight"] = fi.upweight;
      f["error_set_size"] = fi.error_set_size;
    } else {
      f["balance_count"] = fi.balance_count;
    }
    feats.push_back(std::move(f));
  }
  return {{"kind", "drtab-bank"},
          {"strategy", to_string(bank.strategy)},
          {"dfr_train_encoder", bank.dfr_train_encoder},
          {"schema_hash", bank.base.schema->hash()},
          {"d", bank.base.d},
          {"base_hash", checkpoint_hash(bank.base)},
          {"bank_hash", bank_hash(bank)},
          {"features", std::move(feats)}};
}

inline void save_bank(const std::filesystem::path& dir, const ModelBank& bank) {
  validate(bank);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw DataError("cannot create bank directory '" + dir.string() + "': " + ec.message());
  save_model(dir / "base", bank.base);
  for (std::size_t j = 0; j < bank.k(); ++j) {
    save_model(dir / detail::checkpoint_stem(j, bank.info[j].name), bank.specialized[j]);
  }
  std::ofstream out(dir / "manifest.json", std::ios::binary);
  out << bank_manifest(bank).dump(2) << '\n';
  if (!out) throw DataError("cannot write bank manifest in '" + dir.string() + "'");
}

inline ModelBank load_bank(const std::filesystem::path& dir) {
  const auto mf = read_json_file(dir / "manifest.json");
  try {
    if (mf.at("kind") != "drtab-bank") throw DataError("'" + dir.string() + "' is not a model bank");
    ModelBank bank;
    bank.strategy = parse_strategy(mf.at("strategy"));
    bank.dfr_train_encoder = mf.value("dfr_train_encoder", false);
    bank.base = load_model(dir / "base");
    if (checkpoint_hash(bank.base) != mf.at("base_hash").get<std::string>()) {
      throw DataError("bank base checkpoint hash mismatch in '" + dir.string() + "'");
    }
    for (const auto& f : mf.at("features")) {
      FeatureTrainingInfo fi;
      fi.feature = f.at("index");
      fi.name = f.at("name");
      fi.epochs = f.at("epochs");
      fi.train_rows = f.at("train_rows");
      fi.seed = f.at("seed");
      fi.checkpoint_hash = f.at("checkpoint_hash");
      fi.upweight = f.value("upweight", 1.0);
      fi.error_set_size = f.value("error_set_size", std::size_t{0});
      fi.balance_count = f.value("balance_count", std::size_t{0});
      if (fi.feature != bank.specialized.size()) throw DataError("bank features out of order");
      auto m = load_model(dir / f.at("checkpoint").get<std::string>());
      if (checkpoint_hash(m) != fi.checkpoint_hash) {
        throw DataError("checkpoint hash mismatch for feature '" + fi.name + "'");
      }
      bank.specialized.push_back(std::move(m));
      bank.info.push_back(std::move(fi));
    }
    validate(bank);
    return bank;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed bank manifest: " + std::string(e.what()));
  }
}

}  // namespace drtab
