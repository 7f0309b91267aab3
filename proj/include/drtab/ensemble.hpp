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

// Per-row routing to a specialized checkpoint and the downstream logistic
// classifier.
//
// For each row, the feature j* whose value the base model reconstructs worst
// (highest cross-entropy on the clean row) selects specialized checkpoint j*,
// and that checkpoint's latent feeds the classifier. Routing reads feature
// values only; it never sees the label.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "drtab/csv.hpp"
#include "drtab/data.hpp"
#include "drtab/error.hpp"
#include "drtab/model.hpp"
#include "drtab/ndcore.hpp"
#include "drtab/robust.hpp"
#include "nlohmann/json.hpp"

namespace drtab {

// Which checkpoint scores feature j when choosing j*: the shared base model,
// or specialized checkpoint j itself.
enum class RoutingLoss { kBase, kSpecialized };

inline std::string to_string(RoutingLoss r) { return r == RoutingLoss::kBase ? "base" : "specialized"; }

inline RoutingLoss parse_routing_loss(const std::string& s) {
  if (s == "base") return RoutingLoss::kBase;
  if (s == "specialized") return RoutingLoss::kSpecialized;
  throw ConfigError("unknown routing loss '" + s + "' (expected base or specialized)");
}

// Index of the largest eligible loss; the lowest index wins ties. Returns 0
// when nothing is eligible. An empty `eligible` span means all are.
inline std::size_t argmax_feature(std::span<const double> losses,
                                  std::span<const std::uint8_t> eligible = {}) {
  std::size_t best = 0;
  bool found = false;
  for (std::size_t j = 0; j < losses.size(); ++j) {
    if (!eligible.empty() && !eligible[j]) continue;
    if (!found || losses[j] > losses[best]) {
      best = j;
      found = true;
    }
  }
  return best;
}

namespace detail {

// Cross-entropy of head j of `m` against the row's own value, for every row
// and every categorical feature in `features` (n x k, row-major). UNK cells
// are left at NaN.
inline void fill_feature_losses(const ModelParams& m, const ModelInput& in,
                                std::span<const std::size_t> features, std::vector<double>& out) {
  const auto lat = forward_latent(m, in);
  const std::size_t k = in.k;
  std::vector<double> logits, grad;
  for (std::size_t i = 0; i < in.n; ++i) {
    for (auto j : features) {
      const auto x = in.cat[i * k + j];
      if (x < 0 || x >= m.schema->categorical(j).cardinality()) continue;
      logits.resize(m.head_arity(j));
      grad.resize(logits.size());
      head_forward(m, j, lat.row(i), logits);
      out[i * k + j] = softmax_cross_entropy_into(logits, x, grad);
    }
  }
}

inline ModelInput input_rows(const ModelInput& in, std::span<const std::size_t> idx) {
  ModelInput out{idx.size(), in.k, in.c, {}, {}, {}, {}};
  for (auto i : idx) {
    out.cat.insert(out.cat.end(), in.cat.begin() + static_cast<std::ptrdiff_t>(i * in.k),
                   in.cat.begin() + static_cast<std::ptrdiff_t>((i + 1) * in.k));
    out.cont.insert(out.cont.end(), in.cont.begin() + static_cast<std::ptrdiff_t>(i * in.c),
                    in.cont.begin() + static_cast<std::ptrdiff_t>((i + 1) * in.c));
    out.cont_masked.insert(out.cont_masked.end(),
                           in.cont_masked.begin() + static_cast<std::ptrdiff_t>(i * in.c),
                           in.cont_masked.begin() + static_cast<std::ptrdiff_t>((i + 1) * in.c));
    out.row_ids.push_back(in.row_ids[i]);
  }
  return out;
}

}  // namespace detail

struct FeatureSelection {
  std::size_t n = 0, k = 0;
  std::vector<std::size_t> j_star;  // per row
  std::vector<double> losses;       // n x k; NaN where the row holds UNK
};

// Chooses j* for every row of a clean input.
inline FeatureSelection select_features(const ModelBank& bank, const ModelInput& in,
                                        RoutingLoss source = RoutingLoss::kBase) {
  validate(bank);
  const std::size_t k = bank.base.k();
  FeatureSelection sel{in.n, k, std::vector<std::size_t>(in.n, 0),
                       std::vector<double>(in.n * k, std::numeric_limits<double>::quiet_NaN())};
  if (source == RoutingLoss::kBase) {
    std::vector<std::size_t> all(k);
    for (std::size_t j = 0; j < k; ++j) all[j] = j;
    detail::fill_feature_losses(bank.base, in, all, sel.losses);
  } else {
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t one[1] = {j};
      detail::fill_feature_losses(bank.specialized[j], in, one, sel.losses);
    }
  }
  std::vector<std::uint8_t> eligible(k);
  for (std::size_t i = 0; i < in.n; ++i) {
    std::span<const double> row(sel.losses.data() + i * k, k);
    for (std::size_t j = 0; j < k; ++j) eligible[j] = !std::isnan(row[j]);
    sel.j_star[i] = argmax_feature(row, eligible);
  }
  return sel;
}

struct RoutedBatch {
  LatentBatch latent;  // row i taken from specialized checkpoint j_star[i]
  FeatureSelection selection;
};

// Routes every row to its specialized checkpoint and returns the latents.
inline RoutedBatch route_representations(const ModelBank& bank, const ModelInput& in,
                                         RoutingLoss source = RoutingLoss::kBase) {
  RoutedBatch out{{in.n, bank.base.d, std::vector<double>(in.n * bank.base.d), in.row_ids},
                  select_features(bank, in, source)};
  std::vector<std::vector<std::size_t>> groups(bank.k());
  for (std::size_t i = 0; i < in.n; ++i) groups[out.selection.j_star[i]].push_back(i);
  const std::size_t d = bank.base.d;
  for (std::size_t j = 0; j < bank.k(); ++j) {
    if (groups[j].empty()) continue;
    const auto lat = forward_latent(bank.specialized[j], detail::input_rows(in, groups[j]));
    for (std::size_t r = 0; r < groups[j].size(); ++r) {
      std::copy(lat.z.begin() + static_cast<std::ptrdiff_t>(r * d),
                lat.z.begin() + static_cast<std::ptrdiff_t>((r + 1) * d),
                out.latent.z.begin() + static_cast<std::ptrdiff_t>(groups[j][r] * d));
    }
  }
  return out;
}

inline RoutedBatch route_representations(const ModelBank& bank, const EncodedDataset& ds,
                                         RoutingLoss source = RoutingLoss::kBase) {
  if (ds.schema->hash() != bank.base.schema->hash()) {
    throw DataError("dataset schema does not match the model bank schema");
  }
  return route_representations(bank, clean_input(ds), source);
}

// ---------------------------------------------------------------------------
// Classifier

enum class RepresentationMode { kBase, kBank };

inline std::string to_string(RepresentationMode m) {
  return m == RepresentationMode::kBase ? "base" : "bank";
}

struct ClassifierConfig {
  std::size_t epochs = 100;
  double lr = 0.01;
  std::size_t batch_size = 256;
  double threshold = 0.5;
};

inline void validate(const ClassifierConfig& cfg) {
  if (cfg.epochs < 1) throw ConfigError("classifier.epochs must be >= 1");
  if (!(cfg.lr > 0.0) || !std::isfinite(cfg.lr)) throw ConfigError("classifier.lr must be > 0");
  if (cfg.batch_size < 1) throw ConfigError("classifier.batch must be >= 1");
  if (!(cfg.threshold > 0.0 && cfg.threshold < 1.0)) {
    throw ConfigError("classifier.threshold must be in (0, 1)");
  }
}

struct Classifier {
  std::vector<double> w;
  double b = 0.0;
  RepresentationMode mode = RepresentationMode::kBase;
  RoutingLoss routing = RoutingLoss::kBase;
  std::string source_hash;  // base checkpoint hash or bank hash
  ClassifierConfig config;
  std::uint64_t seed = 0;
  std::vector<double> loss_history;
};

// Stable log(1 + exp(-t s)) with t = 2y - 1, and its derivative in s.
inline double logistic_loss(double s, std::uint8_t y, double* ds = nullptr) {
  if (ds) *ds = sigmoid(s) - static_cast<double>(y);
  const double m = y ? -s : s;
  return std::max(m, 0.0) + std::log1p(std::exp(-std::abs(m)));
}

inline double decision_score(const Classifier& clf, std::span<const double> z) {
  return la::dot(clf.w, z) + clf.b;
}

// Mini-batch Adam on the mean logistic loss. Weights start at zero.
inline Classifier train_logistic(const LatentBatch& z, std::span<const std::uint8_t> labels,
                                 const ClassifierConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  if (labels.size() != z.n) throw DataError("labels are not aligned with the representations");
  std::size_t pos = 0;
  for (auto y : labels) {
    if (y > 1) throw DataError("labels must be binary (0/1)");
    pos += y;
  }
  if (pos == 0 || pos == z.n) throw DataError("classifier training labels contain a single class");

  ParamSet params{ParamTensor::zeros("classifier.w", {z.d}), ParamTensor::zeros("classifier.b", {1})};
  GradSet grads = zero_grads(params);
  AdamState opt(AdamConfig{cfg.lr});
  Classifier clf;
  clf.config = cfg;
  clf.seed = seed;
  std::vector<std::size_t> order(z.n);
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    for (std::size_t i = 0; i < z.n; ++i) order[i] = i;
    Rng rng(derive_seed(seed, {0xc1a5u, e}));
    rng.shuffle(std::span(order));
    double epoch_sum = 0.0;
    for (std::size_t start = 0; start < z.n; start += cfg.batch_size) {
      const std::size_t end = std::min(z.n, start + cfg.batch_size);
      const double inv = 1.0 / static_cast<double>(end - start);
      fill_zero(grads);
      double batch_sum = 0.0;
      for (std::size_t t = start; t < end; ++t) {
        const std::size_t i = order[t];
        const auto zi = z.row(i);
        const double s = la::dot(params[0].values, zi) + params[1].values[0];
        double ds = 0.0;
        batch_sum += logistic_loss(s, labels[i], &ds);
        for (std::size_t a = 0; a < z.d; ++a) grads[0][a] += ds * inv * zi[a];
        grads[1][0] += ds * inv;
      }
      if (!std::isfinite(batch_sum)) {
        throw NumericError("non-finite classifier loss at epoch " + std::to_string(e));
      }
      adam_step(params, grads, opt);
      epoch_sum += batch_sum;
    }
    clf.loss_history.push_back(epoch_sum / static_cast<double>(z.n));
  }
  clf.w = std::move(params[0].values);
  clf.b = params[1].values[0];
  return clf;
}

// ERM baseline: classifier on the base checkpoint's latents.
inline Classifier train_classifier(const ModelParams& base, const EncodedDataset& train,
                                   const ClassifierConfig& cfg, std::uint64_t seed) {
  if (train.schema->hash() != base.schema->hash()) {
    throw DataError("training data schema does not match the checkpoint schema");
  }
  auto clf = train_logistic(forward_latent(base, train), train.labels, cfg, seed);
  clf.mode = RepresentationMode::kBase;
  clf.source_hash = checkpoint_hash(base);
  return clf;
}

// Classifier on routed latents from a model bank.
inline Classifier train_classifier(const ModelBank& bank, const EncodedDataset& train,
                                   const ClassifierConfig& cfg, std::uint64_t seed,
                                   RoutingLoss routing = RoutingLoss::kBase) {
  const auto routed = route_representations(bank, train, routing);
  auto clf = train_logistic(routed.latent, train.labels, cfg, seed);
  clf.mode = RepresentationMode::kBank;
  clf.routing = routing;
  clf.source_hash = bank_hash(bank);
  return clf;
}

struct Predictions {
  std::vector<std::int64_t> row_ids;
  std::vector<std::size_t> j_star;  // empty in base mode
  std::vector<double> scores;       // in (0, 1)
  std::vector<std::uint8_t> labels;
};

inline Predictions score_latents(const Classifier& clf, const LatentBatch& z) {
  if (z.d != clf.w.size()) {
    throw ConfigError("classifier expects " + std::to_string(clf.w.size()) +
                      "-dimensional representations, got " + std::to_string(z.d));
  }
  Predictions p;
  p.row_ids = z.row_ids;
  for (std::size_t i = 0; i < z.n; ++i) {
    const double s = sigmoid(decision_score(clf, z.row(i)));
    p.scores.push_back(s);
    p.labels.push_back(s >= clf.config.threshold ? 1 : 0);
  }
  return p;
}

inline Predictions predict(const ModelParams& base, const Classifier& clf, const EncodedDataset& ds) {
  if (clf.mode != RepresentationMode::kBase) {
    throw ConfigError("classifier was trained on bank representations; a model bank is required");
  }
  if (clf.source_hash != checkpoint_hash(base)) {
    throw DataError("classifier was trained against a different base checkpoint");
  }
  if (ds.schema->hash() != base.schema->hash()) {
    throw DataError("dataset schema does not match the checkpoint schema");
  }
  return score_latents(clf, forward_latent(base, ds));
}

inline Predictions predict(const ModelBank& bank, const Classifier& clf, const EncodedDataset& ds) {
  if (clf.mode != RepresentationMode::kBank) {
    throw ConfigError("classifier was trained on base representations; a base checkpoint is required");
  }
  if (clf.source_hash != bank_hash(bank)) {
    throw DataError("classifier was trained against a different model bank");
  }
  const auto routed = route_representations(bank, ds, clf.routing);
  auto p = score_latents(clf, routed.latent);
  p.j_star = routed.selection.j_star;
  return p;
}

// ---------------------------------------------------------------------------
// Persistence

inline nlohmann::json classifier_to_json(const Classifier& clf) {
  return {{"kind", "drtab-classifier"},
          {"mode", to_string(clf.mode)},
          {"routing", to_string(clf.routing)},
          {"source_hash", clf.source_hash},
          {"weights", clf.w},
          {"bias", clf.b},
          {"threshold", clf.config.threshold},
          {"epochs", clf.config.epochs},
          {"lr", clf.config.lr},
          {"batch_size", clf.config.batch_size},
          {"seed", clf.seed},
          {"loss_history", clf.loss_history}};
}

inline Classifier classifier_from_json(const nlohmann::json& j) {
  try {
    if (j.at("kind") != "drtab-classifier") throw DataError("document is not a classifier");
    Classifier clf;
    const auto mode = j.at("mode").get<std::string>();
    if (mode != "base" && mode != "bank") throw DataError("unknown classifier mode '" + mode + "'");
    clf.mode = mode == "base" ? RepresentationMode::kBase : RepresentationMode::kBank;
    clf.routing = parse_routing_loss(j.at("routing"));
    clf.source_hash = j.at("source_hash");
    clf.w = j.at("weights").get<std::vector<double>>();
    clf.b = j.at("bias");
    clf.config.threshold = j.at("threshold");
    clf.config.epochs = j.at("epochs");
    clf.config.lr = j.at("lr");
    clf.config.batch_size = j.at("batch_size");
    clf.seed = j.at("seed");
    clf.loss_history = j.at("loss_history").get<std::vector<double>>();
    if (clf.w.empty()) throw DataError("classifier has no weights");
    return clf;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed classifier: " + std::string(e.what()));
  }
}

inline void save_classifier(const std::filesystem::path& path, const Classifier& clf) {
  std::ofstream out(path, std::ios::binary);
  out << classifier_to_json(clf).dump(2) << '\n';
  out.close();
  if (!out) throw DataError("cannot write classifier '" + path.string() + "'");
}

inline Classifier load_classifier(const std::filesystem::path& path) {
  return classifier_from_json(read_json_file(path));
}

// Columns: row_id, j_star (0-based feature index; empty in base mode),
// score, label.
inline void write_predictions_csv(const std::filesystem::path& path, const Predictions& p) {
  Table t{{"row_id", "j_star", "score", "label"}, {}};
  for (std::size_t i = 0; i < p.scores.size(); ++i) {
    t.rows.push_back({std::to_string(p.row_ids[i]), p.j_star.empty() ? "" : std::to_string(p.j_star[i]),
                      detail::format_real(p.scores[i]), std::to_string(p.labels[i])});
  }
  write_csv(path.string(), t);
}

}  // namespace drtab
