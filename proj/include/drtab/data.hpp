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

// Tabular dataset schema, encoding, splits, and the synthetic
// spurious-correlation generator.
//
// Feature order convention: a Schema keeps features in file order, but
// every encoded matrix and every model indexes categorical features first
// (j in [0, k)) followed by continuous features (l in [0, c)).

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "drtab/csv.hpp"
#include "drtab/error.hpp"
#include "drtab/hash.hpp"
#include "drtab/rng.hpp"

namespace drtab {

enum class FeatureKind { kCategorical, kContinuous };

inline std::string to_string(FeatureKind k) {
  return k == FeatureKind::kCategorical ? "categorical" : "continuous";
}

struct FeatureSpec {
  std::string name;
  FeatureKind kind = FeatureKind::kCategorical;
  std::vector<std::string> vocabulary;  // categorical only, first-appearance order
  double mean = 0.0;                    // continuous only
  double stddev = 1.0;                  // continuous only

  static FeatureSpec categorical(std::string name,
                                 std::vector<std::string> vocabulary) {
    return {std::move(name), FeatureKind::kCategorical, std::move(vocabulary),
            0.0, 1.0};
  }
  static FeatureSpec continuous(std::string name, double mean, double stddev) {
    return {std::move(name), FeatureKind::kContinuous, {}, mean, stddev};
  }

  bool is_categorical() const { return kind == FeatureKind::kCategorical; }
  std::int32_t cardinality() const {
    return static_cast<std::int32_t>(vocabulary.size());
  }
  // Reserved embedding rows past the vocabulary. Decoder heads never emit them.
  std::int32_t unk_index() const { return cardinality(); }
  std::int32_t mask_index() const { return cardinality() + 1; }

  std::optional<std::int32_t> lookup(std::string_view value) const {
    for (std::size_t i = 0; i < vocabulary.size(); ++i) {
      if (vocabulary[i] == value) return static_cast<std::int32_t>(i);
    }
    return std::nullopt;
  }

  bool operator==(const FeatureSpec&) const = default;
};

class Schema {
 public:
  Schema() = default;

  // target_values = {negative, positive}.
  Schema(std::vector<FeatureSpec> features, std::string target_name,
         std::array<std::string, 2> target_values)
      : features_(std::move(features)),
        target_name_(std::move(target_name)),
        target_values_(std::move(target_values)) {
    validate_and_index();
  }

  const std::vector<FeatureSpec>& features() const { return features_; }
  const std::string& target_name() const { return target_name_; }
  const std::array<std::string, 2>& target_values() const {
    return target_values_;
  }

  std::size_t k() const { return cat_idx_.size(); }
  std::size_t c() const { return cont_idx_.size(); }
  std::size_t num_features() const { return features_.size(); }

  const FeatureSpec& categorical(std::size_t j) const {
    return features_.at(cat_idx_.at(j));
  }
  const FeatureSpec& continuous(std::size_t l) const {
    return features_.at(cont_idx_.at(l));
  }
  // Model-order feature f: categorical for f < k, continuous otherwise.
  const FeatureSpec& model_feature(std::size_t f) const {
    return f < k() ? categorical(f) : continuous(f - k());
  }
  std::optional<std::size_t> categorical_index(std::string_view name) const {
    for (std::size_t j = 0; j < k(); ++j) {
      if (categorical(j).name == name) return j;
    }
    return std::nullopt;
  }

  nlohmann::json to_json() const {
    nlohmann::json feats = nlohmann::json::array();
    for (const auto& f : features_) {
      nlohmann::json jf{{"name", f.name}, {"kind", to_string(f.kind)}};
      if (f.is_categorical()) {
        jf["vocabulary"] = f.vocabulary;
      } else {
        jf["mean"] = f.mean;
        jf["std"] = f.stddev;
      }
      feats.push_back(std::move(jf));
    }
    return {{"schema_version", 1},
            {"features", feats},
            {"target", {{"name", target_name_}, {"values", target_values_}}}};
  }

  static Schema from_json(const nlohmann::json& j) {
    try {
      std::vector<FeatureSpec> feats;
      for (const auto& jf : j.at("features")) {
        const auto kind = jf.at("kind").get<std::string>();
        if (kind == "categorical") {
          feats.push_back(FeatureSpec::categorical(
              jf.at("name").get<std::string>(),
              jf.at("vocabulary").get<std::vector<std::string>>()));
        } else if (kind == "continuous") {
          feats.push_back(FeatureSpec::continuous(jf.at("name").get<std::string>(),
                                                  jf.at("mean").get<double>(),
                                                  jf.at("std").get<double>()));
        } else {
          throw DataError("unknown feature kind '" + kind + "'");
        }
      }
      const auto& t = j.at("target");
      auto vals = t.at("values").get<std::vector<std::string>>();
      if (vals.size() != 2) throw DataError("schema target must have 2 values");
      return Schema(std::move(feats), t.at("name").get<std::string>(),
                    {vals[0], vals[1]});
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("malformed schema JSON: ") + e.what());
    }
  }

  // Fingerprint of the canonical JSON form.
  std::string hash() const { return hex64(fnv1a(to_json().dump())); }

  bool operator==(const Schema& o) const {
    return features_ == o.features_ && target_name_ == o.target_name_ &&
           target_values_ == o.target_values_;
  }

 private:
  void validate_and_index() {
    std::set<std::string> names;
    for (std::size_t i = 0; i < features_.size(); ++i) {
      const auto& f = features_[i];
      if (!names.insert(f.name).second) {
        throw DataError("duplicate feature name '" + f.name + "'");
      }
      if (f.name == target_name_) {
        throw DataError("feature '" + f.name + "' collides with the target");
      }
      if (f.is_categorical()) {
        if (f.cardinality() < 2) {
          throw DataError("categorical feature '" + f.name +
                          "' needs cardinality >= 2");
        }
        std::set<std::string> vocab(f.vocabulary.begin(), f.vocabulary.end());
        if (vocab.size() != f.vocabulary.size()) {
          throw DataError("duplicate vocabulary entry in '" + f.name + "'");
        }
        cat_idx_.push_back(i);
      } else {
        if (!(f.stddev > 0.0) || !std::isfinite(f.stddev) ||
            !std::isfinite(f.mean)) {
          throw DataError("continuous feature '" + f.name +
                          "' is constant or has invalid statistics");
        }
        cont_idx_.push_back(i);
      }
    }
    if (cat_idx_.empty()) {
      throw DataError("schema needs at least one categorical feature");
    }
    if (target_values_[0] == target_values_[1]) {
      throw DataError("target values must be distinct");
    }
  }

  std::vector<FeatureSpec> features_;
  std::string target_name_;
  std::array<std::string, 2> target_values_;
  std::vector<std::size_t> cat_idx_;
  std::vector<std::size_t> cont_idx_;
};

struct EncodedDataset {
  std::shared_ptr<const Schema> schema;
  std::size_t n = 0;
  std::vector<std::int32_t> cat;  // n x k, row-major
  std::vector<double> cont;       // n x c, row-major
  std::vector<std::uint8_t> labels;
  std::vector<std::int64_t> row_ids;

  std::size_t k() const { return schema->k(); }
  std::size_t c() const { return schema->c(); }

  std::int32_t cat_at(std::size_t i, std::size_t j) const {
    return cat[i * k() + j];
  }
  double cont_at(std::size_t i, std::size_t l) const {
    return cont[i * c() + l];
  }
  std::span<const std::int32_t> cat_row(std::size_t i) const {
    return {cat.data() + i * k(), k()};
  }
  std::span<const double> cont_row(std::size_t i) const {
    return {cont.data() + i * c(), c()};
  }

  std::size_t count_label(std::uint8_t y) const {
    return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), y));
  }

  // Rows at the given positions, in that order.
  EncodedDataset subset(std::span<const std::size_t> idx) const {
    EncodedDataset out;
    out.schema = schema;
    out.n = idx.size();
    out.cat.reserve(idx.size() * k());
    out.cont.reserve(idx.size() * c());
    for (auto i : idx) {
      if (i >= n) throw DataError("subset index out of range");
      auto cr = cat_row(i);
      out.cat.insert(out.cat.end(), cr.begin(), cr.end());
      auto nr = cont_row(i);
      out.cont.insert(out.cont.end(), nr.begin(), nr.end());
      out.labels.push_back(labels[i]);
      out.row_ids.push_back(row_ids[i]);
    }
    return out;
  }

  // Rows whose row_id is listed, in the order listed.
  EncodedDataset select_row_ids(std::span<const std::int64_t> ids) const {
    std::unordered_map<std::int64_t, std::size_t> pos;
    pos.reserve(n);
    for (std::size_t i = 0; i < n; ++i) pos.emplace(row_ids[i], i);
    std::vector<std::size_t> idx;
    idx.reserve(ids.size());
    for (auto id : ids) {
      auto it = pos.find(id);
      if (it == pos.end()) {
        throw DataError("row_id " + std::to_string(id) + " not in dataset");
      }
      idx.push_back(it->second);
    }
    return subset(idx);
  }

  void validate() const {
    if (!schema) throw DataError("dataset has no schema");
    if (cat.size() != n * k() || cont.size() != n * c() || labels.size() != n ||
        row_ids.size() != n) {
      throw DataError("dataset blocks disagree on row count");
    }
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < k(); ++j) {
        const auto v = cat_at(i, j);
        // UNK is a legal encoded value; MASK only appears in model inputs.
        if (v < 0 || v > schema->categorical(j).unk_index()) {
          throw DataError("category index out of range in feature '" +
                          schema->categorical(j).name + "'");
        }
      }
      if (labels[i] > 1) throw DataError("labels must be 0 or 1");
    }
    std::unordered_set<std::int64_t> ids(row_ids.begin(), row_ids.end());
    if (ids.size() != n) throw DataError("row_ids are not unique");
  }
};

// ---------------------------------------------------------------------------
// Schema inference and encoding

namespace detail {

inline std::optional<double> parse_number(std::string_view s) {
  while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
  while (!s.empty() && s.back() == ' ') s.remove_suffix(1);
  if (s.empty()) return std::nullopt;
  if (s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) {
    return std::nullopt;
  }
  return v;
}

inline std::string format_real(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

}  // namespace detail

struct InferOptions {
  // All-numeric columns with more distinct values than this are continuous.
  std::size_t max_card = 64;
  // Which target value maps to label 1. Defaults to the lexicographically
  // larger of the two values ("yes" over "no", "1" over "0").
  std::optional<std::string> positive_label;
  std::map<std::string, FeatureKind> overrides;
};

inline Schema infer_schema(const Table& rows, const std::string& target_name,
                           const InferOptions& opt = {}) {
  if (rows.rows.empty()) throw DataError("cannot infer a schema from an empty table");
  const auto target_col = rows.column(target_name);
  if (!target_col) throw DataError("target column '" + target_name + "' not found");
  for (const auto& [name, kind] : opt.overrides) {
    if (!rows.column(name)) throw ConfigError("override for unknown column '" + name + "'");
  }

  std::vector<FeatureSpec> feats;
  std::array<std::string, 2> target_values;
  for (std::size_t col = 0; col < rows.num_cols(); ++col) {
    const auto& name = rows.header[col];
    std::vector<std::string> distinct;
    std::unordered_set<std::string> seen;
    bool all_numeric = true;
    for (std::size_t r = 0; r < rows.num_rows(); ++r) {
      const auto& v = rows.rows[r][col];
      if (v.empty()) {
        throw DataError("missing value in column '" + name + "' at row " +
                        std::to_string(r + 1));
      }
      if (seen.insert(v).second) {
        distinct.push_back(v);
        if (all_numeric && !detail::parse_number(v)) all_numeric = false;
      }
    }
    if (col == *target_col) {
      if (distinct.size() != 2) {
        throw DataError("target column '" + name + "' must have exactly 2 values, found " +
                        std::to_string(distinct.size()));
      }
      std::sort(distinct.begin(), distinct.end());
      if (opt.positive_label) {
        if (*opt.positive_label == distinct[0]) std::swap(distinct[0], distinct[1]);
        if (*opt.positive_label != distinct[1]) {
          throw ConfigError("positive label '" + *opt.positive_label +
                            "' is not a target value");
        }
      }
      target_values = {distinct[0], distinct[1]};
      continue;
    }
    if (distinct.size() < 2) {
      throw DataError("column '" + name + "' has a single distinct value");
    }
    FeatureKind kind = (all_numeric && distinct.size() > opt.max_card)
                           ? FeatureKind::kContinuous
                           : FeatureKind::kCategorical;
    if (auto it = opt.overrides.find(name); it != opt.overrides.end()) {
      kind = it->second;
    }
    if (kind == FeatureKind::kCategorical) {
      feats.push_back(FeatureSpec::categorical(name, std::move(distinct)));
      continue;
    }
    if (!all_numeric) {
      throw DataError("column '" + name + "' forced continuous but is not numeric");
    }
    // Population statistics; fixed summation order.
    double sum = 0.0;
    for (const auto& r : rows.rows) sum += *detail::parse_number(r[col]);
    const double mean = sum / static_cast<double>(rows.num_rows());
    double ss = 0.0;
    for (const auto& r : rows.rows) {
      const double dv = *detail::parse_number(r[col]) - mean;
      ss += dv * dv;
    }
    const double sd = std::sqrt(ss / static_cast<double>(rows.num_rows()));
    if (!(sd > 0.0)) throw DataError("column '" + name + "' is constant");
    feats.push_back(FeatureSpec::continuous(name, mean, sd));
  }
  return Schema(std::move(feats), target_name, target_values);
}

enum class UnknownPolicy { kStrict, kMapToUnk };

inline EncodedDataset encode(const Table& rows, std::shared_ptr<const Schema> schema,
                             UnknownPolicy policy = UnknownPolicy::kMapToUnk) {
  const Schema& s = *schema;
  std::vector<std::size_t> cat_cols, cont_cols;
  for (std::size_t j = 0; j < s.k(); ++j) {
    auto col = rows.column(s.categorical(j).name);
    if (!col) throw DataError("column '" + s.categorical(j).name + "' missing");
    cat_cols.push_back(*col);
  }
  for (std::size_t l = 0; l < s.c(); ++l) {
    const auto& f = s.continuous(l);
    if (!(f.stddev > 0.0)) throw DataError("continuous feature '" + f.name + "' is constant");
    auto col = rows.column(f.name);
    if (!col) throw DataError("column '" + f.name + "' missing");
    cont_cols.push_back(*col);
  }
  const auto target_col = rows.column(s.target_name());
  if (!target_col) throw DataError("target column '" + s.target_name() + "' missing");

  EncodedDataset ds;
  ds.schema = schema;
  ds.n = rows.num_rows();
  ds.cat.reserve(ds.n * s.k());
  ds.cont.reserve(ds.n * s.c());
  for (std::size_t r = 0; r < ds.n; ++r) {
    const auto& row = rows.rows[r];
    for (std::size_t j = 0; j < s.k(); ++j) {
      const auto& f = s.categorical(j);
      const auto& raw = row[cat_cols[j]];
      if (raw.empty()) {
        throw DataError("missing value in '" + f.name + "' at row " + std::to_string(r + 1));
      }
      auto idx = f.lookup(raw);
      if (!idx) {
        if (policy == UnknownPolicy::kStrict) {
          throw DataError("unseen category '" + raw + "' in feature '" + f.name +
                          "' at row " + std::to_string(r + 1));
        }
        idx = f.unk_index();
      }
      ds.cat.push_back(*idx);
    }
    for (std::size_t l = 0; l < s.c(); ++l) {
      const auto& f = s.continuous(l);
      auto v = detail::parse_number(row[cont_cols[l]]);
      if (!v) {
        throw DataError("non-numeric value '" + row[cont_cols[l]] + "' in '" + f.name +
                        "' at row " + std::to_string(r + 1));
      }
      ds.cont.push_back((*v - f.mean) / f.stddev);
    }
    const auto& t = row[*target_col];
    if (t == s.target_values()[1]) {
      ds.labels.push_back(1);
    } else if (t == s.target_values()[0]) {
      ds.labels.push_back(0);
    } else {
      throw DataError("unknown target value '" + t + "' at row " + std::to_string(r + 1));
    }
    ds.row_ids.push_back(static_cast<std::int64_t>(r));
  }
  return ds;
}

// Inverse of encode: raw strings (UNK renders as "<UNK>"), with a leading
// row_id column when `with_row_ids` is set.
inline Table decode(const EncodedDataset& ds, bool with_row_ids = false) {
  const Schema& s = *ds.schema;
  Table t;
  if (with_row_ids) t.header.push_back("row_id");
  std::vector<std::pair<bool, std::size_t>> cols;  // (categorical?, index)
  std::size_t j = 0, l = 0;
  for (const auto& f : s.features()) {
    t.header.push_back(f.name);
    cols.emplace_back(f.is_categorical(), f.is_categorical() ? j++ : l++);
  }
  t.header.push_back(s.target_name());
  for (std::size_t i = 0; i < ds.n; ++i) {
    std::vector<std::string> row;
    if (with_row_ids) row.push_back(std::to_string(ds.row_ids[i]));
    for (auto [is_cat, idx] : cols) {
      if (is_cat) {
        const auto v = ds.cat_at(i, idx);
        const auto& f = s.categorical(idx);
        row.push_back(v < f.cardinality() ? f.vocabulary[v] : std::string("<UNK>"));
      } else {
        const auto& f = s.continuous(idx);
        row.push_back(detail::format_real(ds.cont_at(i, idx) * f.stddev + f.mean));
      }
    }
    row.push_back(s.target_values()[ds.labels[i]]);
    t.rows.push_back(std::move(row));
  }
  return t;
}

// ---------------------------------------------------------------------------
// Stratified splits

struct SplitRatios {
  double train = 0.70;
  double val = 0.15;
  double test = 0.15;

  std::array<double, 3> as_array() const { return {train, val, test}; }
};

struct SplitBundle {
  EncodedDataset train, val, test;
  SplitRatios ratios;
  std::uint64_t seed = 0;
};

namespace detail {

// Largest-remainder apportionment of n items over three ratios, with each
// bucket receiving at least one item.
inline std::array<std::size_t, 3> apportion(std::size_t n, const std::array<double, 3>& r) {
  std::array<std::size_t, 3> counts{};
  std::array<double, 3> rem{};
  std::size_t assigned = 0;
  for (int s = 0; s < 3; ++s) {
    const double ideal = r[s] * static_cast<double>(n);
    counts[s] = static_cast<std::size_t>(std::floor(ideal));
    rem[s] = ideal - static_cast<double>(counts[s]);
    assigned += counts[s];
  }
  while (assigned < n) {
    int best = 0;
    for (int s = 1; s < 3; ++s) {
      if (rem[s] > rem[best]) best = s;
    }
    ++counts[best];
    rem[best] = -1.0;
    ++assigned;
  }
  for (int s = 0; s < 3; ++s) {
    if (counts[s] == 0) {
      int donor = 0;
      for (int t = 1; t < 3; ++t) {
        if (counts[t] > counts[donor]) donor = t;
      }
      --counts[donor];
      ++counts[s];
    }
  }
  return counts;
}

}  // namespace detail

inline void validate_ratios(const SplitRatios& ratios) {
  const auto r = ratios.as_array();
  for (double v : r) {
    if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError("split ratios must be positive");
  }
  if (std::abs(r[0] + r[1] + r[2] - 1.0) > 1e-9) {
    throw ConfigError("split ratios must sum to 1");
  }
}

inline SplitBundle stratified_split(const EncodedDataset& ds, const SplitRatios& ratios,
                                    std::uint64_t seed) {
  validate_ratios(ratios);
  std::array<std::vector<std::size_t>, 3> parts;
  for (std::uint8_t y = 0; y < 2; ++y) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < ds.n; ++i) {
      if (ds.labels[i] == y) idx.push_back(i);
    }
    if (idx.size() < 3) {
      throw DataError("class " + std::to_string(y) + " has " + std::to_string(idx.size()) +
                      " rows; need at least 3 for a three-way split");
    }
    Rng rng(derive_seed(seed, {0x5b1u, y}));
    rng.shuffle(std::span<std::size_t>(idx));
    const auto counts = detail::apportion(idx.size(), ratios.as_array());
    std::size_t pos = 0;
    for (int s = 0; s < 3; ++s) {
      parts[s].insert(parts[s].end(), idx.begin() + static_cast<std::ptrdiff_t>(pos),
                      idx.begin() + static_cast<std::ptrdiff_t>(pos + counts[s]));
      pos += counts[s];
    }
  }
  for (auto& p : parts) std::sort(p.begin(), p.end());
  return {ds.subset(parts[0]), ds.subset(parts[1]), ds.subset(parts[2]), ratios, seed};
}

// ---------------------------------------------------------------------------
// Synthetic spurious-correlation benchmark
//
// Feature 0 ("spurious") is binary and agrees with the label with
// probability `bias` on majority rows and 0.5 on minority rows. Feature 1
// ("group") marks the minority slice with category kSynthMinorityCategory;
// majority rows take one of the other two categories at random. Features
// 2..k-1 carry a moderate label signal: a value from the label's half of a
// 4-category vocabulary with probability kSynthSignal.

inline constexpr std::size_t kSynthSpuriousFeature = 0;
inline constexpr std::size_t kSynthGroupFeature = 1;
inline constexpr std::int32_t kSynthMinorityCategory = 2;
inline constexpr double kSynthSignal = 0.75;

struct SynthSpec {
  std::size_t n = 4000;
  std::size_t k = 4;
  double bias = 0.95;
  double minority_frac = 0.1;
  std::uint64_t seed = 43;
};

inline EncodedDataset synth_spurious(const SynthSpec& spec) {
  if (spec.n < 100) throw ConfigError("synth.n must be >= 100");
  if (spec.k < 2) throw ConfigError("synth.k must be >= 2");
  if (!(spec.bias >= 0.5 && spec.bias <= 1.0)) throw ConfigError("synth.bias must be in [0.5, 1]");
  if (!(spec.minority_frac >= 0.0 && spec.minority_frac < 1.0)) {
    throw ConfigError("synth.minority_frac must be in [0, 1)");
  }

  std::vector<FeatureSpec> feats;
  feats.push_back(FeatureSpec::categorical("spurious", {"s0", "s1"}));
  feats.push_back(FeatureSpec::categorical("group", {"a", "b", "m"}));
  for (std::size_t j = 2; j < spec.k; ++j) {
    feats.push_back(FeatureSpec::categorical("signal" + std::to_string(j - 1),
                                             {"v0", "v1", "v2", "v3"}));
  }
  auto schema = std::make_shared<const Schema>(std::move(feats), "label",
                                               std::array<std::string, 2>{"0", "1"});

  Rng rng(derive_seed(spec.seed, {0x5e7}));
  EncodedDataset ds;
  ds.schema = schema;
  ds.n = spec.n;
  ds.cat.reserve(spec.n * spec.k);
  for (std::size_t i = 0; i < spec.n; ++i) {
    const std::uint8_t y = rng.bernoulli(0.5) ? 1 : 0;
    const bool minority = rng.bernoulli(spec.minority_frac);
    const bool agree = rng.bernoulli(minority ? 0.5 : spec.bias);
    ds.cat.push_back(agree ? y : 1 - y);
    ds.cat.push_back(minority ? kSynthMinorityCategory
                              : static_cast<std::int32_t>(rng.index(2)));
    for (std::size_t j = 2; j < spec.k; ++j) {
      const bool aligned = rng.bernoulli(kSynthSignal);
      const std::int32_t half = aligned ? y : 1 - y;
      ds.cat.push_back(2 * half + static_cast<std::int32_t>(rng.index(2)));
    }
    ds.labels.push_back(y);
    ds.row_ids.push_back(static_cast<std::int64_t>(i));
  }
  return ds;
}

}  // namespace drtab
