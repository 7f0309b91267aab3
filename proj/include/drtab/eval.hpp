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

// Binary classification metrics, per-category subgroup accuracy, error-slice
// discovery, and report emission (JSON, CSV, SVG).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "drtab/csv.hpp"
#include "drtab/data.hpp"
#include "drtab/error.hpp"
#include "drtab/log.hpp"
#include "nlohmann/json.hpp"

namespace drtab {

inline constexpr int kReportVersion = 1;

struct MetricsReport {
  std::size_t n = 0;
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double auroc = 0.0;
  bool has_auroc = false;
  // Set when the corresponding denominator is zero and the metric reads 0.
  bool precision_degenerate = false;
  bool recall_degenerate = false;
};

namespace detail {

inline void check_binary(std::span<const std::uint8_t> v, const char* what) {
  for (auto x : v) {
    if (x > 1) throw DataError(std::string(what) + " must be binary (0/1)");
  }
}

}  // namespace detail

// Confusion counts and threshold metrics. The positive class is 1.
inline MetricsReport confusion_metrics(std::span<const std::uint8_t> pred,
                                       std::span<const std::uint8_t> truth) {
  if (pred.size() != truth.size()) {
    throw DataError("prediction/label length mismatch: " + std::to_string(pred.size()) + " vs " +
                    std::to_string(truth.size()));
  }
  if (pred.empty()) throw DataError("cannot compute metrics on zero rows");
  detail::check_binary(pred, "predictions");
  detail::check_binary(truth, "labels");
  MetricsReport r;
  r.n = pred.size();
  for (std::size_t i = 0; i < r.n; ++i) {
    if (pred[i] && truth[i]) ++r.tp;
    else if (pred[i]) ++r.fp;
    else if (truth[i]) ++r.fn;
    else ++r.tn;
  }
  auto ratio = [](std::size_t a, std::size_t b) {
    return static_cast<double>(a) / static_cast<double>(b);
  };
  r.accuracy = ratio(r.tp + r.tn, r.n);
  r.precision_degenerate = r.tp + r.fp == 0;
  r.recall_degenerate = r.tp + r.fn == 0;
  r.precision = r.precision_degenerate ? 0.0 : ratio(r.tp, r.tp + r.fp);
  r.recall = r.recall_degenerate ? 0.0 : ratio(r.tp, r.tp + r.fn);
  const double pr = r.precision + r.recall;
  r.f1 = pr > 0.0 ? 2.0 * r.precision * r.recall / pr : 0.0;
  return r;
}

// Area under the ROC curve from average ranks (ties count one half).
inline double auroc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) throw DataError("score/label length mismatch");
  detail::check_binary(labels, "labels");
  std::size_t n_pos = 0;
  for (auto y : labels) n_pos += y;
  const std::size_t n = scores.size();
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw DataError("AUROC needs both classes present");
  for (double s : scores) {
    if (std::isnan(s)) throw NumericError("NaN score passed to AUROC");
  }
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Sum of 1-based ranks of the positives, doubled to stay integral.
  std::uint64_t twice_rank_sum = 0;
  for (std::size_t lo = 0; lo < n;) {
    std::size_t hi = lo + 1;
    while (hi < n && scores[order[hi]] == scores[order[lo]]) ++hi;
    std::size_t pos_in_group = 0;
    for (std::size_t t = lo; t < hi; ++t) pos_in_group += labels[order[t]];
    twice_rank_sum += pos_in_group * (lo + 1 + hi);  // average rank = (lo+1+hi)/2
    lo = hi;
  }
  const double u = static_cast<double>(twice_rank_sum) / 2.0 -
                   static_cast<double>(n_pos) * static_cast<double>(n_pos + 1) / 2.0;
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

// Threshold metrics plus AUROC; AUROC is left unset when one class is absent.
inline MetricsReport classification_metrics(std::span<const double> scores,
                                            std::span<const std::uint8_t> pred,
                                            std::span<const std::uint8_t> truth) {
  auto r = confusion_metrics(pred, truth);
  if (r.tp + r.fn > 0 && r.tn + r.fp > 0) {
    r.auroc = auroc(scores, truth);
    r.has_auroc = true;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Subgroups and slices

struct SubgroupCell {
  std::size_t feature = 0;  // categorical index
  std::string feature_name;
  std::int32_t category = 0;
  std::string category_name;
  std::size_t n = 0;
  std::size_t correct = 0;
  double accuracy = 0.0;
};

namespace detail {

inline std::string category_name(const FeatureSpec& f, std::int32_t v) {
  return v >= 0 && v < f.cardinality() ? f.vocabulary[static_cast<std::size_t>(v)] : "<UNK>";
}

inline void check_aligned(std::span<const std::uint8_t> preds, const EncodedDataset& ds) {
  if (preds.size() != ds.n) {
    throw DataError("predictions (" + std::to_string(preds.size()) +
                    ") are not aligned with the dataset (" + std::to_string(ds.n) + " rows)");
  }
  check_binary(preds, "predictions");
}

// Per (feature, category) counts over rows of one class: {n, correct}.
inline std::vector<std::map<std::int32_t, std::pair<std::size_t, std::size_t>>> class_cells(
    std::span<const std::uint8_t> preds, const EncodedDataset& ds, std::uint8_t target_class) {
  std::vector<std::map<std::int32_t, std::pair<std::size_t, std::size_t>>> cells(ds.k());
  for (std::size_t i = 0; i < ds.n; ++i) {
    if (ds.labels[i] != target_class) continue;
    const bool ok = preds[i] == ds.labels[i];
    for (std::size_t j = 0; j < ds.k(); ++j) {
      auto& c = cells[j][ds.cat_at(i, j)];
      ++c.first;
      c.second += ok;
    }
  }
  return cells;
}

}  // namespace detail

// Accuracy of `preds` on rows labelled `target_class`, split by every
// (categorical feature, category) pair. Empty cells are omitted.
inline std::vector<SubgroupCell> subgroup_accuracy(std::span<const std::uint8_t> preds,
                                                   const EncodedDataset& ds,
                                                   std::uint8_t target_class) {
  detail::check_aligned(preds, ds);
  if (target_class > 1) throw ConfigError("target class must be 0 or 1");
  const auto cells = detail::class_cells(preds, ds, target_class);
  std::vector<SubgroupCell> out;
  for (std::size_t j = 0; j < ds.k(); ++j) {
    const auto& f = ds.schema->categorical(j);
    for (const auto& [v, c] : cells[j]) {
      out.push_back({j, f.name, v, detail::category_name(f, v), c.first, c.second,
                     static_cast<double>(c.second) / static_cast<double>(c.first)});
    }
  }
  return out;
}

struct SliceEntry {
  std::size_t feature = 0;
  std::string feature_name;
  std::int32_t category = 0;
  std::string category_name;
  std::size_t n = 0;
  double error_rate = 0.0;
  bool flagged = false;
};

struct SliceReport {
  std::uint8_t target_class = 1;
  double delta = 0.05;
  std::size_t min_support = 30;
  std::size_t n_class = 0;
  double overall_error = 0.0;
  std::vector<SliceEntry> entries;

  const SliceEntry* find(std::size_t feature, std::int32_t category) const {
    for (const auto& e : entries) {
      if (e.feature == feature && e.category == category) return &e;
    }
    return nullptr;
  }
};

// Flags every (feature, category) slice of class `target_class` whose error
// rate is at least `delta` above the class error rate and that has at least
// `min_support` rows.
inline SliceReport discover_slices(std::span<const std::uint8_t> preds, const EncodedDataset& ds,
                                   std::uint8_t target_class, double delta,
                                   std::size_t min_support) {
  if (!(delta >= 0.0) || !std::isfinite(delta)) throw ConfigError("eval.delta must be >= 0");
  if (min_support < 1) throw ConfigError("eval.min_support must be >= 1");
  if (target_class > 1) throw ConfigError("target class must be 0 or 1");
  detail::check_aligned(preds, ds);
  SliceReport r{target_class, delta, min_support, 0, 0.0, {}};
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < ds.n; ++i) {
    if (ds.labels[i] != target_class) continue;
    ++r.n_class;
    wrong += preds[i] != ds.labels[i];
  }
  if (r.n_class == 0) {
    throw DataError("no rows with label " + std::to_string(target_class) + " to search for slices");
  }
  r.overall_error = static_cast<double>(wrong) / static_cast<double>(r.n_class);
  const auto cells = detail::class_cells(preds, ds, target_class);
  for (std::size_t j = 0; j < ds.k(); ++j) {
    const auto& f = ds.schema->categorical(j);
    for (const auto& [v, c] : cells[j]) {
      SliceEntry e{j, f.name, v, detail::category_name(f, v), c.first,
                   static_cast<double>(c.first - c.second) / static_cast<double>(c.first), false};
      e.flagged = e.error_rate >= r.overall_error + delta && e.n >= min_support;
      r.entries.push_back(std::move(e));
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Reports

struct MethodReport {
  std::string method;
  std::string split;
  MetricsReport metrics;
  std::uint8_t subgroup_class = 1;
  std::vector<SubgroupCell> subgroups;
  SliceReport slices;
};

inline nlohmann::json to_json(const MetricsReport& m) {
  nlohmann::json j{{"n", m.n},
                   {"tp", m.tp},
                   {"fp", m.fp},
                   {"tn", m.tn},
                   {"fn", m.fn},
                   {"accuracy", m.accuracy},
                   {"precision", m.precision},
                   {"recall", m.recall},
                   {"f1", m.f1},
                   {"precision_degenerate", m.precision_degenerate},
                   {"recall_degenerate", m.recall_degenerate}};
  j["auroc"] = m.has_auroc ? nlohmann::json(m.auroc) : nlohmann::json(nullptr);
  return j;
}

inline nlohmann::json report_to_json(const MethodReport& r) {
  nlohmann::json subgroups = nlohmann::json::array();
  for (const auto& c : r.subgroups) {
    subgroups.push_back({{"feature", c.feature_name},
                         {"feature_index", c.feature},
                         {"category", c.category_name},
                         {"category_index", c.category},
                         {"n", c.n},
                         {"correct", c.correct},
                         {"accuracy", c.accuracy}});
  }
  nlohmann::json slices = nlohmann::json::array();
  for (const auto& e : r.slices.entries) {
    slices.push_back({{"feature", e.feature_name},
                      {"feature_index", e.feature},
                      {"category", e.category_name},
                      {"category_index", e.category},
                      {"n", e.n},
                      {"error_rate", e.error_rate},
                      {"flagged", e.flagged}});
  }
  return {{"report_version", kReportVersion},
          {"method", r.method},
          {"split", r.split},
          {"metrics", to_json(r.metrics)},
          {"subgroup_class", r.subgroup_class},
          {"subgroups", std::move(subgroups)},
          {"slice_search",
           {{"target_class", r.slices.target_class},
            {"delta", r.slices.delta},
            {"min_support", r.slices.min_support},
            {"n_class", r.slices.n_class},
            {"overall_error", r.slices.overall_error}}},
          {"slices", std::move(slices)}};
}

// Structural check of a report document. Returns human-readable problems;
// an empty result means the document is valid.
inline std::vector<std::string> report_json_problems(const nlohmann::json& doc) {
  std::vector<std::string> bad;
  auto need = [&](const nlohmann::json& obj, const std::string& path, const char* key,
                  auto&& pred, const char* type) {
    if (!obj.is_object() || !obj.contains(key)) {
      bad.push_back(path + key + " is missing");
    } else if (!pred(obj.at(key))) {
      bad.push_back(path + key + " must be " + type);
    }
  };
  auto is_unit = [](const nlohmann::json& v) {
    return v.is_number() && v.get<double>() >= 0.0 && v.get<double>() <= 1.0;
  };
  auto is_count = [](const nlohmann::json& v) { return v.is_number_unsigned(); };
  auto is_string = [](const nlohmann::json& v) { return v.is_string(); };
  auto is_bool = [](const nlohmann::json& v) { return v.is_boolean(); };
  auto is_array = [](const nlohmann::json& v) { return v.is_array(); };
  auto is_object = [](const nlohmann::json& v) { return v.is_object(); };

  if (!doc.is_object()) return {"report must be a JSON object"};
  need(doc, "", "report_version", [](const nlohmann::json& v) { return v == kReportVersion; },
       "the supported version");
  need(doc, "", "method", is_string, "a string");
  need(doc, "", "split", is_string, "a string");
  need(doc, "", "metrics", is_object, "an object");
  need(doc, "", "subgroups", is_array, "an array");
  need(doc, "", "slices", is_array, "an array");
  need(doc, "", "slice_search", is_object, "an object");
  if (!bad.empty()) return bad;

  const auto& m = doc.at("metrics");
  for (const char* k : {"n", "tp", "fp", "tn", "fn"}) need(m, "metrics.", k, is_count, "a count");
  for (const char* k : {"accuracy", "precision", "recall", "f1"}) {
    need(m, "metrics.", k, is_unit, "a number in [0, 1]");
  }
  need(m, "metrics.", "auroc", [&](const nlohmann::json& v) { return v.is_null() || is_unit(v); },
       "null or a number in [0, 1]");
  for (const char* k : {"precision_degenerate", "recall_degenerate"}) {
    need(m, "metrics.", k, is_bool, "a boolean");
  }
  if (bad.empty() && m.at("tp").get<std::size_t>() + m.at("fp").get<std::size_t>() +
                             m.at("tn").get<std::size_t>() + m.at("fn").get<std::size_t>() !=
                         m.at("n").get<std::size_t>()) {
    bad.push_back("metrics counts do not sum to n");
  }
  for (std::size_t i = 0; i < doc.at("subgroups").size(); ++i) {
    const auto& c = doc.at("subgroups")[i];
    const auto p = "subgroups[" + std::to_string(i) + "].";
    need(c, p, "feature", is_string, "a string");
    need(c, p, "category", is_string, "a string");
    need(c, p, "n", is_count, "a count");
    need(c, p, "accuracy", is_unit, "a number in [0, 1]");
  }
  const auto& ss = doc.at("slice_search");
  need(ss, "slice_search.", "delta", [](const nlohmann::json& v) { return v.is_number(); },
       "a number");
  need(ss, "slice_search.", "min_support", is_count, "a count");
  need(ss, "slice_search.", "overall_error", is_unit, "a number in [0, 1]");
  for (std::size_t i = 0; i < doc.at("slices").size(); ++i) {
    const auto& e = doc.at("slices")[i];
    const auto p = "slices[" + std::to_string(i) + "].";
    need(e, p, "feature", is_string, "a string");
    need(e, p, "category", is_string, "a string");
    need(e, p, "n", is_count, "a count");
    need(e, p, "error_rate", is_unit, "a number in [0, 1]");
    need(e, p, "flagged", is_bool, "a boolean");
  }
  return bad;
}

inline void validate_report_json(const nlohmann::json& doc) {
  const auto bad = report_json_problems(doc);
  if (!bad.empty()) throw DataError("invalid report: " + bad.front());
}

enum class ReportFormat { kJson, kCsv, kSvg };

inline ReportFormat parse_report_format(const std::string& s) {
  if (s == "json") return ReportFormat::kJson;
  if (s == "csv") return ReportFormat::kCsv;
  if (s == "svg") return ReportFormat::kSvg;
  throw ConfigError("unknown report format '" + s + "' (expected json, csv, or svg)");
}

namespace detail {

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char ch : s) {
    switch (ch) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += ch;
    }
  }
  return out;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  out.close();
  if (!out) throw DataError("cannot write '" + path.string() + "'");
}

inline std::string fixed(double v, int digits) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(digits);
  os << v;
  return os.str();
}

}  // namespace detail

// Grouped bar chart of subgroup accuracy: one panel per categorical feature,
// one bar per method within each category.
inline std::string subgroup_svg(const std::vector<MethodReport>& reports) {
  constexpr double kPanelW = 360, kPanelH = 220, kPad = 40, kBarGap = 2, kGroupGap = 10;
  constexpr int kCols = 2;
  static const char* kColors[] = {"#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3",
                                  "#937860"};

  // feature -> ordered categories -> method -> accuracy
  std::map<std::size_t, std::string> feature_names;
  std::map<std::size_t, std::map<std::int32_t, std::string>> categories;
  std::map<std::tuple<std::size_t, std::int32_t, std::size_t>, double> acc;
  for (std::size_t r = 0; r < reports.size(); ++r) {
    for (const auto& c : reports[r].subgroups) {
      feature_names[c.feature] = c.feature_name;
      categories[c.feature][c.category] = c.category_name;
      acc[{c.feature, c.category, r}] = c.accuracy;
    }
  }
  const int panels = static_cast<int>(feature_names.size());
  const int rows = std::max(1, (panels + kCols - 1) / kCols);
  const double width = kCols * kPanelW;
  const double height = rows * kPanelH + 30;

  std::ostringstream os;
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
     << "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" << width
     << "\" height=\"" << height << "\" font-family=\"sans-serif\" font-size=\"10\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  // Legend.
  for (std::size_t r = 0; r < reports.size(); ++r) {
    const double x = 10 + static_cast<double>(r) * 90;
    os << "<rect x=\"" << x << "\" y=\"8\" width=\"10\" height=\"10\" fill=\""
       << kColors[r % 6] << "\"/><text x=\"" << x + 14 << "\" y=\"17\">"
       << detail::xml_escape(reports[r].method) << "</text>\n";
  }
  int p = 0;
  for (const auto& [f, fname] : feature_names) {
    const double ox = (p % kCols) * kPanelW;
    const double oy = 30 + (p / kCols) * kPanelH;
    const double plot_w = kPanelW - 2 * kPad;
    const double plot_h = kPanelH - 2 * kPad;
    const double base_y = oy + kPad + plot_h;
    os << "<g class=\"panel\" data-feature=\"" << detail::xml_escape(fname) << "\">\n"
       << "<text x=\"" << ox + kPanelW / 2 << "\" y=\"" << oy + 20
       << "\" text-anchor=\"middle\" font-size=\"12\">" << detail::xml_escape(fname) << "</text>\n"
       << "<line x1=\"" << ox + kPad << "\" y1=\"" << base_y << "\" x2=\"" << ox + kPad + plot_w
       << "\" y2=\"" << base_y << "\" stroke=\"black\"/>\n"
       << "<line x1=\"" << ox + kPad << "\" y1=\"" << oy + kPad << "\" x2=\"" << ox + kPad
       << "\" y2=\"" << base_y << "\" stroke=\"black\"/>\n";
    for (double t : {0.0, 0.5, 1.0}) {
      os << "<text x=\"" << ox + kPad - 4 << "\" y=\"" << base_y - t * plot_h + 3
         << "\" text-anchor=\"end\">" << detail::fixed(t, 1) << "</text>\n";
    }
    const auto& cats = categories[f];
    const double group_w = plot_w / static_cast<double>(cats.size());
    const double bar_w = std::max(
        1.0, (group_w - kGroupGap) / static_cast<double>(std::max<std::size_t>(1, reports.size())) -
                 kBarGap);
    std::size_t g = 0;
    for (const auto& [v, vname] : cats) {
      const double gx = ox + kPad + static_cast<double>(g) * group_w + kGroupGap / 2;
      for (std::size_t r = 0; r < reports.size(); ++r) {
        const auto it = acc.find({f, v, r});
        if (it == acc.end()) continue;
        const double h = it->second * plot_h;
        os << "<rect x=\"" << detail::fixed(gx + static_cast<double>(r) * (bar_w + kBarGap), 2)
           << "\" y=\"" << detail::fixed(base_y - h, 2) << "\" width=\"" << detail::fixed(bar_w, 2)
           << "\" height=\"" << detail::fixed(h, 2) << "\" fill=\"" << kColors[r % 6]
           << "\"><title>" << detail::xml_escape(reports[r].method) << " " << detail::xml_escape(vname)
           << ": " << detail::fixed(it->second, 4) << "</title></rect>\n";
      }
      os << "<text x=\"" << gx + (group_w - kGroupGap) / 2 << "\" y=\"" << base_y + 12
         << "\" text-anchor=\"middle\">" << detail::xml_escape(vname) << "</text>\n";
      ++g;
    }
    os << "</g>\n";
    ++p;
  }
  os << "</svg>\n";
  return os.str();
}

// Writes the reports into out_dir and returns the paths written:
//   json  report_<method>.json per method
//   csv   metrics.csv, subgroups.csv, slices.csv (all methods)
//   svg   subgroups.svg (all methods side by side)
inline std::vector<std::filesystem::path> emit_report(const std::vector<MethodReport>& reports,
                                                      const std::filesystem::path& out_dir,
                                                      const std::set<ReportFormat>& formats) {
  std::vector<std::filesystem::path> written;
  if (formats.empty()) {
    warn("no report formats requested; nothing written");
    return written;
  }
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw DataError("cannot create report directory '" + out_dir.string() + "': " + ec.message());

  if (formats.count(ReportFormat::kJson)) {
    for (const auto& r : reports) {
      const auto path = out_dir / ("report_" + r.method + ".json");
      detail::write_text(path, report_to_json(r).dump(2) + "\n");
      written.push_back(path);
    }
  }
  if (formats.count(ReportFormat::kCsv)) {
    using detail::format_real;
    Table metrics{{"method", "split", "n", "tp", "fp", "tn", "fn", "accuracy", "precision",
                   "recall", "f1", "auroc"},
                  {}};
    Table subgroups{{"method", "split", "target_class", "feature", "category", "n", "accuracy"}, {}};
    Table slices{{"method", "split", "target_class", "feature", "category", "n", "error_rate",
                  "overall_error", "flagged"},
                 {}};
    for (const auto& r : reports) {
      const auto& m = r.metrics;
      metrics.rows.push_back({r.method, r.split, std::to_string(m.n), std::to_string(m.tp),
                              std::to_string(m.fp), std::to_string(m.tn), std::to_string(m.fn),
                              format_real(m.accuracy), format_real(m.precision),
                              format_real(m.recall), format_real(m.f1),
                              m.has_auroc ? format_real(m.auroc) : ""});
      for (const auto& c : r.subgroups) {
        subgroups.rows.push_back({r.method, r.split, std::to_string(r.subgroup_class), c.feature_name,
                                  c.category_name, std::to_string(c.n), format_real(c.accuracy)});
      }
      for (const auto& e : r.slices.entries) {
        slices.rows.push_back({r.method, r.split, std::to_string(r.slices.target_class),
                               e.feature_name, e.category_name, std::to_string(e.n),
                               format_real(e.error_rate), format_real(r.slices.overall_error),
                               e.flagged ? "1" : "0"});
      }
    }
    for (const auto& [name, table] :
         {std::pair{"metrics.csv", &metrics}, {"subgroups.csv", &subgroups}, {"slices.csv", &slices}}) {
      detail::write_text(out_dir / name, to_csv(*table));
      written.push_back(out_dir / name);
    }
  }
  if (formats.count(ReportFormat::kSvg)) {
    detail::write_text(out_dir / "subgroups.svg", subgroup_svg(reports));
    written.push_back(out_dir / "subgroups.svg");
  }
  return written;
}

}  // namespace drtab
