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

// drtab: command-line driver for the pre-training, robustification,
// classification and evaluation phases.
//
//   drtab synth      --out data.csv [--synth.n N ...]
//   drtab pretrain   --out RUN [--config cfg.json] [--model.d 16 ...]
//   drtab robustify  --out RUN --strategy jtt --upweight 20,50,100
//   drtab train-head --out RUN
//   drtab eval       --out RUN --format json,svg
//   drtab pipeline   --out RUN
//
// Phase subcommands share one run directory. Each runs every phase up to and
// including its own, reusing phases already completed with equal settings.
// Settings resolve as: defaults, DRTAB_SEED, the run's recorded config,
// --config, then flags.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#if __has_include("CLI11.hpp")
#include "CLI11.hpp"
#else
#include <CLI/CLI.hpp>
#endif
#include "drtab/drtab.hpp"

namespace fs = std::filesystem;

namespace {

struct CommonArgs {
  std::string out;
  std::string config_file;
  bool overwrite = false;
  bool print_config = false;
  std::map<std::string, std::string> overrides;  // dotted key -> raw value
};

// Registers one --<dotted.key> option per config leaf whose key starts with
// one of `prefixes` (all keys when empty).
void add_config_flags(CLI::App* cmd, CommonArgs& args, const std::vector<std::string>& prefixes) {
  for (const auto& key : drtab::config_keys()) {
    bool keep = prefixes.empty();
    for (const auto& p : prefixes) keep = keep || key.rfind(p, 0) == 0;
    if (!keep) continue;
    cmd->add_option_function<std::string>(
           "--" + key, [&args, key](const std::string& v) { args.overrides[key] = v; },
           "override config key " + key)
        ->group("Config");
  }
}

void add_alias(CLI::App* cmd, CommonArgs& args, const std::string& flag, const std::string& key,
               const std::string& help) {
  cmd->add_option_function<std::string>(
      flag, [&args, key](const std::string& v) { args.overrides[key] = v; }, help);
}

nlohmann::json resolve_config_doc(const CommonArgs& args, const fs::path& run_dir) {
  nlohmann::json doc = drtab::config_to_json(drtab::default_config());
  const auto manifest = run_dir / "manifest.json";
  if (!run_dir.empty() && !args.overwrite && fs::exists(manifest)) {
    const auto m = drtab::read_json_file(manifest);
    if (m.contains("config")) doc.merge_patch(m.at("config"));
  }
  if (!args.config_file.empty()) {
    const auto file = drtab::read_json_file(args.config_file);
    if (!file.is_object()) throw drtab::ConfigError("config file '" + args.config_file + "' must hold an object");
    doc.merge_patch(file);
  }
  for (const auto& [key, value] : args.overrides) drtab::apply_override(doc, key, value);
  return doc;
}

void print_summary(const drtab::PipelineResult& res) {
  for (const auto& p : res.reused) std::cout << "reused   " << p << '\n';
  for (const auto& p : res.executed) std::cout << "computed " << p << '\n';
  for (const auto& g : res.grid) {
    std::printf("jtt w=%-6g val_auroc=%.4f test_auroc=%.4f%s\n", g.upweight, g.val_auroc, g.test_auroc,
                g.selected ? "  (selected)" : "");
  }
  if (res.reports.empty()) return;
  std::printf("%-6s %6s %8s %9s %7s %6s %6s %7s\n", "method", "n", "accuracy", "precision", "recall",
              "f1", "auroc", "slices");
  for (const auto& r : res.reports) {
    std::size_t flagged = 0;
    for (const auto& e : r.slices.entries) flagged += e.flagged;
    const auto& m = r.metrics;
    std::printf("%-6s %6zu %8.4f %9.4f %7.4f %6.4f %6.4f %7zu\n", r.method.c_str(), m.n, m.accuracy,
                m.precision, m.recall, m.f1, m.auroc, flagged);
  }
}

int run_phase(const CommonArgs& args, drtab::Phase phase) {
  const fs::path run_dir = args.out;
  const auto doc = resolve_config_doc(args, run_dir);
  const auto cfg = drtab::config_from_json(doc);
  if (args.print_config) {
    std::cout << drtab::config_to_json(cfg).dump(2) << '\n';
    return 0;
  }
  drtab::PipelineOptions opt;
  opt.overwrite = args.overwrite;
  opt.stop_after = phase;
  const auto res = drtab::run_pipeline(cfg, run_dir, opt);
  print_summary(res);
  std::cout << "run directory: " << run_dir.string() << '\n';
  return 0;
}

int run_synth(const CommonArgs& args, const std::string& schema_out) {
  const auto cfg = drtab::config_from_json(resolve_config_doc(args, {}));
  if (args.print_config) {
    std::cout << drtab::config_to_json(cfg)["synth"].dump(2) << '\n';
    return 0;
  }
  const fs::path csv = args.out;
  fs::path schema = schema_out;
  if (schema.empty()) schema = fs::path(csv).replace_extension(".schema.json");
  for (const auto& p : {csv, schema}) {
    if (fs::exists(p) && !args.overwrite) {
      throw drtab::ConfigError("'" + p.string() + "' exists; pass --overwrite to replace it");
    }
  }
  if (csv.has_parent_path()) fs::create_directories(csv.parent_path());
  const auto ds = drtab::synth_spurious(cfg.synth);
  drtab::write_csv(csv.string(), drtab::decode(ds));
  drtab::detail::write_text(schema, ds.schema->to_json().dump(2) + "\n");
  std::cout << "wrote " << ds.n << " rows to " << csv.string() << " and schema to " << schema.string()
            << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Distributionally robust self-supervised pre-training for tabular data"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "drtab 0.1.0");

  CommonArgs args;
  std::string schema_out;
  std::optional<drtab::Phase> phase;

  auto* synth = app.add_subcommand("synth", "write the synthetic spurious-correlation dataset");
  synth->add_option("--out", args.out, "CSV output path")->required();
  synth->add_option("--schema", schema_out, "schema JSON path (default: <out>.schema.json)");
  synth->add_option("--config", args.config_file, "JSON config file");
  synth->add_flag("--overwrite", args.overwrite, "replace existing output files");
  synth->add_flag("--print-config", args.print_config, "print the resolved settings and exit");
  add_config_flags(synth, args, {"synth."});

  const std::vector<std::pair<std::string, drtab::Phase>> phases{
      {"pretrain", drtab::Phase::kPretrain},
      {"robustify", drtab::Phase::kRobustify},
      {"train-head", drtab::Phase::kClassify},
      {"eval", drtab::Phase::kEval},
      {"pipeline", drtab::Phase::kEval}};
  const std::map<std::string, std::string> blurbs{
      {"pretrain", "split the data and pre-train the base encoder-decoder"},
      {"robustify", "build one specialized checkpoint per categorical feature"},
      {"train-head", "train the downstream classifiers on base and routed representations"},
      {"eval", "score the test split and write metric, subgroup and slice reports"},
      {"pipeline", "run every phase end to end"}};
  for (const auto& [name, ph] : phases) {
    auto* cmd = app.add_subcommand(name, blurbs.at(name));
    cmd->add_option("--out", args.out, "run directory")->required();
    cmd->add_option("--config", args.config_file, "JSON config file");
    cmd->add_flag("--overwrite", args.overwrite, "discard the run directory and start over");
    cmd->add_flag("--print-config", args.print_config, "print the resolved settings and exit");
    add_alias(cmd, args, "--strategy", "stage2.strategy", "stage-2 strategies, comma separated (jtt,dfr)");
    add_alias(cmd, args, "--upweight", "stage2.upweight", "JTT upweight grid, comma separated");
    add_alias(cmd, args, "--format", "eval.formats", "report formats, comma separated (json,csv,svg)");
    add_config_flags(cmd, args, {});
    cmd->callback([&phase, p = ph] { phase = p; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(drtab::ExitCode::kConfig);
  }

  try {
    if (synth->parsed()) return run_synth(args, schema_out);
    return run_phase(args, *phase);
  } catch (const drtab::Error& e) {
    std::cerr << "drtab: error: " << e.what() << '\n';
    return static_cast<int>(e.code());
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "drtab: error: malformed JSON: " << e.what() << '\n';
    return static_cast<int>(drtab::ExitCode::kData);
  } catch (const fs::filesystem_error& e) {
    std::cerr << "drtab: error: " << e.what() << '\n';
    return static_cast<int>(drtab::ExitCode::kData);
  } catch (const std::exception& e) {
    std::cerr << "drtab: internal error: " << e.what() << '\n';
    return 1;
  }
}
