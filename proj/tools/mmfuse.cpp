/*
 * Copyright 2026 The mmfuse Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// mmfuse command-line entry point.
//
//   mmfuse run <config>
//   mmfuse validate <config>
//   mmfuse compare <run dirs...> --baseline <dir> [--out <dir>] [--svg]
//   mmfuse plot <run dirs...> [--out <dir>]
//   mmfuse audit <run dir>
//
// Exit codes: 0 success, 2 invalid configuration, 3 runtime failure.
// Relative output paths resolve against $MMFUSE_OUTPUT_ROOT when set.

#include <exception>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "CLI11.hpp"
#include "mmfuse/core/error.hpp"
#include "mmfuse/experiment.hpp"
#include "mmfuse/report.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

namespace fs = std::filesystem;
using nlohmann::json;

int report_error(const std::string& type, const std::string& message, const std::string& field, int code) {
  json e = {{"error", {{"type", type}, {"message", message}}}};
  if (!field.empty()) e["error"]["field"] = field;
  std::cerr << e.dump() << "\n";
  return code;
}

std::vector<fs::path> to_paths(const std::vector<std::string>& v) { return {v.begin(), v.end()}; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multimodal fusion experiment runner"};
  app.require_subcommand(1);

  std::string config_path;
  auto* run = app.add_subcommand("run", "Train and test every seed of a config");
  run->add_option("config", config_path, "Experiment config (JSON)")->required();

  auto* validate = app.add_subcommand("validate", "Check a config without training");
  validate->add_option("config", config_path, "Experiment config (JSON)")->required();

  std::vector<std::string> dirs;
  std::string baseline, out;
  bool svg = false;
  auto* compare = app.add_subcommand("compare", "Leaderboard and tradeoff data against a late-fusion baseline");
  compare->add_option("runs", dirs, "Run directories")->required();
  compare->add_option("--baseline", baseline, "Baseline run directory")->required();
  compare->add_option("--out", out, "Output directory (default: <output root>/compare)");
  compare->add_flag("--svg", svg, "Also write a tradeoff scatter plot");

  auto* plot = app.add_subcommand("plot", "Performance-imperfection figures, one per partition");
  plot->add_option("runs", dirs, "Run directories")->required();
  plot->add_option("--out", out, "Output directory (default: <first run>/plots)");

  std::string audit_dir;
  auto* audit = app.add_subcommand("audit", "Re-derive persisted metrics from stored predictions");
  audit->add_option("run", audit_dir, "Run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*run) {
      const mmfuse::RunResult r = mmfuse::run_experiment(config_path, &std::cerr);
      json seeds = json::array();
      for (const auto& s : r.seeds) seeds.push_back({{"seed", s.seed}, {"status", s.status}});
      std::cout << json{{"run_dir", r.dir.string()}, {"config_hash", r.config_hash}, {"seeds", seeds},
                        {"summary", r.summary}}.dump(2)
                << "\n";
      return r.all_ok() ? kExitOk : kExitRuntime;
    }
    if (*validate) {
      std::cout << mmfuse::validate_config_file(config_path).dump(2) << "\n";
      return kExitOk;
    }
    if (*compare) {
      const fs::path dest = out.empty() ? mmfuse::resolve_output_dir("compare") : fs::path(out);
      const auto r = mmfuse::write_comparison(to_paths(dirs), baseline, dest, svg);
      std::cout << r.leaderboard_csv();
      return kExitOk;
    }
    if (*plot) {
      const fs::path dest = out.empty() ? fs::path(dirs.front()) / "plots" : fs::path(out);
      for (const auto& f : mmfuse::plot_runs(to_paths(dirs), dest)) std::cout << f.string() << "\n";
      return kExitOk;
    }
    if (*audit) {
      const mmfuse::AuditResult a = mmfuse::audit_run(audit_dir);
      std::cout << a.to_json().dump(2) << "\n";
      return a.ok() ? kExitOk : kExitRuntime;
    }
  } catch (const mmfuse::ConfigError& e) {
    return report_error("config", e.what(), e.field(), kExitConfig);
  } catch (const nlohmann::json::exception& e) {
    return report_error("config", e.what(), "", kExitConfig);
  } catch (const std::exception& e) {
    return report_error("runtime", e.what(), "", kExitRuntime);
  }
  return kExitRuntime;
}
