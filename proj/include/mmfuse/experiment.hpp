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

// Config-driven experiment runner: parse and validate an experiment config,
// run every seed through train and test, persist results, and audit a run
// directory against its stored predictions.

#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmfuse/core/error.hpp"
#include "mmfuse/core/io.hpp"
#include "mmfuse/encoders.hpp"
#include "mmfuse/evalmetrics.hpp"
#include "mmfuse/objectives.hpp"
#include "mmfuse/perturb.hpp"
#include "mmfuse/synthdata.hpp"
#include "mmfuse/training.hpp"

namespace mmfuse {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr int kConfigSchemaVersion = 1;
inline constexpr const char* kOutputRootEnv = "MMFUSE_OUTPUT_ROOT";

struct RobustnessConfig {
  bool enabled = true;
  std::vector<double> levels = {0.0, 0.25, 0.5, 0.75, 1.0};
  std::map<std::string, std::vector<std::string>> families;  // modality name -> families
  std::string multimodal = "mm_correlated_noise";            // empty: no multimodal partition
  json params = json::object();
  std::uint64_t seed = 0;
  std::string baseline;  // optional late-fusion run directory for tau / rho
};

struct ExperimentConfig {
  std::string name = "experiment";
  json dataset;
  std::vector<EncoderSpec> encoders;
  bool shared_encoder = false;  // a single object applied to every modality
  std::string fusion = "lf";
  json fusion_params = json::object();
  HeadSpec head;
  std::vector<ObjectiveTermSpec> objective = {{"task", 1.0}};
  std::string structure = "supervised";
  TrainConfig train;
  json structure_params = json::object();
  RobustnessConfig robustness;
  std::vector<std::uint64_t> seeds = {0};
  std::string output_dir;
  fs::path base_dir;  // directory of the config file, for relative dataset paths
};

namespace detail {

inline void require_keys(const json& j, const std::set<std::string>& allowed, const std::string& section) {
  if (!j.is_object()) throw ConfigError(section + " must be an object", section);
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key)) {
      throw ConfigError("unknown key '" + key + "'" + (section.empty() ? "" : " in " + section),
                        section.empty() ? key : section + "." + key);
    }
  }
}

// Runs `fn`, reporting JSON type errors as config errors against `field`.
template <typename Fn>
auto config_section(const std::string& field, Fn&& fn) {
  try {
    return fn();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid ") + field + ": " + e.what(), field);
  }
}

}  // namespace detail

inline ExperimentConfig parse_config(const json& j, const fs::path& base_dir = {}) {
  detail::require_keys(j, {"schema_version", "name", "dataset", "encoders", "fusion", "head", "objective", "training",
                           "robustness", "seeds", "output_dir"}, "");
  ExperimentConfig c;
  c.base_dir = base_dir;
  if (!j.contains("schema_version")) throw ConfigError("missing schema_version", "schema_version");
  if (!j.at("schema_version").is_number_integer() || j.at("schema_version").get<int>() != kConfigSchemaVersion) {
    throw ConfigError("unsupported schema_version (expected " + std::to_string(kConfigSchemaVersion) + ")", "schema_version");
  }
  c.name = detail::config_section("name", [&] { return j.value("name", c.name); });

  if (!j.contains("dataset")) throw ConfigError("missing dataset section", "dataset");
  c.dataset = j.at("dataset");
  detail::require_keys(c.dataset, {"generator", "args", "path"}, "dataset");
  if (c.dataset.contains("generator") == c.dataset.contains("path")) {
    throw ConfigError("dataset needs exactly one of 'generator' or 'path'", "dataset");
  }

  detail::config_section("encoders", [&] {
    const json e = j.value("encoders", json::array());
    if (e.is_object()) {
      c.shared_encoder = true;
      c.encoders.push_back(encoder_spec_from_json(e));
    } else if (e.is_array()) {
      for (const auto& x : e) c.encoders.push_back(encoder_spec_from_json(x));
    } else {
      throw ConfigError("encoders must be an object or a list", "encoders");
    }
    return 0;
  });

  detail::config_section("fusion", [&] {
    const json f = j.value("fusion", json{{"tag", "lf"}});
    if (f.is_string()) {
      c.fusion = f.get<std::string>();
    } else {
      detail::require_keys(f, {"tag", "params"}, "fusion");
      c.fusion = f.at("tag").get<std::string>();
      c.fusion_params = f.value("params", json::object());
    }
    return 0;
  });

  detail::config_section("head", [&] {
    const json h = j.value("head", json::object());
    detail::require_keys(h, {"hidden", "in_dim"}, "head");
    c.head.hidden = h.value("hidden", std::vector<std::size_t>{});
    if (h.contains("in_dim")) c.head.in_dim = h.at("in_dim").get<std::size_t>();
    return 0;
  });

  c.objective = detail::config_section("objective", [&] { return objective_from_json(j.value("objective", json())); });

  detail::config_section("training", [&] {
    const json t = j.value("training", json::object());
    detail::require_keys(t, {"structure", "epochs", "batch_size", "learning_rate", "optimizer", "momentum", "patience",
                             "probe_fraction", "blend_epsilon", "blend_weights", "cycle_weight", "cycle_norm",
                             "translator_hidden", "lambda", "shared_dim", "decoder_hidden"}, "training");
    c.structure = t.value("structure", c.structure);
    if (c.structure != "supervised" && c.structure != "gradblend" && c.structure != "mctn" && c.structure != "mfm") {
      throw ConfigError("unknown training structure '" + c.structure + "'", "training.structure");
    }
    c.train = TrainConfig::from_json(t);
    c.structure_params = t;
    for (const char* k : {"structure", "epochs", "batch_size", "learning_rate", "optimizer", "momentum", "patience"}) {
      c.structure_params.erase(k);
    }
    return 0;
  });

  detail::config_section("robustness", [&] {
    const json r = j.value("robustness", json::object());
    if (r.is_boolean()) {
      c.robustness.enabled = r.get<bool>();
      return 0;
    }
    detail::require_keys(r, {"enabled", "levels", "families", "multimodal", "params", "seed", "baseline"}, "robustness");
    RobustnessConfig& rc = c.robustness;
    rc.enabled = r.value("enabled", true);
    rc.levels = r.value("levels", rc.levels);
    rc.families = r.value("families", rc.families);
    if (r.contains("multimodal")) rc.multimodal = r.at("multimodal").is_null() ? "" : r.at("multimodal").get<std::string>();
    rc.params = r.value("params", json::object());
    rc.seed = r.value("seed", rc.seed);
    rc.baseline = r.value("baseline", std::string());
    auto check_family = [](const std::string& f, const std::string& field) {
      try {
        family_info(f);
      } catch (const ConfigError& e) {
        throw ConfigError(e.what(), field);
      }
    };
    for (const auto& [mod, fams] : rc.families) {
      for (const auto& f : fams) check_family(f, "robustness.families." + mod);
    }
    if (!rc.multimodal.empty()) check_family(rc.multimodal, "robustness.multimodal");
    return 0;
  });

  detail::config_section("seeds", [&] {
    c.seeds = j.value("seeds", c.seeds);
    if (c.seeds.empty()) throw ConfigError("seeds must list at least one seed", "seeds");
    std::set<std::uint64_t> unique(c.seeds.begin(), c.seeds.end());
    if (unique.size() != c.seeds.size()) throw ConfigError("seeds must be distinct", "seeds");
    return 0;
  });

  c.output_dir = detail::config_section("output_dir", [&] { return j.value("output_dir", std::string()); });
  if (c.output_dir.empty()) throw ConfigError("missing output_dir", "output_dir");
  return c;
}

// Relative output directories resolve against $MMFUSE_OUTPUT_ROOT when set,
// otherwise against the working directory.
inline fs::path resolve_output_dir(const std::string& output_dir) {
  fs::path p(output_dir);
  if (p.is_absolute()) return p;
  if (const char* root = std::getenv(kOutputRootEnv); root && *root) return fs::path(root) / p;
  return p;
}

inline DatasetSplits load_experiment_data(const ExperimentConfig& c) {
  if (c.dataset.contains("path")) {
    fs::path p(c.dataset.at("path").get<std::string>());
    if (p.is_relative() && !c.base_dir.empty()) p = c.base_dir / p;
    return DirectorySource(p).load();
  }
  return detail::config_section("dataset.args", [&] { return GeneratorSource(c.dataset).load(); });
}

inline std::vector<EncoderSpec> encoders_for(const ExperimentConfig& c, std::size_t modalities) {
  if (c.shared_encoder) return std::vector<EncoderSpec>(modalities, c.encoders.front());
  return c.encoders;
}

inline FusionModelSpec fusion_spec(const ExperimentConfig& c, const DatasetSplits& d, std::uint64_t seed) {
  FusionModelSpec s;
  s.modalities = d.specs;
  s.encoders = encoders_for(c, d.specs.size());
  s.fusion = c.fusion;
  s.fusion_params = c.fusion_params;
  s.head = c.head;
  s.task = d.task;
  s.seed = seed;
  s.objective = c.objective;
  return s;
}

inline MctnSpec mctn_spec(const ExperimentConfig& c, const DatasetSplits& d, std::uint64_t seed) {
  const auto encoders = encoders_for(c, d.specs.size());
  if (encoders.empty()) throw ConfigError("mctn needs an encoder for modality 1", "encoders");
  MctnSpec s;
  s.modalities = d.specs;
  s.encoder = encoders.front();
  s.hidden = c.structure_params.value("translator_hidden", s.hidden);
  s.head_hidden = c.head.hidden;
  s.task = d.task;
  s.seed = seed;
  s.cycle_weight = c.structure_params.value("cycle_weight", s.cycle_weight);
  const std::string norm = c.structure_params.value("cycle_norm", std::string("per-sample"));
  if (norm == "per-sample") {
    s.norm = CycleNorm::kPerSample;
  } else if (norm == "per-element") {
    s.norm = CycleNorm::kPerElement;
  } else {
    throw ConfigError("cycle_norm must be 'per-sample' or 'per-element'", "training.cycle_norm");
  }
  return s;
}

inline MfmSpec mfm_spec(const ExperimentConfig& c, const DatasetSplits& d, std::uint64_t seed) {
  MfmSpec s;
  s.modalities = d.specs;
  s.encoders = encoders_for(c, d.specs.size());
  s.shared_dim = c.structure_params.value("shared_dim", s.shared_dim);
  s.decoder_hidden = c.structure_params.value("decoder_hidden", s.decoder_hidden);
  s.head_hidden = c.head.hidden;
  s.task = d.task;
  s.seed = seed;
  s.lambda = c.structure_params.value("lambda", s.lambda);
  return s;
}

// Builds the untrained model for `seed`; every dimension check happens here.
inline std::unique_ptr<Model> build_model(const ExperimentConfig& c, const DatasetSplits& d, std::uint64_t seed) {
  return detail::config_section("training", [&]() -> std::unique_ptr<Model> {
    const bool task_only = c.objective.size() == 1 && c.objective[0].name == "task";
    if (c.structure == "mctn" || c.structure == "mfm") {
      if (!task_only) throw ConfigError("structure '" + c.structure + "' defines its own objective", "objective");
      if (c.structure == "mctn") return std::make_unique<MctnModel>(mctn_spec(c, d, seed));
      return std::make_unique<MfmModel>(mfm_spec(c, d, seed));
    }
    if (c.structure == "gradblend") return std::make_unique<GradBlendModel>(fusion_spec(c, d, seed));
    return std::make_unique<FusionModel>(fusion_spec(c, d, seed));
  });
}

inline TrainConfig seed_train_config(const ExperimentConfig& c, std::uint64_t seed) {
  TrainConfig t = c.train;
  t.seed = derive_seed(seed, {0x7EA1ull});
  return t;
}

inline TrainingOutcome train_for_seed(const ExperimentConfig& c, const DatasetSplits& d, std::uint64_t seed) {
  const TrainConfig cfg = seed_train_config(c, seed);
  if (c.structure == "gradblend") {
    GradBlendOptions o;
    o.probe_fraction = c.structure_params.value("probe_fraction", o.probe_fraction);
    o.epsilon = c.structure_params.value("blend_epsilon", o.epsilon);
    if (c.structure_params.contains("blend_weights")) {
      o.forced_weights = c.structure_params.at("blend_weights").get<std::vector<double>>();
    }
    return train_gradblend(fusion_spec(c, d, seed), d, cfg, o);
  }
  TrainingOutcome out;
  out.model = build_model(c, d, seed);
  out.history = train_model(*out.model, d, cfg);
  return out;
}

inline std::optional<NoisyTestGrid> build_grid(const ExperimentConfig& c, const DatasetSplits& d, std::uint64_t seed) {
  if (!c.robustness.enabled) return std::nullopt;
  return build_noisy_grid(d.test, d.specs, c.robustness.families, c.robustness.multimodal, c.robustness.levels,
                          derive_seed(c.robustness.seed, {seed}), c.robustness.params);
}

// ---------------------------------------------------------------------------
// Persistence helpers.

inline json matrix_to_json(const Mat& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index k = 0; k < m.cols(); ++k) row.push_back(m(i, k));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Mat matrix_from_json(const json& j) {
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = rows ? static_cast<Eigen::Index>(j[0].size()) : 0;
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    if (static_cast<Eigen::Index>(j[static_cast<std::size_t>(i)].size()) != cols) throw ShapeError("ragged matrix in JSON");
    for (Eigen::Index k = 0; k < cols; ++k) m(i, k) = j[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)].get<double>();
  }
  return m;
}

inline RobustnessCurve curve_from_json(const json& j) {
  RobustnessCurve c;
  c.partition = j.at("partition").get<std::string>();
  c.sigma = j.at("sigma").get<std::vector<double>>();
  c.value = j.at("value").get<std::vector<double>>();
  return c;
}

inline PerformanceReport performance_from(const TaskKind kind, const Mat& scores, const json& labels) {
  if (kind == TaskKind::kClassification) return compute_classification(scores, labels.get<std::vector<std::size_t>>());
  return compute_regression(scores, matrix_from_json(labels));
}

inline std::string safe_file_name(const std::string& s) {
  std::string out;
  for (char ch : s) out += (std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '_') ? ch : '_';
  return out.empty() ? "_" : out;
}

inline std::string seed_dir_name(std::uint64_t seed) { return "seed_" + std::to_string(seed); }

// Sample mean and (n-1) standard deviation; std is 0 for a single value.
inline json mean_std(const std::vector<double>& v) {
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  const double sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
  return {{"mean", mean}, {"std", sd}};
}

// Mean +- std of every performance field and robustness score over the
// successful seeds' metrics.
inline json summarize(const std::vector<json>& metrics) {
  json s = json::object();
  if (metrics.empty()) return s;
  std::map<std::string, std::vector<double>> perf;
  for (const auto& m : metrics) {
    for (const auto& [k, v] : m.at("performance").items()) perf[k].push_back(v.get<double>());
  }
  for (const auto& [k, v] : perf) s["performance"][k] = mean_std(v);
  std::map<std::string, std::map<std::string, std::vector<double>>> scores;
  for (const auto& m : metrics) {
    const json& sc = m.at("robustness").at("scores");
    if (!sc.is_object()) continue;
    for (const auto& [part, v] : sc.items()) {
      scores[part]["tau"].push_back(v.at("tau").get<double>());
      scores[part]["rho"].push_back(v.at("rho").get<double>());
    }
  }
  for (const auto& [part, m] : scores) {
    for (const auto& [k, v] : m) s["robustness"][part][k] = mean_std(v);
  }
  return s;
}

// Loads the baseline curves for `seed` from a completed run directory.
inline std::vector<RobustnessCurve> baseline_curves(const fs::path& dir, std::uint64_t seed) {
  if (!fs::exists(dir / "manifest.json")) {
    throw ConfigError("baseline run '" + dir.string() + "' has no manifest", "robustness.baseline");
  }
  const json manifest = io::read_json(dir / "manifest.json");
  for (const auto& s : manifest.at("seeds")) {
    if (s.at("seed").get<std::uint64_t>() != seed) continue;
    if (s.at("status").get<std::string>() != "ok") break;
    std::vector<RobustnessCurve> out;
    const json metrics = io::read_json(dir / seed_dir_name(seed) / "metrics.json");
    for (const auto& c : metrics.at("robustness").at("curves")) {
      out.push_back(curve_from_json(c));
    }
    return out;
  }
  throw ConfigError("baseline run '" + dir.string() + "' has no successful seed " + std::to_string(seed),
                    "robustness.baseline");
}

inline fs::path baseline_dir(const ExperimentConfig& c) {
  const fs::path p(c.robustness.baseline);
  return p.is_relative() ? resolve_output_dir(c.robustness.baseline) : p;
}

// ---------------------------------------------------------------------------
// run.

struct SeedResult {
  std::uint64_t seed = 0;
  std::string status;  // "ok", "diverged" or "failed"
  std::string error;
  json metrics;
};

struct RunResult {
  fs::path dir;
  std::string config_hash;
  std::vector<SeedResult> seeds;
  json summary;

  bool all_ok() const {
    for (const auto& s : seeds) {
      if (s.status != "ok") return false;
    }
    return true;
  }
};

inline std::string canonical_config_bytes(const json& raw) { return raw.dump(2) + "\n"; }

inline std::string dataset_hash(const json& config) { return io::fnv1a_hex(config.at("dataset").dump()); }

inline void write_predictions(const fs::path& path, const TestReport& r) {
  json p;
  p["kind"] = r.clean.kind == TaskKind::kClassification ? "classification" : "regression";
  p["index"] = r.clean.index;
  p["labels"] = r.clean.kind == TaskKind::kClassification ? json(r.clean.labels) : matrix_to_json(r.clean.targets);
  json evals = json::array();
  evals.push_back({{"partition", nullptr}, {"sigma", 0.0}, {"scores", matrix_to_json(r.clean.scores)}});
  for (const auto& part : r.robustness) {
    for (std::size_t l = 0; l < part.predictions.size(); ++l) {
      evals.push_back({{"partition", part.curve.partition},
                       {"sigma", part.curve.sigma[l]},
                       {"scores", matrix_to_json(part.predictions[l].scores)}});
    }
  }
  p["evaluations"] = std::move(evals);
  io::write_json(path, p);
}

// Trains, tests and persists one seed; returns its deterministic metrics.
inline json run_seed(const ExperimentConfig& c, const DatasetSplits& d, std::uint64_t seed, const fs::path& dir,
                     const std::string& config_hash) {
  fs::remove_all(dir);
  TrainingOutcome outcome = train_for_seed(c, d, seed);
  const auto grid = build_grid(c, d, seed);
  const TestReport report = test(*outcome.model, d, grid ? &*grid : nullptr, outcome.history.train_time_s);

  json robustness;
  robustness["levels"] = grid ? json(grid->levels()) : json::array();
  robustness["curves"] = json::array();
  for (const auto& p : report.robustness) {
    robustness["curves"].push_back(p.curve.to_json());
    io::write_file(dir / "curves" / (safe_file_name(p.curve.partition) + ".csv"), p.curve.to_csv());
  }
  robustness["multimodal_reason"] = report.multimodal_reason;
  robustness["scores"] = nullptr;
  robustness["baseline"] = nullptr;
  if (grid && !c.robustness.baseline.empty()) {
    const auto base = baseline_curves(baseline_dir(c), seed);
    json scores = json::object();
    json base_json = json::array();
    for (const auto& p : report.robustness) {
      for (const auto& b : base) {
        if (b.partition != p.curve.partition) continue;
        scores[p.curve.partition] = robustness_scores(p.curve, b, d.task.kind).to_json();
        base_json.push_back(b.to_json());
      }
    }
    robustness["scores"] = scores;
    robustness["baseline"] = {{"run", c.robustness.baseline}, {"curves", base_json}};
  }

  json metrics;
  metrics["seed"] = seed;
  metrics["structure"] = c.structure;
  metrics["model"] = outcome.model->kind();
  metrics["performance"] = report.performance.to_json();
  metrics["complexity"] = {{"train_param_count", report.complexity.train_param_count},
                           {"inference_param_count", report.complexity.inference_param_count},
                           {"input_bits", report.complexity.input_bits}};
  metrics["robustness"] = robustness;
  if (outcome.extras.contains("blend_weights")) metrics["blend_weights"] = outcome.extras.at("blend_weights");

  json reports = metrics;
  reports["complexity"] = report.complexity.to_json();

  json history = outcome.history.to_json();
  history["extras"] = outcome.extras;
  history["train_time_s"] = outcome.history.train_time_s;

  io::save_params(dir / "checkpoint", outcome.model->params(),
                  {{"kind", outcome.model->kind()}, {"seed", seed}, {"config_hash", config_hash},
                   {"inference_param_count", outcome.model->inference_param_count()}});
  io::write_json(dir / "history.json", history);
  write_predictions(dir / "predictions.json", report);
  io::write_json(dir / "metrics.json", metrics);
  io::write_json(dir / "reports.json", reports);
  return metrics;
}

struct LoadedConfig {
  json raw;
  ExperimentConfig config;
};

inline LoadedConfig load_config(const fs::path& path) {
  LoadedConfig l;
  l.raw = io::read_json(path);
  l.config = parse_config(l.raw, path.parent_path());
  return l;
}

// Checks a config end to end without training: parse, load data, build every
// seed's model and noisy grid. Returns a description of the built models.
inline json validate_experiment(const ExperimentConfig& c, const DatasetSplits& d) {
  json out = {{"valid", true}, {"name", c.name}, {"structure", c.structure}, {"models", json::array()}};
  for (std::uint64_t seed : c.seeds) {
    const auto model = build_model(c, d, seed);
    build_grid(c, d, seed);
    if (c.robustness.enabled && !c.robustness.baseline.empty()) baseline_curves(baseline_dir(c), seed);
    out["models"].push_back({{"seed", seed},
                             {"kind", model->kind()},
                             {"train_param_count", model->train_param_count()},
                             {"inference_param_count", model->inference_param_count()}});
  }
  if (c.structure == "gradblend" && c.structure_params.contains("blend_weights")) {
    const auto w = detail::config_section("training.blend_weights",
                                          [&] { return c.structure_params.at("blend_weights").get<std::vector<double>>(); });
    if (w.size() != d.specs.size() + 1) {
      throw ConfigError("blend_weights needs one weight per modality plus one for the fused stream",
                        "training.blend_weights");
    }
  }
  return out;
}

inline json validate_config_file(const fs::path& path) {
  const LoadedConfig l = load_config(path);
  return validate_experiment(l.config, load_experiment_data(l.config));
}

// Runs every seed and writes the manifest last. A seed that diverges or fails
// at runtime is recorded in the manifest without stopping the others.
inline RunResult run_experiment(const fs::path& config_path, std::ostream* log = nullptr) {
  const LoadedConfig l = load_config(config_path);
  const ExperimentConfig& c = l.config;
  const std::string bytes = canonical_config_bytes(l.raw);
  RunResult result;
  result.config_hash = io::fnv1a_hex(bytes);
  result.dir = resolve_output_dir(c.output_dir);

  const DatasetSplits data = load_experiment_data(c);
  validate_experiment(c, data);

  fs::create_directories(result.dir);
  fs::remove(result.dir / "manifest.json");
  io::write_file(result.dir / "config.json", bytes);

  std::vector<json> ok_metrics;
  for (std::uint64_t seed : c.seeds) {
    SeedResult s;
    s.seed = seed;
    if (log) *log << "seed " << seed << ": training (" << c.structure << ")\n";
    try {
      s.metrics = run_seed(c, data, seed, result.dir / seed_dir_name(seed), result.config_hash);
      s.status = "ok";
      ok_metrics.push_back(s.metrics);
    } catch (const DivergenceError& e) {
      s.status = "diverged";
      s.error = e.what();
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      s.status = "failed";
      s.error = e.what();
    }
    if (log) *log << "seed " << seed << ": " << s.status << (s.error.empty() ? "" : " (" + s.error + ")") << "\n";
    result.seeds.push_back(std::move(s));
  }
  result.summary = summarize(ok_metrics);

  json manifest;
  manifest["format_version"] = 1;
  manifest["name"] = c.name;
  manifest["config_hash"] = result.config_hash;
  manifest["dataset_hash"] = dataset_hash(l.raw);
  manifest["task"] = data.task.kind == TaskKind::kClassification ? "classification" : "regression";
  manifest["metric"] = data.task.kind == TaskKind::kClassification ? "accuracy" : "mse";
  manifest["seeds"] = json::array();
  for (const auto& s : result.seeds) {
    json e = {{"seed", s.seed}, {"status", s.status}, {"dir", seed_dir_name(s.seed)}};
    if (!s.error.empty()) e["error"] = s.error;
    manifest["seeds"].push_back(std::move(e));
  }
  manifest["summary"] = result.summary;
  io::write_json(result.dir / "manifest.json.tmp", manifest);
  fs::rename(result.dir / "manifest.json.tmp", result.dir / "manifest.json");
  return result;
}

// ---------------------------------------------------------------------------
// audit.

struct AuditResult {
  std::size_t checked = 0;
  std::vector<std::string> mismatches;

  bool ok() const { return mismatches.empty(); }
  json to_json() const { return {{"ok", ok()}, {"checked", checked}, {"mismatches", mismatches}}; }
};

inline json read_manifest(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw Error("'" + dir.string() + "' is not a run directory");
  if (!fs::exists(dir / "manifest.json")) {
    throw Error("run directory '" + dir.string() + "' has no manifest; the run is incomplete or failed");
  }
  return io::read_json(dir / "manifest.json");
}

// Re-derives every persisted metric of a run from its stored predictions
// and labels and compares for exact equality.
inline AuditResult audit_run(const fs::path& dir) {
  AuditResult a;
  const json manifest = read_manifest(dir);
  auto check = [&a](bool equal, const std::string& what) {
    ++a.checked;
    if (!equal) a.mismatches.push_back(what);
  };
  check(io::fnv1a_hex(io::read_file(dir / "config.json")) == manifest.at("config_hash").get<std::string>(),
        "config_hash");
  std::vector<json> ok_metrics;
  for (const auto& s : manifest.at("seeds")) {
    if (s.at("status").get<std::string>() != "ok") continue;
    const fs::path sd = dir / s.at("dir").get<std::string>();
    const std::string tag = s.at("dir").get<std::string>() + ": ";
    const json metrics = io::read_json(sd / "metrics.json");
    const json reports = io::read_json(sd / "reports.json");
    const json preds = io::read_json(sd / "predictions.json");
    ok_metrics.push_back(metrics);
    const TaskKind kind = preds.at("kind").get<std::string>() == "classification" ? TaskKind::kClassification
                                                                                   : TaskKind::kRegression;
    std::map<std::string, RobustnessCurve> curves;
    for (const auto& e : preds.at("evaluations")) {
      const PerformanceReport r = performance_from(kind, matrix_from_json(e.at("scores")), preds.at("labels"));
      if (e.at("partition").is_null()) {
        check(r.to_json() == metrics.at("performance"), tag + "performance");
        check(r.to_json() == reports.at("performance"), tag + "reports.performance");
      } else {
        auto& c = curves[e.at("partition").get<std::string>()];
        c.partition = e.at("partition").get<std::string>();
        c.sigma.push_back(e.at("sigma").get<double>());
        c.value.push_back(r.primary());
      }
    }
    const json& stored = metrics.at("robustness");
    check(stored.at("curves").size() == curves.size(), tag + "curve count");
    for (const auto& sc : stored.at("curves")) {
      const std::string part = sc.at("partition").get<std::string>();
      auto it = curves.find(part);
      if (it == curves.end()) {
        check(false, tag + "curve " + part);
        continue;
      }
      check(it->second.to_json() == sc, tag + "curve " + part);
      const fs::path csv = sd / "curves" / (safe_file_name(part) + ".csv");
      check(fs::exists(csv) && io::read_file(csv) == it->second.to_csv(), tag + "curve csv " + part);
    }
    if (stored.at("scores").is_object()) {
      for (const auto& b : stored.at("baseline").at("curves")) {
        const RobustnessCurve base = curve_from_json(b);
        auto it = curves.find(base.partition);
        if (it == curves.end()) {
          check(false, tag + "scores " + base.partition);
          continue;
        }
        check(robustness_scores(it->second, base, kind).to_json() == stored.at("scores").at(base.partition),
              tag + "scores " + base.partition);
      }
    }
    check(metrics.at("robustness") == reports.at("robustness"), tag + "reports.robustness");
  }
  check(summarize(ok_metrics) == manifest.at("summary"), "summary");
  return a;
}

}  // namespace mmfuse
