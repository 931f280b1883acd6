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

// Cross-run reporting: the leaderboard and performance/complexity tradeoff
// produced by `compare`, and SVG performance-imperfection figures.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmfuse/core/error.hpp"
#include "mmfuse/core/io.hpp"
#include "mmfuse/evalmetrics.hpp"
#include "mmfuse/experiment.hpp"

namespace mmfuse {

// A completed run reduced to seed-averaged quantities.
struct RunRecord {
  fs::path dir;
  std::string name;
  std::string dataset_hash;
  std::string metric;  // "accuracy" or "mse"
  bool higher_is_better = true;
  std::vector<double> clean;                      // per successful seed
  std::vector<double> train_time_s;               // per successful seed
  std::size_t inference_param_count = 0;
  std::vector<RobustnessCurve> mean_curves;       // seed-averaged, one per partition

  double clean_mean() const { return mean_std(clean).at("mean").get<double>(); }
  double clean_std() const { return mean_std(clean).at("std").get<double>(); }
  double train_time_mean() const { return mean_std(train_time_s).at("mean").get<double>(); }
  const RobustnessCurve* curve(const std::string& partition) const {
    for (const auto& c : mean_curves) {
      if (c.partition == partition) return &c;
    }
    return nullptr;
  }
};

inline RunRecord load_run(const fs::path& dir) {
  const json manifest = read_manifest(dir);
  RunRecord r;
  r.dir = dir;
  r.name = fs::path(dir).lexically_normal().filename().string();
  if (r.name.empty()) r.name = fs::path(dir).lexically_normal().parent_path().filename().string();
  r.dataset_hash = manifest.at("dataset_hash").get<std::string>();
  r.metric = manifest.at("metric").get<std::string>();
  r.higher_is_better = r.metric == "accuracy";
  std::map<std::string, std::vector<RobustnessCurve>> curves;
  for (const auto& s : manifest.at("seeds")) {
    if (s.at("status").get<std::string>() != "ok") continue;
    const fs::path sd = dir / s.at("dir").get<std::string>();
    const json reports = io::read_json(sd / "reports.json");
    r.clean.push_back(reports.at("performance").at(r.metric).get<double>());
    r.train_time_s.push_back(reports.at("complexity").at("train_time_s").get<double>());
    r.inference_param_count = reports.at("complexity").at("inference_param_count").get<std::size_t>();
    for (const auto& c : reports.at("robustness").at("curves")) {
      RobustnessCurve curve = curve_from_json(c);
      curves[curve.partition].push_back(std::move(curve));
    }
  }
  if (r.clean.empty()) throw Error("run '" + dir.string() + "' has no successful seeds");
  for (auto& [part, list] : curves) {
    RobustnessCurve mean = list.front();
    for (std::size_t i = 1; i < list.size(); ++i) {
      if (list[i].sigma != mean.sigma) throw ShapeError("seeds of run '" + dir.string() + "' use different levels");
      for (std::size_t k = 0; k < mean.value.size(); ++k) mean.value[k] += list[i].value[k];
    }
    for (double& v : mean.value) v /= static_cast<double>(list.size());
    r.mean_curves.push_back(std::move(mean));
  }
  return r;
}

struct LeaderboardRow {
  std::string run;
  std::string dataset;
  std::string metric;
  double mean = 0.0;
  double std = 0.0;
  double minmax = 0.0;
  double complexity = 0.0;  // -log10(train time / baseline train time)
  std::size_t inference_params = 0;
  std::string partition;    // empty when the run has no robustness curves
  std::optional<RobustnessScores> scores;
};

struct CompareResult {
  std::vector<LeaderboardRow> rows;
  std::map<std::string, double> minmax;

  std::string leaderboard_csv() const {
    std::string out = "run,dataset,metric,mean,std,minmax,complexity,inference_params,partition,tau,rho\n";
    char buf[512];
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof buf, "%s,%s,%s,%.17g,%.17g,%.17g,%.17g,%zu,%s,", r.run.c_str(), r.dataset.c_str(),
                    r.metric.c_str(), r.mean, r.std, r.minmax, r.complexity, r.inference_params, r.partition.c_str());
      out += buf;
      if (r.scores) {
        std::snprintf(buf, sizeof buf, "%.17g,%.17g", r.scores->tau, r.scores->rho);
        out += buf;
      } else {
        out += ",";
      }
      out += "\n";
    }
    return out;
  }

  // One line per run: performance, complexity and mean tau over partitions.
  std::string tradeoff_csv() const {
    std::string out = "run,performance,complexity,tau\n";
    std::set<std::string> seen;
    char buf[512];
    for (const auto& r : rows) {
      if (!seen.insert(r.run).second) continue;
      double tau = 0.0;
      std::size_t n = 0;
      for (const auto& o : rows) {
        if (o.run == r.run && o.scores) {
          tau += o.scores->tau;
          ++n;
        }
      }
      std::snprintf(buf, sizeof buf, "%s,%.17g,%.17g,", r.run.c_str(), r.mean, r.complexity);
      out += buf;
      if (n) {
        std::snprintf(buf, sizeof buf, "%.17g", tau / static_cast<double>(n));
        out += buf;
      }
      out += "\n";
    }
    return out;
  }
};

// Leaderboard of `runs` against the late-fusion `baseline` run. Min-max
// scores use columns keyed by (dataset, metric); a column with a single run
// scores 1. Robustness scores are computed for runs sharing the baseline's
// dataset and level grid.
inline CompareResult compare_runs(const std::vector<fs::path>& dirs, const fs::path& baseline_dir) {
  if (dirs.empty()) throw ConfigError("compare needs at least one run directory", "runs");
  if (!fs::exists(baseline_dir / "manifest.json")) {
    throw ConfigError("baseline run '" + baseline_dir.string() + "' is missing or incomplete", "baseline");
  }
  const RunRecord base = load_run(baseline_dir);
  std::vector<RunRecord> runs;
  std::set<std::string> names;
  for (const auto& d : dirs) {
    RunRecord r = load_run(d);
    if (!names.insert(r.name).second) r.name = d.lexically_normal().string();
    runs.push_back(std::move(r));
  }

  CompareResult out;
  std::map<std::pair<std::string, std::string>, std::vector<const RunRecord*>> columns;
  for (const auto& r : runs) columns[{r.dataset_hash, r.metric}].push_back(&r);
  std::vector<MetricEntry> entries;
  for (const auto& [key, col] : columns) {
    if (col.size() < 2) continue;
    for (const auto* r : col) entries.push_back({r->name, key.first, key.second, r->clean_mean(), r->higher_is_better});
  }
  if (!entries.empty()) out.minmax = aggregate_minmax(entries);
  for (const auto& r : runs) out.minmax.emplace(r.name, 1.0);

  for (const auto& r : runs) {
    LeaderboardRow row;
    row.run = r.name;
    row.dataset = r.dataset_hash;
    row.metric = r.metric;
    row.mean = r.clean_mean();
    row.std = r.clean_std();
    row.minmax = out.minmax.at(r.name);
    row.complexity = aggregate_complexity(r.train_time_mean(), base.train_time_mean());
    row.inference_params = r.inference_param_count;
    if (r.mean_curves.empty()) {
      out.rows.push_back(row);
      continue;
    }
    for (const auto& c : r.mean_curves) {
      LeaderboardRow pr = row;
      pr.partition = c.partition;
      const RobustnessCurve* b = base.curve(c.partition);
      if (r.dataset_hash == base.dataset_hash && b && b->sigma == c.sigma) {
        pr.scores = robustness_scores(c, *b, r.higher_is_better ? TaskKind::kClassification : TaskKind::kRegression);
      }
      out.rows.push_back(std::move(pr));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// SVG emission.

struct SvgSeries {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

namespace detail {

inline std::string fmt(double v, const char* spec = "%.4g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline const char* palette(std::size_t i) {
  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};
  return kColors[i % 8];
}

struct Frame {
  double x0, x1, y0, y1;
  static constexpr double kLeft = 70, kTop = 40, kWidth = 440, kHeight = 300;
  double px(double x) const { return kLeft + (x - x0) / (x1 - x0) * kWidth; }
  double py(double y) const { return kTop + kHeight - (y - y0) / (y1 - y0) * kHeight; }
};

inline Frame padded_frame(double x0, double x1, double y0, double y1) {
  if (!(x1 > x0)) {
    x0 -= 0.5;
    x1 += 0.5;
  }
  if (!(y1 > y0)) {
    y0 -= 0.5;
    y1 += 0.5;
  }
  const double py = 0.05 * (y1 - y0);
  return {x0, x1, y0 - py, y1 + py};
}

inline std::string svg_axes(const Frame& f, const std::string& title, const std::string& xlabel, const std::string& ylabel) {
  std::string s;
  s += "<text x=\"290\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">" + xml_escape(title) + "</text>\n";
  s += "<rect x=\"70\" y=\"40\" width=\"440\" height=\"300\" fill=\"none\" stroke=\"#333\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = f.x0 + (f.x1 - f.x0) * i / 4.0, yv = f.y0 + (f.y1 - f.y0) * i / 4.0;
    s += "<text x=\"" + fmt(f.px(xv)) + "\" y=\"356\" text-anchor=\"middle\" font-size=\"11\">" + fmt(xv, "%.3g") + "</text>\n";
    s += "<text x=\"64\" y=\"" + fmt(f.py(yv) + 4) + "\" text-anchor=\"end\" font-size=\"11\">" + fmt(yv, "%.3g") + "</text>\n";
    s += "<line x1=\"70\" x2=\"510\" y1=\"" + fmt(f.py(yv)) + "\" y2=\"" + fmt(f.py(yv)) + "\" stroke=\"#ddd\"/>\n";
  }
  s += "<text x=\"290\" y=\"376\" text-anchor=\"middle\" font-size=\"12\">" + xml_escape(xlabel) + "</text>\n";
  s += "<text x=\"18\" y=\"190\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 18 190)\">" +
       xml_escape(ylabel) + "</text>\n";
  return s;
}

inline std::string svg_legend(const std::vector<SvgSeries>& series) {
  std::string s;
  for (std::size_t i = 0; i < series.size(); ++i) {
    const std::string y = fmt(52 + 16.0 * static_cast<double>(i));
    s += "<rect x=\"522\" y=\"" + fmt(44 + 16.0 * static_cast<double>(i)) + "\" width=\"10\" height=\"10\" fill=\"" +
         palette(i) + "\"/>\n";
    s += "<text x=\"538\" y=\"" + y + "\" font-size=\"11\">" + xml_escape(series[i].name) + "</text>\n";
  }
  return s;
}

inline std::string svg_document(const std::string& body) {
  return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"700\" height=\"390\" font-family=\"sans-serif\">\n"
         "<rect width=\"700\" height=\"390\" fill=\"white\"/>\n" + body + "</svg>\n";
}

}  // namespace detail

// Line chart on a fixed x range of [0, 1].
inline std::string svg_line_chart(const std::string& title, const std::string& ylabel, const std::vector<SvgSeries>& series) {
  double y0 = std::numeric_limits<double>::infinity(), y1 = -y0;
  for (const auto& s : series) {
    for (double v : s.y) {
      y0 = std::min(y0, v);
      y1 = std::max(y1, v);
    }
  }
  if (!std::isfinite(y0)) y0 = y1 = 0.0;
  const detail::Frame f = detail::padded_frame(0.0, 1.0, y0, y1);
  std::string body = detail::svg_axes(f, title, "imperfection level (sigma)", ylabel);
  for (std::size_t i = 0; i < series.size(); ++i) {
    std::string pts;
    for (std::size_t k = 0; k < series[i].x.size(); ++k) {
      pts += detail::fmt(f.px(series[i].x[k])) + "," + detail::fmt(f.py(series[i].y[k])) + " ";
      body += "<circle cx=\"" + detail::fmt(f.px(series[i].x[k])) + "\" cy=\"" + detail::fmt(f.py(series[i].y[k])) +
              "\" r=\"3\" fill=\"" + detail::palette(i) + "\"/>\n";
    }
    body += "<polyline fill=\"none\" stroke-width=\"2\" stroke=\"" + std::string(detail::palette(i)) + "\" points=\"" + pts + "\"/>\n";
  }
  return detail::svg_document(body + detail::svg_legend(series));
}

// Scatter of one point per series.
inline std::string svg_scatter(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                               const std::vector<SvgSeries>& points) {
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& p : points) {
    x0 = std::min(x0, p.x.at(0));
    x1 = std::max(x1, p.x.at(0));
    y0 = std::min(y0, p.y.at(0));
    y1 = std::max(y1, p.y.at(0));
  }
  if (!std::isfinite(x0)) x0 = x1 = y0 = y1 = 0.0;
  detail::Frame f = detail::padded_frame(x0, x1, y0, y1);
  const double pad = 0.05 * (f.x1 - f.x0);
  f.x0 -= pad;
  f.x1 += pad;
  std::string body = detail::svg_axes(f, title, xlabel, ylabel);
  for (std::size_t i = 0; i < points.size(); ++i) {
    body += "<circle cx=\"" + detail::fmt(f.px(points[i].x[0])) + "\" cy=\"" + detail::fmt(f.py(points[i].y[0])) +
            "\" r=\"5\" fill=\"" + detail::palette(i) + "\"/>\n";
  }
  return detail::svg_document(body + detail::svg_legend(points));
}

// Writes leaderboard.csv, tradeoff.csv and optionally tradeoff.svg.
inline CompareResult write_comparison(const std::vector<fs::path>& dirs, const fs::path& baseline, const fs::path& out,
                                      bool svg) {
  CompareResult r = compare_runs(dirs, baseline);
  io::write_file(out / "leaderboard.csv", r.leaderboard_csv());
  io::write_file(out / "tradeoff.csv", r.tradeoff_csv());
  if (svg) {
    std::vector<SvgSeries> pts;
    std::set<std::string> seen;
    for (const auto& row : r.rows) {
      if (seen.insert(row.run).second) pts.push_back({row.run, {row.complexity}, {row.mean}});
    }
    const std::string metric = r.rows.empty() ? "performance" : r.rows.front().metric;
    io::write_file(out / "tradeoff.svg",
                   svg_scatter("Performance vs complexity", "-log10(train time / baseline train time)", metric, pts));
  }
  return r;
}

// One SVG per partition with one seed-averaged series per run. Returns the
// written files.
inline std::vector<fs::path> plot_runs(const std::vector<fs::path>& dirs, const fs::path& out) {
  if (dirs.empty()) throw ConfigError("plot needs at least one run directory", "runs");
  std::vector<RunRecord> runs;
  for (const auto& d : dirs) runs.push_back(load_run(d));
  std::vector<std::string> partitions;
  for (const auto& r : runs) {
    for (const auto& c : r.mean_curves) {
      if (std::find(partitions.begin(), partitions.end(), c.partition) == partitions.end()) partitions.push_back(c.partition);
    }
  }
  if (partitions.empty()) throw Error("no robustness curves to plot");
  std::vector<fs::path> written;
  for (const auto& part : partitions) {
    std::vector<SvgSeries> series;
    for (const auto& r : runs) {
      if (const RobustnessCurve* c = r.curve(part)) series.push_back({r.name, c->sigma, c->value});
    }
    const fs::path file = out / (safe_file_name(part) + ".svg");
    io::write_file(file, svg_line_chart("Imperfection: " + part, runs.front().metric, series));
    written.push_back(file);
  }
  return written;
}

}  // namespace mmfuse
