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

// Performance metrics, complexity accounting, robustness curves with
// relative/effective robustness, and cross-task aggregation.

#pragma once

#include <sys/resource.h>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmfuse/core/error.hpp"
#include "mmfuse/core/tensor.hpp"
#include "mmfuse/synthdata.hpp"

namespace mmfuse {

struct PerformanceReport {
  TaskKind kind = TaskKind::kClassification;
  double accuracy = 0.0;
  double micro_f1 = 0.0;
  double macro_f1 = 0.0;
  double auprc = 0.0;
  double mse = 0.0;
  double mae = 0.0;

  // The headline number used for curves and early stopping: accuracy, or
  // MSE for regression.
  double primary() const { return kind == TaskKind::kClassification ? accuracy : mse; }

  nlohmann::json to_json() const {
    if (kind == TaskKind::kClassification) {
      return {{"accuracy", accuracy}, {"micro_f1", micro_f1}, {"macro_f1", macro_f1}, {"auprc", auprc}};
    }
    return {{"mse", mse}, {"mae", mae}};
  }
};

inline double f1_from_counts(double tp, double fp, double fn) {
  const double denom = 2.0 * tp + fp + fn;
  return denom > 0.0 ? 2.0 * tp / denom : 0.0;
}

// K x K counts, rows = true class, columns = predicted class.
inline std::vector<std::vector<std::size_t>> confusion_matrix(const std::vector<std::size_t>& predicted,
                                                              const std::vector<std::size_t>& labels, std::size_t k) {
  if (predicted.size() != labels.size()) throw ShapeError("predictions and labels differ in length");
  std::vector<std::vector<std::size_t>> cm(k, std::vector<std::size_t>(k, 0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= k || predicted[i] >= k) throw ShapeError("class index out of range");
    ++cm[labels[i]][predicted[i]];
  }
  return cm;
}

// Average precision of `scores` for binary relevance `positive`. Tied scores
// form one threshold. Returns 0 when there are no positives.
inline double average_precision(const std::vector<double>& scores, const std::vector<bool>& positive) {
  if (scores.size() != positive.size()) throw ShapeError("scores and labels differ in length");
  const auto total_pos = static_cast<double>(std::count(positive.begin(), positive.end(), true));
  if (total_pos == 0.0) return 0.0;
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double tp = 0.0, seen = 0.0, ap = 0.0, prev_recall = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      tp += positive[order[j]] ? 1.0 : 0.0;
      seen += 1.0;
      ++j;
    }
    const double recall = tp / total_pos;
    ap += (recall - prev_recall) * (tp / seen);
    prev_recall = recall;
    i = j;
  }
  return ap;
}

// Classification metrics. `scores` holds one row of class scores per
// sample; predictions are the row argmax (first maximum on ties). Macro-F1
// averages over all K classes, a class absent from both predictions and
// labels scoring 0. AUPRC is average precision of class 1 for K = 2 and the
// mean one-vs-rest average precision over classes present in the labels
// otherwise.
inline PerformanceReport compute_classification(const Mat& scores, const std::vector<std::size_t>& labels) {
  const auto n = static_cast<std::size_t>(scores.rows());
  const auto k = static_cast<std::size_t>(scores.cols());
  if (n == 0) throw ShapeError("metrics need at least one prediction");
  if (labels.size() != n) throw ShapeError("predictions and labels differ in length");
  std::vector<std::size_t> predicted(n);
  for (std::size_t i = 0; i < n; ++i) {
    Eigen::Index arg = 0;
    scores.row(static_cast<Eigen::Index>(i)).maxCoeff(&arg);
    predicted[i] = static_cast<std::size_t>(arg);
  }
  const auto cm = confusion_matrix(predicted, labels, k);
  PerformanceReport r;
  r.kind = TaskKind::kClassification;
  double tp_all = 0.0, fp_all = 0.0, fn_all = 0.0, macro = 0.0;
  for (std::size_t c = 0; c < k; ++c) {
    double tp = static_cast<double>(cm[c][c]), fp = 0.0, fn = 0.0;
    for (std::size_t o = 0; o < k; ++o) {
      if (o == c) continue;
      fp += static_cast<double>(cm[o][c]);
      fn += static_cast<double>(cm[c][o]);
    }
    tp_all += tp;
    fp_all += fp;
    fn_all += fn;
    macro += f1_from_counts(tp, fp, fn);
  }
  r.accuracy = tp_all / static_cast<double>(n);
  r.micro_f1 = f1_from_counts(tp_all, fp_all, fn_all);
  r.macro_f1 = macro / static_cast<double>(k);
  auto ap_for = [&](std::size_t c) {
    std::vector<double> s(n);
    std::vector<bool> pos(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = scores(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c));
      pos[i] = labels[i] == c;
    }
    return average_precision(s, pos);
  };
  if (k == 2) {
    r.auprc = ap_for(1);
  } else {
    double sum = 0.0;
    std::size_t present = 0;
    for (std::size_t c = 0; c < k; ++c) {
      if (std::find(labels.begin(), labels.end(), c) == labels.end()) continue;
      sum += ap_for(c);
      ++present;
    }
    r.auprc = present > 0 ? sum / static_cast<double>(present) : 0.0;
  }
  return r;
}

inline PerformanceReport compute_regression(const Mat& predicted, const Mat& target) {
  if (predicted.rows() == 0) throw ShapeError("metrics need at least one prediction");
  if (predicted.rows() != target.rows() || predicted.cols() != target.cols()) {
    throw ShapeError("predictions and targets differ in shape");
  }
  PerformanceReport r;
  r.kind = TaskKind::kRegression;
  const Mat diff = predicted - target;
  r.mse = diff.array().square().mean();
  r.mae = diff.array().abs().mean();
  return r;
}

// ---------------------------------------------------------------------------
// Complexity.

struct ComplexityReport {
  std::size_t train_param_count = 0;
  std::size_t inference_param_count = 0;
  double train_time_s = 0.0;
  double inference_time_s = 0.0;
  std::size_t peak_memory_bytes = 0;
  std::size_t input_bits = 0;

  nlohmann::json to_json() const {
    return {{"train_param_count", train_param_count}, {"inference_param_count", inference_param_count},
            {"train_time_s", train_time_s},           {"inference_time_s", inference_time_s},
            {"peak_memory_bytes", peak_memory_bytes}, {"input_bits", input_bits}};
  }
};

// Peak resident set size of this process.
inline std::size_t peak_memory_bytes() {
  rusage u{};
  getrusage(RUSAGE_SELF, &u);
  return static_cast<std::size_t>(u.ru_maxrss) * 1024;
}

// Size in bits of a split serialized as float32 features plus one float32
// label entry per label value.
inline std::size_t serialized_bits(const SampleSet& set, const TaskSpec& task) {
  std::size_t floats = 0;
  for (const auto& s : set) {
    for (const auto& m : s.modalities) floats += m.size();
    floats += task.kind == TaskKind::kClassification ? 1 : task.regression_dim;
  }
  return floats * 32;
}

// ---------------------------------------------------------------------------
// Robustness.

struct RobustnessCurve {
  std::string partition;
  std::vector<double> sigma;
  std::vector<double> value;

  void validate() const {
    if (sigma.empty()) throw ShapeError("robustness curve is empty");
    if (sigma.size() != value.size()) throw ShapeError("robustness curve has mismatched lengths");
    if (sigma.front() != 0.0) throw ShapeError("robustness curve must start at sigma = 0");
    for (std::size_t i = 1; i < sigma.size(); ++i) {
      if (!(sigma[i] > sigma[i - 1])) throw ShapeError("robustness curve sigma values must be strictly ascending");
    }
  }

  nlohmann::json to_json() const { return {{"partition", partition}, {"sigma", sigma}, {"value", value}}; }

  std::string to_csv() const {
    std::string out = "sigma,value\n";
    char buf[64];
    for (std::size_t i = 0; i < sigma.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.17g,%.17g\n", sigma[i], value[i]);
      out += buf;
    }
    return out;
  }
};

struct RobustnessScores {
  double tau = 0.0;
  double rho = 0.0;

  nlohmann::json to_json() const { return {{"tau", tau}, {"rho", rho}}; }
};

inline double trapezoid(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw ShapeError("trapezoid needs equal-length inputs");
  double area = 0.0;
  for (std::size_t i = 1; i < x.size(); ++i) area += 0.5 * (x[i] - x[i - 1]) * (y[i] + y[i - 1]);
  return area;
}

namespace detail {

inline void require_shared_grid(const RobustnessCurve& f, const RobustnessCurve& lf) {
  f.validate();
  lf.validate();
  if (f.sigma != lf.sigma) throw ShapeError("robustness curves do not share a sigma grid");
}

}  // namespace detail

// Integrated gap between a model's curve and the late-fusion baseline's.
// Lower-is-better curves (regression MSE) are negated so a positive score
// always means more robust than the baseline.
inline double relative_robustness(const RobustnessCurve& f, const RobustnessCurve& lf,
                                  TaskKind kind = TaskKind::kClassification) {
  detail::require_shared_grid(f, lf);
  const double sign = kind == TaskKind::kClassification ? 1.0 : -1.0;
  std::vector<double> gap(f.value.size());
  for (std::size_t i = 0; i < gap.size(); ++i) gap[i] = sign * (f.value[i] - lf.value[i]);
  return trapezoid(f.sigma, gap);
}

// Baseline curve shifted vertically so its clean value equals clean_f,
// clipped to [0, 1] when `clip` is set (bounded metrics).
inline std::vector<double> fit_baseline_trend(double clean_f, const RobustnessCurve& lf, bool clip = true) {
  if (lf.value.empty()) throw ShapeError("baseline curve is empty");
  const double shift = clean_f - lf.value.front();
  std::vector<double> out(lf.value.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = clip ? std::clamp(lf.value[i] + shift, 0.0, 1.0) : lf.value[i] + shift;
  }
  return out;
}

// Regression curves are unbounded, so their shifted baseline is not clipped.
inline double effective_robustness(const RobustnessCurve& f, const RobustnessCurve& lf,
                                   TaskKind kind = TaskKind::kClassification) {
  detail::require_shared_grid(f, lf);
  const bool classification = kind == TaskKind::kClassification;
  const auto beta = fit_baseline_trend(f.value.front(), lf, classification);
  const double sign = classification ? 1.0 : -1.0;
  std::vector<double> gap(f.value.size());
  for (std::size_t i = 0; i < gap.size(); ++i) gap[i] = sign * (f.value[i] - beta[i]);
  return trapezoid(f.sigma, gap);
}

inline RobustnessScores robustness_scores(const RobustnessCurve& f, const RobustnessCurve& lf,
                                          TaskKind kind = TaskKind::kClassification) {
  return {relative_robustness(f, lf, kind), effective_robustness(f, lf, kind)};
}

// ---------------------------------------------------------------------------
// Aggregation.

struct MetricEntry {
  std::string model;
  std::string dataset;
  std::string task;
  double value = 0.0;
  bool higher_is_better = true;
};

// Min-max normalizes each (dataset, task) column over the models that ran it
// (best -> 1, worst -> 0; an all-equal column maps to 1), then scores each
// model by the weighted mean of its normalized values with weight 1/n for
// each of the n tasks in a dataset, over the tasks the model ran.
inline std::map<std::string, double> aggregate_minmax(const std::vector<MetricEntry>& entries) {
  using Key = std::pair<std::string, std::string>;
  std::map<Key, std::vector<const MetricEntry*>> columns;
  std::map<std::string, std::vector<std::string>> tasks_per_dataset;
  for (const auto& e : entries) {
    if (!std::isfinite(e.value)) throw ConfigError("non-finite metric for model '" + e.model + "'", "results");
    auto& col = columns[{e.dataset, e.task}];
    for (const auto* other : col) {
      if (other->model == e.model) throw ConfigError("duplicate result for model '" + e.model + "'", "results");
      if (other->higher_is_better != e.higher_is_better) throw ConfigError("inconsistent metric direction", "results");
    }
    if (col.empty()) tasks_per_dataset[e.dataset].push_back(e.task);
    col.push_back(&e);
  }
  std::map<std::string, double> weighted, weight_sum;
  for (const auto& [key, col] : columns) {
    if (col.size() < 2) throw ConfigError("task '" + key.second + "' needs results from at least two models", "results");
    double lo = col[0]->value, hi = col[0]->value;
    for (const auto* e : col) {
      lo = std::min(lo, e->value);
      hi = std::max(hi, e->value);
    }
    const double w = 1.0 / static_cast<double>(tasks_per_dataset[key.first].size());
    for (const auto* e : col) {
      double norm = 1.0;
      if (hi > lo) norm = e->higher_is_better ? (e->value - lo) / (hi - lo) : (hi - e->value) / (hi - lo);
      weighted[e->model] += w * norm;
      weight_sum[e->model] += w;
    }
  }
  std::map<std::string, double> out;
  for (const auto& [model, total] : weighted) out[model] = total / weight_sum[model];
  return out;
}

// -log10 of training time relative to the reference (best unimodal) time.
inline double aggregate_complexity(double train_time_model, double train_time_reference) {
  if (!(train_time_model > 0.0) || !(train_time_reference > 0.0)) {
    throw ConfigError("training times must be positive", "complexity");
  }
  return -std::log10(train_time_model / train_time_reference);
}

}  // namespace mmfuse
