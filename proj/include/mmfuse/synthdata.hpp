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

// Seeded synthetic multimodal datasets, the dataset/split abstraction, the
// on-disk dataset directory format and WordAlign temporal alignment.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmfuse/core/error.hpp"
#include "mmfuse/core/io.hpp"
#include "mmfuse/core/random.hpp"
#include "mmfuse/core/tensor.hpp"

namespace mmfuse {

enum class ModalityKind { kStaticVector, kTemporalSequence, kImageGrid, kSet, kTable };

inline std::string to_string(ModalityKind k) {
  switch (k) {
    case ModalityKind::kStaticVector: return "static-vector";
    case ModalityKind::kTemporalSequence: return "temporal-sequence";
    case ModalityKind::kImageGrid: return "image-grid";
    case ModalityKind::kSet: return "set";
    case ModalityKind::kTable: return "table";
  }
  return "unknown";
}

inline ModalityKind modality_kind_from_string(const std::string& s) {
  if (s == "static-vector") return ModalityKind::kStaticVector;
  if (s == "temporal-sequence") return ModalityKind::kTemporalSequence;
  if (s == "image-grid") return ModalityKind::kImageGrid;
  if (s == "set") return ModalityKind::kSet;
  if (s == "table") return ModalityKind::kTable;
  throw ConfigError("unknown modality kind '" + s + "'", "kind");
}

// Shape conventions: static-vector/table [d]; temporal-sequence [T, d];
// image-grid [H, W, C]; set [max_elements, element_dim].
struct ModalitySpec {
  std::string name;
  ModalityKind kind = ModalityKind::kStaticVector;
  Shape shape;
  double sample_rate = 0.0;  // steps per unit time, temporal kinds only

  bool temporal() const { return kind == ModalityKind::kTemporalSequence; }

  void validate() const {
    if (shape.empty()) throw ShapeError("modality '" + name + "' has an empty shape");
    for (std::size_t s : shape) {
      if (s < 1) throw ShapeError("modality '" + name + "' has a zero dimension in " + shape_string(shape));
    }
    const std::size_t want = (kind == ModalityKind::kStaticVector || kind == ModalityKind::kTable) ? 1
                             : kind == ModalityKind::kImageGrid                                    ? 3
                                                                                                   : 2;
    if (shape.size() != want) {
      throw ShapeError("modality '" + name + "' of kind " + to_string(kind) + " needs a rank-" +
                       std::to_string(want) + " shape, got " + shape_string(shape));
    }
    if (temporal() && sample_rate < 1.0) {
      throw ShapeError("temporal modality '" + name + "' needs sample_rate >= 1");
    }
  }
};

enum class TaskKind { kClassification, kRegression };

struct TaskSpec {
  TaskKind kind = TaskKind::kClassification;
  std::size_t num_classes = 2;
  std::size_t regression_dim = 1;

  std::size_t output_dim() const { return kind == TaskKind::kClassification ? num_classes : regression_dim; }
};

struct Label {
  std::size_t class_index = 0;  // classification
  std::vector<float> values;    // regression

  bool operator==(const Label&) const = default;
};

struct MultimodalSample {
  std::vector<Array> modalities;
  Label label;
  std::size_t index = 0;  // position in generation order, stable across splits

  bool operator==(const MultimodalSample&) const = default;
};

using SampleSet = std::vector<MultimodalSample>;

struct DatasetSplits {
  std::string name;
  std::vector<ModalitySpec> specs;
  TaskSpec task;
  std::uint64_t seed = 0;
  SampleSet train;
  SampleSet valid;
  SampleSet test;
  nlohmann::json generator = nlohmann::json::object();

  std::size_t num_modalities() const { return specs.size(); }

  std::size_t modality_index(const std::string& modality) const {
    for (std::size_t i = 0; i < specs.size(); ++i) {
      if (specs[i].name == modality) return i;
    }
    throw ConfigError("dataset has no modality named '" + modality + "'", "target");
  }

  std::size_t size() const { return train.size() + valid.size() + test.size(); }
};

// Per-token (start, end) times.
struct WordIntervals {
  std::vector<std::pair<double, double>> intervals;

  void validate() const {
    for (std::size_t i = 0; i < intervals.size(); ++i) {
      const auto [s, e] = intervals[i];
      if (!(s >= 0.0 && s < e)) throw ConfigError("word interval " + std::to_string(i) + " needs 0 <= start < end");
      if (i > 0 && s < intervals[i - 1].first) throw ConfigError("word intervals must be sorted by start time");
    }
  }
};

// Checks that every sample conforms to the dataset's modality specs. Sets may
// hold fewer elements than the declared maximum.
inline void validate_dataset(const DatasetSplits& d) {
  if (d.specs.empty()) throw ShapeError("dataset has no modalities");
  for (const auto& s : d.specs) s.validate();
  auto check = [&](const SampleSet& set, const char* split) {
    for (const auto& sample : set) {
      if (sample.modalities.size() != d.specs.size()) {
        throw ShapeError(std::string(split) + " sample " + std::to_string(sample.index) + " has " +
                         std::to_string(sample.modalities.size()) + " modalities, expected " +
                         std::to_string(d.specs.size()));
      }
      for (std::size_t m = 0; m < d.specs.size(); ++m) {
        const Array& a = sample.modalities[m];
        const ModalitySpec& spec = d.specs[m];
        const bool shape_ok = spec.kind == ModalityKind::kSet
                                  ? (a.shape.size() == 2 && a.shape[0] <= spec.shape[0] && a.shape[1] == spec.shape[1])
                                  : a.shape == spec.shape;
        if (!shape_ok) {
          throw ShapeError("modality '" + spec.name + "' of sample " + std::to_string(sample.index) +
                           " has shape " + shape_string(a.shape) + ", expected " + shape_string(spec.shape));
        }
        for (float v : a.data) {
          if (!std::isfinite(v)) throw ShapeError("non-finite value in modality '" + spec.name + "'");
        }
      }
      if (d.task.kind == TaskKind::kClassification && sample.label.class_index >= d.task.num_classes) {
        throw ShapeError("class index out of range in sample " + std::to_string(sample.index));
      }
      if (d.task.kind == TaskKind::kRegression) {
        if (sample.label.values.size() != d.task.regression_dim) throw ShapeError("regression label has wrong dimension");
        for (float v : sample.label.values) {
          if (!std::isfinite(v)) throw ShapeError("non-finite regression label");
        }
      }
    }
  };
  check(d.train, "train");
  check(d.valid, "valid");
  check(d.test, "test");
}

namespace detail {

// Seeded 80/10/10 partition of generated samples.
inline void assign_splits(std::vector<MultimodalSample> all, Rng& rng, DatasetSplits& out) {
  std::vector<std::size_t> order(all.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
  const std::size_t n = all.size();
  const std::size_t n_train = n * 8 / 10;
  const std::size_t n_valid = n / 10;
  for (std::size_t k = 0; k < n; ++k) {
    MultimodalSample& s = all[order[k]];
    if (k < n_train) {
      out.train.push_back(std::move(s));
    } else if (k < n_train + n_valid) {
      out.valid.push_back(std::move(s));
    } else {
      out.test.push_back(std::move(s));
    }
  }
}

inline std::vector<std::size_t> affect_default_dims(std::size_t m) {
  static constexpr std::size_t kDims[] = {300, 35, 74};
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < m; ++i) out.push_back(kDims[i % 3]);
  return out;
}

inline std::vector<std::size_t> resolve_dims(std::vector<std::size_t> dims, std::size_t m) {
  if (dims.empty()) return affect_default_dims(m);
  if (dims.size() == 1) dims.assign(m, dims[0]);
  if (dims.size() != m) throw ConfigError("need one dimension per modality", "dims");
  for (std::size_t d : dims) {
    if (d < 1) throw ConfigError("modality dimensions must be positive", "dims");
  }
  return dims;
}

}  // namespace detail

struct RedundantOptions {
  std::size_t num_modalities = 2;
  std::vector<std::size_t> dims;  // empty: 300/35/74 cycle; one entry: broadcast
  std::size_t n = 1000;
  double noise = 0.5;
  std::uint64_t seed = 0;
  std::size_t latent_dim = 2;
  // Extra modalities of pure Gaussian noise appended after the informative ones.
  std::size_t noise_modalities = 0;
};

// A shared latent u ~ N(0, I_k) fixes the binary label y = [w.u > 0]; every
// informative modality is x_m = A_m u + noise * eps with A_m having
// orthonormal columns. A single modality therefore has Bayes accuracy
// 1/2 + atan(1/noise)/pi.
inline DatasetSplits make_redundant(const RedundantOptions& opt) {
  if (opt.num_modalities < 1) throw ConfigError("make_redundant needs at least one modality", "num_modalities");
  if (opt.n < 10) throw ConfigError("make_redundant needs n >= 10", "n");
  if (opt.latent_dim < 1) throw ConfigError("latent_dim must be positive", "latent_dim");
  if (!(opt.noise >= 0.0) || !std::isfinite(opt.noise)) throw ConfigError("noise must be a finite non-negative std", "noise");
  const auto dims = detail::resolve_dims(opt.dims, opt.num_modalities);
  for (std::size_t d : dims) {
    if (d < opt.latent_dim) throw ConfigError("every modality dimension must be >= latent_dim", "dims");
  }

  Rng rng(opt.seed);
  const auto k = static_cast<Eigen::Index>(opt.latent_dim);
  std::vector<Mat> views;
  for (std::size_t d : dims) {
    Mat g(static_cast<Eigen::Index>(d), k);
    for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = rng.normal();
    Eigen::HouseholderQR<Mat> qr(g);
    Mat q = qr.householderQ() * Mat::Identity(static_cast<Eigen::Index>(d), k);
    views.push_back(std::move(q));
  }
  Eigen::VectorXd w(k);
  for (Eigen::Index i = 0; i < k; ++i) w(i) = rng.normal();
  w.normalize();

  DatasetSplits out;
  out.name = "redundant";
  out.seed = opt.seed;
  out.task = TaskSpec{TaskKind::kClassification, 2, 1};
  for (std::size_t m = 0; m < dims.size(); ++m) {
    out.specs.push_back({"m" + std::to_string(m), ModalityKind::kStaticVector, {dims[m]}, 0.0});
  }
  for (std::size_t m = 0; m < opt.noise_modalities; ++m) {
    out.specs.push_back({"noise" + std::to_string(m), ModalityKind::kStaticVector, {dims[0]}, 0.0});
  }

  std::vector<MultimodalSample> all;
  all.reserve(opt.n);
  for (std::size_t i = 0; i < opt.n; ++i) {
    Eigen::VectorXd u(k);
    for (Eigen::Index j = 0; j < k; ++j) u(j) = rng.normal();
    MultimodalSample s;
    s.index = i;
    s.label.class_index = w.dot(u) > 0.0 ? 1 : 0;
    for (std::size_t m = 0; m < dims.size(); ++m) {
      Eigen::VectorXd x = views[m] * u;
      Array a({dims[m]});
      for (std::size_t j = 0; j < dims[m]; ++j) {
        a[j] = static_cast<float>(x(static_cast<Eigen::Index>(j)) + opt.noise * rng.normal());
      }
      s.modalities.push_back(std::move(a));
    }
    for (std::size_t m = 0; m < opt.noise_modalities; ++m) {
      Array a({dims[0]});
      for (std::size_t j = 0; j < dims[0]; ++j) a[j] = static_cast<float>(rng.normal());
      s.modalities.push_back(std::move(a));
    }
    all.push_back(std::move(s));
  }
  detail::assign_splits(std::move(all), rng, out);
  out.generator = {{"name", "make_redundant"},
                   {"num_modalities", opt.num_modalities},
                   {"dims", dims},
                   {"n", opt.n},
                   {"noise", opt.noise},
                   {"seed", opt.seed},
                   {"latent_dim", opt.latent_dim},
                   {"noise_modalities", opt.noise_modalities}};
  return out;
}

// Single-modality Bayes accuracy of make_redundant.
inline double redundant_bayes_accuracy(double noise) {
  if (noise == 0.0) return 1.0;
  return 0.5 + std::atan(1.0 / noise) / M_PI;
}

struct InteractionOptions {
  std::size_t n = 4000;
  double flip_prob = 0.05;
  std::uint64_t seed = 0;
  std::size_t dim = 8;
  double noise = 0.3;  // per-coordinate std around the planted sign pattern
  double amplitude = 1.0;
};

// Two modalities, each carrying one hidden bit b_m as x_m = (2 b_m - 1) *
// amplitude * 1/sqrt(d) + noise * P eps, where P removes the component of
// eps along the all-ones direction. The bit is therefore exactly decodable
// from the coordinate sum while every coordinate is noisy. The label is
// b_1 XOR b_2, flipped with probability flip_prob. Neither modality alone,
// nor any sum of per-modality scores, predicts the label above chance.
inline DatasetSplits make_interaction(const InteractionOptions& opt) {
  if (!(opt.flip_prob >= 0.0 && opt.flip_prob < 0.5)) throw ConfigError("flip_prob must lie in [0, 0.5)", "flip_prob");
  if (opt.n < 10) throw ConfigError("make_interaction needs n >= 10", "n");
  if (opt.dim < 1) throw ConfigError("dim must be positive", "dim");
  if (!(opt.noise >= 0.0)) throw ConfigError("noise must be non-negative", "noise");
  Rng rng(opt.seed);
  DatasetSplits out;
  out.name = "interaction";
  out.seed = opt.seed;
  out.task = TaskSpec{TaskKind::kClassification, 2, 1};
  out.specs = {{"m0", ModalityKind::kStaticVector, {opt.dim}, 0.0},
               {"m1", ModalityKind::kStaticVector, {opt.dim}, 0.0}};
  const double unit = opt.amplitude / std::sqrt(static_cast<double>(opt.dim));
  std::vector<MultimodalSample> all;
  all.reserve(opt.n);
  for (std::size_t i = 0; i < opt.n; ++i) {
    const bool b0 = rng.bernoulli(0.5);
    const bool b1 = rng.bernoulli(0.5);
    const bool flip = rng.bernoulli(opt.flip_prob);
    MultimodalSample s;
    s.index = i;
    s.label.class_index = static_cast<std::size_t>((b0 != b1) != flip);
    for (bool bit : {b0, b1}) {
      Array a({opt.dim});
      const double sign = bit ? 1.0 : -1.0;
      std::vector<double> eps(opt.dim);
      double mean = 0.0;
      for (double& e : eps) {
        e = rng.normal();
        mean += e;
      }
      mean /= static_cast<double>(opt.dim);
      for (std::size_t j = 0; j < opt.dim; ++j) a[j] = static_cast<float>(sign * unit + opt.noise * (eps[j] - mean));
      s.modalities.push_back(std::move(a));
    }
    all.push_back(std::move(s));
  }
  detail::assign_splits(std::move(all), rng, out);
  out.generator = {{"name", "make_interaction"}, {"n", opt.n},         {"flip_prob", opt.flip_prob},
                   {"seed", opt.seed},           {"dim", opt.dim},     {"noise", opt.noise},
                   {"amplitude", opt.amplitude}};
  return out;
}

// Exclusive-or truth table used by make_interaction.
inline std::size_t interaction_label(bool b0, bool b1) { return b0 != b1 ? 1 : 0; }

struct TemporalOptions {
  std::size_t num_modalities = 2;
  std::size_t time_length = 8;      // T, in time units
  std::vector<std::size_t> rates;   // steps per unit time; empty: 1, 2, 4, ...
  std::size_t n = 1000;
  std::uint64_t seed = 0;
  std::vector<std::size_t> dims;    // empty: 300/35/74 cycle
  double background = 0.3;          // half-width of uniform background noise
};

struct TemporalDataset {
  DatasetSplits splits;
  WordIntervals words;  // token intervals of modality 0, shared by all samples
};

// Modality 0 is token-granular (one row per word); modality m is sampled at
// rates[m] steps per unit time. Each sample has one or two "event" tokens and
// event rows in the other modalities (rows whose entries carry a fixed +-1
// pattern; background entries stay within +-background). The label is 1 iff a
// modality-1 event falls inside the time interval of an event token.
inline TemporalDataset make_temporal(const TemporalOptions& opt) {
  const std::size_t m_count = opt.num_modalities;
  if (m_count < 2) throw ConfigError("make_temporal needs at least two modalities", "num_modalities");
  if (opt.n < 10) throw ConfigError("make_temporal needs n >= 10", "n");
  if (opt.time_length < 2) throw ConfigError("make_temporal needs T >= 2", "time_length");
  if (!(opt.background >= 0.0 && opt.background < 0.5)) throw ConfigError("background must lie in [0, 0.5)", "background");
  std::vector<std::size_t> rates = opt.rates;
  if (rates.empty()) {
    for (std::size_t m = 0; m < m_count; ++m) rates.push_back(std::size_t{1} << std::min<std::size_t>(m, 2));
  }
  if (rates.size() != m_count) throw ConfigError("need one rate per modality", "rates");
  for (std::size_t r : rates) {
    if (r < 1) throw ConfigError("rates must be >= 1", "rates");
    if (r > opt.time_length) throw ConfigError("rate " + std::to_string(r) + " exceeds T", "rates");
  }
  const auto dims = detail::resolve_dims(opt.dims, m_count);
  const std::size_t tokens = opt.time_length * rates[0];
  if (tokens < 3) throw ConfigError("need at least 3 tokens", "time_length");

  Rng rng(opt.seed);
  std::vector<std::vector<float>> patterns;
  for (std::size_t d : dims) {
    std::vector<float> p(d);
    for (auto& v : p) v = rng.bernoulli(0.5) ? 1.0f : -1.0f;
    patterns.push_back(std::move(p));
  }

  TemporalDataset out;
  DatasetSplits& ds = out.splits;
  ds.name = "temporal";
  ds.seed = opt.seed;
  ds.task = TaskSpec{TaskKind::kClassification, 2, 1};
  for (std::size_t m = 0; m < m_count; ++m) {
    ds.specs.push_back({"m" + std::to_string(m), ModalityKind::kTemporalSequence,
                        {opt.time_length * rates[m], dims[m]}, static_cast<double>(rates[m])});
  }
  for (std::size_t t = 0; t < tokens; ++t) {
    out.words.intervals.emplace_back(static_cast<double>(t) / static_cast<double>(rates[0]),
                                     static_cast<double>(t + 1) / static_cast<double>(rates[0]));
  }

  // Token index that covers row j of modality m.
  auto token_of = [&](std::size_t m, std::size_t j) { return j * rates[0] / rates[m]; };
  auto rows_in_tokens = [&](std::size_t m, const std::vector<bool>& wanted) {
    std::vector<std::size_t> rows;
    for (std::size_t j = 0; j < opt.time_length * rates[m]; ++j) {
      if (wanted[token_of(m, j)]) rows.push_back(j);
    }
    return rows;
  };

  std::vector<MultimodalSample> all;
  all.reserve(opt.n);
  for (std::size_t i = 0; i < opt.n; ++i) {
    MultimodalSample s;
    s.index = i;
    for (std::size_t m = 0; m < m_count; ++m) {
      Array a({opt.time_length * rates[m], dims[m]});
      for (auto& v : a.data) v = static_cast<float>(rng.uniform(-opt.background, opt.background));
      s.modalities.push_back(std::move(a));
    }
    auto add_event = [&](std::size_t m, std::size_t row) {
      Array& a = s.modalities[m];
      for (std::size_t c = 0; c < dims[m]; ++c) a.data[row * dims[m] + c] += patterns[m][c];
    };

    const bool positive = rng.bernoulli(0.5);
    s.label.class_index = positive ? 1 : 0;
    const std::size_t n_events = 1 + rng.index(2);
    std::vector<bool> event_token(tokens, false);
    std::vector<std::size_t> event_list;
    while (event_list.size() < n_events) {
      const std::size_t t = rng.index(tokens);
      if (!event_token[t]) {
        event_token[t] = true;
        event_list.push_back(t);
      }
    }
    for (std::size_t t : event_list) add_event(0, t);

    std::vector<bool> quiet_token(tokens);
    for (std::size_t t = 0; t < tokens; ++t) quiet_token[t] = !event_token[t];
    const auto quiet_rows = rows_in_tokens(1, quiet_token);
    if (positive) {
      const auto hot_rows = rows_in_tokens(1, event_token);
      add_event(1, hot_rows[rng.index(hot_rows.size())]);
      if (rng.bernoulli(0.5)) add_event(1, quiet_rows[rng.index(quiet_rows.size())]);
    } else {
      add_event(1, quiet_rows[rng.index(quiet_rows.size())]);
    }
    for (std::size_t m = 2; m < m_count; ++m) add_event(m, rng.index(opt.time_length * rates[m]));
    all.push_back(std::move(s));
  }
  detail::assign_splits(std::move(all), rng, ds);
  ds.generator = {{"name", "make_temporal"}, {"num_modalities", m_count}, {"time_length", opt.time_length},
                  {"rates", rates},          {"n", opt.n},                {"seed", opt.seed},
                  {"dims", dims},            {"background", opt.background}};
  return out;
}

struct AlignedSequence {
  Array values;             // one row per interval
  std::vector<bool> empty;  // true where no input row fell inside the interval
};

// Averages the rows of `seq` (row j sits at time j / rate) whose time falls
// in [start, end) of each interval. Intervals covering no row produce a zero
// row and set the corresponding `empty` flag.
inline AlignedSequence word_align(const Array& seq, const WordIntervals& words, double rate = 1.0) {
  if (seq.shape.size() != 2) throw ShapeError("word_align expects a [T, d] sequence, got " + shape_string(seq.shape));
  if (!(rate > 0.0)) throw ConfigError("word_align rate must be positive", "rate");
  words.validate();
  const std::size_t steps = seq.shape[0];
  const std::size_t d = seq.shape[1];
  AlignedSequence out{Array({words.intervals.size(), d}), std::vector<bool>(words.intervals.size(), false)};
  std::vector<double> acc(d);
  for (std::size_t t = 0; t < words.intervals.size(); ++t) {
    const auto [start, end] = words.intervals[t];
    std::fill(acc.begin(), acc.end(), 0.0);
    std::size_t count = 0;
    const auto first = static_cast<std::size_t>(std::max(0.0, std::ceil(start * rate)));
    for (std::size_t j = first; j < steps; ++j) {
      const double time = static_cast<double>(j) / rate;
      if (time < start) continue;
      if (time >= end) break;
      for (std::size_t c = 0; c < d; ++c) acc[c] += seq.data[j * d + c];
      ++count;
    }
    if (count == 0) {
      out.empty[t] = true;
      continue;
    }
    for (std::size_t c = 0; c < d; ++c) out.values.data[t * d + c] = static_cast<float>(acc[c] / static_cast<double>(count));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Directory format: spec.json plus one little-endian float32 file per
// (split, modality) and per split for labels.

namespace detail {

inline const char* kSplitNames[] = {"train", "valid", "test"};

inline SampleSet& split_ref(DatasetSplits& d, int i) { return i == 0 ? d.train : i == 1 ? d.valid : d.test; }
inline const SampleSet& split_ref(const DatasetSplits& d, int i) { return i == 0 ? d.train : i == 1 ? d.valid : d.test; }

inline nlohmann::json task_to_json(const TaskSpec& t) {
  if (t.kind == TaskKind::kClassification) return {{"kind", "classification"}, {"num_classes", t.num_classes}};
  return {{"kind", "regression"}, {"dim", t.regression_dim}};
}

inline TaskSpec task_from_json(const nlohmann::json& j) {
  TaskSpec t;
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "classification") {
    t.kind = TaskKind::kClassification;
    t.num_classes = j.at("num_classes").get<std::size_t>();
  } else if (kind == "regression") {
    t.kind = TaskKind::kRegression;
    t.regression_dim = j.at("dim").get<std::size_t>();
  } else {
    throw ConfigError("unknown task kind '" + kind + "'", "task.kind");
  }
  return t;
}

}  // namespace detail

inline nlohmann::json modality_spec_to_json(const ModalitySpec& s) {
  return {{"name", s.name}, {"kind", to_string(s.kind)}, {"shape", s.shape}, {"sample_rate", s.sample_rate}};
}

inline ModalitySpec modality_spec_from_json(const nlohmann::json& j) {
  ModalitySpec s;
  s.name = j.at("name").get<std::string>();
  s.kind = modality_kind_from_string(j.at("kind").get<std::string>());
  s.shape = j.at("shape").get<Shape>();
  s.sample_rate = j.value("sample_rate", 0.0);
  return s;
}

inline void save_dataset(const DatasetSplits& d, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json spec;
  spec["format_version"] = 1;
  spec["name"] = d.name;
  spec["seed"] = d.seed;
  spec["task"] = detail::task_to_json(d.task);
  spec["generator"] = d.generator;
  spec["modalities"] = nlohmann::json::array();
  for (const auto& m : d.specs) spec["modalities"].push_back(modality_spec_to_json(m));
  for (int si = 0; si < 3; ++si) {
    const SampleSet& set = detail::split_ref(d, si);
    const std::string split = detail::kSplitNames[si];
    nlohmann::json js;
    js["count"] = set.size();
    std::vector<std::size_t> indices;
    for (const auto& s : set) indices.push_back(s.index);
    js["indices"] = indices;
    js["files"] = nlohmann::json::object();
    for (std::size_t m = 0; m < d.specs.size(); ++m) {
      const std::string file = split + "_" + d.specs[m].name + ".bin";
      std::vector<float> flat;
      std::vector<Shape> shapes;
      bool variable = false;
      for (const auto& s : set) {
        const Array& a = s.modalities[m];
        flat.insert(flat.end(), a.data.begin(), a.data.end());
        shapes.push_back(a.shape);
        if (a.shape != d.specs[m].shape) variable = true;
      }
      io::write_f32_file(dir / file, flat);
      js["files"][d.specs[m].name] = file;
      if (variable) js["shapes"][d.specs[m].name] = shapes;
    }
    std::vector<float> labels;
    for (const auto& s : set) {
      if (d.task.kind == TaskKind::kClassification) {
        labels.push_back(static_cast<float>(s.label.class_index));
      } else {
        labels.insert(labels.end(), s.label.values.begin(), s.label.values.end());
      }
    }
    const std::string label_file = split + "_labels.bin";
    io::write_f32_file(dir / label_file, labels);
    js["files"]["labels"] = label_file;
    spec["splits"][split] = js;
  }
  io::write_json(dir / "spec.json", spec);
}

inline DatasetSplits load_dataset(const std::filesystem::path& dir) {
  const nlohmann::json spec = io::read_json(dir / "spec.json");
  DatasetSplits d;
  d.name = spec.value("name", std::string("external"));
  d.seed = spec.value("seed", std::uint64_t{0});
  d.task = detail::task_from_json(spec.at("task"));
  d.generator = spec.value("generator", nlohmann::json::object());
  for (const auto& m : spec.at("modalities")) d.specs.push_back(modality_spec_from_json(m));
  for (int si = 0; si < 3; ++si) {
    const std::string split = detail::kSplitNames[si];
    const auto& js = spec.at("splits").at(split);
    const auto count = js.at("count").get<std::size_t>();
    SampleSet& set = detail::split_ref(d, si);
    set.resize(count);
    const auto indices = js.value("indices", std::vector<std::size_t>{});
    for (std::size_t i = 0; i < count; ++i) set[i].index = i < indices.size() ? indices[i] : i;
    for (std::size_t m = 0; m < d.specs.size(); ++m) {
      const auto& name = d.specs[m].name;
      const auto flat = io::read_f32_file(dir / js.at("files").at(name).get<std::string>());
      std::vector<Shape> shapes;
      if (js.contains("shapes") && js["shapes"].contains(name)) {
        shapes = js["shapes"][name].get<std::vector<Shape>>();
      } else {
        shapes.assign(count, d.specs[m].shape);
      }
      if (shapes.size() != count) throw ShapeError("shape list length does not match count for " + name);
      std::size_t off = 0;
      for (std::size_t i = 0; i < count; ++i) {
        const std::size_t sz = shape_size(shapes[i]);
        if (off + sz > flat.size()) throw ShapeError(split + " payload for '" + name + "' is too short");
        set[i].modalities.emplace_back(shapes[i], std::vector<float>(flat.begin() + static_cast<std::ptrdiff_t>(off),
                                                                     flat.begin() + static_cast<std::ptrdiff_t>(off + sz)));
        off += sz;
      }
      if (off != flat.size()) throw ShapeError(split + " payload for '" + name + "' has trailing data");
    }
    const auto labels = io::read_f32_file(dir / js.at("files").at("labels").get<std::string>());
    const std::size_t width = d.task.kind == TaskKind::kClassification ? 1 : d.task.regression_dim;
    if (labels.size() != count * width) throw ShapeError(split + " label payload has the wrong size");
    for (std::size_t i = 0; i < count; ++i) {
      if (d.task.kind == TaskKind::kClassification) {
        set[i].label.class_index = static_cast<std::size_t>(labels[i]);
      } else {
        set[i].label.values.assign(labels.begin() + static_cast<std::ptrdiff_t>(i * width),
                                   labels.begin() + static_cast<std::ptrdiff_t>((i + 1) * width));
      }
    }
  }
  validate_dataset(d);
  return d;
}

// Anything that can produce splits plus modality specs plugs into the
// training and evaluation pipeline through this interface.
class DatasetSource {
 public:
  virtual ~DatasetSource() = default;
  virtual DatasetSplits load() const = 0;
};

class DirectorySource : public DatasetSource {
 public:
  explicit DirectorySource(std::filesystem::path dir) : dir_(std::move(dir)) {}
  DatasetSplits load() const override { return load_dataset(dir_); }

 private:
  std::filesystem::path dir_;
};

// Builds a generator from {"generator": name, "args": {...}}.
class GeneratorSource : public DatasetSource {
 public:
  explicit GeneratorSource(nlohmann::json config) : config_(std::move(config)) {}

  DatasetSplits load() const override {
    const auto name = config_.at("generator").get<std::string>();
    const nlohmann::json args = config_.value("args", nlohmann::json::object());
    auto dims = [&]() { return args.value("dims", std::vector<std::size_t>{}); };
    if (name == "make_redundant") {
      RedundantOptions o;
      o.num_modalities = args.value("num_modalities", o.num_modalities);
      o.dims = dims();
      o.n = args.value("n", o.n);
      o.noise = args.value("noise", o.noise);
      o.seed = args.value("seed", o.seed);
      o.latent_dim = args.value("latent_dim", o.latent_dim);
      o.noise_modalities = args.value("noise_modalities", o.noise_modalities);
      return make_redundant(o);
    }
    if (name == "make_interaction") {
      InteractionOptions o;
      o.n = args.value("n", o.n);
      o.flip_prob = args.value("flip_prob", o.flip_prob);
      o.seed = args.value("seed", o.seed);
      o.dim = args.value("dim", o.dim);
      o.noise = args.value("noise", o.noise);
      o.amplitude = args.value("amplitude", o.amplitude);
      return make_interaction(o);
    }
    if (name == "make_temporal") {
      TemporalOptions o;
      o.num_modalities = args.value("num_modalities", o.num_modalities);
      o.time_length = args.value("time_length", o.time_length);
      o.rates = args.value("rates", std::vector<std::size_t>{});
      o.n = args.value("n", o.n);
      o.seed = args.value("seed", o.seed);
      o.dims = dims();
      o.background = args.value("background", o.background);
      return make_temporal(o).splits;
    }
    throw ConfigError("unknown dataset generator '" + name + "'", "dataset.generator");
  }

 private:
  nlohmann::json config_;
};

}  // namespace mmfuse
