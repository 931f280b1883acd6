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

// Training structures: the encoder/fusion/head model, the minibatch trainer
// with early stopping, GradBlend, cycle-translation (MCTN) and factorized
// (MFM) training, and the evaluation entry point `test`.

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmfuse/core/autograd.hpp"
#include "mmfuse/core/error.hpp"
#include "mmfuse/core/nn.hpp"
#include "mmfuse/core/ops.hpp"
#include "mmfuse/core/random.hpp"
#include "mmfuse/encoders.hpp"
#include "mmfuse/evalmetrics.hpp"
#include "mmfuse/fusion.hpp"
#include "mmfuse/objectives.hpp"
#include "mmfuse/perturb.hpp"
#include "mmfuse/synthdata.hpp"

namespace mmfuse {

// ---------------------------------------------------------------------------
// Minibatches.

struct Batch {
  std::vector<ModalityBatch> mods;  // undefined entries for modalities not requested
  Targets y;
  std::vector<std::size_t> rows;
};

inline Targets make_targets(const TaskSpec& task, const SampleSet& set, const std::vector<std::size_t>& rows) {
  Targets y;
  y.kind = task.kind;
  if (task.kind == TaskKind::kClassification) {
    for (std::size_t r : rows) y.classes.push_back(set[r].label.class_index);
  } else {
    y.values.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(task.regression_dim));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      for (std::size_t j = 0; j < task.regression_dim; ++j) {
        y.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = set[rows[i]].label.values[j];
      }
    }
  }
  return y;
}

inline Batch make_minibatch(const std::vector<ModalitySpec>& specs, const TaskSpec& task, const SampleSet& set,
                            const std::vector<std::size_t>& rows, const std::vector<std::size_t>& modalities) {
  Batch b;
  b.rows = rows;
  b.mods.resize(specs.size());
  for (std::size_t m : modalities) b.mods[m] = make_batch(specs[m], set, rows, m);
  b.y = make_targets(task, set, rows);
  return b;
}

// ---------------------------------------------------------------------------
// Models.

class Model {
 public:
  virtual ~Model() = default;
  virtual std::string kind() const = 0;
  // Raw outputs: logits for classification, values for regression.
  virtual Var predict(const Batch& b) const = 0;
  // Training loss for one minibatch.
  virtual Var loss(const Batch& b) const = 0;
  // Every trainable parameter, including training-only modules.
  virtual ParamStore& params() = 0;
  virtual const ParamStore& params() const = 0;
  // Parameters of modules that persist into inference.
  virtual std::size_t inference_param_count() const = 0;
  virtual const TaskSpec& task() const = 0;
  // Modalities `predict` reads.
  virtual std::vector<std::size_t> inputs_used() const = 0;
  // Modalities `loss` reads (defaults to every modality).
  virtual std::vector<std::size_t> training_inputs(std::size_t num_modalities) const {
    std::vector<std::size_t> all(num_modalities);
    std::iota(all.begin(), all.end(), std::size_t{0});
    return all;
  }
  virtual nlohmann::json describe() const { return {{"kind", kind()}}; }

  std::size_t train_param_count() const { return params().count(); }
};

struct HeadSpec {
  std::vector<std::size_t> hidden;      // empty: linear head
  std::optional<std::size_t> in_dim;    // when given, checked against the fusion width
};

struct FusionModelSpec {
  std::vector<ModalitySpec> modalities;
  std::vector<EncoderSpec> encoders;  // ignored by "ef"
  std::string fusion = "lf";
  nlohmann::json fusion_params = nlohmann::json::object();
  HeadSpec head;
  TaskSpec task;
  std::uint64_t seed = 0;
  std::vector<ObjectiveTermSpec> objective = {{"task", 1.0}};
};

struct FusionForward {
  std::vector<EncoderOutput> reps;
  Var zmm;
  Var out;
};

// Encoders f_1..f_M, fusion f_mm and head g_y, plus optional training-only
// auxiliary heads for alignment objectives.
class FusionModel : public Model {
 public:
  explicit FusionModel(FusionModelSpec spec) : spec_(std::move(spec)) {
    const std::size_t m = spec_.modalities.size();
    if (m == 0) throw ConfigError("model needs at least one modality", "dataset");
    FusionDims dims;
    const bool raw = spec_.fusion == "ef";
    if (!raw && spec_.encoders.size() != m) {
      throw ConfigError("need one encoder per modality (" + std::to_string(m) + "), got " +
                        std::to_string(spec_.encoders.size()), "encoders");
    }
    for (std::size_t i = 0; i < m; ++i) {
      const ModalitySpec& ms = spec_.modalities[i];
      dims.raw.push_back(ms.kind == ModalityKind::kSet ? 0 : shape_size(ms.shape));
      if (raw) {
        if (ms.kind == ModalityKind::kSet) throw ConfigError("early fusion cannot flatten set modality '" + ms.name + "'", "fusion.tag");
        continue;
      }
      EncoderSpec es = spec_.encoders[i];
      es.modality = ms.kind;
      if (es.in_shape.empty()) es.in_shape = ms.shape;
      if (es.in_shape != ms.shape) {
        throw ConfigError("encoder " + std::to_string(i) + " in_shape " + shape_string(es.in_shape) +
                          " does not match modality '" + ms.name + "' shape " + shape_string(ms.shape), "encoders.in_shape");
      }
      es.seed = derive_seed(spec_.seed, {1, i});
      encoders_.emplace_back(es, params_, "enc" + std::to_string(i));
      spec_.encoders[i] = encoders_.back().spec();
      dims.rep.push_back(encoders_.back().out_dim());
    }
    Rng frng(derive_seed(spec_.seed, {2}));
    fusion_ = make_fusion(spec_.fusion, spec_.fusion_params, dims, params_, frng);
    const std::size_t width = fusion_->out_dim();
    if (spec_.head.in_dim && *spec_.head.in_dim != width) {
      throw ConfigError("head.in_dim is " + std::to_string(*spec_.head.in_dim) + " but fusion '" + spec_.fusion +
                        "' produces " + std::to_string(width) + " features", "head.in_dim");
    }
    Rng hrng(derive_seed(spec_.seed, {3}));
    head_ = Mlp(params_, "head", width, spec_.head.hidden, spec_.task.output_dim(), hrng, Activation::kRelu);
    inference_count_ = params_.count();

    // Training-only auxiliary heads.
    Rng arng(derive_seed(spec_.seed, {4}));
    for (const auto& t : spec_.objective) {
      if (t.name == "task") continue;
      if (m != 2 || raw) throw ConfigError("objective '" + t.name + "' needs exactly two encoded modalities", "objective");
      const std::size_t target = t.name == "cca" ? spec_.task.output_dim() : width;
      const AuxKind kind = t.name == "cca" ? AuxKind::kToLabel : AuxKind::kToJoint;
      auto& heads = t.name == "cca" ? cca_heads_ : refnet_heads_;
      if (!heads.empty()) throw ConfigError("objective term '" + t.name + "' listed twice", "objective");
      for (std::size_t i = 0; i < 2; ++i) {
        heads.emplace_back(kind, params_, "aux." + t.name + std::to_string(i), dims.rep[i], std::vector<std::size_t>{},
                           target, arng);
      }
    }
  }

  std::string kind() const override { return "fusion:" + spec_.fusion; }
  const FusionModelSpec& spec() const { return spec_; }
  const Fusion& fusion() const { return *fusion_; }
  const std::vector<Encoder>& encoders() const { return encoders_; }
  const Mlp& head() const { return head_; }

  FusionForward forward(const Batch& b) const {
    FusionForward f;
    FusionInput in;
    if (fusion_->uses_raw()) {
      in.raw = b.mods;
    } else {
      for (std::size_t i = 0; i < encoders_.size(); ++i) f.reps.push_back(encoders_[i](b.mods[i]));
      in.reps = f.reps;
    }
    f.zmm = (*fusion_)(in);
    f.out = head_(f.zmm);
    return f;
  }

  Var predict(const Batch& b) const override { return forward(b).out; }

  Var loss(const Batch& b) const override {
    const FusionForward f = forward(b);
    CompositeObjective obj;
    for (const auto& t : spec_.objective) {
      if (t.name == "task") {
        obj.add("task", t.weight, task_loss(f.out, b.y));
      } else if (t.name == "cca") {
        obj.add("cca", t.weight, cca_loss(cca_heads_[0](f.reps[0].vec), cca_heads_[1](f.reps[1].vec)));
      } else if (t.name == "refnet") {
        obj.add("refnet", t.weight,
                refnet_contrastive_loss(f.zmm, refnet_heads_[0](f.reps[0].vec), refnet_heads_[1](f.reps[1].vec)));
      }
    }
    return obj.total();
  }

  ParamStore& params() override { return params_; }
  const ParamStore& params() const override { return params_; }
  std::size_t inference_param_count() const override { return inference_count_; }
  const TaskSpec& task() const override { return spec_.task; }
  std::vector<std::size_t> inputs_used() const override {
    std::vector<std::size_t> all(spec_.modalities.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    return all;
  }

  // Analytic parameter count of the inference path.
  std::size_t analytic_inference_count() const {
    std::size_t n = fusion_->param_count();
    for (const auto& e : encoders_) n += Encoder::analytic_param_count(e.spec());
    return n + Mlp::param_count(fusion_->out_dim(), spec_.head.hidden, spec_.task.output_dim());
  }

 private:
  FusionModelSpec spec_;
  ParamStore params_;
  std::vector<Encoder> encoders_;
  std::unique_ptr<Fusion> fusion_;
  Mlp head_;
  std::vector<AuxiliaryHead> cca_heads_;
  std::vector<AuxiliaryHead> refnet_heads_;
  std::size_t inference_count_ = 0;
};

// ---------------------------------------------------------------------------
// Predictions.

struct Predictions {
  TaskKind kind = TaskKind::kClassification;
  Mat outputs;  // raw model outputs
  Mat scores;   // class probabilities (classification) or outputs (regression)
  std::vector<std::size_t> labels;
  Mat targets;
  std::vector<std::size_t> index;  // sample indices

  PerformanceReport performance() const {
    return kind == TaskKind::kClassification ? compute_classification(scores, labels) : compute_regression(scores, targets);
  }
};

inline double task_loss_value(const Mat& outputs, const Predictions& p) {
  if (p.kind == TaskKind::kRegression) return (outputs - p.targets).array().square().mean();
  const Mat probs = ad::softmax_rows_value(outputs);
  double total = 0.0;
  for (std::size_t i = 0; i < p.labels.size(); ++i) {
    total -= std::log(std::max(probs(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(p.labels[i])), 1e-300));
  }
  return total / static_cast<double>(p.labels.size());
}

inline Predictions predict_with(const std::function<Var(const Batch&)>& fn, const std::vector<ModalitySpec>& specs,
                                const TaskSpec& task, const SampleSet& set, const std::vector<std::size_t>& inputs,
                                std::size_t chunk = 256) {
  if (set.empty()) throw ShapeError("cannot predict on an empty split");
  Predictions p;
  p.kind = task.kind;
  std::vector<Mat> parts;
  Eigen::Index cols = 0;
  for (std::size_t start = 0; start < set.size(); start += chunk) {
    std::vector<std::size_t> rows(std::min(chunk, set.size() - start));
    std::iota(rows.begin(), rows.end(), start);
    const Batch b = make_minibatch(specs, task, set, rows, inputs);
    parts.push_back(fn(b).value());
    cols = parts.back().cols();
  }
  p.outputs.resize(static_cast<Eigen::Index>(set.size()), cols);
  Eigen::Index r = 0;
  for (const auto& m : parts) {
    p.outputs.middleRows(r, m.rows()) = m;
    r += m.rows();
  }
  for (Eigen::Index i = 0; i < p.outputs.size(); ++i) {
    if (!std::isfinite(p.outputs.data()[i])) throw DivergenceError("model produced a non-finite output");
  }
  std::vector<std::size_t> all(set.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  const Targets y = make_targets(task, set, all);
  p.labels = y.classes;
  p.targets = y.values;
  for (const auto& s : set) p.index.push_back(s.index);
  p.scores = task.kind == TaskKind::kClassification ? ad::softmax_rows_value(p.outputs) : p.outputs;
  return p;
}

inline Predictions predict(const Model& model, const std::vector<ModalitySpec>& specs, const SampleSet& set) {
  return predict_with([&](const Batch& b) { return model.predict(b); }, specs, model.task(), set, model.inputs_used());
}

// Higher is better: accuracy, or negated MSE.
inline double selection_metric(const PerformanceReport& r) {
  return r.kind == TaskKind::kClassification ? r.accuracy : -r.mse;
}

// ---------------------------------------------------------------------------
// Optimization.

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  double learning_rate = 0.05;
  std::string optimizer = "sgd";  // "sgd" (momentum) or "adam"
  double momentum = 0.9;
  std::size_t patience = 5;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1", "training.epochs");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1", "training.batch_size");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be >= 0", "training.learning_rate");
    if (optimizer != "sgd" && optimizer != "adam") throw ConfigError("unknown optimizer '" + optimizer + "'", "training.optimizer");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)", "training.momentum");
    if (patience < 1) throw ConfigError("patience must be >= 1", "training.patience");
  }

  nlohmann::json to_json() const {
    return {{"epochs", epochs},     {"batch_size", batch_size}, {"learning_rate", learning_rate},
            {"optimizer", optimizer}, {"momentum", momentum},   {"patience", patience}, {"seed", seed}};
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.optimizer = j.value("optimizer", c.optimizer);
    c.momentum = j.value("momentum", c.momentum);
    c.patience = j.value("patience", c.patience);
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
  }
};

class Optimizer {
 public:
  Optimizer(ParamStore& params, const TrainConfig& cfg) : params_(params), cfg_(cfg) {
    for (const auto& v : params_.vars()) {
      m_.push_back(Mat::Zero(v.rows(), v.cols()));
      v_.push_back(Mat::Zero(v.rows(), v.cols()));
    }
  }

  void step() {
    ++t_;
    auto& vars = params_.vars();
    for (std::size_t i = 0; i < vars.size(); ++i) {
      const Mat& g = vars[i].grad();
      if (g.size() == 0) continue;
      Mat& p = vars[i].mutable_value();
      if (cfg_.optimizer == "sgd") {
        m_[i] = cfg_.momentum * m_[i] + g;
        p -= cfg_.learning_rate * m_[i];
      } else {
        constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        m_[i] = b1 * m_[i] + (1.0 - b1) * g;
        v_[i] = b2 * v_[i] + (1.0 - b2) * g.cwiseProduct(g);
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
        p.array() -= cfg_.learning_rate * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps);
      }
    }
  }

 private:
  ParamStore& params_;
  TrainConfig cfg_;
  std::vector<Mat> m_, v_;
  long t_ = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;  // mean minibatch loss during the epoch
  double valid_loss = 0.0;
  double valid_metric = 0.0;
};

struct History {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_valid_metric = -std::numeric_limits<double>::infinity();
  bool stopped_early = false;
  double train_time_s = 0.0;

  nlohmann::json to_json() const {
    nlohmann::json e = nlohmann::json::array();
    for (const auto& r : epochs) {
      e.push_back({{"epoch", r.epoch}, {"train_loss", r.train_loss}, {"valid_loss", r.valid_loss}, {"valid_metric", r.valid_metric}});
    }
    return {{"epochs", e}, {"best_epoch", best_epoch}, {"best_valid_metric", best_valid_metric}, {"stopped_early", stopped_early}};
  }
};

struct FitOptions {
  bool early_stopping = true;  // also restores the best-validation parameters
  std::function<void(std::size_t epoch)> on_epoch;
};

// Validation evaluator: (loss, metric), metric higher-is-better.
using EvalFn = std::function<std::pair<double, double>()>;
using LossFn = std::function<Var(const Batch&)>;

// Minibatch gradient descent over the training split with per-epoch seeded
// shuffling and patience-based early stopping on the validation metric.
inline History fit(ParamStore& params, const LossFn& loss_fn, const EvalFn& eval, const std::vector<ModalitySpec>& specs,
                   const TaskSpec& task, const SampleSet& train, const std::vector<std::size_t>& inputs,
                   const TrainConfig& cfg, const FitOptions& opt = {}) {
  cfg.validate();
  if (train.empty()) throw ShapeError("training split is empty");
  const auto t0 = std::chrono::steady_clock::now();
  History h;
  Optimizer optimizer(params, cfg);
  std::vector<Mat> best = params.snapshot();
  std::size_t since_best = 0;
  std::vector<std::size_t> order(train.size());
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle(derive_seed(cfg.seed, {0x5EEDull, epoch}));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.index(i)]);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(start),
                                          order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + cfg.batch_size)));
      const Batch b = make_minibatch(specs, task, train, rows, inputs);
      const Var loss = loss_fn(b);
      if (!std::isfinite(loss.item())) {
        throw DivergenceError("loss became non-finite at epoch " + std::to_string(epoch));
      }
      params.zero_grad();
      ad::backward(loss);
      optimizer.step();
      total += loss.item() * static_cast<double>(rows.size());
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = total / static_cast<double>(train.size());
    std::tie(rec.valid_loss, rec.valid_metric) = eval();
    if (!std::isfinite(rec.valid_loss)) throw DivergenceError("validation loss became non-finite at epoch " + std::to_string(epoch));
    h.epochs.push_back(rec);
    if (opt.on_epoch) opt.on_epoch(epoch);
    if (rec.valid_metric > h.best_valid_metric) {
      h.best_valid_metric = rec.valid_metric;
      h.best_epoch = epoch;
      best = params.snapshot();
      since_best = 0;
    } else if (opt.early_stopping && ++since_best >= cfg.patience) {
      h.stopped_early = true;
      break;
    }
  }
  if (opt.early_stopping) params.restore(best);
  h.train_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return h;
}

inline EvalFn validation_eval(const Model& model, const std::vector<ModalitySpec>& specs, const SampleSet& valid) {
  return [&model, &specs, &valid]() {
    const Predictions p = predict(model, specs, valid);
    return std::pair{task_loss_value(p.outputs, p), selection_metric(p.performance())};
  };
}

struct TrainingOutcome {
  std::unique_ptr<Model> model;
  History history;
  nlohmann::json extras = nlohmann::json::object();
};

inline History train_model(Model& model, const DatasetSplits& data, const TrainConfig& cfg, const FitOptions& opt = {}) {
  return fit(model.params(), [&](const Batch& b) { return model.loss(b); }, validation_eval(model, data.specs, data.valid),
             data.specs, data.task, data.train, model.training_inputs(data.specs.size()), cfg, opt);
}

inline TrainingOutcome train_supervised(const FusionModelSpec& spec, const DatasetSplits& data, const TrainConfig& cfg) {
  auto model = std::make_unique<FusionModel>(spec);
  TrainingOutcome out;
  out.history = train_model(*model, data, cfg);
  out.model = std::move(model);
  return out;
}

// ---------------------------------------------------------------------------
// GradBlend.

// Streams 0..M-1 are the unimodal heads, stream M is the fused output.
struct BlendWeights {
  std::vector<double> w;

  nlohmann::json to_json() const { return w; }
};

struct StreamStats {
  std::vector<double> train_loss;  // at each probe checkpoint, first = before training
  std::vector<double> valid_loss;
};

// w_k proportional to G_k / O_k^2 with G_k the validation-loss improvement
// over the probe window (floored at 0) and O_k the growth of the
// validation-minus-train gap (floored at eps). Degenerate statistics (all
// G_k = 0) give uniform weights and set *warning.
inline BlendWeights compute_blend_weights(const std::vector<StreamStats>& streams, double eps = 0.05,
                                          std::string* warning = nullptr) {
  if (streams.empty()) throw ConfigError("blend weights need at least one stream", "training");
  if (!(eps > 0.0)) throw ConfigError("blend epsilon must be positive", "training.blend_epsilon");
  std::vector<double> raw;
  for (const auto& s : streams) {
    if (s.train_loss.size() < 2 || s.valid_loss.size() != s.train_loss.size()) {
      throw ConfigError("each stream needs at least two matching probe checkpoints", "training");
    }
    const double g = std::max(0.0, s.valid_loss.front() - s.valid_loss.back());
    const double gap0 = s.valid_loss.front() - s.train_loss.front();
    const double gap1 = s.valid_loss.back() - s.train_loss.back();
    const double o = std::max(eps, gap1 - gap0);
    raw.push_back(std::isfinite(g) ? g / (o * o) : 0.0);
  }
  const double total = std::accumulate(raw.begin(), raw.end(), 0.0);
  BlendWeights bw;
  if (!(total > 0.0) || !std::isfinite(total)) {
    if (warning) *warning = "all streams had degenerate generalization statistics; using uniform weights";
    bw.w.assign(streams.size(), 1.0 / static_cast<double>(streams.size()));
    return bw;
  }
  for (double r : raw) bw.w.push_back(r / total);
  return bw;
}

// Fusion model plus one training-only classifier per unimodal stream.
class GradBlendModel : public Model {
 public:
  explicit GradBlendModel(const FusionModelSpec& spec) : base_(spec) {
    if (spec.fusion == "ef") throw ConfigError("gradblend needs per-modality streams; early fusion has none", "fusion.tag");
    for (const auto& t : spec.objective) {
      if (t.name != "task") throw ConfigError("gradblend supports only the task objective", "objective");
    }
    Rng rng(derive_seed(spec.seed, {5}));
    for (std::size_t m = 0; m < base_.encoders().size(); ++m) {
      stream_heads_.emplace_back(base_.params(), "stream" + std::to_string(m), base_.encoders()[m].out_dim(),
                                 spec.task.output_dim(), rng);
    }
    weights_.assign(stream_heads_.size() + 1, 1.0 / static_cast<double>(stream_heads_.size() + 1));
  }

  std::string kind() const override { return "gradblend:" + base_.spec().fusion; }
  std::size_t num_streams() const { return stream_heads_.size() + 1; }
  void set_weights(std::vector<double> w) {
    if (w.size() != num_streams()) throw ShapeError("gradblend weight count mismatch");
    weights_ = std::move(w);
  }
  const std::vector<double>& weights() const { return weights_; }

  // Output of stream k (k = M is the fused head).
  Var stream_output(const Batch& b, std::size_t k) const {
    if (k == stream_heads_.size()) return base_.predict(b);
    return stream_heads_[k](base_.encoders()[k](b.mods[k]).vec);
  }

  Var predict(const Batch& b) const override { return base_.predict(b); }

  Var loss(const Batch& b) const override {
    const FusionForward f = base_.forward(b);
    Var total = ad::scale(task_loss(f.out, b.y), weights_.back());
    for (std::size_t k = 0; k < stream_heads_.size(); ++k) {
      if (weights_[k] == 0.0) continue;
      total = ad::add(total, ad::scale(task_loss(stream_heads_[k](f.reps[k].vec), b.y), weights_[k]));
    }
    return total;
  }

  ParamStore& params() override { return base_.params(); }
  const ParamStore& params() const override { return base_.params(); }
  std::size_t inference_param_count() const override { return base_.inference_param_count(); }
  const TaskSpec& task() const override { return base_.task(); }
  std::vector<std::size_t> inputs_used() const override { return base_.inputs_used(); }
  const FusionModel& base() const { return base_; }

 private:
  FusionModel base_;
  std::vector<Linear> stream_heads_;
  std::vector<double> weights_;
};

struct GradBlendOptions {
  double probe_fraction = 0.2;  // of the configured epochs, at least 2
  double epsilon = 0.05;  // gap-growth floor, in loss units
  std::optional<std::vector<double>> forced_weights;
};

inline std::size_t probe_epochs(const TrainConfig& cfg, double fraction) {
  return std::max<std::size_t>(2, static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(cfg.epochs))));
}

// Probe statistics for every stream: each stream is trained alone from the
// shared initialization for the probe window, recording full-pass train and
// validation losses before training and after every epoch.
inline std::vector<StreamStats> gradblend_probe(const FusionModelSpec& spec, const DatasetSplits& data,
                                                const TrainConfig& cfg, std::size_t epochs) {
  std::vector<StreamStats> stats;
  const std::size_t streams = spec.modalities.size() + 1;
  for (std::size_t k = 0; k < streams; ++k) {
    GradBlendModel probe(spec);
    const auto inputs = k + 1 == streams ? probe.inputs_used() : std::vector<std::size_t>{k};
    auto stream_fn = [&](const Batch& b) { return probe.stream_output(b, k); };
    auto loss_on = [&](const SampleSet& set) {
      const Predictions p = predict_with(stream_fn, data.specs, data.task, set, inputs);
      return task_loss_value(p.outputs, p);
    };
    StreamStats s;
    auto record = [&](std::size_t) {
      s.train_loss.push_back(loss_on(data.train));
      s.valid_loss.push_back(loss_on(data.valid));
    };
    record(0);
    TrainConfig pc = cfg;
    pc.epochs = epochs;
    FitOptions fo;
    fo.early_stopping = false;
    fo.on_epoch = record;
    fit(probe.params(), [&](const Batch& b) { return task_loss(stream_fn(b), b.y); },
        [] { return std::pair{0.0, 0.0}; }, data.specs, data.task, data.train, inputs, pc, fo);
    stats.push_back(std::move(s));
  }
  return stats;
}

inline TrainingOutcome train_gradblend(const FusionModelSpec& spec, const DatasetSplits& data, const TrainConfig& cfg,
                                       const GradBlendOptions& opt = {}) {
  cfg.validate();
  TrainingOutcome out;
  const auto t0 = std::chrono::steady_clock::now();
  auto model = std::make_unique<GradBlendModel>(spec);
  BlendWeights w;
  std::string warning;
  if (opt.forced_weights) {
    w.w = *opt.forced_weights;
  } else {
    const auto stats = gradblend_probe(spec, data, cfg, probe_epochs(cfg, opt.probe_fraction));
    w = compute_blend_weights(stats, opt.epsilon, &warning);
    nlohmann::json js = nlohmann::json::array();
    for (const auto& s : stats) js.push_back({{"train_loss", s.train_loss}, {"valid_loss", s.valid_loss}});
    out.extras["probe"] = js;
  }
  model->set_weights(w.w);
  out.history = train_model(*model, data, cfg);
  out.history.train_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  out.extras["blend_weights"] = w.to_json();
  if (!warning.empty()) out.extras["warning"] = warning;
  out.model = std::move(model);
  return out;
}

// ---------------------------------------------------------------------------
// Cycle translation (MCTN).

struct MctnSpec {
  std::vector<ModalitySpec> modalities;  // exactly two
  EncoderSpec encoder;                   // encoder for modality 1, out_dim = latent width
  std::vector<std::size_t> hidden = {32};
  std::vector<std::size_t> head_hidden;
  TaskSpec task;
  std::uint64_t seed = 0;
  double cycle_weight = 1.0;
  CycleNorm norm = CycleNorm::kPerSample;
};

// x_1 -> z -> x2_hat -> z' -> x1_hat, head on z. Only the encoder of x_1 and
// the head persist into inference.
class MctnModel : public Model {
 public:
  explicit MctnModel(MctnSpec spec) : spec_(std::move(spec)) {
    if (spec_.modalities.size() != 2) throw ConfigError("mctn needs exactly two modalities", "dataset");
    for (const auto& m : spec_.modalities) {
      if (m.kind == ModalityKind::kSet) throw ConfigError("mctn needs fixed-shape modalities", "dataset");
    }
    if (!(spec_.cycle_weight >= 0.0)) throw ConfigError("cycle weight must be >= 0", "objective");
    EncoderSpec es = spec_.encoder;
    es.modality = spec_.modalities[0].kind;
    if (es.in_shape.empty()) es.in_shape = spec_.modalities[0].shape;
    es.seed = derive_seed(spec_.seed, {1, 0});
    enc1_ = Encoder(es, params_, "enc0");
    const std::size_t z = enc1_.out_dim();
    Rng hrng(derive_seed(spec_.seed, {3}));
    head_ = Mlp(params_, "head", z, spec_.head_hidden, spec_.task.output_dim(), hrng, Activation::kRelu);
    inference_count_ = params_.count();
    const std::size_t d1 = shape_size(spec_.modalities[0].shape), d2 = shape_size(spec_.modalities[1].shape);
    Rng rng(derive_seed(spec_.seed, {6}));
    dec12_ = Mlp(params_, "dec12", z, spec_.hidden, d2, rng);
    enc2_ = Mlp(params_, "enc2", d2, spec_.hidden, z, rng, Activation::kTanh, Activation::kTanh);
    dec21_ = Mlp(params_, "dec21", z, spec_.hidden, d1, rng);
  }

  std::string kind() const override { return "mctn"; }

  struct Forward {
    Var z, x2_hat, z2, x1_hat, out;
  };

  Forward forward(const Batch& b) const {
    Forward f;
    f.z = enc1_(b.mods[0]).vec;
    f.out = head_(f.z);
    f.x2_hat = dec12_(f.z);
    f.z2 = enc2_(f.x2_hat);
    f.x1_hat = dec21_(f.z2);
    return f;
  }

  // Reads modality 1 only.
  Var predict(const Batch& b) const override { return head_(enc1_(b.mods[0]).vec); }

  Var cycle_loss(const Batch& b) const {
    const Forward f = forward(b);
    return mctn_cycle_loss(flatten_batch(b.mods[0]), flatten_batch(b.mods[1]), f.x1_hat, f.x2_hat, spec_.norm);
  }

  Var loss(const Batch& b) const override {
    const Forward f = forward(b);
    CompositeObjective obj;
    obj.add("task", 1.0, task_loss(f.out, b.y));
    obj.add("cycle", spec_.cycle_weight,
            mctn_cycle_loss(flatten_batch(b.mods[0]), flatten_batch(b.mods[1]), f.x1_hat, f.x2_hat, spec_.norm));
    return obj.total();
  }

  ParamStore& params() override { return params_; }
  const ParamStore& params() const override { return params_; }
  std::size_t inference_param_count() const override { return inference_count_; }
  const TaskSpec& task() const override { return spec_.task; }
  std::vector<std::size_t> inputs_used() const override { return {0}; }
  const MctnSpec& spec() const { return spec_; }

 private:
  MctnSpec spec_;
  ParamStore params_;
  Encoder enc1_;
  Mlp head_, dec12_, enc2_, dec21_;
  std::size_t inference_count_ = 0;
};

inline TrainingOutcome train_mctn(const MctnSpec& spec, const DatasetSplits& data, const TrainConfig& cfg) {
  auto model = std::make_unique<MctnModel>(spec);
  TrainingOutcome out;
  out.history = train_model(*model, data, cfg);
  out.model = std::move(model);
  return out;
}

// ---------------------------------------------------------------------------
// Factorized multimodal model (MFM).

struct MfmSpec {
  std::vector<ModalitySpec> modalities;
  std::vector<EncoderSpec> encoders;  // z_1..z_M
  std::size_t shared_dim = 8;         // width of z_y
  std::vector<std::size_t> decoder_hidden = {32};
  std::vector<std::size_t> head_hidden;
  TaskSpec task;
  std::uint64_t seed = 0;
  double lambda = 0.1;
};

// z_m = f_m(x_m); z_y = tanh(W [z_1..z_M] + b); prediction g_y(z_y);
// decoder g_m reconstructs flattened x_m from [z_m; z_y]. Decoders are
// training-only.
class MfmModel : public Model {
 public:
  explicit MfmModel(MfmSpec spec) : spec_(std::move(spec)) {
    if (!(spec_.lambda >= 0.0)) throw ConfigError("mfm lambda must be >= 0", "objective.lambda");
    const std::size_t m = spec_.modalities.size();
    if (spec_.encoders.size() != m) throw ConfigError("mfm needs one encoder per modality", "encoders");
    if (spec_.shared_dim < 1) throw ConfigError("mfm shared_dim must be >= 1", "fusion.shared_dim");
    std::size_t total = 0;
    for (std::size_t i = 0; i < m; ++i) {
      if (spec_.modalities[i].kind == ModalityKind::kSet) throw ConfigError("mfm needs fixed-shape modalities", "dataset");
      EncoderSpec es = spec_.encoders[i];
      es.modality = spec_.modalities[i].kind;
      if (es.in_shape.empty()) es.in_shape = spec_.modalities[i].shape;
      es.seed = derive_seed(spec_.seed, {1, i});
      enc_.emplace_back(es, params_, "enc" + std::to_string(i));
      total += enc_.back().out_dim();
    }
    Rng rng(derive_seed(spec_.seed, {2}));
    zy_ = Linear(params_, "shared", total, spec_.shared_dim, rng);
    Rng hrng(derive_seed(spec_.seed, {3}));
    head_ = Mlp(params_, "head", spec_.shared_dim, spec_.head_hidden, spec_.task.output_dim(), hrng, Activation::kRelu);
    inference_count_ = params_.count();
    Rng drng(derive_seed(spec_.seed, {7}));
    for (std::size_t i = 0; i < m; ++i) {
      dec_.emplace_back(params_, "dec" + std::to_string(i), enc_[i].out_dim() + spec_.shared_dim, spec_.decoder_hidden,
                        shape_size(spec_.modalities[i].shape), drng);
    }
  }

  std::string kind() const override { return "mfm"; }

  MfmInputs factorize(const Batch& b) const {
    MfmInputs in;
    for (std::size_t i = 0; i < enc_.size(); ++i) {
      in.z.push_back(enc_[i](b.mods[i]).vec);
      in.x.push_back(flatten_batch(b.mods[i]));
    }
    in.z_y = ad::tanh(zy_(ad::concat_cols(in.z)));
    in.logits = head_(in.z_y);
    for (std::size_t i = 0; i < enc_.size(); ++i) in.x_hat.push_back(dec_[i](ad::concat_cols({in.z[i], in.z_y})));
    in.y = b.y;
    return in;
  }

  Var predict(const Batch& b) const override {
    std::vector<Var> z;
    for (std::size_t i = 0; i < enc_.size(); ++i) z.push_back(enc_[i](b.mods[i]).vec);
    return head_(ad::tanh(zy_(ad::concat_cols(z))));
  }

  Var loss(const Batch& b) const override { return mfm_objective(factorize(b), spec_.lambda, prior_rng_).total(); }

  // Mean per-sample reconstruction norm summed over modalities.
  double reconstruction_error(const Batch& b) const {
    const MfmInputs in = factorize(b);
    double total = 0.0;
    for (std::size_t i = 0; i < in.x.size(); ++i) total += reconstruction_norm(in.x[i], in.x_hat[i]).item();
    return total;
  }

  ParamStore& params() override { return params_; }
  const ParamStore& params() const override { return params_; }
  std::size_t inference_param_count() const override { return inference_count_; }
  const TaskSpec& task() const override { return spec_.task; }
  std::vector<std::size_t> inputs_used() const override {
    std::vector<std::size_t> all(enc_.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    return all;
  }
  std::size_t decoder_param_count() const { return params_.count() - inference_count_; }

 private:
  MfmSpec spec_;
  ParamStore params_;
  std::vector<Encoder> enc_;
  Linear zy_;
  Mlp head_;
  std::vector<Mlp> dec_;
  std::size_t inference_count_ = 0;
  mutable Rng prior_rng_{derive_seed(spec_.seed, {8})};
};

inline TrainingOutcome train_mfm(const MfmSpec& spec, const DatasetSplits& data, const TrainConfig& cfg,
                                 const FitOptions& opt = {}) {
  auto model = std::make_unique<MfmModel>(spec);
  TrainingOutcome out;
  out.history = train_model(*model, data, cfg, opt);
  out.model = std::move(model);
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation entry point.

struct PartitionResult {
  RobustnessCurve curve;
  std::vector<Predictions> predictions;  // one per level
};

struct TestReport {
  PerformanceReport performance;
  ComplexityReport complexity;
  Predictions clean;
  std::vector<PartitionResult> robustness;
  std::string multimodal_reason;
};

// Clean-test performance, complexity profile and one robustness curve per
// grid partition. The sigma = 0 point reuses the clean predictions.
inline TestReport test(const Model& model, const DatasetSplits& data, const NoisyTestGrid* grid, double train_time_s) {
  TestReport r;
  const auto t0 = std::chrono::steady_clock::now();
  r.clean = predict(model, data.specs, data.test);
  r.complexity.inference_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  r.performance = r.clean.performance();
  r.complexity.train_param_count = model.train_param_count();
  r.complexity.inference_param_count = model.inference_param_count();
  r.complexity.train_time_s = train_time_s;
  r.complexity.input_bits = serialized_bits(data.test, data.task);
  if (grid) {
    if (grid->levels().empty()) throw ConfigError("robustness grid is empty", "robustness.levels");
    r.multimodal_reason = grid->multimodal_reason();
    for (std::size_t p = 0; p < grid->partitions().size(); ++p) {
      PartitionResult pr;
      pr.curve.partition = grid->partitions()[p].id;
      for (std::size_t l = 0; l < grid->levels().size(); ++l) {
        Predictions pred = l == 0 && grid->levels()[0] == 0.0 ? r.clean : predict(model, data.specs, grid->materialize(p, l));
        pr.curve.sigma.push_back(grid->levels()[l]);
        pr.curve.value.push_back(pred.performance().primary());
        pr.predictions.push_back(std::move(pred));
      }
      r.robustness.push_back(std::move(pr));
    }
  }
  r.complexity.peak_memory_bytes = peak_memory_bytes();
  return r;
}

}  // namespace mmfuse
