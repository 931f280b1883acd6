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

#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "mmfuse/perturb.hpp"
#include "mmfuse/training.hpp"

namespace mmfuse {
namespace {

DatasetSplits small_redundant(double noise, std::size_t noise_mods = 0, std::uint64_t seed = 11) {
  RedundantOptions o;
  o.n = 600;
  o.dims = {6};
  o.noise = noise;
  o.seed = seed;
  o.noise_modalities = noise_mods;
  return make_redundant(o);
}

EncoderSpec mlp_encoder(std::size_t out, std::vector<std::size_t> hidden = {8}) {
  EncoderSpec e;
  e.kind = EncoderKind::kMlp;
  e.hidden_dims = std::move(hidden);
  e.out_dim = out;
  return e;
}

FusionModelSpec lf_spec(const DatasetSplits& d, const std::string& fusion = "lf", std::uint64_t seed = 3) {
  FusionModelSpec s;
  s.modalities = d.specs;
  s.encoders.assign(d.specs.size(), mlp_encoder(4));
  s.fusion = fusion;
  s.task = d.task;
  s.seed = seed;
  return s;
}

TrainConfig quick(std::size_t epochs = 10, double lr = 0.05) {
  TrainConfig c;
  c.epochs = epochs;
  c.learning_rate = lr;
  c.batch_size = 32;
  c.seed = 5;
  return c;
}

std::string field_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const ConfigError& e) {
    return e.field();
  }
  return "<no error>";
}

TEST(Training, ZeroLearningRateLeavesParametersBitExact) {
  const DatasetSplits d = small_redundant(0.3);
  FusionModel model(lf_spec(d));
  const std::vector<Mat> before = model.params().snapshot();
  TrainConfig cfg = quick(3, 0.0);
  FitOptions fo;
  fo.early_stopping = false;
  train_model(model, d, cfg, fo);
  const std::vector<Mat> after = model.params().snapshot();
  ASSERT_EQ(before.size(), after.size());
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_TRUE((before[i].array() == after[i].array()).all()) << i;
}

TEST(Training, SameSeedGivesIdenticalModels) {
  const DatasetSplits d = small_redundant(0.3);
  const auto a = train_supervised(lf_spec(d), d, quick(4));
  const auto b = train_supervised(lf_spec(d), d, quick(4));
  const Predictions pa = predict(*a.model, d.specs, d.test);
  const Predictions pb = predict(*b.model, d.specs, d.test);
  EXPECT_TRUE((pa.outputs.array() == pb.outputs.array()).all());
  EXPECT_EQ(a.history.best_epoch, b.history.best_epoch);
}

TEST(Training, SeparableRedundantDataIsLearned) {
  const DatasetSplits d = small_redundant(0.1);
  for (const std::string tag : {"lf", "ef", "tf"}) {
    const auto out = train_supervised(lf_spec(d, tag), d, quick(20));
    const double acc = predict(*out.model, d.specs, d.test).performance().accuracy;
    EXPECT_GE(acc, 0.95) << tag;
  }
}

TEST(Training, EarlyStoppingRestoresBestValidationParameters) {
  const DatasetSplits d = small_redundant(0.6);
  TrainConfig cfg = quick(15);
  cfg.patience = 2;
  FusionModel model(lf_spec(d));
  const History h = train_model(model, d, cfg);
  ASSERT_FALSE(h.epochs.empty());
  double best = -1.0;
  for (const auto& e : h.epochs) best = std::max(best, e.valid_metric);
  EXPECT_DOUBLE_EQ(h.best_valid_metric, best);
  EXPECT_EQ(h.epochs[h.best_epoch - 1].valid_metric, best);
  const double now = selection_metric(predict(model, d.specs, d.valid).performance());
  EXPECT_DOUBLE_EQ(now, best);
  if (h.stopped_early) {
    EXPECT_EQ(h.epochs.size(), h.best_epoch + cfg.patience);
  }
}

TEST(Training, ConfigValidationNamesField) {
  TrainConfig c;
  c.epochs = 0;
  EXPECT_EQ(field_of([&] { c.validate(); }), "training.epochs");
  c = TrainConfig{};
  c.learning_rate = -1.0;
  EXPECT_EQ(field_of([&] { c.validate(); }), "training.learning_rate");
  c = TrainConfig{};
  c.optimizer = "rmsprop";
  EXPECT_EQ(field_of([&] { c.validate(); }), "training.optimizer");
  EXPECT_EQ(TrainConfig::from_json(quick(7).to_json()).to_json(), quick(7).to_json());
}

TEST(Training, ModelConstructionErrorsNameField) {
  const DatasetSplits d = small_redundant(0.3);
  FusionModelSpec s = lf_spec(d);
  s.encoders.pop_back();
  EXPECT_EQ(field_of([&] { FusionModel m(s); }), "encoders");
  s = lf_spec(d);
  s.head.in_dim = 99;
  EXPECT_EQ(field_of([&] { FusionModel m(s); }), "head.in_dim");
  s = lf_spec(d);
  s.head.in_dim = 8;  // two 4-wide encoders concatenated
  EXPECT_NO_THROW(FusionModel m(s));
  s = lf_spec(d);
  s.encoders[0].in_shape = {5};
  EXPECT_EQ(field_of([&] { FusionModel m(s); }), "encoders.in_shape");
}

TEST(Training, InferenceCountMatchesAnalyticCount) {
  const DatasetSplits d = small_redundant(0.3);
  for (const std::string tag : {"lf", "ef", "tf", "lrtf", "mi-matrix", "mi-vector", "mi-scalar", "film", "nlgate", "mult"}) {
    FusionModelSpec s = lf_spec(d, tag);
    s.head.hidden = {5};
    FusionModel m(s);
    EXPECT_EQ(m.inference_param_count(), m.analytic_inference_count()) << tag;
    EXPECT_EQ(m.train_param_count(), m.inference_param_count()) << tag;
  }
  // Alignment heads are training-only.
  FusionModelSpec s = lf_spec(d);
  s.objective = {{"task", 1.0}, {"cca", 0.1}};
  FusionModel m(s);
  EXPECT_GT(m.train_param_count(), m.inference_param_count());
  EXPECT_EQ(m.inference_param_count(), m.analytic_inference_count());
}

TEST(GradBlend, IdenticalStatisticsGiveUniformWeights) {
  StreamStats s{{1.0, 0.6, 0.4}, {1.1, 0.8, 0.7}};
  const BlendWeights w = compute_blend_weights({s, s, s});
  for (double x : w.w) EXPECT_NEAR(x, 1.0 / 3.0, 1e-12);
}

TEST(GradBlend, HandComputedWeights) {
  // G = 0.4, gap growth = 0.2 -> 10; G = 0.1, gap growth floored at eps -> 0.1 / 1e-6.
  StreamStats a{{1.0, 0.5}, {1.0, 0.6}};
  StreamStats b{{1.0, 0.9}, {1.0, 0.9}};
  StreamStats c{{1.0, 0.5}, {1.0, 1.2}};  // validation got worse: G = 0
  const BlendWeights w = compute_blend_weights({a, b, c}, 1e-3);
  const double ra = 0.4 / (0.1 * 0.1), rb = 0.1 / 1e-6;
  EXPECT_NEAR(w.w[0], ra / (ra + rb), 1e-12);
  EXPECT_NEAR(w.w[1], rb / (ra + rb), 1e-12);
  EXPECT_EQ(w.w[2], 0.0);
}

TEST(GradBlend, WeightsLieOnTheSimplex) {
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<StreamStats> streams(1 + rng.index(5));
    for (auto& s : streams) {
      for (int k = 0; k < 4; ++k) {
        s.train_loss.push_back(rng.uniform(0.0, 2.0));
        s.valid_loss.push_back(rng.uniform(0.0, 2.0));
      }
    }
    const BlendWeights w = compute_blend_weights(streams);
    double total = 0.0;
    for (double x : w.w) {
      EXPECT_GE(x, 0.0);
      total += x;
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(GradBlend, DegenerateStatisticsWarnAndFallBackToUniform) {
  StreamStats flat{{1.0, 1.0}, {1.0, 1.0}};
  std::string warning;
  const BlendWeights w = compute_blend_weights({flat, flat}, 1e-3, &warning);
  EXPECT_FALSE(warning.empty());
  EXPECT_EQ(w.w, (std::vector<double>{0.5, 0.5}));
  EXPECT_THROW(compute_blend_weights({StreamStats{{1.0}, {1.0}}}), ConfigError);
  EXPECT_THROW(compute_blend_weights({flat}, 0.0), ConfigError);
}

TEST(GradBlend, UniformWeightsReduceToMultitaskLoss) {
  const DatasetSplits d = small_redundant(0.3);
  GradBlendModel m(lf_spec(d));
  const std::size_t k = m.num_streams();
  ASSERT_EQ(k, 3u);
  m.set_weights(std::vector<double>(k, 1.0 / 3.0));
  std::vector<std::size_t> rows(40);
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  const Batch b = make_minibatch(d.specs, d.task, d.train, rows, {0, 1});
  double expected = 0.0;
  for (std::size_t s = 0; s < k; ++s) expected += task_loss(m.stream_output(b, s), b.y).item() / 3.0;
  EXPECT_NEAR(m.loss(b).item(), expected, 1e-12);
  EXPECT_THROW(m.set_weights({1.0}), ShapeError);
}

TEST(GradBlend, NoiseStreamIsDownWeighted) {
  const DatasetSplits d = small_redundant(0.5, 1);
  TrainConfig cfg = quick(10);
  const auto out = train_gradblend(lf_spec(d), d, cfg);
  const auto w = out.extras.at("blend_weights").get<std::vector<double>>();
  ASSERT_EQ(w.size(), 4u);  // m0, m1, noise0, fused
  EXPECT_LT(w[2], 0.25);
  EXPECT_LT(w[2], w[0]);
  EXPECT_LT(w[2], w[1]);
  EXPECT_EQ(out.extras.at("probe").size(), 4u);
  EXPECT_EQ(out.extras.at("probe")[0].at("valid_loss").size(), probe_epochs(cfg, 0.2) + 1);
}

TEST(GradBlend, ForcedWeightsSkipTheProbe) {
  const DatasetSplits d = small_redundant(0.3);
  GradBlendOptions opt;
  opt.forced_weights = std::vector<double>{0.0, 0.0, 1.0};
  const auto out = train_gradblend(lf_spec(d), d, quick(2), opt);
  EXPECT_FALSE(out.extras.contains("probe"));
  EXPECT_EQ(out.extras.at("blend_weights").get<std::vector<double>>(), *opt.forced_weights);
  FusionModelSpec ef = lf_spec(d, "ef");
  EXPECT_EQ(field_of([&] { GradBlendModel g(ef); }), "fusion.tag");
}

MctnSpec mctn_spec(const DatasetSplits& d) {
  MctnSpec s;
  s.modalities = d.specs;
  s.encoder = mlp_encoder(4);
  s.hidden = {16};
  s.task = d.task;
  s.seed = 9;
  return s;
}

TEST(Mctn, PredictionsIgnoreSecondModality) {
  const DatasetSplits d = small_redundant(0.3);
  MctnModel m(mctn_spec(d));
  EXPECT_EQ(m.inputs_used(), std::vector<std::size_t>{0});
  SampleSet scrambled = d.test;
  Rng rng(4);
  for (auto& s : scrambled) {
    for (auto& v : s.modalities[1].data) v = static_cast<float>(rng.normal(0.0, 5.0));
  }
  const Predictions a = predict(m, d.specs, d.test);
  const Predictions b = predict(m, d.specs, scrambled);
  EXPECT_TRUE((a.outputs.array() == b.outputs.array()).all());
}

TEST(Mctn, CycleLossShrinksWithTraining) {
  const DatasetSplits d = small_redundant(0.05);
  const MctnSpec spec = mctn_spec(d);
  std::vector<std::size_t> rows(d.valid.size());
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  const Batch b = make_minibatch(d.specs, d.task, d.valid, rows, {0, 1});
  const double before = MctnModel(spec).cycle_loss(b).item();
  TrainConfig cfg = quick(30, 0.02);
  FitOptions fo;
  fo.early_stopping = false;
  MctnModel m(spec);
  train_model(m, d, cfg, fo);
  const double after = m.cycle_loss(b).item();
  EXPECT_LT(after, 0.5 * before);
  EXPECT_GE(predict(m, d.specs, d.test).performance().accuracy, 0.9);
}

TEST(Mctn, DecodersAreTrainingOnly) {
  const DatasetSplits d = small_redundant(0.3);
  MctnModel m(mctn_spec(d));
  const std::size_t enc = Encoder::analytic_param_count([&] {
    EncoderSpec e = mlp_encoder(4);
    e.in_shape = {6};
    return e;
  }());
  EXPECT_EQ(m.inference_param_count(), enc + Mlp::param_count(4, {}, 2));
  const std::size_t dec = Mlp::param_count(4, {16}, 6) * 2 + Mlp::param_count(6, {16}, 4);
  EXPECT_EQ(m.train_param_count(), m.inference_param_count() + dec);
}

MfmSpec mfm_spec(const DatasetSplits& d) {
  MfmSpec s;
  s.modalities = d.specs;
  s.encoders.assign(d.specs.size(), mlp_encoder(4));
  s.shared_dim = 3;
  s.decoder_hidden = {8};
  s.task = d.task;
  s.seed = 2;
  return s;
}

TEST(Mfm, ReconstructionImprovesOverThreeEpochs) {
  const DatasetSplits d = small_redundant(0.2);
  MfmModel m(mfm_spec(d));
  std::vector<std::size_t> rows(d.valid.size());
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  const Batch b = make_minibatch(d.specs, d.task, d.valid, rows, {0, 1});
  std::vector<double> err{m.reconstruction_error(b)};
  FitOptions fo;
  fo.early_stopping = false;
  fo.on_epoch = [&](std::size_t) { err.push_back(m.reconstruction_error(b)); };
  train_model(m, d, quick(3, 0.02), fo);
  ASSERT_EQ(err.size(), 4u);
  EXPECT_LT(err.back(), err.front());
}

TEST(Mfm, InferenceCountExcludesDecoders) {
  const DatasetSplits d = small_redundant(0.2);
  MfmModel m(mfm_spec(d));
  const std::size_t dec = 2 * Mlp::param_count(4 + 3, {8}, 6);
  EXPECT_EQ(m.decoder_param_count(), dec);
  EXPECT_EQ(m.train_param_count(), m.inference_param_count() + dec);
  MfmSpec bad = mfm_spec(d);
  bad.lambda = -1.0;
  EXPECT_EQ(field_of([&] { MfmModel x(bad); }), "objective.lambda");
}

TEST(TestEntry, ReportsOneCurvePerPartitionAndReusesCleanPoint) {
  TemporalOptions o;
  o.n = 200;
  o.time_length = 4;
  o.dims = {3};
  o.seed = 1;
  const DatasetSplits d = make_temporal(o).splits;
  FusionModelSpec s;
  s.modalities = d.specs;
  EncoderSpec e;
  e.kind = EncoderKind::kRecurrent;
  e.out_dim = 4;
  s.encoders.assign(d.specs.size(), e);
  s.task = d.task;
  const auto out = train_supervised(s, d, quick(2));
  const std::vector<double> levels{0.0, 0.5, 1.0};
  const NoisyTestGrid grid = build_noisy_grid(d.test, d.specs, {}, "mm_temporal_drop", levels, 7);
  const TestReport r = test(*out.model, d, &grid, out.history.train_time_s);
  ASSERT_EQ(r.robustness.size(), d.specs.size() + 1);
  EXPECT_EQ(r.robustness.back().curve.partition, "multimodal");
  for (const auto& p : r.robustness) {
    EXPECT_EQ(p.curve.sigma, levels);
    EXPECT_EQ(p.curve.value.front(), r.performance.primary());
  }
  EXPECT_EQ(r.complexity.inference_param_count, out.model->inference_param_count());
  EXPECT_GT(r.complexity.input_bits, 0.0);
  const TestReport clean_only = test(*out.model, d, nullptr, 0.0);
  EXPECT_TRUE(clean_only.robustness.empty());
  EXPECT_EQ(clean_only.performance.primary(), r.performance.primary());
}

}  // namespace
}  // namespace mmfuse
