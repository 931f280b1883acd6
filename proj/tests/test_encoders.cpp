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

#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "mmfuse/encoders.hpp"
#include "support/gradcheck.hpp"
#include "support/suites.hpp"

namespace mmfuse {
namespace {

using testing::random_mat;
using testing::all_encoder_kinds;
using testing::encoder_gradient_suite;
using testing::random_batch;
using testing::spec_of;

constexpr int kInstances = 10;

TEST(EncoderGradient, EveryKind) {
  for (const auto& c : encoder_gradient_suite(kInstances)) {
    EXPECT_TRUE(c.result.ok) << c.name << " instance " << c.instance << " rel err " << c.result.worst;
  }
}

TEST(Encoder, OutputShapes) {
  Rng rng(3);
  for (const EncoderSpec& spec : all_encoder_kinds()) {
    EncoderModule m(spec);
    const ModalityBatch x = random_batch(spec, 4, rng);
    const EncoderOutput o = m.encoder(x);
    EXPECT_EQ(o.vec.rows(), 4) << to_string(spec.kind);
    EXPECT_EQ(static_cast<std::size_t>(o.vec.cols()), m.encoder.out_dim()) << to_string(spec.kind);
    if (m.encoder.produces_sequence()) {
      ASSERT_TRUE(o.seq.defined());
      EXPECT_EQ(o.seq.rows(), 4 * x.steps);
      EXPECT_EQ(o.steps, x.steps);
    } else {
      EXPECT_FALSE(o.seq.defined());
    }
  }
}

TEST(Encoder, AnalyticParamCountMatchesAllocation) {
  using K = EncoderKind;
  using M = ModalityKind;
  std::vector<EncoderSpec> specs = all_encoder_kinds();
  specs.push_back(spec_of(K::kMlp, M::kTable, {7}, {8, 6, 4}, 2));
  specs.push_back(spec_of(K::kConvolutional, M::kImageGrid, {6, 5, 3}, {}, 4));
  specs.push_back(spec_of(K::kTransformer, M::kTemporalSequence, {5, 3}, {}, 6));
  specs.push_back(spec_of(K::kDeepSet, M::kSet, {3, 2}, {}, 5));
  specs.push_back(spec_of(K::kIdentity, M::kStaticVector, {9}, {}, 9));
  for (const EncoderSpec& s : specs) {
    EncoderModule m(s);
    EXPECT_EQ(m.params.count(), Encoder::analytic_param_count(s)) << to_string(s.kind);
  }
  // Hand counts for two simple cases.
  EXPECT_EQ(Encoder::analytic_param_count(spec_of(K::kMlp, M::kStaticVector, {5}, {6}, 3)), 5u * 6 + 6 + 6 * 3 + 3);
  EXPECT_EQ(Encoder::analytic_param_count(spec_of(K::kRecurrent, M::kTemporalSequence, {4, 3}, {}, 2)),
            3u * (3 * 2 + 2 * 2 + 2));
}

TEST(Encoder, RejectsIncompatibleModality) {
  using K = EncoderKind;
  using M = ModalityKind;
  const std::vector<std::pair<K, M>> bad = {
      {K::kRecurrent, M::kStaticVector}, {K::kTransformer, M::kImageGrid}, {K::kConvolutional, M::kTemporalSequence},
      {K::kDeepSet, M::kStaticVector},   {K::kMlp, M::kSet},               {K::kIdentity, M::kSet},
  };
  for (const auto& [k, m] : bad) {
    const Shape shape = (m == M::kStaticVector) ? Shape{4} : m == M::kImageGrid ? Shape{4, 4, 1} : Shape{4, 2};
    try {
      EncoderModule mod(spec_of(k, m, shape, {}, 2));
      ADD_FAILURE() << to_string(k) << " accepted " << to_string(m);
    } catch (const ConfigError& e) {
      EXPECT_EQ(e.field(), "encoders.kind");
      EXPECT_NE(std::string(e.what()).find(to_string(k)), std::string::npos);
    }
  }
}

TEST(Encoder, RejectsBadShapesAndDims) {
  using K = EncoderKind;
  using M = ModalityKind;
  EXPECT_THROW(EncoderModule(spec_of(K::kMlp, M::kStaticVector, {4, 2}, {}, 2)), ShapeError);
  EXPECT_THROW(EncoderModule(spec_of(K::kMlp, M::kStaticVector, {4}, {}, 0)), ConfigError);
  EXPECT_THROW(EncoderModule(spec_of(K::kMlp, M::kStaticVector, {4}, {0}, 2)), ConfigError);
  EXPECT_THROW(EncoderModule(spec_of(K::kRecurrent, M::kTemporalSequence, {4, 2}, {3}, 2)), ConfigError);
  EXPECT_THROW(EncoderModule(spec_of(K::kIdentity, M::kStaticVector, {4}, {}, 3)), ConfigError);
  EncoderSpec conv = spec_of(K::kConvolutional, M::kImageGrid, {2, 2, 1}, {}, 2);
  conv.kernel_size = 3;
  EXPECT_THROW(EncoderModule{conv}, ConfigError);
}

TEST(Encoder, IdentityPassesThrough) {
  Rng rng(9);
  EncoderModule vec(spec_of(EncoderKind::kIdentity, ModalityKind::kStaticVector, {4}, {}, 0));
  EXPECT_EQ(vec.encoder.out_dim(), 4u);
  EXPECT_EQ(vec.params.count(), 0u);
  const ModalityBatch x = random_batch(vec.encoder.spec(), 3, rng);
  EXPECT_EQ(vec.encoder(x).vec.value(), x.data.value());

  EncoderModule seq(spec_of(EncoderKind::kIdentity, ModalityKind::kTemporalSequence, {3, 2}, {}, 0));
  const ModalityBatch s = random_batch(seq.encoder.spec(), 2, rng);
  const EncoderOutput o = seq.encoder(s);
  EXPECT_EQ(o.seq.value(), s.data.value());
  for (Eigen::Index b = 0; b < 2; ++b) {
    const Mat expect = s.data.value().middleRows(b * 3, 3).colwise().mean();
    EXPECT_LT((o.vec.value().row(b) - expect).norm(), 1e-12);
  }
}

TEST(Encoder, DeepSetIsPermutationInvariant) {
  EncoderModule m(spec_of(EncoderKind::kDeepSet, ModalityKind::kSet, {5, 3}, {4}, 3, 21));
  Rng rng(4);
  ModalityBatch x;
  x.batch = 1;
  x.starts = {0, 5};
  const Mat rows = random_mat(rng, 5, 3);
  x.data = ad::constant(rows);
  const Mat a = m.encoder(x).vec.value();
  Mat shuffled = rows;
  const std::vector<int> perm = {3, 0, 4, 2, 1};
  for (int i = 0; i < 5; ++i) shuffled.row(i) = rows.row(perm[static_cast<std::size_t>(i)]);
  x.data = ad::constant(shuffled);
  EXPECT_LT((m.encoder(x).vec.value() - a).norm(), 1e-12);
}

TEST(Encoder, RecurrentIsCausal) {
  // The state at step t ignores later steps.
  EncoderModule m(spec_of(EncoderKind::kRecurrent, ModalityKind::kTemporalSequence, {4, 2}, {}, 3, 8));
  Rng rng(6);
  const ModalityBatch x = random_batch(m.encoder.spec(), 1, rng);
  const Mat base = m.encoder(x).seq.value();
  Mat changed = x.data.value();
  changed.row(3).setConstant(5.0);
  ModalityBatch y = x;
  y.data = ad::constant(changed);
  const Mat after = m.encoder(y).seq.value();
  EXPECT_LT((after.topRows(3) - base.topRows(3)).norm(), 1e-12);
  EXPECT_GT((after.row(3) - base.row(3)).norm(), 1e-6);
}

TEST(Encoder, SeedDeterminesInitialization) {
  const EncoderSpec s = spec_of(EncoderKind::kTransformer, ModalityKind::kTemporalSequence, {3, 2}, {}, 4, 42);
  EncoderModule a(s), b(s);
  EncoderSpec other = s;
  other.seed = 43;
  EncoderModule c(other);
  Rng rng(1);
  const ModalityBatch x = random_batch(s, 2, rng);
  EXPECT_EQ(a.encoder(x).vec.value(), b.encoder(x).vec.value());
  EXPECT_NE(a.encoder(x).vec.value(), c.encoder(x).vec.value());
}

TEST(Encoder, MakeBatchLayouts) {
  ModalitySpec seq{"s", ModalityKind::kTemporalSequence, {3, 2}, 1.0};
  ModalitySpec set{"e", ModalityKind::kSet, {4, 2}, 0.0};
  SampleSet samples(2);
  samples[0].modalities = {Array({3, 2}, {1, 2, 3, 4, 5, 6}), Array({1, 2}, {7, 8})};
  samples[1].modalities = {Array({3, 2}, {9, 10, 11, 12, 13, 14}), Array({3, 2}, {1, 1, 2, 2, 3, 3})};
  const ModalityBatch a = make_batch(seq, samples, {1, 0}, 0);
  EXPECT_EQ(a.steps, 3);
  EXPECT_EQ(a.data.rows(), 6);
  EXPECT_EQ(a.data.value()(0, 0), 9.0);
  EXPECT_EQ(a.data.value()(3, 1), 2.0);
  const ModalityBatch b = make_batch(set, samples, {0, 1}, 1);
  EXPECT_EQ(b.starts, (std::vector<Eigen::Index>{0, 1, 4}));
  EXPECT_EQ(b.data.value()(2, 0), 2.0);
  EXPECT_THROW(flatten_batch(b), ShapeError);
  samples[0].modalities[0] = Array({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_THROW(make_batch(seq, samples, {0}, 0), ShapeError);
}

TEST(Encoder, SpecJsonRoundTrip) {
  EncoderSpec s = spec_of(EncoderKind::kConvolutional, ModalityKind::kImageGrid, {5, 5, 1}, {4}, 3, 7);
  s.kernel_size = 2;
  const EncoderSpec r = encoder_spec_from_json(encoder_spec_to_json(s));
  EXPECT_EQ(r.kind, s.kind);
  EXPECT_EQ(r.modality, s.modality);
  EXPECT_EQ(r.in_shape, s.in_shape);
  EXPECT_EQ(r.hidden_dims, s.hidden_dims);
  EXPECT_EQ(r.out_dim, s.out_dim);
  EXPECT_EQ(r.seed, s.seed);
  EXPECT_EQ(r.kernel_size, 2u);
  EXPECT_THROW(encoder_spec_from_json({{"kind", "rnn"}}), ConfigError);
}

TEST(Encoder, SaveWritesCheckpoint) {
  const auto dir = std::filesystem::temp_directory_path() / "mmfuse_test_encoder_ckpt";
  std::filesystem::remove_all(dir);
  EncoderModule m(spec_of(EncoderKind::kMlp, ModalityKind::kStaticVector, {3}, {}, 2));
  save_encoder(dir, m);
  EXPECT_TRUE(std::filesystem::exists(dir));
  ParamStore fresh;
  Encoder(m.encoder.spec(), fresh, "enc");
  for (Var& v : fresh.vars()) v.mutable_value().setZero();
  io::load_params(dir, fresh);
  for (std::size_t i = 0; i < fresh.size(); ++i) {
    EXPECT_LT((fresh.vars()[i].value() - m.params.vars()[i].value()).norm(), 1e-6);
  }
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace mmfuse
