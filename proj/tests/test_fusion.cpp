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

#include <algorithm>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "mmfuse/fusion.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"
#include "support/suites.hpp"

namespace mmfuse {
namespace {

using testing::random_mat;
using testing::fusion_gradient_suite;
using testing::naive_lrtf;
using testing::seq_rep;
using testing::vec_rep;

constexpr int kInstances = 10;

Var row(std::initializer_list<double> v) {
  Mat m(1, static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) m(0, i++) = x;
  return ad::constant(m);
}

TEST(FusionConcat, Examples) {
  EXPECT_EQ(early_fuse({row({1, 2}), row({3})}).value(), row({1, 2, 3}).value());
  const Var single = row({4, 5});
  EXPECT_EQ(early_fuse({single}).value(), single.value());
  EXPECT_EQ(late_fuse({row({1}), row({2, 3})}).value(), row({1, 2, 3}).value());
  Rng rng(1);
  const Var a = ad::constant(random_mat(rng, 2, 4)), b = ad::constant(random_mat(rng, 2, 5)),
            c = ad::constant(random_mat(rng, 2, 6));
  EXPECT_EQ(early_fuse({a, b, c}).cols(), 15);
  EXPECT_EQ(late_fuse({a, b, c}).cols(), 15);
  EXPECT_EQ(LateFusion({4, 5, 6}).out_dim(), 15u);
  EXPECT_EQ(EarlyFusion({4, 5, 6}).out_dim(), 15u);
}

TEST(FusionTensor, Examples) {
  EXPECT_EQ(tensor_fuse({row({1}), row({2})}).value(), row({2, 1, 2, 1}).value());
  EXPECT_EQ(tensor_fuse({row({0, 0}), row({0})}).value(), row({0, 0, 0, 0, 0, 1}).value());
  EXPECT_EQ(tensor_fusion_dim({2, 3, 4}), 60u);
  Rng rng(2);
  std::vector<Var> z;
  for (int d : {2, 3, 4}) z.push_back(ad::constant(random_mat(rng, 3, d)));
  EXPECT_EQ(tensor_fuse(z).cols(), 60);
  EXPECT_THROW(tensor_fuse({row({1})}), ShapeError);
}

TEST(FusionTensor, ScalabilityCap) {
  EXPECT_THROW(tensor_fusion_dim({99, 99, 99, 99}), ScalabilityError);
  EXPECT_EQ(tensor_fusion_dim({99, 99, 99}), 1'000'000u);
  EXPECT_THROW(tensor_fusion_dim({3, 3}, 15), ScalabilityError);
  EXPECT_EQ(tensor_fusion_dim({3, 3}, 16), 16u);
  EXPECT_THROW(TensorFusion({1000, 1000, 1000}, kDefaultTensorCap), ScalabilityError);
}

TEST(FusionTensor, SubBlockRecovery) {
  // With modality 1 slowest, entry (i1, i2, i3) sits at (i1*(d2+1) + i2)*(d3+1) + i3.
  Rng rng(3);
  const std::vector<Eigen::Index> d = {2, 3, 4};
  std::vector<Var> z;
  for (Eigen::Index k : d) z.push_back(ad::constant(random_mat(rng, 2, k)));
  const Mat out = tensor_fuse(z).value();
  auto at = [&](Eigen::Index r, Eigen::Index i1, Eigen::Index i2, Eigen::Index i3) {
    return out(r, (i1 * (d[1] + 1) + i2) * (d[2] + 1) + i3);
  };
  for (Eigen::Index r = 0; r < 2; ++r) {
    EXPECT_EQ(at(r, d[0], d[1], d[2]), 1.0);
    for (Eigen::Index i = 0; i < d[0]; ++i) EXPECT_EQ(at(r, i, d[1], d[2]), z[0].value()(r, i));
    for (Eigen::Index i = 0; i < d[1]; ++i) EXPECT_EQ(at(r, d[0], i, d[2]), z[1].value()(r, i));
    for (Eigen::Index i = 0; i < d[2]; ++i) EXPECT_EQ(at(r, d[0], d[1], i), z[2].value()(r, i));
  }
}

TEST(FusionLrtf, Examples) {
  LrtfFactors f;
  f.rank = 1;
  f.out_dim = 1;
  f.factors = {ad::constant(Mat::Ones(2, 1)), ad::constant(Mat::Ones(2, 1))};
  EXPECT_DOUBLE_EQ(lrtf_fuse({row({1}), row({1})}, f).item(), 4.0);
  f.factors = {ad::constant(Mat::Zero(2, 3)), ad::constant(Mat::Zero(2, 3))};
  f.rank = 1;
  f.out_dim = 3;
  EXPECT_EQ(lrtf_fuse({row({1}), row({1})}, f).value(), Mat::Zero(1, 3));
  f.rank = 0;
  EXPECT_THROW(lrtf_fuse({row({1}), row({1})}, f), ConfigError);
  ParamStore store;
  Rng rng(0);
  EXPECT_THROW(LowRankTensorFusion({2, 2}, 0, 2, store, rng), ConfigError);
}

TEST(FusionLrtf, MatchesNaiveContraction) {
  for (int i = 0; i < 50; ++i) {
    Rng rng(derive_seed(31, {static_cast<std::uint64_t>(i)}));
    const auto d1 = static_cast<Eigen::Index>(1 + rng.index(3));
    const auto d2 = static_cast<Eigen::Index>(1 + rng.index(3));
    const auto rank = static_cast<Eigen::Index>(1 + rng.index(2));
    const auto out = static_cast<Eigen::Index>(1 + rng.index(3));
    const Mat z1 = random_mat(rng, 4, d1), z2 = random_mat(rng, 4, d2);
    const Mat fa = random_mat(rng, d1 + 1, out * rank), fb = random_mat(rng, d2 + 1, out * rank);
    LrtfFactors f;
    f.rank = static_cast<std::size_t>(rank);
    f.out_dim = static_cast<std::size_t>(out);
    f.factors = {ad::constant(fa), ad::constant(fb)};
    const Mat got = lrtf_fuse({ad::constant(z1), ad::constant(z2)}, f).value();
    EXPECT_LT((got - naive_lrtf(z1, z2, fa, fb, rank, out)).cwiseAbs().maxCoeff(), 1e-5) << "instance " << i;
  }
}

TEST(FusionMi, SpecialCases) {
  Rng rng(4);
  const Var z1 = ad::constant(random_mat(rng, 3, 2)), z2 = ad::constant(random_mat(rng, 3, 4));
  MiParams p;
  p.mode = MiMode::kMatrix;
  p.w = ad::constant(Mat::Zero(2, 2 * 4));
  p.u = ad::constant(Mat::Zero(2, 2));
  p.v = ad::constant(Mat::Zero(4, 2));
  p.b = ad::constant(Mat::Zero(1, 2));
  EXPECT_EQ(mi_fuse(z1, z2, p).value(), Mat::Zero(3, 2));
  p.u = ad::constant(Mat::Identity(2, 2));
  EXPECT_EQ(mi_fuse(z1, z2, p).value(), z1.value());
  p.v = ad::constant(Mat::Zero(3, 2));
  EXPECT_THROW(mi_fuse(z1, z2, p), ShapeError);
}

TEST(FusionMi, MatrixModeMatchesBilinearForm) {
  Rng rng(5);
  const Eigen::Index d1 = 3, d2 = 2, o = 4;
  const Mat z1 = random_mat(rng, 2, d1), z2 = random_mat(rng, 2, d2);
  MiParams p;
  p.w = ad::constant(random_mat(rng, d1, o * d2));
  p.u = ad::constant(random_mat(rng, d1, o));
  p.v = ad::constant(random_mat(rng, d2, o));
  p.b = ad::constant(random_mat(rng, 1, o));
  const Mat got = mi_fuse(ad::constant(z1), ad::constant(z2), p).value();
  for (Eigen::Index s = 0; s < 2; ++s) {
    for (Eigen::Index k = 0; k < o; ++k) {
      double want = p.b.value()(0, k);
      for (Eigen::Index i = 0; i < d1; ++i) {
        want += z1(s, i) * p.u.value()(i, k);
        for (Eigen::Index j = 0; j < d2; ++j) want += z1(s, i) * p.w.value()(i, k * d2 + j) * z2(s, j);
      }
      for (Eigen::Index j = 0; j < d2; ++j) want += z2(s, j) * p.v.value()(j, k);
      EXPECT_NEAR(got(s, k), want, 1e-12);
    }
  }
}

TEST(FusionMi, VectorModeEqualsFilmClosedForm) {
  for (int i = 0; i < kInstances; ++i) {
    Rng rng(derive_seed(6, {static_cast<std::uint64_t>(i)}));
    const Eigen::Index d1 = 3, d2 = 4;
    const Mat z1 = random_mat(rng, 5, d1), z2 = random_mat(rng, 5, d2);
    MiParams p;
    p.mode = MiMode::kVector;
    p.w = ad::constant(random_mat(rng, d2, d1));
    p.u = ad::constant(random_mat(rng, 1, d1));
    p.v = ad::constant(random_mat(rng, d2, d1));
    p.b = ad::constant(random_mat(rng, 1, d1));
    const Mat got = mi_fuse(ad::constant(z1), ad::constant(z2), p).value();
    // Independent closed form, sample by sample.
    for (Eigen::Index s = 0; s < 5; ++s) {
      const Eigen::RowVectorXd gamma = z2.row(s) * p.w.value() + p.u.value();
      const Eigen::RowVectorXd beta = z2.row(s) * p.v.value() + p.b.value();
      const Eigen::RowVectorXd want = gamma.cwiseProduct(z1.row(s)) + beta;
      EXPECT_LT((got.row(s) - want).cwiseAbs().maxCoeff(), 1e-6);
    }
  }
}

TEST(FusionMi, ScalarMode) {
  Rng rng(7);
  const Mat z1 = random_mat(rng, 3, 4), z2 = random_mat(rng, 3, 2);
  MiParams p;
  p.mode = MiMode::kScalar;
  p.w = ad::constant(random_mat(rng, 2, 1));
  p.u = ad::constant(random_mat(rng, 1, 1));
  p.v = ad::constant(random_mat(rng, 2, 1));
  p.b = ad::constant(random_mat(rng, 1, 1));
  const Mat got = mi_fuse(ad::constant(z1), ad::constant(z2), p).value();
  for (Eigen::Index s = 0; s < 3; ++s) {
    const double g = (z2.row(s) * p.w.value())(0, 0) + p.u.value()(0, 0);
    const double b = (z2.row(s) * p.v.value())(0, 0) + p.b.value()(0, 0);
    EXPECT_LT((got.row(s) - (g * z1.row(s)).array().matrix() - Eigen::RowVectorXd::Constant(4, b)).norm(), 1e-12);
  }
}

TEST(FusionFilm, SpecialCasesAndTransplant) {
  ParamStore store;
  Rng rng(8);
  FilmFusion film({3, 2}, {}, store, rng);
  const FilmParams& fp = film.params();
  const Var z1 = ad::constant(random_mat(rng, 4, 3)), z2 = ad::constant(random_mat(rng, 4, 2));
  FusionInput in{{vec_rep(z1), vec_rep(z2)}, {}};

  // Transplant the single-layer networks into mi-vector parameters.
  MiParams p;
  p.mode = MiMode::kVector;
  p.w = ad::constant(fp.gamma.layers[0].weight.value());
  p.u = ad::constant(fp.gamma.layers[0].bias.value());
  p.v = ad::constant(fp.beta.layers[0].weight.value());
  p.b = ad::constant(fp.beta.layers[0].bias.value());
  EXPECT_LT((film(in).value() - mi_fuse(z1, z2, p).value()).cwiseAbs().maxCoeff(), 1e-12);

  // gamma == 1, beta == 0.
  Var gw = fp.gamma.layers[0].weight, gb = fp.gamma.layers[0].bias;
  Var bw = fp.beta.layers[0].weight, bb = fp.beta.layers[0].bias;
  gw.mutable_value().setZero();
  gb.mutable_value().setOnes();
  bw.mutable_value().setZero();
  bb.mutable_value().setZero();
  EXPECT_EQ(film(in).value(), z1.value());
  // gamma == 0 leaves beta(z2).
  gb.mutable_value().setZero();
  Rng r2(9);
  bw.mutable_value() = random_mat(r2, 2, 3);
  EXPECT_LT((film(in).value() - fp.beta(z2).value()).norm(), 1e-15);

  ParamStore s2;
  FilmFusion deep({3, 2}, {5, 4}, s2, rng);
  EXPECT_EQ(s2.count(), deep.param_count());
  EXPECT_EQ(deep(in).cols(), 3);
}

TEST(FusionGate, ZeroParamsHalveInput) {
  for (GateVariant v : {GateVariant::kDense, GateVariant::kQueryKeyValue}) {
    ParamStore store;
    Rng rng(10);
    GateFusion g({3, 2}, v, 4, store, rng);
    for (Var& p : store.vars()) p.mutable_value().setZero();
    const Var z1 = ad::constant(random_mat(rng, 5, 3)), z2 = ad::constant(random_mat(rng, 5, 2));
    FusionInput in{{vec_rep(z1), vec_rep(z2)}, {}};
    EXPECT_LT((g(in).value() - 0.5 * z1.value()).norm(), 1e-15);
    EXPECT_EQ(store.count(), g.param_count());
  }
}

TEST(FusionGate, BoundedAndZeroPreserving) {
  for (GateVariant v : {GateVariant::kDense, GateVariant::kQueryKeyValue}) {
    for (int i = 0; i < kInstances; ++i) {
      ParamStore store;
      Rng rng(derive_seed(11, {static_cast<std::uint64_t>(i)}));
      GateFusion g({4, 3}, v, 5, store, rng);
      const Var z1 = ad::constant(random_mat(rng, 6, 4, 3.0)), z2 = ad::constant(random_mat(rng, 6, 3, 3.0));
      const Mat h = gate_weights(z2, g.gate()).value();
      EXPECT_GT(h.minCoeff(), 0.0);
      EXPECT_LT(h.maxCoeff(), 1.0);
      const Mat out = g(FusionInput{{vec_rep(z1), vec_rep(z2)}, {}}).value();
      EXPECT_TRUE((out.array().abs() <= z1.value().array().abs()).all());
      const Var zero = ad::constant(Mat::Zero(6, 4));
      EXPECT_EQ(g(FusionInput{{vec_rep(zero), vec_rep(z2)}, {}}).value(), Mat::Zero(6, 4));
    }
  }
}

TEST(FusionMult, UniformAttentionForIdenticalKeys) {
  ParamStore store;
  Rng rng(12);
  const std::size_t d = 4;
  CrossmodalBlock blk{Linear(store, "q", d, d, rng), Linear(store, "k", d, d, rng), Linear(store, "v", d, d, rng),
                      Linear(store, "o", d, d, rng),  Linear(store, "f1", d, 8, rng), Linear(store, "f2", 8, d, rng)};
  const Eigen::Index tb = 5;
  SequenceBatch a{ad::constant(random_mat(rng, 2 * 3, 4)), 2, 3};
  Mat same(2 * tb, 4);
  // Each sample repeats one key row across all steps.
  for (Eigen::Index r = 0; r < 2 * tb; ++r) same.row(r) = Eigen::RowVectorXd::LinSpaced(4, 0, 1) * static_cast<double>(1 + r / tb);
  SequenceBatch b{ad::constant(same), 2, tb};
  std::vector<Mat> weights;
  crossmodal_attend(a, b, blk, 2, &weights);
  ASSERT_EQ(weights.size(), 4u);
  for (const Mat& w : weights) EXPECT_LT((w.array() - 1.0 / static_cast<double>(tb)).abs().maxCoeff(), 1e-12);
}

TEST(FusionMult, KeyPermutationInvarianceWithoutPositions) {
  for (int i = 0; i < kInstances; ++i) {
    ParamStore store;
    Rng rng(derive_seed(13, {static_cast<std::uint64_t>(i)}));
    MultOptions o;
    o.d_model = 4;
    o.heads = 2;
    o.positional_encoding = false;
    CrossmodalFusion f({3, 2}, o, store, rng);
    const Eigen::Index t1 = 3, t2 = 4;
    const Mat s1 = random_mat(rng, t1, 3), s2 = random_mat(rng, t2, 2);
    Mat s2p(t2, 2);
    const std::vector<int> perm = {2, 0, 3, 1};
    for (Eigen::Index t = 0; t < t2; ++t) s2p.row(t) = s2.row(perm[static_cast<std::size_t>(t)]);
    const auto seqs = f.project({{seq_rep(ad::constant(s1), 1, t1), seq_rep(ad::constant(s2), 1, t2)}, {}});
    const auto seqp = f.project({{seq_rep(ad::constant(s1), 1, t1), seq_rep(ad::constant(s2p), 1, t2)}, {}});
    const Mat a = crossmodal_attend(seqs[0], seqs[1], f.blocks()[0], 2).value();
    const Mat b = crossmodal_attend(seqp[0], seqp[1], f.blocks()[0], 2).value();
    EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-6);
  }
}

TEST(FusionMult, DimsAndGroups) {
  ParamStore store;
  Rng rng(14);
  MultOptions o;
  o.d_model = 8;
  CrossmodalFusion two({3, 2}, o, store, rng);
  EXPECT_EQ(two.out_dim(), 16u);
  EXPECT_EQ(store.count(), two.param_count());
  ParamStore s3;
  CrossmodalFusion three({3, 2, 5}, o, s3, rng);
  EXPECT_EQ(three.out_dim(), 48u);
  EXPECT_EQ(s3.count(), three.param_count());
  ParamStore s4;
  EXPECT_THROW(CrossmodalFusion({1, 1, 1, 1}, o, s4, rng), ConfigError);
  o.groups = {{0, 1}, {2}, {3}};
  CrossmodalFusion four({1, 1, 1, 1}, o, s4, rng);
  EXPECT_EQ(four.out_dim(), 48u);
  o.groups = {{0, 1}, {1, 2}, {3}};
  EXPECT_THROW(CrossmodalFusion({1, 1, 1, 1}, o, s4, rng), ConfigError);
  MultOptions bad;
  bad.d_model = 6;
  bad.heads = 4;
  EXPECT_THROW(CrossmodalFusion({2, 2}, bad, s4, rng), ConfigError);
  // Vector-only encoder outputs are rejected.
  const Var v = ad::constant(random_mat(rng, 2, 3));
  EXPECT_THROW(two({{vec_rep(v), vec_rep(v)}, {}}), ConfigError);
}

TEST(FusionFactory, TagsDimsAndParamCounts) {
  const FusionDims dims{{3, 4}, {6, 5}};
  const std::vector<std::pair<std::string, std::size_t>> want = {
      {"lf", 7}, {"ef", 11}, {"tf", 20}, {"lrtf", 16}, {"mi-matrix", 16}, {"mi-vector", 3},
      {"mi-scalar", 3}, {"film", 3}, {"nlgate", 3}, {"mult", 16}};
  for (const auto& [tag, out] : want) {
    ParamStore store;
    Rng rng(15);
    auto f = make_fusion(tag, nlohmann::json::object(), dims, store, rng);
    EXPECT_EQ(f->tag(), tag);
    EXPECT_EQ(f->out_dim(), out) << tag;
    EXPECT_EQ(store.count(), f->param_count()) << tag;
  }
  ParamStore store;
  Rng rng(0);
  EXPECT_THROW(make_fusion("bogus", nlohmann::json::object(), dims, store, rng), ConfigError);
  EXPECT_THROW(make_fusion("film", nlohmann::json::object(), FusionDims{{1, 2, 3}, {1, 2, 3}}, store, rng), ConfigError);
  EXPECT_THROW(make_fusion("nlgate", {{"variant", "x"}}, dims, store, rng), ConfigError);
}

// Gradient w.r.t. inputs and parameters for every operator.
TEST(FusionGradient, EveryOperator) {
  for (const auto& c : fusion_gradient_suite(kInstances)) {
    EXPECT_TRUE(c.result.ok) << c.name << " instance " << c.instance << " rel err " << c.result.worst;
  }
}

}  // namespace
}  // namespace mmfuse
