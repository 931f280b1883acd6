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
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "mmfuse/core/autograd.hpp"
#include "mmfuse/core/io.hpp"
#include "mmfuse/core/nn.hpp"
#include "mmfuse/core/ops.hpp"
#include "mmfuse/core/random.hpp"
#include "mmfuse/core/tensor.hpp"
#include "support/gradcheck.hpp"

namespace mmfuse {
namespace {

using testing::gradcheck;
using testing::project_to_scalar;
using testing::random_mat;

constexpr int kInstances = 10;

// Runs `build` on fresh random parameters for kInstances seeds and checks
// every gradient. `build` receives an Rng and returns (vars, loss closure).
using Case = std::function<std::pair<std::vector<Var>, std::function<Var()>>(Rng&)>;

void expect_gradients(const std::string& name, const Case& build) {
  for (int i = 0; i < kInstances; ++i) {
    Rng rng(derive_seed(77, {static_cast<std::uint64_t>(i)}));
    auto [vars, loss] = build(rng);
    const auto r = gradcheck(vars, loss);
    EXPECT_TRUE(r.ok) << name << " instance " << i << " rel err " << r.worst << " at input " << r.worst_index;
  }
}

Var param(Rng& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  return ad::parameter(random_mat(rng, r, c, scale));
}

TEST(OpsGradient, Binary) {
  expect_gradients("matmul", [](Rng& rng) {
    Var a = param(rng, 3, 4), b = param(rng, 4, 2);
    return std::pair{std::vector<Var>{a, b}, std::function<Var()>([=] { return project_to_scalar(ad::matmul(a, b), 1); })};
  });
  expect_gradients("add/sub/hadamard", [](Rng& rng) {
    Var a = param(rng, 3, 4), b = param(rng, 3, 4);
    return std::pair{std::vector<Var>{a, b}, std::function<Var()>([=] {
      return project_to_scalar(ad::hadamard(ad::add(a, b), ad::sub(a, b)), 2);
    })};
  });
  expect_gradients("divide", [](Rng& rng) {
    Var a = param(rng, 3, 3);
    Var b = ad::parameter((random_mat(rng, 3, 3).array().abs() + 1.0).matrix());
    return std::pair{std::vector<Var>{a, b}, std::function<Var()>([=] { return project_to_scalar(ad::divide(a, b), 3); })};
  });
}

TEST(OpsGradient, Broadcasts) {
  expect_gradients("add_row/mul_row", [](Rng& rng) {
    Var a = param(rng, 4, 3), r = param(rng, 1, 3), s = param(rng, 1, 3);
    return std::pair{std::vector<Var>{a, r, s}, std::function<Var()>([=] {
      return project_to_scalar(ad::mul_row(ad::add_row(a, r), s), 4);
    })};
  });
  expect_gradients("add_col/mul_col", [](Rng& rng) {
    Var a = param(rng, 4, 3), c = param(rng, 4, 1), d = param(rng, 4, 1);
    return std::pair{std::vector<Var>{a, c, d}, std::function<Var()>([=] {
      return project_to_scalar(ad::mul_col(ad::add_col(a, c), d), 5);
    })};
  });
  expect_gradients("scale/add_scalar", [](Rng& rng) {
    Var a = param(rng, 2, 3);
    return std::pair{std::vector<Var>{a}, std::function<Var()>([=] {
      return project_to_scalar(ad::add_scalar(ad::scale(a, -1.7), 0.3), 6);
    })};
  });
}

TEST(OpsGradient, Elementwise) {
  using Fn = Var (*)(const Var&);
  const std::vector<std::pair<std::string, Fn>> fns = {
      {"sigmoid", ad::sigmoid}, {"tanh", ad::tanh}, {"exp", ad::exp}, {"square", ad::square}};
  for (const auto& [name, fn] : fns) {
    expect_gradients(name, [fn = fn](Rng& rng) {
      Var a = param(rng, 3, 4);
      return std::pair{std::vector<Var>{a}, std::function<Var()>([=] { return project_to_scalar(fn(a), 7); })};
    });
  }
  expect_gradients("sqrt", [](Rng& rng) {
    Var a = ad::parameter((random_mat(rng, 3, 3).array().abs() + 0.5).matrix());
    return std::pair{std::vector<Var>{a}, std::function<Var()>([=] { return project_to_scalar(ad::sqrt(a), 8); })};
  });
  // Inputs kept away from the kinks of relu and clamp_min.
  expect_gradients("relu/clamp_min", [](Rng& rng) {
    Mat v = random_mat(rng, 3, 4);
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      if (std::abs(v.data()[i]) < 0.1) v.data()[i] = 0.5;
      if (std::abs(v.data()[i] - 0.2) < 0.1) v.data()[i] = 0.6;
    }
    Var a = ad::parameter(v);
    return std::pair{std::vector<Var>{a}, std::function<Var()>([=] {
      return project_to_scalar(ad::add(ad::relu(a), ad::clamp_min(a, 0.2)), 9);
    })};
  });
}

TEST(OpsGradient, ShapeOps) {
  expect_gradients("transpose/reshape", [](Rng& rng) {
    Var a = param(rng, 3, 4);
    return std::pair{std::vector<Var>{a}, std::function<Var()>([=] {
      return project_to_scalar(ad::reshape(ad::transpose(a), 2, 6), 10);
    })};
  });
  expect_gradients("concat/slice", [](Rng& rng) {
    Var a = param(rng, 3, 2), b = param(rng, 3, 3), c = param(rng, 2, 5);
    return std::pair{std::vector<Var>{a, b, c}, std::function<Var()>([=] {
      Var cat = ad::concat_rows({ad::concat_cols({a, b}), c});
      return project_to_scalar(ad::slice_rows(ad::slice_cols(cat, 1, 3), 1, 3), 11);
    })};
  });
  expect_gradients("gather/repeat/tile", [](Rng& rng) {
    Var a = param(rng, 4, 3), r = param(rng, 1, 3);
    return std::pair{std::vector<Var>{a, r}, std::function<Var()>([=] {
      Var g = ad::gather_rows(a, {3, 0, 0, 2, 1});
      return project_to_scalar(ad::tile_cols(ad::add(g, ad::repeat_rows(r, 5)), 2), 12);
    })};
  });
  expect_gradients("block_sum_cols", [](Rng& rng) {
    Var a = param(rng, 3, 6);
    return std::pair{std::vector<Var>{a}, std::function<Var()>([=] { return project_to_scalar(ad::block_sum_cols(a, 2, 3), 13); })};
  });
  expect_gradients("append_ones/rowwise_outer", [](Rng& rng) {
    Var a = param(rng, 3, 2), b = param(rng, 3, 3);
    return std::pair{std::vector<Var>{a, b}, std::function<Var()>([=] {
      return project_to_scalar(ad::rowwise_outer(ad::append_ones(a), b), 14);
    })};
  });
}

TEST(OpsGradient, Reductions) {
  expect_gradients("sum/mean/col_sums/row_sums", [](Rng& rng) {
    Var a = param(rng, 3, 4);
    return std::pair{std::vector<Var>{a}, std::function<Var()>([=] {
      Var s = ad::add(ad::scale(ad::sum(ad::square(a)), 0.1), ad::mean(a));
      return ad::add(s, ad::add(project_to_scalar(ad::col_sums(a), 15), project_to_scalar(ad::row_sums(a), 16)));
    })};
  });
  expect_gradients("segment_mean/segment_sum_sorted", [](Rng& rng) {
    Var a = param(rng, 7, 3);
    return std::pair{std::vector<Var>{a}, std::function<Var()>([=] {
      Var m = ad::segment_mean(a, {0, 2, 2, 7});
      Var s = ad::segment_sum_sorted(a, {0, 3, 7});
      return ad::add(project_to_scalar(m, 17), project_to_scalar(s, 18));
    })};
  });
  expect_gradients("row_norms", [](Rng& rng) {
    Var a = param(rng, 4, 3);
    return std::pair{std::vector<Var>{a}, std::function<Var()>([=] { return project_to_scalar(ad::row_norms(a), 19); })};
  });
}

TEST(OpsGradient, SoftmaxAttentionLosses) {
  expect_gradients("softmax_rows", [](Rng& rng) {
    Var a = param(rng, 3, 4);
    return std::pair{std::vector<Var>{a}, std::function<Var()>([=] { return project_to_scalar(ad::softmax_rows(a), 20); })};
  });
  expect_gradients("batched_attention", [](Rng& rng) {
    Var q = param(rng, 2 * 3, 4), k = param(rng, 2 * 5, 4), v = param(rng, 2 * 5, 6);
    return std::pair{std::vector<Var>{q, k, v}, std::function<Var()>([=] {
      return project_to_scalar(ad::batched_attention(q, k, v, 2, 3, 5, 2), 21);
    })};
  });
  expect_gradients("cross_entropy", [](Rng& rng) {
    Var a = param(rng, 5, 3);
    return std::pair{std::vector<Var>{a}, std::function<Var()>([=] { return ad::cross_entropy(a, {0, 2, 1, 1, 0}); })};
  });
  expect_gradients("mse", [](Rng& rng) {
    Var a = param(rng, 4, 2), b = param(rng, 4, 2);
    return std::pair{std::vector<Var>{a, b}, std::function<Var()>([=] { return ad::mse(a, b); })};
  });
  for (bool unbiased : {true, false}) {
    expect_gradients("mmd2", [unbiased](Rng& rng) {
      Var x = param(rng, 5, 2), y = param(rng, 4, 2);
      return std::pair{std::vector<Var>{x, y}, std::function<Var()>([=] { return ad::mmd2(x, y, 1.3, unbiased); })};
    });
  }
}

// Naive MMD^2 written from the kernel definition.
double naive_mmd2(const Mat& x, const Mat& y, double h, bool unbiased) {
  auto k = [h](const Eigen::RowVectorXd& u, const Eigen::RowVectorXd& v) {
    return std::exp(-(u - v).squaredNorm() / (2 * h * h));
  };
  const double n = static_cast<double>(x.rows()), m = static_cast<double>(y.rows());
  double xx = 0, yy = 0, xy = 0;
  for (int i = 0; i < x.rows(); ++i) {
    for (int j = 0; j < x.rows(); ++j) {
      if (!unbiased || i != j) xx += k(x.row(i), x.row(j));
    }
  }
  for (int i = 0; i < y.rows(); ++i) {
    for (int j = 0; j < y.rows(); ++j) {
      if (!unbiased || i != j) yy += k(y.row(i), y.row(j));
    }
  }
  for (int i = 0; i < x.rows(); ++i) {
    for (int j = 0; j < y.rows(); ++j) xy += k(x.row(i), y.row(j));
  }
  if (unbiased) return xx / (n * (n - 1)) + yy / (m * (m - 1)) - 2 * xy / (n * m);
  return xx / (n * n) + yy / (m * m) - 2 * xy / (n * m);
}

TEST(Ops, MmdMatchesNaiveOracle) {
  Rng rng(5);
  for (int i = 0; i < 10; ++i) {
    const Mat x = random_mat(rng, 6, 3), y = random_mat(rng, 5, 3, 2.0);
    for (bool u : {true, false}) {
      EXPECT_NEAR(ad::mmd2(ad::constant(x), ad::constant(y), 0.9, u).item(), naive_mmd2(x, y, 0.9, u), 1e-12);
    }
  }
}

TEST(Ops, MmdOfIdenticalSetsIsZeroBiased) {
  Rng rng(6);
  const Mat x = random_mat(rng, 5, 2);
  EXPECT_NEAR(ad::mmd2(ad::constant(x), ad::constant(x), 1.0, false).item(), 0.0, 1e-15);
}

TEST(Ops, SoftmaxRowsSumToOne) {
  Rng rng(7);
  const Mat p = ad::softmax_rows_value(random_mat(rng, 6, 5, 30.0));
  for (Eigen::Index r = 0; r < p.rows(); ++r) EXPECT_NEAR(p.row(r).sum(), 1.0, 1e-12);
}

TEST(Ops, SegmentSumIsOrderIndependent) {
  Mat x(4, 1);
  x << 1e16, 1.0, -1e16, 1.0;
  Mat y(4, 1);
  y << 1.0, -1e16, 1.0, 1e16;
  EXPECT_EQ(ad::segment_sum_sorted(ad::constant(x), {0, 4}).item(), ad::segment_sum_sorted(ad::constant(y), {0, 4}).item());
}

TEST(Ops, ShapeErrorsAreReported) {
  EXPECT_THROW(ad::matmul(ad::constant(Mat::Zero(2, 3)), ad::constant(Mat::Zero(2, 3))), ShapeError);
  EXPECT_THROW(ad::add(ad::constant(Mat::Zero(2, 3)), ad::constant(Mat::Zero(3, 2))), ShapeError);
  EXPECT_THROW(ad::backward(ad::constant(Mat::Zero(2, 2))), ShapeError);
  EXPECT_THROW(ad::cross_entropy(ad::constant(Mat::Zero(2, 2)), {0, 2}), ShapeError);
}

TEST(Random, DeriveSeedIsOrderSensitiveAndDeterministic) {
  EXPECT_EQ(derive_seed(1, {2, 3}), derive_seed(1, {2, 3}));
  EXPECT_NE(derive_seed(1, {2, 3}), derive_seed(1, {3, 2}));
  EXPECT_NE(derive_seed(1, {2}), derive_seed(2, {2}));
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.normal(), b.normal());
}

TEST(Nn, ParamCountsMatchFormula) {
  ParamStore store;
  Rng rng(1);
  Mlp mlp(store, "m", 5, {7, 3}, 2, rng);
  EXPECT_EQ(store.count(), (5 * 7 + 7) + (7 * 3 + 3) + (3 * 2 + 2));
  EXPECT_EQ(store.count(), Mlp::param_count(5, {7, 3}, 2));
  EXPECT_EQ(store.names().front(), "m.0.weight");
}

TEST(Nn, MlpGradient) {
  expect_gradients("mlp", [](Rng& rng) {
    auto store = std::make_shared<ParamStore>();
    Mlp mlp(*store, "m", 3, {4}, 2, rng, Activation::kTanh, Activation::kSigmoid);
    Var x = param(rng, 5, 3);
    std::vector<Var> vars = store->vars();
    vars.push_back(x);
    return std::pair{vars, std::function<Var()>([=] { return project_to_scalar(mlp(x), 22); })};
  });
}

TEST(Io, ParamsRoundTripAndLayoutChecks) {
  const auto dir = std::filesystem::temp_directory_path() / "mmfuse_io_test";
  std::filesystem::remove_all(dir);
  ParamStore a, b, c;
  Rng r1(1), r2(2), r3(3);
  Linear la(a, "lin", 3, 2, r1), lb(b, "lin", 3, 2, r2), lc(c, "other", 3, 2, r3);
  io::save_params(dir, a, {{"kind", "test"}});
  const auto manifest = io::load_params(dir, b);
  EXPECT_EQ(manifest.at("kind"), "test");
  EXPECT_EQ(manifest.at("dtype"), "float32");
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_TRUE(a.vars()[i].value().cast<float>().cast<double>().isApprox(b.vars()[i].value(), 0.0));
  }
  EXPECT_THROW(io::load_params(dir, c), ShapeError);
  std::filesystem::remove_all(dir);
}

TEST(Io, Float32IsLittleEndian) {
  std::string bytes;
  io::append_f32_le(bytes, 1.0f);
  ASSERT_EQ(bytes.size(), 4u);
  EXPECT_EQ(static_cast<unsigned char>(bytes[0]), 0x00);
  EXPECT_EQ(static_cast<unsigned char>(bytes[3]), 0x3f);
  EXPECT_EQ(io::read_f32_le(reinterpret_cast<const unsigned char*>(bytes.data())), 1.0f);
}

}  // namespace
}  // namespace mmfuse
