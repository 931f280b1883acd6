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

// Fusion operators. Each maps per-modality representations (B rows each) to
// one multimodal representation. Free functions hold the math; the Fusion
// classes own parameters and plug into a model.

#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmfuse/core/error.hpp"
#include "mmfuse/core/nn.hpp"
#include "mmfuse/core/ops.hpp"
#include "mmfuse/encoders.hpp"

namespace mmfuse {

inline constexpr std::size_t kDefaultTensorCap = 10'000'000;

inline Var early_fuse(const std::vector<Var>& flat_inputs) {
  if (flat_inputs.empty()) throw ShapeError("early_fuse needs at least one input");
  return flat_inputs.size() == 1 ? flat_inputs[0] : ad::concat_cols(flat_inputs);
}

inline Var late_fuse(const std::vector<Var>& reps) {
  if (reps.empty()) throw ShapeError("late_fuse needs at least one input");
  return reps.size() == 1 ? reps[0] : ad::concat_cols(reps);
}

// prod_m (d_m + 1), or an error once it passes `cap`.
inline std::size_t tensor_fusion_dim(const std::vector<std::size_t>& dims, std::size_t cap = kDefaultTensorCap) {
  std::size_t n = 1;
  for (std::size_t d : dims) {
    if (n > cap / (d + 1)) {
      throw ScalabilityError("tensor fusion output exceeds the configured cap of " + std::to_string(cap) + " entries");
    }
    n *= d + 1;
  }
  if (n > cap) throw ScalabilityError("tensor fusion output exceeds the configured cap of " + std::to_string(cap) + " entries");
  return n;
}

// Flattened outer product of the bias-augmented vectors [z_m; 1], modality 1
// varying slowest.
inline Var tensor_fuse(const std::vector<Var>& reps, std::size_t cap = kDefaultTensorCap) {
  if (reps.size() < 2) throw ShapeError("tensor_fuse needs at least two modalities");
  std::vector<std::size_t> dims;
  for (const auto& z : reps) dims.push_back(static_cast<std::size_t>(z.cols()));
  tensor_fusion_dim(dims, cap);
  Var out = ad::append_ones(reps[0]);
  for (std::size_t m = 1; m < reps.size(); ++m) out = ad::rowwise_outer(out, ad::append_ones(reps[m]));
  return out;
}

// Factor m is (d_m + 1) x (d_out * rank); column o * rank + r holds the
// rank-r factor for output o.
struct LrtfFactors {
  std::vector<Var> factors;
  std::size_t rank = 1;
  std::size_t out_dim = 1;
};

inline Var lrtf_fuse(const std::vector<Var>& reps, const LrtfFactors& f) {
  if (f.rank < 1) throw ConfigError("lrtf rank must be >= 1", "fusion.rank");
  if (reps.size() != f.factors.size()) throw ShapeError("lrtf needs one factor per modality");
  if (reps.empty()) throw ShapeError("lrtf needs at least one modality");
  const auto width = static_cast<Eigen::Index>(f.rank * f.out_dim);
  Var prod;
  for (std::size_t m = 0; m < reps.size(); ++m) {
    const Var& w = f.factors[m];
    if (w.rows() != reps[m].cols() + 1 || w.cols() != width) {
      throw ShapeError("lrtf factor " + std::to_string(m) + " has shape " + std::to_string(w.rows()) + "x" +
                       std::to_string(w.cols()) + ", expected " + std::to_string(reps[m].cols() + 1) + "x" +
                       std::to_string(width));
    }
    const Var proj = ad::matmul(ad::append_ones(reps[m]), w);
    prod = m == 0 ? proj : ad::hadamard(prod, proj);
  }
  return ad::block_sum_cols(prod, static_cast<Eigen::Index>(f.out_dim), static_cast<Eigen::Index>(f.rank));
}

enum class MiMode { kMatrix, kVector, kScalar };

// Layouts by mode (z_1 is d1 wide, z_2 is d2 wide):
//   matrix: w d1 x (d_out*d2) with column k*d2 + j = W[i,k,j]; u d1 x d_out;
//           v d2 x d_out; b 1 x d_out.
//   vector: d_out = d1; w d2 x d1, u 1 x d1, v d2 x d1, b 1 x d1 so that
//           gamma = z_2 w + u and beta = z_2 v + b.
//   scalar: w d2 x 1, u 1 x 1, v d2 x 1, b 1 x 1 (gamma, beta scalars).
struct MiParams {
  MiMode mode = MiMode::kMatrix;
  Var w, u, v, b;
};

inline Var mi_fuse(const Var& z1, const Var& z2, const MiParams& p) {
  using namespace ad;
  const Eigen::Index d1 = z1.cols(), d2 = z2.cols();
  auto expect = [](const Var& x, Eigen::Index r, Eigen::Index c, const char* name) {
    if (x.rows() != r || x.cols() != c) {
      throw ShapeError(std::string("mi parameter ") + name + " has shape " + std::to_string(x.rows()) + "x" +
                       std::to_string(x.cols()) + ", expected " + std::to_string(r) + "x" + std::to_string(c));
    }
  };
  switch (p.mode) {
    case MiMode::kMatrix: {
      const Eigen::Index d_out = p.b.cols();
      expect(p.w, d1, d_out * d2, "W");
      expect(p.u, d1, d_out, "U");
      expect(p.v, d2, d_out, "V");
      expect(p.b, 1, d_out, "b");
      const Var bilinear = block_sum_cols(hadamard(matmul(z1, p.w), tile_cols(z2, d_out)), d_out, d2);
      return add_row(add(add(bilinear, matmul(z1, p.u)), matmul(z2, p.v)), p.b);
    }
    case MiMode::kVector: {
      expect(p.w, d2, d1, "W");
      expect(p.u, 1, d1, "U");
      expect(p.v, d2, d1, "V");
      expect(p.b, 1, d1, "b");
      const Var gamma = add_row(matmul(z2, p.w), p.u);
      const Var beta = add_row(matmul(z2, p.v), p.b);
      return add(hadamard(gamma, z1), beta);
    }
    case MiMode::kScalar: {
      expect(p.w, d2, 1, "W");
      expect(p.u, 1, 1, "U");
      expect(p.v, d2, 1, "V");
      expect(p.b, 1, 1, "b");
      const Var gamma = add_row(matmul(z2, p.w), p.u);
      const Var beta = add_row(matmul(z2, p.v), p.b);
      return add_col(mul_col(z1, gamma), beta);
    }
  }
  throw ShapeError("unknown mi mode");
}

struct FilmParams {
  Mlp gamma;
  Mlp beta;
};

inline Var film_fuse(const Var& z1, const Var& z2, const FilmParams& p) {
  const Var g = p.gamma(z2);
  const Var b = p.beta(z2);
  if (g.cols() != z1.cols() || b.cols() != z1.cols()) {
    throw ShapeError("film networks must output " + std::to_string(z1.cols()) + " features");
  }
  return ad::add(ad::hadamard(g, z1), b);
}

enum class GateVariant { kDense, kQueryKeyValue };

// dense: h = sigmoid(z_2 W + b).
// query-key-value: each feature j of z_2 becomes a token z_2[j] * embed[j] +
// offset[j]; a learned query attends over the tokens and
// h = sigmoid(out(context)).
struct GateNetwork {
  GateVariant variant = GateVariant::kDense;
  Linear dense;
  Var embed, offset, query;  // d2 x a, d2 x a, 1 x a
  Linear key, value, out;    // a -> a, a -> a, a -> d1
};

inline Var gate_weights(const Var& z2, const GateNetwork& g) {
  using namespace ad;
  if (g.variant == GateVariant::kDense) return sigmoid(g.dense(z2));
  const Eigen::Index batch = z2.rows(), d2 = z2.cols();
  if (g.embed.rows() != d2) throw ShapeError("gate embedding expects " + std::to_string(g.embed.rows()) + " features");
  std::vector<Eigen::Index> feature(static_cast<std::size_t>(batch * d2));
  for (Eigen::Index i = 0; i < batch * d2; ++i) feature[static_cast<std::size_t>(i)] = i % d2;
  const Var scalars = reshape(z2, batch * d2, 1);
  const Var tokens = add(mul_col(gather_rows(g.embed, feature), scalars), gather_rows(g.offset, feature));
  const Var q = repeat_rows(g.query, batch);
  const Var context = batched_attention(q, g.key(tokens), g.value(tokens), batch, 1, d2, 1);
  return sigmoid(g.out(context));
}

inline Var gate_fuse(const Var& z1, const Var& z2, const GateNetwork& g) {
  const Var h = gate_weights(z2, g);
  if (h.cols() != z1.cols()) throw ShapeError("gate output width must equal d1 = " + std::to_string(z1.cols()));
  return ad::hadamard(z1, h);
}

// One crossmodal block CM(a, b): queries from a, keys/values from b, then a
// feed-forward layer, each with a residual; mean-pooled over a's steps.
struct CrossmodalBlock {
  Linear q, k, v, o, ff1, ff2;
};

struct SequenceBatch {
  Var seq;  // (B*T) x width, sample-major
  Eigen::Index batch = 0;
  Eigen::Index steps = 0;
};

inline Var crossmodal_attend(const SequenceBatch& a, const SequenceBatch& b, const CrossmodalBlock& blk,
                             Eigen::Index heads, std::vector<Mat>* weights = nullptr) {
  using namespace ad;
  if (a.batch != b.batch) throw ShapeError("crossmodal inputs have different batch sizes");
  Var h = add(a.seq, blk.o(batched_attention(blk.q(a.seq), blk.k(b.seq), blk.v(b.seq), a.batch, a.steps, b.steps,
                                             heads, weights)));
  h = add(h, blk.ff2(ad::tanh(blk.ff1(h))));
  return segment_mean(h, uniform_starts(a.batch, a.steps));
}

// Ordered (query, key) pairs: (0,1), (1,0), (0,2), (2,0), (1,2), (2,1).
inline std::vector<std::pair<std::size_t, std::size_t>> crossmodal_pairs(std::size_t groups) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t j = 1; j < groups; ++j) {
    for (std::size_t i = 0; i < j; ++i) {
      out.emplace_back(i, j);
      out.emplace_back(j, i);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Parameterized operators.

struct FusionInput {
  std::vector<EncoderOutput> reps;
  std::vector<ModalityBatch> raw;
};

class Fusion {
 public:
  virtual ~Fusion() = default;
  virtual std::string tag() const = 0;
  virtual Var operator()(const FusionInput& in) const = 0;
  virtual std::size_t out_dim() const = 0;
  // Closed-form parameter count of this operator.
  virtual std::size_t param_count() const = 0;
  // True when the operator reads raw inputs instead of encoder outputs.
  virtual bool uses_raw() const { return false; }
  virtual bool needs_sequences() const { return false; }
};

namespace detail {

inline std::vector<Var> vectors(const FusionInput& in) {
  std::vector<Var> out;
  for (const auto& r : in.reps) out.push_back(r.vec);
  return out;
}

inline void require_two(const std::vector<std::size_t>& dims, const std::string& tag) {
  if (dims.size() != 2) throw ConfigError(tag + " fusion takes exactly two modalities", "fusion.tag");
}

inline std::size_t total(const std::vector<std::size_t>& dims) {
  std::size_t n = 0;
  for (std::size_t d : dims) n += d;
  return n;
}

}  // namespace detail

class LateFusion : public Fusion {
 public:
  explicit LateFusion(std::vector<std::size_t> dims) : dims_(std::move(dims)) {}
  std::string tag() const override { return "lf"; }
  Var operator()(const FusionInput& in) const override { return late_fuse(detail::vectors(in)); }
  std::size_t out_dim() const override { return detail::total(dims_); }
  std::size_t param_count() const override { return 0; }

 private:
  std::vector<std::size_t> dims_;
};

class EarlyFusion : public Fusion {
 public:
  explicit EarlyFusion(std::vector<std::size_t> raw_dims) : dims_(std::move(raw_dims)) {}
  std::string tag() const override { return "ef"; }
  Var operator()(const FusionInput& in) const override {
    std::vector<Var> flat;
    for (const auto& r : in.raw) flat.push_back(flatten_batch(r));
    return early_fuse(flat);
  }
  std::size_t out_dim() const override { return detail::total(dims_); }
  std::size_t param_count() const override { return 0; }
  bool uses_raw() const override { return true; }

 private:
  std::vector<std::size_t> dims_;
};

class TensorFusion : public Fusion {
 public:
  TensorFusion(std::vector<std::size_t> dims, std::size_t cap) : dims_(std::move(dims)), cap_(cap) {
    if (dims_.size() < 2) throw ConfigError("tf fusion needs at least two modalities", "fusion.tag");
    out_ = tensor_fusion_dim(dims_, cap_);
  }
  std::string tag() const override { return "tf"; }
  Var operator()(const FusionInput& in) const override { return tensor_fuse(detail::vectors(in), cap_); }
  std::size_t out_dim() const override { return out_; }
  std::size_t param_count() const override { return 0; }

 private:
  std::vector<std::size_t> dims_;
  std::size_t cap_;
  std::size_t out_ = 0;
};

class LowRankTensorFusion : public Fusion {
 public:
  LowRankTensorFusion(std::vector<std::size_t> dims, std::size_t rank, std::size_t out, ParamStore& store, Rng& rng)
      : dims_(std::move(dims)) {
    if (rank < 1) throw ConfigError("lrtf rank must be >= 1", "fusion.rank");
    if (out < 1) throw ConfigError("lrtf out_dim must be >= 1", "fusion.out_dim");
    f_.rank = rank;
    f_.out_dim = out;
    for (std::size_t m = 0; m < dims_.size(); ++m) {
      const auto rows = static_cast<Eigen::Index>(dims_[m] + 1);
      f_.factors.push_back(store.add("fusion.factor" + std::to_string(m),
                                     init_uniform(rng, rows, static_cast<Eigen::Index>(rank * out), rows)));
    }
  }
  std::string tag() const override { return "lrtf"; }
  Var operator()(const FusionInput& in) const override { return lrtf_fuse(detail::vectors(in), f_); }
  std::size_t out_dim() const override { return f_.out_dim; }
  std::size_t param_count() const override {
    std::size_t n = 0;
    for (std::size_t d : dims_) n += (d + 1) * f_.rank * f_.out_dim;
    return n;
  }
  const LrtfFactors& factors() const { return f_; }

 private:
  std::vector<std::size_t> dims_;
  LrtfFactors f_;
};

class MultiplicativeFusion : public Fusion {
 public:
  MultiplicativeFusion(std::vector<std::size_t> dims, MiMode mode, std::size_t out, ParamStore& store, Rng& rng)
      : dims_(std::move(dims)) {
    detail::require_two(dims_, tag_for(mode));
    const auto d1 = static_cast<Eigen::Index>(dims_[0]);
    const auto d2 = static_cast<Eigen::Index>(dims_[1]);
    p_.mode = mode;
    Eigen::Index o = 0;
    switch (mode) {
      case MiMode::kMatrix:
        if (out < 1) throw ConfigError("mi-matrix out_dim must be >= 1", "fusion.out_dim");
        o = static_cast<Eigen::Index>(out);
        p_.w = store.add("fusion.W", init_uniform(rng, d1, o * d2, d1 * d2));
        p_.u = store.add("fusion.U", init_uniform(rng, d1, o, d1));
        p_.v = store.add("fusion.V", init_uniform(rng, d2, o, d2));
        p_.b = store.add("fusion.b", init_uniform(rng, 1, o, d1));
        break;
      case MiMode::kVector:
        p_.w = store.add("fusion.W", init_uniform(rng, d2, d1, d2));
        p_.u = store.add("fusion.U", Mat::Ones(1, d1));
        p_.v = store.add("fusion.V", init_uniform(rng, d2, d1, d2));
        p_.b = store.add("fusion.b", Mat::Zero(1, d1));
        break;
      case MiMode::kScalar:
        p_.w = store.add("fusion.W", init_uniform(rng, d2, 1, d2));
        p_.u = store.add("fusion.U", Mat::Ones(1, 1));
        p_.v = store.add("fusion.V", init_uniform(rng, d2, 1, d2));
        p_.b = store.add("fusion.b", Mat::Zero(1, 1));
        break;
    }
    out_ = mode == MiMode::kMatrix ? out : dims_[0];
  }

  static std::string tag_for(MiMode m) {
    return m == MiMode::kMatrix ? "mi-matrix" : m == MiMode::kVector ? "mi-vector" : "mi-scalar";
  }
  std::string tag() const override { return tag_for(p_.mode); }
  Var operator()(const FusionInput& in) const override { return mi_fuse(in.reps[0].vec, in.reps[1].vec, p_); }
  std::size_t out_dim() const override { return out_; }
  std::size_t param_count() const override {
    const std::size_t d1 = dims_[0], d2 = dims_[1];
    switch (p_.mode) {
      case MiMode::kMatrix: return d1 * out_ * d2 + d1 * out_ + d2 * out_ + out_;
      case MiMode::kVector: return 2 * d2 * d1 + 2 * d1;
      case MiMode::kScalar: return 2 * d2 + 2;
    }
    return 0;
  }
  const MiParams& params() const { return p_; }

 private:
  std::vector<std::size_t> dims_;
  MiParams p_;
  std::size_t out_ = 0;
};

class FilmFusion : public Fusion {
 public:
  FilmFusion(std::vector<std::size_t> dims, std::vector<std::size_t> hidden, ParamStore& store, Rng& rng)
      : dims_(std::move(dims)), hidden_(std::move(hidden)) {
    detail::require_two(dims_, "film");
    p_.gamma = Mlp(store, "fusion.gamma", dims_[1], hidden_, dims_[0], rng, Activation::kRelu);
    p_.beta = Mlp(store, "fusion.beta", dims_[1], hidden_, dims_[0], rng, Activation::kRelu);
  }
  std::string tag() const override { return "film"; }
  Var operator()(const FusionInput& in) const override { return film_fuse(in.reps[0].vec, in.reps[1].vec, p_); }
  std::size_t out_dim() const override { return dims_[0]; }
  std::size_t param_count() const override { return 2 * Mlp::param_count(dims_[1], hidden_, dims_[0]); }
  const FilmParams& params() const { return p_; }

 private:
  std::vector<std::size_t> dims_;
  std::vector<std::size_t> hidden_;
  FilmParams p_;
};

class GateFusion : public Fusion {
 public:
  GateFusion(std::vector<std::size_t> dims, GateVariant variant, std::size_t attn_dim, ParamStore& store, Rng& rng)
      : dims_(std::move(dims)), attn_(attn_dim) {
    detail::require_two(dims_, "nlgate");
    g_.variant = variant;
    const std::size_t d1 = dims_[0], d2 = dims_[1];
    if (variant == GateVariant::kDense) {
      g_.dense = Linear(store, "fusion.gate", d2, d1, rng);
      return;
    }
    if (attn_ < 1) throw ConfigError("nlgate attn_dim must be >= 1", "fusion.attn_dim");
    const auto a = static_cast<Eigen::Index>(attn_);
    g_.embed = store.add("fusion.embed", init_uniform(rng, static_cast<Eigen::Index>(d2), a, 1));
    g_.offset = store.add("fusion.offset", init_uniform(rng, static_cast<Eigen::Index>(d2), a, a));
    g_.query = store.add("fusion.query", init_uniform(rng, 1, a, a));
    g_.key = Linear(store, "fusion.key", attn_, attn_, rng);
    g_.value = Linear(store, "fusion.value", attn_, attn_, rng);
    g_.out = Linear(store, "fusion.out", attn_, d1, rng);
  }
  std::string tag() const override { return "nlgate"; }
  Var operator()(const FusionInput& in) const override { return gate_fuse(in.reps[0].vec, in.reps[1].vec, g_); }
  std::size_t out_dim() const override { return dims_[0]; }
  std::size_t param_count() const override {
    const std::size_t d1 = dims_[0], d2 = dims_[1], a = attn_;
    if (g_.variant == GateVariant::kDense) return Linear::param_count(d2, d1);
    return 2 * d2 * a + a + 2 * Linear::param_count(a, a) + Linear::param_count(a, d1);
  }
  const GateNetwork& gate() const { return g_; }

 private:
  std::vector<std::size_t> dims_;
  std::size_t attn_;
  GateNetwork g_;
};

struct MultOptions {
  std::size_t d_model = 8;
  std::size_t heads = 1;
  std::size_t ff_dim = 0;  // 0: 2 * d_model
  bool positional_encoding = true;
  // Modality groups for M > 3; modalities in a group are early-fused along
  // features and must share a step count.
  std::vector<std::vector<std::size_t>> groups;
};

class CrossmodalFusion : public Fusion {
 public:
  CrossmodalFusion(std::vector<std::size_t> seq_dims, MultOptions opt, ParamStore& store, Rng& rng)
      : dims_(std::move(seq_dims)), opt_(std::move(opt)) {
    const std::size_t m = dims_.size();
    if (m < 2) throw ConfigError("mult fusion needs at least two modalities", "fusion.tag");
    if (opt_.d_model < 1) throw ConfigError("mult d_model must be >= 1", "fusion.d_model");
    if (opt_.heads < 1 || opt_.d_model % opt_.heads != 0) {
      throw ConfigError("mult head count must divide d_model", "fusion.heads");
    }
    if (opt_.ff_dim == 0) opt_.ff_dim = 2 * opt_.d_model;
    if (opt_.groups.empty()) {
      if (m > 3) {
        throw ConfigError("mult with more than 3 modalities needs an explicit 'groups' clustering", "fusion.groups");
      }
      for (std::size_t i = 0; i < m; ++i) opt_.groups.push_back({i});
    }
    if (opt_.groups.size() < 2 || opt_.groups.size() > 3) {
      throw ConfigError("mult groups must number 2 or 3", "fusion.groups");
    }
    std::vector<bool> seen(m, false);
    for (const auto& g : opt_.groups) {
      if (g.empty()) throw ConfigError("mult groups must be non-empty", "fusion.groups");
      std::size_t width = 0;
      for (std::size_t i : g) {
        if (i >= m || seen[i]) throw ConfigError("mult groups must partition the modalities", "fusion.groups");
        seen[i] = true;
        width += dims_[i];
      }
      group_widths_.push_back(width);
    }
    for (bool s : seen) {
      if (!s) throw ConfigError("mult groups must cover every modality", "fusion.groups");
    }
    const std::size_t d = opt_.d_model, ff = opt_.ff_dim;
    for (std::size_t g = 0; g < group_widths_.size(); ++g) {
      proj_.emplace_back(store, "fusion.proj" + std::to_string(g), group_widths_[g], d, rng);
    }
    pairs_ = crossmodal_pairs(group_widths_.size());
    for (const auto& [a, b] : pairs_) {
      const std::string n = "fusion.cm" + std::to_string(a) + std::to_string(b);
      blocks_.push_back({Linear(store, n + ".q", d, d, rng), Linear(store, n + ".k", d, d, rng),
                         Linear(store, n + ".v", d, d, rng), Linear(store, n + ".o", d, d, rng),
                         Linear(store, n + ".ff1", d, ff, rng), Linear(store, n + ".ff2", ff, d, rng)});
    }
  }

  std::string tag() const override { return "mult"; }
  bool needs_sequences() const override { return true; }
  std::size_t out_dim() const override { return pairs_.size() * opt_.d_model; }

  std::size_t param_count() const override {
    const std::size_t d = opt_.d_model, ff = opt_.ff_dim;
    std::size_t n = 0;
    for (std::size_t w : group_widths_) n += Linear::param_count(w, d);
    return n + pairs_.size() * (4 * Linear::param_count(d, d) + Linear::param_count(d, ff) + Linear::param_count(ff, d));
  }

  // Projected, position-encoded group sequences.
  std::vector<SequenceBatch> project(const FusionInput& in) const {
    std::vector<SequenceBatch> out;
    for (std::size_t g = 0; g < opt_.groups.size(); ++g) {
      std::vector<Var> parts;
      Eigen::Index steps = -1, batch = 0;
      for (std::size_t i : opt_.groups[g]) {
        const EncoderOutput& r = in.reps[i];
        if (!r.seq.defined()) {
          throw ConfigError("mult fusion needs sequence outputs; modality " + std::to_string(i) +
                                " encoder does not produce one", "encoders.kind");
        }
        if (steps >= 0 && r.steps != steps) throw ShapeError("modalities grouped for mult must share a step count");
        steps = r.steps;
        batch = r.batch;
        parts.push_back(r.seq);
      }
      Var h = proj_[g](parts.size() == 1 ? parts[0] : ad::concat_cols(parts));
      if (opt_.positional_encoding) {
        h = ad::add(h, ad::constant(sinusoidal_positions(steps, h.cols()).replicate(batch, 1)));
      }
      out.push_back({h, batch, steps});
    }
    return out;
  }

  Var operator()(const FusionInput& in) const override {
    const auto seqs = project(in);
    std::vector<Var> pooled;
    for (std::size_t p = 0; p < pairs_.size(); ++p) {
      pooled.push_back(crossmodal_attend(seqs[pairs_[p].first], seqs[pairs_[p].second], blocks_[p],
                                         static_cast<Eigen::Index>(opt_.heads)));
    }
    return ad::concat_cols(pooled);
  }

  const std::vector<CrossmodalBlock>& blocks() const { return blocks_; }
  const MultOptions& options() const { return opt_; }

 private:
  std::vector<std::size_t> dims_;
  MultOptions opt_;
  std::vector<std::size_t> group_widths_;
  std::vector<Linear> proj_;
  std::vector<std::pair<std::size_t, std::size_t>> pairs_;
  std::vector<CrossmodalBlock> blocks_;
};

// Per-modality widths seen by a fusion operator.
struct FusionDims {
  std::vector<std::size_t> rep;  // encoder out_dim (per step for sequences)
  std::vector<std::size_t> raw;  // flattened raw input width
};

// Builds the operator named by `tag`. Recognized params: cap (tf), rank and
// out_dim (lrtf, mi-matrix), hidden (film), variant and attn_dim (nlgate),
// d_model, heads, ff_dim, positional_encoding, groups (mult).
inline std::unique_ptr<Fusion> make_fusion(const std::string& tag, const nlohmann::json& params, const FusionDims& dims,
                                           ParamStore& store, Rng& rng) {
  auto get = [&](const char* key, auto fallback) { return params.value(key, fallback); };
  if (tag == "lf") return std::make_unique<LateFusion>(dims.rep);
  if (tag == "ef") return std::make_unique<EarlyFusion>(dims.raw);
  if (tag == "tf") return std::make_unique<TensorFusion>(dims.rep, get("cap", kDefaultTensorCap));
  if (tag == "lrtf") {
    return std::make_unique<LowRankTensorFusion>(dims.rep, get("rank", std::size_t{4}), get("out_dim", std::size_t{16}),
                                                 store, rng);
  }
  if (tag == "mi-matrix") {
    return std::make_unique<MultiplicativeFusion>(dims.rep, MiMode::kMatrix, get("out_dim", std::size_t{16}), store, rng);
  }
  if (tag == "mi-vector") return std::make_unique<MultiplicativeFusion>(dims.rep, MiMode::kVector, 0, store, rng);
  if (tag == "mi-scalar") return std::make_unique<MultiplicativeFusion>(dims.rep, MiMode::kScalar, 0, store, rng);
  if (tag == "film") {
    return std::make_unique<FilmFusion>(dims.rep, get("hidden", std::vector<std::size_t>{16}), store, rng);
  }
  if (tag == "nlgate") {
    const std::string variant = get("variant", std::string("query-key-value"));
    GateVariant v;
    if (variant == "dense") {
      v = GateVariant::kDense;
    } else if (variant == "query-key-value") {
      v = GateVariant::kQueryKeyValue;
    } else {
      throw ConfigError("unknown nlgate variant '" + variant + "'", "fusion.variant");
    }
    return std::make_unique<GateFusion>(dims.rep, v, get("attn_dim", std::size_t{8}), store, rng);
  }
  if (tag == "mult") {
    MultOptions o;
    o.d_model = get("d_model", o.d_model);
    o.heads = get("heads", o.heads);
    o.ff_dim = get("ff_dim", o.ff_dim);
    o.positional_encoding = get("positional_encoding", o.positional_encoding);
    o.groups = get("groups", o.groups);
    return std::make_unique<CrossmodalFusion>(dims.rep, std::move(o), store, rng);
  }
  throw ConfigError("unknown fusion tag '" + tag + "'", "fusion.tag");
}

}  // namespace mmfuse
