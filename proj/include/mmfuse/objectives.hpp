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

// Loss library: task losses, alignment and contrastive terms, MMD, cycle
// reconstruction and weighted composition.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmfuse/core/error.hpp"
#include "mmfuse/core/nn.hpp"
#include "mmfuse/core/ops.hpp"
#include "mmfuse/core/random.hpp"
#include "mmfuse/synthdata.hpp"

namespace mmfuse {

inline constexpr double kLossEpsilon = 1e-8;

// Supervised targets of one minibatch.
struct Targets {
  TaskKind kind = TaskKind::kClassification;
  std::vector<std::size_t> classes;  // classification
  Mat values;                        // regression, B x dim

  std::size_t size() const {
    return kind == TaskKind::kClassification ? classes.size() : static_cast<std::size_t>(values.rows());
  }
};

// Mean cross-entropy over softmax logits, or mean squared error.
inline Var task_loss(const Var& out, const Targets& y) {
  if (y.kind == TaskKind::kClassification) return ad::cross_entropy(out, y.classes);
  for (Eigen::Index i = 0; i < out.value().size(); ++i) {
    if (!std::isfinite(out.value().data()[i])) throw DivergenceError("non-finite regression output");
  }
  return ad::mse(out, ad::constant(y.values));
}

enum class AuxKind { kToLabel, kToJoint, kDecoder };

// Auxiliary map g used by alignment objectives; training-only.
struct AuxiliaryHead {
  AuxKind kind = AuxKind::kToLabel;
  Mlp net;

  AuxiliaryHead() = default;
  AuxiliaryHead(AuxKind k, ParamStore& store, const std::string& name, std::size_t in,
                const std::vector<std::size_t>& hidden, std::size_t out, Rng& rng)
      : kind(k), net(store, name, in, hidden, out, rng) {}

  Var operator()(const Var& z) const { return net(z); }
};

// Negated mean over output dimensions of the Pearson correlation, across the
// batch, between a = g_1(z_1) and b = g_2(z_2). Dimensions whose variance in
// either input falls below 1e-8 contribute 0.
inline Var cca_loss(const Var& a, const Var& b) {
  using namespace ad;
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("cca_loss inputs must have equal shapes");
  const Eigen::Index n = a.rows(), d = a.cols();
  if (n < 2) throw ShapeError("cca_loss needs a batch of at least 2");
  auto center = [n](const Var& x) { return sub(x, repeat_rows(scale(col_sums(x), 1.0 / static_cast<double>(n)), n)); };
  const Var ac = center(a), bc = center(b);
  const Var cov = col_sums(hadamard(ac, bc));
  const Var va = col_sums(square(ac));
  const Var vb = col_sums(square(bc));
  Mat mask(1, d), pad(1, d);
  for (Eigen::Index j = 0; j < d; ++j) {
    const bool ok = va.value()(0, j) / static_cast<double>(n) >= kLossEpsilon &&
                    vb.value()(0, j) / static_cast<double>(n) >= kLossEpsilon;
    mask(0, j) = ok ? 1.0 : 0.0;
    pad(0, j) = ok ? 0.0 : 1.0;
  }
  const Var denom = ad::sqrt(add(hadamard(va, vb), constant(pad)));
  const Var corr = hadamard(divide(cov, denom), constant(mask));
  return scale(sum(corr), -1.0 / static_cast<double>(d));
}

// Cosine similarity per row with both norms floored at 1e-8.
inline Var row_cosine(const Var& a, const Var& b) {
  using namespace ad;
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("cosine inputs must have equal shapes");
  const Var dot = row_sums(hadamard(a, b));
  const Var na = clamp_min(row_norms(a), kLossEpsilon);
  const Var nb = clamp_min(row_norms(b), kLossEpsilon);
  return divide(dot, hadamard(na, nb));
}

// Batch mean of (1 - cos(z_mm, p_1)) + (1 - cos(z_mm, p_2)), where p_m are
// the joint-space projections g_m(z_m).
inline Var refnet_contrastive_loss(const Var& zmm, const Var& p1, const Var& p2) {
  using namespace ad;
  const Var terms = add(add_scalar(scale(row_cosine(zmm, p1), -1.0), 1.0), add_scalar(scale(row_cosine(zmm, p2), -1.0), 1.0));
  return mean(terms);
}

// Gaussian-kernel bandwidth h with h^2 = median pairwise squared distance of
// the pooled samples. At most `max_points` rows from each set are used.
inline double median_heuristic_bandwidth(const Mat& x, const Mat& y, Eigen::Index max_points = 500) {
  Mat pooled(std::min(x.rows(), max_points) + std::min(y.rows(), max_points), x.cols());
  pooled << x.topRows(std::min(x.rows(), max_points)), y.topRows(std::min(y.rows(), max_points));
  std::vector<double> d2;
  d2.reserve(static_cast<std::size_t>(pooled.rows() * (pooled.rows() - 1) / 2));
  for (Eigen::Index i = 0; i < pooled.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < pooled.rows(); ++j) d2.push_back((pooled.row(i) - pooled.row(j)).squaredNorm());
  }
  if (d2.empty()) return 1.0;
  auto mid = d2.begin() + static_cast<std::ptrdiff_t>(d2.size() / 2);
  std::nth_element(d2.begin(), mid, d2.end());
  const double h2 = *mid;
  return h2 > 0.0 ? std::sqrt(h2) : 1.0;
}

// Squared MMD with a Gaussian kernel. bandwidth <= 0 is an error; pass
// median_heuristic_bandwidth for the default.
inline Var mmd(const Var& q, const Var& p, double bandwidth, bool unbiased = true) {
  return ad::mmd2(q, p, bandwidth, unbiased);
}

enum class CycleNorm {
  kPerSample,   // ||x - x_hat||_2 per sample, averaged over the batch
  kPerElement,  // same, divided by sqrt(width) so the scale is shape-independent
};

inline Var reconstruction_norm(const Var& x, const Var& xhat, CycleNorm norm = CycleNorm::kPerSample) {
  if (x.rows() != xhat.rows() || x.cols() != xhat.cols()) throw ShapeError("reconstruction inputs must have equal shapes");
  Var r = ad::mean(ad::row_norms(ad::sub(x, xhat)));
  if (norm == CycleNorm::kPerElement) r = ad::scale(r, 1.0 / std::sqrt(static_cast<double>(x.cols())));
  return r;
}

inline Var mctn_cycle_loss(const Var& x1, const Var& x2, const Var& x1hat, const Var& x2hat,
                           CycleNorm norm = CycleNorm::kPerSample) {
  return ad::add(reconstruction_norm(x1, x1hat, norm), reconstruction_norm(x2, x2hat, norm));
}

struct LossTerm {
  std::string name;
  double weight = 1.0;
  Var value;
};

class CompositeObjective {
 public:
  void add(std::string name, double weight, Var value) {
    if (!(weight >= 0.0) || !std::isfinite(weight)) throw ConfigError("loss weight for '" + name + "' must be >= 0", "objective");
    if (value.rows() != 1 || value.cols() != 1) throw ShapeError("loss term '" + name + "' is not a scalar");
    if (!std::isfinite(value.item())) throw DivergenceError("loss term '" + name + "' is not finite");
    terms_.push_back({std::move(name), weight, std::move(value)});
  }

  const std::vector<LossTerm>& terms() const { return terms_; }

  Var total() const {
    if (terms_.empty()) throw ConfigError("objective has no terms", "objective");
    Var t = ad::scale(terms_[0].value, terms_[0].weight);
    for (std::size_t i = 1; i < terms_.size(); ++i) t = ad::add(t, ad::scale(terms_[i].value, terms_[i].weight));
    return t;
  }

  double value_of(const std::string& name) const {
    for (const auto& t : terms_) {
      if (t.name == name) return t.value.item();
    }
    throw ConfigError("objective has no term '" + name + "'", "objective");
  }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& t : terms_) j.push_back({{"name", t.name}, {"weight", t.weight}, {"value", t.value.item()}});
    return j;
  }

 private:
  std::vector<LossTerm> terms_;
};

// Samples from the unit Gaussian prior, rows x cols.
inline Mat unit_gaussian(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

struct MfmInputs {
  std::vector<Var> x;      // flattened inputs, B x d_i
  std::vector<Var> x_hat;  // decoder outputs g_i(z_i, z_y)
  std::vector<Var> z;      // factors z_1..z_M
  Var z_y;
  Var logits;              // g_y(z_y)
  Targets y;
};

// Sum of per-modality reconstruction norms, the task loss and lambda times the
// MMD between latent codes [z_1..z_M, z_y] and a unit Gaussian sample of the
// same size. `prior_rng` draws that sample. bandwidth <= 0 selects the median
// heuristic, which is computed from values and not differentiated.
inline CompositeObjective mfm_objective(const MfmInputs& in, double lambda, Rng& prior_rng, double bandwidth = 0.0) {
  if (!(lambda >= 0.0)) throw ConfigError("mfm lambda must be >= 0", "objective.lambda");
  if (in.x.size() != in.x_hat.size() || in.x.size() != in.z.size()) {
    throw ShapeError("mfm needs one decoder and one factor per modality");
  }
  CompositeObjective obj;
  for (std::size_t i = 0; i < in.x.size(); ++i) obj.add("rec" + std::to_string(i), 1.0, reconstruction_norm(in.x[i], in.x_hat[i]));
  obj.add("task", 1.0, task_loss(in.logits, in.y));
  if (lambda > 0.0) {
    std::vector<Var> codes = in.z;
    codes.push_back(in.z_y);
    const Var q = ad::concat_cols(codes);
    const Var p = ad::constant(unit_gaussian(prior_rng, q.rows(), q.cols()));
    const double h = bandwidth > 0.0 ? bandwidth : median_heuristic_bandwidth(q.value(), p.value());
    obj.add("prior", lambda, mmd(q, p, h, true));
  }
  return obj;
}

// One configured objective term: {"name": ..., "weight": ...}.
struct ObjectiveTermSpec {
  std::string name;
  double weight = 1.0;
};

inline std::vector<ObjectiveTermSpec> objective_from_json(const nlohmann::json& j) {
  std::vector<ObjectiveTermSpec> out;
  if (j.is_null()) return {{"task", 1.0}};
  if (!j.is_array() || j.empty()) throw ConfigError("objective must be a non-empty list of {name, weight}", "objective");
  for (const auto& t : j) {
    ObjectiveTermSpec s{t.at("name").get<std::string>(), t.value("weight", 1.0)};
    if (!(s.weight >= 0.0)) throw ConfigError("objective weight must be >= 0", "objective");
    if (s.name != "task" && s.name != "cca" && s.name != "refnet") {
      throw ConfigError("unknown objective term '" + s.name + "'", "objective");
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace mmfuse
