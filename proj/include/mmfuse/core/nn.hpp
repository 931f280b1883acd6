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

#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "mmfuse/core/ops.hpp"
#include "mmfuse/core/random.hpp"

namespace mmfuse {

using ad::Var;

enum class Activation { kIdentity, kTanh, kRelu, kSigmoid };

inline Var activate(const Var& x, Activation act) {
  switch (act) {
    case Activation::kIdentity: return x;
    case Activation::kTanh: return ad::tanh(x);
    case Activation::kRelu: return ad::relu(x);
    case Activation::kSigmoid: return ad::sigmoid(x);
  }
  return x;
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "identity" || s == "linear") return Activation::kIdentity;
  if (s == "tanh") return Activation::kTanh;
  if (s == "relu") return Activation::kRelu;
  if (s == "sigmoid") return Activation::kSigmoid;
  throw ConfigError("unknown activation '" + s + "'", "activation");
}

// Ordered, named collection of trainable leaves. Copies share the underlying
// parameters; use snapshot()/restore() for value copies.
class ParamStore {
 public:
  Var add(std::string name, Mat init) {
    Var v = ad::parameter(std::move(init));
    names_.push_back(std::move(name));
    vars_.push_back(v);
    return v;
  }

  void append(const ParamStore& other, const std::string& prefix = {}) {
    for (std::size_t i = 0; i < other.size(); ++i) {
      names_.push_back(prefix + other.names_[i]);
      vars_.push_back(other.vars_[i]);
    }
  }

  std::size_t size() const { return vars_.size(); }
  bool empty() const { return vars_.empty(); }
  const std::vector<std::string>& names() const { return names_; }
  const std::vector<Var>& vars() const { return vars_; }
  std::vector<Var>& vars() { return vars_; }

  // Total number of scalar parameters.
  std::size_t count() const {
    std::size_t n = 0;
    for (const Var& v : vars_) n += static_cast<std::size_t>(v.value().size());
    return n;
  }

  std::vector<Mat> snapshot() const {
    std::vector<Mat> out;
    out.reserve(vars_.size());
    for (const Var& v : vars_) out.push_back(v.value());
    return out;
  }

  void restore(const std::vector<Mat>& values) {
    if (values.size() != vars_.size()) throw ShapeError("ParamStore::restore: parameter count mismatch");
    for (std::size_t i = 0; i < vars_.size(); ++i) {
      if (values[i].rows() != vars_[i].rows() || values[i].cols() != vars_[i].cols()) {
        throw ShapeError("ParamStore::restore: shape mismatch for " + names_[i]);
      }
      vars_[i].mutable_value() = values[i];
    }
  }

  void zero_grad() {
    for (Var& v : vars_) v.zero_grad();
  }

 private:
  std::vector<std::string> names_;
  std::vector<Var> vars_;
};

// Uniform fan-in initialization U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
inline Mat init_uniform(Rng& rng, Eigen::Index rows, Eigen::Index cols, Eigen::Index fan_in) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<Eigen::Index>(fan_in, 1)));
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-bound, bound);
  return m;
}

// y = x W + b, with W stored in x out layout.
struct Linear {
  Var weight;
  Var bias;

  Linear() = default;
  Linear(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
    const auto i = static_cast<Eigen::Index>(in);
    const auto o = static_cast<Eigen::Index>(out);
    weight = store.add(name + ".weight", init_uniform(rng, i, o, i));
    bias = store.add(name + ".bias", init_uniform(rng, 1, o, i));
  }

  Var operator()(const Var& x) const { return ad::add_row(ad::matmul(x, weight), bias); }
  std::size_t in_dim() const { return static_cast<std::size_t>(weight.rows()); }
  std::size_t out_dim() const { return static_cast<std::size_t>(weight.cols()); }
  static std::size_t param_count(std::size_t in, std::size_t out) { return in * out + out; }
};

// Stack of Linear layers. `hidden` activation follows every layer except the
// last, which uses `output`.
struct Mlp {
  std::vector<Linear> layers;
  Activation hidden = Activation::kTanh;
  Activation output = Activation::kIdentity;

  Mlp() = default;
  Mlp(ParamStore& store, const std::string& name, std::size_t in,
      const std::vector<std::size_t>& hidden_dims, std::size_t out, Rng& rng,
      Activation hidden_act = Activation::kTanh, Activation output_act = Activation::kIdentity)
      : hidden(hidden_act), output(output_act) {
    std::size_t prev = in;
    for (std::size_t i = 0; i < hidden_dims.size(); ++i) {
      layers.emplace_back(store, name + "." + std::to_string(i), prev, hidden_dims[i], rng);
      prev = hidden_dims[i];
    }
    layers.emplace_back(store, name + "." + std::to_string(hidden_dims.size()), prev, out, rng);
  }

  Var operator()(const Var& x) const {
    Var h = x;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      h = layers[i](h);
      h = activate(h, i + 1 == layers.size() ? output : hidden);
    }
    return h;
  }

  std::size_t in_dim() const { return layers.front().in_dim(); }
  std::size_t out_dim() const { return layers.back().out_dim(); }

  static std::size_t param_count(std::size_t in, const std::vector<std::size_t>& hidden_dims, std::size_t out) {
    std::size_t n = 0;
    std::size_t prev = in;
    for (std::size_t h : hidden_dims) {
      n += Linear::param_count(prev, h);
      prev = h;
    }
    return n + Linear::param_count(prev, out);
  }
};

}  // namespace mmfuse
