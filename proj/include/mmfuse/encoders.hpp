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

// Unimodal encoder zoo. Every encoder maps a batch of one modality to a
// vector representation; temporal kinds also expose the per-step sequence.

#pragma once

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

enum class EncoderKind { kMlp, kRecurrent, kConvolutional, kTransformer, kDeepSet, kIdentity };

inline std::string to_string(EncoderKind k) {
  switch (k) {
    case EncoderKind::kMlp: return "mlp";
    case EncoderKind::kRecurrent: return "recurrent";
    case EncoderKind::kConvolutional: return "convolutional";
    case EncoderKind::kTransformer: return "transformer";
    case EncoderKind::kDeepSet: return "deep-set";
    case EncoderKind::kIdentity: return "identity";
  }
  return "unknown";
}

inline EncoderKind encoder_kind_from_string(const std::string& s) {
  if (s == "mlp") return EncoderKind::kMlp;
  if (s == "recurrent") return EncoderKind::kRecurrent;
  if (s == "convolutional") return EncoderKind::kConvolutional;
  if (s == "transformer") return EncoderKind::kTransformer;
  if (s == "deep-set") return EncoderKind::kDeepSet;
  if (s == "identity") return EncoderKind::kIdentity;
  throw ConfigError("unknown encoder kind '" + s + "'", "encoders.kind");
}

struct EncoderSpec {
  EncoderKind kind = EncoderKind::kMlp;
  ModalityKind modality = ModalityKind::kStaticVector;
  Shape in_shape;
  std::vector<std::size_t> hidden_dims;
  std::size_t out_dim = 0;  // identity: 0 resolves to the natural width
  std::uint64_t seed = 0;
  bool positional_encoding = true;  // transformer only
  std::size_t kernel_size = 3;      // convolutional only
};

inline nlohmann::json encoder_spec_to_json(const EncoderSpec& s) {
  return {{"kind", to_string(s.kind)},     {"modality", to_string(s.modality)},
          {"in_shape", s.in_shape},        {"hidden_dims", s.hidden_dims},
          {"out_dim", s.out_dim},          {"seed", s.seed},
          {"positional_encoding", s.positional_encoding}, {"kernel_size", s.kernel_size}};
}

// Fields absent from `j` keep their defaults; the modality kind and input
// shape normally come from the dataset.
inline EncoderSpec encoder_spec_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("encoder entry must be an object", "encoders");
  EncoderSpec s;
  s.kind = encoder_kind_from_string(j.value("kind", std::string("mlp")));
  if (j.contains("modality")) s.modality = modality_kind_from_string(j.at("modality").get<std::string>());
  s.in_shape = j.value("in_shape", s.in_shape);
  s.hidden_dims = j.value("hidden_dims", s.hidden_dims);
  s.out_dim = j.value("out_dim", s.out_dim);
  s.seed = j.value("seed", s.seed);
  s.positional_encoding = j.value("positional_encoding", s.positional_encoding);
  s.kernel_size = j.value("kernel_size", s.kernel_size);
  return s;
}

// One modality of a minibatch.
//   fixed-shape kinds: data is B x prod(shape)
//   temporal:          data is (B*T) x d, sample-major, steps = T
//   set:               data is (sum n_i) x e, sample i owns rows [starts[i], starts[i+1])
struct ModalityBatch {
  Var data;
  Eigen::Index batch = 0;
  Eigen::Index steps = 0;
  std::vector<Eigen::Index> starts;
};

inline ModalityBatch make_batch(const ModalitySpec& spec, const SampleSet& set, const std::vector<std::size_t>& rows,
                                std::size_t m) {
  ModalityBatch out;
  out.batch = static_cast<Eigen::Index>(rows.size());
  if (spec.kind == ModalityKind::kSet) {
    const auto e = static_cast<Eigen::Index>(spec.shape[1]);
    Eigen::Index total = 0;
    out.starts.push_back(0);
    for (std::size_t r : rows) {
      total += static_cast<Eigen::Index>(set[r].modalities[m].rows());
      out.starts.push_back(total);
    }
    Mat x(total, e);
    Eigen::Index k = 0;
    for (std::size_t r : rows) {
      for (float v : set[r].modalities[m].data) x.data()[k++] = v;
    }
    out.data = ad::constant(std::move(x));
    return out;
  }
  const std::size_t width = shape_size(spec.shape);
  Mat x(out.batch, static_cast<Eigen::Index>(width));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const Array& a = set[rows[i]].modalities[m];
    if (a.shape != spec.shape) {
      throw ShapeError("modality '" + spec.name + "' sample has shape " + shape_string(a.shape) + ", expected " +
                       shape_string(spec.shape));
    }
    for (std::size_t j = 0; j < width; ++j) x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = a.data[j];
  }
  if (spec.temporal()) {
    out.steps = static_cast<Eigen::Index>(spec.shape[0]);
    const auto d = static_cast<Eigen::Index>(spec.shape[1]);
    out.data = ad::constant(Eigen::Map<const Mat>(x.data(), out.batch * out.steps, d));
  } else {
    out.data = ad::constant(std::move(x));
  }
  return out;
}

// B x (T*d) view of a fixed-shape batch; sets have no flat view.
inline Var flatten_batch(const ModalityBatch& b) {
  if (!b.starts.empty()) throw ShapeError("set modalities cannot be flattened");
  if (b.steps == 0) return b.data;
  return ad::reshape(b.data, b.batch, b.steps * b.data.cols());
}

struct EncoderOutput {
  Var vec;                  // B x out_dim
  Var seq;                  // (B*T) x out_dim for temporal kinds, else undefined
  Eigen::Index batch = 0;
  Eigen::Index steps = 0;
};

// Fixed sinusoidal position table, steps x width.
inline Mat sinusoidal_positions(Eigen::Index steps, Eigen::Index width) {
  Mat pe(steps, width);
  for (Eigen::Index t = 0; t < steps; ++t) {
    for (Eigen::Index c = 0; c < width; ++c) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (c / 2)) / static_cast<double>(width));
      pe(t, c) = (c % 2 == 0) ? std::sin(static_cast<double>(t) * freq) : std::cos(static_cast<double>(t) * freq);
    }
  }
  return pe;
}

// Row indices selecting step t of every sample in a sample-major sequence.
inline std::vector<Eigen::Index> step_rows(Eigen::Index batch, Eigen::Index steps, Eigen::Index t) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(batch));
  for (Eigen::Index b = 0; b < batch; ++b) idx[static_cast<std::size_t>(b)] = b * steps + t;
  return idx;
}

inline std::vector<Eigen::Index> uniform_starts(Eigen::Index batch, Eigen::Index per) {
  std::vector<Eigen::Index> s(static_cast<std::size_t>(batch + 1));
  for (Eigen::Index b = 0; b <= batch; ++b) s[static_cast<std::size_t>(b)] = b * per;
  return s;
}

// Gated recurrent cell with zero initial state.
struct GruCell {
  Linear wz, wr, wn;  // input maps, carry the biases
  Var uz, ur, un;     // state maps

  GruCell() = default;
  GruCell(ParamStore& store, const std::string& name, std::size_t in, std::size_t hidden, Rng& rng) {
    const auto h = static_cast<Eigen::Index>(hidden);
    wz = Linear(store, name + ".wz", in, hidden, rng);
    wr = Linear(store, name + ".wr", in, hidden, rng);
    wn = Linear(store, name + ".wn", in, hidden, rng);
    uz = store.add(name + ".uz", init_uniform(rng, h, h, h));
    ur = store.add(name + ".ur", init_uniform(rng, h, h, h));
    un = store.add(name + ".un", init_uniform(rng, h, h, h));
  }

  // Returns the (B*T) x hidden state sequence, sample-major.
  Var run(const Var& x, Eigen::Index batch, Eigen::Index steps) const {
    using namespace ad;
    const Var xz = wz(x), xr = wr(x), xn = wn(x);
    Var h = constant(Mat::Zero(batch, uz.rows()));
    std::vector<Var> states;
    for (Eigen::Index t = 0; t < steps; ++t) {
      const auto rows = step_rows(batch, steps, t);
      const Var z = sigmoid(add(gather_rows(xz, rows), matmul(h, uz)));
      const Var r = sigmoid(add(gather_rows(xr, rows), matmul(h, ur)));
      const Var n = tanh(add(gather_rows(xn, rows), matmul(hadamard(r, h), un)));
      // h' = n + z * (h - n)
      h = add(n, hadamard(z, sub(h, n)));
      states.push_back(h);
    }
    // Time-major concat, then reorder to sample-major.
    const Var time_major = concat_rows(states);
    std::vector<Eigen::Index> order(static_cast<std::size_t>(batch * steps));
    for (Eigen::Index b = 0; b < batch; ++b) {
      for (Eigen::Index t = 0; t < steps; ++t) order[static_cast<std::size_t>(b * steps + t)] = t * batch + b;
    }
    return gather_rows(time_major, order);
  }

  static std::size_t param_count(std::size_t in, std::size_t h) { return 3 * (in * h + h * h + h); }
};

class Encoder {
 public:
  Encoder() = default;

  // Validates the encoder settings against its modality and registers parameters under
  // `name` in `store`. Initialization is seeded by spec.seed only.
  Encoder(EncoderSpec spec, ParamStore& store, const std::string& name) : spec_(std::move(spec)) {
    validate_and_resolve();
    Rng rng(spec_.seed);
    const std::size_t out = spec_.out_dim;
    switch (spec_.kind) {
      case EncoderKind::kMlp:
        mlp_ = Mlp(store, name + ".mlp", shape_size(spec_.in_shape), spec_.hidden_dims, out, rng, Activation::kTanh,
                   Activation::kTanh);
        break;
      case EncoderKind::kRecurrent:
        gru_ = GruCell(store, name + ".gru", spec_.in_shape[1], out, rng);
        break;
      case EncoderKind::kConvolutional: {
        const std::size_t c = spec_.in_shape[2];
        const std::size_t k = spec_.kernel_size;
        conv_ = Linear(store, name + ".conv", k * k * c, conv_channels(), rng);
        proj_ = Linear(store, name + ".proj", conv_channels(), out, rng);
        break;
      }
      case EncoderKind::kTransformer: {
        proj_ = Linear(store, name + ".in", spec_.in_shape[1], out, rng);
        wq_ = Linear(store, name + ".q", out, out, rng);
        wk_ = Linear(store, name + ".k", out, out, rng);
        wv_ = Linear(store, name + ".v", out, out, rng);
        wo_ = Linear(store, name + ".o", out, out, rng);
        ff1_ = Linear(store, name + ".ff1", out, ff_width(), rng);
        ff2_ = Linear(store, name + ".ff2", ff_width(), out, rng);
        break;
      }
      case EncoderKind::kDeepSet: {
        std::vector<std::size_t> inner(spec_.hidden_dims.begin(),
                                       spec_.hidden_dims.empty() ? spec_.hidden_dims.end() : spec_.hidden_dims.end() - 1);
        mlp_ = Mlp(store, name + ".phi", spec_.in_shape[1], inner, phi_width(), rng, Activation::kTanh, Activation::kTanh);
        proj_ = Linear(store, name + ".rho", phi_width(), out, rng);
        break;
      }
      case EncoderKind::kIdentity:
        break;
    }
  }

  const EncoderSpec& spec() const { return spec_; }
  std::size_t out_dim() const { return spec_.out_dim; }
  bool produces_sequence() const {
    return spec_.kind == EncoderKind::kRecurrent || spec_.kind == EncoderKind::kTransformer ||
           (spec_.kind == EncoderKind::kIdentity && spec_.modality == ModalityKind::kTemporalSequence);
  }

  EncoderOutput operator()(const ModalityBatch& x) const {
    using namespace ad;
    EncoderOutput out;
    out.batch = x.batch;
    switch (spec_.kind) {
      case EncoderKind::kMlp:
        out.vec = mlp_(flatten_batch(x));
        break;
      case EncoderKind::kIdentity:
        if (x.steps > 0) {
          out.seq = x.data;
          out.steps = x.steps;
          out.vec = segment_mean(x.data, uniform_starts(x.batch, x.steps));
        } else {
          out.vec = x.data;
        }
        break;
      case EncoderKind::kRecurrent:
        out.seq = gru_.run(x.data, x.batch, x.steps);
        out.steps = x.steps;
        out.vec = gather_rows(out.seq, step_rows(x.batch, x.steps, x.steps - 1));
        break;
      case EncoderKind::kTransformer: {
        Var h = proj_(x.data);
        if (spec_.positional_encoding) {
          h = add(h, constant(sinusoidal_positions(x.steps, h.cols()).replicate(x.batch, 1)));
        }
        const Var a = batched_attention(wq_(h), wk_(h), wv_(h), x.batch, x.steps, x.steps, 1);
        h = add(h, wo_(a));
        h = add(h, ff2_(ad::tanh(ff1_(h))));
        out.seq = h;
        out.steps = x.steps;
        out.vec = gather_rows(h, step_rows(x.batch, x.steps, x.steps - 1));
        break;
      }
      case EncoderKind::kConvolutional:
        out.vec = conv_forward(x);
        break;
      case EncoderKind::kDeepSet: {
        const Var phi = mlp_(x.data);
        out.vec = ad::tanh(proj_(segment_sum_sorted(phi, x.starts)));
        break;
      }
    }
    return out;
  }

  // Closed-form parameter count for a spec.
  static std::size_t analytic_param_count(EncoderSpec spec) {
    Encoder probe;
    probe.spec_ = std::move(spec);
    probe.validate_and_resolve();
    const EncoderSpec& s = probe.spec_;
    const std::size_t out = s.out_dim;
    switch (s.kind) {
      case EncoderKind::kMlp: return Mlp::param_count(shape_size(s.in_shape), s.hidden_dims, out);
      case EncoderKind::kRecurrent: return GruCell::param_count(s.in_shape[1], out);
      case EncoderKind::kConvolutional: {
        const std::size_t f = probe.conv_channels();
        const std::size_t k = s.kernel_size;
        return k * k * s.in_shape[2] * f + f + f * out + out;
      }
      case EncoderKind::kTransformer: {
        const std::size_t ff = probe.ff_width();
        return (s.in_shape[1] * out + out) + 4 * (out * out + out) + (out * ff + ff) + (ff * out + out);
      }
      case EncoderKind::kDeepSet: {
        const std::size_t p = probe.phi_width();
        std::vector<std::size_t> inner(s.hidden_dims.begin(), s.hidden_dims.empty() ? s.hidden_dims.end() : s.hidden_dims.end() - 1);
        return Mlp::param_count(s.in_shape[1], inner, p) + p * out + out;
      }
      case EncoderKind::kIdentity: return 0;
    }
    return 0;
  }

 private:
  std::size_t conv_channels() const { return spec_.hidden_dims.empty() ? 8 : spec_.hidden_dims[0]; }
  std::size_t ff_width() const { return spec_.hidden_dims.empty() ? 2 * spec_.out_dim : spec_.hidden_dims[0]; }
  std::size_t phi_width() const { return spec_.hidden_dims.empty() ? spec_.out_dim : spec_.hidden_dims.back(); }

  void validate_and_resolve() {
    const ModalityKind mk = spec_.modality;
    const EncoderKind k = spec_.kind;
    const std::string what = "encoder kind " + to_string(k) + " cannot consume modality kind " + to_string(mk);
    const bool temporal = mk == ModalityKind::kTemporalSequence;
    if (k == EncoderKind::kDeepSet && mk != ModalityKind::kSet) throw ConfigError(what, "encoders.kind");
    if (k == EncoderKind::kConvolutional && mk != ModalityKind::kImageGrid) throw ConfigError(what, "encoders.kind");
    if ((k == EncoderKind::kRecurrent || k == EncoderKind::kTransformer) && !temporal) throw ConfigError(what, "encoders.kind");
    if (mk == ModalityKind::kSet && k != EncoderKind::kDeepSet) throw ConfigError(what, "encoders.kind");
    const std::size_t rank = (mk == ModalityKind::kStaticVector || mk == ModalityKind::kTable) ? 1
                             : mk == ModalityKind::kImageGrid                                 ? 3
                                                                                              : 2;
    if (spec_.in_shape.size() != rank) {
      throw ShapeError("encoder input shape " + shape_string(spec_.in_shape) + " does not fit modality kind " + to_string(mk));
    }
    for (std::size_t s : spec_.in_shape) {
      if (s == 0) throw ShapeError("encoder input shape has a zero dimension");
    }
    for (std::size_t h : spec_.hidden_dims) {
      if (h == 0) throw ConfigError("hidden dimensions must be positive", "encoders.hidden_dims");
    }
    if (k == EncoderKind::kIdentity) {
      const std::size_t natural = temporal ? spec_.in_shape[1] : shape_size(spec_.in_shape);
      if (spec_.out_dim == 0) spec_.out_dim = natural;
      if (spec_.out_dim != natural) {
        throw ConfigError("identity encoder out_dim must equal its input width " + std::to_string(natural), "encoders.out_dim");
      }
    }
    if (spec_.out_dim < 1) throw ConfigError("encoder out_dim must be >= 1", "encoders.out_dim");
    if (k == EncoderKind::kRecurrent && !spec_.hidden_dims.empty()) {
      throw ConfigError("recurrent encoders use out_dim as the state size; hidden_dims must be empty", "encoders.hidden_dims");
    }
    if (k == EncoderKind::kConvolutional) {
      if (spec_.kernel_size < 1 || spec_.kernel_size > spec_.in_shape[0] || spec_.kernel_size > spec_.in_shape[1]) {
        throw ConfigError("kernel_size must fit inside the image", "encoders.kernel_size");
      }
    }
  }

  // Valid k x k convolution via gathered pixel rows, tanh, mean pool, tanh(linear).
  Var conv_forward(const ModalityBatch& x) const {
    using namespace ad;
    const auto h = static_cast<Eigen::Index>(spec_.in_shape[0]);
    const auto w = static_cast<Eigen::Index>(spec_.in_shape[1]);
    const auto c = static_cast<Eigen::Index>(spec_.in_shape[2]);
    const auto k = static_cast<Eigen::Index>(spec_.kernel_size);
    const Eigen::Index oh = h - k + 1, ow = w - k + 1;
    const Var pixels = reshape(x.data, x.batch * h * w, c);
    std::vector<Var> taps;
    for (Eigen::Index di = 0; di < k; ++di) {
      for (Eigen::Index dj = 0; dj < k; ++dj) {
        std::vector<Eigen::Index> idx;
        idx.reserve(static_cast<std::size_t>(x.batch * oh * ow));
        for (Eigen::Index b = 0; b < x.batch; ++b) {
          for (Eigen::Index i = 0; i < oh; ++i) {
            for (Eigen::Index j = 0; j < ow; ++j) idx.push_back(b * h * w + (i + di) * w + (j + dj));
          }
        }
        taps.push_back(gather_rows(pixels, std::move(idx)));
      }
    }
    const Var maps = ad::tanh(conv_(concat_cols(taps)));
    const Var pooled = segment_mean(maps, uniform_starts(x.batch, oh * ow));
    return ad::tanh(proj_(pooled));
  }

  EncoderSpec spec_;
  Mlp mlp_;
  GruCell gru_;
  Linear conv_, proj_, wq_, wk_, wv_, wo_, ff1_, ff2_;
};

// Builds an encoder in a fresh store; convenience for standalone use.
struct EncoderModule {
  ParamStore params;
  Encoder encoder;

  explicit EncoderModule(const EncoderSpec& spec, const std::string& name = "enc") : encoder(spec, params, name) {}
};

inline EncoderModule init_params(const EncoderSpec& spec) { return EncoderModule(spec); }

inline EncoderOutput encode(const ModalityBatch& x, const EncoderModule& m) { return m.encoder(x); }

inline void save_encoder(const std::filesystem::path& dir, const EncoderModule& m) {
  io::save_params(dir, m.params, {{"encoder", encoder_spec_to_json(m.encoder.spec())}});
}

}  // namespace mmfuse
