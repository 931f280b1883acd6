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

// Seeded, level-parameterized corruptions for every modality kind, correlated
// multimodal corruptions, and lazily materialized noisy test grids.
//
// A level of 0 returns the input unchanged. For "probability" families the
// level is the per-opportunity event probability; for additive-noise
// families it is the noise scale.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmfuse/core/error.hpp"
#include "mmfuse/core/random.hpp"
#include "mmfuse/core/tensor.hpp"
#include "mmfuse/synthdata.hpp"

namespace mmfuse {

inline constexpr const char* kAllModalities = "ALL";

struct PerturbationSpec {
  std::string target = kAllModalities;
  std::string family;
  double level = 0.0;
  nlohmann::json params = nlohmann::json::object();
  std::uint64_t seed = 0;

  void validate() const {
    if (!(level >= 0.0 && level <= 1.0)) throw ConfigError("perturbation level must lie in [0, 1]", "robustness.level");
  }

  nlohmann::json to_json() const {
    return {{"target", target}, {"family", family}, {"level", level}, {"params", params}, {"seed", seed}};
  }

  static PerturbationSpec from_json(const nlohmann::json& j) {
    PerturbationSpec s;
    s.target = j.value("target", std::string(kAllModalities));
    s.family = j.at("family").get<std::string>();
    s.level = j.value("level", 0.0);
    s.params = j.value("params", nlohmann::json::object());
    s.seed = j.value("seed", std::uint64_t{0});
    s.validate();
    return s;
  }
};

// Counts of Bernoulli opportunities and of the events they produced.
struct PerturbTrace {
  std::size_t opportunities = 0;
  std::size_t events = 0;
  std::vector<std::size_t> triggered_samples;  // multimodal families only

  bool coin(Rng& rng, double p) {
    ++opportunities;
    const bool hit = rng.bernoulli(p);
    if (hit) ++events;
    return hit;
  }
};

enum class FamilyGroup { kText, kImage, kTimeSeries, kAudio, kTabular, kSet, kMultimodal };

struct FamilyInfo {
  std::string name;
  FamilyGroup group;
  bool probability;  // level is an event probability
};

inline const std::vector<FamilyInfo>& perturbation_families() {
  static const std::vector<FamilyInfo> kFamilies = {
      {"text_typo", FamilyGroup::kText, true},
      {"text_sticky", FamilyGroup::kText, true},
      {"text_omit", FamilyGroup::kText, true},
      {"text_swap", FamilyGroup::kText, true},
      {"text_permute", FamilyGroup::kText, true},
      {"image_gaussian", FamilyGroup::kImage, false},
      {"image_salt_pepper", FamilyGroup::kImage, true},
      {"image_periodic", FamilyGroup::kImage, true},
      {"image_grayscale", FamilyGroup::kImage, true},
      {"image_contrast", FamilyGroup::kImage, true},
      {"image_invert", FamilyGroup::kImage, true},
      {"image_white_balance", FamilyGroup::kImage, true},
      {"image_colorize", FamilyGroup::kImage, true},
      {"image_hflip", FamilyGroup::kImage, true},
      {"image_channel_isolate", FamilyGroup::kImage, true},
      {"image_crop", FamilyGroup::kImage, true},
      {"image_rotate", FamilyGroup::kImage, true},
      {"image_translate", FamilyGroup::kImage, true},
      {"ts_white_noise", FamilyGroup::kTimeSeries, false},
      {"ts_random_drop", FamilyGroup::kTimeSeries, true},
      {"ts_structured_drop", FamilyGroup::kTimeSeries, true},
      {"audio_white_noise", FamilyGroup::kAudio, false},
      {"audio_random_drop", FamilyGroup::kAudio, true},
      {"audio_structured_drop", FamilyGroup::kAudio, true},
      {"tab_drop", FamilyGroup::kTabular, true},
      {"tab_swap", FamilyGroup::kTabular, true},
      {"set_drop", FamilyGroup::kSet, true},
      {"set_noise", FamilyGroup::kSet, false},
      {"mm_correlated_noise", FamilyGroup::kMultimodal, true},
      {"mm_correlated_drop", FamilyGroup::kMultimodal, true},
      {"mm_temporal_drop", FamilyGroup::kMultimodal, true},
      {"mm_structured_temporal_drop", FamilyGroup::kMultimodal, true},
      {"mm_missing_modality", FamilyGroup::kMultimodal, true},
  };
  return kFamilies;
}

inline const FamilyInfo& family_info(const std::string& name) {
  for (const auto& f : perturbation_families()) {
    if (f.name == name) return f;
  }
  throw ConfigError("unknown perturbation family '" + name + "'", "robustness.family");
}

inline std::uint64_t family_id(const std::string& name) {
  const auto& all = perturbation_families();
  for (std::size_t i = 0; i < all.size(); ++i) {
    if (all[i].name == name) return i;
  }
  throw ConfigError("unknown perturbation family '" + name + "'", "robustness.family");
}

// Whether `family` may be applied to a modality of kind `kind`.
inline bool family_supports(const std::string& family, ModalityKind kind) {
  switch (family_info(family).group) {
    case FamilyGroup::kText: return false;  // token lists, not arrays
    case FamilyGroup::kImage: return kind == ModalityKind::kImageGrid;
    case FamilyGroup::kTimeSeries:
    case FamilyGroup::kAudio: return kind == ModalityKind::kTemporalSequence || kind == ModalityKind::kStaticVector;
    case FamilyGroup::kTabular: return kind == ModalityKind::kTable || kind == ModalityKind::kStaticVector;
    case FamilyGroup::kSet: return kind == ModalityKind::kSet;
    case FamilyGroup::kMultimodal: return true;
  }
  return false;
}

// ---------------------------------------------------------------------------
// Text.

namespace detail {

inline const char* kQwertyRows[] = {"qwertyuiop", "asdfghjkl", "zxcvbnm"};
inline constexpr double kQwertyOffsets[] = {0.0, 0.25, 0.75};

inline bool qwerty_position(char c, int& row, double& x) {
  for (int r = 0; r < 3; ++r) {
    const std::string s = kQwertyRows[r];
    const auto i = s.find(c);
    if (i != std::string::npos) {
      row = r;
      x = static_cast<double>(i) + kQwertyOffsets[r];
      return true;
    }
  }
  return false;
}

}  // namespace detail

// Keys adjacent to `c` on a staggered QWERTY layout: same row one key over,
// or the rows above/below within three quarters of a key.
inline std::string qwerty_neighbors(char c) {
  const bool upper = c >= 'A' && c <= 'Z';
  const char lower = upper ? static_cast<char>(c - 'A' + 'a') : c;
  int row = 0;
  double x = 0.0;
  if (!detail::qwerty_position(lower, row, x)) return {};
  std::string out;
  for (int r = std::max(0, row - 1); r <= std::min(2, row + 1); ++r) {
    const std::string s = detail::kQwertyRows[r];
    for (std::size_t i = 0; i < s.size(); ++i) {
      const double xi = static_cast<double>(i) + detail::kQwertyOffsets[r];
      const bool adjacent = r == row ? std::abs(xi - x) == 1.0 : std::abs(xi - x) <= 0.75;
      if (adjacent) out.push_back(upper ? static_cast<char>(s[i] - 'a' + 'A') : s[i]);
    }
  }
  return out;
}

namespace detail {

inline std::string perturb_word(const std::string& w, const std::string& family, double p, Rng& rng, PerturbTrace* t) {
  PerturbTrace local;
  PerturbTrace& tr = t ? *t : local;
  std::string out;
  const std::size_t n = w.size();
  if (family == "text_typo") {
    for (char c : w) {
      const std::string nb = qwerty_neighbors(c);
      if (!nb.empty() && tr.coin(rng, p)) {
        out.push_back(nb[rng.index(nb.size())]);
      } else {
        out.push_back(c);
      }
    }
    return out;
  }
  if (family == "text_sticky") {
    for (char c : w) {
      out.push_back(c);
      if (tr.coin(rng, p)) out.push_back(c);
    }
    return out;
  }
  if (family == "text_omit") {
    // First and last letters are kept.
    for (std::size_t i = 0; i < n; ++i) {
      if (i > 0 && i + 1 < n && tr.coin(rng, p)) continue;
      out.push_back(w[i]);
    }
    return out;
  }
  out = w;
  if (family == "text_swap") {
    if (n >= 4 && tr.coin(rng, p)) {
      const std::size_t i = 1 + rng.index(n - 3);  // swap (i, i+1), both interior
      std::swap(out[i], out[i + 1]);
    }
    return out;
  }
  if (family == "text_permute") {
    if (n >= 4 && tr.coin(rng, p)) {
      for (std::size_t i = n - 2; i > 1; --i) std::swap(out[i], out[1 + rng.index(i)]);
    }
    return out;
  }
  throw ConfigError("'" + family + "' is not a text family", "robustness.family");
}

}  // namespace detail

inline std::vector<std::string> perturb_text(const std::vector<std::string>& tokens, const PerturbationSpec& spec,
                                             PerturbTrace* trace = nullptr) {
  spec.validate();
  if (family_info(spec.family).group != FamilyGroup::kText) {
    throw ConfigError("'" + spec.family + "' is not a text family", "robustness.family");
  }
  if (spec.level == 0.0) return tokens;
  Rng rng(derive_seed(spec.seed, {family_id(spec.family)}));
  std::vector<std::string> out;
  out.reserve(tokens.size());
  for (const auto& w : tokens) out.push_back(detail::perturb_word(w, spec.family, spec.level, rng, trace));
  return out;
}

// ---------------------------------------------------------------------------
// Arrays.

namespace detail {

inline float image_max(const Array& img, const nlohmann::json& params) {
  if (params.contains("max_value")) return params["max_value"].get<float>();
  float hi = 0.0f;
  for (float v : img.data) hi = std::max(hi, v);
  return hi > 1.0f ? 255.0f : 1.0f;
}

inline void clip(Array& a, float lo, float hi) {
  for (auto& v : a.data) v = std::clamp(v, lo, hi);
}

inline void require_rgb(const Array& img, const std::string& family) {
  if (img.shape[2] != 3) throw ShapeError(family + " needs 3 colour channels, got " + std::to_string(img.shape[2]));
}

// Resamples by nearest neighbour through `source(i, j) -> (si, sj)`; pixels
// mapping outside the image are zero.
template <class Map>
Array resample(const Array& img, Map source) {
  const std::size_t h = img.shape[0], w = img.shape[1], c = img.shape[2];
  Array out(img.shape);
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      const auto [si, sj] = source(static_cast<double>(i), static_cast<double>(j));
      const long ri = std::lround(si), rj = std::lround(sj);
      if (ri < 0 || rj < 0 || ri >= static_cast<long>(h) || rj >= static_cast<long>(w)) continue;
      for (std::size_t k = 0; k < c; ++k) {
        out.data[(i * w + j) * c + k] = img.data[(static_cast<std::size_t>(ri) * w + static_cast<std::size_t>(rj)) * c + k];
      }
    }
  }
  return out;
}

inline Array perturb_image_impl(const Array& img, const PerturbationSpec& spec, Rng& rng, PerturbTrace& tr) {
  if (img.shape.size() != 3) throw ShapeError("image families need an [H, W, C] array, got " + shape_string(img.shape));
  const std::string& f = spec.family;
  const double p = spec.level;
  const float mx = image_max(img, spec.params);
  const std::size_t h = img.shape[0], w = img.shape[1], c = img.shape[2];
  Array out = img;
  if (f == "image_gaussian") {
    // Level is the variance in units of the full pixel range.
    const double sd = std::sqrt(p) * mx;
    for (auto& v : out.data) v = static_cast<float>(v + rng.normal(0.0, sd));
    clip(out, 0.0f, mx);
    return out;
  }
  if (f == "image_salt_pepper") {
    for (std::size_t px = 0; px < h * w; ++px) {
      if (!tr.coin(rng, p)) continue;
      double mean = 0.0;
      for (std::size_t k = 0; k < c; ++k) mean += img.data[px * c + k];
      const float v = mean / static_cast<double>(c) >= mx / 2.0 ? 0.0f : mx;
      for (std::size_t k = 0; k < c; ++k) out.data[px * c + k] = v;
    }
    return out;
  }
  // The remaining image families are whole-image transforms applied with
  // probability p.
  if (!tr.coin(rng, p)) return out;
  if (f == "image_periodic") {
    const double period = spec.params.value("period", 8.0);
    const double amp = p * mx;
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < w; ++j) {
        const float v = static_cast<float>(amp * std::sin(2.0 * M_PI * static_cast<double>(i + j) / period));
        for (std::size_t k = 0; k < c; ++k) out.data[(i * w + j) * c + k] += v;
      }
    }
    clip(out, 0.0f, mx);
  } else if (f == "image_grayscale") {
    require_rgb(img, f);
    for (std::size_t px = 0; px < h * w; ++px) {
      const float* q = &img.data[px * 3];
      const float g = 0.3f * q[0] + 0.59f * q[1] + 0.11f * q[2];
      for (std::size_t k = 0; k < 3; ++k) out.data[px * 3 + k] = g;
    }
  } else if (f == "image_contrast") {
    const double factor = spec.params.value("factor", 0.5);
    double mean = 0.0;
    for (float v : img.data) mean += v;
    mean /= static_cast<double>(img.size());
    for (auto& v : out.data) v = static_cast<float>(mean + factor * (v - mean));
    clip(out, 0.0f, mx);
  } else if (f == "image_invert") {
    for (auto& v : out.data) v = mx - v;
  } else if (f == "image_white_balance") {
    require_rgb(img, f);
    static constexpr float kGain[] = {1.2f, 1.0f, 0.8f};  // warm shift
    for (std::size_t px = 0; px < h * w; ++px) {
      for (std::size_t k = 0; k < 3; ++k) out.data[px * 3 + k] *= kGain[k];
    }
    clip(out, 0.0f, mx);
  } else if (f == "image_colorize") {
    require_rgb(img, f);
    static constexpr float kTint[] = {1.0f, 0.6f, 0.2f};  // sepia-like
    for (std::size_t px = 0; px < h * w; ++px) {
      for (std::size_t k = 0; k < 3; ++k) out.data[px * 3 + k] = 0.7f * out.data[px * 3 + k] + 0.3f * kTint[k] * mx;
    }
    clip(out, 0.0f, mx);
  } else if (f == "image_hflip") {
    out = resample(img, [&](double i, double j) { return std::pair{i, static_cast<double>(w - 1) - j}; });
  } else if (f == "image_channel_isolate") {
    if (c < 2) throw ShapeError("image_channel_isolate needs at least 2 channels");
    const std::size_t keep = rng.index(c);
    for (std::size_t px = 0; px < h * w; ++px) {
      for (std::size_t k = 0; k < c; ++k) {
        if (k != keep) out.data[px * c + k] = 0.0f;
      }
    }
  } else if (f == "image_crop") {
    // Keeps a random window of ~75% side length in place, zero elsewhere.
    const std::size_t ch = std::max<std::size_t>(1, (h * 3 + 3) / 4), cw = std::max<std::size_t>(1, (w * 3 + 3) / 4);
    const std::size_t i0 = rng.index(h - ch + 1), j0 = rng.index(w - cw + 1);
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < w; ++j) {
        if (i >= i0 && i < i0 + ch && j >= j0 && j < j0 + cw) continue;
        for (std::size_t k = 0; k < c; ++k) out.data[(i * w + j) * c + k] = 0.0f;
      }
    }
  } else if (f == "image_rotate") {
    const double deg = rng.uniform(20.0, 40.0) * (rng.bernoulli(0.5) ? 1.0 : -1.0);
    const double th = deg * M_PI / 180.0, cs = std::cos(th), sn = std::sin(th);
    const double ci = static_cast<double>(h - 1) / 2.0, cj = static_cast<double>(w - 1) / 2.0;
    out = resample(img, [&](double i, double j) {
      const double di = i - ci, dj = j - cj;
      return std::pair{ci + cs * di - sn * dj, cj + sn * di + cs * dj};
    });
  } else if (f == "image_translate") {
    const auto max_di = static_cast<long>(h / 4), max_dj = static_cast<long>(w / 4);
    // Nonzero shift whenever the image is large enough to allow one.
    long di = 0, dj = 0;
    do {
      di = static_cast<long>(rng.index(static_cast<std::size_t>(2 * max_di + 1))) - max_di;
      dj = static_cast<long>(rng.index(static_cast<std::size_t>(2 * max_dj + 1))) - max_dj;
    } while (di == 0 && dj == 0 && (max_di > 0 || max_dj > 0));
    out = resample(img, [&](double i, double j) {
      return std::pair{i - static_cast<double>(di), j - static_cast<double>(dj)};
    });
  } else {
    throw ConfigError("'" + f + "' is not an image family", "robustness.family");
  }
  return out;
}

inline std::size_t structured_length(const PerturbationSpec& spec) {
  const auto m = spec.params.value("m", std::size_t{3});
  if (m < 1) throw ConfigError("structured drop length m must be >= 1", "robustness.params.m");
  return m;
}

// Zero-based start indices of structured drops over `steps` positions: a
// scan where each position t <= steps - m starts a drop with probability p,
// after which the scan resumes at t + m.
inline std::vector<std::size_t> structured_starts(std::size_t steps, std::size_t m, double p, Rng& rng, PerturbTrace& tr) {
  if (m > steps) {
    throw ConfigError("structured drop length " + std::to_string(m) + " exceeds sequence length " + std::to_string(steps),
                      "robustness.params.m");
  }
  std::vector<std::size_t> out;
  for (std::size_t t = 0; t + m <= steps;) {
    if (tr.coin(rng, p)) {
      out.push_back(t);
      t += m;
    } else {
      ++t;
    }
  }
  return out;
}

// Rows of a sequence: [T, d] arrays have T rows, 1-D arrays one per entry.
inline std::size_t seq_rows(const Array& a) { return a.shape[0]; }
inline std::size_t seq_width(const Array& a) { return a.shape.size() == 1 ? 1 : a.row_width(); }

inline void zero_row(Array& a, std::size_t r) {
  const std::size_t w = seq_width(a);
  std::fill(a.data.begin() + static_cast<std::ptrdiff_t>(r * w), a.data.begin() + static_cast<std::ptrdiff_t>((r + 1) * w), 0.0f);
}

inline Array perturb_sequence_impl(const Array& x, const std::string& kind, const PerturbationSpec& spec, Rng& rng,
                                   PerturbTrace& tr) {
  if (x.shape.empty() || x.shape.size() > 2) throw ShapeError("sequence families need a 1-D or [T, d] array");
  const double p = spec.level;
  Array out = x;
  if (kind == "white_noise") {
    for (auto& v : out.data) v = static_cast<float>(v + rng.normal(0.0, p));
  } else if (kind == "random_drop") {
    for (std::size_t r = 0; r < seq_rows(x); ++r) {
      if (tr.coin(rng, p)) zero_row(out, r);
    }
  } else if (kind == "structured_drop") {
    const std::size_t m = structured_length(spec);
    for (std::size_t s : structured_starts(seq_rows(x), m, p, rng, tr)) {
      for (std::size_t r = s; r < s + m; ++r) zero_row(out, r);
    }
  } else {
    throw ConfigError("unknown sequence corruption '" + kind + "'", "robustness.family");
  }
  return out;
}

}  // namespace detail

inline Array perturb_image(const Array& img, const PerturbationSpec& spec, Rng& rng, PerturbTrace* trace = nullptr) {
  spec.validate();
  if (family_info(spec.family).group != FamilyGroup::kImage) throw ConfigError("'" + spec.family + "' is not an image family", "robustness.family");
  if (spec.level == 0.0) return img;
  PerturbTrace local;
  return detail::perturb_image_impl(img, spec, rng, trace ? *trace : local);
}

inline Array perturb_timeseries(const Array& seq, const PerturbationSpec& spec, Rng& rng, PerturbTrace* trace = nullptr) {
  spec.validate();
  const std::string& f = spec.family;
  if (family_info(f).group != FamilyGroup::kTimeSeries) throw ConfigError("'" + f + "' is not a time-series family", "robustness.family");
  if (spec.level == 0.0) {
    if (f == "ts_structured_drop" && detail::structured_length(spec) > detail::seq_rows(seq)) {
      throw ConfigError("structured drop length exceeds sequence length", "robustness.params.m");
    }
    return seq;
  }
  PerturbTrace local;
  return detail::perturb_sequence_impl(seq, f.substr(3), spec, rng, trace ? *trace : local);
}

inline Array perturb_audio(const Array& wave, const PerturbationSpec& spec, Rng& rng, PerturbTrace* trace = nullptr) {
  spec.validate();
  const std::string& f = spec.family;
  if (family_info(f).group != FamilyGroup::kAudio) throw ConfigError("'" + f + "' is not an audio family", "robustness.family");
  if (spec.level == 0.0) {
    if (f == "audio_structured_drop" && detail::structured_length(spec) > detail::seq_rows(wave)) {
      throw ConfigError("structured drop length exceeds sequence length", "robustness.params.m");
    }
    return wave;
  }
  PerturbTrace local;
  return detail::perturb_sequence_impl(wave, f.substr(6), spec, rng, trace ? *trace : local);
}

inline Array perturb_tabular(const Array& row, const PerturbationSpec& spec, Rng& rng, PerturbTrace* trace = nullptr) {
  spec.validate();
  const std::string& f = spec.family;
  if (family_info(f).group != FamilyGroup::kTabular) throw ConfigError("'" + f + "' is not a tabular family", "robustness.family");
  if (spec.level == 0.0) return row;
  PerturbTrace local;
  PerturbTrace& tr = trace ? *trace : local;
  Array out = row;
  const std::size_t n = row.size();
  if (f == "tab_drop") {
    for (auto& v : out.data) {
      if (tr.coin(rng, spec.level)) v = 0.0f;
    }
  } else {
    for (std::size_t i = 0; i < n && n > 1; ++i) {
      if (!tr.coin(rng, spec.level)) continue;
      std::size_t j = rng.index(n - 1);
      if (j >= i) ++j;
      std::swap(out.data[i], out.data[j]);
    }
  }
  return out;
}

// Sets are [n, e]; set_drop removes elements, so the row count can shrink.
inline Array perturb_set(const Array& set, const PerturbationSpec& spec, Rng& rng, PerturbTrace* trace = nullptr) {
  spec.validate();
  const std::string& f = spec.family;
  if (family_info(f).group != FamilyGroup::kSet) throw ConfigError("'" + f + "' is not a set family", "robustness.family");
  if (set.shape.size() != 2) throw ShapeError("set families need an [n, e] array");
  if (spec.level == 0.0) return set;
  PerturbTrace local;
  PerturbTrace& tr = trace ? *trace : local;
  const std::size_t n = set.shape[0], e = set.shape[1];
  if (f == "set_noise") {
    Array out = set;
    for (auto& v : out.data) v = static_cast<float>(v + rng.normal(0.0, spec.level));
    return out;
  }
  std::vector<float> kept;
  std::size_t rows = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (tr.coin(rng, spec.level)) continue;
    kept.insert(kept.end(), set.data.begin() + static_cast<std::ptrdiff_t>(i * e),
                set.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * e));
    ++rows;
  }
  return Array({rows, e}, std::move(kept));
}

// Applies a single-modality family to an array of the given kind.
inline Array perturb_array(const Array& x, ModalityKind kind, const PerturbationSpec& spec, Rng& rng,
                           PerturbTrace* trace = nullptr) {
  if (!family_supports(spec.family, kind) || family_info(spec.family).group == FamilyGroup::kMultimodal) {
    throw UnsupportedError("family '" + spec.family + "' does not apply to modality kind " + to_string(kind));
  }
  switch (family_info(spec.family).group) {
    case FamilyGroup::kImage: return perturb_image(x, spec, rng, trace);
    case FamilyGroup::kTimeSeries: return perturb_timeseries(x, spec, rng, trace);
    case FamilyGroup::kAudio: return perturb_audio(x, spec, rng, trace);
    case FamilyGroup::kTabular: return perturb_tabular(x, spec, rng, trace);
    case FamilyGroup::kSet: return perturb_set(x, spec, rng, trace);
    default: break;
  }
  throw UnsupportedError("family '" + spec.family + "' does not apply to arrays");
}

// ---------------------------------------------------------------------------
// Multimodal.

namespace detail {

inline constexpr std::uint64_t kJointStream = 0xFFFFFFFFull;

inline std::vector<std::size_t> targeted(const std::vector<ModalitySpec>& specs, const std::string& target) {
  std::vector<std::size_t> out;
  if (target == kAllModalities) {
    for (std::size_t m = 0; m < specs.size(); ++m) out.push_back(m);
    return out;
  }
  for (std::size_t m = 0; m < specs.size(); ++m) {
    if (specs[m].name == target) return {m};
  }
  throw ConfigError("perturbation target '" + target + "' is not a modality", "robustness.target");
}

// Targeted modality with the lowest sample rate; ties go to the first.
inline std::size_t coarsest(const std::vector<ModalitySpec>& specs, const std::vector<std::size_t>& targets) {
  std::size_t best = targets[0];
  for (std::size_t m : targets) {
    if (specs[m].sample_rate < specs[best].sample_rate) best = m;
  }
  return best;
}

inline void zero_modality(Array& a, ModalityKind kind) {
  if (kind == ModalityKind::kSet) {
    a = Array({0, a.shape.size() == 2 ? a.shape[1] : 0});
    return;
  }
  std::fill(a.data.begin(), a.data.end(), 0.0f);
}

}  // namespace detail

// One joint draw per sample drives every targeted modality.
inline MultimodalSample perturb_multimodal(const MultimodalSample& sample, const std::vector<ModalitySpec>& specs,
                                           const PerturbationSpec& spec, PerturbTrace* trace = nullptr) {
  spec.validate();
  const std::string& f = spec.family;
  if (family_info(f).group != FamilyGroup::kMultimodal) throw ConfigError("'" + f + "' is not a multimodal family", "robustness.family");
  const auto targets = detail::targeted(specs, spec.target);
  const bool temporal_family = f == "mm_temporal_drop" || f == "mm_structured_temporal_drop";
  if (temporal_family) {
    for (std::size_t m : targets) {
      if (!specs[m].temporal()) {
        throw UnsupportedError("'" + f + "' needs a shared time axis but modality '" + specs[m].name + "' is " +
                               to_string(specs[m].kind));
      }
    }
  }
  if (f == "mm_structured_temporal_drop") {
    const std::size_t m = detail::structured_length(spec);
    const std::size_t steps = specs[detail::coarsest(specs, targets)].shape[0];
    if (m > steps) throw ConfigError("structured drop length exceeds sequence length", "robustness.params.m");
  }
  if (spec.level == 0.0) return sample;
  PerturbTrace local;
  PerturbTrace& tr = trace ? *trace : local;
  Rng rng(derive_seed(spec.seed, {sample.index, detail::kJointStream, family_id(f)}));
  MultimodalSample out = sample;
  const double p = spec.level;
  auto mark = [&]() { tr.triggered_samples.push_back(sample.index); };

  if (f == "mm_correlated_noise") {
    if (!tr.coin(rng, p)) return out;
    mark();
    const double sd = spec.params.value("std", p);
    for (std::size_t m : targets) {
      for (auto& v : out.modalities[m].data) v = static_cast<float>(v + rng.normal(0.0, sd));
    }
  } else if (f == "mm_correlated_drop") {
    if (!tr.coin(rng, p)) return out;
    mark();
    for (std::size_t m : targets) detail::zero_modality(out.modalities[m], specs[m].kind);
  } else if (f == "mm_missing_modality") {
    if (!tr.coin(rng, p)) return out;
    mark();
    const std::size_t m = targets.size() == 1 ? targets[0] : targets[rng.index(targets.size())];
    detail::zero_modality(out.modalities[m], specs[m].kind);
  } else {
    // Drops are drawn on the step grid of the coarsest targeted modality; a
    // row of a finer modality is dropped when its timestamp falls in a dropped
    // reference step.
    const ModalitySpec& ref = specs[detail::coarsest(specs, targets)];
    const std::size_t steps = ref.shape[0];
    std::vector<bool> dropped(steps, false);
    if (f == "mm_temporal_drop") {
      for (std::size_t t = 0; t < steps; ++t) dropped[t] = tr.coin(rng, p);
    } else {
      const std::size_t m = detail::structured_length(spec);
      for (std::size_t s : detail::structured_starts(steps, m, p, rng, tr)) {
        for (std::size_t t = s; t < s + m; ++t) dropped[t] = true;
      }
    }
    for (std::size_t m : targets) {
      Array& a = out.modalities[m];
      for (std::size_t r = 0; r < a.shape[0]; ++r) {
        const double time = static_cast<double>(r) / specs[m].sample_rate;
        const auto step = static_cast<std::size_t>(std::floor(time * ref.sample_rate));
        if (step < steps && dropped[step]) detail::zero_row(a, r);
      }
    }
  }
  return out;
}

// Applies any family to a sample: multimodal families jointly, others to
// each targeted modality with an independent per-(sample, modality) stream.
inline MultimodalSample perturb_sample(const MultimodalSample& sample, const std::vector<ModalitySpec>& specs,
                                       const PerturbationSpec& spec, PerturbTrace* trace = nullptr) {
  if (family_info(spec.family).group == FamilyGroup::kMultimodal) return perturb_multimodal(sample, specs, spec, trace);
  MultimodalSample out = sample;
  for (std::size_t m : detail::targeted(specs, spec.target)) {
    Rng rng(derive_seed(spec.seed, {sample.index, m, family_id(spec.family)}));
    out.modalities[m] = perturb_array(sample.modalities[m], specs[m].kind, spec, rng, trace);
  }
  return out;
}

// Family used for a modality when the config names none.
inline std::string default_family(ModalityKind kind) {
  switch (kind) {
    case ModalityKind::kStaticVector: return "ts_white_noise";
    case ModalityKind::kTable: return "tab_drop";
    case ModalityKind::kTemporalSequence: return "ts_random_drop";
    case ModalityKind::kImageGrid: return "image_gaussian";
    case ModalityKind::kSet: return "set_noise";
  }
  return "ts_white_noise";
}

struct GridPartition {
  std::string id;                     // modality name, or "multimodal"
  std::vector<std::string> families;  // applied in order at each level
  std::string target;
};

// Test data corrupted at each level, per partition. Corrupted sets are built
// on request; level 0 is the clean data.
class NoisyTestGrid {
 public:
  NoisyTestGrid(SampleSet clean, std::vector<ModalitySpec> specs, std::vector<double> levels,
                std::vector<GridPartition> partitions, std::uint64_t seed, nlohmann::json params = nlohmann::json::object())
      : clean_(std::move(clean)), specs_(std::move(specs)), levels_(std::move(levels)),
        partitions_(std::move(partitions)), seed_(seed), params_(std::move(params)) {
    if (levels_.empty()) throw ConfigError("noisy grid needs at least one level", "robustness.levels");
    if (levels_.front() != 0.0) throw ConfigError("noisy grid levels must start at 0.0", "robustness.levels");
    for (std::size_t i = 0; i < levels_.size(); ++i) {
      if (!(levels_[i] >= 0.0 && levels_[i] <= 1.0)) throw ConfigError("levels must lie in [0, 1]", "robustness.levels");
      if (i > 0 && !(levels_[i] > levels_[i - 1])) throw ConfigError("levels must be strictly ascending", "robustness.levels");
    }
  }

  const std::vector<double>& levels() const { return levels_; }
  const std::vector<GridPartition>& partitions() const { return partitions_; }
  const SampleSet& clean() const { return clean_; }
  const std::vector<ModalitySpec>& specs() const { return specs_; }
  const std::string& multimodal_reason() const { return reason_; }
  void set_multimodal_reason(std::string r) { reason_ = std::move(r); }

  PerturbationSpec spec_for(std::size_t partition, std::size_t family, std::size_t level) const {
    const GridPartition& part = partitions_.at(partition);
    PerturbationSpec s;
    s.target = part.target;
    s.family = part.families.at(family);
    s.level = levels_.at(level);
    s.params = params_.value(s.family, nlohmann::json::object());
    s.seed = derive_seed(seed_, {partition, family});
    return s;
  }

  SampleSet materialize(std::size_t partition, std::size_t level) const {
    if (levels_.at(level) == 0.0) return clean_;
    SampleSet out;
    out.reserve(clean_.size());
    for (const auto& sample : clean_) {
      MultimodalSample s = sample;
      for (std::size_t f = 0; f < partitions_.at(partition).families.size(); ++f) {
        s = perturb_sample(s, specs_, spec_for(partition, f, level));
      }
      out.push_back(std::move(s));
    }
    return out;
  }

 private:
  SampleSet clean_;
  std::vector<ModalitySpec> specs_;
  std::vector<double> levels_;
  std::vector<GridPartition> partitions_;
  std::uint64_t seed_;
  nlohmann::json params_;
  std::string reason_;
};

// One partition per modality plus a multimodal partition when every modality
// is temporal (they share a time axis); otherwise the reason is recorded.
// `families` maps modality names to family lists; unnamed modalities use
// default_family. `params` maps family names to their params objects.
inline NoisyTestGrid build_noisy_grid(const SampleSet& test, const std::vector<ModalitySpec>& specs,
                                      const std::map<std::string, std::vector<std::string>>& families,
                                      const std::string& multimodal_family, const std::vector<double>& levels,
                                      std::uint64_t seed, const nlohmann::json& params = nlohmann::json::object()) {
  std::vector<GridPartition> parts;
  for (const auto& s : specs) {
    GridPartition p{s.name, {}, s.name};
    auto it = families.find(s.name);
    p.families = it != families.end() ? it->second : std::vector<std::string>{default_family(s.kind)};
    for (const auto& f : p.families) {
      if (!family_supports(f, s.kind) || family_info(f).group == FamilyGroup::kMultimodal) {
        throw ConfigError("family '" + f + "' does not apply to modality '" + s.name + "' of kind " + to_string(s.kind),
                          "robustness.families");
      }
    }
    parts.push_back(std::move(p));
  }
  for (const auto& [name, _] : families) {
    bool found = false;
    for (const auto& s : specs) found = found || s.name == name;
    if (!found) throw ConfigError("robustness families name unknown modality '" + name + "'", "robustness.families");
  }
  std::string reason;
  const bool all_temporal = std::all_of(specs.begin(), specs.end(), [](const ModalitySpec& s) { return s.temporal(); });
  if (!multimodal_family.empty() && family_info(multimodal_family).group != FamilyGroup::kMultimodal) {
    throw ConfigError("'" + multimodal_family + "' is not a multimodal family", "robustness.multimodal");
  }
  if (multimodal_family.empty()) {
    reason = "no multimodal family configured";
  } else if (!all_temporal) {
    reason = "modalities do not share a time axis";
  } else {
    parts.push_back({"multimodal", {multimodal_family}, kAllModalities});
  }
  NoisyTestGrid grid(test, specs, levels, std::move(parts), seed, params);
  grid.set_multimodal_reason(reason);
  return grid;
}

}  // namespace mmfuse
