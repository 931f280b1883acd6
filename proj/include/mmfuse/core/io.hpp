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

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmfuse/core/error.hpp"
#include "mmfuse/core/nn.hpp"

namespace mmfuse::io {

namespace fs = std::filesystem;
using nlohmann::json;

// Appends values as little-endian IEEE-754 float32.
inline void append_f32_le(std::string& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, sizeof bits);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xffu));
}

inline float read_f32_le(const unsigned char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  float v;
  std::memcpy(&v, &bits, sizeof v);
  return v;
}

inline void write_file(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open " + path.string() + " for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("write failed for " + path.string());
}

inline std::string read_file(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

inline void write_f32_file(const fs::path& path, const std::vector<float>& values) {
  std::string bytes;
  bytes.reserve(values.size() * 4);
  for (float v : values) append_f32_le(bytes, v);
  write_file(path, bytes);
}

inline std::vector<float> read_f32_file(const fs::path& path) {
  const std::string bytes = read_file(path);
  if (bytes.size() % 4 != 0) throw Error(path.string() + ": size is not a multiple of 4 bytes");
  std::vector<float> out(bytes.size() / 4);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = read_f32_le(p + 4 * i);
  return out;
}

inline json read_json(const fs::path& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

inline void write_json(const fs::path& path, const json& j) { write_file(path, j.dump(2) + "\n"); }

// Writes parameters as a JSON manifest plus one flat float32 file holding
// every tensor back to back in manifest order.
inline void save_params(const fs::path& dir, const ParamStore& params, const json& meta) {
  json manifest = meta;
  manifest["dtype"] = "float32";
  manifest["byte_order"] = "little";
  manifest["tensors"] = json::array();
  std::vector<float> flat;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Mat& v = params.vars()[i].value();
    manifest["tensors"].push_back({{"name", params.names()[i]}, {"shape", {v.rows(), v.cols()}}});
    for (Eigen::Index k = 0; k < v.size(); ++k) flat.push_back(static_cast<float>(v.data()[k]));
  }
  write_json(dir / "manifest.json", manifest);
  write_f32_file(dir / "params.bin", flat);
}

// Loads values saved by save_params into an already-built store with the
// same layout.
inline json load_params(const fs::path& dir, ParamStore& params) {
  const json manifest = read_json(dir / "manifest.json");
  const std::vector<float> flat = read_f32_file(dir / "params.bin");
  const auto& tensors = manifest.at("tensors");
  if (tensors.size() != params.size()) throw ShapeError("checkpoint tensor count does not match model");
  std::size_t off = 0;
  std::vector<Mat> values;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (tensors[i].at("name").get<std::string>() != params.names()[i]) {
      throw ShapeError("checkpoint tensor '" + tensors[i].at("name").get<std::string>() +
                       "' does not match '" + params.names()[i] + "'");
    }
    const auto r = tensors[i].at("shape")[0].get<Eigen::Index>();
    const auto c = tensors[i].at("shape")[1].get<Eigen::Index>();
    Mat m(r, c);
    if (off + static_cast<std::size_t>(r * c) > flat.size()) throw ShapeError("checkpoint payload too short");
    for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = flat[off++];
    values.push_back(std::move(m));
  }
  params.restore(values);
  return manifest;
}

// 64-bit FNV-1a, hex encoded.
inline std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << h;
  return os.str();
}

}  // namespace mmfuse::io
