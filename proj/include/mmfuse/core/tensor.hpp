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

#include <cstddef>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mmfuse/core/error.hpp"

namespace mmfuse {

// Dense row-major double matrix used by the differentiable substrate.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

// Raw modality payload: an n-dimensional row-major float32 array. This is
// the storage type for datasets (the on-disk format is float32 as well, so a
// save/load round trip is exact).
struct Array {
  Shape shape;
  std::vector<float> data;

  Array() = default;
  explicit Array(Shape s) : shape(std::move(s)), data(shape_size(shape), 0.0f) {}
  Array(Shape s, std::vector<float> values) : shape(std::move(s)), data(std::move(values)) {
    if (data.size() != shape_size(shape)) {
      throw ShapeError("array data size " + std::to_string(data.size()) +
                       " does not match shape " + shape_string(shape));
    }
  }

  std::size_t size() const { return data.size(); }
  std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
  // Product of all dimensions after the first.
  std::size_t row_width() const {
    if (shape.size() <= 1) return 1;
    return data.size() / shape[0];
  }
  float& operator[](std::size_t i) { return data[i]; }
  float operator[](std::size_t i) const { return data[i]; }

  bool operator==(const Array& other) const = default;
};

// Copies an array into a matrix with `rows()` rows; 1-D arrays become a
// single row.
inline Mat to_row_matrix(const Array& a) {
  if (a.shape.size() <= 1) {
    Mat m(1, a.size());
    for (std::size_t i = 0; i < a.size(); ++i) m(0, i) = a.data[i];
    return m;
  }
  const std::size_t r = a.rows();
  const std::size_t c = a.row_width();
  Mat m(r, c);
  for (std::size_t i = 0; i < a.size(); ++i) m.data()[i] = a.data[i];
  return m;
}

}  // namespace mmfuse
