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

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "mmfuse/core/autograd.hpp"

namespace mmfuse::ad {

namespace detail {

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()));
  }
}

inline Node& parent(Node& self, std::size_t i) { return *self.parents[i]; }

}  // namespace detail

inline Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions " + std::to_string(a.cols()) + " and " +
                     std::to_string(b.rows()) + " differ");
  }
  return make_node(a.value() * b.value(), {a, b}, [](Node& self) {
    Node& pa = detail::parent(self, 0);
    Node& pb = detail::parent(self, 1);
    if (pa.requires_grad) accumulate(pa, self.grad * pb.value.transpose());
    if (pb.requires_grad) accumulate(pb, pa.value.transpose() * self.grad);
  });
}

inline Var add(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "add");
  return make_node(a.value() + b.value(), {a, b}, [](Node& self) {
    accumulate(detail::parent(self, 0), self.grad);
    accumulate(detail::parent(self, 1), self.grad);
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "sub");
  return make_node(a.value() - b.value(), {a, b}, [](Node& self) {
    accumulate(detail::parent(self, 0), self.grad);
    accumulate(detail::parent(self, 1), -self.grad);
  });
}

inline Var hadamard(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "hadamard");
  return make_node(a.value().cwiseProduct(b.value()), {a, b}, [](Node& self) {
    Node& pa = detail::parent(self, 0);
    Node& pb = detail::parent(self, 1);
    if (pa.requires_grad) accumulate(pa, self.grad.cwiseProduct(pb.value));
    if (pb.requires_grad) accumulate(pb, self.grad.cwiseProduct(pa.value));
  });
}

inline Var divide(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "divide");
  return make_node(a.value().cwiseQuotient(b.value()), {a, b}, [](Node& self) {
    Node& pa = detail::parent(self, 0);
    Node& pb = detail::parent(self, 1);
    if (pa.requires_grad) accumulate(pa, self.grad.cwiseQuotient(pb.value));
    if (pb.requires_grad) {
      Mat g = -self.grad.cwiseProduct(pa.value).cwiseQuotient(pb.value.cwiseProduct(pb.value));
      accumulate(pb, g);
    }
  });
}

// a + r with the 1xN row r broadcast over every row of a.
inline Var add_row(const Var& a, const Var& r) {
  if (r.rows() != 1 || r.cols() != a.cols()) throw ShapeError("add_row: bias must be 1x" + std::to_string(a.cols()));
  Mat out = a.value().rowwise() + r.value().row(0);
  return make_node(std::move(out), {a, r}, [](Node& self) {
    accumulate(detail::parent(self, 0), self.grad);
    Node& pr = detail::parent(self, 1);
    if (pr.requires_grad) accumulate(pr, self.grad.colwise().sum());
  });
}

// a * r elementwise with the 1xN row r broadcast over rows.
inline Var mul_row(const Var& a, const Var& r) {
  if (r.rows() != 1 || r.cols() != a.cols()) throw ShapeError("mul_row: scale must be 1x" + std::to_string(a.cols()));
  Mat out = a.value().array().rowwise() * r.value().row(0).array();
  return make_node(std::move(out), {a, r}, [](Node& self) {
    Node& pa = detail::parent(self, 0);
    Node& pr = detail::parent(self, 1);
    if (pa.requires_grad) {
      Mat g = self.grad.array().rowwise() * pr.value.row(0).array();
      accumulate(pa, g);
    }
    if (pr.requires_grad) accumulate(pr, self.grad.cwiseProduct(pa.value).colwise().sum());
  });
}

// a * c elementwise with the Bx1 column c broadcast over columns.
inline Var mul_col(const Var& a, const Var& c) {
  if (c.cols() != 1 || c.rows() != a.rows()) throw ShapeError("mul_col: scale must be " + std::to_string(a.rows()) + "x1");
  Mat out = a.value().array().colwise() * c.value().col(0).array();
  return make_node(std::move(out), {a, c}, [](Node& self) {
    Node& pa = detail::parent(self, 0);
    Node& pc = detail::parent(self, 1);
    if (pa.requires_grad) {
      Mat g = self.grad.array().colwise() * pc.value.col(0).array();
      accumulate(pa, g);
    }
    if (pc.requires_grad) accumulate(pc, self.grad.cwiseProduct(pa.value).rowwise().sum());
  });
}

// a + c with the Bx1 column c broadcast over columns.
inline Var add_col(const Var& a, const Var& c) {
  if (c.cols() != 1 || c.rows() != a.rows()) throw ShapeError("add_col: column must be " + std::to_string(a.rows()) + "x1");
  Mat out = a.value().colwise() + c.value().col(0);
  return make_node(std::move(out), {a, c}, [](Node& self) {
    accumulate(detail::parent(self, 0), self.grad);
    Node& pc = detail::parent(self, 1);
    if (pc.requires_grad) accumulate(pc, self.grad.rowwise().sum());
  });
}

inline Var scale(const Var& a, double s) {
  return make_node(a.value() * s, {a}, [s](Node& self) {
    accumulate(detail::parent(self, 0), self.grad * s);
  });
}

inline Var add_scalar(const Var& a, double s) {
  Mat out = a.value().array() + s;
  return make_node(std::move(out), {a}, [](Node& self) {
    accumulate(detail::parent(self, 0), self.grad);
  });
}

inline Var sigmoid(const Var& a) {
  Mat out = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
  return make_node(std::move(out), {a}, [](Node& self) {
    Mat g = self.grad.array() * self.value.array() * (1.0 - self.value.array());
    accumulate(detail::parent(self, 0), g);
  });
}

inline Var tanh(const Var& a) {
  Mat out = a.value().array().tanh().matrix();
  return make_node(std::move(out), {a}, [](Node& self) {
    Mat g = self.grad.array() * (1.0 - self.value.array().square());
    accumulate(detail::parent(self, 0), g);
  });
}

inline Var relu(const Var& a) {
  Mat out = a.value().cwiseMax(0.0);
  return make_node(std::move(out), {a}, [](Node& self) {
    Mat g = (detail::parent(self, 0).value.array() > 0.0).select(self.grad, 0.0);
    accumulate(detail::parent(self, 0), g);
  });
}

inline Var exp(const Var& a) {
  Mat out = a.value().array().exp().matrix();
  return make_node(std::move(out), {a}, [](Node& self) {
    accumulate(detail::parent(self, 0), self.grad.cwiseProduct(self.value));
  });
}

inline Var square(const Var& a) {
  Mat out = a.value().array().square().matrix();
  return make_node(std::move(out), {a}, [](Node& self) {
    accumulate(detail::parent(self, 0), 2.0 * self.grad.cwiseProduct(detail::parent(self, 0).value));
  });
}

// Elementwise square root; the derivative at exactly zero is taken as zero.
inline Var sqrt(const Var& a) {
  Mat out = a.value().array().sqrt().matrix();
  return make_node(std::move(out), {a}, [](Node& self) {
    Mat g = (self.value.array() > 0.0).select(self.grad.array() / (2.0 * self.value.array()), 0.0);
    accumulate(detail::parent(self, 0), g);
  });
}

inline Var clamp_min(const Var& a, double lo) {
  Mat out = a.value().cwiseMax(lo);
  return make_node(std::move(out), {a}, [lo](Node& self) {
    Mat g = (detail::parent(self, 0).value.array() > lo).select(self.grad, 0.0);
    accumulate(detail::parent(self, 0), g);
  });
}

inline Var transpose(const Var& a) {
  Mat out = a.value().transpose();
  return make_node(std::move(out), {a}, [](Node& self) {
    accumulate(detail::parent(self, 0), self.grad.transpose());
  });
}

inline Var reshape(const Var& a, Eigen::Index rows, Eigen::Index cols) {
  if (rows * cols != a.value().size()) throw ShapeError("reshape: element count changes");
  Mat out = Eigen::Map<const Mat>(a.value().data(), rows, cols);
  const Eigen::Index r0 = a.rows();
  const Eigen::Index c0 = a.cols();
  return make_node(std::move(out), {a}, [r0, c0](Node& self) {
    Mat g = Eigen::Map<const Mat>(self.grad.data(), r0, c0);
    accumulate(detail::parent(self, 0), g);
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  for (const Var& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_cols: row counts differ");
    cols += p.cols();
  }
  Mat out(rows, cols);
  std::vector<Eigen::Index> offsets;
  Eigen::Index off = 0;
  for (const Var& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    offsets.push_back(off);
    off += p.cols();
  }
  return make_node(std::move(out), parts, [offsets](Node& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      Node& p = *self.parents[i];
      if (p.requires_grad) accumulate(p, self.grad.middleCols(offsets[i], p.value.cols()));
    }
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const Eigen::Index cols = parts[0].cols();
  Eigen::Index rows = 0;
  for (const Var& p : parts) {
    if (p.cols() != cols) throw ShapeError("concat_rows: column counts differ");
    rows += p.rows();
  }
  Mat out(rows, cols);
  std::vector<Eigen::Index> offsets;
  Eigen::Index off = 0;
  for (const Var& p : parts) {
    out.middleRows(off, p.rows()) = p.value();
    offsets.push_back(off);
    off += p.rows();
  }
  return make_node(std::move(out), parts, [offsets](Node& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      Node& p = *self.parents[i];
      if (p.requires_grad) accumulate(p, self.grad.middleRows(offsets[i], p.value.rows()));
    }
  });
}

inline Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw ShapeError("slice_cols: out of range");
  Mat out = a.value().middleCols(start, count);
  return make_node(std::move(out), {a}, [start, count](Node& self) {
    Node& p = detail::parent(self, 0);
    Mat g = Mat::Zero(p.value.rows(), p.value.cols());
    g.middleCols(start, count) = self.grad;
    accumulate(p, g);
  });
}

inline Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw ShapeError("slice_rows: out of range");
  Mat out = a.value().middleRows(start, count);
  return make_node(std::move(out), {a}, [start, count](Node& self) {
    Node& p = detail::parent(self, 0);
    Mat g = Mat::Zero(p.value.rows(), p.value.cols());
    g.middleRows(start, count) = self.grad;
    accumulate(p, g);
  });
}

// Row i of the output is row index[i] of a. Indices may repeat.
inline Var gather_rows(const Var& a, std::vector<Eigen::Index> index) {
  Mat out(static_cast<Eigen::Index>(index.size()), a.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= a.rows()) throw ShapeError("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = a.value().row(index[i]);
  }
  return make_node(std::move(out), {a}, [index = std::move(index)](Node& self) {
    Node& p = detail::parent(self, 0);
    Mat g = Mat::Zero(p.value.rows(), p.value.cols());
    for (std::size_t i = 0; i < index.size(); ++i) g.row(index[i]) += self.grad.row(static_cast<Eigen::Index>(i));
    accumulate(p, g);
  });
}

// 1xN row repeated `times` times.
inline Var repeat_rows(const Var& r, Eigen::Index times) {
  if (r.rows() != 1) throw ShapeError("repeat_rows: expects a single row");
  Mat out = r.value().replicate(times, 1);
  return make_node(std::move(out), {r}, [](Node& self) {
    accumulate(detail::parent(self, 0), self.grad.colwise().sum());
  });
}

// [a, a, ..., a] along columns.
inline Var tile_cols(const Var& a, Eigen::Index times) {
  Mat out = a.value().replicate(1, times);
  const Eigen::Index width = a.cols();
  return make_node(std::move(out), {a}, [times, width](Node& self) {
    Mat g = Mat::Zero(self.grad.rows(), width);
    for (Eigen::Index t = 0; t < times; ++t) g += self.grad.middleCols(t * width, width);
    accumulate(detail::parent(self, 0), g);
  });
}

// Sums consecutive column blocks: out[:, k] = sum_j a[:, k*width + j].
inline Var block_sum_cols(const Var& a, Eigen::Index blocks, Eigen::Index width) {
  if (blocks * width != a.cols()) throw ShapeError("block_sum_cols: blocks*width != cols");
  Mat out(a.rows(), blocks);
  for (Eigen::Index k = 0; k < blocks; ++k) out.col(k) = a.value().middleCols(k * width, width).rowwise().sum();
  return make_node(std::move(out), {a}, [blocks, width](Node& self) {
    Node& p = detail::parent(self, 0);
    Mat g(p.value.rows(), p.value.cols());
    for (Eigen::Index k = 0; k < blocks; ++k) {
      g.middleCols(k * width, width) = self.grad.col(k).replicate(1, width);
    }
    accumulate(p, g);
  });
}

inline Var sum(const Var& a) {
  Mat out(1, 1);
  out(0, 0) = a.value().sum();
  return make_node(std::move(out), {a}, [](Node& self) {
    Node& p = detail::parent(self, 0);
    accumulate(p, Mat::Constant(p.value.rows(), p.value.cols(), self.grad(0, 0)));
  });
}

inline Var mean(const Var& a) {
  const double n = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / n);
}

// 1xN column sums.
inline Var col_sums(const Var& a) {
  Mat out = a.value().colwise().sum();
  return make_node(std::move(out), {a}, [](Node& self) {
    Node& p = detail::parent(self, 0);
    accumulate(p, self.grad.replicate(p.value.rows(), 1));
  });
}

// Bx1 row sums.
inline Var row_sums(const Var& a) {
  Mat out = a.value().rowwise().sum();
  return make_node(std::move(out), {a}, [](Node& self) {
    Node& p = detail::parent(self, 0);
    accumulate(p, self.grad.replicate(1, p.value.cols()));
  });
}

// Appends a constant-1 column: [a, 1].
inline Var append_ones(const Var& a) {
  Mat out(a.rows(), a.cols() + 1);
  out.leftCols(a.cols()) = a.value();
  out.col(a.cols()).setOnes();
  return make_node(std::move(out), {a}, [](Node& self) {
    Node& p = detail::parent(self, 0);
    accumulate(p, self.grad.leftCols(p.value.cols()));
  });
}

// Per-row outer product flattened row-major with a's index slowest:
// out[b, i*q + j] = a[b, i] * c[b, j].
inline Var rowwise_outer(const Var& a, const Var& c) {
  if (a.rows() != c.rows()) throw ShapeError("rowwise_outer: batch sizes differ");
  const Eigen::Index p = a.cols();
  const Eigen::Index q = c.cols();
  Mat out(a.rows(), p * q);
  for (Eigen::Index b = 0; b < a.rows(); ++b) {
    for (Eigen::Index i = 0; i < p; ++i) {
      out.row(b).segment(i * q, q) = a.value()(b, i) * c.value().row(b);
    }
  }
  return make_node(std::move(out), {a, c}, [p, q](Node& self) {
    Node& pa = detail::parent(self, 0);
    Node& pc = detail::parent(self, 1);
    const Eigen::Index batch = self.grad.rows();
    if (pa.requires_grad) {
      Mat g(batch, p);
      for (Eigen::Index b = 0; b < batch; ++b) {
        for (Eigen::Index i = 0; i < p; ++i) g(b, i) = self.grad.row(b).segment(i * q, q).dot(pc.value.row(b));
      }
      accumulate(pa, g);
    }
    if (pc.requires_grad) {
      Mat g = Mat::Zero(batch, q);
      for (Eigen::Index b = 0; b < batch; ++b) {
        for (Eigen::Index i = 0; i < p; ++i) g.row(b) += pa.value(b, i) * self.grad.row(b).segment(i * q, q);
      }
      accumulate(pc, g);
    }
  });
}

// Segments are row ranges [starts[b], starts[b+1]) of x. Output row b is the
// mean of segment b (zero for an empty segment).
inline Var segment_mean(const Var& x, std::vector<Eigen::Index> starts) {
  const Eigen::Index batch = static_cast<Eigen::Index>(starts.size()) - 1;
  Mat out = Mat::Zero(batch, x.cols());
  for (Eigen::Index b = 0; b < batch; ++b) {
    const Eigen::Index n = starts[b + 1] - starts[b];
    if (n > 0) out.row(b) = x.value().middleRows(starts[b], n).colwise().sum() / static_cast<double>(n);
  }
  return make_node(std::move(out), {x}, [starts = std::move(starts)](Node& self) {
    Node& p = detail::parent(self, 0);
    Mat g = Mat::Zero(p.value.rows(), p.value.cols());
    for (std::size_t b = 0; b + 1 < starts.size(); ++b) {
      const Eigen::Index n = starts[b + 1] - starts[b];
      if (n == 0) continue;
      g.middleRows(starts[b], n) = (self.grad.row(static_cast<Eigen::Index>(b)) / static_cast<double>(n)).replicate(n, 1);
    }
    accumulate(p, g);
  });
}

// Per-segment column sums accumulated in ascending value order, so the
// result is bitwise independent of the row order inside a segment.
inline Var segment_sum_sorted(const Var& x, std::vector<Eigen::Index> starts) {
  const Eigen::Index batch = static_cast<Eigen::Index>(starts.size()) - 1;
  Mat out = Mat::Zero(batch, x.cols());
  std::vector<double> column;
  for (Eigen::Index b = 0; b < batch; ++b) {
    const Eigen::Index n = starts[b + 1] - starts[b];
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      column.clear();
      for (Eigen::Index r = 0; r < n; ++r) column.push_back(x.value()(starts[b] + r, c));
      std::sort(column.begin(), column.end());
      double s = 0.0;
      for (double v : column) s += v;
      out(b, c) = s;
    }
  }
  return make_node(std::move(out), {x}, [starts = std::move(starts)](Node& self) {
    Node& p = detail::parent(self, 0);
    Mat g = Mat::Zero(p.value.rows(), p.value.cols());
    for (std::size_t b = 0; b + 1 < starts.size(); ++b) {
      const Eigen::Index n = starts[b + 1] - starts[b];
      if (n > 0) g.middleRows(starts[b], n) = self.grad.row(static_cast<Eigen::Index>(b)).replicate(n, 1);
    }
    accumulate(p, g);
  });
}

// Softmax over each row.
inline Mat softmax_rows_value(const Mat& logits) {
  Mat out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double mx = logits.row(r).maxCoeff();
    out.row(r) = (logits.row(r).array() - mx).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

inline Var softmax_rows(const Var& a) {
  return make_node(softmax_rows_value(a.value()), {a}, [](Node& self) {
    const Mat& y = self.value;
    Mat g(y.rows(), y.cols());
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const double dot = self.grad.row(r).dot(y.row(r));
      g.row(r) = y.row(r).array() * (self.grad.row(r).array() - dot);
    }
    accumulate(detail::parent(self, 0), g);
  });
}

// Multi-head scaled dot-product attention applied independently per sample.
// q holds batch*tq rows, k and v hold batch*tk rows (sample-major). Columns
// are split evenly into `heads` heads. When `weights` is non-null it receives
// the batch*heads attention matrices (tq x tk each, sample-major).
inline Var batched_attention(const Var& q, const Var& k, const Var& v, Eigen::Index batch,
                             Eigen::Index tq, Eigen::Index tk, Eigen::Index heads,
                             std::vector<Mat>* weights = nullptr) {
  if (q.rows() != batch * tq || k.rows() != batch * tk || v.rows() != batch * tk) {
    throw ShapeError("batched_attention: row counts do not match batch/time sizes");
  }
  if (q.cols() != k.cols() || q.cols() % heads != 0 || v.cols() % heads != 0) {
    throw ShapeError("batched_attention: head count must divide the model width");
  }
  const Eigen::Index dk = q.cols() / heads;
  const Eigen::Index dv = v.cols() / heads;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dk));
  std::vector<Mat> attn(static_cast<std::size_t>(batch * heads));
  Mat out(batch * tq, v.cols());
  for (Eigen::Index b = 0; b < batch; ++b) {
    for (Eigen::Index h = 0; h < heads; ++h) {
      const auto qb = q.value().block(b * tq, h * dk, tq, dk);
      const auto kb = k.value().block(b * tk, h * dk, tk, dk);
      const auto vb = v.value().block(b * tk, h * dv, tk, dv);
      Mat a = softmax_rows_value((qb * kb.transpose()) * inv_scale);
      out.block(b * tq, h * dv, tq, dv) = a * vb;
      attn[static_cast<std::size_t>(b * heads + h)] = std::move(a);
    }
  }
  if (weights != nullptr) *weights = attn;
  return make_node(std::move(out), {q, k, v},
                   [attn = std::move(attn), batch, tq, tk, heads, dk, dv, inv_scale](Node& self) {
    Node& pq = detail::parent(self, 0);
    Node& pk = detail::parent(self, 1);
    Node& pv = detail::parent(self, 2);
    Mat gq = Mat::Zero(pq.value.rows(), pq.value.cols());
    Mat gk = Mat::Zero(pk.value.rows(), pk.value.cols());
    Mat gv = Mat::Zero(pv.value.rows(), pv.value.cols());
    for (Eigen::Index b = 0; b < batch; ++b) {
      for (Eigen::Index h = 0; h < heads; ++h) {
        const Mat& a = attn[static_cast<std::size_t>(b * heads + h)];
        const auto go = self.grad.block(b * tq, h * dv, tq, dv);
        const auto qb = pq.value.block(b * tq, h * dk, tq, dk);
        const auto kb = pk.value.block(b * tk, h * dk, tk, dk);
        const auto vb = pv.value.block(b * tk, h * dv, tk, dv);
        gv.block(b * tk, h * dv, tk, dv) += a.transpose() * go;
        Mat ga = go * vb.transpose();
        Mat gs(tq, tk);
        for (Eigen::Index r = 0; r < tq; ++r) {
          const double dot = ga.row(r).dot(a.row(r));
          gs.row(r) = a.row(r).array() * (ga.row(r).array() - dot);
        }
        gs *= inv_scale;
        gq.block(b * tq, h * dk, tq, dk) += gs * kb;
        gk.block(b * tk, h * dk, tk, dk) += gs.transpose() * qb;
      }
    }
    accumulate(pq, gq);
    accumulate(pk, gk);
    accumulate(pv, gv);
  });
}

// Mean softmax cross-entropy of logits against integer class labels.
inline Var cross_entropy(const Var& logits, const std::vector<std::size_t>& labels) {
  if (static_cast<std::size_t>(logits.rows()) != labels.size()) {
    throw ShapeError("cross_entropy: label count does not match batch size");
  }
  if (!logits.value().allFinite()) throw DivergenceError("cross_entropy: non-finite logits");
  Mat probs = softmax_rows_value(logits.value());
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= static_cast<std::size_t>(logits.cols())) throw ShapeError("cross_entropy: label out of range");
    const auto r = static_cast<Eigen::Index>(i);
    const double mx = logits.value().row(r).maxCoeff();
    const double lse = mx + std::log((logits.value().row(r).array() - mx).exp().sum());
    total += lse - logits.value()(r, static_cast<Eigen::Index>(labels[i]));
  }
  const double n = static_cast<double>(labels.size());
  Mat out(1, 1);
  out(0, 0) = total / n;
  return make_node(std::move(out), {logits}, [probs = std::move(probs), labels, n](Node& self) {
    Mat g = probs;
    for (std::size_t i = 0; i < labels.size(); ++i) g(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(labels[i])) -= 1.0;
    accumulate(detail::parent(self, 0), g * (self.grad(0, 0) / n));
  });
}

// Mean over all entries of (pred - target)^2.
inline Var mse(const Var& pred, const Var& target) {
  return mean(square(sub(pred, target)));
}

// Per-row Euclidean norm (Bx1). The derivative of a zero row is zero.
inline Var row_norms(const Var& a) {
  return sqrt(row_sums(square(a)));
}

// Squared maximum mean discrepancy between the rows of x and y under the
// Gaussian kernel exp(-|u-v|^2 / (2 h^2)). The unbiased form drops the
// diagonal self-similarity terms.
inline Var mmd2(const Var& x, const Var& y, double bandwidth, bool unbiased = true) {
  if (bandwidth <= 0.0) throw ConfigError("mmd: bandwidth must be positive", "bandwidth");
  if (x.rows() == 0 || y.rows() == 0) throw ShapeError("mmd: empty sample set");
  if (x.cols() != y.cols()) throw ShapeError("mmd: sample dimensions differ");
  const Eigen::Index n = x.rows();
  const Eigen::Index m = y.rows();
  if (unbiased && (n < 2 || m < 2)) throw ShapeError("mmd: unbiased estimator needs at least 2 samples per set");
  const double inv2h2 = 1.0 / (2.0 * bandwidth * bandwidth);
  const double cxx = unbiased ? 1.0 / (static_cast<double>(n) * static_cast<double>(n - 1))
                              : 1.0 / (static_cast<double>(n) * static_cast<double>(n));
  const double cyy = unbiased ? 1.0 / (static_cast<double>(m) * static_cast<double>(m - 1))
                              : 1.0 / (static_cast<double>(m) * static_cast<double>(m));
  const double cxy = 2.0 / (static_cast<double>(n) * static_cast<double>(m));
  const Mat& xv = x.value();
  const Mat& yv = y.value();
  auto kern = [inv2h2](const auto& u, const auto& v) { return std::exp(-(u - v).squaredNorm() * inv2h2); };
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      if (unbiased && i == j) continue;
      sxx += kern(xv.row(i), xv.row(j));
    }
  }
  for (Eigen::Index i = 0; i < m; ++i) {
    for (Eigen::Index j = 0; j < m; ++j) {
      if (unbiased && i == j) continue;
      syy += kern(yv.row(i), yv.row(j));
    }
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < m; ++j) sxy += kern(xv.row(i), yv.row(j));
  }
  Mat out(1, 1);
  out(0, 0) = cxx * sxx + cyy * syy - cxy * sxy;
  return make_node(std::move(out), {x, y}, [inv2h2, cxx, cyy, cxy, unbiased, kern](Node& self) {
    Node& px = detail::parent(self, 0);
    Node& py = detail::parent(self, 1);
    const Mat& xv = px.value;
    const Mat& yv = py.value;
    const double go = self.grad(0, 0);
    // d k(u,v) / du = -k(u,v) (u - v) / h^2
    const double two_inv2h2 = 2.0 * inv2h2;
    if (px.requires_grad) {
      Mat g = Mat::Zero(xv.rows(), xv.cols());
      for (Eigen::Index i = 0; i < xv.rows(); ++i) {
        for (Eigen::Index j = 0; j < xv.rows(); ++j) {
          if (unbiased && i == j) continue;
          const double kv = kern(xv.row(i), xv.row(j));
          // both (i,j) and (j,i) terms depend on x_i
          g.row(i) += cxx * 2.0 * (-kv * two_inv2h2) * (xv.row(i) - xv.row(j));
        }
        for (Eigen::Index j = 0; j < yv.rows(); ++j) {
          const double kv = kern(xv.row(i), yv.row(j));
          g.row(i) -= cxy * (-kv * two_inv2h2) * (xv.row(i) - yv.row(j));
        }
      }
      accumulate(px, g * go);
    }
    if (py.requires_grad) {
      Mat g = Mat::Zero(yv.rows(), yv.cols());
      for (Eigen::Index i = 0; i < yv.rows(); ++i) {
        for (Eigen::Index j = 0; j < yv.rows(); ++j) {
          if (unbiased && i == j) continue;
          const double kv = kern(yv.row(i), yv.row(j));
          g.row(i) += cyy * 2.0 * (-kv * two_inv2h2) * (yv.row(i) - yv.row(j));
        }
        for (Eigen::Index j = 0; j < xv.rows(); ++j) {
          const double kv = kern(yv.row(i), xv.row(j));
          g.row(i) -= cxy * (-kv * two_inv2h2) * (yv.row(i) - xv.row(j));
        }
      }
      accumulate(py, g * go);
    }
  });
}

}  // namespace mmfuse::ad
