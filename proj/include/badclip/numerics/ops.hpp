// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "badclip/numerics/tensor.hpp"

namespace badclip::nx {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

// Eigen peels unaligned heads off vectorized reductions, so a product over a
// mapped heap buffer sums in an order that depends on its address. Products
// run on owned (aligned) copies to keep results bit-reproducible.
template <typename T>
RowMat<T> owned(const T* p, std::size_t rows, std::size_t cols) {
  return CMapMat<T>(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <typename T>
void store(const RowMat<T>& m, T* out) {
  std::copy(m.data(), m.data() + m.size(), out);
}

template <typename T>
void accumulate(const RowMat<T>& m, T* out) {
  for (Eigen::Index i = 0; i < m.size(); ++i) out[i] += m.data()[i];
}

inline void require(bool ok, const std::string& op, const Shape& a,
                    const Shape& b) {
  if (!ok) {
    throw ShapeError(op + ": shape mismatch " + to_string(a) + " vs " +
                     to_string(b));
  }
}

inline void require_rank(const std::string& op, const Shape& a,
                         std::size_t rank) {
  if (a.size() != rank) {
    throw ShapeError(op + ": expected rank " + std::to_string(rank) +
                     ", got shape " + to_string(a));
  }
}

template <typename T, typename F, typename DF>
Tensor<T> unary(const Tensor<T>& a, F f, DF df) {
  std::vector<T> out(a.numel());
  const auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  return make_result<T>(a.shape(), std::move(out), {a}, [df](Node<T>& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      p.grad[i] += self.grad[i] * df(p.value[i], self.value[i]);
    }
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank("matmul", a.shape(), 2);
  detail::require_rank("matmul", b.shape(), 2);
  detail::require(a.dim(1) == b.dim(0), "matmul", a.shape(), b.shape());
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n);
  detail::store<T>(detail::owned(a.data().data(), m, k) * detail::owned(b.data().data(), k, n),
                   out.data());
  return make_result<T>({m, n}, std::move(out), {a, b},
                        [m, k, n](detail::Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const auto g = detail::owned(self.grad.data(), m, n);
    if (pa.requires_grad) {
      detail::accumulate<T>(g * detail::owned(pb.value.data(), k, n).transpose(),
                            pa.grad.data());
    }
    if (pb.requires_grad) {
      detail::accumulate<T>(detail::owned(pa.value.data(), m, k).transpose() * g,
                            pb.grad.data());
    }
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail::require_rank("transpose", a.shape(), 2);
  const auto m = a.dim(0), n = a.dim(1);
  std::vector<T> out(m * n);
  detail::MapMat<T>(out.data(), n, m) =
      detail::CMapMat<T>(a.data().data(), m, n).transpose();
  return make_result<T>({n, m}, std::move(out), {a},
                        [m, n](detail::Node<T>& self) {
    auto& p = *self.parents[0];
    detail::MapMat<T>(p.grad.data(), m, n) +=
        detail::CMapMat<T>(self.grad.data(), n, m).transpose();
  });
}

// ---------------------------------------------------------------------------
// Elementwise binary

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(), "add", a.shape(), b.shape());
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_result<T>(a.shape(), std::move(out), {a, b},
                        [](detail::Node<T>& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(), "sub", a.shape(), b.shape());
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_result<T>(a.shape(), std::move(out), {a, b},
                        [](detail::Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (pa.requires_grad) pa.grad[i] += self.grad[i];
      if (pb.requires_grad) pb.grad[i] -= self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(), "mul", a.shape(), b.shape());
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_result<T>(a.shape(), std::move(out), {a, b},
                        [](detail::Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (pa.requires_grad) pa.grad[i] += self.grad[i] * pb.value[i];
      if (pb.requires_grad) pb.grad[i] += self.grad[i] * pa.value[i];
    }
  });
}

namespace detail {
inline bool is_trailing(const Shape& big, const Shape& small) {
  if (small.empty() || small.size() >= big.size()) return false;
  return std::equal(small.begin(), small.end(), big.end() - static_cast<std::ptrdiff_t>(small.size()));
}
}  // namespace detail

/// a[..., s] + b[s]: b is added to every trailing slice of a shaped like b.
template <typename T>
Tensor<T> add_broadcast(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(detail::is_trailing(a.shape(), b.shape()), "add_broadcast",
                  a.shape(), b.shape());
  const auto inner = b.numel();
  const auto outer = a.numel() / std::max<std::size_t>(inner, 1);
  std::vector<T> out(a.numel());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i)
      out[o * inner + i] = a[o * inner + i] + b[i];
  return make_result<T>(a.shape(), std::move(out), {a, b},
                        [outer, inner](detail::Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
    if (pb.requires_grad)
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i)
          pb.grad[i] += self.grad[o * inner + i];
  });
}

/// a[..., s] * b[s] elementwise on every trailing slice of a shaped like b.
template <typename T>
Tensor<T> mul_broadcast(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(detail::is_trailing(a.shape(), b.shape()), "mul_broadcast",
                  a.shape(), b.shape());
  const auto inner = b.numel();
  const auto outer = a.numel() / std::max<std::size_t>(inner, 1);
  std::vector<T> out(a.numel());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i)
      out[o * inner + i] = a[o * inner + i] * b[i];
  return make_result<T>(a.shape(), std::move(out), {a, b},
                        [outer, inner](detail::Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < inner; ++i) {
        const auto g = self.grad[o * inner + i];
        if (pa.requires_grad) pa.grad[o * inner + i] += g * pb.value[i];
        if (pb.requires_grad) pb.grad[i] += g * pa.value[o * inner + i];
      }
  });
}

/// a * s + c with constants s, c.
template <typename T>
Tensor<T> affine(const Tensor<T>& a, T s, T c = T(0)) {
  return detail::unary<T>(
      a, [s, c](T x) { return x * s + c; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  return affine(a, s, T(0));
}

/// a * s where s is a one-element tensor.
template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, const Tensor<T>& s) {
  if (s.numel() != 1) {
    throw ShapeError("mul_scalar: scalar operand has shape " +
                     to_string(s.shape()));
  }
  const T sv = s[0];
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * sv;
  return make_result<T>(a.shape(), std::move(out), {a, s},
                        [](detail::Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& ps = *self.parents[1];
    T acc = 0;
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (pa.requires_grad) pa.grad[i] += self.grad[i] * ps.value[0];
      acc += self.grad[i] * pa.value[i];
    }
    if (ps.requires_grad) ps.grad[0] += acc;
  });
}

// ---------------------------------------------------------------------------
// Elementwise unary

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return detail::unary<T>(
      a, [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  return detail::unary<T>(
      a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  return detail::unary<T>(
      a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return detail::unary<T>(
      a, [](T x) { return T(1) / (T(1) + std::exp(-x)); },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& a) {
  return detail::unary<T>(
      a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

/// Componentwise clamp; the gradient passes only where the input is inside
/// [lo, hi].
template <typename T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
  return detail::unary<T>(
      a, [lo, hi](T x) { return std::clamp(x, lo, hi); },
      [lo, hi](T x, T) { return (x >= lo && x <= hi) ? T(1) : T(0); });
}

// ---------------------------------------------------------------------------
// Last-axis operations

namespace detail {
inline std::pair<std::size_t, std::size_t> rows_cols(const Shape& s) {
  if (s.empty()) return {1, 1};
  const auto cols = s.back();
  return {cols ? numel_of(s) / cols : 0, cols};
}
inline Shape drop_last(const Shape& s) {
  if (s.size() <= 1) return Shape{1};
  return Shape(s.begin(), s.end() - 1);
}
}  // namespace detail

template <typename T>
Tensor<T> softmax(const Tensor<T>& a) {
  const auto [rows, cols] = detail::rows_cols(a.shape());
  std::vector<T> out(a.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = a.data().data() + r * cols;
    T* y = out.data() + r * cols;
    const T mx = *std::max_element(x, x + cols);
    T z = 0;
    for (std::size_t c = 0; c < cols; ++c) z += (y[c] = std::exp(x[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) y[c] /= z;
  }
  return make_result<T>(a.shape(), std::move(out), {a},
                        [rows, cols](detail::Node<T>& self) {
    auto& p = *self.parents[0];
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = self.value.data() + r * cols;
      const T* g = self.grad.data() + r * cols;
      T dot = 0;
      for (std::size_t c = 0; c < cols; ++c) dot += g[c] * y[c];
      for (std::size_t c = 0; c < cols; ++c)
        p.grad[r * cols + c] += y[c] * (g[c] - dot);
    }
  });
}

/// Numerically stable log-softmax over the last axis (log-sum-exp form).
template <typename T>
Tensor<T> log_softmax(const Tensor<T>& a) {
  const auto [rows, cols] = detail::rows_cols(a.shape());
  std::vector<T> out(a.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = a.data().data() + r * cols;
    T* y = out.data() + r * cols;
    const T mx = *std::max_element(x, x + cols);
    T z = 0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(x[c] - mx);
    const T lse = mx + std::log(z);
    for (std::size_t c = 0; c < cols; ++c) y[c] = x[c] - lse;
  }
  return make_result<T>(a.shape(), std::move(out), {a},
                        [rows, cols](detail::Node<T>& self) {
    auto& p = *self.parents[0];
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = self.value.data() + r * cols;
      const T* g = self.grad.data() + r * cols;
      T gs = 0;
      for (std::size_t c = 0; c < cols; ++c) gs += g[c];
      for (std::size_t c = 0; c < cols; ++c)
        p.grad[r * cols + c] += g[c] - std::exp(y[c]) * gs;
    }
  });
}

/// Euclidean norm over the last axis; the last dimension is dropped.
template <typename T>
Tensor<T> l2norm(const Tensor<T>& a) {
  const auto [rows, cols] = detail::rows_cols(a.shape());
  std::vector<T> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T s = 0;
    for (std::size_t c = 0; c < cols; ++c) s += a[r * cols + c] * a[r * cols + c];
    out[r] = std::sqrt(s);
  }
  return make_result<T>(detail::drop_last(a.shape()), std::move(out), {a},
                        [rows, cols](detail::Node<T>& self) {
    auto& p = *self.parents[0];
    for (std::size_t r = 0; r < rows; ++r) {
      const T n = self.value[r];
      if (n == T(0)) continue;
      const T g = self.grad[r] / n;
      for (std::size_t c = 0; c < cols; ++c)
        p.grad[r * cols + c] += g * p.value[r * cols + c];
    }
  });
}

/// Sum over the last axis; the last dimension is dropped.
template <typename T>
Tensor<T> sum_last(const Tensor<T>& a) {
  const auto [rows, cols] = detail::rows_cols(a.shape());
  std::vector<T> out(rows, T(0));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r] += a[r * cols + c];
  return make_result<T>(detail::drop_last(a.shape()), std::move(out), {a},
                        [rows, cols](detail::Node<T>& self) {
    auto& p = *self.parents[0];
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) p.grad[r * cols + c] += self.grad[r];
  });
}

/// Divides row r of a[rows, cols] by s[r].
template <typename T>
Tensor<T> div_rows(const Tensor<T>& a, const Tensor<T>& s) {
  const auto [rows, cols] = detail::rows_cols(a.shape());
  detail::require(s.numel() == rows, "div_rows", a.shape(), s.shape());
  std::vector<T> out(a.numel());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = a[r * cols + c] / s[r];
  return make_result<T>(a.shape(), std::move(out), {a, s},
                        [rows, cols](detail::Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& ps = *self.parents[1];
    for (std::size_t r = 0; r < rows; ++r) {
      const T sv = ps.value[r];
      T acc = 0;
      for (std::size_t c = 0; c < cols; ++c) {
        const auto i = r * cols + c;
        if (pa.requires_grad) pa.grad[i] += self.grad[i] / sv;
        acc += self.grad[i] * self.value[i];
      }
      if (ps.requires_grad) ps.grad[r] -= acc / sv;
    }
  });
}

/// Row-wise unit normalization: a / ‖a‖ over the last axis.
template <typename T>
Tensor<T> normalize_rows(const Tensor<T>& a) {
  return div_rows(a, l2norm(a));
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = 0;
  for (auto v : a.data()) s += v;
  return make_result<T>({1}, {s}, {a}, [](detail::Node<T>& self) {
    auto& p = *self.parents[0];
    for (auto& g : p.grad) g += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.numel() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

// ---------------------------------------------------------------------------
// Structural

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel_of(shape) != a.numel()) {
    throw ShapeError("reshape: " + to_string(a.shape()) + " -> " +
                     to_string(shape));
  }
  return make_result<T>(std::move(shape), a.values(), {a},
                        [](detail::Node<T>& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
  });
}

/// Concatenation along axis 0; trailing dimensions must agree.
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Shape shape = parts.front().shape();
  std::size_t lead = 0;
  std::vector<T> out;
  for (const auto& p : parts) {
    detail::require(p.rank() == shape.size() &&
                        std::equal(shape.begin() + 1, shape.end(),
                                   p.shape().begin() + 1),
                    "concat", shape, p.shape());
    lead += p.dim(0);
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  shape[0] = lead;
  return make_result<T>(std::move(shape), std::move(out), parts,
                        [](detail::Node<T>& self) {
    std::size_t off = 0;
    for (auto& p : self.parents) {
      const auto n = p->value.size();
      if (p->requires_grad)
        for (std::size_t i = 0; i < n; ++i) p->grad[i] += self.grad[off + i];
      off += n;
    }
  });
}

/// Rows of a[R, ...] selected by index (repeats allowed).
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& a, std::vector<std::size_t> index) {
  if (a.rank() == 0) throw ShapeError("gather_rows: rank-0 input");
  const auto rows = a.dim(0);
  const auto width = rows ? a.numel() / rows : 0;
  std::vector<T> out(index.size() * width);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= rows) {
      throw ShapeError("gather_rows: index " + std::to_string(index[i]) +
                       " out of range for shape " + to_string(a.shape()));
    }
    std::copy_n(a.data().begin() + index[i] * width, width,
                out.begin() + i * width);
  }
  Shape shape = a.shape();
  shape[0] = index.size();
  return make_result<T>(std::move(shape), std::move(out), {a},
                        [index = std::move(index), width](detail::Node<T>& self) {
    auto& p = *self.parents[0];
    for (std::size_t i = 0; i < index.size(); ++i)
      for (std::size_t c = 0; c < width; ++c)
        p.grad[index[i] * width + c] += self.grad[i * width + c];
  });
}

/// Mean of consecutive row segments of a[R, h]; segment g spans rows
/// [offsets[g], offsets[g+1]).
template <typename T>
Tensor<T> segment_mean(const Tensor<T>& a, std::vector<std::size_t> offsets) {
  detail::require_rank("segment_mean", a.shape(), 2);
  if (offsets.size() < 2 || offsets.front() != 0 || offsets.back() != a.dim(0)) {
    throw ShapeError("segment_mean: offsets do not cover " + to_string(a.shape()));
  }
  const auto h = a.dim(1);
  const auto groups = offsets.size() - 1;
  std::vector<T> out(groups * h, T(0));
  for (std::size_t g = 0; g < groups; ++g) {
    const auto len = offsets[g + 1] - offsets[g];
    if (len == 0) throw ShapeError("segment_mean: empty segment");
    for (auto r = offsets[g]; r < offsets[g + 1]; ++r)
      for (std::size_t c = 0; c < h; ++c) out[g * h + c] += a[r * h + c];
    for (std::size_t c = 0; c < h; ++c) out[g * h + c] /= static_cast<T>(len);
  }
  return make_result<T>({groups, h}, std::move(out), {a},
                        [offsets = std::move(offsets), h](detail::Node<T>& self) {
    auto& p = *self.parents[0];
    for (std::size_t g = 0; g + 1 < offsets.size(); ++g) {
      const T inv = T(1) / static_cast<T>(offsets[g + 1] - offsets[g]);
      for (auto r = offsets[g]; r < offsets[g + 1]; ++r)
        for (std::size_t c = 0; c < h; ++c)
          p.grad[r * h + c] += self.grad[g * h + c] * inv;
    }
  });
}

/// out[r] = a[r, index[r]].
template <typename T>
Tensor<T> pick(const Tensor<T>& a, std::vector<std::size_t> index) {
  detail::require_rank("pick", a.shape(), 2);
  const auto rows = a.dim(0), cols = a.dim(1);
  if (index.size() != rows) {
    throw ShapeError("pick: " + std::to_string(index.size()) +
                     " indices for shape " + to_string(a.shape()));
  }
  std::vector<T> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    if (index[r] >= cols) {
      throw ShapeError("pick: column " + std::to_string(index[r]) +
                       " out of range for shape " + to_string(a.shape()));
    }
    out[r] = a[r * cols + index[r]];
  }
  return make_result<T>({rows}, std::move(out), {a},
                        [index = std::move(index), cols](detail::Node<T>& self) {
    auto& p = *self.parents[0];
    for (std::size_t r = 0; r < index.size(); ++r)
      p.grad[r * cols + index[r]] += self.grad[r];
  });
}

/// Mean negative log-likelihood of `targets` under softmax(logits).
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits,
                        std::vector<std::size_t> targets) {
  return scale(mean(pick(log_softmax(logits), std::move(targets))), T(-1));
}

}  // namespace badclip::nx
