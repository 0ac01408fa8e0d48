// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <memory>
#include <vector>

#include "badclip/numerics/ops.hpp"

namespace badclip::nx {

struct Conv2dGeometry {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

namespace detail {

struct ConvDims {
  std::size_t batch, in_c, in_h, in_w, out_c, k, out_h, out_w, stride, pad;
  std::size_t patch() const { return in_c * k * k; }
  std::size_t pixels() const { return out_h * out_w; }
};

// cols[(c*k + ky)*k + kx, oy*out_w + ox] = x[c, oy*s + ky - p, ox*s + kx - p]
template <typename T>
void im2col(const T* x, const ConvDims& d, T* cols) {
  for (std::size_t c = 0; c < d.in_c; ++c)
    for (std::size_t ky = 0; ky < d.k; ++ky)
      for (std::size_t kx = 0; kx < d.k; ++kx) {
        T* row = cols + ((c * d.k + ky) * d.k + kx) * d.pixels();
        for (std::size_t oy = 0; oy < d.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * d.stride + ky) -
                          static_cast<std::ptrdiff_t>(d.pad);
          for (std::size_t ox = 0; ox < d.out_w; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * d.stride + kx) -
                            static_cast<std::ptrdiff_t>(d.pad);
            const bool inside = iy >= 0 && ix >= 0 &&
                                iy < static_cast<std::ptrdiff_t>(d.in_h) &&
                                ix < static_cast<std::ptrdiff_t>(d.in_w);
            row[oy * d.out_w + ox] =
                inside ? x[(c * d.in_h + iy) * d.in_w + ix] : T(0);
          }
        }
      }
}

template <typename T>
void col2im(const T* cols, const ConvDims& d, T* dx) {
  for (std::size_t c = 0; c < d.in_c; ++c)
    for (std::size_t ky = 0; ky < d.k; ++ky)
      for (std::size_t kx = 0; kx < d.k; ++kx) {
        const T* row = cols + ((c * d.k + ky) * d.k + kx) * d.pixels();
        for (std::size_t oy = 0; oy < d.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * d.stride + ky) -
                          static_cast<std::ptrdiff_t>(d.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.in_h)) continue;
          for (std::size_t ox = 0; ox < d.out_w; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * d.stride + kx) -
                            static_cast<std::ptrdiff_t>(d.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(d.in_w)) continue;
            dx[(c * d.in_h + iy) * d.in_w + ix] += row[oy * d.out_w + ox];
          }
        }
      }
}

}  // namespace detail

/// 2-D convolution. x: [B, C, H, W], weight: [O, C, k, k], bias: [O].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight,
                 const Tensor<T>& bias, Conv2dGeometry geo) {
  detail::require_rank("conv2d", x.shape(), 4);
  detail::require_rank("conv2d", weight.shape(), 4);
  detail::require(x.dim(1) == weight.dim(1) && weight.dim(2) == weight.dim(3),
                  "conv2d", x.shape(), weight.shape());
  detail::require(bias.numel() == weight.dim(0), "conv2d(bias)",
                  weight.shape(), bias.shape());
  if (geo.stride == 0) throw ShapeError("conv2d: stride must be positive");
  detail::ConvDims d{};
  d.batch = x.dim(0);
  d.in_c = x.dim(1);
  d.in_h = x.dim(2);
  d.in_w = x.dim(3);
  d.out_c = weight.dim(0);
  d.k = weight.dim(2);
  d.stride = geo.stride;
  d.pad = geo.padding;
  if (d.in_h + 2 * d.pad < d.k || d.in_w + 2 * d.pad < d.k) {
    throw ShapeError("conv2d: kernel larger than padded input " +
                     to_string(x.shape()));
  }
  d.out_h = (d.in_h + 2 * d.pad - d.k) / d.stride + 1;
  d.out_w = (d.in_w + 2 * d.pad - d.k) / d.stride + 1;

  const auto in_plane = d.in_c * d.in_h * d.in_w;
  const auto out_plane = d.out_c * d.pixels();
  // aligned im2col storage keeps the per-sample offsets at fixed alignment
  auto cols = std::make_shared<Eigen::Matrix<T, Eigen::Dynamic, 1>>(
      static_cast<Eigen::Index>(d.batch * d.patch() * d.pixels()));
  std::vector<T> out(d.batch * out_plane);
  const auto w = detail::owned(weight.data().data(), d.out_c, d.patch());
  const auto b = detail::owned(bias.data().data(), d.out_c, 1);
  for (std::size_t n = 0; n < d.batch; ++n) {
    T* c = cols->data() + n * d.patch() * d.pixels();
    detail::im2col(x.data().data() + n * in_plane, d, c);
    detail::RowMat<T> y = w * detail::owned<T>(c, d.patch(), d.pixels());
    y.colwise() += b.col(0);
    detail::store(y, out.data() + n * out_plane);
  }
  return make_result<T>(
      {d.batch, d.out_c, d.out_h, d.out_w}, std::move(out), {x, weight, bias},
      [d, cols, in_plane, out_plane](detail::Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        auto& pb = *self.parents[2];
        const auto w = detail::owned(pw.value.data(), d.out_c, d.patch());
        for (std::size_t n = 0; n < d.batch; ++n) {
          const auto g = detail::owned(self.grad.data() + n * out_plane, d.out_c, d.pixels());
          const T* c = cols->data() + n * d.patch() * d.pixels();
          if (pw.requires_grad) {
            detail::accumulate<T>(g * detail::owned(c, d.patch(), d.pixels()).transpose(),
                                  pw.grad.data());
          }
          if (pb.requires_grad) {
            detail::RowMat<T> s = g.rowwise().sum();
            detail::accumulate(s, pb.grad.data());
          }
          if (px.requires_grad) {
            detail::RowMat<T> dcols = w.transpose() * g;
            detail::col2im(dcols.data(), d, px.grad.data() + n * in_plane);
          }
        }
      });
}

}  // namespace badclip::nx
