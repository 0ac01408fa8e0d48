// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "badclip/numerics/tensor.hpp"

namespace badclip::nx {

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every
/// coordinate of `point`. The point is restored before returning.
template <typename T>
std::vector<T> finite_difference_grad(const std::function<T()>& fn,
                                      Tensor<T>& point, T h) {
  if (!(h > T(0))) throw std::invalid_argument("finite_difference_grad: h <= 0");
  auto x = point.mutable_data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T saved = x[i];
    x[i] = saved + h;
    const T up = fn();
    x[i] = saved - h;
    const T down = fn();
    x[i] = saved;
    if (!std::isfinite(static_cast<double>(up)) ||
        !std::isfinite(static_cast<double>(down))) {
      throw std::domain_error("finite_difference_grad: non-finite value at coordinate " +
                              std::to_string(i));
    }
    out[i] = (up - down) / (T(2) * h);
  }
  return out;
}

/// Largest absolute difference divided by the largest magnitude in either
/// vector.
template <typename T>
double relative_error(const std::vector<T>& a, const std::vector<T>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("relative_error: size mismatch");
  double num = 0, den = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num = std::max(num, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    den = std::max({den, std::abs(static_cast<double>(a[i])),
                    std::abs(static_cast<double>(b[i]))});
  }
  return den == 0 ? num : num / den;
}

}  // namespace badclip::nx
