// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

#include "badclip/numerics/tensor.hpp"

namespace badclip::nx {

/// Seeded generator shared by every stochastic component.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  std::size_t index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
  }
  std::vector<std::size_t> permutation(std::size_t n) {
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), std::size_t{0});
    std::shuffle(p.begin(), p.end(), engine_);
    return p;
  }
  std::uint64_t next() { return engine_(); }

  template <typename T>
  Tensor<T> normal_tensor(Shape shape, double stddev) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.mutable_data()) v = static_cast<T>(normal(0.0, stddev));
    return t;
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace badclip::nx
