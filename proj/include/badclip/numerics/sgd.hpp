// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>

#include "badclip/numerics/tensor.hpp"

namespace badclip::nx {

enum class Schedule { kFixed, kWarmupCosine };

struct SgdConfig {
  double learning_rate = 0.002;
  Schedule schedule = Schedule::kFixed;
  std::size_t warmup_epochs = 0;
  std::size_t total_epochs = 1;

  void validate() const {
    if (!(learning_rate > 0.0)) {
      throw std::invalid_argument("SgdConfig: learning_rate must be > 0");
    }
    if (total_epochs == 0) {
      throw std::invalid_argument("SgdConfig: total_epochs must be > 0");
    }
    if (schedule == Schedule::kWarmupCosine && warmup_epochs >= total_epochs) {
      throw std::invalid_argument(
          "SgdConfig: warmup_epochs must be < total_epochs");
    }
  }
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Learning rate at a global iteration index. Warm-up rises linearly from 0
/// over the first warmup_epochs; afterwards
/// lr = peak * 0.5 * (1 + cos(pi * j / J)) with j counted from the end of
/// warm-up and J the remaining iterations.
inline double learning_rate_at(const SgdConfig& cfg, std::size_t iteration,
                               std::size_t iters_per_epoch) {
  if (cfg.schedule == Schedule::kFixed) return cfg.learning_rate;
  const double warm = static_cast<double>(cfg.warmup_epochs * iters_per_epoch);
  const double total = static_cast<double>(cfg.total_epochs * iters_per_epoch);
  const double i = static_cast<double>(iteration);
  if (i < warm) return cfg.learning_rate * i / warm;
  const double span = total - warm;
  const double j = std::min(i - warm, span);
  return cfg.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * j / span));
}

/// p <- p - lr * grad(p) for each parameter, reading the gradient buffers
/// that backward() filled in.
template <typename T>
void sgd_step(std::span<Tensor<T>> params, double lr) {
  for (auto& p : params) {
    const auto g = p.grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!std::isfinite(static_cast<double>(g[i]))) {
        throw NonFiniteError("sgd_step: non-finite gradient at element " +
                             std::to_string(i) + " of parameter shaped " +
                             to_string(p.shape()));
      }
    }
    auto v = p.mutable_data();
    const T step = static_cast<T>(lr);
    for (std::size_t i = 0; i < g.size(); ++i) v[i] -= step * g[i];
  }
}

template <typename T>
void sgd_step(std::span<Tensor<T>> params, const SgdConfig& cfg,
              std::size_t iteration, std::size_t iters_per_epoch) {
  sgd_step(params, learning_rate_at(cfg, iteration, iters_per_epoch));
}

}  // namespace badclip::nx
