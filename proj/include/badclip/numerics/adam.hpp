// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "badclip/numerics/sgd.hpp"
#include "badclip/numerics/tensor.hpp"

namespace badclip::nx {

/// Adam with bias correction. Only used for contrastive pre-training of the
/// victim model; prompt learning and trigger optimization use sgd_step.
template <typename T>
class Adam {
 public:
  Adam(std::vector<Tensor<T>> params, double lr, double beta1 = 0.9,
       double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
    for (const auto& p : params_) {
      m_.emplace_back(p.numel(), 0.0);
      v_.emplace_back(p.numel(), 0.0);
    }
  }

  std::vector<Tensor<T>>& params() { return params_; }

  void step(double lr_scale = 1.0) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      const auto g = params_[k].grad();
      auto p = params_[k].mutable_data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        if (!std::isfinite(gi)) {
          throw NonFiniteError("adam: non-finite gradient in parameter shaped " +
                               to_string(params_[k].shape()));
        }
        m_[k][i] = b1_ * m_[k][i] + (1 - b1_) * gi;
        v_[k][i] = b2_ * v_[k][i] + (1 - b2_) * gi * gi;
        const double upd = lr_ * lr_scale * (m_[k][i] / c1) /
                           (std::sqrt(v_[k][i] / c2) + eps_);
        p[i] = static_cast<T>(static_cast<double>(p[i]) - upd);
      }
    }
  }

 private:
  std::vector<Tensor<T>> params_;
  double lr_, b1_, b2_, eps_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace badclip::nx
