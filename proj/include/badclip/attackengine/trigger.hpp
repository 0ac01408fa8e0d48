// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>

#include "badclip/io/container.hpp"
#include "badclip/numerics.hpp"

namespace badclip::attack {

using nx::Tensor;

/// Additive image perturbation with an l-infinity budget, in [0, 1] pixel
/// units.
template <typename T>
struct Trigger {
  Tensor<T> delta;
  double epsilon = 4.0 / 255.0;

  static Trigger zeros(nx::Shape image_shape, double epsilon) {
    return {Tensor<T>(std::move(image_shape)), epsilon};
  }

  double linf() const {
    double m = 0;
    for (auto v : delta.data()) m = std::max(m, std::abs(static_cast<double>(v)));
    return m;
  }

  bool feasible() const { return linf() <= epsilon; }

  static constexpr const char* kind() { return "trigger"; }

  void store(io::ArrayBundle& bundle) const {
    bundle.put("trigger.delta", delta);
    bundle.meta()["trigger_epsilon"] = epsilon;
  }
  static Trigger restore(const io::ArrayBundle& bundle, bool allow_conversion = false) {
    return {bundle.get<T>("trigger.delta", allow_conversion),
            bundle.meta().at("trigger_epsilon").get<double>()};
  }
};

/// Clamps every component of delta to [-eps, eps], in place. The bound is
/// rounded toward zero in T so the stored values never exceed eps.
template <typename T>
void project_linf(Trigger<T>& trigger) {
  T eps = static_cast<T>(trigger.epsilon);
  if (static_cast<double>(eps) > trigger.epsilon) eps = std::nextafter(eps, T(0));
  for (auto& v : trigger.delta.mutable_data()) v = std::clamp(v, -eps, eps);
}

/// x + delta clamped to the valid pixel range. images: [B, 3, S, S] or a
/// single [3, S, S] image.
template <typename T>
Tensor<T> apply_trigger(const Tensor<T>& images, const Trigger<T>& trigger) {
  if (images.shape() == trigger.delta.shape()) {
    return nx::clamp(nx::add(images, trigger.delta), T(0), T(1));
  }
  return nx::clamp(nx::add_broadcast(images, trigger.delta), T(0), T(1));
}

}  // namespace badclip::attack
