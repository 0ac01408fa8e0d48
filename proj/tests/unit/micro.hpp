// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "badclip/attackengine/badclip.hpp"
#include "badclip/promptengine/prompt_learner.hpp"
#include "badclip/twotower/model.hpp"

namespace micro {

namespace nx = badclip::nx;
using badclip::twotower::ModelConfig;
using badclip::twotower::TwoTowerModel;
using badclip::twotower::Vocabulary;

// K = 2 classes, d = e = 8, N = 2 context tokens, 8x8 images.
inline ModelConfig config() {
  ModelConfig c;
  c.image_size = 8;
  c.conv_channels = {4};
  c.feature_dim = 8;
  c.embed_dim = 8;
  c.context_length = 2;
  c.text_hidden = 16;
  return c;
}

template <typename T>
TwoTowerModel<T> model(std::uint64_t seed = 3) {
  TwoTowerModel<T> m(config(), Vocabulary::standard(), seed);
  m.freeze();
  return m;
}

inline const std::vector<std::string>& classes() {
  static const std::vector<std::string> c{"red solid circle", "green striped circle"};
  return c;
}

/// Pixels in [0.2, 0.8] so a small trigger never hits the range clamp.
template <typename T>
nx::Tensor<T> images(std::size_t n, std::uint64_t seed = 5) {
  nx::Rng rng(seed);
  nx::Tensor<T> x({n, 3, 8, 8});
  for (auto& v : x.mutable_data()) v = static_cast<T>(rng.uniform(0.2, 0.8));
  return x;
}

/// Generator with every weight random, so no gradient path is trivially zero.
template <typename T>
badclip::prompt::ContextGenerator<T> generator(const TwoTowerModel<T>& m,
                                               std::uint64_t seed = 11) {
  badclip::prompt::ContextGenerator<T> g(m, 2, seed);
  nx::Rng rng(seed + 1);
  for (auto& [_, p] : g.named_parameters())
    for (auto& v : p->mutable_data()) v += static_cast<T>(rng.normal(0.0, 0.3));
  return g;
}

template <typename T>
badclip::attack::Trigger<T> trigger(double eps, std::uint64_t seed = 13) {
  auto t = badclip::attack::Trigger<T>::zeros({3, 8, 8}, eps);
  nx::Rng rng(seed);
  for (auto& v : t.delta.mutable_data()) v = static_cast<T>(rng.uniform(-eps, eps));
  return t;
}

}  // namespace micro
