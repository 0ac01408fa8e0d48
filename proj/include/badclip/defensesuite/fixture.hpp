// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <vector>

#include "badclip/numerics.hpp"
#include "badclip/promptengine/prompt_learner.hpp"
#include "badclip/promptengine/task.hpp"

namespace badclip::defense {

using nx::Tensor;
using twotower::TwoTowerModel;

/// Solid square stamped into the bottom-right corner of every image.
struct PatchSpec {
  std::size_t size = 2;
  float value = 1.0f;
};

template <typename T>
Tensor<T> stamp_patch(const Tensor<T>& images, const PatchSpec& patch) {
  auto out = images.clone();
  const auto B = images.dim(0), C = images.dim(1), S = images.dim(2);
  if (patch.size > S) throw std::invalid_argument("stamp_patch: patch larger than image");
  auto v = out.mutable_data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = S - patch.size; y < S; ++y)
        for (std::size_t x = S - patch.size; x < S; ++x)
          v[((b * C + c) * S + y) * S + x] = static_cast<T>(patch.value);
  return out;
}

struct PatchBackdoorConfig {
  PatchSpec patch;
  std::size_t target = 0;
  double poison_fraction = 0.25;
  std::size_t epochs = 40;
  std::size_t batch_size = 16;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
};

/// Classic poisoned fine-tuning: the image encoder is trained so that the
/// fixed-prompt classifier maps patched images to the target class and
/// clean images to their labels. Returns a frozen backdoored copy.
template <typename T>
TwoTowerModel<T> patch_backdoor(const TwoTowerModel<T>& model,
                                const prompt::StaticContext<T>& prompts,
                                const prompt::LabeledImages<T>& data,
                                const PatchBackdoorConfig& cfg) {
  if (data.size() == 0) throw std::invalid_argument("patch_backdoor: no data");
  auto out = model.trainable_clone();
  std::vector<Tensor<T>> params;
  for (auto& [name, p] : out.named_parameters()) {
    if (name.rfind("image.", 0) == 0) {
      p->set_requires_grad(true);
      params.push_back(*p);
    }
  }
  const auto text = model.with_context_length(prompts.context_length())
                        .encode_prompts(prompts.context(), data.class_embeddings(model))
                        .detach();
  const auto scale = model.logit_scale().detach();
  nx::Adam<T> opt(params, cfg.learning_rate);
  nx::Rng rng(cfg.seed);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto perm = rng.permutation(data.size());
    for (std::size_t i = 0; i < perm.size(); i += cfg.batch_size) {
      std::vector<std::size_t> idx(perm.begin() + static_cast<std::ptrdiff_t>(i),
                                   perm.begin() + static_cast<std::ptrdiff_t>(
                                                      std::min(perm.size(), i + cfg.batch_size)));
      std::vector<std::size_t> poisoned, clean_idx;
      for (auto k : idx) (rng.uniform() < cfg.poison_fraction ? poisoned : clean_idx).push_back(k);
      std::vector<Tensor<T>> parts;
      std::vector<std::size_t> labels;
      if (!clean_idx.empty()) {
        parts.push_back(nx::gather_rows(data.images, clean_idx));
        for (auto k : clean_idx) labels.push_back(data.labels[k]);
      }
      if (!poisoned.empty()) {
        parts.push_back(stamp_patch(nx::gather_rows(data.images, poisoned), cfg.patch));
        labels.insert(labels.end(), poisoned.size(), cfg.target);
      }
      auto images = nx::concat<T>(parts);
      auto sims = twotower::cosine_matrix(out.encode_images(images), text);
      auto loss = nx::cross_entropy(nx::mul_scalar(sims, scale), labels);
      nx::backward(loss, opt.params());
      opt.step();
    }
  }
  out.freeze();
  return out;
}

}  // namespace badclip::defense
