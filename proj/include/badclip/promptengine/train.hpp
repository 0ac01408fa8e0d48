// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "badclip/promptengine/prompt_learner.hpp"
#include "badclip/promptengine/task.hpp"

namespace badclip::prompt {

struct CleanTrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double learning_rate = 0.002;
  std::size_t lr_warmup_epochs = 1;
  std::size_t context_length = 4;
  std::uint64_t seed = 0;
};

/// Prompt learning on clean few-shot data only: cross-entropy of the
/// posterior, SGD with warm-up + cosine. Returns per-epoch mean losses.
template <typename T, typename Learner>
  requires PromptLearner<Learner, T>
std::vector<double> train_clean(const TwoTowerModel<T>& model, Learner& learner,
                                const LabeledImages<T>& train, const CleanTrainConfig& cfg) {
  if (!model.frozen()) throw twotower::FrozenModelError("prompt learning needs a frozen model");
  if (train.size() == 0 || cfg.batch_size == 0) {
    throw std::invalid_argument("train_clean: empty training set or batch");
  }
  const auto features = model.encode_images(train.images).detach();
  const auto classes = train.class_embeddings(model);
  const nx::SgdConfig schedule{cfg.learning_rate, nx::Schedule::kWarmupCosine,
                               cfg.lr_warmup_epochs, cfg.epochs};
  const auto per_epoch = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
  learner.set_trainable(true);
  auto params = learner.parameters();
  nx::Rng rng(cfg.seed);
  std::vector<double> losses;
  std::size_t iteration = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto perm = rng.permutation(train.size());
    double total = 0;
    std::size_t batches = 0;
    for (std::size_t i = 0; i < perm.size(); i += cfg.batch_size) {
      std::vector<std::size_t> idx(perm.begin() + static_cast<std::ptrdiff_t>(i),
                                   perm.begin() + static_cast<std::ptrdiff_t>(
                                                      std::min(perm.size(), i + cfg.batch_size)));
      std::vector<std::size_t> labels;
      for (auto k : idx) labels.push_back(train.labels[k]);
      auto loss = nx::cross_entropy(
          learner.logits(model, nx::gather_rows(features, idx), classes), labels);
      if (!std::isfinite(static_cast<double>(loss.item()))) {
        throw nx::NonFiniteError("train_clean: non-finite loss");
      }
      nx::backward(loss, params);
      nx::sgd_step<T>(params, nx::learning_rate_at(schedule, iteration++, per_epoch));
      total += static_cast<double>(loss.item());
      ++batches;
    }
    losses.push_back(total / static_cast<double>(batches));
  }
  learner.set_trainable(false);
  return losses;
}

}  // namespace badclip::prompt
