// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "badclip/defensesuite/clp.hpp"
#include "badclip/defensesuite/neural_cleanse.hpp"
#include "badclip/evalsuite/metrics.hpp"
#include "badclip/harness/pipeline.hpp"

namespace badclip::harness {

using nx::Tensor;

/// Evenly spaced training images used as the defender's clean set.
template <typename T>
Tensor<T> cleanse_images(const DeskTask<T>& task, std::size_t count) {
  const auto n = task.train.size();
  count = std::min(count, n);
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < count; ++i) idx.push_back(i * n / count);
  return nx::gather_rows(task.train.images, idx);
}

/// Neural Cleanse on the composite classifier "image encoder + posterior
/// with the learner's frozen prompts" over the seen classes.
template <typename T, typename Learner>
defense::ReconstructedTrigger cleanse(const TwoTowerModel<T>& model, const Learner& learner,
                                      const DeskTask<T>& task, const ExperimentConfig& cfg,
                                      std::uint64_t seed) {
  const auto classes = task.train.class_embeddings(model);
  const auto logits = [&](const Tensor<T>& x) {
    return learner.logits(model, model.encode_images(x), classes);
  };
  auto cc = cfg.defense.cleanse;
  cc.seed = seed;
  return defense::neural_cleanse<T>(logits, cleanse_images(task, cfg.defense.cleanse_images),
                                    classes.dim(0), cc);
}

/// CLP over the configured u values; ACC and ASR re-measured on the seen
/// test split after each pruning.
template <typename T, typename Learner>
std::vector<defense::PruneReport> clp_sweep(const TwoTowerModel<T>& model, const Learner& learner,
                                            const attack::Trigger<T>& trigger,
                                            const DeskTask<T>& task, const ExperimentConfig& cfg) {
  std::vector<defense::PruneReport> out;
  for (double u : cfg.defense.clp_u) {
    auto pruned = defense::clp_prune(model, u);
    pruned.report.acc_after = eval::accuracy(pruned.model, learner, task.seen_test);
    pruned.report.asr_after = eval::attack_success_rate(pruned.model, learner, task.seen_test,
                                                        trigger, cfg.attack.target_class);
    out.push_back(std::move(pruned.report));
  }
  return out;
}

}  // namespace badclip::harness
