// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <functional>
#include <stdexcept>
#include <vector>

#include "badclip/synthcorpus/corpus.hpp"
#include "badclip/twotower/model.hpp"

namespace badclip::twotower {

struct PretrainConfig {
  std::size_t epochs = 12;
  std::size_t batch_size = 32;
  double learning_rate = 2e-3;
  /// Share of captions using the hand-crafted context; the rest use random
  /// prompt words.
  double template_fraction = 0.4;
  std::uint64_t seed = 0;
};

struct PretrainLog {
  std::vector<double> epoch_loss;
  double tau = 0;
  double seconds = 0;
};

/// Symmetric InfoNCE over a square logit matrix whose diagonal holds the
/// matched pairs: mean of the image->text and text->image cross-entropies.
template <typename T>
Tensor<T> contrastive_loss(const Tensor<T>& logits) {
  if (logits.rank() != 2 || logits.dim(0) != logits.dim(1)) {
    throw nx::ShapeError("contrastive_loss: logits must be square, got " +
                         nx::to_string(logits.shape()));
  }
  std::vector<std::size_t> diag(logits.dim(0));
  std::iota(diag.begin(), diag.end(), std::size_t{0});
  auto i2t = nx::cross_entropy(logits, diag);
  auto t2i = nx::cross_entropy(nx::transpose(logits), diag);
  return nx::scale(nx::add(i2t, t2i), T(0.5));
}

namespace detail {

// Caption token sequence used during pre-training: a context of prompt words
// followed by the class token. Lengths vary so every position embedding up
// to max_text_len is exercised.
inline std::vector<std::size_t> pretrain_caption(const Vocabulary& vocab,
                                                 std::size_t class_token,
                                                 std::size_t max_len, double template_fraction,
                                                 nx::Rng& rng) {
  std::vector<std::size_t> ids;
  if (rng.uniform() < template_fraction) {
    ids = vocab.ids(hand_crafted_context());
  } else {
    const std::size_t len = rng.uniform() < 0.5 ? 1 + rng.index(6) : 1 + rng.index(max_len - 1);
    const auto& words = Vocabulary::prompt_words();
    for (std::size_t i = 0; i < len; ++i) ids.push_back(vocab.id(words[rng.index(words.size())]));
  }
  ids.push_back(class_token);
  return ids;
}

// Batches of distinct classes so in-batch negatives are true negatives.
inline std::vector<std::vector<std::size_t>> distinct_class_batches(
    const corpus::Corpus& corpus, std::size_t batch_size, nx::Rng& rng) {
  const auto K = corpus.num_classes();
  std::vector<std::vector<std::size_t>> per_class(K);
  for (std::size_t k = 0; k < K; ++k) {
    per_class[k] = corpus.indices_of(k);
    const auto perm = rng.permutation(per_class[k].size());
    std::vector<std::size_t> shuffled;
    for (auto p : perm) shuffled.push_back(per_class[k][p]);
    per_class[k] = std::move(shuffled);
  }
  std::size_t rounds = 0;
  for (const auto& v : per_class) rounds = std::max(rounds, v.size());
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t r = 0; r < rounds; ++r) {
    const auto order = rng.permutation(K);
    std::vector<std::size_t> current;
    for (auto k : order) {
      if (r >= per_class[k].size()) continue;
      current.push_back(per_class[k][r]);
      if (current.size() == batch_size) {
        batches.push_back(std::move(current));
        current.clear();
      }
    }
    if (current.size() >= 2) batches.push_back(std::move(current));
  }
  const auto perm = rng.permutation(batches.size());
  std::vector<std::vector<std::size_t>> out;
  for (auto p : perm) out.push_back(std::move(batches[p]));
  return out;
}

}  // namespace detail

/// Contrastive pre-training of both towers and the temperature. Returns the
/// model frozen.
template <typename T>
PretrainLog contrastive_pretrain(TwoTowerModel<T>& model, const corpus::Corpus& corpus,
                                 const PretrainConfig& cfg,
                                 const std::function<void(std::size_t, double)>& on_epoch = {}) {
  if (cfg.batch_size < 2) {
    throw std::invalid_argument("contrastive_pretrain: batch_size < 2 leaves no negatives");
  }
  const auto start = std::chrono::steady_clock::now();
  model.unfreeze_for_training();
  std::vector<std::size_t> class_tokens;
  for (const auto& name : corpus.class_names()) class_tokens.push_back(model.vocab().id(name));
  nx::Adam<T> opt(model.parameters(), cfg.learning_rate);
  nx::Rng rng(cfg.seed);
  PretrainLog log;
  const T log_tau_min = static_cast<T>(std::log(model.config().tau_min));
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto batches = detail::distinct_class_batches(corpus, cfg.batch_size, rng);
    double total = 0;
    // cosine decay over the whole run
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const auto& idx = batches[b];
      std::vector<std::size_t> ids, offsets{0};
      for (auto i : idx) {
        const auto cap = detail::pretrain_caption(model.vocab(), class_tokens[corpus.labels[i]],
                                                  model.config().max_text_len,
                                                  cfg.template_fraction, rng);
        ids.insert(ids.end(), cap.begin(), cap.end());
        offsets.push_back(ids.size());
      }
      auto img = model.encode_images(corpus.template images_tensor<T>(idx));
      auto txt = model.encode_sequences(model.embed_tokens(ids), offsets);
      auto logits = nx::mul_scalar(cosine_matrix(img, txt), model.logit_scale());
      auto loss = contrastive_loss(logits);
      nx::backward(loss, opt.params());
      const double progress =
          (epoch * batches.size() + b) / static_cast<double>(cfg.epochs * batches.size());
      opt.step(0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
      auto& lt = model.log_tau().mutable_data()[0];
      lt = std::max(lt, log_tau_min);
      total += static_cast<double>(loss.item());
    }
    log.epoch_loss.push_back(total / static_cast<double>(batches.size()));
    if (on_epoch) on_epoch(epoch, log.epoch_loss.back());
  }
  model.freeze();
  log.tau = static_cast<double>(model.tau());
  log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return log;
}

}  // namespace badclip::twotower
