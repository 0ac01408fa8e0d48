// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <concepts>
#include <string>
#include <vector>

#include "badclip/io/container.hpp"
#include "badclip/twotower/model.hpp"

namespace badclip::prompt {

using nx::Tensor;
using twotower::TwoTowerModel;

namespace detail {

// Initial context: the hand-crafted words repeated to fill N rows.
template <typename T>
Tensor<T> initial_context(const TwoTowerModel<T>& model, std::size_t n) {
  const auto& words = twotower::hand_crafted_context();
  std::vector<std::string> ctx;
  for (std::size_t i = 0; i < n; ++i) ctx.push_back(words[i % words.size()]);
  return model.embed_tokens(model.vocab().ids(ctx)).detach();
}

}  // namespace detail

/// Image-conditioned context h(x) = B + reshape(W2 relu(W1 f(x) + b1) + b2),
/// a two-layer network of hidden width d/2 plus a learned base context B.
template <typename T>
class ContextGenerator {
 public:
  ContextGenerator() = default;

  /// W1 ~ N(0, 0.02), final layer zero, so training starts at B.
  ContextGenerator(const TwoTowerModel<T>& model, std::size_t context_length,
                   std::uint64_t seed)
      : n_(context_length), e_(model.config().embed_dim), d_(model.config().feature_dim) {
    const auto hidden = std::max<std::size_t>(1, d_ / 2);
    nx::Rng rng(seed);
    w1_ = rng.normal_tensor<T>({d_, hidden}, 0.02);
    b1_ = Tensor<T>({hidden});
    w2_ = Tensor<T>({hidden, n_ * e_});
    b2_ = Tensor<T>({n_ * e_});
    base_ = detail::initial_context(model, n_);
  }

  std::size_t context_length() const { return n_; }
  std::size_t embed_dim() const { return e_; }
  std::size_t feature_dim() const { return d_; }

  /// features [B, d] -> contexts [B, N, e].
  Tensor<T> generate(const Tensor<T>& features) const {
    if (features.rank() != 2 || features.dim(1) != d_) {
      throw nx::ShapeError("generate_context: expected features [B, " + std::to_string(d_) +
                           "], got " + nx::to_string(features.shape()));
    }
    const auto B = features.dim(0);
    auto h = nx::relu(nx::add_broadcast(nx::matmul(features, w1_), b1_));
    auto delta = nx::add_broadcast(nx::matmul(h, w2_), b2_);
    return nx::add_broadcast(nx::reshape(delta, {B, n_, e_}), base_);
  }

  /// Context for a single feature vector [d] -> [N, e].
  Tensor<T> generate_one(const Tensor<T>& feature) const {
    return nx::reshape(generate(nx::reshape(feature, {1, feature.numel()})), {n_, e_});
  }

  /// Logits sim(f(x), g({h(x), c_k})) / tau for image features [B, d] and
  /// class embeddings [K, e] -> [B, K].
  Tensor<T> logits(const TwoTowerModel<T>& model, const Tensor<T>& features,
                   const Tensor<T>& class_embeddings) const {
    return nx::mul_scalar(similarities(model, features, class_embeddings),
                          model.logit_scale().detach());
  }

  Tensor<T> similarities(const TwoTowerModel<T>& model, const Tensor<T>& features,
                         const Tensor<T>& class_embeddings) const {
    auto text = model.with_context_length(n_).encode_prompts(generate(features),
                                                             class_embeddings);
    return twotower::paired_cosine(features, text);
  }

  std::vector<std::pair<std::string, Tensor<T>*>> named_parameters() {
    return {{"generator.w1", &w1_}, {"generator.b1", &b1_}, {"generator.w2", &w2_},
            {"generator.b2", &b2_}, {"generator.base", &base_}};
  }
  std::vector<Tensor<T>> parameters() {
    std::vector<Tensor<T>> out;
    for (auto& [_, p] : named_parameters()) out.push_back(*p);
    return out;
  }
  void set_trainable(bool on) {
    for (auto& [_, p] : named_parameters()) p->set_requires_grad(on);
  }

  /// Zeroes the image-dependent branch so h(x) = B for every x.
  void zero_image_branch() {
    for (auto* p : {&w1_, &b1_, &w2_, &b2_})
      std::fill(p->mutable_data().begin(), p->mutable_data().end(), T(0));
  }
  Tensor<T>& base() { return base_; }
  const Tensor<T>& base() const { return base_; }

  ContextGenerator clone() const {
    ContextGenerator out = *this;
    for (auto& [_, p] : out.named_parameters()) *p = p->clone();
    return out;
  }

  std::uint32_t checksum() const {
    boost::crc_32_type crc;
    for (auto& [_, p] : const_cast<ContextGenerator*>(this)->named_parameters()) {
      const auto bytes = std::as_bytes(p->data());
      crc.process_bytes(bytes.data(), bytes.size());
    }
    return crc.checksum();
  }

  static constexpr const char* kind() { return "context_generator"; }

  void store(io::ArrayBundle& bundle) const {
    for (auto& [n, p] : const_cast<ContextGenerator*>(this)->named_parameters())
      bundle.put(n, *p);
    bundle.meta()["prompt_learner"] = kind();
  }

  static ContextGenerator restore(const io::ArrayBundle& bundle, bool allow_conversion = false) {
    ContextGenerator g;
    for (auto& [n, p] : g.named_parameters()) *p = bundle.get<T>(n, allow_conversion);
    g.n_ = g.base_.dim(0);
    g.e_ = g.base_.dim(1);
    g.d_ = g.w1_.dim(0);
    return g;
  }

 private:
  std::size_t n_ = 0, e_ = 0, d_ = 0;
  Tensor<T> w1_, b1_, w2_, b2_, base_;
};

/// Image-independent learned context V (the trigger-agnostic baseline).
template <typename T>
class StaticContext {
 public:
  StaticContext() = default;
  StaticContext(const TwoTowerModel<T>& model, std::size_t context_length, std::uint64_t = 0)
      : context_(detail::initial_context(model, context_length)) {}

  std::size_t context_length() const { return context_.dim(0); }
  const Tensor<T>& context() const { return context_; }
  Tensor<T>& context() { return context_; }

  /// Text features are computed once per class and shared by every image.
  Tensor<T> similarities(const TwoTowerModel<T>& model, const Tensor<T>& features,
                         const Tensor<T>& class_embeddings) const {
    auto text = model.with_context_length(context_length()).encode_prompts(context_,
                                                                           class_embeddings);
    return twotower::cosine_matrix(features, text);
  }

  Tensor<T> logits(const TwoTowerModel<T>& model, const Tensor<T>& features,
                   const Tensor<T>& class_embeddings) const {
    return nx::mul_scalar(similarities(model, features, class_embeddings),
                          model.logit_scale().detach());
  }

  /// Context rows for a batch of features: the same V for all of them.
  Tensor<T> generate(const Tensor<T>& features) const {
    std::vector<std::size_t> rep;
    for (std::size_t b = 0; b < features.dim(0); ++b)
      for (std::size_t j = 0; j < context_length(); ++j) rep.push_back(j);
    return nx::reshape(nx::gather_rows(context_, rep),
                       {features.dim(0), context_length(), context_.dim(1)});
  }

  std::vector<std::pair<std::string, Tensor<T>*>> named_parameters() {
    return {{"static.context", &context_}};
  }
  std::vector<Tensor<T>> parameters() { return {context_}; }
  void set_trainable(bool on) { context_.set_requires_grad(on); }

  StaticContext clone() const {
    StaticContext out;
    out.context_ = context_.clone();
    return out;
  }

  std::uint32_t checksum() const {
    return io::crc32(std::as_bytes(context_.data()));
  }

  static constexpr const char* kind() { return "static_context"; }

  void store(io::ArrayBundle& bundle) const {
    bundle.put("static.context", context_);
    bundle.meta()["prompt_learner"] = kind();
  }
  static StaticContext restore(const io::ArrayBundle& bundle, bool allow_conversion = false) {
    StaticContext s;
    s.context_ = bundle.get<T>("static.context", allow_conversion);
    return s;
  }

 private:
  Tensor<T> context_;
};

template <typename L, typename T>
concept PromptLearner = requires(L l, const L cl, const TwoTowerModel<T>& m, const Tensor<T>& t) {
  { cl.logits(m, t, t) } -> std::same_as<Tensor<T>>;
  { cl.similarities(m, t, t) } -> std::same_as<Tensor<T>>;
  { cl.generate(t) } -> std::same_as<Tensor<T>>;
  { l.parameters() } -> std::same_as<std::vector<Tensor<T>>>;
  { cl.clone() } -> std::same_as<L>;
  { cl.checksum() } -> std::same_as<std::uint32_t>;
};

/// p~(y = i | x) for a batch of images [B, 3, S, S] -> [B, K].
template <typename T, typename Learner>
  requires PromptLearner<Learner, T>
Tensor<T> posterior(const TwoTowerModel<T>& model, const Learner& learner,
                    const Tensor<T>& class_embeddings, const Tensor<T>& images) {
  return nx::softmax(learner.logits(model, model.encode_images(images), class_embeddings));
}

template <typename T>
Tensor<T> trigger_aware_posterior(const TwoTowerModel<T>& model,
                                  const ContextGenerator<T>& gen,
                                  const Tensor<T>& class_embeddings, const Tensor<T>& images) {
  return posterior(model, gen, class_embeddings, images);
}

template <typename T>
Tensor<T> static_posterior(const TwoTowerModel<T>& model, const StaticContext<T>& ctx,
                           const Tensor<T>& class_embeddings, const Tensor<T>& images) {
  return posterior(model, ctx, class_embeddings, images);
}

}  // namespace badclip::prompt
