// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "badclip/io/container.hpp"
#include "badclip/numerics.hpp"
#include "badclip/synthcorpus/corpus.hpp"

namespace badclip::twotower {

using nx::Shape;
using nx::Tensor;

// ---------------------------------------------------------------------------
// Vocabulary

/// Fixed word list: prompt words first, then one token per class name of
/// every attribute bank.
class Vocabulary {
 public:
  static const std::vector<std::string>& prompt_words() {
    static const std::vector<std::string> words{
        "a",     "photo",  "of",     "the",   "picture", "image", "small",
        "big",   "this",   "is",     "an",    "object",  "shape", "rendered",
        "clear", "little", "pixel",  "drawn"};
    return words;
  }

  static Vocabulary standard() {
    Vocabulary v;
    for (const auto& w : prompt_words()) v.add(w);
    for (std::size_t b = 0; b < corpus::attribute_banks().size(); ++b)
      for (const auto& c : corpus::bank_vocabulary(b)) v.add(c.name());
    return v;
  }

  std::size_t add(const std::string& token) {
    const auto it = ids_.find(token);
    if (it != ids_.end()) return it->second;
    ids_[token] = tokens_.size();
    tokens_.push_back(token);
    return tokens_.size() - 1;
  }

  std::size_t id(const std::string& token) const {
    const auto it = ids_.find(token);
    if (it == ids_.end()) throw std::out_of_range("token '" + token + "' not in vocabulary");
    return it->second;
  }

  std::vector<std::size_t> ids(const std::vector<std::string>& tokens) const {
    std::vector<std::size_t> out;
    for (const auto& t : tokens) out.push_back(id(t));
    return out;
  }

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, std::size_t> ids_;
};

/// "a photo of a" realized as N context tokens, followed by the class token.
struct HandCraftedPrompt {
  std::vector<std::size_t> context_tokens;
  std::size_t class_token;
};

inline const std::vector<std::string>& hand_crafted_context() {
  static const std::vector<std::string> ctx{"a", "photo", "of", "a"};
  return ctx;
}

// ---------------------------------------------------------------------------
// Model

struct ModelConfig {
  std::size_t image_size = 32;
  std::vector<std::size_t> conv_channels{16, 32, 32};
  std::size_t feature_dim = 64;    // d
  std::size_t embed_dim = 64;      // e
  std::size_t context_length = 4;  // N
  std::size_t max_text_len = 17;
  std::size_t text_hidden = 128;
  std::size_t vocab_size = 0;
  double tau_init = 0.07;
  double tau_min = 0.01;

  void validate() const {
    if (feature_dim < 1 || embed_dim < 1 || context_length < 1) {
      throw std::invalid_argument("ModelConfig: d, e, N must be >= 1");
    }
    if (context_length + 1 > max_text_len) {
      throw std::invalid_argument("ModelConfig: context_length + 1 exceeds max_text_len");
    }
    if (!(tau_init > 0)) throw std::invalid_argument("ModelConfig: tau must be > 0");
    if (conv_channels.empty()) throw std::invalid_argument("ModelConfig: no conv layers");
    if (image_size >> conv_channels.size() == 0) {
      throw std::invalid_argument("ModelConfig: image too small for the conv stack");
    }
  }

  std::size_t trunk_side() const { return image_size >> conv_channels.size(); }
  std::size_t trunk_features() const {
    return conv_channels.back() * trunk_side() * trunk_side();
  }
};

inline io::json to_json(const ModelConfig& c) {
  return {{"image_size", c.image_size},   {"conv_channels", c.conv_channels},
          {"feature_dim", c.feature_dim}, {"embed_dim", c.embed_dim},
          {"context_length", c.context_length}, {"max_text_len", c.max_text_len},
          {"text_hidden", c.text_hidden}, {"vocab_size", c.vocab_size},
          {"tau_init", c.tau_init},       {"tau_min", c.tau_min}};
}

inline ModelConfig model_config_from_json(const io::json& j) {
  ModelConfig c;
  c.image_size = j.value("image_size", c.image_size);
  c.conv_channels = j.value("conv_channels", c.conv_channels);
  c.feature_dim = j.value("feature_dim", c.feature_dim);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.context_length = j.value("context_length", c.context_length);
  c.max_text_len = j.value("max_text_len", c.max_text_len);
  c.text_hidden = j.value("text_hidden", c.text_hidden);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.tau_init = j.value("tau_init", c.tau_init);
  c.tau_min = j.value("tau_min", c.tau_min);
  return c;
}

class FrozenModelError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Image encoder f (stride-2 conv blocks + linear head) and text encoder g
/// (token + position embeddings, per-token projection, mean pooling, 2-layer
/// MLP) with a shared temperature tau = exp(log_tau).
template <typename T>
class TwoTowerModel {
 public:
  TwoTowerModel() = default;

  TwoTowerModel(ModelConfig config, Vocabulary vocab, std::uint64_t seed)
      : config_(std::move(config)), vocab_(std::move(vocab)) {
    config_.vocab_size = vocab_.size();
    config_.validate();
    nx::Rng rng(seed);
    std::size_t in_c = 3;
    for (std::size_t i = 0; i < config_.conv_channels.size(); ++i) {
      const auto out_c = config_.conv_channels[i];
      conv_w_.push_back(rng.normal_tensor<T>({out_c, in_c, 3, 3},
                                             std::sqrt(2.0 / (in_c * 9.0))));
      conv_b_.push_back(Tensor<T>({out_c}));
      in_c = out_c;
    }
    const auto flat = config_.trunk_features();
    head_w_ = rng.normal_tensor<T>({flat, config_.feature_dim}, std::sqrt(1.0 / flat));
    head_b_ = Tensor<T>({config_.feature_dim});
    const auto e = config_.embed_dim, h = config_.text_hidden, d = config_.feature_dim;
    token_embedding_ = rng.normal_tensor<T>({config_.vocab_size, e}, 0.5);
    position_embedding_ = rng.normal_tensor<T>({config_.max_text_len, e}, 0.2);
    tok_w_ = rng.normal_tensor<T>({e, h}, std::sqrt(2.0 / e));
    tok_b_ = Tensor<T>({h});
    mlp_w1_ = rng.normal_tensor<T>({h, h}, std::sqrt(2.0 / h));
    mlp_b1_ = Tensor<T>({h});
    mlp_w2_ = rng.normal_tensor<T>({h, d}, std::sqrt(1.0 / h));
    mlp_b2_ = Tensor<T>({d});
    log_tau_ = Tensor<T>({1}, static_cast<T>(std::log(config_.tau_init)));
  }

  const ModelConfig& config() const { return config_; }
  const Vocabulary& vocab() const { return vocab_; }
  bool frozen() const { return frozen_; }
  void freeze() {
    frozen_ = true;
    for (auto& [_, p] : named_parameters()) p->set_requires_grad(false);
  }
  void unfreeze_for_training() {
    if (frozen_) throw FrozenModelError("model is frozen");
    for (auto& [_, p] : named_parameters()) p->set_requires_grad(true);
  }

  /// Copy that shares parameter storage but uses another prompt context
  /// length. Only valid on frozen models.
  TwoTowerModel with_context_length(std::size_t n) const {
    if (!frozen_) throw FrozenModelError("with_context_length needs a frozen model");
    TwoTowerModel out = *this;
    out.config_.context_length = n;
    out.config_.validate();
    return out;
  }

  /// Independent deep copy (same frozen state).
  TwoTowerModel clone() const {
    TwoTowerModel out = *this;
    auto src = const_cast<TwoTowerModel*>(this)->named_parameters();
    auto dst = out.named_parameters();
    for (std::size_t i = 0; i < src.size(); ++i) *dst[i].second = src[i].second->clone();
    return out;
  }

  /// Deep copy that is not frozen, for fine-tuning experiments. The
  /// original stays frozen.
  TwoTowerModel trainable_clone() const {
    TwoTowerModel out = clone();
    out.frozen_ = false;
    return out;
  }

  std::vector<std::pair<std::string, Tensor<T>*>> named_parameters() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    for (std::size_t i = 0; i < conv_w_.size(); ++i) {
      out.emplace_back("image.conv" + std::to_string(i) + ".weight", &conv_w_[i]);
      out.emplace_back("image.conv" + std::to_string(i) + ".bias", &conv_b_[i]);
    }
    out.emplace_back("image.head.weight", &head_w_);
    out.emplace_back("image.head.bias", &head_b_);
    out.emplace_back("text.token_embedding", &token_embedding_);
    out.emplace_back("text.position_embedding", &position_embedding_);
    out.emplace_back("text.token_proj.weight", &tok_w_);
    out.emplace_back("text.token_proj.bias", &tok_b_);
    out.emplace_back("text.mlp1.weight", &mlp_w1_);
    out.emplace_back("text.mlp1.bias", &mlp_b1_);
    out.emplace_back("text.mlp2.weight", &mlp_w2_);
    out.emplace_back("text.mlp2.bias", &mlp_b2_);
    out.emplace_back("log_tau", &log_tau_);
    return out;
  }

  std::vector<std::pair<std::string, const Tensor<T>*>> named_parameters() const {
    std::vector<std::pair<std::string, const Tensor<T>*>> out;
    for (auto& [n, p] : const_cast<TwoTowerModel*>(this)->named_parameters())
      out.emplace_back(n, p);
    return out;
  }

  std::vector<Tensor<T>> parameters() {
    std::vector<Tensor<T>> out;
    for (auto& [_, p] : named_parameters()) out.push_back(*p);
    return out;
  }

  /// CRC-32 over every parameter's bytes, in declaration order.
  std::uint32_t checksum() const {
    boost::crc_32_type crc;
    for (const auto& [_, p] : named_parameters()) {
      const auto bytes = std::as_bytes(p->data());
      crc.process_bytes(bytes.data(), bytes.size());
    }
    return crc.checksum();
  }

  static constexpr const char* kind() { return "two_tower"; }

  void store(io::ArrayBundle& bundle) const {
    for (const auto& [n, p] : named_parameters()) bundle.put(n, *p);
    bundle.meta()["model_config"] = to_json(config_);
    bundle.meta()["vocabulary"] = vocab_.tokens();
    bundle.meta()["frozen"] = frozen_;
  }

  static TwoTowerModel restore(const io::ArrayBundle& bundle, bool allow_conversion = false) {
    const auto& meta = bundle.meta();
    auto cfg = model_config_from_json(meta.at("model_config"));
    Vocabulary vocab;
    for (const auto& t : meta.at("vocabulary").get<std::vector<std::string>>()) vocab.add(t);
    TwoTowerModel m;
    m.config_ = cfg;
    m.vocab_ = std::move(vocab);
    m.conv_w_.resize(cfg.conv_channels.size());
    m.conv_b_.resize(cfg.conv_channels.size());
    for (auto& [n, p] : m.named_parameters()) *p = bundle.get<T>(n, allow_conversion);
    if (meta.value("frozen", true)) m.freeze();
    return m;
  }

  // Image-encoder layers, exposed for channel-level defenses.
  std::vector<Tensor<T>>& conv_weights() { return conv_w_; }
  std::vector<Tensor<T>>& conv_biases() { return conv_b_; }
  const std::vector<Tensor<T>>& conv_weights() const { return conv_w_; }

  const Tensor<T>& log_tau() const { return log_tau_; }
  Tensor<T>& log_tau() { return log_tau_; }
  T tau() const { return static_cast<T>(std::exp(log_tau_[0])); }
  /// 1 / tau as a graph node.
  Tensor<T> logit_scale() const { return nx::exp(nx::scale(log_tau_, T(-1))); }

  // -------------------------------------------------------------------------
  // f

  /// images [B, 3, S, S] -> features [B, d].
  Tensor<T> encode_images(const Tensor<T>& images) const {
    const Shape expect{3, config_.image_size, config_.image_size};
    if (images.rank() != 4 || !std::equal(expect.begin(), expect.end(), images.shape().begin() + 1)) {
      throw nx::ShapeError("encode_images: expected [B, 3, " +
                           std::to_string(config_.image_size) + ", " +
                           std::to_string(config_.image_size) + "], got " +
                           nx::to_string(images.shape()));
    }
    Tensor<T> x = images;
    for (std::size_t i = 0; i < conv_w_.size(); ++i) {
      x = nx::relu(nx::conv2d(x, conv_w_[i], conv_b_[i], {.stride = 2, .padding = 1}));
    }
    x = nx::reshape(x, {images.dim(0), config_.trunk_features()});
    return nx::add_broadcast(nx::matmul(x, head_w_), head_b_);
  }

  /// Single image [3, S, S] -> feature [d].
  Tensor<T> encode_image(const Tensor<T>& image) const {
    auto shape = image.shape();
    shape.insert(shape.begin(), 1);
    auto f = encode_images(nx::reshape(image, shape));
    return nx::reshape(f, {config_.feature_dim});
  }

  // -------------------------------------------------------------------------
  // g

  /// Word embeddings for token ids: [n, e].
  Tensor<T> embed_tokens(const std::vector<std::size_t>& ids) const {
    return nx::gather_rows(token_embedding_, ids);
  }

  /// Encodes token-embedding sequences. `rows` stacks the sequences
  /// ([sum of lengths, e]); sequence s spans rows [offsets[s], offsets[s+1]).
  Tensor<T> encode_sequences(const Tensor<T>& rows,
                             const std::vector<std::size_t>& offsets) const {
    if (rows.rank() != 2 || rows.dim(1) != config_.embed_dim) {
      throw nx::ShapeError("encode_sequences: expected [*, " +
                           std::to_string(config_.embed_dim) + "], got " +
                           nx::to_string(rows.shape()));
    }
    std::vector<std::size_t> positions;
    positions.reserve(rows.dim(0));
    for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
      const auto len = offsets[s + 1] - offsets[s];
      if (len > config_.max_text_len) {
        throw nx::ShapeError("encode_sequences: sequence length " + std::to_string(len) +
                             " exceeds " + std::to_string(config_.max_text_len));
      }
      for (std::size_t p = 0; p < len; ++p) positions.push_back(p);
    }
    auto z = nx::add(rows, nx::gather_rows(position_embedding_, positions));
    auto u = nx::relu(nx::add_broadcast(nx::matmul(z, tok_w_), tok_b_));
    auto pooled = nx::segment_mean(u, offsets);
    auto h = nx::relu(nx::add_broadcast(nx::matmul(pooled, mlp_w1_), mlp_b1_));
    return nx::add_broadcast(nx::matmul(h, mlp_w2_), mlp_b2_);
  }

  /// Prompt features for every (context set, class) pair.
  /// context: [G, N, e] (G context sets, e.g. one per image) or [N, e];
  /// classes: [K, e]. Returns [G*K, d], row g*K + k = g({context_g, c_k}).
  Tensor<T> encode_prompts(const Tensor<T>& context, const Tensor<T>& classes) const {
    const auto N = config_.context_length, e = config_.embed_dim;
    const bool batched = context.rank() == 3;
    if (!(context.rank() == 2 || batched) ||
        context.dim(context.rank() - 2) != N || context.dim(context.rank() - 1) != e) {
      throw nx::ShapeError("encode_prompts: context must be [*, " + std::to_string(N) +
                           ", " + std::to_string(e) + "], got " +
                           nx::to_string(context.shape()));
    }
    if (classes.rank() != 2 || classes.dim(1) != e) {
      throw nx::ShapeError("encode_prompts: class embeddings must be [K, " +
                           std::to_string(e) + "], got " + nx::to_string(classes.shape()));
    }
    const auto G = batched ? context.dim(0) : 1;
    const auto K = classes.dim(0);
    auto table = nx::concat<T>({nx::reshape(context, {G * N, e}), classes});
    std::vector<std::size_t> index;
    std::vector<std::size_t> offsets{0};
    index.reserve(G * K * (N + 1));
    for (std::size_t g = 0; g < G; ++g)
      for (std::size_t k = 0; k < K; ++k) {
        for (std::size_t j = 0; j < N; ++j) index.push_back(g * N + j);
        index.push_back(G * N + k);
        offsets.push_back(index.size());
      }
    return encode_sequences(nx::gather_rows(table, index), offsets);
  }

  /// g({V, c}) for one prompt: context [N, e], class [e] -> [d].
  Tensor<T> encode_text(const Tensor<T>& context, const Tensor<T>& class_embedding) const {
    if (context.rank() != 2 || context.dim(0) != config_.context_length) {
      throw nx::ShapeError("encode_text: context length must be " +
                           std::to_string(config_.context_length) + ", got shape " +
                           nx::to_string(context.shape()));
    }
    auto f = encode_prompts(context, nx::reshape(class_embedding, {1, config_.embed_dim}));
    return nx::reshape(f, {config_.feature_dim});
  }

  HandCraftedPrompt hand_crafted_prompt(const std::string& class_name) const {
    if (config_.context_length != hand_crafted_context().size()) {
      throw std::invalid_argument("hand-crafted prompt needs context length 4");
    }
    return {vocab_.ids(hand_crafted_context()), vocab_.id(class_name)};
  }

  Tensor<T> hand_crafted_context_embedding() const {
    return embed_tokens(vocab_.ids(hand_crafted_context()));
  }

  Tensor<T> class_embeddings(const std::vector<std::string>& class_names) const {
    return embed_tokens(vocab_.ids(class_names));
  }

 private:
  ModelConfig config_;
  Vocabulary vocab_;
  bool frozen_ = false;
  std::vector<Tensor<T>> conv_w_, conv_b_;
  Tensor<T> head_w_, head_b_;
  Tensor<T> token_embedding_, position_embedding_;
  Tensor<T> tok_w_, tok_b_, mlp_w1_, mlp_b1_, mlp_w2_, mlp_b2_;
  Tensor<T> log_tau_;
};

// ---------------------------------------------------------------------------
// Similarities and the zero-shot posterior

/// <u, v> / (|u| |v|) for two vectors.
template <typename T>
T cosine_similarity(std::span<const T> u, std::span<const T> v) {
  if (u.size() != v.size()) throw nx::ShapeError("cosine_similarity: length mismatch");
  double uv = 0, uu = 0, vv = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    uv += static_cast<double>(u[i]) * v[i];
    uu += static_cast<double>(u[i]) * u[i];
    vv += static_cast<double>(v[i]) * v[i];
  }
  if (uu == 0 || vv == 0) throw std::invalid_argument("cosine_similarity: zero vector");
  return static_cast<T>(uv / std::sqrt(uu * vv));
}

/// Cosine similarities of image features [B, d] against a shared text set
/// [K, d] -> [B, K].
template <typename T>
Tensor<T> cosine_matrix(const Tensor<T>& image_features, const Tensor<T>& text_features) {
  return nx::matmul(nx::normalize_rows(image_features),
                    nx::transpose(nx::normalize_rows(text_features)));
}

/// Cosine similarities when every image has its own K text features:
/// image [B, d], text [B*K, d] -> [B, K].
template <typename T>
Tensor<T> paired_cosine(const Tensor<T>& image_features, const Tensor<T>& text_features) {
  const auto B = image_features.dim(0);
  if (B == 0 || text_features.dim(0) % B != 0) {
    throw nx::ShapeError("paired_cosine: " + nx::to_string(image_features.shape()) +
                         " vs " + nx::to_string(text_features.shape()));
  }
  const auto K = text_features.dim(0) / B;
  std::vector<std::size_t> rep;
  rep.reserve(B * K);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t k = 0; k < K; ++k) rep.push_back(b);
  auto img = nx::gather_rows(nx::normalize_rows(image_features), rep);
  auto sims = nx::sum_last(nx::mul(img, nx::normalize_rows(text_features)));
  return nx::reshape(sims, {B, K});
}

/// softmax_i(sim(f(x), g(V, c_i)) / tau) for a batch of images and one
/// hand-crafted context. images [B,3,S,S] -> [B, K].
template <typename T>
Tensor<T> zero_shot_posterior(const TwoTowerModel<T>& model, const Tensor<T>& images,
                              const std::vector<std::string>& class_names) {
  if (class_names.size() < 2) throw std::invalid_argument("zero_shot_posterior: K < 2");
  const auto text = model.encode_prompts(model.hand_crafted_context_embedding(),
                                         model.class_embeddings(class_names));
  const auto sims = cosine_matrix(model.encode_images(images), text);
  return nx::softmax(nx::mul_scalar(sims, model.logit_scale()));
}

/// Posterior from precomputed similarities: softmax(sims / tau).
template <typename T>
std::vector<T> posterior_from_similarities(std::span<const T> sims, T tau) {
  std::vector<T> z(sims.begin(), sims.end());
  for (auto& v : z) v /= tau;
  const auto p = nx::softmax(Tensor<T>({z.size()}, z));
  return p.values();
}

/// Index of the largest entry; ties go to the lowest index.
template <typename T>
std::size_t argmax(std::span<const T> row) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < row.size(); ++i)
    if (row[i] > row[best]) best = i;
  return best;
}

}  // namespace badclip::twotower
