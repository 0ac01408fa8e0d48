// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "badclip/numerics/random.hpp"
#include "badclip/numerics/tensor.hpp"

namespace badclip::corpus {

enum class Domain { kBase, kNoiseShift, kBrightnessShift, kStyleShift };

inline const char* domain_name(Domain d) {
  switch (d) {
    case Domain::kBase: return "base";
    case Domain::kNoiseShift: return "noise-shift";
    case Domain::kBrightnessShift: return "brightness-shift";
    case Domain::kStyleShift: return "style-shift";
  }
  return "?";
}

inline Domain parse_domain(const std::string& s) {
  for (auto d : {Domain::kBase, Domain::kNoiseShift, Domain::kBrightnessShift,
                 Domain::kStyleShift}) {
    if (s == domain_name(d)) return d;
  }
  throw std::invalid_argument("unknown domain '" + s + "'");
}

struct ClassAttributes {
  std::string shape;
  std::string color;
  std::string texture;

  std::string name() const { return color + " " + texture + " " + shape; }
  bool operator==(const ClassAttributes&) const = default;
};

struct CorpusSpec {
  std::uint64_t seed = 0;
  std::size_t image_size = 32;
  std::vector<ClassAttributes> class_vocab;
  std::size_t samples_per_class = 20;
  Domain domain = Domain::kBase;

  std::size_t num_classes() const { return class_vocab.size(); }

  void validate() const {
    if (image_size < 8) {
      throw std::invalid_argument("CorpusSpec: image_size " +
                                  std::to_string(image_size) +
                                  " < 8 cannot render shapes");
    }
    if (class_vocab.size() < 2) {
      throw std::invalid_argument("CorpusSpec: need at least 2 classes");
    }
    if (samples_per_class < 1) {
      throw std::invalid_argument("CorpusSpec: samples_per_class must be >= 1");
    }
    std::set<std::string> names;
    for (const auto& c : class_vocab) {
      if (!names.insert(c.name()).second) {
        throw std::invalid_argument("CorpusSpec: duplicate class name '" +
                                    c.name() + "'");
      }
    }
  }
};

/// One image with its label; pixel layout is channel-major [3, S, S].
struct Sample {
  std::span<const float> image;
  std::size_t label;
  std::string class_name;
  std::string caption;
};

inline std::string caption_for(const ClassAttributes& c) {
  return "a photo of a " + c.name();
}

/// A generated corpus: images stored contiguously as [n, 3, S, S].
struct Corpus {
  CorpusSpec spec;
  std::vector<float> pixels;
  std::vector<std::size_t> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t image_size() const { return spec.image_size; }
  std::size_t image_numel() const { return 3 * spec.image_size * spec.image_size; }
  std::size_t num_classes() const { return spec.num_classes(); }

  std::span<const float> image(std::size_t i) const {
    return std::span<const float>(pixels).subspan(i * image_numel(), image_numel());
  }

  Sample sample(std::size_t i) const {
    const auto& c = spec.class_vocab.at(labels.at(i));
    return {image(i), labels[i], c.name(), caption_for(c)};
  }

  std::vector<std::string> class_names() const {
    std::vector<std::string> out;
    for (const auto& c : spec.class_vocab) out.push_back(c.name());
    return out;
  }

  /// Copy of the selected samples; labels keep the corpus numbering.
  Corpus subset(const std::vector<std::size_t>& indices) const {
    Corpus out;
    out.spec = spec;
    out.pixels.reserve(indices.size() * image_numel());
    for (auto i : indices) {
      const auto img = image(i);
      out.pixels.insert(out.pixels.end(), img.begin(), img.end());
      out.labels.push_back(labels.at(i));
    }
    return out;
  }

  std::vector<std::size_t> indices_of(std::size_t label) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == label) out.push_back(i);
    return out;
  }

  /// Batch of images as a [n, 3, S, S] tensor.
  template <typename T>
  nx::Tensor<T> images_tensor(const std::vector<std::size_t>& indices) const {
    std::vector<T> v;
    v.reserve(indices.size() * image_numel());
    for (auto i : indices) {
      const auto img = image(i);
      v.insert(v.end(), img.begin(), img.end());
    }
    return nx::Tensor<T>({indices.size(), 3, spec.image_size, spec.image_size},
                         std::move(v));
  }

  std::vector<std::size_t> all_indices() const {
    std::vector<std::size_t> v(size());
    std::iota(v.begin(), v.end(), std::size_t{0});
    return v;
  }
};

// ---------------------------------------------------------------------------
// Attribute banks. Two disjoint banks give the source vocabulary and its
// cross-dataset counterpart.

struct AttributeBank {
  std::array<const char*, 4> shapes;
  std::array<const char*, 4> colors;
  std::array<const char*, 2> textures;
};

inline const std::array<AttributeBank, 2>& attribute_banks() {
  static const std::array<AttributeBank, 2> banks{{
      {{"circle", "square", "triangle", "cross"},
       {"red", "green", "blue", "yellow"},
       {"solid", "striped"}},
      {{"ring", "diamond", "bar", "frame"},
       {"cyan", "magenta", "orange", "white"},
       {"dotted", "checkered"}},
  }};
  return banks;
}

/// 16 classes: every (shape, color) pair of a bank, texture alternating.
inline std::vector<ClassAttributes> bank_vocabulary(std::size_t bank) {
  const auto& b = attribute_banks().at(bank);
  std::vector<ClassAttributes> out;
  for (std::size_t s = 0; s < 4; ++s)
    for (std::size_t c = 0; c < 4; ++c)
      out.push_back({b.shapes[s], b.colors[c], b.textures[(s + c) % 2]});
  return out;
}

inline CorpusSpec default_spec(std::uint64_t seed = 1,
                               std::size_t samples_per_class = 20) {
  CorpusSpec spec;
  spec.seed = seed;
  spec.class_vocab = bank_vocabulary(0);
  spec.samples_per_class = samples_per_class;
  return spec;
}

namespace detail {

// Images are rendered at full contrast, then compressed toward mid-gray by
// this factor.
inline constexpr double kContrast = 0.25;

inline std::array<float, 3> color_rgb(const std::string& name) {
  if (name == "red") return {0.90f, 0.15f, 0.15f};
  if (name == "green") return {0.15f, 0.80f, 0.20f};
  if (name == "blue") return {0.20f, 0.30f, 0.95f};
  if (name == "yellow") return {0.95f, 0.90f, 0.15f};
  if (name == "cyan") return {0.10f, 0.85f, 0.90f};
  if (name == "magenta") return {0.90f, 0.20f, 0.85f};
  if (name == "orange") return {1.00f, 0.55f, 0.10f};
  if (name == "white") return {0.95f, 0.95f, 0.95f};
  throw std::invalid_argument("unknown color '" + name + "'");
}

// Shape membership in coordinates normalized by the shape radius.
inline bool inside_shape(const std::string& shape, double u, double v) {
  const double r = std::sqrt(u * u + v * v);
  const double au = std::abs(u), av = std::abs(v);
  if (shape == "circle") return r <= 1.0;
  if (shape == "square") return std::max(au, av) <= 0.8;
  if (shape == "triangle") return v >= -0.85 && v <= 0.85 && au <= (v + 0.85) * 0.6;
  if (shape == "cross") return (au <= 0.3 && av <= 0.95) || (av <= 0.3 && au <= 0.95);
  if (shape == "ring") return r >= 0.55 && r <= 1.0;
  if (shape == "diamond") return au + av <= 1.0;
  if (shape == "bar") return au <= 1.0 && av <= 0.35;
  if (shape == "frame") {
    const double m = std::max(au, av);
    return m >= 0.5 && m <= 0.85;
  }
  throw std::invalid_argument("unknown shape '" + shape + "'");
}

// Texture modulation in [0.45, 1] at pixel (x, y).
inline double texture_gain(const std::string& texture, int x, int y,
                           int phase) {
  if (texture == "solid") return 1.0;
  if (texture == "striped") return ((y + phase) / 2) % 2 == 0 ? 1.0 : 0.45;
  if (texture == "dotted") return ((x + phase) % 3 == 0 && (y + phase) % 3 == 0) ? 0.45 : 1.0;
  if (texture == "checkered") return (((x + phase) / 2 + (y + phase) / 2) % 2 == 0) ? 1.0 : 0.5;
  throw std::invalid_argument("unknown texture '" + texture + "'");
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  // splitmix64 finalizer over the combined words
  std::uint64_t z = seed ^ (a * 0x9E3779B97F4A7C15ull) ^ (b * 0xC2B2AE3D27D4EB4Full);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline void render(const ClassAttributes& cls, std::size_t size, Domain domain,
                   nx::Rng& rng, float* out) {
  const int S = static_cast<int>(size);
  const double scale = static_cast<double>(size) / 32.0;
  const double bg = rng.uniform(0.08, 0.30);
  std::array<double, 3> bg_tint{rng.uniform(-0.04, 0.04), rng.uniform(-0.04, 0.04),
                                rng.uniform(-0.04, 0.04)};
  const auto base = color_rgb(cls.color);
  std::array<double, 3> fg;
  for (int c = 0; c < 3; ++c) fg[c] = std::clamp(base[c] + rng.uniform(-0.07, 0.07), 0.0, 1.0);
  const double radius = rng.uniform(8.5, 12.0) * scale;
  const double cx = S / 2.0 + rng.uniform(-3.5, 3.5) * scale;
  const double cy = S / 2.0 + rng.uniform(-3.5, 3.5) * scale;
  const double angle = rng.uniform(-0.25, 0.25);
  const double ca = std::cos(angle), sa = std::sin(angle);
  const int phase = static_cast<int>(rng.index(4));
  const std::size_t plane = size * size;
  for (int y = 0; y < S; ++y) {
    for (int x = 0; x < S; ++x) {
      const double dx = (x + 0.5 - cx) / radius, dy = (y + 0.5 - cy) / radius;
      const double u = ca * dx + sa * dy, v = -sa * dx + ca * dy;
      const bool in = inside_shape(cls.shape, u, v);
      const double gain = in ? texture_gain(cls.texture, x, y, phase) : 0.0;
      for (int c = 0; c < 3; ++c) {
        double p = in ? fg[c] * gain : bg + bg_tint[c];
        p += rng.normal(0.0, 0.025);
        out[c * plane + y * S + x] = static_cast<float>(p);
      }
    }
  }
  for (std::size_t i = 0; i < 3 * plane; ++i)
    out[i] = static_cast<float>(0.5 + kContrast * (out[i] - 0.5));
  switch (domain) {
    case Domain::kBase:
      break;
    case Domain::kNoiseShift: {
      // additive Gaussian texture: per-pixel noise plus a coarse blotch field
      std::vector<double> blotch(16);
      for (auto& b : blotch) b = rng.normal(0.0, 0.06 * kContrast);
      for (int c = 0; c < 3; ++c)
        for (int y = 0; y < S; ++y)
          for (int x = 0; x < S; ++x)
            out[c * plane + y * S + x] += static_cast<float>(
                rng.normal(0.0, 0.07 * kContrast) + blotch[(y * 4 / S) * 4 + (x * 4 / S)]);
      break;
    }
    case Domain::kBrightnessShift:
      for (std::size_t i = 0; i < 3 * plane; ++i) out[i] = out[i] * 0.6f;
      break;
    case Domain::kStyleShift:
      // partial desaturation plus a small palette rotation R->G->B->R
      for (std::size_t i = 0; i < plane; ++i) {
        const float r = out[i], g = out[plane + i], b = out[2 * plane + i];
        const float gray = (r + g + b) / 3.0f;
        const float r2 = 0.85f * r + 0.15f * b, g2 = 0.85f * g + 0.15f * r,
                    b2 = 0.85f * b + 0.15f * g;
        out[i] = 0.65f * r2 + 0.35f * gray;
        out[plane + i] = 0.65f * g2 + 0.35f * gray;
        out[2 * plane + i] = 0.65f * b2 + 0.35f * gray;
      }
      break;
  }
  for (std::size_t i = 0; i < 3 * plane; ++i) out[i] = std::clamp(out[i], 0.0f, 1.0f);
}

}  // namespace detail

/// Renders the corpus. Sample j of class k is drawn from its own generator
/// seeded by (seed, k, j), so generation order never affects pixels. Samples
/// are stored class-major.
inline Corpus generate(const CorpusSpec& spec) {
  spec.validate();
  Corpus corpus;
  corpus.spec = spec;
  const auto K = spec.num_classes();
  const auto n = K * spec.samples_per_class;
  corpus.pixels.resize(n * corpus.image_numel());
  corpus.labels.resize(n);
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t j = 0; j < spec.samples_per_class; ++j) {
      const auto idx = k * spec.samples_per_class + j;
      // domain is not mixed into the seed: variants share geometry with base
      nx::Rng rng(detail::mix_seed(spec.seed, k + 1, j + 1));
      detail::render(spec.class_vocab[k], spec.image_size, spec.domain, rng,
                     corpus.pixels.data() + idx * corpus.image_numel());
      corpus.labels[idx] = k;
    }
  }
  return corpus;
}

struct SplitPlan {
  std::vector<std::size_t> seen;
  std::vector<std::size_t> unseen;
};

/// Seeded partition into ceil(K/2) seen and floor(K/2) unseen classes, each
/// side sorted ascending.
inline SplitPlan split_seen_unseen(std::size_t num_classes, std::uint64_t seed) {
  if (num_classes < 2) throw std::invalid_argument("split_seen_unseen: K < 2");
  nx::Rng rng(detail::mix_seed(seed, 0x5EED, num_classes));
  auto perm = rng.permutation(num_classes);
  const auto n_seen = (num_classes + 1) / 2;
  SplitPlan plan;
  plan.seen.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_seen));
  plan.unseen.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_seen), perm.end());
  std::sort(plan.seen.begin(), plan.seen.end());
  std::sort(plan.unseen.begin(), plan.unseen.end());
  return plan;
}

/// Exactly `shots` distinct samples from each class, drawn without
/// replacement. Returned indices are grouped by class in request order.
inline std::vector<std::size_t> sample_few_shot(const Corpus& corpus,
                                                const std::vector<std::size_t>& classes,
                                                std::size_t shots,
                                                std::uint64_t seed) {
  std::vector<std::size_t> out;
  for (auto k : classes) {
    auto pool = corpus.indices_of(k);
    if (pool.size() < shots) {
      throw std::invalid_argument(
          "sample_few_shot: class '" + corpus.spec.class_vocab.at(k).name() +
          "' has " + std::to_string(pool.size()) + " samples, need " +
          std::to_string(shots));
    }
    nx::Rng rng(detail::mix_seed(seed, 0xF5, k));
    const auto perm = rng.permutation(pool.size());
    for (std::size_t j = 0; j < shots; ++j) out.push_back(pool[perm[j]]);
  }
  return out;
}

/// Same rendering parameters with every attribute swapped for its
/// counterpart in the other bank, so no class name is shared.
inline CorpusSpec cross_dataset_variant(const CorpusSpec& spec) {
  const auto& banks = attribute_banks();
  auto swap_attr = [&](const std::string& value, auto member) -> std::string {
    for (std::size_t b = 0; b < banks.size(); ++b) {
      const auto& list = banks[b].*member;
      for (std::size_t i = 0; i < list.size(); ++i)
        if (value == list[i]) return (banks[1 - b].*member)[i];
    }
    throw std::invalid_argument("cross_dataset_variant: attribute '" + value +
                                "' is not in any bank");
  };
  CorpusSpec out = spec;
  out.seed = detail::mix_seed(spec.seed, 0xC705, 1);
  for (auto& c : out.class_vocab) {
    c.shape = swap_attr(c.shape, &AttributeBank::shapes);
    c.color = swap_attr(c.color, &AttributeBank::colors);
    c.texture = swap_attr(c.texture, &AttributeBank::textures);
  }
  return out;
}

inline CorpusSpec domain_variant(const CorpusSpec& spec, Domain domain) {
  CorpusSpec out = spec;
  out.domain = domain;
  return out;
}

}  // namespace badclip::corpus
