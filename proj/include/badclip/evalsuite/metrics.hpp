// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "badclip/attackengine/trigger.hpp"
#include "badclip/io/container.hpp"
#include "badclip/promptengine/prompt_learner.hpp"
#include "badclip/promptengine/task.hpp"

namespace badclip::eval {

using nx::Tensor;
using prompt::LabeledImages;
using twotower::TwoTowerModel;

inline constexpr std::size_t kEvalBatch = 128;

namespace detail {

template <typename T>
Tensor<T> rows(const Tensor<T>& images, std::size_t begin, std::size_t end) {
  std::vector<std::size_t> idx(end - begin);
  for (std::size_t i = begin; i < end; ++i) idx[i - begin] = i;
  return nx::gather_rows(images, idx);
}

}  // namespace detail

/// Argmax class (lowest index on ties) for each image under the learner's
/// posterior, computed in chunks.
template <typename T, typename Learner>
std::vector<std::size_t> predict(const TwoTowerModel<T>& model, const Learner& learner,
                                 const Tensor<T>& class_embeddings, const Tensor<T>& images,
                                 const attack::Trigger<T>* trigger = nullptr) {
  const auto n = images.dim(0);
  const auto K = class_embeddings.dim(0);
  std::vector<std::size_t> out;
  out.reserve(n);
  for (std::size_t b = 0; b < n; b += kEvalBatch) {
    auto x = detail::rows(images, b, std::min(n, b + kEvalBatch));
    if (trigger) x = attack::apply_trigger(x, *trigger);
    const auto sims = learner.similarities(model, model.encode_images(x), class_embeddings);
    for (std::size_t i = 0; i < x.dim(0); ++i)
      out.push_back(twotower::argmax(sims.data().subspan(i * K, K)));
  }
  return out;
}

/// Percentage of clean images whose predicted class equals the label.
template <typename T, typename Learner>
double accuracy(const TwoTowerModel<T>& model, const Learner& learner,
                const LabeledImages<T>& set) {
  if (set.size() == 0) throw std::invalid_argument("accuracy: empty test set");
  const auto pred = predict(model, learner, set.class_embeddings(model), set.images);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == set.labels[i];
  return 100.0 * static_cast<double>(hit) / static_cast<double>(pred.size());
}

/// Percentage of triggered images classified as `target`. Images whose label
/// is the target count unless `exclude_target` is set.
template <typename T, typename Learner>
double attack_success_rate(const TwoTowerModel<T>& model, const Learner& learner,
                           const LabeledImages<T>& set, const attack::Trigger<T>& trigger,
                           std::size_t target, bool exclude_target = false) {
  if (set.size() == 0) throw std::invalid_argument("attack_success_rate: empty test set");
  if (target >= set.num_classes()) {
    throw std::invalid_argument("attack_success_rate: target outside the class list");
  }
  const auto pred = predict(model, learner, set.class_embeddings(model), set.images, &trigger);
  std::size_t hit = 0, total = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (exclude_target && set.labels[i] == target) continue;
    ++total;
    hit += pred[i] == target;
  }
  if (total == 0) throw std::invalid_argument("attack_success_rate: no non-target images");
  return 100.0 * static_cast<double>(hit) / static_cast<double>(total);
}

/// 2ab / (a + b), with H(0, 0) = 0.
inline double harmonic_mean(double a, double b) {
  if (a < 0 || b < 0) throw std::invalid_argument("harmonic_mean: negative input");
  if (a + b == 0) return 0.0;
  return 2.0 * a * b / (a + b);
}

// ---------------------------------------------------------------------------
// Stealth

inline constexpr double kPsnrCap = 99.0;

/// 10 log10(255^2 / MSE) with pixels rescaled from [0,1] to [0,255]; identical
/// inputs give the 99 dB cap.
template <typename T>
double psnr(std::span<const T> clean, std::span<const T> backdoor) {
  if (clean.size() != backdoor.size() || clean.empty()) {
    throw nx::ShapeError("psnr: inputs differ in size or are empty");
  }
  double mse = 0;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    const double d = 255.0 * (static_cast<double>(clean[i]) - static_cast<double>(backdoor[i]));
    mse += d * d;
  }
  mse /= static_cast<double>(clean.size());
  if (mse == 0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(255.0 * 255.0 / mse));
}

inline constexpr std::size_t kSsimWindow = 8;

/// Windowed SSIM of two [C, H, W] images in [0,1] (scored on the 0-255
/// scale), averaged over every 8x8 window position and channel. Images
/// smaller than the window use one global window.
template <typename T>
double ssim(std::span<const T> a, std::span<const T> b, std::size_t channels,
            std::size_t height, std::size_t width) {
  if (a.size() != b.size() || a.size() != channels * height * width || a.empty()) {
    throw nx::ShapeError("ssim: inputs do not match [C, H, W]");
  }
  constexpr double c1 = (0.01 * 255) * (0.01 * 255);
  constexpr double c2 = (0.03 * 255) * (0.03 * 255);
  const bool global = height < kSsimWindow || width < kSsimWindow;
  const std::size_t wh = global ? height : kSsimWindow;
  const std::size_t ww = global ? width : kSsimWindow;
  double total = 0;
  std::size_t count = 0;
  for (std::size_t c = 0; c < channels; ++c) {
    const auto* pa = a.data() + c * height * width;
    const auto* pb = b.data() + c * height * width;
    for (std::size_t y0 = 0; y0 + wh <= height; ++y0) {
      for (std::size_t x0 = 0; x0 + ww <= width; ++x0) {
        double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
        for (std::size_t y = y0; y < y0 + wh; ++y) {
          for (std::size_t x = x0; x < x0 + ww; ++x) {
            const double va = 255.0 * pa[y * width + x], vb = 255.0 * pb[y * width + x];
            sa += va;
            sb += vb;
            saa += va * va;
            sbb += vb * vb;
            sab += va * vb;
          }
        }
        const double n = static_cast<double>(wh * ww);
        const double ma = sa / n, mb = sb / n;
        const double va = saa / n - ma * ma, vb = sbb / n - mb * mb, cov = sab / n - ma * mb;
        total += ((2 * ma * mb + c1) * (2 * cov + c2)) /
                 ((ma * ma + mb * mb + c1) * (va + vb + c2));
        ++count;
      }
    }
  }
  return total / static_cast<double>(count);
}

struct Stealth {
  double psnr_db = 0;
  double ssim = 0;
  std::size_t pairs = 0;
};

/// Mean PSNR and SSIM between each image and its triggered version, over the
/// first `max_pairs` images of a [B, 3, S, S] batch.
template <typename T>
Stealth stealth(const Tensor<T>& images, const attack::Trigger<T>& trigger,
                std::size_t max_pairs = 100) {
  const auto n = std::min(images.dim(0), max_pairs);
  if (n == 0) throw std::invalid_argument("stealth: no images");
  const auto clean = detail::rows(images, 0, n);
  const auto bad = attack::apply_trigger(clean, trigger);
  const auto C = images.dim(1), H = images.dim(2), W = images.dim(3), per = C * H * W;
  Stealth s;
  for (std::size_t i = 0; i < n; ++i) {
    const auto ca = clean.data().subspan(i * per, per), cb = bad.data().subspan(i * per, per);
    s.psnr_db += psnr(ca, cb);
    s.ssim += ssim(ca, cb, C, H, W);
  }
  s.psnr_db /= static_cast<double>(n);
  s.ssim /= static_cast<double>(n);
  s.pairs = n;
  return s;
}

// ---------------------------------------------------------------------------
// Decoupled similarities

struct SimilarityProfile {
  // [image side][text side], 0 = clean, 1 = backdoor
  double mean[2][2] = {{0, 0}, {0, 0}};
  std::vector<double> samples[2][2];

  double clean_clean() const { return mean[0][0]; }
  double clean_backdoor() const { return mean[0][1]; }
  double backdoor_clean() const { return mean[1][0]; }
  double backdoor_backdoor() const { return mean[1][1]; }
};

/// For each image, cosine between {f(x), f(x+delta)} and the target-class
/// prompt built from {h(x), h(x+delta)}: all four pairings.
template <typename T, typename Learner>
SimilarityProfile similarity_decoupling(const TwoTowerModel<T>& model, const Learner& learner,
                                        const Tensor<T>& target_embedding,
                                        const attack::Trigger<T>& trigger,
                                        const Tensor<T>& images) {
  if (images.dim(0) == 0) throw std::invalid_argument("similarity_decoupling: no images");
  const auto text_model = model.with_context_length(learner.context_length());
  const auto target = nx::reshape(target_embedding, {1, target_embedding.numel()});
  SimilarityProfile p;
  const auto n = images.dim(0);
  for (std::size_t b = 0; b < n; b += kEvalBatch) {
    const auto x = detail::rows(images, b, std::min(n, b + kEvalBatch));
    const Tensor<T> feats[2] = {model.encode_images(x),
                                model.encode_images(attack::apply_trigger(x, trigger))};
    for (int t = 0; t < 2; ++t) {
      const auto text = text_model.encode_prompts(learner.generate(feats[t]), target);
      for (int i = 0; i < 2; ++i) {
        const auto sims = twotower::paired_cosine(feats[i], text);
        for (auto v : sims.data()) p.samples[i][t].push_back(static_cast<double>(v));
      }
    }
  }
  for (int i = 0; i < 2; ++i)
    for (int t = 0; t < 2; ++t) {
      double s = 0;
      for (auto v : p.samples[i][t]) s += v;
      p.mean[i][t] = s / static_cast<double>(p.samples[i][t].size());
    }
  return p;
}

inline io::json to_json(const SimilarityProfile& p) {
  return {{"clean_image_clean_text", p.clean_clean()},
          {"clean_image_backdoor_text", p.clean_backdoor()},
          {"backdoor_image_clean_text", p.backdoor_clean()},
          {"backdoor_image_backdoor_text", p.backdoor_backdoor()},
          {"samples",
           {{"clean_image_clean_text", p.samples[0][0]},
            {"clean_image_backdoor_text", p.samples[0][1]},
            {"backdoor_image_clean_text", p.samples[1][0]},
            {"backdoor_image_backdoor_text", p.samples[1][1]}}}};
}

// ---------------------------------------------------------------------------
// Retrieval

/// Image-to-text retrieval set: each query image has one matching caption;
/// captions are single class-name tokens with the learner's context.
template <typename T>
struct RetrievalSet {
  Tensor<T> images;
  std::vector<std::size_t> match;          // caption index per image
  std::vector<std::string> captions;       // caption tokens
  std::vector<std::size_t> caption_class;  // class per caption
};

struct Recall {
  double r_at_1 = 0;
  double b_r_at_1 = 0;
};

/// R@1 over clean queries; with a trigger, B-R@1 = share of triggered
/// queries whose top caption belongs to `target_class`.
template <typename T, typename Learner>
Recall retrieval_recall_at_1(const TwoTowerModel<T>& model, const Learner& learner,
                             const RetrievalSet<T>& set, const attack::Trigger<T>* trigger,
                             std::size_t target_class) {
  if (set.images.dim(0) == 0 || set.match.size() != set.images.dim(0)) {
    throw std::invalid_argument("retrieval: need one caption index per query image");
  }
  const auto text = model.class_embeddings(set.captions);
  const auto clean = predict(model, learner, text, set.images);
  Recall r;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < clean.size(); ++i) hit += clean[i] == set.match[i];
  r.r_at_1 = 100.0 * static_cast<double>(hit) / static_cast<double>(clean.size());
  if (trigger) {
    const auto bad = predict(model, learner, text, set.images, trigger);
    std::size_t b = 0;
    for (auto c : bad) b += set.caption_class.at(c) == target_class;
    r.b_r_at_1 = 100.0 * static_cast<double>(b) / static_cast<double>(bad.size());
  }
  return r;
}

// ---------------------------------------------------------------------------
// Feature export

/// Writes f(x) and f(x+delta) (rows 0..n-1 clean, n..2n-1 triggered) with
/// labels and a triggered flag to the array container.
template <typename T>
void export_features(const TwoTowerModel<T>& model, const LabeledImages<T>& set,
                     const attack::Trigger<T>& trigger, const std::filesystem::path& path) {
  const auto n = set.size();
  if (n == 0) throw std::invalid_argument("export_features: no samples");
  const auto d = model.config().feature_dim;
  std::vector<T> feats;
  feats.reserve(2 * n * d);
  for (int t = 0; t < 2; ++t) {
    for (std::size_t b = 0; b < n; b += kEvalBatch) {
      auto x = detail::rows(set.images, b, std::min(n, b + kEvalBatch));
      if (t) x = attack::apply_trigger(x, trigger);
      const auto f = model.encode_images(x);
      feats.insert(feats.end(), f.data().begin(), f.data().end());
    }
  }
  std::vector<T> labels, flags;
  for (int t = 0; t < 2; ++t)
    for (auto l : set.labels) {
      labels.push_back(static_cast<T>(l));
      flags.push_back(static_cast<T>(t));
    }
  io::ArrayBundle bundle(io::precision_of<T>());
  bundle.put<T>("features", {2 * n, d}, feats);
  bundle.put<T>("labels", {2 * n}, labels);
  bundle.put<T>("triggered", {2 * n}, flags);
  bundle.meta()["class_names"] = set.class_names;
  bundle.save(path);
}

}  // namespace badclip::eval
