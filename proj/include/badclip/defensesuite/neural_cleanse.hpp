// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "badclip/io/container.hpp"
#include "badclip/numerics.hpp"
#include "badclip/twotower/model.hpp"

namespace badclip::defense {

using nx::Tensor;
using twotower::TwoTowerModel;

enum class CleanseOptimizer { kGradientDescent, kAdam };

struct CleanseConfig {
  std::size_t steps = 200;
  double learning_rate = 0.1;
  CleanseOptimizer optimizer = CleanseOptimizer::kAdam;
  double lambda = 0.01;
  double lambda_up = 1.5;
  double success_threshold = 0.99;  // raise lambda once this share hits the class
  std::size_t patience = 5;          // consecutive steps before lambda moves
  double mask_init_logit = 0.0;
  std::uint64_t seed = 0;
};

inline CleanseOptimizer parse_cleanse_optimizer(const std::string& s) {
  if (s == "adam") return CleanseOptimizer::kAdam;
  if (s == "gd") return CleanseOptimizer::kGradientDescent;
  throw std::invalid_argument("unknown cleanse optimizer '" + s + "'");
}

inline io::json to_json(const CleanseConfig& c) {
  return {{"steps", c.steps},
          {"learning_rate", c.learning_rate},
          {"optimizer", c.optimizer == CleanseOptimizer::kAdam ? "adam" : "gd"},
          {"lambda", c.lambda},
          {"lambda_up", c.lambda_up},
          {"success_threshold", c.success_threshold},
          {"patience", c.patience},
          {"mask_init_logit", c.mask_init_logit},
          {"seed", c.seed}};
}

struct ClassTrigger {
  Tensor<float> mask;     // [S, S], values in [0, 1]
  Tensor<float> pattern;  // [3, S, S], values in [0, 1]
  double mask_l1 = 0;
  double final_lambda = 0;
  double success = 0;   // share of blended images classified as the class, last step
  bool reached = false;  // some step met the success threshold
  bool aborted = false;
};

struct ReconstructedTrigger {
  std::vector<ClassTrigger> classes;
  std::vector<double> mask_norms;
  std::vector<double> anomaly_index;
  std::vector<bool> flagged;
};

/// (1 - m) * x + m * pattern with the mask shared across channels.
template <typename T>
Tensor<T> blend(const Tensor<T>& images, const Tensor<T>& mask, const Tensor<T>& pattern) {
  auto kept = nx::sub(images, nx::mul_broadcast(images, mask));
  return nx::add_broadcast(kept, nx::mul_broadcast(pattern, mask));
}

/// Optimizes a sigmoid-parameterized mask and pattern so the blended images
/// are classified as `target`, under an l1 penalty on the mask. `logits_fn`
/// maps images [B, 3, S, S] to class logits [B, K]. The result is the
/// smallest mask that met the success threshold, or the last one if none did.
/// lambda rises by lambda_up after `patience` successful steps in a row and
/// falls by lambda_up^1.5 after as many failing ones.
template <typename T, typename LogitsFn>
ClassTrigger reconstruct_trigger(const LogitsFn& logits_fn, const Tensor<T>& images,
                                 std::size_t target, const CleanseConfig& cfg) {
  if (images.rank() != 4 || images.dim(0) == 0) {
    throw std::invalid_argument("reconstruct_trigger: need a non-empty [B, 3, S, S] batch");
  }
  const auto B = images.dim(0), S = images.dim(2);
  nx::Rng rng(cfg.seed ^ (0x9E3779B97F4A7C15ull * (target + 1)));
  auto mask_raw = Tensor<T>({S, S}, std::vector<T>(S * S, static_cast<T>(cfg.mask_init_logit)));
  auto pattern_raw = rng.normal_tensor<T>({3, S, S}, 0.1);
  std::vector<Tensor<T>> params{mask_raw, pattern_raw};
  for (auto& p : params) p.set_requires_grad(true);
  nx::Adam<T> adam(params, cfg.learning_rate, 0.5, 0.9);
  const std::vector<std::size_t> labels(B, target);
  double lambda = cfg.lambda;
  ClassTrigger out;
  // smallest mask seen so far that meets the success threshold
  std::vector<T> best_mask, best_pattern;
  double best_l1 = std::numeric_limits<double>::infinity();
  std::size_t above = 0, below = 0;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    auto mask = nx::sigmoid(params[0]);
    auto pattern = nx::sigmoid(params[1]);
    auto logits = logits_fn(blend(images, mask, pattern));
    auto ce = nx::cross_entropy(logits, labels);
    auto l1 = nx::sum(mask);
    auto loss = nx::add(ce, nx::scale(l1, static_cast<T>(lambda)));
    if (!std::isfinite(static_cast<double>(loss.item()))) {
      out.aborted = true;
      break;
    }
    std::size_t hit = 0;
    const auto K = logits.dim(1);
    for (std::size_t i = 0; i < B; ++i)
      hit += twotower::argmax(logits.data().subspan(i * K, K)) == target;
    out.success = static_cast<double>(hit) / static_cast<double>(B);
    if (out.success > cfg.success_threshold) {
      if (static_cast<double>(l1.item()) < best_l1) {
        best_l1 = static_cast<double>(l1.item());
        best_mask = mask.values();
        best_pattern = pattern.values();
      }
      below = 0;
      if (++above >= cfg.patience) {
        lambda *= cfg.lambda_up;
        above = 0;
      }
    } else {
      above = 0;
      if (++below >= cfg.patience) {
        lambda /= std::pow(cfg.lambda_up, 1.5);
        below = 0;
      }
    }
    nx::backward(loss, params);
    if (cfg.optimizer == CleanseOptimizer::kAdam) {
      adam.step();
    } else {
      nx::sgd_step<T>(params, cfg.learning_rate);
    }
  }
  for (auto& p : params) p.set_requires_grad(false);
  auto m = nx::sigmoid(params[0]).values();
  auto pat = nx::sigmoid(params[1]).values();
  out.reached = !best_mask.empty();
  if (out.reached) {
    m = best_mask;
    pat = best_pattern;
  }
  out.mask = Tensor<float>({S, S}, std::vector<float>(m.begin(), m.end()));
  out.pattern = Tensor<float>({3, S, S}, std::vector<float>(pat.begin(), pat.end()));
  for (auto v : m) out.mask_l1 += static_cast<double>(v);
  out.final_lambda = lambda;
  return out;
}

inline constexpr double kMadScale = 1.4826;
inline constexpr double kAnomalyThreshold = 2.0;

/// |norm - median| / (1.4826 * MAD), with MAD floored at 1e-6 * median.
inline std::vector<double> anomaly_index(const std::vector<double>& norms) {
  if (norms.size() < 3) throw std::invalid_argument("anomaly_index: need at least 3 classes");
  auto median_of = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const auto n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  };
  const double med = median_of(norms);
  std::vector<double> dev;
  for (auto x : norms) dev.push_back(std::abs(x - med));
  double mad = median_of(dev);
  mad = std::max(mad, 1e-6 * std::abs(med));
  std::vector<double> out;
  for (auto d : dev) out.push_back(mad > 0 ? d / (kMadScale * mad) : 0.0);
  return out;
}

/// Classes whose norm lies below the median with an index above 2.
inline std::vector<bool> flag_outliers(const std::vector<double>& norms,
                                       const std::vector<double>& index) {
  auto sorted = norms;
  std::sort(sorted.begin(), sorted.end());
  const auto n = sorted.size();
  const double med = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  std::vector<bool> out;
  for (std::size_t k = 0; k < norms.size(); ++k)
    out.push_back(norms[k] < med && index[k] > kAnomalyThreshold);
  return out;
}

/// Reconstruction for every class followed by MAD outlier scoring.
template <typename T, typename LogitsFn>
ReconstructedTrigger neural_cleanse(const LogitsFn& logits_fn, const Tensor<T>& images,
                                    std::size_t num_classes, const CleanseConfig& cfg) {
  ReconstructedTrigger r;
  for (std::size_t k = 0; k < num_classes; ++k) {
    r.classes.push_back(reconstruct_trigger<T>(logits_fn, images, k, cfg));
    r.mask_norms.push_back(r.classes.back().mask_l1);
  }
  r.anomaly_index = anomaly_index(r.mask_norms);
  r.flagged = flag_outliers(r.mask_norms, r.anomaly_index);
  return r;
}

/// Largest anomaly index among classes with a below-median norm.
inline double max_anomaly(const ReconstructedTrigger& r) {
  auto sorted = r.mask_norms;
  std::sort(sorted.begin(), sorted.end());
  const auto n = sorted.size();
  const double med = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  double m = 0;
  for (std::size_t k = 0; k < n; ++k)
    if (r.mask_norms[k] < med) m = std::max(m, r.anomaly_index[k]);
  return m;
}

inline io::json to_json(const ReconstructedTrigger& r) {
  io::json classes = io::json::array();
  for (const auto& c : r.classes) {
    classes.push_back({{"mask_l1", c.mask_l1},
                       {"final_lambda", c.final_lambda},
                       {"success", c.success},
                       {"reached", c.reached},
                       {"aborted", c.aborted}});
  }
  return {{"mask_norms", r.mask_norms},
          {"anomaly_index", r.anomaly_index},
          {"flagged", r.flagged},
          {"classes", classes}};
}

}  // namespace badclip::defense
