// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "badclip/io/container.hpp"
#include "badclip/twotower/model.hpp"

namespace badclip::defense {

/// Largest singular value of a row-major [rows, cols] matrix by power
/// iteration on A^T A.
template <typename T>
double spectral_norm(std::span<const T> a, std::size_t rows, std::size_t cols,
                     std::size_t steps = 50, double tol = 1e-6) {
  if (a.size() != rows * cols || a.empty()) {
    throw std::invalid_argument("spectral_norm: size does not match rows * cols");
  }
  std::vector<double> v(cols), u(rows);
  // fixed, non-degenerate start
  for (std::size_t j = 0; j < cols; ++j) v[j] = 1.0 + 0.1 * std::sin(1.0 + 3.0 * j);
  auto normalize = [](std::vector<double>& x) {
    double n = 0;
    for (auto e : x) n += e * e;
    n = std::sqrt(n);
    if (n > 0)
      for (auto& e : x) e /= n;
    return n;
  };
  normalize(v);
  double sigma = 0;
  for (std::size_t it = 0; it < steps; ++it) {
    for (std::size_t i = 0; i < rows; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < cols; ++j) s += static_cast<double>(a[i * cols + j]) * v[j];
      u[i] = s;
    }
    const double next = normalize(u);
    if (next == 0) return 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      double s = 0;
      for (std::size_t i = 0; i < rows; ++i) s += static_cast<double>(a[i * cols + j]) * u[i];
      v[j] = s;
    }
    const double sv = normalize(v);
    const bool done = std::abs(sv - sigma) <= tol * std::max(1.0, sv);
    sigma = sv;
    if (done) break;
  }
  return sigma;
}

/// Per conv layer, per output channel: spectral norm of the channel's
/// [in, kh * kw] weight slice.
template <typename T>
std::vector<std::vector<double>> channel_lipschitz(const twotower::TwoTowerModel<T>& model) {
  std::vector<std::vector<double>> out;
  for (const auto& w : model.conv_weights()) {
    const auto oc = w.dim(0), ic = w.dim(1), kk = w.dim(2) * w.dim(3);
    std::vector<double> layer;
    for (std::size_t c = 0; c < oc; ++c)
      layer.push_back(spectral_norm<T>(w.data().subspan(c * ic * kk, ic * kk), ic, kk));
    out.push_back(std::move(layer));
  }
  return out;
}

/// mean + u * population standard deviation.
inline double prune_threshold(const std::vector<double>& scores, double u) {
  if (scores.empty()) throw std::invalid_argument("prune_threshold: empty layer");
  double mean = 0;
  for (auto s : scores) mean += s;
  mean /= static_cast<double>(scores.size());
  double var = 0;
  for (auto s : scores) var += (s - mean) * (s - mean);
  var /= static_cast<double>(scores.size());
  return mean + u * std::sqrt(var);
}

struct PruneReport {
  double u = 0;
  std::vector<std::vector<double>> scores;
  std::vector<double> thresholds;
  std::vector<std::vector<std::size_t>> pruned;
  double acc_after = 0;
  double asr_after = 0;

  std::size_t pruned_count() const {
    std::size_t n = 0;
    for (const auto& l : pruned) n += l.size();
    return n;
  }
};

template <typename T>
struct PruneResult {
  twotower::TwoTowerModel<T> model;
  PruneReport report;
};

/// Copy of `model` with every conv channel whose score exceeds the layer's
/// mean + u * std zeroed (weights and bias). The input is left untouched.
template <typename T>
PruneResult<T> clp_prune(const twotower::TwoTowerModel<T>& model, double u) {
  if (!(u >= 0)) throw std::invalid_argument("clp_prune: u must be >= 0");
  PruneResult<T> r{model.clone(), {}};
  r.report.u = u;
  r.report.scores = channel_lipschitz(model);
  auto& weights = r.model.conv_weights();
  auto& biases = r.model.conv_biases();
  for (std::size_t l = 0; l < r.report.scores.size(); ++l) {
    const auto& s = r.report.scores[l];
    const double thr = prune_threshold(s, u);
    r.report.thresholds.push_back(thr);
    std::vector<std::size_t> cut;
    const auto per = weights[l].numel() / weights[l].dim(0);
    for (std::size_t c = 0; c < s.size(); ++c) {
      if (s[c] <= thr) continue;
      cut.push_back(c);
      auto w = weights[l].mutable_data().subspan(c * per, per);
      std::fill(w.begin(), w.end(), T(0));
      biases[l].mutable_data()[c] = T(0);
    }
    r.report.pruned.push_back(std::move(cut));
  }
  return r;
}

inline io::json to_json(const PruneReport& r) {
  return {{"u", r.u},
          {"scores", r.scores},
          {"thresholds", r.thresholds},
          {"pruned", r.pruned},
          {"pruned_count", r.pruned_count()},
          {"acc_after", r.acc_after},
          {"asr_after", r.asr_after}};
}

}  // namespace badclip::defense
