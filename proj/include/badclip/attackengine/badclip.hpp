// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "badclip/attackengine/trigger.hpp"
#include "badclip/promptengine/prompt_learner.hpp"
#include "badclip/promptengine/task.hpp"

namespace badclip::attack {

using prompt::LabeledImages;
using twotower::TwoTowerModel;

struct AttackConfig {
  std::size_t target_class = 0;  // index into the training class list
  std::size_t warmup_epochs = 3;
  std::size_t joint_epochs = 10;
  double alpha = 0.1;    // fixed warm-up rate for delta
  double beta = 0.002;   // joint peak rate for theta and delta
  std::size_t lr_warmup_epochs = 1;
  std::size_t batch_size = 32;
  double epsilon = 4.0 / 255.0;
  std::size_t context_length = 4;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(alpha > 0) || !(beta > 0)) throw std::invalid_argument("AttackConfig: rates must be > 0");
    if (batch_size == 0) throw std::invalid_argument("AttackConfig: batch_size must be > 0");
    if (!(epsilon >= 0)) throw std::invalid_argument("AttackConfig: epsilon must be >= 0");
    if (joint_epochs > 0 && lr_warmup_epochs >= joint_epochs) {
      throw std::invalid_argument("AttackConfig: lr_warmup_epochs must be < joint_epochs");
    }
  }

  nx::SgdConfig joint_schedule() const {
    return {beta, nx::Schedule::kWarmupCosine, lr_warmup_epochs, joint_epochs};
  }
};

inline io::json to_json(const AttackConfig& c) {
  return {{"target_class", c.target_class}, {"warmup_epochs", c.warmup_epochs},
          {"joint_epochs", c.joint_epochs}, {"alpha", c.alpha},
          {"beta", c.beta},                 {"lr_warmup_epochs", c.lr_warmup_epochs},
          {"batch_size", c.batch_size},     {"epsilon", c.epsilon},
          {"context_length", c.context_length}, {"seed", c.seed}};
}

inline AttackConfig attack_config_from_json(const io::json& j) {
  AttackConfig c;
  c.target_class = j.value("target_class", c.target_class);
  c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
  c.joint_epochs = j.value("joint_epochs", c.joint_epochs);
  c.alpha = j.value("alpha", c.alpha);
  c.beta = j.value("beta", c.beta);
  c.lr_warmup_epochs = j.value("lr_warmup_epochs", c.lr_warmup_epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epsilon = j.value("epsilon", c.epsilon);
  c.context_length = j.value("context_length", c.context_length);
  c.seed = j.value("seed", c.seed);
  return c;
}

// ---------------------------------------------------------------------------
// Losses

/// Mean over the batch of -log p~(y = target | x + delta).
template <typename T, typename Learner>
Tensor<T> loss_tri(const TwoTowerModel<T>& model, const Learner& learner,
                   const Tensor<T>& class_embeddings, const Trigger<T>& trigger,
                   const Tensor<T>& images, std::size_t target) {
  if (images.dim(0) == 0) throw std::invalid_argument("loss_tri: empty batch");
  const auto feats = model.encode_images(apply_trigger(images, trigger));
  return nx::cross_entropy(learner.logits(model, feats, class_embeddings),
                           std::vector<std::size_t>(images.dim(0), target));
}

/// Clean loss from precomputed clean features f(x).
template <typename T, typename Learner>
Tensor<T> loss_cle_from_features(const TwoTowerModel<T>& model, const Learner& learner,
                                 const Tensor<T>& class_embeddings, const Tensor<T>& features,
                                 const std::vector<std::size_t>& labels) {
  if (labels.empty()) throw std::invalid_argument("loss_cle: empty batch");
  return nx::cross_entropy(learner.logits(model, features, class_embeddings), labels);
}

/// Mean over the batch of -log p~(y = y_i | x_i).
template <typename T, typename Learner>
Tensor<T> loss_cle(const TwoTowerModel<T>& model, const Learner& learner,
                   const Tensor<T>& class_embeddings, const Tensor<T>& images,
                   const std::vector<std::size_t>& labels) {
  return loss_cle_from_features(model, learner, class_embeddings,
                                model.encode_images(images), labels);
}

template <typename T, typename Learner>
Tensor<T> loss_total(const TwoTowerModel<T>& model, const Learner& learner,
                     const Tensor<T>& class_embeddings, const Trigger<T>& trigger,
                     const Tensor<T>& images, const std::vector<std::size_t>& labels,
                     std::size_t target) {
  return nx::add(loss_tri(model, learner, class_embeddings, trigger, images, target),
                 loss_cle(model, learner, class_embeddings, images, labels));
}

// ---------------------------------------------------------------------------
// Optimization

struct AttackLog {
  std::vector<double> warmup_tri;
  std::vector<double> joint_tri, joint_cle, joint_total;
  std::vector<double> joint_lr;  // rate at the last step of each epoch
  std::size_t warmup_steps = 0;
  std::size_t joint_steps = 0;
  std::size_t linf_checks = 0;
  std::size_t linf_violations = 0;
  double max_linf = 0;
  double seconds = 0;
};

inline io::json to_json(const AttackLog& l) {
  return {{"warmup_tri", l.warmup_tri},       {"joint_tri", l.joint_tri},
          {"joint_cle", l.joint_cle},         {"joint_total", l.joint_total},
          {"joint_lr", l.joint_lr},           {"warmup_steps", l.warmup_steps},
          {"joint_steps", l.joint_steps},     {"linf_checks", l.linf_checks},
          {"linf_violations", l.linf_violations}, {"max_linf", l.max_linf},
          {"seconds", l.seconds}};
}

class ConstraintViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Learner, trigger and the training data a run works on.
template <typename T, typename Learner>
struct AttackState {
  Learner learner;
  Trigger<T> trigger;
  LabeledImages<T> train;
  Tensor<T> clean_features;  // f(x) for train.images, fixed since f is frozen
  Tensor<T> class_embeddings;
  nx::Rng rng{0};
};

namespace detail {

inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch,
                                                           nx::Rng& rng) {
  const auto perm = rng.permutation(n);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch) {
    out.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(i),
                     perm.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch)));
  }
  return out;
}

template <typename T>
void check_feasible(const Trigger<T>& trigger, AttackLog& log) {
  ++log.linf_checks;
  const double m = trigger.linf();
  log.max_linf = std::max(log.max_linf, m);
  if (m > trigger.epsilon) {
    ++log.linf_violations;
    throw ConstraintViolation("trigger l-inf norm " + std::to_string(m) + " exceeds epsilon " +
                              std::to_string(trigger.epsilon));
  }
}

inline void require_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw nx::NonFiniteError(std::string(what) + " is not finite");
}

}  // namespace detail

template <typename T, typename Learner>
AttackState<T, Learner> make_attack_state(const TwoTowerModel<T>& model, LabeledImages<T> train,
                                          const AttackConfig& cfg) {
  if (!model.frozen()) throw twotower::FrozenModelError("attack needs a frozen model");
  if (train.size() == 0) throw std::invalid_argument("attack: empty training set");
  if (cfg.target_class >= train.num_classes()) {
    throw std::invalid_argument("attack: target class " + std::to_string(cfg.target_class) +
                                " outside the training class list");
  }
  AttackState<T, Learner> st{
      Learner(model, cfg.context_length, cfg.seed ^ 0xA5A5u),
      Trigger<T>::zeros({3, model.config().image_size, model.config().image_size},
                        cfg.epsilon),
      std::move(train), Tensor<T>(), Tensor<T>(), nx::Rng(cfg.seed)};
  st.clean_features = model.encode_images(st.train.images).detach();
  st.class_embeddings = st.train.class_embeddings(model);
  return st;
}

/// Trigger warm-up: delta <- proj(delta - alpha * dL_tri/d delta) with the
/// learner fixed.
template <typename T, typename Learner>
void warmup_stage(const TwoTowerModel<T>& model, AttackState<T, Learner>& st,
                  const AttackConfig& cfg, AttackLog& log) {
  st.learner.set_trainable(false);
  st.trigger.delta.set_requires_grad(true);
  std::vector<Tensor<T>> params{st.trigger.delta};
  for (std::size_t epoch = 0; epoch < cfg.warmup_epochs; ++epoch) {
    double total = 0;
    const auto batches = detail::epoch_batches(st.train.size(), cfg.batch_size, st.rng);
    for (const auto& idx : batches) {
      auto images = nx::gather_rows(st.train.images, idx);
      auto loss = loss_tri(model, st.learner, st.class_embeddings, st.trigger, images,
                           cfg.target_class);
      detail::require_finite(static_cast<double>(loss.item()), "warm-up loss");
      nx::backward(loss, params);
      nx::sgd_step<T>(params, cfg.alpha);
      project_linf(st.trigger);
      detail::check_feasible(st.trigger, log);
      total += static_cast<double>(loss.item());
      ++log.warmup_steps;
    }
    log.warmup_tri.push_back(total / static_cast<double>(batches.size()));
  }
  st.trigger.delta.set_requires_grad(false);
}

/// Joint stage: theta and delta step together on L_tri + L_cle, both with the
/// warm-up + cosine schedule at peak beta; delta is projected after each step.
/// On a non-finite loss the state is rolled back to the last good step and
/// NonFiniteError is thrown.
template <typename T, typename Learner>
void joint_stage(const TwoTowerModel<T>& model, AttackState<T, Learner>& st,
                 const AttackConfig& cfg, AttackLog& log) {
  st.learner.set_trainable(true);
  st.trigger.delta.set_requires_grad(true);
  std::vector<Tensor<T>> params = st.learner.parameters();
  params.push_back(st.trigger.delta);
  const auto schedule = cfg.joint_schedule();
  const auto per_epoch = (st.train.size() + cfg.batch_size - 1) / cfg.batch_size;
  std::size_t iteration = 0;
  std::vector<std::vector<T>> last_good;
  for (std::size_t epoch = 0; epoch < cfg.joint_epochs; ++epoch) {
    double tri_sum = 0, cle_sum = 0;
    const auto batches = detail::epoch_batches(st.train.size(), cfg.batch_size, st.rng);
    double lr = 0;
    for (const auto& idx : batches) {
      auto images = nx::gather_rows(st.train.images, idx);
      std::vector<std::size_t> labels;
      for (auto i : idx) labels.push_back(st.train.labels[i]);
      auto tri = loss_tri(model, st.learner, st.class_embeddings, st.trigger, images,
                          cfg.target_class);
      auto cle = loss_cle_from_features(model, st.learner, st.class_embeddings,
                                        nx::gather_rows(st.clean_features, idx), labels);
      auto total = nx::add(tri, cle);
      if (!std::isfinite(static_cast<double>(total.item()))) {
        for (std::size_t k = 0; k < last_good.size(); ++k)
          std::copy(last_good[k].begin(), last_good[k].end(), params[k].mutable_data().begin());
        throw nx::NonFiniteError("joint stage: non-finite loss at iteration " +
                                 std::to_string(iteration) + "; state restored");
      }
      last_good.clear();
      for (const auto& p : params) last_good.push_back(p.values());
      nx::backward(total, params);
      lr = nx::learning_rate_at(schedule, iteration, per_epoch);
      nx::sgd_step<T>(params, lr);
      project_linf(st.trigger);
      detail::check_feasible(st.trigger, log);
      tri_sum += static_cast<double>(tri.item());
      cle_sum += static_cast<double>(cle.item());
      ++iteration;
      ++log.joint_steps;
    }
    const double n = static_cast<double>(batches.size());
    log.joint_tri.push_back(tri_sum / n);
    log.joint_cle.push_back(cle_sum / n);
    log.joint_total.push_back((tri_sum + cle_sum) / n);
    log.joint_lr.push_back(lr);
  }
  st.learner.set_trainable(false);
  st.trigger.delta.set_requires_grad(false);
}

template <typename T, typename Learner>
struct AttackResult {
  Learner learner;
  Trigger<T> trigger;
  AttackLog log;
  io::json manifest;
};

/// Full attack: trigger warm-up, then joint optimization. The frozen model's
/// parameter checksum is verified unchanged at the end.
template <typename T, typename Learner>
AttackResult<T, Learner> run_badclip(const TwoTowerModel<T>& model, LabeledImages<T> train,
                                     const AttackConfig& cfg) {
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  const auto model_crc = model.checksum();
  auto st = make_attack_state<T, Learner>(model, std::move(train), cfg);
  AttackLog log;
  warmup_stage(model, st, cfg, log);
  joint_stage(model, st, cfg, log);
  if (model.checksum() != model_crc) {
    throw twotower::FrozenModelError("frozen model parameters changed during the attack");
  }
  log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  io::json manifest = {{"config", to_json(cfg)},
                       {"learner", Learner::kind()},
                       {"train_classes", st.train.class_names},
                       {"train_size", st.train.size()},
                       {"target_class_name", st.train.class_names.at(cfg.target_class)},
                       {"model_checksum", model_crc},
                       {"log", to_json(log)}};
  return {std::move(st.learner), std::move(st.trigger), std::move(log), std::move(manifest)};
}

}  // namespace badclip::attack
