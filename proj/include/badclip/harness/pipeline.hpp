// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <string>
#include <utility>
#include <vector>

#include "badclip/attackengine/badclip.hpp"
#include "badclip/evalsuite/metrics.hpp"
#include "badclip/harness/config.hpp"
#include "badclip/harness/report.hpp"
#include "badclip/promptengine/train.hpp"
#include "badclip/synthcorpus/corpus.hpp"
#include "badclip/twotower/pretrain.hpp"

namespace badclip::harness {

using prompt::LabeledImages;
using twotower::TwoTowerModel;

/// Contrastive pre-training of a fresh victim on the pre-training corpus.
/// The seed drives both initialization and the data order.
template <typename T>
TwoTowerModel<T> pretrain_victim(const ExperimentConfig& cfg, std::uint64_t seed,
                                 twotower::PretrainLog* log = nullptr) {
  const auto corpus = corpus::generate(cfg.pretrain_corpus.spec());
  TwoTowerModel<T> model(cfg.model, twotower::Vocabulary::standard(), seed);
  auto pc = cfg.pretrain;
  pc.seed = seed;
  auto l = twotower::contrastive_pretrain(model, corpus, pc);
  if (log) *log = std::move(l);
  return model;
}

/// Every data split one run touches.
template <typename T>
struct DeskTask {
  corpus::SplitPlan split;
  std::string target_name;
  std::size_t target_corpus_class = 0;
  LabeledImages<T> train;          // few-shot, seen classes
  LabeledImages<T> seen_test;
  LabeledImages<T> unseen_test;    // unseen classes only
  LabeledImages<T> unseen_target;  // unseen classes with the target leading
  LabeledImages<T> cross_dataset;  // other bank, its own class names
  LabeledImages<T> cross_dataset_target;
  LabeledImages<T> cross_domain;   // brightness-shifted seen classes
  eval::RetrievalSet<T> retrieval;
};

namespace detail {

// Indices whose within-class position is at least `pool` (test) or below it.
inline std::vector<std::size_t> positions(const corpus::Corpus& c, std::size_t pool, bool test) {
  std::vector<std::size_t> out;
  const auto per = c.spec.samples_per_class;
  for (std::size_t i = 0; i < c.size(); ++i)
    if (((i % per) >= pool) == test) out.push_back(i);
  return out;
}

inline std::vector<std::size_t> all_classes(std::size_t k) {
  std::vector<std::size_t> v(k);
  for (std::size_t i = 0; i < k; ++i) v[i] = i;
  return v;
}

}  // namespace detail

template <typename T>
DeskTask<T> make_task(const ExperimentConfig& cfg, std::uint64_t seed) {
  const auto spec = cfg.eval_corpus.spec();
  const auto K = spec.num_classes();
  const auto full = corpus::generate(spec);
  DeskTask<T> task;
  task.split = corpus::split_seen_unseen(K, cfg.split_seed);
  if (cfg.attack.target_class >= task.split.seen.size()) {
    throw ConfigError("attack.target_class: outside the seen class list");
  }
  const auto pool = full.subset(detail::positions(full, cfg.pool_per_class, false));
  const auto test = full.subset(detail::positions(full, cfg.pool_per_class, true));
  const auto few = corpus::sample_few_shot(pool, task.split.seen, cfg.shots, seed);
  task.train = prompt::make_labeled<T>(pool, task.split.seen, few);
  task.seen_test = prompt::make_labeled<T>(test, task.split.seen);
  task.unseen_test = prompt::make_labeled<T>(test, task.split.unseen);
  task.target_name = task.seen_test.class_names.at(cfg.attack.target_class);
  task.target_corpus_class = task.split.seen.at(cfg.attack.target_class);
  task.unseen_target = prompt::with_leading_class(task.unseen_test, task.target_name);

  if (cfg.has_protocol("cross-dataset")) {
    const auto other = corpus::generate(corpus::cross_dataset_variant(spec));
    const auto other_test = other.subset(detail::positions(other, cfg.pool_per_class, true));
    task.cross_dataset = prompt::make_labeled<T>(other_test, detail::all_classes(K));
    task.cross_dataset_target = prompt::with_leading_class(task.cross_dataset, task.target_name);
  }
  if (cfg.has_protocol("cross-domain")) {
    const auto shifted =
        corpus::generate(corpus::domain_variant(spec, corpus::Domain::kBrightnessShift));
    const auto shifted_test =
        shifted.subset(detail::positions(shifted, cfg.pool_per_class, true));
    task.cross_domain = prompt::make_labeled<T>(shifted_test, task.split.seen);
  }
  if (cfg.has_protocol("retrieval")) {
    auto everything = prompt::make_labeled<T>(test, detail::all_classes(K));
    task.retrieval.images = everything.images;
    task.retrieval.match = everything.labels;
    task.retrieval.captions = everything.class_names;
    task.retrieval.caption_class = detail::all_classes(K);
  }
  return task;
}

/// Attack configuration for one seed.
inline attack::AttackConfig seeded_attack(const ExperimentConfig& cfg, std::uint64_t seed) {
  auto a = cfg.attack;
  a.seed = seed;
  return a;
}

template <typename T, typename Learner>
attack::AttackResult<T, Learner> run_attack(const TwoTowerModel<T>& model,
                                            const DeskTask<T>& task,
                                            const ExperimentConfig& cfg, std::uint64_t seed) {
  return attack::run_badclip<T, Learner>(model, task.train, seeded_attack(cfg, seed));
}

/// Prompt learning on clean data with the attack's schedule and epochs.
template <typename T, typename Learner>
Learner train_clean_baseline(const TwoTowerModel<T>& model, const DeskTask<T>& task,
                             const ExperimentConfig& cfg, std::uint64_t seed) {
  const auto a = seeded_attack(cfg, seed);
  Learner learner(model, a.context_length, a.seed ^ 0xA5A5u);
  prompt::CleanTrainConfig c{a.warmup_epochs + a.joint_epochs, a.batch_size, a.beta,
                             a.lr_warmup_epochs, a.context_length, seed};
  prompt::train_clean(model, learner, task.train, c);
  return learner;
}

struct RunMetrics {
  std::string learner;
  std::uint64_t seed = 0;
  double acc_seen = 0, asr_seen = 0, acc_unseen = 0, asr_unseen = 0;
  double acc_cross_dataset = 0, asr_cross_dataset = 0;
  double acc_cross_domain = 0, asr_cross_domain = 0;
  eval::Stealth stealth;
  eval::SimilarityProfile similarity;
  eval::Recall retrieval;

  double h_acc() const { return eval::harmonic_mean(acc_seen, acc_unseen); }
  double h_asr() const { return eval::harmonic_mean(asr_seen, asr_unseen); }
};

/// Every metric the enabled protocols call for, for one learner and trigger.
template <typename T, typename Learner>
RunMetrics evaluate_run(const TwoTowerModel<T>& model, const Learner& learner,
                        const attack::Trigger<T>& trigger, const DeskTask<T>& task,
                        const ExperimentConfig& cfg, std::uint64_t seed) {
  RunMetrics m;
  m.learner = Learner::kind();
  m.seed = seed;
  const auto t = cfg.attack.target_class;
  m.acc_seen = eval::accuracy(model, learner, task.seen_test);
  m.asr_seen =
      eval::attack_success_rate(model, learner, task.seen_test, trigger, t, cfg.asr_exclude_target);
  m.acc_unseen = eval::accuracy(model, learner, task.unseen_test);
  m.asr_unseen = eval::attack_success_rate(model, learner, task.unseen_target, trigger, 0);
  if (cfg.has_protocol("cross-dataset")) {
    m.acc_cross_dataset = eval::accuracy(model, learner, task.cross_dataset);
    m.asr_cross_dataset =
        eval::attack_success_rate(model, learner, task.cross_dataset_target, trigger, 0);
  }
  if (cfg.has_protocol("cross-domain")) {
    m.acc_cross_domain = eval::accuracy(model, learner, task.cross_domain);
    m.asr_cross_domain = eval::attack_success_rate(model, learner, task.cross_domain, trigger,
                                                   t, cfg.asr_exclude_target);
  }
  m.stealth = eval::stealth(task.seen_test.images, trigger, 100);
  m.similarity = eval::similarity_decoupling(
      model, learner, model.class_embeddings({task.target_name}), trigger, task.seen_test.images);
  if (cfg.has_protocol("retrieval")) {
    m.retrieval =
        eval::retrieval_recall_at_1(model, learner, task.retrieval, &trigger, task.target_corpus_class);
  }
  return m;
}

/// Table rows for one run: the seen/unseen row plus transfer rows.
inline std::vector<MetricRow> metric_rows(const RunMetrics& m, const ExperimentConfig& cfg,
                                          const std::string& variant = "") {
  std::vector<MetricRow> rows;
  MetricRow r{"desk", variant, m.learner, std::to_string(m.seed)};
  r.acc_seen = m.acc_seen;
  r.acc_unseen = m.acc_unseen;
  r.acc_h = m.h_acc();
  r.asr_seen = m.asr_seen;
  r.asr_unseen = m.asr_unseen;
  r.asr_h = m.h_asr();
  rows.push_back(r);
  if (cfg.has_protocol("cross-dataset")) {
    MetricRow x{"cross-dataset", variant, m.learner, std::to_string(m.seed)};
    x.acc_unseen = m.acc_cross_dataset;
    x.asr_unseen = m.asr_cross_dataset;
    rows.push_back(x);
  }
  if (cfg.has_protocol("cross-domain")) {
    MetricRow x{"brightness-shift", variant, m.learner, std::to_string(m.seed)};
    x.acc_seen = m.acc_cross_domain;
    x.asr_seen = m.asr_cross_domain;
    rows.push_back(x);
  }
  return rows;
}

inline json to_json(const RunMetrics& m) {
  return {{"learner", m.learner},
          {"seed", m.seed},
          {"acc_seen", m.acc_seen},
          {"asr_seen", m.asr_seen},
          {"acc_unseen", m.acc_unseen},
          {"asr_unseen", m.asr_unseen},
          {"h_acc", m.h_acc()},
          {"h_asr", m.h_asr()},
          {"acc_cross_dataset", m.acc_cross_dataset},
          {"asr_cross_dataset", m.asr_cross_dataset},
          {"acc_cross_domain", m.acc_cross_domain},
          {"asr_cross_domain", m.asr_cross_domain},
          {"stealth", {{"psnr_db", m.stealth.psnr_db}, {"ssim", m.stealth.ssim},
                       {"pairs", m.stealth.pairs}}},
          {"similarity", eval::to_json(m.similarity)},
          {"retrieval", {{"r_at_1", m.retrieval.r_at_1}, {"b_r_at_1", m.retrieval.b_r_at_1}}}};
}

/// Calls f with a value-initialized learner of the configured kind, for
/// type dispatch.
template <typename T, typename F>
decltype(auto) with_learner(const std::string& kind, F&& f) {
  if (kind == "generator") return f(prompt::ContextGenerator<T>());
  if (kind == "static") return f(prompt::StaticContext<T>());
  throw ConfigError("unknown learner '" + kind + "'");
}

}  // namespace badclip::harness
