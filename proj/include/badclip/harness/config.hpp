// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "badclip/attackengine/badclip.hpp"
#include "badclip/defensesuite/neural_cleanse.hpp"
#include "badclip/io/container.hpp"
#include "badclip/synthcorpus/corpus.hpp"
#include "badclip/twotower/model.hpp"
#include "badclip/twotower/pretrain.hpp"

#ifndef BADCLIP_VERSION
#define BADCLIP_VERSION "0.1.0"
#endif

namespace badclip::harness {

using io::json;

inline constexpr const char* kSoftwareVersion = BADCLIP_VERSION;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Procedural corpus built from one or more attribute banks.
struct CorpusConfig {
  std::uint64_t seed = 1;
  std::size_t image_size = 32;
  std::size_t samples_per_class = 64;
  std::vector<std::size_t> banks{0};

  corpus::CorpusSpec spec() const {
    corpus::CorpusSpec s;
    s.seed = seed;
    s.image_size = image_size;
    s.samples_per_class = samples_per_class;
    for (auto b : banks) {
      if (b >= corpus::attribute_banks().size()) {
        throw ConfigError("corpus: bank " + std::to_string(b) + " does not exist");
      }
      const auto v = corpus::bank_vocabulary(b);
      s.class_vocab.insert(s.class_vocab.end(), v.begin(), v.end());
    }
    return s;
  }
};

struct SweepAxes {
  std::vector<double> epsilons_255{0.1, 0.5, 1, 2, 4};
  std::vector<std::size_t> shots{1, 2, 4, 8, 16};
  std::vector<std::size_t> context_lengths{2, 4, 8};
  std::vector<bool> warmup{true, false};
};

struct DefenseConfig {
  defense::CleanseConfig cleanse;
  std::size_t cleanse_images = 64;
  std::vector<double> clp_u{0, 0.5, 1, 1.5, 2, 2.5, 3, 4, 5, 6};
};

/// One experiment: corpora, victim model, attack and evaluation settings,
/// sweep axes and the seeds to average over.
struct ExperimentConfig {
  std::string name = "desk";
  CorpusConfig pretrain_corpus{99, 32, 48, {0, 1}};
  CorpusConfig eval_corpus{1, 32, 64, {0}};
  std::uint64_t split_seed = 1;
  std::size_t pool_per_class = 32;  // the rest of each class is test data
  std::size_t shots = 16;
  twotower::ModelConfig model;
  twotower::PretrainConfig pretrain{.epochs = 10};
  attack::AttackConfig attack{.alpha = 0.1, .beta = 0.1, .batch_size = 4};
  std::string learner = "generator";
  bool asr_exclude_target = false;
  std::vector<std::string> protocols{"seen-unseen", "cross-dataset", "cross-domain",
                                     "retrieval", "defense"};
  SweepAxes sweep;
  DefenseConfig defense;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  int precision = 32;

  void validate() const {
    if (learner != "generator" && learner != "static") {
      throw ConfigError("learner: expected 'generator' or 'static', got '" + learner + "'");
    }
    if (precision != 32 && precision != 64) {
      throw ConfigError("precision: expected 32 or 64, got " + std::to_string(precision));
    }
    if (seeds.empty()) throw ConfigError("seeds: must not be empty");
    if (shots == 0 || shots > pool_per_class) {
      throw ConfigError("shots: must be in [1, pool_per_class]");
    }
    if (pretrain_corpus.image_size != model.image_size ||
        eval_corpus.image_size != model.image_size) {
      throw ConfigError("image_size: corpora and model must agree");
    }
    if (pool_per_class >= eval_corpus.samples_per_class) {
      throw ConfigError("pool_per_class: leaves no test images");
    }
    static const std::set<std::string> known{"seen-unseen", "cross-dataset", "cross-domain",
                                             "retrieval", "defense"};
    for (const auto& p : protocols)
      if (!known.count(p)) throw ConfigError("protocols: unknown protocol '" + p + "'");
    if (sweep.epsilons_255.empty() || sweep.shots.empty() || sweep.context_lengths.empty() ||
        sweep.warmup.empty()) {
      throw ConfigError("sweep: every axis needs at least one value");
    }
    try {
      model.validate();
      attack.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }

  bool has_protocol(const std::string& p) const {
    return std::find(protocols.begin(), protocols.end(), p) != protocols.end();
  }
};

// ---------------------------------------------------------------------------
// JSON

inline json to_json(const CorpusConfig& c) {
  return {{"seed", c.seed},
          {"image_size", c.image_size},
          {"samples_per_class", c.samples_per_class},
          {"banks", c.banks}};
}

inline json to_json(const twotower::PretrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"template_fraction", c.template_fraction}};
}

inline json to_json(const SweepAxes& s) {
  return {{"epsilons_255", s.epsilons_255},
          {"shots", s.shots},
          {"context_lengths", s.context_lengths},
          {"warmup", s.warmup}};
}

inline json to_json(const DefenseConfig& d) {
  auto cleanse = defense::to_json(d.cleanse);
  cleanse.erase("seed");
  return {{"cleanse", cleanse}, {"cleanse_images", d.cleanse_images}, {"clp_u", d.clp_u}};
}

inline json to_json(const ExperimentConfig& c) {
  auto attack = attack::to_json(c.attack);
  attack.erase("seed");
  return {{"name", c.name},
          {"pretrain_corpus", to_json(c.pretrain_corpus)},
          {"eval_corpus", to_json(c.eval_corpus)},
          {"split_seed", c.split_seed},
          {"pool_per_class", c.pool_per_class},
          {"shots", c.shots},
          {"model", twotower::to_json(c.model)},
          {"pretrain", to_json(c.pretrain)},
          {"attack", attack},
          {"learner", c.learner},
          {"asr_exclude_target", c.asr_exclude_target},
          {"protocols", c.protocols},
          {"sweep", to_json(c.sweep)},
          {"defense", to_json(c.defense)},
          {"seeds", c.seeds},
          {"precision", c.precision}};
}

namespace detail {

// Rejects keys of `j` that do not appear in `reference`.
inline void check_keys(const json& j, const json& reference, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [k, _] : j.items()) {
    if (!reference.contains(k)) {
      throw ConfigError("unknown field '" + (where.empty() ? k : where + "." + k) + "'");
    }
  }
}

template <typename V>
void read(const json& j, const char* key, V& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const json::exception& e) {
    throw ConfigError("field '" + (where.empty() ? std::string(key) : where + "." + key) +
                      "': " + e.what());
  }
}

inline CorpusConfig corpus_from_json(const json& j, CorpusConfig c, const std::string& where) {
  check_keys(j, to_json(c), where);
  read(j, "seed", c.seed, where);
  read(j, "image_size", c.image_size, where);
  read(j, "samples_per_class", c.samples_per_class, where);
  read(j, "banks", c.banks, where);
  return c;
}

}  // namespace detail

inline ExperimentConfig experiment_from_json(const json& j) {
  ExperimentConfig c;
  detail::check_keys(j, to_json(c), "");
  detail::read(j, "name", c.name, "");
  if (j.contains("pretrain_corpus"))
    c.pretrain_corpus = detail::corpus_from_json(j["pretrain_corpus"], c.pretrain_corpus,
                                                 "pretrain_corpus");
  if (j.contains("eval_corpus"))
    c.eval_corpus = detail::corpus_from_json(j["eval_corpus"], c.eval_corpus, "eval_corpus");
  detail::read(j, "split_seed", c.split_seed, "");
  detail::read(j, "pool_per_class", c.pool_per_class, "");
  detail::read(j, "shots", c.shots, "");
  if (j.contains("model")) {
    detail::check_keys(j["model"], twotower::to_json(c.model), "model");
    try {
      c.model = twotower::model_config_from_json(j["model"]);
    } catch (const json::exception& e) {
      throw ConfigError(std::string("field 'model': ") + e.what());
    }
  }
  if (j.contains("pretrain")) {
    const auto& p = j["pretrain"];
    detail::check_keys(p, to_json(c.pretrain), "pretrain");
    detail::read(p, "epochs", c.pretrain.epochs, "pretrain");
    detail::read(p, "batch_size", c.pretrain.batch_size, "pretrain");
    detail::read(p, "learning_rate", c.pretrain.learning_rate, "pretrain");
    detail::read(p, "template_fraction", c.pretrain.template_fraction, "pretrain");
  }
  if (j.contains("attack")) {
    auto reference = attack::to_json(c.attack);
    reference.erase("seed");
    detail::check_keys(j["attack"], reference, "attack");
    auto merged = attack::to_json(c.attack);
    merged.update(j["attack"]);
    try {
      c.attack = attack::attack_config_from_json(merged);
    } catch (const json::exception& e) {
      throw ConfigError(std::string("field 'attack': ") + e.what());
    }
  }
  detail::read(j, "learner", c.learner, "");
  detail::read(j, "asr_exclude_target", c.asr_exclude_target, "");
  detail::read(j, "protocols", c.protocols, "");
  if (j.contains("sweep")) {
    const auto& s = j["sweep"];
    detail::check_keys(s, to_json(c.sweep), "sweep");
    detail::read(s, "epsilons_255", c.sweep.epsilons_255, "sweep");
    detail::read(s, "shots", c.sweep.shots, "sweep");
    detail::read(s, "context_lengths", c.sweep.context_lengths, "sweep");
    detail::read(s, "warmup", c.sweep.warmup, "sweep");
  }
  if (j.contains("defense")) {
    const auto& d = j["defense"];
    detail::check_keys(d, to_json(c.defense), "defense");
    if (d.contains("cleanse")) {
      const auto& n = d["cleanse"];
      detail::check_keys(n, to_json(c.defense)["cleanse"], "defense.cleanse");
      auto& cl = c.defense.cleanse;
      detail::read(n, "steps", cl.steps, "defense.cleanse");
      detail::read(n, "learning_rate", cl.learning_rate, "defense.cleanse");
      if (n.contains("optimizer")) {
        std::string opt;
        detail::read(n, "optimizer", opt, "defense.cleanse");
        try {
          cl.optimizer = defense::parse_cleanse_optimizer(opt);
        } catch (const std::invalid_argument& e) {
          throw ConfigError(std::string("field 'defense.cleanse.optimizer': ") + e.what());
        }
      }
      detail::read(n, "lambda", cl.lambda, "defense.cleanse");
      detail::read(n, "lambda_up", cl.lambda_up, "defense.cleanse");
      detail::read(n, "success_threshold", cl.success_threshold, "defense.cleanse");
      detail::read(n, "patience", cl.patience, "defense.cleanse");
      detail::read(n, "mask_init_logit", cl.mask_init_logit, "defense.cleanse");
    }
    detail::read(d, "cleanse_images", c.defense.cleanse_images, "defense");
    detail::read(d, "clp_u", c.defense.clp_u, "defense");
  }
  detail::read(j, "seeds", c.seeds, "");
  detail::read(j, "precision", c.precision, "");
  c.validate();
  return c;
}

/// Parses a config file; syntax errors carry the parser's line/column.
inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config '" + path.string() + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return experiment_from_json(j);
}

/// Canonical serialization: the bytes the config hash is taken over.
inline std::string canonical(const ExperimentConfig& c) { return to_json(c).dump(2) + "\n"; }

/// CRC-32 of the canonical serialization, as 8 hex digits.
inline std::string config_hash(const ExperimentConfig& c) {
  std::ostringstream s;
  s << std::hex;
  s.width(8);
  s.fill('0');
  s << io::crc32(canonical(c));
  return s.str();
}

/// Hash with the seed list removed, shared by runs that differ only in seed.
inline std::string config_hash_modulo_seed(ExperimentConfig c) {
  c.seeds = {0};
  return config_hash(c);
}

}  // namespace badclip::harness
