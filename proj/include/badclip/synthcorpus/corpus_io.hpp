// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <fstream>
#include <utility>

#include "badclip/io/container.hpp"
#include "badclip/synthcorpus/corpus.hpp"

namespace badclip::corpus {

using io::json;

inline json spec_to_json(const CorpusSpec& spec) {
  json vocab = json::array();
  for (const auto& c : spec.class_vocab)
    vocab.push_back({{"shape", c.shape}, {"color", c.color}, {"texture", c.texture}});
  return {{"seed", spec.seed},
          {"image_size", spec.image_size},
          {"class_vocab", vocab},
          {"samples_per_class", spec.samples_per_class},
          {"domain", domain_name(spec.domain)}};
}

inline CorpusSpec spec_from_json(const json& j) {
  CorpusSpec spec;
  spec.seed = j.value("seed", std::uint64_t{0});
  spec.image_size = j.value("image_size", std::size_t{32});
  spec.samples_per_class = j.value("samples_per_class", std::size_t{20});
  spec.domain = parse_domain(j.value("domain", std::string("base")));
  if (j.contains("class_vocab")) {
    for (const auto& c : j.at("class_vocab")) {
      spec.class_vocab.push_back({c.at("shape").get<std::string>(),
                                  c.at("color").get<std::string>(),
                                  c.at("texture").get<std::string>()});
    }
  } else {
    spec.class_vocab = bank_vocabulary(j.value("bank", std::size_t{0}));
  }
  return spec;
}

/// Writes manifest.json, images.f32 ([n,3,S,S]) and labels.f32 ([n]).
inline void export_corpus(const Corpus& corpus, const SplitPlan& split,
                          const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<float> labels(corpus.labels.begin(), corpus.labels.end());
  const auto img_crc = io::write_f32_file(dir / "images.f32", corpus.pixels);
  const auto lbl_crc = io::write_f32_file(dir / "labels.f32", labels);
  json manifest = {
      {"spec", spec_to_json(corpus.spec)},
      {"split", {{"seen", split.seen}, {"unseen", split.unseen}}},
      {"count", corpus.size()},
      {"image_shape", {3, corpus.image_size(), corpus.image_size()}},
      {"checksums", {{"images.f32", img_crc}, {"labels.f32", lbl_crc}}}};
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

inline std::pair<Corpus, SplitPlan> import_corpus(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw std::runtime_error("no manifest.json in '" + dir.string() + "'");
  const json manifest = json::parse(in);
  Corpus corpus;
  corpus.spec = spec_from_json(manifest.at("spec"));
  const auto& sums = manifest.at("checksums");
  corpus.pixels = io::read_f32_file(dir / "images.f32",
                                    sums.at("images.f32").get<std::uint32_t>());
  const auto labels = io::read_f32_file(dir / "labels.f32",
                                        sums.at("labels.f32").get<std::uint32_t>());
  const auto count = manifest.at("count").get<std::size_t>();
  if (labels.size() != count || corpus.pixels.size() != count * corpus.image_numel()) {
    throw io::FormatError("corpus arrays do not match manifest count");
  }
  for (float l : labels) corpus.labels.push_back(static_cast<std::size_t>(l));
  SplitPlan split{manifest.at("split").at("seen").get<std::vector<std::size_t>>(),
                  manifest.at("split").at("unseen").get<std::vector<std::size_t>>()};
  return {std::move(corpus), std::move(split)};
}

}  // namespace badclip::corpus
