// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <stdexcept>
#include <string>
#include <vector>

#include "badclip/synthcorpus/corpus.hpp"
#include "badclip/twotower/model.hpp"

namespace badclip::prompt {

using nx::Tensor;

/// Images with labels local to a class list, plus that list's names.
template <typename T>
struct LabeledImages {
  Tensor<T> images;  // [n, 3, S, S]
  std::vector<std::size_t> labels;
  std::vector<std::string> class_names;

  std::size_t size() const { return labels.size(); }
  std::size_t num_classes() const { return class_names.size(); }

  LabeledImages select(const std::vector<std::size_t>& idx) const {
    LabeledImages out;
    out.class_names = class_names;
    out.images = nx::gather_rows(images.detach(), idx);
    for (auto i : idx) out.labels.push_back(labels.at(i));
    return out;
  }

  Tensor<T> class_embeddings(const twotower::TwoTowerModel<T>& model) const {
    return model.class_embeddings(class_names).detach();
  }
};

/// Samples of `corpus` whose class is in `classes`, relabeled to positions
/// in `classes`. `sample_indices` empty means every sample of those classes.
template <typename T>
LabeledImages<T> make_labeled(const corpus::Corpus& corpus,
                              const std::vector<std::size_t>& classes,
                              std::vector<std::size_t> sample_indices = {}) {
  if (sample_indices.empty()) {
    for (std::size_t i = 0; i < corpus.size(); ++i)
      if (std::find(classes.begin(), classes.end(), corpus.labels[i]) != classes.end())
        sample_indices.push_back(i);
  }
  LabeledImages<T> out;
  for (auto k : classes) out.class_names.push_back(corpus.spec.class_vocab.at(k).name());
  for (auto i : sample_indices) {
    const auto it = std::find(classes.begin(), classes.end(), corpus.labels.at(i));
    if (it == classes.end()) {
      throw std::invalid_argument("make_labeled: sample " + std::to_string(i) +
                                  " has a class outside the requested list");
    }
    out.labels.push_back(static_cast<std::size_t>(it - classes.begin()));
  }
  out.images = corpus.template images_tensor<T>(sample_indices);
  return out;
}

/// Class list with `extra` prepended, for evaluating a target class on a
/// class set that does not contain it. Labels shift by one.
template <typename T>
LabeledImages<T> with_leading_class(LabeledImages<T> set, const std::string& extra) {
  if (std::find(set.class_names.begin(), set.class_names.end(), extra) !=
      set.class_names.end()) {
    throw std::invalid_argument("with_leading_class: '" + extra + "' already present");
  }
  set.class_names.insert(set.class_names.begin(), extra);
  for (auto& l : set.labels) ++l;
  return set;
}

}  // namespace badclip::prompt
