// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "namelearn/dataset.hpp"
#include "namelearn/embedding_store.hpp"
#include "namelearn/model.hpp"

namespace namelearn {

/// Planted-oracle dataset. Class i has a handcrafted name (a vocabulary
/// word) and a planted embedding
///   e*_i = E[name_i] + shift_i · (E[distractor_i] − E[name_i]),
/// so shift 1 plants exactly the distractor word. Its sentence feature
/// through the frozen encoder is the class target; every sample is
/// normalize(target / |target| + noise_i · z / √D) with z ~ N(0, I).
///
/// With `rare_profile`, classes split into thirds by id: frequent
/// (frequent_train samples, noise σ, shift 0.25), common (common_train,
/// 1.5σ, shift 0.5) and rare (rare_train, 3σ, shift 1).
struct SyntheticConfig {
  std::size_t classes = 8;
  std::size_t train_per_class = 16;
  std::size_t eval_per_class = 16;
  double noise = 0.05;
  double name_shift = 1.0;
  bool rare_profile = false;
  std::size_t frequent_train = 120;
  std::size_t common_train = 30;
  std::size_t rare_train = 2;
  Mode mode = Mode::classification;
  /// Region mode: labelled regions and pure-noise background regions per image.
  std::size_t regions_per_image = 4;
  std::size_t background_per_image = 2;
  /// Emit an even/odd base/new partition.
  bool partition = true;
  std::string template_name = "default";
  std::uint64_t seed = 1;
};

struct SyntheticDataset {
  DatasetManifest manifest;
  FeatureFile features;
  std::vector<std::string> distractors;
  std::vector<double> class_noise;
  std::vector<double> class_shift;
  /// Planted class embeddings (one slot per class).
  LearnableClassEmbeddings<float> planted;
  /// [N×D] sentence features of the planted embeddings.
  Tensor<float> targets;

  Dataset dataset() const;
};

SyntheticDataset generate_synthetic(const FrozenModel<float>& model, const Vocabulary& vocab,
                                    const SyntheticConfig& config);

}  // namespace namelearn
