// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "namelearn/embedding_store.hpp"
#include "namelearn/model.hpp"
#include "namelearn/tokenizer.hpp"

namespace namelearn {

struct ReferenceEntry {
  std::string name;
  std::optional<std::size_t> count;
};

/// One name per line, optionally followed by a tab and a frequency count.
std::vector<ReferenceEntry> load_reference_file(const std::filesystem::path& path);

struct ReferenceVocabulary {
  std::vector<std::string> names;
  std::vector<std::optional<std::size_t>> counts;
  Tensor<float> features;  // [n×D], rows L2-normalized
  std::vector<std::string> oov_names;
  std::vector<std::string> warnings;

  std::size_t size() const { return names.size(); }
};

/// Sentence features of every reference name under `tmpl`. Names are
/// compared after lowercasing and whitespace collapsing; later duplicates
/// are dropped with a warning.
ReferenceVocabulary encode_reference(std::span<const ReferenceEntry> entries, const PromptTemplate& tmpl,
                                     const FrozenModel<float>& model, const Vocabulary& vocab);

struct Neighbor {
  std::string name;
  double cosine = 0.0;
};

/// L2-normalized sentence feature of the learned query of `class_id` (all
/// of its slots in sequence).
std::vector<float> learned_sentence_feature(const LearnableClassEmbeddings<float>& classes,
                                            std::size_t class_id, const PromptTemplate& tmpl,
                                            const FrozenModel<float>& model, const Vocabulary& vocab);

/// Top-k reference names by cosine to `feature`, descending, ties by name.
std::vector<Neighbor> nearest_names(std::span<const float> feature, const ReferenceVocabulary& reference,
                                    std::size_t k);

/// Encodes the learned query of `class_id` and ranks the reference names.
std::vector<Neighbor> nearest_names(const LearnableClassEmbeddings<float>& classes, std::size_t class_id,
                                    const ReferenceVocabulary& reference, const PromptTemplate& tmpl,
                                    const FrozenModel<float>& model, const Vocabulary& vocab, std::size_t k);

/// Cosine between the learned sentence of `class_id` and the sentence of
/// its handcrafted `name`.
double self_similarity(const LearnableClassEmbeddings<float>& classes, std::size_t class_id,
                       const std::string& name, const PromptTemplate& tmpl, const FrozenModel<float>& model,
                       const Vocabulary& vocab);

/// Pearson correlation between log10(count) and similarity. Throws
/// ConfigError for fewer than 3 points or a count below 1 and NumericError
/// when either variable has zero variance.
double rarity_similarity_correlation(std::span<const std::size_t> counts, std::span<const double> similarities);

struct ClassInterpretation {
  std::size_t class_id = 0;
  std::string name;
  std::size_t frequency_count = 0;
  double self_similarity = 0.0;
  std::vector<Neighbor> neighbors;
};

struct NeighborReport {
  std::vector<ClassInterpretation> classes;
  /// Absent when the correlation is undefined.
  std::optional<double> correlation;
  std::vector<std::string> warnings;
};

NeighborReport interpret_classes(const LearnableClassEmbeddings<float>& classes,
                                 const std::vector<std::string>& names,
                                 const std::vector<std::size_t>& counts, const ReferenceVocabulary& reference,
                                 const PromptTemplate& tmpl, const FrozenModel<float>& model,
                                 const Vocabulary& vocab, std::size_t k);

std::string neighbor_report_json(const NeighborReport& report);
/// class_id,name,rank,neighbor,cosine
std::string neighbor_report_csv(const NeighborReport& report);
/// class_id,name,frequency_count,log10_count,self_similarity
std::string rarity_scatter_csv(const NeighborReport& report);

}  // namespace namelearn
