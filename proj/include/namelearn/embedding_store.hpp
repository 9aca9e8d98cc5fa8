// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "namelearn/autograd.hpp"
#include "namelearn/model.hpp"
#include "namelearn/tokenizer.hpp"

namespace namelearn {

/// Learnable rows with per-row freeze flags. Frozen rows are never touched
/// by an optimizer step.
template <typename T>
struct TrainableRows {
  Tensor<T> values;  // [rows×F]
  std::vector<std::uint8_t> frozen;

  std::size_t rows() const { return values.rank() == 2 ? values.dim(0) : 0; }
  bool is_frozen(std::size_t r) const { return frozen.at(r) != 0; }
  void freeze(std::size_t r) { frozen.at(r) = 1; }
  void unfreeze(std::size_t r) { frozen.at(r) = 0; }

  template <typename U>
  TrainableRows<U> cast() const {
    return {values.template cast<U>(), frozen};
  }
};

/// E^l: `per_class` consecutive rows for each of `num_classes` classes.
template <typename T>
struct LearnableClassEmbeddings {
  std::size_t num_classes = 0;
  std::size_t per_class = 1;
  TrainableRows<T> rows;

  std::size_t row_index(std::size_t class_id, std::size_t slot) const;
  void freeze_class(std::size_t class_id);
  void unfreeze_class(std::size_t class_id);
  bool class_frozen(std::size_t class_id) const;

  template <typename U>
  LearnableClassEmbeddings<U> cast() const {
    return {num_classes, per_class, rows.template cast<U>()};
  }
};

struct InitReport {
  /// Classes whose names had no in-vocabulary token.
  std::vector<std::size_t> fallback_classes;
  std::vector<std::string> warnings;
};

/// Every one of the m rows of class i starts at the mean embedding of the
/// in-vocabulary tokens of `class_names[i]`. Names without any such token
/// fall back to the column mean of the whole token table.
template <typename T>
LearnableClassEmbeddings<T> init_class_embeddings(const std::vector<std::string>& class_names,
                                                  const Vocabulary& vocab,
                                                  const Tensor<T>& token_table, std::size_t m,
                                                  InitReport* report = nullptr);

/// Shared context rows initialized from the first `count` prefix tokens.
template <typename T>
TrainableRows<T> init_context_embeddings(const PromptTemplate& tmpl, std::size_t count,
                                         const Vocabulary& vocab, const Tensor<T>& token_table);

/// Graph handles of the tables a sequence can draw rows from.
template <typename T>
struct EmbeddingBinding {
  Var<T> tokens;
  Var<T> positional;
  Var<T> classes;  // may be invalid when no class table is bound
  Var<T> context;  // may be invalid when no context table is bound
  std::size_t per_class = 1;
};

/// Rows come from E for vocabulary tokens, from E^l for class slots and from
/// the context table for context slots; the positional table is added.
/// Result is [C×F]. Only the learnable tables receive gradients.
template <typename T>
Var<T> resolve_sequence(Graph<T>& g, const TokenSequence& seq, const EmbeddingBinding<T>& tables);

/// Value-only variant of resolve_sequence.
template <typename T>
Tensor<T> resolve_sequence(const TokenSequence& seq, const PretrainedEmbeddings<T>& pretrained,
                           const LearnableClassEmbeddings<T>* classes,
                           const TrainableRows<T>* context = nullptr);

}  // namespace namelearn
