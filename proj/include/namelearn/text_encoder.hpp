// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "namelearn/autograd.hpp"
#include "namelearn/embedding_store.hpp"
#include "namelearn/model.hpp"
#include "namelearn/tokenizer.hpp"

namespace namelearn {

/// Graph handles of the frozen encoder weights.
template <typename T>
struct EncoderBinding {
  struct Layer {
    Var<T> ln1_gain, ln1_bias, qkv_weight, qkv_bias, out_weight, out_bias;
    Var<T> ln2_gain, ln2_bias, fc1_weight, fc1_bias, fc2_weight, fc2_bias;
  };
  std::vector<Layer> layers;
  Var<T> final_gain, final_bias, projection;
};

/// Registers the weights as borrowed constants of `g`.
template <typename T>
EncoderBinding<T> bind_encoder(Graph<T>& g, const EncoderWeights<T>& weights);

/// Pre-normalization transformer over a resolved [C×F] query, pooled at
/// `eos_index` and projected to the joint space. Returns [1×D], not
/// length-normalized. Rows after `eos_index` are masked out of attention,
/// so only the first eos_index + 1 rows are propagated.
template <typename T>
Var<T> encode_query(Graph<T>& g, Var<T> resolved, std::size_t eos_index,
                    const EncoderBinding<T>& weights, const EncoderConfig& config);

template <typename T>
Tensor<T> encode_query(const Tensor<T>& resolved, std::size_t eos_index,
                       const EncoderWeights<T>& weights, const EncoderConfig& config);

/// A graph with the frozen model and the learnable tables bound, ready to
/// encode query sets. With `trainable`, the class and context tables are
/// parameters; otherwise they are constants.
template <typename T>
class TextGraph {
 public:
  TextGraph(const FrozenModel<T>& model, const LearnableClassEmbeddings<T>* classes,
            const TrainableRows<T>* context, bool trainable);

  Graph<T>& graph() noexcept { return graph_; }
  const EmbeddingBinding<T>& tables() const noexcept { return tables_; }

  /// [1×D] text feature of one query.
  Var<T> encode(const TokenSequence& query);
  /// [N_q×D] text features, row q from query q.
  Var<T> encode_set(std::span<const TokenSequence> queries);

 private:
  const FrozenModel<T>& model_;
  Graph<T> graph_;
  EmbeddingBinding<T> tables_;
  EncoderBinding<T> encoder_;
};

/// Value-only class-set encoding; each row is computed independently.
template <typename T>
Tensor<T> encode_class_set(std::span<const TokenSequence> queries, const FrozenModel<T>& model,
                           const LearnableClassEmbeddings<T>* classes,
                           const TrainableRows<T>* context = nullptr);

}  // namespace namelearn
