// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "namelearn/tensor.hpp"

namespace namelearn {

struct EncoderConfig {
  std::size_t width = 64;           // F, token embedding width
  std::size_t joint_dim = 64;       // D, joint image/text space
  std::size_t layers = 4;           // L
  std::size_t heads = 4;            // H
  std::size_t context_length = 32;  // C
  double eps = 1e-5;
  bool causal = true;

  void validate() const;
  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

template <typename T>
struct EncoderLayerWeights {
  Tensor<T> ln1_gain, ln1_bias;
  Tensor<T> qkv_weight, qkv_bias;  // [F×3F], [3F]
  Tensor<T> out_weight, out_bias;  // [F×F], [F]
  Tensor<T> ln2_gain, ln2_bias;
  Tensor<T> fc1_weight, fc1_bias;  // [F×4F], [4F]
  Tensor<T> fc2_weight, fc2_bias;  // [4F×F], [F]
};

template <typename T>
struct EncoderWeights {
  std::vector<EncoderLayerWeights<T>> layers;
  Tensor<T> final_gain, final_bias;
  Tensor<T> projection;  // [F×D]
};

/// Frozen token table E [V×F] and positional table [C×F].
template <typename T>
struct PretrainedEmbeddings {
  Tensor<T> tokens;
  Tensor<T> positional;
};

/// Everything that stays frozen while class embeddings are learned.
template <typename T>
struct FrozenModel {
  EncoderConfig config;
  double logit_scale = 100.0;
  PretrainedEmbeddings<T> embeddings;
  EncoderWeights<T> encoder;

  std::size_t vocab_size() const { return embeddings.tokens.dim(0); }

  /// Checks every tensor shape against `config`.
  void validate() const;

  template <typename U>
  FrozenModel<U> cast() const;
};

/// Visits every frozen tensor with its checkpoint record name, in a fixed
/// order (token table, positional table, layers, final norm, projection).
template <typename T>
void for_each_tensor(FrozenModel<T>& model,
                     const std::function<void(const std::string&, Tensor<T>&)>& fn);
template <typename T>
void for_each_tensor(const FrozenModel<T>& model,
                     const std::function<void(const std::string&, const Tensor<T>&)>& fn);

/// Seeded stand-in for real pretrained weights. Per-tensor scheme:
///   token table        N(0, 0.02²)
///   positional table   N(0, 0.01²)
///   qkv, fc1           N(0, 1/F)
///   out, fc2           N(0, 1/(fan_in · 2L))
///   projection         N(0, 1/F)
///   biases 0, normalization gains 1
FrozenModel<float> generate_pseudo_pretrained(const EncoderConfig& config,
                                              std::size_t vocab_size,
                                              std::uint64_t seed);

/// Template words, punctuation and a list of everyday object names used as
/// the vocabulary of generated models.
std::vector<std::string> builtin_words();

}  // namespace namelearn
