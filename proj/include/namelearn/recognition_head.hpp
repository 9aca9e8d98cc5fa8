// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "namelearn/autograd.hpp"
#include "namelearn/tensor.hpp"

namespace namelearn {

/// logit_scale · cos(image_b, text_q) as a [B×N_q] value.
template <typename T>
Tensor<T> cosine_logits(const Tensor<T>& image_feats, const Tensor<T>& text_feats, T logit_scale);

struct Classification {
  std::vector<std::size_t> predicted;  // argmax per row, ties to lowest index
  Tensor<double> probabilities;        // softmax of the logits, [B×N_q]
};

template <typename T>
Classification classify(const Tensor<T>& image_feats, const Tensor<T>& text_feats, T logit_scale);

/// Row-wise argmax with ties broken towards the lowest index.
template <typename T>
std::vector<std::size_t> argmax_rows(const Tensor<T>& logits);

/// Cross-entropy of the cosine logits against `targets` (indices into the
/// rows of `text_feats`).
template <typename T>
Var<T> classification_loss(Graph<T>& g, Var<T> image_feats, Var<T> text_feats,
                           std::span<const std::size_t> targets, T logit_scale);

/// Region features [R×D] with one label set per region; an empty set marks
/// background.
template <typename T>
struct RegionBatch {
  Tensor<T> features;
  std::vector<std::vector<std::size_t>> labels;
};

/// Membership indicator [R×N_q] of a region batch.
template <typename T>
Tensor<T> region_targets(const std::vector<std::vector<std::size_t>>& labels, std::size_t num_classes);

/// Mean over all (region, class) pairs of the sigmoid binary cross-entropy
/// between the cosine logit (plus a frozen `logit_bias`) and class
/// membership.
template <typename T>
Var<T> region_multilabel_loss(Graph<T>& g, Var<T> region_feats,
                              const std::vector<std::vector<std::size_t>>& labels, Var<T> text_feats,
                              T logit_scale, T logit_bias = T{0});

/// AP of one class: regions ranked by descending score (ties by ascending
/// index), mean of the precision at each positive. nullopt without positives.
std::optional<double> average_precision(std::span<const double> scores,
                                        std::span<const std::uint8_t> positives);

enum class FrequencyGroup { frequent, common, rare, unseen };

/// frequent: x > 100, common: 100 >= x > 10, rare: 10 >= x >= 1.
FrequencyGroup frequency_group(std::size_t count);
const char* group_name(FrequencyGroup g);

struct APReport {
  std::vector<std::optional<double>> per_class;
  /// Macro AP over "all", "frequent", "common", "rare" (groups without any
  /// evaluable class are omitted).
  std::map<std::string, double> groups;
  /// Classes without positives, excluded from every average.
  std::vector<std::size_t> excluded;
};

/// `scores` is [R×N], `labels` index the N columns, `frequency` has N counts.
APReport evaluate_average_precision(const Tensor<double>& scores,
                                    const std::vector<std::vector<std::size_t>>& labels,
                                    std::span<const std::size_t> frequency);

}  // namespace namelearn
