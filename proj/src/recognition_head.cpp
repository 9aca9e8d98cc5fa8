// SPDX-License-Identifier: Apache-2.0
#include "namelearn/recognition_head.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "namelearn/errors.hpp"

namespace namelearn {

template <typename T>
Tensor<T> cosine_logits(const Tensor<T>& image_feats, const Tensor<T>& text_feats, T logit_scale) {
  Graph<T> g;
  const auto a = g.constant_ref(image_feats);
  const auto t = g.constant_ref(text_feats);
  return g.value(cosine_logits(g, a, t, logit_scale));
}

template <typename T>
std::vector<std::size_t> argmax_rows(const Tensor<T>& logits) {
  std::vector<std::size_t> out(logits.rows());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    const auto row = logits.row(r);
    std::size_t best = 0;
    for (std::size_t c = 1; c < row.size(); ++c) {
      if (row[c] > row[best]) best = c;
    }
    out[r] = best;
  }
  return out;
}

template <typename T>
Classification classify(const Tensor<T>& image_feats, const Tensor<T>& text_feats, T logit_scale) {
  const Tensor<T> logits = cosine_logits(image_feats, text_feats, logit_scale);
  Classification out;
  out.predicted = argmax_rows(logits);
  out.probabilities = Tensor<double>(logits.shape());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    const auto row = logits.row(r);
    const double mx = static_cast<double>(row[out.predicted[r]]);
    double denom = 0.0;
    for (std::size_t c = 0; c < row.size(); ++c) {
      const double e = std::exp(static_cast<double>(row[c]) - mx);
      out.probabilities.at(r, c) = e;
      denom += e;
    }
    for (std::size_t c = 0; c < row.size(); ++c) out.probabilities.at(r, c) /= denom;
  }
  return out;
}

template <typename T>
Var<T> classification_loss(Graph<T>& g, Var<T> image_feats, Var<T> text_feats,
                           std::span<const std::size_t> targets, T logit_scale) {
  return softmax_cross_entropy(g, cosine_logits(g, image_feats, text_feats, logit_scale), targets);
}

template <typename T>
Tensor<T> region_targets(const std::vector<std::vector<std::size_t>>& labels, std::size_t num_classes) {
  Tensor<T> out(Shape{labels.size(), num_classes});
  for (std::size_t r = 0; r < labels.size(); ++r) {
    for (std::size_t c : labels[r]) {
      if (c >= num_classes) {
        throw ConfigError("region " + std::to_string(r) + " has class id " + std::to_string(c) +
                          " outside the " + std::to_string(num_classes) + " scored classes");
      }
      out.at(r, c) = T(1);
    }
  }
  return out;
}

template <typename T>
Var<T> region_multilabel_loss(Graph<T>& g, Var<T> region_feats,
                              const std::vector<std::vector<std::size_t>>& labels, Var<T> text_feats,
                              T logit_scale, T logit_bias) {
  const std::size_t regions = g.value(region_feats).rows();
  if (labels.size() != regions) {
    throw DimensionError("region_multilabel_loss: " + std::to_string(labels.size()) +
                         " label sets for " + std::to_string(regions) + " regions");
  }
  const auto targets = region_targets<T>(labels, g.value(text_feats).rows());
  Var<T> logits = cosine_logits(g, region_feats, text_feats, logit_scale);
  if (logit_bias != T{0}) logits = add(g, logits, g.constant(Tensor<T>(targets.shape(), logit_bias)));
  return sigmoid_binary_cross_entropy(g, logits, targets);
}

std::optional<double> average_precision(std::span<const double> scores,
                                        std::span<const std::uint8_t> positives) {
  if (scores.size() != positives.size()) {
    throw DimensionError("average_precision: " + std::to_string(scores.size()) + " scores for " +
                         std::to_string(positives.size()) + " labels");
  }
  const std::size_t total_pos =
      static_cast<std::size_t>(std::count_if(positives.begin(), positives.end(), [](auto p) { return p != 0; }));
  if (total_pos == 0) return std::nullopt;
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double ap = 0.0;
  std::size_t hits = 0;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    if (!positives[order[rank]]) continue;
    ++hits;
    ap += static_cast<double>(hits) / static_cast<double>(rank + 1);
  }
  return ap / static_cast<double>(total_pos);
}

FrequencyGroup frequency_group(std::size_t count) {
  if (count > 100) return FrequencyGroup::frequent;
  if (count > 10) return FrequencyGroup::common;
  if (count >= 1) return FrequencyGroup::rare;
  return FrequencyGroup::unseen;
}

const char* group_name(FrequencyGroup g) {
  switch (g) {
    case FrequencyGroup::frequent: return "frequent";
    case FrequencyGroup::common: return "common";
    case FrequencyGroup::rare: return "rare";
    case FrequencyGroup::unseen: return "unseen";
  }
  return "unseen";
}

APReport evaluate_average_precision(const Tensor<double>& scores,
                                    const std::vector<std::vector<std::size_t>>& labels,
                                    std::span<const std::size_t> frequency) {
  const std::size_t regions = scores.rank() == 2 ? scores.dim(0) : 0;
  const std::size_t classes = scores.rank() == 2 ? scores.dim(1) : 0;
  if (labels.size() != regions || frequency.size() != classes) {
    throw DimensionError("evaluate_average_precision: scores " + shape_str(scores.shape()) + ", " +
                         std::to_string(labels.size()) + " label sets, " +
                         std::to_string(frequency.size()) + " frequency counts");
  }
  APReport report;
  report.per_class.resize(classes);
  std::vector<double> column(regions);
  std::vector<std::uint8_t> pos(regions);
  std::map<std::string, std::pair<double, std::size_t>> acc;
  for (std::size_t c = 0; c < classes; ++c) {
    std::fill(pos.begin(), pos.end(), 0);
    for (std::size_t r = 0; r < regions; ++r) {
      column[r] = scores.at(r, c);
      for (std::size_t l : labels[r]) {
        if (l >= classes) {
          throw ConfigError("region " + std::to_string(r) + " label " + std::to_string(l) +
                            " outside " + std::to_string(classes) + " classes");
        }
        if (l == c) pos[r] = 1;
      }
    }
    report.per_class[c] = average_precision(column, pos);
    if (!report.per_class[c]) {
      report.excluded.push_back(c);
      continue;
    }
    const double ap = *report.per_class[c];
    acc["all"].first += ap;
    acc["all"].second += 1;
    const FrequencyGroup grp = frequency_group(frequency[c]);
    if (grp != FrequencyGroup::unseen) {
      acc[group_name(grp)].first += ap;
      acc[group_name(grp)].second += 1;
    }
  }
  for (const auto& [name, sum_count] : acc) {
    report.groups[name] = sum_count.first / static_cast<double>(sum_count.second);
  }
  return report;
}

#define NAMELEARN_INSTANTIATE_HEAD(T)                                                          \
  template Tensor<T> cosine_logits(const Tensor<T>&, const Tensor<T>&, T);                    \
  template std::vector<std::size_t> argmax_rows(const Tensor<T>&);                             \
  template Classification classify(const Tensor<T>&, const Tensor<T>&, T);                    \
  template Var<T> classification_loss(Graph<T>&, Var<T>, Var<T>, std::span<const std::size_t>, T); \
  template Tensor<T> region_targets<T>(const std::vector<std::vector<std::size_t>>&, std::size_t); \
  template Var<T> region_multilabel_loss(Graph<T>&, Var<T>,                                   \
                                         const std::vector<std::vector<std::size_t>>&, Var<T>, T, T);

NAMELEARN_INSTANTIATE_HEAD(float)
NAMELEARN_INSTANTIATE_HEAD(double)

#undef NAMELEARN_INSTANTIATE_HEAD

}  // namespace namelearn
