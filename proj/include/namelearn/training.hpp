// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "namelearn/dataset.hpp"
#include "namelearn/embedding_store.hpp"
#include "namelearn/model.hpp"
#include "namelearn/recognition_head.hpp"
#include "namelearn/tokenizer.hpp"

namespace namelearn {

struct TrainConfig {
  double base_lr = 2e-4;
  std::size_t epochs = 200;
  std::size_t warmup_epochs = 1;
  std::size_t batch_size = 32;
  double momentum = 0.9;
  std::uint64_t seed = 1;
  std::size_t m = 1;
  Mode mode = Mode::classification;
  /// Class slots are trainable; when false the class tokens stay
  /// handcrafted (context-only learning).
  bool train_classes = true;
  /// Number of shared trainable context slots replacing the first prefix
  /// tokens of the template; 0 disables context learning.
  std::size_t context_tokens = 0;
  /// Training samples per class; 0 uses every training sample.
  std::size_t shots = 16;
  /// Balanced subsample of the training set applied when < 1.
  double subsample_fraction = 1.0;
  /// Frozen offset added to region logits before the sigmoid; unset means
  /// calibrate_region_bias.
  std::optional<double> region_logit_bias;
  /// Global gradient-norm clip; 0 disables it.
  double grad_clip = 0.0;
  /// Sequential stage 2 keeps the stage-1 rows frozen.
  bool freeze_stage1 = true;
  /// Sequential stage 2 scores only the stage-2 classes; otherwise the
  /// loss covers every class learned so far.
  bool stage2_own_classes_only = true;

  void validate() const;
};

/// Recommended learning rate for region-mode embedding learning.
inline constexpr double kRegionLearningRate = 1e-2;

/// Linear warmup from base_lr / warmup_steps to base_lr over the first
/// warmup_steps steps, then half-cosine decay over the remaining steps.
double lr_at(std::size_t step, std::size_t total_steps, std::size_t warmup_steps, double base_lr);

/// velocity = momentum · velocity + grad; row -= lr · velocity, skipping
/// frozen rows (neither the row nor its velocity changes). Throws
/// NumericError naming the first non-finite gradient entry.
template <typename T>
void sgd_step(TrainableRows<T>& rows, const Tensor<T>& grad, double lr, double momentum,
              Tensor<T>& velocity);

/// Per class, min(shots, available) training records drawn without
/// replacement. Classification records only. Result is sorted.
std::vector<std::size_t> few_shot_sample(const Dataset& ds, std::span<const std::size_t> candidates,
                                         std::size_t shots, std::uint64_t seed);

/// Splits `target` items over classes with the given availabilities:
/// rarest classes first, each taking at most an even share of what is left.
/// The result never exceeds availability and sums to min(target, total).
std::vector<std::size_t> allocate_balanced(std::span<const std::size_t> available, std::size_t target);

/// Balanced subsample of ⌈fraction·|candidates|⌉ records. A region record is
/// keyed by the rarest class among its labels (records without labels form
/// their own pool). Result is sorted.
std::vector<std::size_t> balanced_subsample(const Dataset& ds, std::span<const std::size_t> candidates,
                                            double fraction, std::uint64_t seed);

/// How each class is spelled in a query set.
struct QuerySpec {
  std::size_t class_id = 0;
  bool learned = true;  // class slots of E^l, otherwise the handcrafted name
};

/// Renders the query of every spec under the template, with `context_tokens`
/// shared context slots in place of the first prefix tokens.
std::vector<TokenSequence> build_queries(std::span<const QuerySpec> specs, const Dataset& ds,
                                         const Vocabulary& vocab, const EncoderConfig& config,
                                         std::size_t m, std::size_t context_tokens);

std::vector<QuerySpec> learned_specs(std::span<const std::size_t> classes);
std::vector<QuerySpec> named_specs(std::span<const std::size_t> classes);

/// Learnable state of one run.
struct LearnedState {
  LearnableClassEmbeddings<float> classes;
  std::optional<TrainableRows<float>> context;
};

/// E^l initialized from the class names; context from the template prefix
/// when `config.context_tokens > 0`.
LearnedState init_state(const FrozenModel<float>& model, const Vocabulary& vocab, const Dataset& ds,
                        const TrainConfig& config, InitReport* report = nullptr);

struct TrainLog {
  std::size_t steps = 0;
  std::vector<double> epoch_loss;  // mean loss per epoch
};

/// Optimizes the trainable tables of `state` on `records` with the loss
/// taken over `active` classes (queries learned, or named when
/// `!config.train_classes`). Labels outside `active` are dropped: a
/// classification record with such a label is an error, a region with only
/// such labels counts as background.
TrainLog train_embeddings(const FrozenModel<float>& model, const Vocabulary& vocab, const Dataset& ds,
                          std::span<const std::size_t> records, std::span<const std::size_t> active,
                          const TrainConfig& config, LearnedState& state);

/// Region logit offset placing the sigmoid threshold halfway between the
/// mean pairwise cosine of the named class sentences and a perfect match:
/// −scale · (1 + mean_cos) / 2. Labels are not used.
double calibrate_region_bias(const FrozenModel<float>& model, const Vocabulary& vocab, const Dataset& ds,
                             std::span<const std::size_t> active, const TrainConfig& config);

/// [records×queries] cosine logits of every row of the given records.
Tensor<float> score_records(const FrozenModel<float>& model, const LearnedState* state,
                            std::span<const TokenSequence> queries, const Dataset& ds,
                            std::span<const std::size_t> records);

struct AccuracyResult {
  std::size_t correct = 0;
  std::size_t total = 0;
  std::vector<std::size_t> predicted;  // class ids, one per record
  double accuracy() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

/// Classification accuracy over `records`, predicting among `specs`.
AccuracyResult evaluate_accuracy(const FrozenModel<float>& model, const Vocabulary& vocab,
                                 const Dataset& ds, const LearnedState* state,
                                 std::span<const QuerySpec> specs, std::span<const std::size_t> records,
                                 const TrainConfig& config);

/// Region AP over `records`, scoring every class of `specs`. Frequency
/// groups come from the manifest counts.
APReport evaluate_region_ap(const FrozenModel<float>& model, const Vocabulary& vocab, const Dataset& ds,
                            const LearnedState* state, std::span<const QuerySpec> specs,
                            std::span<const std::size_t> records, const TrainConfig& config);

/// Records of `pool` whose (classification) label is in `classes`.
std::vector<std::size_t> records_of_classes(const Dataset& ds, std::span<const std::size_t> pool,
                                            std::span<const std::size_t> classes);

enum class Task { adapt, adjust, openvocab, sequential, context };

Task parse_task(const std::string& text);
const char* task_name(Task task);

struct SeedResult {
  std::uint64_t seed = 0;
  /// Group name → metric (accuracy in [0,1] or AP in [0,1]).
  std::map<std::string, double> groups;
  std::optional<double> train_accuracy;
  double final_loss = 0.0;
  LearnedState state;
  /// Sequential only: the state after stage 1.
  std::optional<LearnedState> stage1_state;
};

struct ProtocolRun {
  Task task = Task::adapt;
  Mode mode = Mode::classification;
  std::string metric;  // "accuracy" or "AP"
  TrainConfig config;
  std::vector<std::size_t> base;
  std::vector<std::size_t> novel;
  std::vector<SeedResult> seeds;
  std::map<std::string, double> mean;

  void compute_mean();
};

inline const std::vector<std::uint64_t> kDefaultSeeds = {1, 2, 3};

/// Tasks 1 and 2: learn every class and evaluate over all of them.
ProtocolRun run_adaptation(const FrozenModel<float>& model, const Vocabulary& vocab, const Dataset& ds,
                           const TrainConfig& config, std::span<const std::uint64_t> seeds,
                           Task task = Task::adapt);

/// Training half of Task 3: learn the base classes only.
ProtocolRun run_base_training(const FrozenModel<float>& model, const Vocabulary& vocab,
                              const Dataset& ds, const TrainConfig& config,
                              std::span<const std::uint64_t> seeds);

/// Evaluation half of Task 3: learned queries for base classes, handcrafted
/// names for the rest. Groups "base" (base records against base queries),
/// "new" (new records against new queries) and "all" (every record against
/// the mixed set).
std::map<std::string, double> open_vocab_metrics(const FrozenModel<float>& model, const Vocabulary& vocab,
                                                 const Dataset& ds, const LearnedState& state,
                                                 std::span<const std::size_t> base,
                                                 std::span<const std::size_t> novel,
                                                 const TrainConfig& config);

/// Task 3: base training followed by open-vocabulary evaluation per seed.
ProtocolRun run_open_vocab(const FrozenModel<float>& model, const Vocabulary& vocab, const Dataset& ds,
                           const TrainConfig& config, std::span<const std::uint64_t> seeds);

/// Task 4: stage 1 learns the base classes, stage 2 the new classes with the
/// base rows frozen; the final evaluation covers all classes.
ProtocolRun run_sequential(const FrozenModel<float>& model, const Vocabulary& vocab, const Dataset& ds,
                           const Partition& partition, const TrainConfig& config,
                           std::span<const std::uint64_t> seeds);

/// Shared context slots (optionally with class slots) trained on all classes.
ProtocolRun learn_context_tokens(const FrozenModel<float>& model, const Vocabulary& vocab,
                                 const Dataset& ds, const TrainConfig& config,
                                 std::span<const std::uint64_t> seeds);

/// Max relative error between the analytic gradient of the classification
/// loss with respect to E^l and central finite differences on `num_classes`
/// classes named after vocabulary words and random image features. The
/// differences are always taken in double; `use_double` selects the
/// precision of the analytic pass.
double end_to_end_gradient_check(const FrozenModel<float>& model, const Vocabulary& vocab,
                                 std::size_t num_classes, std::size_t m, std::uint64_t seed,
                                 bool use_double = true, double step = 1e-5);

}  // namespace namelearn
