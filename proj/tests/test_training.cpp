// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <random>
#include <set>

#include "namelearn/synthetic.hpp"
#include "namelearn/text_encoder.hpp"
#include "namelearn/training.hpp"
#include "test_support.hpp"

using namespace namelearn;
using testing_support::builtin_vocab;
using testing_support::random_tensor;
using testing_support::small_model;

namespace {

// Classification dataset with counts[c] training samples of class c and
// eval_per_class evaluation samples each.
Dataset counted_dataset(const std::vector<std::size_t>& counts, std::size_t eval_per_class = 0) {
  DatasetManifest man;
  FeatureFile ff;
  ff.dim = 4;
  std::uint32_t next = 0;
  std::mt19937_64 rng(5);
  std::normal_distribution<float> normal;
  auto add = [&](std::size_t cls, std::vector<std::uint32_t>& split) {
    FeatureRecord rec;
    rec.sample_id = next++;
    rec.features = Tensor<float>(Shape{1, 4});
    for (auto& v : rec.features.data()) v = normal(rng);
    rec.labels = {{cls}};
    split.push_back(rec.sample_id);
    ff.records.push_back(std::move(rec));
  };
  for (std::size_t c = 0; c < counts.size(); ++c) {
    man.classes.push_back({c, "dog", counts[c]});
    for (std::size_t i = 0; i < counts[c]; ++i) add(c, man.train);
    for (std::size_t i = 0; i < eval_per_class; ++i) add(c, man.eval);
  }
  return assemble_dataset(man, ff);
}

std::vector<std::size_t> counts_by_class(const Dataset& ds, const std::vector<std::size_t>& records) {
  std::vector<std::size_t> out(ds.num_classes(), 0);
  for (std::size_t r : records) ++out[ds.label(r)];
  return out;
}

// One item per class per round, rarest class first, until the target is met.
std::vector<std::size_t> round_robin(const std::vector<std::size_t>& available, std::size_t target) {
  std::vector<std::size_t> order(available.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return available[a] < available[b]; });
  std::vector<std::size_t> alloc(available.size(), 0);
  std::size_t total = std::accumulate(available.begin(), available.end(), std::size_t{0});
  std::size_t want = std::min(target, total);
  while (want > 0) {
    for (std::size_t c : order) {
      if (want == 0) break;
      if (alloc[c] < available[c]) {
        ++alloc[c];
        --want;
      }
    }
  }
  return alloc;
}

const SyntheticDataset& planted() {
  static const SyntheticDataset syn = [] {
    SyntheticConfig c;
    c.classes = 6;
    c.train_per_class = 8;
    c.eval_per_class = 6;
    c.seed = 3;
    return generate_synthetic(small_model(), builtin_vocab(), c);
  }();
  return syn;
}

TrainConfig quick_config(std::size_t epochs = 6) {
  TrainConfig c;
  c.epochs = epochs;
  c.warmup_epochs = epochs > 0 ? 1 : 0;
  c.base_lr = 5e-3;
  c.batch_size = 16;
  c.shots = 8;
  return c;
}

std::vector<std::size_t> iota(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

Tensor<float> learned_logits(const LearnedState& state, std::span<const std::size_t> classes, const Dataset& ds,
                             const Tensor<float>& probe) {
  const auto specs = learned_specs(classes);
  const auto queries = build_queries(specs, ds, builtin_vocab(), small_model().config, state.classes.per_class, 0);
  const auto text = encode_class_set<float>(queries, small_model(), &state.classes);
  return cosine_logits(probe, text, static_cast<float>(small_model().logit_scale));
}

}  // namespace

TEST(LrAt, WarmupEndpointAndBoundary) {
  EXPECT_DOUBLE_EQ(lr_at(9, 100, 10, 0.5), 0.5);
  EXPECT_DOUBLE_EQ(lr_at(10, 100, 10, 0.5), 0.5);
  EXPECT_DOUBLE_EQ(lr_at(0, 100, 10, 0.5), 0.05);
  EXPECT_DOUBLE_EQ(lr_at(4, 100, 10, 0.5), 0.25);
}

TEST(LrAt, CosineMidpointAndEnd) {
  EXPECT_NEAR(lr_at(55, 100, 10, 2e-4), 1e-4, 1e-12);
  const std::size_t T = 90;
  EXPECT_NEAR(lr_at(99, 100, 10, 2e-4), 2e-4 * 0.5 * (1.0 + std::cos(std::numbers::pi * (T - 1) / T)), 1e-18);
  EXPECT_LT(lr_at(99, 100, 10, 2e-4), 1e-7);
}

TEST(LrAt, NoWarmup) { EXPECT_DOUBLE_EQ(lr_at(0, 10, 0, 1.0), 1.0); }

TEST(LrAt, MonotoneDecayAfterWarmup) {
  for (std::size_t s = 11; s < 200; ++s) EXPECT_LE(lr_at(s, 200, 10, 1.0), lr_at(s - 1, 200, 10, 1.0));
}

TEST(LrAt, Errors) {
  EXPECT_THROW(lr_at(0, 10, 10, 1.0), ConfigError);
  EXPECT_THROW(lr_at(10, 10, 1, 1.0), ConfigError);
}

TEST(SgdStep, VanillaStep) {
  TrainableRows<double> rows{random_tensor<double>({2, 3}, 1), {0, 0}};
  const auto start = rows.values;
  const auto g = random_tensor<double>({2, 3}, 2);
  Tensor<double> vel(Shape{2, 3});
  sgd_step(rows, g, 0.1, 0.0, vel);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(rows.values[i], start[i] - 0.1 * g[i]);
}

TEST(SgdStep, FrozenRowsAndVelocityUntouched) {
  TrainableRows<float> rows{random_tensor<float>({3, 4}, 3), {0, 1, 0}};
  const auto start = rows.values;
  Tensor<float> vel(Shape{3, 4});
  for (int k = 0; k < 5; ++k) sgd_step(rows, random_tensor<float>({3, 4}, 10 + k), 0.5, 0.9, vel);
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_EQ(std::memcmp(&rows.values.at(1, c), &start.at(1, c), sizeof(float)), 0);
    EXPECT_EQ(vel.at(1, c), 0.0f);
    EXPECT_NE(rows.values.at(0, c), start.at(0, c));
  }
}

TEST(SgdStep, MomentumUnrollsToOnePlusOnePointNine) {
  TrainableRows<double> rows{Tensor<double>(Shape{1, 2}, 1.0), {0}};
  const auto g = Tensor<double>::matrix(1, 2, {0.5, -2.0});
  Tensor<double> vel(Shape{1, 2});
  sgd_step(rows, g, 0.01, 0.9, vel);
  sgd_step(rows, g, 0.01, 0.9, vel);
  EXPECT_NEAR(rows.values[0], 1.0 - 0.01 * 0.5 * 2.9, 1e-15);
  EXPECT_NEAR(rows.values[1], 1.0 + 0.01 * 2.0 * 2.9, 1e-15);
}

TEST(SgdStep, NonFiniteGradientNamesEntry) {
  TrainableRows<float> rows{Tensor<float>(Shape{2, 2}, 1.0f), {0, 0}};
  auto g = Tensor<float>(Shape{2, 2});
  g.at(1, 0) = std::numeric_limits<float>::quiet_NaN();
  Tensor<float> vel(Shape{2, 2});
  const auto start = rows.values;
  try {
    sgd_step(rows, g, 0.1, 0.9, vel);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("row 1"), std::string::npos) << e.what();
  }
  EXPECT_TRUE(bitwise_equal(rows.values, start));
  EXPECT_THROW(sgd_step(rows, Tensor<float>(Shape{3, 2}), 0.1, 0.9, vel), DimensionError);
}

TEST(AllocateBalanced, SkewedPairSplitsEvenly) {
  const std::vector<std::size_t> avail = {90, 10};
  EXPECT_EQ(allocate_balanced(avail, 20), (std::vector<std::size_t>{10, 10}));
  EXPECT_EQ(allocate_balanced(avail, 30), (std::vector<std::size_t>{20, 10}));
}

TEST(AllocateBalanced, MatchesRoundRobinOracle) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng() % 12;
    std::vector<std::size_t> avail(n);
    for (auto& a : avail) a = rng() % 40;
    const std::size_t total = std::accumulate(avail.begin(), avail.end(), std::size_t{0});
    const std::size_t target = rng() % (total + 10);
    const auto got = allocate_balanced(avail, target);
    EXPECT_EQ(got, round_robin(avail, target)) << "trial " << trial;
    EXPECT_EQ(std::accumulate(got.begin(), got.end(), std::size_t{0}), std::min(target, total));
    for (std::size_t c = 0; c < n; ++c) EXPECT_LE(got[c], avail[c]);
  }
}

TEST(AllocateBalanced, SingletonClassIncludedWhenTargetCoversClasses) {
  const std::vector<std::size_t> avail = {50, 1, 30, 7};
  for (std::size_t target = 4; target < 40; ++target) EXPECT_EQ(allocate_balanced(avail, target)[1], 1u);
}

TEST(BalancedSubsample, FullFractionKeepsEverything) {
  const auto ds = counted_dataset({5, 9, 2});
  EXPECT_EQ(balanced_subsample(ds, ds.train, 1.0, 1), ds.train);
}

TEST(BalancedSubsample, AllocationArithmetic) {
  const auto ds = counted_dataset({90, 10});
  const auto sub = balanced_subsample(ds, ds.train, 0.2, 4);
  EXPECT_EQ(sub.size(), 20u);
  EXPECT_EQ(counts_by_class(ds, sub), (std::vector<std::size_t>{10, 10}));
  EXPECT_TRUE(std::is_sorted(sub.begin(), sub.end()));
}

TEST(BalancedSubsample, RarestClassKeptAndDeterministic) {
  const auto ds = counted_dataset({40, 1, 25, 3});
  const auto a = balanced_subsample(ds, ds.train, 0.1, 9);
  EXPECT_EQ(a.size(), 7u);  // ceil(0.1 * 69)
  EXPECT_EQ(counts_by_class(ds, a)[1], 1u);
  EXPECT_EQ(a, balanced_subsample(ds, ds.train, 0.1, 9));
  EXPECT_NE(a, balanced_subsample(ds, ds.train, 0.1, 10));
}

TEST(BalancedSubsample, Errors) {
  const auto ds = counted_dataset({3});
  EXPECT_THROW(balanced_subsample(ds, {}, 0.5, 1), ConfigError);
  EXPECT_THROW(balanced_subsample(ds, ds.train, 0.0, 1), ConfigError);
  EXPECT_THROW(balanced_subsample(ds, ds.train, 1.5, 1), ConfigError);
}

TEST(FewShotSample, ExactCountsAndSeedBehaviour) {
  const auto ds = counted_dataset({20, 5, 16}, 3);
  const auto a = few_shot_sample(ds, ds.train, 16, 1);
  EXPECT_EQ(counts_by_class(ds, a), (std::vector<std::size_t>{16, 5, 16}));
  EXPECT_EQ(a, few_shot_sample(ds, ds.train, 16, 1));
  EXPECT_NE(a, few_shot_sample(ds, ds.train, 16, 2));
  const std::set<std::size_t> eval(ds.eval.begin(), ds.eval.end());
  for (std::size_t r : a) EXPECT_EQ(eval.count(r), 0u);
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.warmup_epochs = c.epochs;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.base_lr = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.train_classes = false;
  EXPECT_THROW(c.validate(), ConfigError);
  c.context_tokens = 4;
  EXPECT_NO_THROW(c.validate());
}

TEST(Protocols, ZeroEpochsEqualsZeroShot) {
  const Dataset ds = planted().dataset();
  TrainConfig cfg = quick_config(0);
  const std::uint64_t seeds[] = {1};
  const auto run = run_adaptation(small_model(), builtin_vocab(), ds, cfg, seeds);
  const auto zero = evaluate_accuracy(small_model(), builtin_vocab(), ds, nullptr, named_specs(iota(6)), ds.eval, cfg);
  EXPECT_EQ(run.seeds[0].groups.at("all"), zero.accuracy());
  EXPECT_EQ(run.metric, "accuracy");
}

TEST(Protocols, TrainingIsDeterministicAndKeepsModelFrozen) {
  const Dataset ds = planted().dataset();
  const auto before = small_model();
  const std::uint64_t seeds[] = {4};
  const auto a = run_adaptation(small_model(), builtin_vocab(), ds, quick_config(), seeds);
  const auto b = run_adaptation(small_model(), builtin_vocab(), ds, quick_config(), seeds);
  EXPECT_TRUE(bitwise_equal(a.seeds[0].state.classes.rows.values, b.seeds[0].state.classes.rows.values));
  EXPECT_FALSE(bitwise_equal(a.seeds[0].state.classes.rows.values,
                             init_state(small_model(), builtin_vocab(), ds, quick_config()).classes.rows.values));
  EXPECT_TRUE(bitwise_equal(before.embeddings.tokens, small_model().embeddings.tokens));
  EXPECT_TRUE(bitwise_equal(before.encoder.projection, small_model().encoder.projection));
}

TEST(Protocols, TrainingLossDecreases) {
  const Dataset ds = planted().dataset();
  LearnedState state = init_state(small_model(), builtin_vocab(), ds, quick_config(12));
  const auto log = train_embeddings(small_model(), builtin_vocab(), ds, ds.train, iota(6), quick_config(12), state);
  ASSERT_EQ(log.epoch_loss.size(), 12u);
  EXPECT_LT(log.epoch_loss.back(), log.epoch_loss.front());
}

TEST(Protocols, OpenVocabIdentities) {
  const Dataset ds = planted().dataset();
  const auto& p = *ds.manifest.partition;
  const TrainConfig cfg = quick_config();
  const std::uint64_t seeds[] = {2};
  const auto run = run_open_vocab(small_model(), builtin_vocab(), ds, cfg, seeds);
  const auto& g = run.seeds[0].groups;
  const auto zero_new = evaluate_accuracy(small_model(), builtin_vocab(), ds, nullptr, named_specs(p.novel),
                                          records_of_classes(ds, ds.eval, p.novel), cfg);
  EXPECT_EQ(g.at("new"), zero_new.accuracy());
  const auto base_records = records_of_classes(ds, ds.eval, p.base);
  const auto base_only = evaluate_accuracy(small_model(), builtin_vocab(), ds, &run.seeds[0].state,
                                           learned_specs(p.base), base_records, cfg);
  EXPECT_EQ(g.at("base"), base_only.accuracy());
  // The mixed-set accuracy is the count-weighted combination of its parts
  // evaluated against the mixed set.
  std::vector<QuerySpec> mixed = learned_specs(p.base);
  for (const auto& s : named_specs(p.novel)) mixed.push_back(s);
  const auto mb = evaluate_accuracy(small_model(), builtin_vocab(), ds, &run.seeds[0].state, mixed, base_records, cfg);
  const auto mn = evaluate_accuracy(small_model(), builtin_vocab(), ds, &run.seeds[0].state, mixed,
                                    records_of_classes(ds, ds.eval, p.novel), cfg);
  const double all = static_cast<double>(mb.correct + mn.correct) / static_cast<double>(mb.total + mn.total);
  EXPECT_DOUBLE_EQ(g.at("all"), all);
  EXPECT_GE(g.at("all"), std::min(mb.accuracy(), mn.accuracy()));
  EXPECT_LE(g.at("all"), std::max(mb.accuracy(), mn.accuracy()));
}

TEST(Protocols, SequentialLeavesStageOneLogitsUntouched) {
  const Dataset ds = planted().dataset();
  const auto& p = *ds.manifest.partition;
  const std::uint64_t seeds[] = {3};
  const auto run = run_sequential(small_model(), builtin_vocab(), ds, p, quick_config(), seeds);
  const auto& res = run.seeds[0];
  ASSERT_TRUE(res.stage1_state.has_value());
  const auto probe = random_tensor<float>({5, small_model().config.joint_dim}, 21);
  EXPECT_TRUE(bitwise_equal(learned_logits(*res.stage1_state, p.base, ds, probe),
                            learned_logits(res.state, p.base, ds, probe)));
  EXPECT_FALSE(bitwise_equal(learned_logits(*res.stage1_state, p.novel, ds, probe),
                             learned_logits(res.state, p.novel, ds, probe)));
  for (std::size_t c : p.base) EXPECT_FALSE(res.state.classes.class_frozen(c));
  for (const char* group : {"all", "base", "new"}) EXPECT_TRUE(res.groups.count(group)) << group;
}

TEST(Protocols, SequentialWithNoNewClassesEqualsStageOne) {
  const Dataset ds = planted().dataset();
  Partition p = *ds.manifest.partition;
  p.novel.clear();
  const std::uint64_t seeds[] = {3};
  const auto seq = run_sequential(small_model(), builtin_vocab(), ds, p, quick_config(), seeds);
  EXPECT_TRUE(bitwise_equal(seq.seeds[0].state.classes.rows.values, seq.seeds[0].stage1_state->classes.rows.values));
  const auto base = run_base_training(small_model(), builtin_vocab(), ds, quick_config(), seeds);
  EXPECT_TRUE(bitwise_equal(seq.seeds[0].state.classes.rows.values, base.seeds[0].state.classes.rows.values));
}

TEST(Protocols, SequentialRejectsOverlap) {
  const Dataset ds = planted().dataset();
  Partition p{{0, 1, 2}, {2, 3}};
  const std::uint64_t seeds[] = {1};
  EXPECT_THROW(run_sequential(small_model(), builtin_vocab(), ds, p, quick_config(), seeds), ConfigError);
}

TEST(ContextTokens, ZeroStepsEqualsZeroShot) {
  const Dataset ds = planted().dataset();
  TrainConfig cfg = quick_config(0);
  cfg.train_classes = false;
  cfg.context_tokens = 4;
  const std::uint64_t seeds[] = {1};
  const auto run = learn_context_tokens(small_model(), builtin_vocab(), ds, cfg, seeds);
  const auto zero = evaluate_accuracy(small_model(), builtin_vocab(), ds, nullptr, named_specs(iota(6)), ds.eval,
                                      quick_config(0));
  EXPECT_EQ(run.seeds[0].groups.at("all"), zero.accuracy());
}

TEST(ContextTokens, GradientAggregatesOverQueries) {
  const auto model = small_model().cast<double>();
  auto ctx = init_context_embeddings<double>(default_template(), 4, builtin_vocab(), model.embeddings.tokens);
  const std::size_t C = model.config.context_length;
  const std::vector<TokenItem> dog = {VocabToken{builtin_vocab().lookup("dog")}};
  const std::vector<TokenItem> cat = {VocabToken{builtin_vocab().lookup("cat")}};
  const std::vector<TokenSequence> qs = {render_context_query(default_template(), 4, dog, builtin_vocab(), C),
                                         render_context_query(default_template(), 4, cat, builtin_vocab(), C)};
  auto grad_of = [&](std::span<const TokenSequence> set) {
    TextGraph<double> tg(model, nullptr, &ctx, true);
    auto& g = tg.graph();
    return g.gradients(sum(g, tg.encode_set(set)), std::span<const Var<double>>(&tg.tables().context, 1))[0];
  };
  const auto both = grad_of(qs);
  const auto first = grad_of(std::span(qs).subspan(0, 1));
  const auto second = grad_of(std::span(qs).subspan(1, 1));
  for (std::size_t i = 0; i < both.numel(); ++i) EXPECT_NEAR(both[i], first[i] + second[i], 1e-12);
  double mag = 0.0;
  for (double v : both.data()) mag += std::abs(v);
  EXPECT_GT(mag, 0.0);
}

TEST(ContextTokens, CombinedModeUpdatesBothTables) {
  const Dataset ds = planted().dataset();
  TrainConfig cfg = quick_config(3);
  cfg.context_tokens = 4;
  const std::uint64_t seeds[] = {1};
  const auto run = learn_context_tokens(small_model(), builtin_vocab(), ds, cfg, seeds);
  const auto init = init_state(small_model(), builtin_vocab(), ds, cfg);
  ASSERT_TRUE(run.seeds[0].state.context.has_value());
  EXPECT_FALSE(bitwise_equal(run.seeds[0].state.context->values, init.context->values));
  EXPECT_FALSE(bitwise_equal(run.seeds[0].state.classes.rows.values, init.classes.rows.values));
}

TEST(RegionTraining, BiasCalibrationAndLossDecrease) {
  SyntheticConfig sc;
  sc.classes = 6;
  sc.mode = Mode::region;
  sc.rare_profile = true;
  sc.frequent_train = 101;
  sc.common_train = 11;
  sc.rare_train = 2;
  sc.eval_per_class = 4;
  const auto syn = generate_synthetic(small_model(), builtin_vocab(), sc);
  const Dataset ds = syn.dataset();
  TrainConfig cfg = quick_config(8);
  cfg.mode = Mode::region;
  cfg.base_lr = kRegionLearningRate;
  cfg.shots = 0;
  const double bias = calibrate_region_bias(small_model(), builtin_vocab(), ds, iota(6), cfg);
  EXPECT_LT(bias, 0.0);
  EXPECT_GE(bias, -small_model().logit_scale);
  LearnedState state = init_state(small_model(), builtin_vocab(), ds, cfg);
  const auto log = train_embeddings(small_model(), builtin_vocab(), ds, ds.train, iota(6), cfg, state);
  EXPECT_LT(log.epoch_loss.back(), log.epoch_loss.front()) << ::testing::PrintToString(log.epoch_loss);
  const std::uint64_t seeds[] = {1};
  const auto run = run_adaptation(small_model(), builtin_vocab(), ds, cfg, seeds);
  EXPECT_EQ(run.metric, "AP");
  for (const char* group : {"all", "frequent", "common", "rare"}) EXPECT_TRUE(run.mean.count(group)) << group;
}

TEST(GradientCheck, EndToEndQueryLoss) {
  EXPECT_LT(end_to_end_gradient_check(small_model(), builtin_vocab(), 4, 1, 1, true, 1e-5), 1e-4);
  EXPECT_LT(end_to_end_gradient_check(small_model(), builtin_vocab(), 4, 2, 2, true, 1e-5), 1e-4);
  EXPECT_LT(end_to_end_gradient_check(small_model(), builtin_vocab(), 4, 1, 3, false, 1e-5), 1e-2);
}

TEST(Tasks, Names) {
  for (Task t : {Task::adapt, Task::adjust, Task::openvocab, Task::sequential, Task::context}) {
    EXPECT_EQ(parse_task(task_name(t)), t);
  }
  EXPECT_THROW(parse_task("finetune"), ConfigError);
}
