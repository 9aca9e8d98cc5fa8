// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "json.hpp"

#include "namelearn/interpretability.hpp"
#include "test_support.hpp"

using namespace namelearn;
using testing_support::builtin_vocab;
using testing_support::random_tensor;
using testing_support::small_model;
using testing_support::TempDir;

namespace {

std::vector<ReferenceEntry> entries(const std::vector<std::string>& names) {
  std::vector<ReferenceEntry> out;
  for (const auto& n : names) out.push_back({n, std::nullopt});
  return out;
}

ReferenceVocabulary encode(const std::vector<std::string>& names) {
  return encode_reference(entries(names), default_template(), small_model(), builtin_vocab());
}

const std::vector<std::string> kNames = {"dog", "cat", "cow", "horse", "bell pepper", "boot", "ski boot", "apple"};

std::vector<std::string> ranked(const std::vector<Neighbor>& ns) {
  std::vector<std::string> out;
  for (const auto& n : ns) out.push_back(n.name);
  return out;
}

std::vector<float> probe_feature(std::uint64_t seed) {
  const auto t = random_tensor<float>({small_model().config.joint_dim}, seed);
  return {t.data().begin(), t.data().end()};
}

}  // namespace

TEST(EncodeReference, SingleName) {
  const auto ref = encode({"dog"});
  ASSERT_EQ(ref.features.shape(), (Shape{1, small_model().config.joint_dim}));
  double norm = 0.0;
  for (float v : ref.features.data()) norm += static_cast<double>(v) * v;
  EXPECT_NEAR(norm, 1.0, 1e-6);
}

TEST(EncodeReference, CaseAndSpaceDuplicatesDropped) {
  const auto ref = encode({"Dog", "cat", "dog", "bell  pepper", "bell pepper"});
  EXPECT_EQ(ref.names, (std::vector<std::string>{"dog", "cat", "bell pepper"}));
  EXPECT_EQ(ref.warnings.size(), 2u);
}

TEST(EncodeReference, DeterministicRows) {
  const auto a = encode({"cow", "horse"});
  const auto b = encode({"horse", "cow"});
  for (std::size_t c = 0; c < a.features.cols(); ++c) {
    EXPECT_EQ(a.features.at(0, c), b.features.at(1, c));
    EXPECT_EQ(a.features.at(1, c), b.features.at(0, c));
  }
}

TEST(EncodeReference, OovNamesFlagged) {
  const auto ref = encode({"dog", "wombat"});
  EXPECT_EQ(ref.oov_names, std::vector<std::string>{"wombat"});
  EXPECT_EQ(ref.size(), 2u);
}

TEST(ReferenceFile, NamesAndOptionalCounts) {
  TempDir dir("ref");
  {
    std::ofstream out(dir / "r.txt");
    out << "dog\t12\nski boot\n\ncat\t3\n";
  }
  const auto es = load_reference_file(dir / "r.txt");
  ASSERT_EQ(es.size(), 3u);
  EXPECT_EQ(es[0].name, "dog");
  EXPECT_EQ(es[0].count, 12u);
  EXPECT_EQ(es[1].name, "ski boot");
  EXPECT_FALSE(es[1].count.has_value());
  EXPECT_EQ(es[2].count, 3u);
  {
    std::ofstream out(dir / "bad.txt");
    out << "dog\tmany\n";
  }
  EXPECT_THROW(load_reference_file(dir / "bad.txt"), FormatError);
  EXPECT_THROW(load_reference_file(dir / "missing.txt"), FormatError);
}

TEST(NearestNames, TokenRowRetrievesItsWord) {
  const auto ref = encode(kNames);
  const auto& table = small_model().embeddings.tokens;
  auto classes = init_class_embeddings<float>({"apple"}, builtin_vocab(), table, 1);
  for (const std::string w : {"dog", "cow", "boot"}) {
    const auto row = table.row(builtin_vocab().lookup(w));
    std::copy(row.begin(), row.end(), classes.rows.values.row(0).begin());
    const auto top = nearest_names(classes, 0, ref, default_template(), small_model(), builtin_vocab(), 3);
    ASSERT_EQ(top.size(), 3u);
    EXPECT_EQ(top[0].name, w);
    EXPECT_NEAR(top[0].cosine, 1.0, 1e-6);
  }
}

TEST(NearestNames, SortedAndInRange) {
  const auto ref = encode(kNames);
  const auto top = nearest_names(probe_feature(4), ref, kNames.size());
  ASSERT_EQ(top.size(), kNames.size());
  for (std::size_t i = 0; i < top.size(); ++i) {
    EXPECT_GE(top[i].cosine, -1.0);
    EXPECT_LE(top[i].cosine, 1.0);
    if (i > 0) EXPECT_GE(top[i - 1].cosine, top[i].cosine);
  }
  auto names = ranked(top);
  std::sort(names.begin(), names.end());
  auto all = kNames;
  std::sort(all.begin(), all.end());
  EXPECT_EQ(names, all);
}

TEST(NearestNames, TiesBrokenByName) {
  // Two dimensions; both references point the same way.
  ReferenceVocabulary ref;
  ref.names = {"zebra", "ant", "moth"};
  ref.counts.resize(3);
  ref.features = Tensor<float>::matrix(3, 2, {1, 0, 1, 0, 0, 1});
  const std::vector<float> f = {2.0f, 0.0f};
  EXPECT_EQ(ranked(nearest_names(f, ref, 3)), (std::vector<std::string>{"ant", "zebra", "moth"}));
}

TEST(NearestNames, PositiveRescalingInvariant) {
  const auto ref = encode(kNames);
  auto f = probe_feature(7);
  const auto a = nearest_names(f, ref, 5);
  for (auto& v : f) v *= 37.5f;
  const auto b = nearest_names(f, ref, 5);
  EXPECT_EQ(ranked(a), ranked(b));
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i].cosine, b[i].cosine, 1e-6);
}

TEST(NearestNames, AddingNameKeepsRelativeOrder) {
  auto names = kNames;
  const auto f = probe_feature(9);
  const auto before = ranked(nearest_names(f, encode(names), names.size()));
  names.push_back("pepper");
  auto after = ranked(nearest_names(f, encode(names), names.size()));
  after.erase(std::find(after.begin(), after.end(), "pepper"));
  EXPECT_EQ(before, after);
}

TEST(NearestNames, Errors) {
  const auto ref = encode({"dog", "cat"});
  EXPECT_THROW(nearest_names(probe_feature(1), ref, 3), ConfigError);
  EXPECT_THROW(nearest_names(std::vector<float>(3, 1.0f), ref, 1), DimensionError);
  EXPECT_THROW(nearest_names(std::vector<float>(small_model().config.joint_dim, 0.0f), ref, 1),
               DegenerateFeatureError);
}

TEST(SelfSimilarity, UntrainedSingleTokenNameIsOne) {
  const auto classes =
      init_class_embeddings<float>({"dog", "horse"}, builtin_vocab(), small_model().embeddings.tokens, 1);
  EXPECT_NEAR(self_similarity(classes, 0, "dog", default_template(), small_model(), builtin_vocab()), 1.0, 1e-6);
  EXPECT_NEAR(self_similarity(classes, 1, "horse", default_template(), small_model(), builtin_vocab()), 1.0, 1e-6);
  EXPECT_LT(self_similarity(classes, 1, "dog", default_template(), small_model(), builtin_vocab()), 1.0 - 1e-4);
}

TEST(SelfSimilarity, MultiSlotUsesAllSlots) {
  auto classes = init_class_embeddings<float>({"dog"}, builtin_vocab(), small_model().embeddings.tokens, 2);
  const auto one = learned_sentence_feature(classes, 0, default_template(), small_model(), builtin_vocab());
  auto row1 = classes.rows.values.row(1);
  const auto noise = random_tensor<float>({row1.size()}, 3);
  std::copy(noise.data().begin(), noise.data().end(), row1.begin());
  const auto two = learned_sentence_feature(classes, 0, default_template(), small_model(), builtin_vocab());
  EXPECT_NE(one, two);
}

TEST(Correlation, ExactLinearRelation) {
  const std::vector<std::size_t> counts = {1, 10, 100, 1000, 5};
  std::vector<double> sims;
  for (auto c : counts) sims.push_back(0.2 * std::log10(static_cast<double>(c)) + 0.1);
  EXPECT_NEAR(rarity_similarity_correlation(counts, sims), 1.0, 1e-12);
  for (auto& s : sims) s = -s;
  EXPECT_NEAR(rarity_similarity_correlation(counts, sims), -1.0, 1e-12);
}

TEST(Correlation, MatchesTwoPassPearson) {
  const std::vector<std::size_t> counts = {3, 17, 250, 9, 1200, 41};
  const std::vector<double> sims = {0.31, 0.52, 0.48, 0.40, 0.77, 0.50};
  std::vector<double> x;
  for (auto c : counts) x.push_back(std::log10(static_cast<double>(c)));
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) mx += x[i], my += sims[i];
  mx /= x.size();
  my /= x.size();
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (sims[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (sims[i] - my) * (sims[i] - my);
  }
  EXPECT_NEAR(rarity_similarity_correlation(counts, sims), sxy / std::sqrt(sxx * syy), 1e-12);
}

TEST(Correlation, Errors) {
  const std::vector<std::size_t> counts = {1, 10, 100};
  EXPECT_THROW(rarity_similarity_correlation(counts, std::vector<double>{0.5, 0.5, 0.5}), NumericError);
  EXPECT_THROW(rarity_similarity_correlation(std::vector<std::size_t>{7, 7, 7}, std::vector<double>{0.1, 0.2, 0.3}),
               NumericError);
  EXPECT_THROW(rarity_similarity_correlation(std::vector<std::size_t>{1, 2}, std::vector<double>{0.1, 0.2}),
               ConfigError);
  EXPECT_THROW(rarity_similarity_correlation(std::vector<std::size_t>{0, 2, 3}, std::vector<double>{0.1, 0.2, 0.3}),
               ConfigError);
  EXPECT_THROW(rarity_similarity_correlation(counts, std::vector<double>{0.1, 0.2}), DimensionError);
}

TEST(InterpretClasses, ReportShapesAndCsv) {
  const auto ref = encode(kNames);
  auto classes =
      init_class_embeddings<float>({"dog", "cat", "cow"}, builtin_vocab(), small_model().embeddings.tokens, 1);
  classes.rows.values = random_tensor<float>(classes.rows.values.shape(), 12);
  const std::vector<std::string> names = {"dog", "cat", "cow"};
  const std::vector<std::size_t> counts = {100, 10, 1};
  const auto rep = interpret_classes(classes, names, counts, ref, default_template(), small_model(), builtin_vocab(), 2);
  ASSERT_EQ(rep.classes.size(), 3u);
  for (const auto& c : rep.classes) EXPECT_EQ(c.neighbors.size(), 2u);
  ASSERT_TRUE(rep.correlation.has_value());
  std::vector<double> sims;
  for (const auto& c : rep.classes) sims.push_back(c.self_similarity);
  EXPECT_DOUBLE_EQ(*rep.correlation, rarity_similarity_correlation(counts, sims));

  const auto doc = nlohmann::json::parse(neighbor_report_json(rep));
  EXPECT_EQ(doc["classes"].size(), 3u);
  const std::string csv = neighbor_report_csv(rep);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "class_id,name,rank,neighbor,cosine");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 7);
  const std::string scatter = rarity_scatter_csv(rep);
  EXPECT_EQ(scatter.substr(0, scatter.find('\n')), "class_id,name,frequency_count,log10_count,self_similarity");
  EXPECT_EQ(std::count(scatter.begin(), scatter.end(), '\n'), 4);
}

TEST(InterpretClasses, UndefinedCorrelationIsAbsent) {
  const auto ref = encode(kNames);
  const auto classes =
      init_class_embeddings<float>({"dog", "cat", "cow"}, builtin_vocab(), small_model().embeddings.tokens, 1);
  const std::vector<std::string> names = {"dog", "cat", "cow"};
  const std::vector<std::size_t> counts = {5, 5, 5};
  const auto rep = interpret_classes(classes, names, counts, ref, default_template(), small_model(), builtin_vocab(), 1);
  EXPECT_FALSE(rep.correlation.has_value());
  EXPECT_FALSE(rep.warnings.empty());
}
