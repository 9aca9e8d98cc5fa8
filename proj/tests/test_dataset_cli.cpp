// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "namelearn/checkpoint.hpp"
#include "namelearn/cli.hpp"
#include "namelearn/dataset.hpp"
#include "namelearn/io_util.hpp"
#include "namelearn/report.hpp"
#include "namelearn/synthetic.hpp"
#include "namelearn/training.hpp"
#include "test_support.hpp"

using namespace namelearn;
using testing_support::builtin_vocab;
using testing_support::random_tensor;
using testing_support::small_model;
using testing_support::TempDir;

namespace {

struct CliResult {
  int status;
  std::string out;
  std::string err;
};

CliResult cli(std::vector<std::string> args) {
  args.insert(args.begin(), "namelearn");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int status = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {status, out.str(), err.str()};
}

FeatureFile minimal_features(std::size_t dim = 4) {
  FeatureFile f;
  f.dim = dim;
  FeatureRecord r;
  r.sample_id = 7;
  r.features = Tensor<float>(Shape{1, dim}, 0.5f);
  r.labels = {{0}};
  f.records.push_back(r);
  return f;
}

DatasetManifest minimal_manifest() {
  DatasetManifest m;
  m.classes = {{0, "dog", 1}};
  m.train = {7};
  return m;
}

std::string expect_format_error(const std::function<void()>& f) {
  try {
    f();
  } catch (const FormatError& e) {
    return e.what();
  }
  ADD_FAILURE() << "expected FormatError";
  return {};
}

}  // namespace

TEST(Features, ClassificationRoundTripIsBitwise) {
  FeatureFile f;
  f.dim = 3;
  for (std::uint32_t i = 0; i < 4; ++i) {
    FeatureRecord r;
    r.sample_id = 10 + i;
    r.features = random_tensor<float>({1, 3}, i);
    r.labels = {{i % 2}};
    f.records.push_back(r);
  }
  const std::string bytes = serialize_features(f, Mode::classification);
  EXPECT_EQ(bytes.size(), 16u + 4u * (8u + 12u));
  const auto back = parse_features(bytes, Mode::classification);
  ASSERT_EQ(back.records.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(back.records[i].sample_id, f.records[i].sample_id);
    EXPECT_EQ(back.records[i].labels, f.records[i].labels);
    EXPECT_TRUE(bitwise_equal(back.records[i].features, f.records[i].features));
  }
  EXPECT_EQ(serialize_features(back, Mode::classification), bytes);
}

TEST(Features, RegionRoundTripKeepsLabelSets) {
  FeatureFile f;
  f.dim = 2;
  FeatureRecord r;
  r.sample_id = 1;
  r.features = random_tensor<float>({3, 2}, 5);
  r.labels = {{0, 2}, {}, {1}};
  f.records.push_back(r);
  const auto back = parse_features(serialize_features(f, Mode::region), Mode::region);
  EXPECT_EQ(back.records[0].labels, r.labels);
  EXPECT_TRUE(bitwise_equal(back.records[0].features, r.features));
}

TEST(Features, CorruptionDetected) {
  const std::string bytes = serialize_features(minimal_features(), Mode::classification);
  std::string magic = bytes;
  magic[1] = 'X';
  EXPECT_NE(expect_format_error([&] { parse_features(magic, Mode::classification); }).find("magic"),
            std::string::npos);
  std::string version = bytes;
  version[4] = 2;
  EXPECT_NE(expect_format_error([&] { parse_features(version, Mode::classification); }).find("version"),
            std::string::npos);
  EXPECT_NE(expect_format_error([&] { parse_features(bytes.substr(0, bytes.size() - 2), Mode::classification); })
                .find("truncated"),
            std::string::npos);
  EXPECT_THROW(parse_features(bytes + "xxxx", Mode::classification), FormatError);
}

TEST(Manifest, JsonRoundTrip) {
  DatasetManifest m;
  m.mode = Mode::region;
  m.template_name = "flowers";
  m.classes = {{0, "dog", 3}, {1, "ski boot", 1}};
  m.train = {1, 2};
  m.eval = {3};
  m.partition = Partition{{0}, {1}};
  const auto back = manifest_from_json(manifest_to_json(m));
  EXPECT_EQ(back.mode, Mode::region);
  EXPECT_EQ(back.template_name, "flowers");
  EXPECT_EQ(back.classes[1].name, "ski boot");
  EXPECT_EQ(back.classes[0].frequency_count, 3u);
  EXPECT_EQ(back.train, m.train);
  ASSERT_TRUE(back.partition.has_value());
  EXPECT_EQ(back.partition->novel, std::vector<std::size_t>{1});
  EXPECT_EQ(manifest_to_json(back), manifest_to_json(m));
  EXPECT_THROW(manifest_from_json("{\"format_version\": 9}"), FormatError);
  EXPECT_THROW(manifest_from_json("not json"), FormatError);
}

TEST(Dataset, MinimalPairLoadsAndEvaluates) {
  TempDir dir("ds");
  const std::size_t D = small_model().config.joint_dim;
  auto m = minimal_manifest();
  m.train.clear();
  m.eval = {7};
  save_dataset(m, minimal_features(D), dir.path());
  const Dataset ds = load_dataset(dir / "manifest.json", D);
  EXPECT_EQ(ds.records.size(), 1u);
  const auto r = evaluate_accuracy(small_model(), builtin_vocab(), ds, nullptr, named_specs(std::vector<std::size_t>{0}),
                                   ds.eval, TrainConfig{});
  EXPECT_EQ(r.total, 1u);
  EXPECT_EQ(r.accuracy(), 1.0);
}

TEST(Dataset, DanglingSampleIdNamed) {
  auto m = minimal_manifest();
  m.train.clear();
  m.eval = {8};
  const auto msg = expect_format_error([&] { assemble_dataset(m, minimal_features()); });
  EXPECT_NE(msg.find("8"), std::string::npos) << msg;
}

TEST(Dataset, DimensionMismatchAgainstCheckpoint) {
  EXPECT_THROW(assemble_dataset(minimal_manifest(), minimal_features(64), 32), DimensionError);
}

TEST(Dataset, InvariantViolations) {
  auto m = minimal_manifest();
  m.classes = {{1, "dog", 1}};
  EXPECT_THROW(assemble_dataset(m, minimal_features()), FormatError);
  m = minimal_manifest();
  m.classes.push_back({1, "cat", 0});
  m.partition = Partition{{0}, {0}};
  EXPECT_THROW(assemble_dataset(m, minimal_features()), FormatError);
  m.partition = Partition{{0}, {}};
  EXPECT_THROW(assemble_dataset(m, minimal_features()), FormatError);
  m = minimal_manifest();
  auto f = minimal_features();
  f.records[0].labels = {{3}};
  EXPECT_THROW(assemble_dataset(m, f), FormatError);
  f = minimal_features();
  f.records.push_back(f.records[0]);
  EXPECT_THROW(assemble_dataset(m, f), FormatError);
}

TEST(Synthetic, NoiselessPlantIsRecoveredZeroShot) {
  SyntheticConfig c;
  c.classes = 6;
  c.train_per_class = 2;
  c.eval_per_class = 5;
  c.noise = 0.0;
  c.name_shift = 0.0;
  const auto syn = generate_synthetic(small_model(), builtin_vocab(), c);
  const Dataset ds = syn.dataset();
  for (const auto& rec : ds.records) {
    const auto t = syn.targets.row(rec.labels[0][0]);
    double norm = 0.0;
    for (float v : t) norm += static_cast<double>(v) * v;
    for (std::size_t d = 0; d < ds.dim; ++d) {
      EXPECT_NEAR(rec.features.at(0, d), t[d] / std::sqrt(norm), 1e-6);
    }
  }
  std::vector<std::size_t> all(6);
  std::iota(all.begin(), all.end(), 0);
  const auto r = evaluate_accuracy(small_model(), builtin_vocab(), ds, nullptr, named_specs(all), ds.eval, TrainConfig{});
  EXPECT_EQ(r.accuracy(), 1.0);
}

TEST(Synthetic, RareProfileCountsMatchManifest) {
  SyntheticConfig c;
  c.classes = 9;
  c.rare_profile = true;
  c.frequent_train = 20;
  c.common_train = 7;
  c.rare_train = 2;
  c.eval_per_class = 3;
  const auto syn = generate_synthetic(small_model(), builtin_vocab(), c);
  const Dataset ds = syn.dataset();
  std::vector<std::size_t> seen(9, 0);
  for (std::size_t r : ds.train) ++seen[ds.label(r)];
  for (std::size_t i = 0; i < 9; ++i) {
    const std::size_t want = i < 3 ? 20 : i < 6 ? 7 : 2;
    EXPECT_EQ(ds.manifest.classes[i].frequency_count, want) << i;
    EXPECT_EQ(seen[i], want) << i;
  }
  EXPECT_LT(syn.class_noise[0], syn.class_noise[8]);
}

TEST(Synthetic, SaveLoadRoundTripWithoutWarnings) {
  SyntheticConfig c;
  c.classes = 4;
  c.mode = Mode::region;
  c.train_per_class = 3;
  c.eval_per_class = 2;
  const auto syn = generate_synthetic(small_model(), builtin_vocab(), c);
  TempDir dir("syn");
  save_dataset(syn.manifest, syn.features, dir.path());
  const Dataset ds = load_dataset(dir / "manifest.json", small_model().config.joint_dim);
  const Dataset mem = syn.dataset();
  ASSERT_EQ(ds.records.size(), mem.records.size());
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    EXPECT_TRUE(bitwise_equal(ds.records[i].features, mem.records[i].features));
    EXPECT_EQ(ds.records[i].labels, mem.records[i].labels);
  }
  EXPECT_EQ(manifest_to_json(ds.manifest), manifest_to_json(syn.manifest));
}

TEST(Report, JsonRoundTripAndTable) {
  MetricsReport r;
  r.task = "openvocab";
  r.mode = "classification";
  r.metric = "accuracy";
  r.config_json = train_config_json(TrainConfig{});
  r.seeds = {{1, {{"base", 0.9}, {"new", 0.5}, {"all", 0.7}}, 0.95, 0.1},
             {2, {{"base", 0.8}, {"new", 0.6}, {"all", 0.7}}, std::nullopt, 0.2}};
  r.mean = {{"base", 0.85}, {"new", 0.55}, {"all", 0.7}};
  const std::string json = report_to_json(r);
  const auto back = report_from_json(json);
  EXPECT_EQ(report_to_json(back), json);
  EXPECT_EQ(back.seeds[1].groups.at("new"), 0.6);
  EXPECT_FALSE(back.seeds[1].train_accuracy.has_value());
  const std::string csv = report_table_csv(r);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "run,accuracy/base,accuracy/new,accuracy/all");
  EXPECT_NE(csv.find("seed 2,80.00,60.00,70.00"), std::string::npos) << csv;
  EXPECT_NE(csv.find("mean,85.00,55.00,70.00"), std::string::npos) << csv;
  EXPECT_THROW(report_from_json(R"({"format_version": 1, "seeds": [{"seed": 1, "groups": {"weird": 1}}]})"),
               FormatError);
}

TEST(Config, JsonOverridesAndUnknownKeys) {
  TrainConfig base;
  const auto c = apply_config_json(R"({"epochs": 7, "base_lr": 0.01, "m": 2})", base);
  EXPECT_EQ(c.epochs, 7u);
  EXPECT_EQ(c.base_lr, 0.01);
  EXPECT_EQ(c.m, 2u);
  EXPECT_EQ(c.batch_size, base.batch_size);
  const auto echo = apply_config_json(train_config_json(c), TrainConfig{});
  EXPECT_EQ(train_config_json(echo), train_config_json(c));
  EXPECT_THROW(apply_config_json(R"({"epoch": 7})", base), ConfigError);
}

TEST(AtomicWrite, ReplacesWholeFileAndLeavesNoTemporaries) {
  TempDir dir("atomic");
  atomic_write_file(dir / "f.txt", "first version, longer");
  atomic_write_file(dir / "f.txt", "second");
  EXPECT_EQ(read_file_bytes(dir / "f.txt"), "second");
  std::size_t files = 0;
  for ([[maybe_unused]] const auto& e : std::filesystem::directory_iterator(dir.path())) ++files;
  EXPECT_EQ(files, 1u);
  EXPECT_THROW(atomic_write_file(dir / "missing" / "f.txt", "x"), FormatError);
}

class CliWorkflow : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("cli");
    const auto d = dir_->path().string();
    save_checkpoint(small_model(), nullptr, nullptr, dir_->path() / "model.nvck");
    save_vocabulary(builtin_vocab(), dir_->path() / "vocab.txt");
    const auto r = cli({"synth", "--out", d + "/data", "--checkpoint", d + "/model.nvck", "--vocab", d + "/vocab.txt",
                        "--classes", "4", "--train-per-class", "4", "--eval-per-class", "3", "--seed", "2"});
    ASSERT_EQ(r.status, 0) << r.err;
  }
  static void TearDownTestSuite() { delete dir_; }

  static std::vector<std::string> model_flags() {
    const auto d = dir_->path().string();
    return {"--checkpoint", d + "/model.nvck", "--vocab", d + "/vocab.txt"};
  }
  static std::string path(const std::string& name) { return (dir_->path() / name).string(); }

  static CliResult run(std::vector<std::string> args, bool with_model = true) {
    if (with_model) {
      for (auto& f : model_flags()) args.push_back(f);
    }
    return cli(args);
  }

  static CliResult train(const std::string& task, const std::string& out, std::vector<std::string> extra = {}) {
    std::vector<std::string> args = {"train", "--manifest", path("data/manifest.json"), "--task", task, "--out", out,
                                     "--epochs", "3", "--warmup-epochs", "1", "--seed", "1,2", "--lr", "0.005"};
    for (auto& e : extra) args.push_back(e);
    return run(args);
  }

  static inline TempDir* dir_ = nullptr;
};

TEST_F(CliWorkflow, TrainIsByteDeterministic) {
  const auto a = train("adapt", path("a.json"));
  ASSERT_EQ(a.status, 0) << a.err;
  const auto b = train("adapt", path("b.json"));
  ASSERT_EQ(b.status, 0) << b.err;
  EXPECT_EQ(read_file_bytes(path("a.json")), read_file_bytes(path("b.json")));
  EXPECT_EQ(a.out, b.out);
  const auto doc = nlohmann::json::parse(read_file_bytes(path("a.json")));
  EXPECT_EQ(doc["format_version"], 1);
  EXPECT_EQ(doc["seeds"].size(), 2u);
}

TEST_F(CliWorkflow, ReportRendersOpenVocabColumns) {
  ASSERT_EQ(train("openvocab", path("ov.json")).status, 0);
  const auto r = run({"report", "--in", path("ov.json"), "--out", path("ov.csv")}, false);
  ASSERT_EQ(r.status, 0) << r.err;
  const std::string csv = read_file_bytes(path("ov.csv"));
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "run,accuracy/base,accuracy/new,accuracy/all");
}

TEST_F(CliWorkflow, SequentialBaseMetricsSurviveStageTwo) {
  const auto r = train("sequential", path("seq.json"),
                       {"--embeddings-out", path("final.nvck"), "--stage1-out", path("stage1.nvck")});
  ASSERT_EQ(r.status, 0) << r.err;
  const auto before = run({"eval", "--manifest", path("data/manifest.json"), "--embeddings", path("stage1.nvck"),
                           "--group", "base", "--out", path("before.json")});
  const auto after = run({"eval", "--manifest", path("data/manifest.json"), "--embeddings", path("final.nvck"),
                          "--group", "base", "--out", path("after.json")});
  ASSERT_EQ(before.status, 0) << before.err;
  ASSERT_EQ(after.status, 0) << after.err;
  EXPECT_EQ(read_file_bytes(path("before.json")), read_file_bytes(path("after.json")));
}

TEST_F(CliWorkflow, InterpretWritesReports) {
  ASSERT_EQ(train("adapt", path("i.json"), {"--embeddings-out", path("i.nvck")}).status, 0);
  const auto r = run({"interpret", "--manifest", path("data/manifest.json"), "--embeddings", path("i.nvck"), "--k",
                      "2", "--out-json", path("n.json"), "--out-csv", path("n.csv"), "--scatter-csv", path("s.csv")});
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_EQ(nlohmann::json::parse(read_file_bytes(path("n.json")))["classes"].size(), 4u);
  EXPECT_TRUE(std::filesystem::exists(path("s.csv")));
}

TEST_F(CliWorkflow, ErrorsGiveNonZeroStatus) {
  EXPECT_NE(run({"train", "--manifest", path("data/manifest.json"), "--out", path("x.json"), "--bogus"}).status, 0);
  EXPECT_NE(run({"train", "--manifest", path("data/manifest.json"), "--out", path("x.json"), "--task", "nope"}).status,
            0);
  EXPECT_NE(run({"train", "--manifest", path("missing.json"), "--out", path("x.json")}).status, 0);
  EXPECT_NE(run({"report", "--in", path("missing.json")}, false).status, 0);
  EXPECT_NE(cli({"frobnicate"}).status, 0);
  EXPECT_FALSE(std::filesystem::exists(path("x.json")));
  const auto r = run({"train", "--manifest", path("data/manifest.json"), "--out", path("x.json"), "--epochs", "2",
                      "--warmup-epochs", "2"});
  EXPECT_NE(r.status, 0);
  EXPECT_NE(r.err.find("error"), std::string::npos);
}

TEST_F(CliWorkflow, GradcheckExitStatus) {
  const auto r = run({"gradcheck", "--precision", "64", "--classes", "3"});
  EXPECT_EQ(r.status, 0) << r.err;
  EXPECT_FALSE(r.out.empty());
  EXPECT_NE(run({"gradcheck", "--precision", "16"}).status, 0);
}
