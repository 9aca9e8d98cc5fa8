// SPDX-License-Identifier: Apache-2.0
#include "namelearn/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "namelearn/errors.hpp"
#include "namelearn/text_encoder.hpp"

namespace namelearn {

namespace {

std::vector<std::string> object_words(const Vocabulary& vocab) {
  std::set<std::string> excluded = {"a", "an", "the"};
  for (const auto& t : builtin_templates()) {
    for (TokenId id : tokenize(t.prefix + " " + t.suffix, vocab)) excluded.insert(vocab.token_at(id));
  }
  std::vector<std::string> out;
  for (std::size_t id = Vocabulary::kNumSpecials; id < vocab.size(); ++id) {
    const std::string& w = vocab.token_at(static_cast<TokenId>(id));
    if (excluded.count(w)) continue;
    if (!std::all_of(w.begin(), w.end(), [](char c) { return c >= 'a' && c <= 'z'; })) continue;
    out.push_back(w);
  }
  return out;
}

class NoisySampler {
 public:
  NoisySampler(std::uint64_t seed, std::size_t dim) : rng_(seed), dim_(dim) {}

  /// normalize(unit + sigma · z / √D)
  void around(std::span<const float> unit, double sigma, std::span<float> out) {
    const double s = sigma / std::sqrt(static_cast<double>(dim_));
    std::vector<double> v(dim_);
    for (std::size_t d = 0; d < dim_; ++d) v[d] = static_cast<double>(unit[d]) + s * normal_(rng_);
    write_normalized(v, out);
  }

  /// normalize(z)
  void background(std::span<float> out) {
    std::vector<double> v(dim_);
    for (auto& x : v) x = normal_(rng_);
    write_normalized(v, out);
  }

  std::mt19937_64& rng() { return rng_; }

 private:
  static void write_normalized(const std::vector<double>& v, std::span<float> out) {
    double n = 0.0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    for (std::size_t d = 0; d < v.size(); ++d) out[d] = static_cast<float>(v[d] / n);
  }

  std::mt19937_64 rng_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::size_t dim_;
};

}  // namespace

Dataset SyntheticDataset::dataset() const { return assemble_dataset(manifest, features); }

SyntheticDataset generate_synthetic(const FrozenModel<float>& model, const Vocabulary& vocab,
                                    const SyntheticConfig& config) {
  const std::size_t n = config.classes;
  if (n == 0) throw ConfigError("generate_synthetic: at least one class is required");
  if (!(config.noise >= 0.0)) throw ConfigError("generate_synthetic: noise must be non-negative");
  if (config.mode == Mode::region && config.regions_per_image == 0) {
    throw ConfigError("generate_synthetic: regions_per_image must be at least 1");
  }
  auto words = object_words(vocab);
  if (words.size() < 2 * n) {
    throw ConfigError("generate_synthetic: vocabulary has " + std::to_string(words.size()) +
                      " object words, " + std::to_string(2 * n) + " needed");
  }
  const std::size_t dim = model.config.joint_dim;
  NoisySampler sampler(config.seed, dim);
  std::shuffle(words.begin(), words.end(), sampler.rng());

  SyntheticDataset out;
  out.manifest.mode = config.mode;
  out.manifest.template_name = config.template_name;
  const PromptTemplate prompt = find_template(config.template_name);

  std::vector<std::size_t> train_count(n, config.train_per_class);
  out.class_noise.assign(n, config.noise);
  out.class_shift.assign(n, config.name_shift);
  if (config.rare_profile) {
    for (std::size_t i = 0; i < n; ++i) {
      switch (i * 3 / n) {
        case 0: train_count[i] = config.frequent_train; out.class_shift[i] = 0.25; break;
        case 1: train_count[i] = config.common_train; out.class_noise[i] *= 1.5; out.class_shift[i] = 0.5; break;
        default: train_count[i] = config.rare_train; out.class_noise[i] *= 3.0; out.class_shift[i] = 1.0; break;
      }
    }
  }

  const Tensor<float>& table = model.embeddings.tokens;
  const std::size_t width = table.cols();
  out.planted.num_classes = n;
  out.planted.per_class = 1;
  out.planted.rows.values = Tensor<float>(Shape{n, width});
  out.planted.rows.frozen.assign(n, 0);
  std::vector<TokenSequence> queries;
  for (std::size_t i = 0; i < n; ++i) {
    const std::string& name = words[i];
    out.distractors.push_back(words[n + i]);
    out.manifest.classes.push_back({i, name, train_count[i]});
    const auto a = table.row(vocab.lookup(name));
    const auto b = table.row(vocab.lookup(words[n + i]));
    const auto lambda = static_cast<float>(out.class_shift[i]);
    auto row = out.planted.rows.values.row(i);
    for (std::size_t c = 0; c < width; ++c) {
      row[c] = lambda == 1.0f ? b[c] : a[c] + lambda * (b[c] - a[c]);
    }
    queries.push_back(render_query(prompt, i, 1, vocab, model.config.context_length));
  }
  out.targets = encode_class_set(std::span<const TokenSequence>(queries), model, &out.planted);

  Tensor<float> units(Shape{n, dim});
  for (std::size_t i = 0; i < n; ++i) {
    double norm = 0.0;
    for (float v : out.targets.row(i)) norm += static_cast<double>(v) * static_cast<double>(v);
    norm = std::sqrt(norm);
    if (norm == 0.0) throw DegenerateFeatureError("planted class " + std::to_string(i) + " has a zero feature");
    for (std::size_t d = 0; d < dim; ++d) {
      units.at(i, d) = static_cast<float>(static_cast<double>(out.targets.at(i, d)) / norm);
    }
  }

  out.features.dim = dim;
  std::uint32_t next_id = 0;
  if (config.mode == Mode::classification) {
    for (int split = 0; split < 2; ++split) {
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t count = split == 0 ? train_count[i] : config.eval_per_class;
        for (std::size_t k = 0; k < count; ++k) {
          FeatureRecord rec;
          rec.sample_id = next_id++;
          rec.features = Tensor<float>(Shape{1, dim});
          sampler.around(units.row(i), out.class_noise[i], rec.features.row(0));
          rec.labels = {{i}};
          (split == 0 ? out.manifest.train : out.manifest.eval).push_back(rec.sample_id);
          out.features.records.push_back(std::move(rec));
        }
      }
    }
  } else {
    for (int split = 0; split < 2; ++split) {
      std::vector<std::size_t> pool;
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t count = split == 0 ? train_count[i] : config.eval_per_class;
        pool.insert(pool.end(), count, i);
      }
      std::shuffle(pool.begin(), pool.end(), sampler.rng());
      for (std::size_t begin = 0; begin < pool.size(); begin += config.regions_per_image) {
        const std::size_t end = std::min(pool.size(), begin + config.regions_per_image);
        const std::size_t regions = end - begin + config.background_per_image;
        FeatureRecord rec;
        rec.sample_id = next_id++;
        rec.features = Tensor<float>(Shape{regions, dim});
        std::size_t r = 0;
        for (std::size_t k = begin; k < end; ++k, ++r) {
          sampler.around(units.row(pool[k]), out.class_noise[pool[k]], rec.features.row(r));
          rec.labels.push_back({pool[k]});
        }
        for (; r < regions; ++r) {
          sampler.background(rec.features.row(r));
          rec.labels.emplace_back();
        }
        (split == 0 ? out.manifest.train : out.manifest.eval).push_back(rec.sample_id);
        out.features.records.push_back(std::move(rec));
      }
    }
  }
  if (config.partition && n >= 2) {
    Partition p;
    for (std::size_t i = 0; i < n; ++i) (i % 2 == 0 ? p.base : p.novel).push_back(i);
    out.manifest.partition = p;
  }
  return out;
}

}  // namespace namelearn
