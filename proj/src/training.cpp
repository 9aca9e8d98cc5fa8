// SPDX-License-Identifier: Apache-2.0
#include "namelearn/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <set>

#include "namelearn/errors.hpp"
#include "namelearn/text_encoder.hpp"

namespace namelearn {

void TrainConfig::validate() const {
  if (!(base_lr > 0.0) || !std::isfinite(base_lr)) throw ConfigError("base_lr must be positive");
  if (epochs > 0 && warmup_epochs >= epochs) {
    throw ConfigError("warmup_epochs (" + std::to_string(warmup_epochs) + ") must be below epochs (" +
                      std::to_string(epochs) + ")");
  }
  if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (m == 0) throw ConfigError("m must be at least 1");
  if (!train_classes && context_tokens == 0) {
    throw ConfigError("nothing to train: class slots disabled and no context slots");
  }
  if (!(subsample_fraction > 0.0 && subsample_fraction <= 1.0)) {
    throw ConfigError("subsample_fraction must lie in (0, 1]");
  }
  if (!(grad_clip >= 0.0)) throw ConfigError("grad_clip must be non-negative");
}

double lr_at(std::size_t step, std::size_t total_steps, std::size_t warmup_steps, double base_lr) {
  if (warmup_steps >= total_steps) {
    throw ConfigError("lr_at: warmup_steps " + std::to_string(warmup_steps) +
                      " must be below total_steps " + std::to_string(total_steps));
  }
  if (step >= total_steps) {
    throw ConfigError("lr_at: step " + std::to_string(step) + " outside schedule of " +
                      std::to_string(total_steps) + " steps");
  }
  if (step < warmup_steps) {
    return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  }
  const double progress =
      static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename T>
void sgd_step(TrainableRows<T>& rows, const Tensor<T>& grad, double lr, double momentum,
              Tensor<T>& velocity) {
  const auto& shape = rows.values.shape();
  if (grad.shape() != shape) {
    throw DimensionError("sgd_step: gradient " + shape_str(grad.shape()) + " for rows " + shape_str(shape));
  }
  if (velocity.shape() != shape) velocity = Tensor<T>(shape);
  const std::size_t f = rows.values.cols();
  for (std::size_t i = 0; i < grad.numel(); ++i) {
    if (!std::isfinite(grad[i])) {
      throw NumericError("sgd_step: non-finite gradient " + std::to_string(grad[i]) + " at row " +
                         std::to_string(i / f) + ", column " + std::to_string(i % f));
    }
  }
  const T mu = static_cast<T>(momentum);
  const T eta = static_cast<T>(lr);
  for (std::size_t r = 0; r < rows.rows(); ++r) {
    if (rows.is_frozen(r)) continue;
    auto v = velocity.row(r);
    auto x = rows.values.row(r);
    const auto g = grad.row(r);
    for (std::size_t c = 0; c < f; ++c) {
      v[c] = mu * v[c] + g[c];
      x[c] -= eta * v[c];
    }
  }
}

template void sgd_step(TrainableRows<float>&, const Tensor<float>&, double, double, Tensor<float>&);
template void sgd_step(TrainableRows<double>&, const Tensor<double>&, double, double, Tensor<double>&);

std::vector<std::size_t> few_shot_sample(const Dataset& ds, std::span<const std::size_t> candidates,
                                         std::size_t shots, std::uint64_t seed) {
  if (ds.mode() != Mode::classification) {
    throw ConfigError("few-shot sampling applies to classification datasets");
  }
  std::vector<std::vector<std::size_t>> per_class(ds.num_classes());
  for (std::size_t r : candidates) per_class[ds.label(r)].push_back(r);
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> out;
  for (auto& pool : per_class) {
    std::shuffle(pool.begin(), pool.end(), rng);
    const std::size_t take = std::min(shots, pool.size());
    out.insert(out.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(take));
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<std::size_t> allocate_balanced(std::span<const std::size_t> available, std::size_t target) {
  std::vector<std::size_t> order(available.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return available[a] < available[b]; });
  std::vector<std::size_t> alloc(available.size(), 0);
  std::size_t remaining = target;
  for (std::size_t k = 0; k < order.size(); ++k) {
    const std::size_t left = order.size() - k;
    const std::size_t share = (remaining + left - 1) / left;
    const std::size_t take = std::min(available[order[k]], share);
    alloc[order[k]] = take;
    remaining -= take;
  }
  return alloc;
}

namespace {

std::size_t subsample_key(const Dataset& ds, const FeatureRecord& rec, const std::vector<std::size_t>& freq) {
  if (ds.mode() == Mode::classification) return rec.labels[0][0];
  std::size_t best = ds.num_classes();
  for (const auto& set : rec.labels) {
    for (std::size_t l : set) {
      if (best == ds.num_classes() || freq[l] < freq[best] || (freq[l] == freq[best] && l < best)) {
        best = l;
      }
    }
  }
  return best;
}

}  // namespace

std::vector<std::size_t> balanced_subsample(const Dataset& ds, std::span<const std::size_t> candidates,
                                            double fraction, std::uint64_t seed) {
  if (candidates.empty()) throw ConfigError("balanced_subsample: empty training set");
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw ConfigError("balanced_subsample: fraction must lie in (0, 1]");
  }
  const auto freq = ds.frequency_counts();
  std::vector<std::vector<std::size_t>> pools(ds.num_classes() + 1);
  for (std::size_t r : candidates) pools[subsample_key(ds, ds.records[r], freq)].push_back(r);
  std::vector<std::size_t> avail;
  for (const auto& p : pools) avail.push_back(p.size());
  const auto target = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(candidates.size())));
  const auto alloc = allocate_balanced(avail, target);
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < pools.size(); ++k) {
    auto& pool = pools[k];
    std::shuffle(pool.begin(), pool.end(), rng);
    out.insert(out.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(alloc[k]));
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<QuerySpec> learned_specs(std::span<const std::size_t> classes) {
  std::vector<QuerySpec> out;
  for (std::size_t c : classes) out.push_back({c, true});
  return out;
}

std::vector<QuerySpec> named_specs(std::span<const std::size_t> classes) {
  std::vector<QuerySpec> out;
  for (std::size_t c : classes) out.push_back({c, false});
  return out;
}

std::vector<TokenSequence> build_queries(std::span<const QuerySpec> specs, const Dataset& ds,
                                         const Vocabulary& vocab, const EncoderConfig& config,
                                         std::size_t m, std::size_t context_tokens) {
  std::vector<TokenSequence> out;
  out.reserve(specs.size());
  for (const auto& s : specs) {
    if (s.class_id >= ds.num_classes()) {
      throw ConfigError("query for class " + std::to_string(s.class_id) + " outside the " +
                        std::to_string(ds.num_classes()) + " dataset classes");
    }
    const std::string& name = ds.manifest.classes[s.class_id].name;
    if (context_tokens == 0) {
      out.push_back(s.learned ? render_query(ds.prompt, s.class_id, m, vocab, config.context_length)
                              : render_named_query(ds.prompt, name, vocab, config.context_length));
      continue;
    }
    std::vector<TokenItem> items;
    if (s.learned) {
      for (std::size_t k = 0; k < m; ++k) items.emplace_back(ClassSlot{s.class_id, k});
    } else {
      for (TokenId id : tokenize(name, vocab)) items.emplace_back(VocabToken{id});
    }
    out.push_back(render_context_query(ds.prompt, context_tokens, items, vocab, config.context_length));
  }
  return out;
}

LearnedState init_state(const FrozenModel<float>& model, const Vocabulary& vocab, const Dataset& ds,
                        const TrainConfig& config, InitReport* report) {
  LearnedState s;
  s.classes = init_class_embeddings(ds.class_names(), vocab, model.embeddings.tokens, config.m, report);
  if (config.context_tokens > 0) {
    s.context = init_context_embeddings(ds.prompt, config.context_tokens, vocab, model.embeddings.tokens);
  }
  return s;
}

namespace {

double grad_norm(const Tensor<float>* a, const Tensor<float>* b) {
  double s = 0.0;
  for (const auto* t : {a, b}) {
    if (!t) continue;
    for (float v : t->data()) s += static_cast<double>(v) * static_cast<double>(v);
  }
  return std::sqrt(s);
}

}  // namespace

TrainLog train_embeddings(const FrozenModel<float>& model, const Vocabulary& vocab, const Dataset& ds,
                          std::span<const std::size_t> records, std::span<const std::size_t> active,
                          const TrainConfig& config, LearnedState& state) {
  config.validate();
  TrainLog log;
  if (config.epochs == 0 || active.empty()) return log;
  if (records.empty()) throw ConfigError("train_embeddings: no training records");
  if (config.context_tokens > 0 && (!state.context || state.context->rows() != config.context_tokens)) {
    throw ConfigError("train_embeddings: context table does not have " +
                      std::to_string(config.context_tokens) + " rows");
  }
  if (config.train_classes && state.classes.per_class != config.m) {
    throw ConfigError("train_embeddings: class table has " + std::to_string(state.classes.per_class) +
                      " slots per class, config asks for " + std::to_string(config.m));
  }

  std::vector<long> position(ds.num_classes(), -1);
  for (std::size_t k = 0; k < active.size(); ++k) {
    if (active[k] >= ds.num_classes()) {
      throw ConfigError("active class " + std::to_string(active[k]) + " outside the dataset");
    }
    position[active[k]] = static_cast<long>(k);
  }
  if (ds.mode() == Mode::classification) {
    for (std::size_t r : records) {
      if (position[ds.label(r)] < 0) {
        throw ConfigError("training sample " + std::to_string(ds.records[r].sample_id) + " has class " +
                          std::to_string(ds.label(r)) + ", which is not being trained");
      }
    }
  }

  const std::vector<QuerySpec> specs =
      config.train_classes ? learned_specs(active) : named_specs(active);
  const auto queries = build_queries(specs, ds, vocab, model.config, config.m, config.context_tokens);

  const std::size_t steps_per_epoch = (records.size() + config.batch_size - 1) / config.batch_size;
  const std::size_t total = steps_per_epoch * config.epochs;
  const std::size_t warmup = steps_per_epoch * config.warmup_epochs;
  const float scale = static_cast<float>(model.logit_scale);
  const std::size_t dim = ds.dim;
  float bias = 0.0f;
  if (ds.mode() == Mode::region) {
    bias = static_cast<float>(config.region_logit_bias ? *config.region_logit_bias
                                                       : calibrate_region_bias(model, vocab, ds, active, config));
  }

  Tensor<float> class_velocity;
  Tensor<float> context_velocity;
  std::vector<std::size_t> order(records.begin(), records.end());
  std::mt19937_64 rng(config.seed);

  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t b = 0; b < steps_per_epoch; ++b, ++step) {
      const std::size_t begin = b * config.batch_size;
      const std::size_t end = std::min(order.size(), begin + config.batch_size);

      std::size_t rows = 0;
      for (std::size_t i = begin; i < end; ++i) rows += ds.records[order[i]].regions();
      Tensor<float> feats(Shape{rows, dim});
      std::vector<std::size_t> targets;
      std::vector<std::vector<std::size_t>> region_labels;
      std::size_t row = 0;
      for (std::size_t i = begin; i < end; ++i) {
        const auto& rec = ds.records[order[i]];
        for (std::size_t k = 0; k < rec.regions(); ++k, ++row) {
          const auto src = rec.features.row(k);
          std::copy(src.begin(), src.end(), feats.row(row).begin());
          if (ds.mode() == Mode::classification) {
            targets.push_back(static_cast<std::size_t>(position[rec.labels[k][0]]));
          } else {
            std::vector<std::size_t> mapped;
            for (std::size_t l : rec.labels[k]) {
              if (position[l] >= 0) mapped.push_back(static_cast<std::size_t>(position[l]));
            }
            region_labels.push_back(std::move(mapped));
          }
        }
      }

      TextGraph<float> tg(model, config.train_classes ? &state.classes : nullptr,
                          state.context ? &*state.context : nullptr, true);
      auto& g = tg.graph();
      const auto text = tg.encode_set(queries);
      const auto image = g.constant(std::move(feats));
      const auto loss =
          ds.mode() == Mode::classification
              ? classification_loss(g, image, text, std::span<const std::size_t>(targets), scale)
              : region_multilabel_loss(g, image, region_labels, text, scale, bias);
      g.backward(loss);
      epoch_loss += static_cast<double>(g.value(loss)[0]);

      Tensor<float> class_grad;
      Tensor<float> context_grad;
      if (config.train_classes) class_grad = g.grad(tg.tables().classes);
      if (state.context) context_grad = g.grad(tg.tables().context);
      if (config.grad_clip > 0.0) {
        const double norm = grad_norm(config.train_classes ? &class_grad : nullptr,
                                      state.context ? &context_grad : nullptr);
        if (norm > config.grad_clip) {
          const float f = static_cast<float>(config.grad_clip / norm);
          for (auto& v : class_grad.data()) v *= f;
          for (auto& v : context_grad.data()) v *= f;
        }
      }
      const double lr = lr_at(step, total, warmup, config.base_lr);
      if (config.train_classes) sgd_step(state.classes.rows, class_grad, lr, config.momentum, class_velocity);
      if (state.context) sgd_step(*state.context, context_grad, lr, config.momentum, context_velocity);
    }
    log.epoch_loss.push_back(epoch_loss / static_cast<double>(steps_per_epoch));
  }
  log.steps = step;
  return log;
}

double calibrate_region_bias(const FrozenModel<float>& model, const Vocabulary& vocab, const Dataset& ds,
                             std::span<const std::size_t> active, const TrainConfig& config) {
  double mean_cos = 0.0;
  if (active.size() >= 2) {
    const auto specs = named_specs(active);
    const auto queries = build_queries(specs, ds, vocab, model.config, config.m, 0);
    const auto text = encode_class_set<float>(std::span<const TokenSequence>(queries), model, nullptr);
    const auto cos = cosine_logits(text, text, 1.0f);
    double total = 0.0;
    for (std::size_t i = 0; i < active.size(); ++i) {
      for (std::size_t j = 0; j < active.size(); ++j) {
        if (i != j) total += static_cast<double>(cos.at(i, j));
      }
    }
    mean_cos = total / static_cast<double>(active.size() * (active.size() - 1));
  }
  return -model.logit_scale * 0.5 * (1.0 + mean_cos);
}

Tensor<float> score_records(const FrozenModel<float>& model, const LearnedState* state,
                            std::span<const TokenSequence> queries, const Dataset& ds,
                            std::span<const std::size_t> records) {
  const auto text = encode_class_set(queries, model, state ? &state->classes : nullptr,
                                     state && state->context ? &*state->context : nullptr);
  std::size_t rows = 0;
  for (std::size_t r : records) rows += ds.records[r].regions();
  Tensor<float> feats(Shape{rows, ds.dim});
  std::size_t row = 0;
  for (std::size_t r : records) {
    const auto& rec = ds.records[r];
    for (std::size_t k = 0; k < rec.regions(); ++k, ++row) {
      const auto src = rec.features.row(k);
      std::copy(src.begin(), src.end(), feats.row(row).begin());
    }
  }
  if (rows == 0) return Tensor<float>(Shape{0, queries.size()});
  return cosine_logits(feats, text, static_cast<float>(model.logit_scale));
}

AccuracyResult evaluate_accuracy(const FrozenModel<float>& model, const Vocabulary& vocab,
                                 const Dataset& ds, const LearnedState* state,
                                 std::span<const QuerySpec> specs, std::span<const std::size_t> records,
                                 const TrainConfig& config) {
  if (ds.mode() != Mode::classification) throw ConfigError("accuracy needs a classification dataset");
  AccuracyResult out;
  if (records.empty()) return out;
  if (specs.empty()) throw ConfigError("evaluate_accuracy: empty query set");
  const auto queries = build_queries(specs, ds, vocab, model.config, config.m, config.context_tokens);
  const auto logits = score_records(model, state, queries, ds, records);
  const auto best = argmax_rows(logits);
  out.total = records.size();
  for (std::size_t i = 0; i < records.size(); ++i) {
    const std::size_t predicted = specs[best[i]].class_id;
    out.predicted.push_back(predicted);
    if (predicted == ds.label(records[i])) ++out.correct;
  }
  return out;
}

APReport evaluate_region_ap(const FrozenModel<float>& model, const Vocabulary& vocab, const Dataset& ds,
                            const LearnedState* state, std::span<const QuerySpec> specs,
                            std::span<const std::size_t> records, const TrainConfig& config) {
  const auto queries = build_queries(specs, ds, vocab, model.config, config.m, config.context_tokens);
  const auto logits = score_records(model, state, queries, ds, records);
  std::vector<long> position(ds.num_classes(), -1);
  for (std::size_t k = 0; k < specs.size(); ++k) position[specs[k].class_id] = static_cast<long>(k);
  std::vector<std::vector<std::size_t>> labels;
  for (std::size_t r : records) {
    for (const auto& set : ds.records[r].labels) {
      std::vector<std::size_t> mapped;
      for (std::size_t l : set) {
        if (position[l] >= 0) mapped.push_back(static_cast<std::size_t>(position[l]));
      }
      labels.push_back(std::move(mapped));
    }
  }
  const auto all_freq = ds.frequency_counts();
  std::vector<std::size_t> freq;
  for (const auto& s : specs) freq.push_back(all_freq[s.class_id]);
  return evaluate_average_precision(logits.cast<double>(), labels, freq);
}

std::vector<std::size_t> records_of_classes(const Dataset& ds, std::span<const std::size_t> pool,
                                            std::span<const std::size_t> classes) {
  std::vector<std::uint8_t> keep(ds.num_classes(), 0);
  for (std::size_t c : classes) keep.at(c) = 1;
  std::vector<std::size_t> out;
  for (std::size_t r : pool) {
    if (keep[ds.label(r)]) out.push_back(r);
  }
  return out;
}

Task parse_task(const std::string& text) {
  if (text == "adapt") return Task::adapt;
  if (text == "adjust") return Task::adjust;
  if (text == "openvocab") return Task::openvocab;
  if (text == "sequential") return Task::sequential;
  if (text == "context") return Task::context;
  throw ConfigError("unknown task '" + text + "' (expected adapt, adjust, openvocab, sequential or context)");
}

const char* task_name(Task task) {
  switch (task) {
    case Task::adapt: return "adapt";
    case Task::adjust: return "adjust";
    case Task::openvocab: return "openvocab";
    case Task::sequential: return "sequential";
    case Task::context: return "context";
  }
  return "adapt";
}

void ProtocolRun::compute_mean() {
  mean.clear();
  if (seeds.empty()) return;
  for (const auto& [group, value] : seeds.front().groups) {
    double total = 0.0;
    bool everywhere = true;
    for (const auto& s : seeds) {
      const auto it = s.groups.find(group);
      if (it == s.groups.end()) {
        everywhere = false;
        break;
      }
      total += it->second;
    }
    if (everywhere) mean[group] = total / static_cast<double>(seeds.size());
  }
}

namespace {

std::vector<std::size_t> all_classes(const Dataset& ds) {
  std::vector<std::size_t> out(ds.num_classes());
  std::iota(out.begin(), out.end(), std::size_t{0});
  return out;
}

/// Training records for `active`: few-shot per class in classification mode,
/// then the optional balanced subsample.
std::vector<std::size_t> select_training(const Dataset& ds, std::span<const std::size_t> active,
                                         const TrainConfig& config) {
  std::vector<std::size_t> records;
  if (ds.mode() == Mode::classification) {
    records = records_of_classes(ds, ds.train, active);
    if (config.shots > 0) records = few_shot_sample(ds, records, config.shots, config.seed);
  } else {
    records = ds.train;
  }
  if (config.subsample_fraction < 1.0 && !records.empty()) {
    records = balanced_subsample(ds, records, config.subsample_fraction, config.seed);
  }
  return records;
}

std::vector<QuerySpec> eval_specs(std::span<const std::size_t> classes, const TrainConfig& config) {
  return config.train_classes ? learned_specs(classes) : named_specs(classes);
}

/// Metrics of `state` over `classes` on the eval split.
std::map<std::string, double> evaluate_groups(const FrozenModel<float>& model, const Vocabulary& vocab,
                                              const Dataset& ds, const LearnedState& state,
                                              std::span<const std::size_t> classes,
                                              const TrainConfig& config) {
  const auto specs = eval_specs(classes, config);
  std::map<std::string, double> groups;
  if (ds.mode() == Mode::classification) {
    const auto records = records_of_classes(ds, ds.eval, classes);
    groups["all"] = evaluate_accuracy(model, vocab, ds, &state, specs, records, config).accuracy();
  } else {
    groups = evaluate_region_ap(model, vocab, ds, &state, specs, ds.eval, config).groups;
  }
  return groups;
}

SeedResult fit_seed(const FrozenModel<float>& model, const Vocabulary& vocab, const Dataset& ds,
                    const TrainConfig& config, std::span<const std::size_t> active) {
  SeedResult res;
  res.seed = config.seed;
  res.state = init_state(model, vocab, ds, config);
  const auto records = select_training(ds, active, config);
  const auto log = train_embeddings(model, vocab, ds, records, active, config, res.state);
  if (!log.epoch_loss.empty()) res.final_loss = log.epoch_loss.back();
  if (ds.mode() == Mode::classification) {
    res.train_accuracy =
        evaluate_accuracy(model, vocab, ds, &res.state, eval_specs(active, config), records, config).accuracy();
  }
  return res;
}

const Partition& require_partition(const Dataset& ds) {
  if (!ds.manifest.partition) throw ConfigError("this task needs a base/new partition in the manifest");
  return *ds.manifest.partition;
}

std::string metric_name(Mode mode) { return mode == Mode::classification ? "accuracy" : "AP"; }

}  // namespace

ProtocolRun run_adaptation(const FrozenModel<float>& model, const Vocabulary& vocab, const Dataset& ds,
                           const TrainConfig& config, std::span<const std::uint64_t> seeds, Task task) {
  config.validate();
  ProtocolRun run;
  run.task = task;
  run.mode = ds.mode();
  run.metric = metric_name(ds.mode());
  run.config = config;
  const auto active = all_classes(ds);
  run.base = active;
  for (std::uint64_t seed : seeds) {
    TrainConfig cfg = config;
    cfg.seed = seed;
    SeedResult res = fit_seed(model, vocab, ds, cfg, active);
    res.groups = evaluate_groups(model, vocab, ds, res.state, active, cfg);
    run.seeds.push_back(std::move(res));
  }
  run.compute_mean();
  return run;
}

ProtocolRun run_base_training(const FrozenModel<float>& model, const Vocabulary& vocab,
                              const Dataset& ds, const TrainConfig& config,
                              std::span<const std::uint64_t> seeds) {
  config.validate();
  const Partition& p = require_partition(ds);
  ProtocolRun run;
  run.task = Task::openvocab;
  run.mode = ds.mode();
  run.metric = metric_name(ds.mode());
  run.config = config;
  run.base = p.base;
  run.novel = p.novel;
  for (std::uint64_t seed : seeds) {
    TrainConfig cfg = config;
    cfg.seed = seed;
    SeedResult res = fit_seed(model, vocab, ds, cfg, p.base);
    res.groups = evaluate_groups(model, vocab, ds, res.state, p.base, cfg);
    run.seeds.push_back(std::move(res));
  }
  run.compute_mean();
  return run;
}

std::map<std::string, double> open_vocab_metrics(const FrozenModel<float>& model, const Vocabulary& vocab,
                                                 const Dataset& ds, const LearnedState& state,
                                                 std::span<const std::size_t> base,
                                                 std::span<const std::size_t> novel,
                                                 const TrainConfig& config) {
  std::vector<QuerySpec> mixed = eval_specs(base, config);
  const auto named = named_specs(novel);
  mixed.insert(mixed.end(), named.begin(), named.end());
  std::vector<std::size_t> every(base.begin(), base.end());
  every.insert(every.end(), novel.begin(), novel.end());

  std::map<std::string, double> out;
  if (ds.mode() == Mode::classification) {
    if (!base.empty()) {
      out["base"] = evaluate_accuracy(model, vocab, ds, &state, eval_specs(base, config),
                                      records_of_classes(ds, ds.eval, base), config)
                        .accuracy();
    }
    if (!novel.empty()) {
      out["new"] = evaluate_accuracy(model, vocab, ds, &state, named,
                                     records_of_classes(ds, ds.eval, novel), config)
                       .accuracy();
    }
    out["all"] = evaluate_accuracy(model, vocab, ds, &state, mixed, records_of_classes(ds, ds.eval, every),
                                   config)
                     .accuracy();
    return out;
  }
  if (!base.empty()) {
    const auto specs = eval_specs(base, config);
    out["base"] = evaluate_region_ap(model, vocab, ds, &state, specs, ds.eval, config).groups.at("all");
  }
  if (!novel.empty()) {
    out["new"] = evaluate_region_ap(model, vocab, ds, &state, named, ds.eval, config).groups.at("all");
  }
  for (const auto& [group, value] : evaluate_region_ap(model, vocab, ds, &state, mixed, ds.eval, config).groups) {
    out[group] = value;
  }
  return out;
}

ProtocolRun run_open_vocab(const FrozenModel<float>& model, const Vocabulary& vocab, const Dataset& ds,
                           const TrainConfig& config, std::span<const std::uint64_t> seeds) {
  ProtocolRun run = run_base_training(model, vocab, ds, config, seeds);
  for (auto& res : run.seeds) {
    TrainConfig cfg = config;
    cfg.seed = res.seed;
    res.groups = open_vocab_metrics(model, vocab, ds, res.state, run.base, run.novel, cfg);
  }
  run.compute_mean();
  return run;
}

ProtocolRun run_sequential(const FrozenModel<float>& model, const Vocabulary& vocab, const Dataset& ds,
                           const Partition& partition, const TrainConfig& config,
                           std::span<const std::uint64_t> seeds) {
  config.validate();
  if (!config.train_classes) throw ConfigError("sequential adaptation learns class slots");
  std::set<std::size_t> base_set(partition.base.begin(), partition.base.end());
  for (std::size_t c : partition.novel) {
    if (base_set.count(c)) {
      throw ConfigError("sequential partition lists class " + std::to_string(c) + " in both stages");
    }
  }
  for (const auto* part : {&partition.base, &partition.novel}) {
    for (std::size_t c : *part) {
      if (c >= ds.num_classes()) throw ConfigError("partition class " + std::to_string(c) + " outside the dataset");
    }
  }
  ProtocolRun run;
  run.task = Task::sequential;
  run.mode = ds.mode();
  run.metric = metric_name(ds.mode());
  run.config = config;
  run.base = partition.base;
  run.novel = partition.novel;
  std::vector<std::size_t> every(partition.base.begin(), partition.base.end());
  every.insert(every.end(), partition.novel.begin(), partition.novel.end());

  for (std::uint64_t seed : seeds) {
    TrainConfig cfg = config;
    cfg.seed = seed;
    SeedResult res = fit_seed(model, vocab, ds, cfg, partition.base);
    res.stage1_state = res.state;
    if (!partition.novel.empty()) {
      if (cfg.freeze_stage1) {
        for (std::size_t c : partition.base) res.state.classes.freeze_class(c);
      }
      const std::span<const std::size_t> stage2 =
          cfg.stage2_own_classes_only ? std::span<const std::size_t>(partition.novel)
                                      : std::span<const std::size_t>(every);
      const auto records = select_training(ds, partition.novel, cfg);
      const auto log = train_embeddings(model, vocab, ds, records, stage2, cfg, res.state);
      if (!log.epoch_loss.empty()) res.final_loss = log.epoch_loss.back();
      for (std::size_t c : partition.base) res.state.classes.unfreeze_class(c);
    }
    res.groups = evaluate_groups(model, vocab, ds, res.state, every, cfg);
    if (ds.mode() == Mode::classification) {
      const auto specs = learned_specs(every);
      if (!partition.base.empty()) {
        res.groups["base"] = evaluate_accuracy(model, vocab, ds, &res.state, specs,
                                               records_of_classes(ds, ds.eval, partition.base), cfg)
                                 .accuracy();
      }
      if (!partition.novel.empty()) {
        res.groups["new"] = evaluate_accuracy(model, vocab, ds, &res.state, specs,
                                              records_of_classes(ds, ds.eval, partition.novel), cfg)
                                .accuracy();
      }
    }
    run.seeds.push_back(std::move(res));
  }
  run.compute_mean();
  return run;
}

ProtocolRun learn_context_tokens(const FrozenModel<float>& model, const Vocabulary& vocab,
                                 const Dataset& ds, const TrainConfig& config,
                                 std::span<const std::uint64_t> seeds) {
  TrainConfig cfg = config;
  if (cfg.context_tokens == 0) cfg.context_tokens = 4;
  return run_adaptation(model, vocab, ds, cfg, seeds, Task::context);
}

namespace {

template <typename T>
struct GradientProblem {
  LearnableClassEmbeddings<T> classes;
  std::vector<TokenSequence> queries;
  Tensor<T> images;
  std::vector<std::size_t> targets;
};

// Class names are distinct alphabetic vocabulary words; two random image
// features per class.
template <typename T>
GradientProblem<T> gradient_problem(const FrozenModel<T>& model, const Vocabulary& vocab, std::size_t num_classes,
                                    std::size_t m, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::string> words;
  for (std::size_t id = Vocabulary::kNumSpecials; id < vocab.size(); ++id) {
    const std::string& w = vocab.token_at(static_cast<TokenId>(id));
    if (std::all_of(w.begin(), w.end(), [](char c) { return c >= 'a' && c <= 'z'; })) words.push_back(w);
  }
  if (words.size() < num_classes) throw ConfigError("vocabulary too small for the gradient check");
  std::shuffle(words.begin(), words.end(), rng);
  words.resize(num_classes);

  GradientProblem<T> p{init_class_embeddings<T>(words, vocab, model.embeddings.tokens, m), {}, {}, {}};
  for (std::size_t c = 0; c < num_classes; ++c) {
    p.queries.push_back(render_query(default_template(), c, m, vocab, model.config.context_length));
  }
  const std::size_t batch = 2 * num_classes;
  p.images = Tensor<T>(Shape{batch, model.config.joint_dim});
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& v : p.images.data()) v = static_cast<T>(normal(rng));
  p.targets.resize(batch);
  for (std::size_t b = 0; b < batch; ++b) p.targets[b] = b % num_classes;
  return p;
}

template <typename T>
LossFn<T> gradient_loss(const FrozenModel<T>& model, GradientProblem<T>& p) {
  return [&model, &p](const Tensor<T>& params, Tensor<T>* grad) {
    p.classes.rows.values = params;
    TextGraph<T> tg(model, &p.classes, nullptr, true);
    auto& g = tg.graph();
    const auto text = tg.encode_set(p.queries);
    const auto loss = classification_loss(g, g.constant_ref(p.images), text,
                                          std::span<const std::size_t>(p.targets),
                                          static_cast<T>(model.logit_scale));
    const T value = g.value(loss)[0];
    if (grad) {
      g.backward(loss);
      *grad = g.grad(tg.tables().classes);
    }
    return value;
  };
}

}  // namespace

double end_to_end_gradient_check(const FrozenModel<float>& model, const Vocabulary& vocab,
                                 std::size_t num_classes, std::size_t m, std::uint64_t seed,
                                 bool use_double, double step) {
  const FrozenModel<double> wide = model.cast<double>();
  auto wide_problem = gradient_problem(wide, vocab, num_classes, m, seed);
  const LossFn<double> wide_loss = gradient_loss(wide, wide_problem);
  const Tensor<double> start = wide_problem.classes.rows.values;
  if (use_double) return finite_difference_check(wide_loss, start, step);

  // 32-bit: the float backward pass against central differences of the
  // same loss evaluated in double, so rounding in the probe does not swamp
  // small gradient entries.
  auto narrow_problem = gradient_problem(model, vocab, num_classes, m, seed);
  const LossFn<float> narrow_loss = gradient_loss(model, narrow_problem);
  Tensor<float> analytic;
  const float value = narrow_loss(narrow_problem.classes.rows.values, &analytic);
  if (!std::isfinite(value)) throw NumericError("gradient check: non-finite 32-bit loss");
  Tensor<double> probe = start;
  double worst = 0.0;
  for (std::size_t i = 0; i < start.numel(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + step;
    const double up = wide_loss(probe, nullptr);
    probe[i] = orig - step;
    const double down = wide_loss(probe, nullptr);
    probe[i] = orig;
    const double fd = (up - down) / (2.0 * step);
    const double an = static_cast<double>(analytic[i]);
    worst = std::max(worst, std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-12}));
  }
  return worst;
}

}  // namespace namelearn
