// SPDX-License-Identifier: Apache-2.0
#include "namelearn/cli.hpp"

#include <algorithm>
#include <filesystem>
#include <map>
#include <ostream>
#include <set>

#include "CLI11.hpp"

#include "namelearn/checkpoint.hpp"
#include "namelearn/errors.hpp"
#include "namelearn/interpretability.hpp"
#include "namelearn/io_util.hpp"
#include "namelearn/report.hpp"
#include "namelearn/synthetic.hpp"
#include "namelearn/training.hpp"

namespace namelearn {

namespace fs = std::filesystem;

namespace {

struct ModelArgs {
  std::string checkpoint;
  std::string vocab;
};

struct LoadedModel {
  FrozenModel<float> model;
  Vocabulary vocab;
};

LoadedModel load_model(const ModelArgs& args) {
  LoadedCheckpoint ck = load_checkpoint(args.checkpoint);
  Vocabulary vocab = load_vocabulary(args.vocab);
  if (vocab.size() != ck.model.vocab_size()) {
    throw DimensionError("vocabulary " + args.vocab + " has " + std::to_string(vocab.size()) +
                         " tokens, checkpoint token table has " + std::to_string(ck.model.vocab_size()));
  }
  return {std::move(ck.model), std::move(vocab)};
}

LoadedModel pseudo_model(std::uint64_t seed) {
  Vocabulary vocab(builtin_words());
  return {generate_pseudo_pretrained(EncoderConfig{}, vocab.size(), seed), vocab};
}

void add_model_options(CLI::App* cmd, ModelArgs& args, bool required) {
  auto* c = cmd->add_option("--checkpoint", args.checkpoint, "NVCK model checkpoint");
  auto* v = cmd->add_option("--vocab", args.vocab, "vocabulary file, one token per line");
  if (required) {
    c->required();
    v->required();
  } else {
    c->needs(v);
    v->needs(c);
  }
}

struct TrainArgs {
  ModelArgs model;
  std::string manifest;
  std::string task = "adapt";
  std::string config_path;
  std::string out;
  std::string embeddings_out;
  std::string stage1_out;
  std::vector<std::uint64_t> seeds = kDefaultSeeds;
  std::size_t shots = 0, m = 0, epochs = 0, warmup = 0, batch = 0, context = 0;
  double lr = 0, momentum = 0, subsample = 0, region_bias = 0, grad_clip = 0;
  std::string mode;
  CLI::Option *shots_opt, *m_opt, *epochs_opt, *warmup_opt, *batch_opt, *context_opt;
  CLI::Option *lr_opt, *momentum_opt, *subsample_opt, *bias_opt, *clip_opt, *mode_opt;
};

TrainConfig resolve_config(const TrainArgs& a, Mode dataset_mode) {
  TrainConfig c;
  c.mode = dataset_mode;
  if (dataset_mode == Mode::region) {
    c.base_lr = kRegionLearningRate;
    c.shots = 0;
  }
  if (!a.config_path.empty()) c = apply_config_json(read_file_bytes(a.config_path), c, a.config_path);
  if (a.mode_opt->count()) c.mode = parse_mode(a.mode);
  if (c.mode != dataset_mode) {
    throw ConfigError(std::string("--mode ") + mode_name(c.mode) + " does not match the " +
                      mode_name(dataset_mode) + " dataset");
  }
  if (a.shots_opt->count()) c.shots = a.shots;
  if (a.m_opt->count()) c.m = a.m;
  if (a.epochs_opt->count()) c.epochs = a.epochs;
  if (a.warmup_opt->count()) c.warmup_epochs = a.warmup;
  if (a.batch_opt->count()) c.batch_size = a.batch;
  if (a.context_opt->count()) c.context_tokens = a.context;
  if (a.lr_opt->count()) c.base_lr = a.lr;
  if (a.momentum_opt->count()) c.momentum = a.momentum;
  if (a.subsample_opt->count()) c.subsample_fraction = a.subsample;
  if (a.bias_opt->count()) c.region_logit_bias = a.region_bias;
  if (a.clip_opt->count()) c.grad_clip = a.grad_clip;
  if (!a.seeds.empty()) c.seed = a.seeds.front();
  c.validate();
  return c;
}

void write_state(const LearnedState& state, const std::string& path) {
  save_embeddings(state.classes, state.context ? &*state.context : nullptr, path);
}

int cmd_train(const TrainArgs& a, std::ostream& out) {
  const auto lm = load_model(a.model);
  const Dataset ds = load_dataset(a.manifest, lm.model.config.joint_dim);
  const TrainConfig config = resolve_config(a, ds.mode());
  if (a.seeds.empty()) throw ConfigError("at least one seed is required");
  const Task task = parse_task(a.task);
  ProtocolRun run;
  switch (task) {
    case Task::adapt:
    case Task::adjust: run = run_adaptation(lm.model, lm.vocab, ds, config, a.seeds, task); break;
    case Task::openvocab: run = run_open_vocab(lm.model, lm.vocab, ds, config, a.seeds); break;
    case Task::sequential: {
      if (!ds.manifest.partition) throw ConfigError("sequential needs a base/new partition in the manifest");
      run = run_sequential(lm.model, lm.vocab, ds, *ds.manifest.partition, config, a.seeds);
      break;
    }
    case Task::context: run = learn_context_tokens(lm.model, lm.vocab, ds, config, a.seeds); break;
  }
  const MetricsReport report = make_report(run);
  atomic_write_file(a.out, report_to_json(report));
  if (!a.embeddings_out.empty()) write_state(run.seeds.front().state, a.embeddings_out);
  if (!a.stage1_out.empty()) {
    if (!run.seeds.front().stage1_state) throw ConfigError("--stage1-out applies to --task sequential");
    write_state(*run.seeds.front().stage1_state, a.stage1_out);
  }
  out << report_table_csv(report);
  return 0;
}

struct EvalArgs {
  ModelArgs model;
  std::string manifest;
  std::string embeddings;
  std::string group = "all";
  bool open_vocab = false;
  std::string out;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const auto lm = load_model(a.model);
  const Dataset ds = load_dataset(a.manifest, lm.model.config.joint_dim);
  std::optional<LearnedState> state;
  TrainConfig config;
  config.mode = ds.mode();
  if (!a.embeddings.empty()) {
    EmbeddingsFile ef = load_embeddings(a.embeddings);
    if (ef.classes.num_classes != ds.num_classes()) {
      throw DimensionError("embeddings hold " + std::to_string(ef.classes.num_classes) +
                           " classes, dataset has " + std::to_string(ds.num_classes()));
    }
    config.m = ef.classes.per_class;
    if (ef.context) config.context_tokens = ef.context->rows();
    state = LearnedState{std::move(ef.classes), std::move(ef.context)};
  }
  std::vector<std::size_t> base, novel;
  if (ds.manifest.partition) {
    base = ds.manifest.partition->base;
    novel = ds.manifest.partition->novel;
  } else {
    for (std::size_t c = 0; c < ds.num_classes(); ++c) base.push_back(c);
  }
  if (a.group != "all" && a.group != "base" && a.group != "new") {
    throw ConfigError("--group must be base, new or all");
  }
  if (a.group != "all" && !ds.manifest.partition) throw ConfigError("--group " + a.group + " needs a partition");
  std::vector<std::size_t> classes;
  if (a.group != "new") classes.insert(classes.end(), base.begin(), base.end());
  if (a.group != "base") classes.insert(classes.end(), novel.begin(), novel.end());
  std::vector<QuerySpec> specs;
  const std::set<std::size_t> novel_set(novel.begin(), novel.end());
  for (std::size_t c : classes) {
    const bool named = !state || (a.open_vocab && novel_set.count(c));
    specs.push_back({c, !named});
  }
  std::map<std::string, double> groups;
  if (ds.mode() == Mode::classification) {
    const auto records = records_of_classes(ds, ds.eval, classes);
    groups[a.group] =
        evaluate_accuracy(lm.model, lm.vocab, ds, state ? &*state : nullptr, specs, records, config).accuracy();
  } else {
    const auto rep = evaluate_region_ap(lm.model, lm.vocab, ds, state ? &*state : nullptr, specs, ds.eval, config);
    for (const auto& [g, v] : rep.groups) groups[g == "all" ? a.group : g] = v;
  }
  MetricsReport report;
  report.task = "eval";
  report.mode = mode_name(ds.mode());
  report.metric = ds.mode() == Mode::classification ? "accuracy" : "AP";
  report.config_json = train_config_json(config);
  report.seeds.push_back({0, groups, std::nullopt, 0.0});
  report.mean = groups;
  if (!a.out.empty()) atomic_write_file(a.out, report_to_json(report));
  out << report_table_csv(report);
  return 0;
}

struct InterpretArgs {
  ModelArgs model;
  std::string manifest;
  std::string embeddings;
  std::string reference;
  std::string template_name;
  std::size_t k = 5;
  std::string out_json, out_csv, scatter_csv;
};

int cmd_interpret(const InterpretArgs& a, std::ostream& out) {
  const auto lm = load_model(a.model);
  const Dataset ds = load_dataset(a.manifest, lm.model.config.joint_dim);
  const EmbeddingsFile ef = load_embeddings(a.embeddings);
  if (ef.classes.num_classes != ds.num_classes()) {
    throw DimensionError("embeddings hold " + std::to_string(ef.classes.num_classes) + " classes, dataset has " +
                         std::to_string(ds.num_classes()));
  }
  const PromptTemplate tmpl = a.template_name.empty() ? default_template() : find_template(a.template_name);
  std::vector<ReferenceEntry> entries;
  if (!a.reference.empty()) {
    entries = load_reference_file(a.reference);
  } else {
    for (std::size_t id = Vocabulary::kNumSpecials; id < lm.vocab.size(); ++id) {
      const std::string& w = lm.vocab.token_at(static_cast<TokenId>(id));
      if (std::all_of(w.begin(), w.end(), [](char c) { return c >= 'a' && c <= 'z'; })) entries.push_back({w, {}});
    }
  }
  const auto reference = encode_reference(entries, tmpl, lm.model, lm.vocab);
  const auto report = interpret_classes(ef.classes, ds.class_names(), ds.frequency_counts(), reference, tmpl,
                                        lm.model, lm.vocab, a.k);
  if (!a.out_json.empty()) atomic_write_file(a.out_json, neighbor_report_json(report));
  if (!a.out_csv.empty()) atomic_write_file(a.out_csv, neighbor_report_csv(report));
  if (!a.scatter_csv.empty()) atomic_write_file(a.scatter_csv, rarity_scatter_csv(report));
  for (const auto& c : report.classes) {
    out << c.name << " (" << format_real(c.self_similarity, 3) << "):";
    for (const auto& n : c.neighbors) out << ' ' << n.name << " (" << format_real(n.cosine, 2) << ')';
    out << '\n';
  }
  out << "rarity-similarity correlation: "
      << (report.correlation ? format_real(*report.correlation, 4) : std::string("undefined")) << '\n';
  return 0;
}

struct GradcheckArgs {
  ModelArgs model;
  int precision = 64;
  std::size_t classes = 8;
  std::size_t m = 1;
  std::uint64_t seed = 1;
  std::uint64_t model_seed = 7;
  double step = 0.0;
};

int cmd_gradcheck(const GradcheckArgs& a, std::ostream& out) {
  if (a.precision != 32 && a.precision != 64) throw ConfigError("--precision must be 32 or 64");
  const auto lm = a.model.checkpoint.empty() ? pseudo_model(a.model_seed) : load_model(a.model);
  const bool wide = a.precision == 64;
  const double step = a.step > 0 ? a.step : 1e-5;
  const double tol = wide ? 1e-4 : 1e-2;
  const double err = end_to_end_gradient_check(lm.model, lm.vocab, a.classes, a.m, a.seed, wide, step);
  out << "max relative error " << err << " (tolerance " << tol << ", " << a.precision << "-bit)\n";
  return err < tol ? 0 : 1;
}

struct SynthArgs {
  ModelArgs model;
  std::string out;
  std::uint64_t model_seed = 7;
  SyntheticConfig config;
  std::string mode = "classification";
  bool no_partition = false;
};

int cmd_synth(SynthArgs a, std::ostream& out) {
  const fs::path dir(a.out);
  fs::create_directories(dir);
  LoadedModel lm = a.model.checkpoint.empty() ? pseudo_model(a.model_seed) : load_model(a.model);
  if (a.model.checkpoint.empty()) {
    save_checkpoint(lm.model, nullptr, nullptr, dir / "model.nvck");
    save_vocabulary(lm.vocab, dir / "vocab.txt");
  }
  a.config.mode = parse_mode(a.mode);
  a.config.partition = !a.no_partition;
  const SyntheticDataset syn = generate_synthetic(lm.model, lm.vocab, a.config);
  save_dataset(syn.manifest, syn.features, dir);
  out << "wrote " << syn.manifest.classes.size() << " classes, " << syn.features.records.size()
      << " samples to " << dir.string() << '\n';
  return 0;
}

struct ReportArgs {
  std::string in;
  std::string out;
};

int cmd_report(const ReportArgs& a, std::ostream& out) {
  const MetricsReport r = report_from_json(read_file_bytes(a.in), a.in);
  const std::string table = report_table_csv(r);
  if (a.out.empty()) {
    out << table;
  } else {
    atomic_write_file(a.out, table);
  }
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Learn class-name embeddings on a frozen vision-language model"};
  app.require_subcommand(1);

  TrainArgs tr;
  auto* train = app.add_subcommand("train", "run an adaptation protocol");
  add_model_options(train, tr.model, true);
  train->add_option("--manifest", tr.manifest, "dataset manifest (JSON)")->required();
  train->add_option("--task", tr.task, "adapt | adjust | openvocab | sequential | context");
  train->add_option("--config", tr.config_path, "JSON file with TrainConfig fields");
  train->add_option("--out", tr.out, "metrics report (JSON)")->required();
  train->add_option("--embeddings-out", tr.embeddings_out, "learned embeddings of the first seed");
  train->add_option("--stage1-out", tr.stage1_out, "sequential: stage-1 embeddings of the first seed");
  train->add_option("--seed", tr.seeds, "seeds (default 1 2 3)")->delimiter(',');
  tr.shots_opt = train->add_option("--shots", tr.shots, "training samples per class (0 = all)");
  tr.m_opt = train->add_option("--m", tr.m, "embeddings per class");
  tr.epochs_opt = train->add_option("--epochs", tr.epochs, "training epochs");
  tr.warmup_opt = train->add_option("--warmup-epochs", tr.warmup, "warmup epochs");
  tr.batch_opt = train->add_option("--batch-size", tr.batch, "samples per step");
  tr.context_opt = train->add_option("--context-tokens", tr.context, "shared context slots");
  tr.lr_opt = train->add_option("--lr", tr.lr, "base learning rate");
  tr.momentum_opt = train->add_option("--momentum", tr.momentum, "SGD momentum");
  tr.subsample_opt = train->add_option("--subsample", tr.subsample, "balanced subsample fraction");
  tr.bias_opt = train->add_option("--region-bias", tr.region_bias, "frozen region logit offset");
  tr.clip_opt = train->add_option("--grad-clip", tr.grad_clip, "gradient norm clip (0 = off)");
  tr.mode_opt = train->add_option("--mode", tr.mode, "classification | region");

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "score learned or handcrafted class queries");
  add_model_options(eval, ev.model, true);
  eval->add_option("--manifest", ev.manifest, "dataset manifest (JSON)")->required();
  eval->add_option("--embeddings", ev.embeddings, "learned embeddings; handcrafted names when absent");
  eval->add_option("--group", ev.group, "base | new | all");
  eval->add_flag("--open-vocab", ev.open_vocab, "use handcrafted names for the new classes");
  eval->add_option("--out", ev.out, "metrics report (JSON)");

  InterpretArgs in;
  auto* interpret = app.add_subcommand("interpret", "nearest reference names of learned embeddings");
  add_model_options(interpret, in.model, true);
  interpret->add_option("--manifest", in.manifest, "dataset manifest (JSON)")->required();
  interpret->add_option("--embeddings", in.embeddings, "learned embeddings")->required();
  interpret->add_option("--reference", in.reference, "reference names (name[<TAB>count] per line)");
  interpret->add_option("--template", in.template_name, "prompt template (default: a photo of a)");
  interpret->add_option("--k", in.k, "neighbors per class");
  interpret->add_option("--out-json", in.out_json, "neighbor report (JSON)");
  interpret->add_option("--out-csv", in.out_csv, "neighbor report (CSV)");
  interpret->add_option("--scatter-csv", in.scatter_csv, "rarity/similarity scatter (CSV)");

  GradcheckArgs gc;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of d(loss)/d(E^l)");
  add_model_options(gradcheck, gc.model, false);
  gradcheck->add_option("--precision", gc.precision, "32 or 64");
  gradcheck->add_option("--classes", gc.classes, "number of classes");
  gradcheck->add_option("--m", gc.m, "embeddings per class");
  gradcheck->add_option("--seed", gc.seed, "data seed");
  gradcheck->add_option("--model-seed", gc.model_seed, "seed of the generated model without --checkpoint");
  gradcheck->add_option("--step", gc.step, "finite-difference step");

  SynthArgs sy;
  auto* synth = app.add_subcommand("synth", "write a planted synthetic dataset");
  add_model_options(synth, sy.model, false);
  synth->add_option("--out", sy.out, "output directory")->required();
  synth->add_option("--model-seed", sy.model_seed, "seed of the generated model without --checkpoint");
  synth->add_option("--classes", sy.config.classes, "number of classes");
  synth->add_option("--train-per-class", sy.config.train_per_class, "training samples per class");
  synth->add_option("--eval-per-class", sy.config.eval_per_class, "evaluation samples per class");
  synth->add_option("--noise", sy.config.noise, "feature noise sigma");
  synth->add_option("--name-shift", sy.config.name_shift, "distance of the planted embedding from the name");
  synth->add_flag("--rare-profile", sy.config.rare_profile, "frequent/common/rare class tiers");
  synth->add_option("--mode", sy.mode, "classification | region");
  synth->add_option("--template", sy.config.template_name, "prompt template name");
  synth->add_option("--seed", sy.config.seed, "data seed");
  synth->add_flag("--no-partition", sy.no_partition, "omit the base/new partition");

  ReportArgs rp;
  auto* report = app.add_subcommand("report", "render a metrics report as a CSV table");
  report->add_option("--in", rp.in, "metrics report (JSON)")->required();
  report->add_option("--out", rp.out, "CSV output (stdout when absent)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    if (train->parsed()) return cmd_train(tr, out);
    if (eval->parsed()) return cmd_eval(ev, out);
    if (interpret->parsed()) return cmd_interpret(in, out);
    if (gradcheck->parsed()) return cmd_gradcheck(gc, out);
    if (synth->parsed()) return cmd_synth(sy, out);
    if (report->parsed()) return cmd_report(rp, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}

}  // namespace namelearn
