// SPDX-License-Identifier: Apache-2.0
#include "namelearn/report.hpp"

#include <set>
#include <sstream>

#include "json.hpp"

#include "namelearn/errors.hpp"
#include "namelearn/io_util.hpp"

namespace namelearn {

using nlohmann::json;

const std::vector<std::string>& report_groups() {
  static const std::vector<std::string> groups = {"base", "new", "all", "frequent", "common", "rare"};
  return groups;
}

namespace {

json config_object(const TrainConfig& c) {
  json j;
  j["base_lr"] = c.base_lr;
  j["epochs"] = c.epochs;
  j["warmup_epochs"] = c.warmup_epochs;
  j["batch_size"] = c.batch_size;
  j["momentum"] = c.momentum;
  j["seed"] = c.seed;
  j["m"] = c.m;
  j["mode"] = mode_name(c.mode);
  j["train_classes"] = c.train_classes;
  j["context_tokens"] = c.context_tokens;
  j["shots"] = c.shots;
  j["subsample_fraction"] = c.subsample_fraction;
  j["region_logit_bias"] = c.region_logit_bias ? json(*c.region_logit_bias) : json(nullptr);
  j["grad_clip"] = c.grad_clip;
  j["freeze_stage1"] = c.freeze_stage1;
  j["stage2_own_classes_only"] = c.stage2_own_classes_only;
  return j;
}

}  // namespace

std::string train_config_json(const TrainConfig& config) { return config_object(config).dump(); }

TrainConfig apply_config_json(std::string_view text, TrainConfig c, const std::string& source) {
  try {
    const json j = json::parse(text);
    if (!j.is_object()) throw FormatError(source + ": config must be a JSON object");
    static const std::set<std::string> known = {
        "base_lr", "epochs", "warmup_epochs", "batch_size", "momentum", "seed", "m", "mode",
        "train_classes", "context_tokens", "shots", "subsample_fraction", "region_logit_bias",
        "grad_clip", "freeze_stage1", "stage2_own_classes_only"};
    for (const auto& [key, value] : j.items()) {
      if (!known.count(key)) throw ConfigError(source + ": unknown config key '" + key + "'");
    }
    auto take = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    take("base_lr", c.base_lr);
    take("epochs", c.epochs);
    take("warmup_epochs", c.warmup_epochs);
    take("batch_size", c.batch_size);
    take("momentum", c.momentum);
    take("seed", c.seed);
    take("m", c.m);
    if (j.contains("mode")) c.mode = parse_mode(j.at("mode").get<std::string>());
    take("train_classes", c.train_classes);
    take("context_tokens", c.context_tokens);
    take("shots", c.shots);
    take("subsample_fraction", c.subsample_fraction);
    if (j.contains("region_logit_bias")) {
      const auto& v = j.at("region_logit_bias");
      c.region_logit_bias = v.is_null() ? std::nullopt : std::optional<double>(v.get<double>());
    }
    take("grad_clip", c.grad_clip);
    take("freeze_stage1", c.freeze_stage1);
    take("stage2_own_classes_only", c.stage2_own_classes_only);
  } catch (const json::exception& e) {
    throw FormatError(source + ": " + e.what());
  }
  return c;
}

MetricsReport make_report(const ProtocolRun& run) {
  MetricsReport r;
  r.task = task_name(run.task);
  r.mode = mode_name(run.mode);
  r.metric = run.metric;
  r.config_json = train_config_json(run.config);
  for (const auto& s : run.seeds) r.seeds.push_back({s.seed, s.groups, s.train_accuracy, s.final_loss});
  r.mean = run.mean;
  return r;
}

std::string report_to_json(const MetricsReport& r) {
  json doc;
  doc["format_version"] = r.format_version;
  doc["task"] = r.task;
  doc["mode"] = r.mode;
  doc["metric"] = r.metric;
  doc["config"] = r.config_json.empty() ? json::object() : json::parse(r.config_json);
  json seeds = json::array();
  for (const auto& s : r.seeds) {
    json e;
    e["seed"] = s.seed;
    e["groups"] = s.groups;
    e["train_accuracy"] = s.train_accuracy ? json(*s.train_accuracy) : json(nullptr);
    e["final_loss"] = s.final_loss;
    seeds.push_back(e);
  }
  doc["seeds"] = seeds;
  doc["mean"] = r.mean;
  return doc.dump(2) + "\n";
}

MetricsReport report_from_json(std::string_view text, const std::string& source) {
  MetricsReport r;
  try {
    const json doc = json::parse(text);
    r.format_version = doc.at("format_version").get<std::uint32_t>();
    if (r.format_version != kReportFormatVersion) {
      throw FormatError(source + ": unsupported report format_version " + std::to_string(r.format_version));
    }
    r.task = doc.at("task").get<std::string>();
    r.mode = doc.at("mode").get<std::string>();
    r.metric = doc.at("metric").get<std::string>();
    r.config_json = doc.value("config", json::object()).dump();
    for (const auto& e : doc.at("seeds")) {
      SeedMetrics s;
      s.seed = e.at("seed").get<std::uint64_t>();
      s.groups = e.at("groups").get<std::map<std::string, double>>();
      if (e.contains("train_accuracy") && !e.at("train_accuracy").is_null()) {
        s.train_accuracy = e.at("train_accuracy").get<double>();
      }
      s.final_loss = e.value("final_loss", 0.0);
      r.seeds.push_back(std::move(s));
    }
    r.mean = doc.at("mean").get<std::map<std::string, double>>();
  } catch (const json::exception& e) {
    throw FormatError(source + ": " + e.what());
  }
  const std::set<std::string> allowed(report_groups().begin(), report_groups().end());
  auto check = [&](const std::map<std::string, double>& groups) {
    for (const auto& [g, v] : groups) {
      if (!allowed.count(g)) throw FormatError(source + ": unknown metric group '" + g + "'");
    }
  };
  for (const auto& s : r.seeds) check(s.groups);
  check(r.mean);
  return r;
}

std::string report_table_csv(const MetricsReport& r) {
  std::vector<std::string> columns;
  for (const auto& g : report_groups()) {
    bool present = r.mean.count(g) > 0;
    for (const auto& s : r.seeds) present = present || s.groups.count(g) > 0;
    if (present) columns.push_back(g);
  }
  std::ostringstream out;
  out << "run";
  for (const auto& c : columns) out << ',' << r.metric << '/' << c;
  out << '\n';
  auto row = [&](const std::string& label, const std::map<std::string, double>& groups) {
    out << label;
    for (const auto& c : columns) {
      out << ',';
      const auto it = groups.find(c);
      if (it != groups.end()) out << format_real(100.0 * it->second, 2);
    }
    out << '\n';
  };
  for (const auto& s : r.seeds) row("seed " + std::to_string(s.seed), s.groups);
  row("mean", r.mean);
  return out.str();
}

}  // namespace namelearn
