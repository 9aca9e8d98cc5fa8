// SPDX-License-Identifier: Apache-2.0
#include "namelearn/dataset.hpp"

#include <cstring>
#include <set>

#include "json.hpp"

#include "namelearn/errors.hpp"
#include "namelearn/io_util.hpp"

namespace namelearn {

using nlohmann::json;

Mode parse_mode(const std::string& text) {
  if (text == "classification") return Mode::classification;
  if (text == "region") return Mode::region;
  throw ConfigError("unknown mode '" + text + "' (expected classification or region)");
}

const char* mode_name(Mode mode) {
  return mode == Mode::classification ? "classification" : "region";
}

std::string serialize_features(const FeatureFile& file, Mode mode) {
  ByteWriter w;
  w.bytes(std::string_view(kFeatureMagic, 4));
  w.u32(kFeatureVersion);
  w.u32(static_cast<std::uint32_t>(file.records.size()));
  w.u32(static_cast<std::uint32_t>(file.dim));
  for (const auto& rec : file.records) {
    if (rec.features.rank() != 2 || rec.features.dim(1) != file.dim ||
        rec.features.dim(0) != rec.labels.size()) {
      throw DimensionError("sample " + std::to_string(rec.sample_id) + ": features " +
                           shape_str(rec.features.shape()) + " with " +
                           std::to_string(rec.labels.size()) + " label sets, D=" +
                           std::to_string(file.dim));
    }
    w.u32(rec.sample_id);
    if (mode == Mode::classification) {
      if (rec.labels.size() != 1 || rec.labels[0].size() != 1) {
        throw FormatError("classification sample " + std::to_string(rec.sample_id) +
                          " must have exactly one row and one label");
      }
      w.u32(static_cast<std::uint32_t>(rec.labels[0][0]));
      for (float v : rec.features.data()) w.f32(v);
    } else {
      w.u32(static_cast<std::uint32_t>(rec.labels.size()));
      for (std::size_t r = 0; r < rec.labels.size(); ++r) {
        w.u32(static_cast<std::uint32_t>(rec.labels[r].size()));
        for (std::size_t l : rec.labels[r]) w.u32(static_cast<std::uint32_t>(l));
        for (float v : rec.features.row(r)) w.f32(v);
      }
    }
  }
  return w.str();
}

FeatureFile parse_features(std::string_view bytes, Mode mode, const std::string& source) {
  ByteReader r(bytes, source);
  const auto magic = r.bytes(4, "magic");
  if (std::memcmp(magic.data(), kFeatureMagic, 4) != 0) {
    throw FormatError(source + ": bad magic, not an NVFT feature file");
  }
  const std::uint32_t version = r.u32("version");
  if (version != kFeatureVersion) {
    throw FormatError(source + ": unsupported feature format version " + std::to_string(version));
  }
  const std::uint32_t count = r.u32("record count");
  FeatureFile file;
  file.dim = r.u32("feature dimension");
  if (file.dim == 0) throw FormatError(source + ": feature dimension is 0");
  file.records.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    FeatureRecord rec;
    rec.sample_id = r.u32("sample id");
    const std::string what = "sample " + std::to_string(rec.sample_id);
    std::vector<float> values;
    if (mode == Mode::classification) {
      rec.labels.push_back({r.u32(what + " label")});
      values.reserve(file.dim);
      for (std::size_t d = 0; d < file.dim; ++d) values.push_back(r.f32(what + " features"));
    } else {
      const std::uint32_t regions = r.u32(what + " region count");
      // Each region needs at least its label count and D floats.
      if (static_cast<std::uint64_t>(regions) * (4 + 4 * file.dim) > r.remaining()) {
        throw FormatError(source + ": truncated while reading " + what + " regions");
      }
      values.reserve(regions * file.dim);
      for (std::uint32_t k = 0; k < regions; ++k) {
        const std::uint32_t n = r.u32(what + " label count");
        if (static_cast<std::uint64_t>(n) * 4 > r.remaining()) {
          throw FormatError(source + ": truncated while reading " + what + " labels");
        }
        std::vector<std::size_t> labels(n);
        for (auto& l : labels) l = r.u32(what + " labels");
        rec.labels.push_back(std::move(labels));
        for (std::size_t d = 0; d < file.dim; ++d) values.push_back(r.f32(what + " features"));
      }
    }
    rec.features = Tensor<float>(Shape{rec.labels.size(), file.dim}, std::move(values));
    file.records.push_back(std::move(rec));
  }
  if (!r.at_end()) {
    throw FormatError(source + ": " + std::to_string(r.remaining()) +
                      " trailing bytes after the declared records");
  }
  return file;
}

void write_features(const FeatureFile& file, Mode mode, const std::filesystem::path& path) {
  atomic_write_file(path, serialize_features(file, mode));
}

FeatureFile read_features(const std::filesystem::path& path, Mode mode) {
  return parse_features(read_file_bytes(path), mode, path.string());
}

std::string manifest_to_json(const DatasetManifest& m) {
  json doc;
  doc["format_version"] = m.format_version;
  doc["mode"] = mode_name(m.mode);
  doc["template"] = m.template_name;
  doc["features"] = m.features;
  json classes = json::array();
  for (const auto& c : m.classes) {
    classes.push_back({{"id", c.id}, {"name", c.name}, {"frequency_count", c.frequency_count}});
  }
  doc["classes"] = classes;
  doc["splits"] = {{"train", m.train}, {"eval", m.eval}};
  if (m.partition) doc["partition"] = {{"base", m.partition->base}, {"new", m.partition->novel}};
  return doc.dump(2) + "\n";
}

DatasetManifest manifest_from_json(std::string_view text, const std::string& source) {
  DatasetManifest m;
  try {
    const json doc = json::parse(text);
    m.format_version = doc.at("format_version").get<std::uint32_t>();
    if (m.format_version != kManifestFormatVersion) {
      throw FormatError(source + ": unsupported manifest format_version " +
                        std::to_string(m.format_version));
    }
    m.mode = parse_mode(doc.at("mode").get<std::string>());
    m.template_name = doc.value("template", std::string("default"));
    m.features = doc.value("features", std::string("features.nvft"));
    for (const auto& c : doc.at("classes")) {
      m.classes.push_back({c.at("id").get<std::size_t>(), c.at("name").get<std::string>(),
                           c.value("frequency_count", std::size_t{0})});
    }
    const auto& splits = doc.at("splits");
    m.train = splits.at("train").get<std::vector<std::uint32_t>>();
    m.eval = splits.at("eval").get<std::vector<std::uint32_t>>();
    if (doc.contains("partition")) {
      const auto& p = doc.at("partition");
      m.partition = Partition{p.at("base").get<std::vector<std::size_t>>(),
                              p.at("new").get<std::vector<std::size_t>>()};
    }
  } catch (const json::exception& e) {
    throw FormatError(source + ": " + e.what());
  }
  return m;
}

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
  atomic_write_file(path, manifest_to_json(manifest));
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  return manifest_from_json(read_file_bytes(path), path.string());
}

std::vector<std::string> Dataset::class_names() const {
  std::vector<std::string> out;
  for (const auto& c : manifest.classes) out.push_back(c.name);
  return out;
}

std::vector<std::size_t> Dataset::frequency_counts() const {
  std::vector<std::size_t> out;
  for (const auto& c : manifest.classes) out.push_back(c.frequency_count);
  return out;
}

const FeatureRecord& Dataset::by_sample_id(std::uint32_t id) const {
  const auto it = index_.find(id);
  if (it == index_.end()) throw FormatError("no sample with id " + std::to_string(id));
  return records[it->second];
}

namespace {

void check_partition(const Partition& p, std::size_t n) {
  std::vector<int> seen(n, 0);
  for (const auto* part : {&p.base, &p.novel}) {
    for (std::size_t c : *part) {
      if (c >= n) throw FormatError("partition names class " + std::to_string(c) + " outside 0.." +
                                    std::to_string(n - 1));
      if (seen[c]++) throw FormatError("partition lists class " + std::to_string(c) + " twice");
    }
  }
  for (std::size_t c = 0; c < n; ++c) {
    if (!seen[c]) throw FormatError("partition does not cover class " + std::to_string(c));
  }
}

}  // namespace

Dataset assemble_dataset(DatasetManifest manifest, FeatureFile features,
                         std::optional<std::size_t> expected_dim) {
  const std::size_t n = manifest.classes.size();
  if (n == 0) throw FormatError("manifest declares no classes");
  for (std::size_t i = 0; i < n; ++i) {
    if (manifest.classes[i].id != i) {
      throw FormatError("class ids must be dense 0..N-1 in order; entry " + std::to_string(i) +
                        " has id " + std::to_string(manifest.classes[i].id));
    }
    if (manifest.classes[i].name.empty()) {
      throw FormatError("class " + std::to_string(i) + " has an empty name");
    }
  }
  if (manifest.partition) check_partition(*manifest.partition, n);
  if (expected_dim && *expected_dim != features.dim) {
    throw DimensionError("feature dimension D=" + std::to_string(features.dim) +
                         " does not match model joint dimension D=" + std::to_string(*expected_dim));
  }

  Dataset ds;
  ds.prompt = find_template(manifest.template_name);
  ds.dim = features.dim;
  ds.records = std::move(features.records);
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    const auto& rec = ds.records[i];
    if (!ds.index_.emplace(rec.sample_id, i).second) {
      throw FormatError("duplicate sample id " + std::to_string(rec.sample_id) + " in features");
    }
    for (const auto& set : rec.labels) {
      for (std::size_t l : set) {
        if (l >= n) {
          throw FormatError("sample " + std::to_string(rec.sample_id) + " has label " +
                            std::to_string(l) + " outside the " + std::to_string(n) + " classes");
        }
      }
    }
  }
  std::set<std::uint32_t> train_ids;
  for (auto* split : {&manifest.train, &manifest.eval}) {
    const bool is_train = split == &manifest.train;
    std::set<std::uint32_t> seen;
    for (std::uint32_t id : *split) {
      const auto it = ds.index_.find(id);
      if (it == ds.index_.end()) {
        throw FormatError(std::string(is_train ? "train" : "eval") + " split references sample id " +
                          std::to_string(id) + " absent from the feature file");
      }
      if (!seen.insert(id).second) {
        throw FormatError("sample id " + std::to_string(id) + " listed twice in a split");
      }
      if (!is_train && train_ids.count(id)) {
        throw FormatError("sample id " + std::to_string(id) + " is in both train and eval splits");
      }
      (is_train ? ds.train : ds.eval).push_back(it->second);
    }
    if (is_train) train_ids = std::move(seen);
  }
  ds.manifest = std::move(manifest);
  return ds;
}

Dataset load_dataset(const std::filesystem::path& manifest_path, std::optional<std::size_t> expected_dim) {
  DatasetManifest manifest = load_manifest(manifest_path);
  const auto features_path = manifest_path.parent_path() / manifest.features;
  FeatureFile features = read_features(features_path, manifest.mode);
  return assemble_dataset(std::move(manifest), std::move(features), expected_dim);
}

void save_dataset(const DatasetManifest& manifest, const FeatureFile& features,
                  const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_features(features, manifest.mode, dir / manifest.features);
  save_manifest(manifest, dir / "manifest.json");
}

}  // namespace namelearn
