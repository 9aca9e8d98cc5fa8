// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "namelearn/tensor.hpp"
#include "namelearn/tokenizer.hpp"

namespace namelearn {

enum class Mode { classification, region };

Mode parse_mode(const std::string& text);
const char* mode_name(Mode mode);

struct ClassEntry {
  std::size_t id = 0;
  std::string name;
  std::size_t frequency_count = 0;
};

struct Partition {
  std::vector<std::size_t> base;
  std::vector<std::size_t> novel;
};

inline constexpr std::uint32_t kManifestFormatVersion = 1;

/// JSON manifest:
///   {"format_version": 1, "mode": "classification", "template": "default",
///    "features": "features.nvft",
///    "classes": [{"id": 0, "name": "dog", "frequency_count": 16}, ...],
///    "splits": {"train": [sample ids], "eval": [sample ids]},
///    "partition": {"base": [class ids], "new": [class ids]}}
/// "partition" is optional; "features" is resolved relative to the manifest.
struct DatasetManifest {
  std::uint32_t format_version = kManifestFormatVersion;
  Mode mode = Mode::classification;
  std::string template_name = "default";
  std::string features = "features.nvft";
  std::vector<ClassEntry> classes;
  std::vector<std::uint32_t> train;
  std::vector<std::uint32_t> eval;
  std::optional<Partition> partition;
};

/// One sample. Classification samples have a single row with a single label;
/// region samples have one row per region and a label set per region (empty
/// for background).
struct FeatureRecord {
  std::uint32_t sample_id = 0;
  Tensor<float> features;  // [R×D]
  std::vector<std::vector<std::size_t>> labels;

  std::size_t regions() const { return labels.size(); }
};

/// NVFT layout, little-endian:
///   "NVFT" | u32 version | u32 count | u32 D | count records
///   classification record: u32 sample_id | u32 label | f32[D]
///   region record: u32 sample_id | u32 regions | regions × (u32 n_labels |
///                  u32 labels[n_labels] | f32[D])
inline constexpr char kFeatureMagic[4] = {'N', 'V', 'F', 'T'};
inline constexpr std::uint32_t kFeatureVersion = 1;

struct FeatureFile {
  std::size_t dim = 0;
  std::vector<FeatureRecord> records;
};

std::string serialize_features(const FeatureFile& file, Mode mode);
FeatureFile parse_features(std::string_view bytes, Mode mode, const std::string& source = "features");
void write_features(const FeatureFile& file, Mode mode, const std::filesystem::path& path);
FeatureFile read_features(const std::filesystem::path& path, Mode mode);

std::string manifest_to_json(const DatasetManifest& manifest);
DatasetManifest manifest_from_json(std::string_view text, const std::string& source = "manifest");
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);
DatasetManifest load_manifest(const std::filesystem::path& path);

/// Validated manifest plus features, indexed by sample id.
struct Dataset {
  DatasetManifest manifest;
  PromptTemplate prompt;
  std::size_t dim = 0;
  std::vector<FeatureRecord> records;
  std::vector<std::size_t> train;  // indices into records
  std::vector<std::size_t> eval;

  Mode mode() const { return manifest.mode; }
  std::size_t num_classes() const { return manifest.classes.size(); }
  std::vector<std::string> class_names() const;
  std::vector<std::size_t> frequency_counts() const;
  /// Label of a classification record.
  std::size_t label(std::size_t record) const { return records[record].labels[0][0]; }
  const FeatureRecord& by_sample_id(std::uint32_t id) const;

 private:
  friend Dataset assemble_dataset(DatasetManifest, FeatureFile, std::optional<std::size_t>);
  std::unordered_map<std::uint32_t, std::size_t> index_;
};

/// Checks every manifest and feature invariant; `expected_dim`, when given,
/// must equal the feature width.
Dataset assemble_dataset(DatasetManifest manifest, FeatureFile features,
                         std::optional<std::size_t> expected_dim = std::nullopt);

Dataset load_dataset(const std::filesystem::path& manifest_path,
                     std::optional<std::size_t> expected_dim = std::nullopt);

/// Writes manifest.json and the feature file named in it into `dir`.
void save_dataset(const DatasetManifest& manifest, const FeatureFile& features,
                  const std::filesystem::path& dir);

}  // namespace namelearn
