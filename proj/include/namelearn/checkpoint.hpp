// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "namelearn/embedding_store.hpp"
#include "namelearn/model.hpp"

namespace namelearn {

/// NVCK layout, little-endian:
///   "NVCK" | u32 version | records until end of file
///   record = u32 name_len | name (UTF-8) | u32 rank | u32 dims[rank] | f32 data[prod(dims)]
///
/// Model checkpoints carry a "meta" record [F, D, C, V, L, H, logit_scale,
/// eps, causal] followed by the frozen tensors. Class embeddings are stored
/// as "class_meta" [N, m], "class_embeddings" [N·m×F] and "class_frozen"
/// [N·m]; a learnable context adds "context_embeddings" and "context_frozen".
inline constexpr char kCheckpointMagic[4] = {'N', 'V', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::vector<std::pair<std::string, Tensor<float>>> records;

  const Tensor<float>* find(const std::string& name) const;
  const Tensor<float>& require(const std::string& name) const;
  void add(std::string name, Tensor<float> t) { records.emplace_back(std::move(name), std::move(t)); }
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(std::string_view bytes, const std::string& source = "checkpoint");

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint read_checkpoint(const std::filesystem::path& path);

struct LoadedCheckpoint {
  FrozenModel<float> model;
  std::optional<LearnableClassEmbeddings<float>> classes;
  std::optional<TrainableRows<float>> context;
};

/// Model plus optional learnable tables in one file.
void save_checkpoint(const FrozenModel<float>& model, const LearnableClassEmbeddings<float>* classes,
                     const TrainableRows<float>* context, const std::filesystem::path& path);
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

/// Learnable tables only (what training runs emit).
struct EmbeddingsFile {
  LearnableClassEmbeddings<float> classes;
  std::optional<TrainableRows<float>> context;
};
void save_embeddings(const LearnableClassEmbeddings<float>& classes, const TrainableRows<float>* context,
                     const std::filesystem::path& path);
EmbeddingsFile load_embeddings(const std::filesystem::path& path);

void append_model_records(Checkpoint& ckpt, const FrozenModel<float>& model);
FrozenModel<float> model_from_checkpoint(const Checkpoint& ckpt);
void append_embedding_records(Checkpoint& ckpt, const LearnableClassEmbeddings<float>& classes,
                              const TrainableRows<float>* context);
std::optional<EmbeddingsFile> embeddings_from_checkpoint(const Checkpoint& ckpt);

}  // namespace namelearn
