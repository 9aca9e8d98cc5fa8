// SPDX-License-Identifier: Apache-2.0
#include "namelearn/checkpoint.hpp"

#include <charconv>
#include <cmath>
#include <cstring>
#include <set>

#include "namelearn/errors.hpp"
#include "namelearn/io_util.hpp"

namespace namelearn {

namespace {

constexpr std::size_t kMetaFields = 9;
constexpr std::uint32_t kMaxRank = 8;

std::size_t as_count(float v, const std::string& field) {
  if (!(v >= 0.0f) || std::floor(v) != v) {
    throw FormatError("checkpoint meta field '" + field + "' is not a count");
  }
  return static_cast<std::size_t>(v);
}

// Real-valued metadata is stored in 32 bits; reading it back through its
// shortest decimal form returns the double that was written (1e-5 rather
// than 9.99999974e-06).
double widen_meta(float v) {
  char buf[32];
  const auto printed = std::to_chars(buf, buf + sizeof(buf), v);
  double out = v;
  std::from_chars(buf, printed.ptr, out);
  return out;
}

Tensor<float> frozen_flags(const std::vector<std::uint8_t>& frozen) {
  Tensor<float> t(Shape{frozen.size()});
  for (std::size_t i = 0; i < frozen.size(); ++i) t[i] = frozen[i] ? 1.0f : 0.0f;
  return t;
}

std::vector<std::uint8_t> flags_from(const Tensor<float>& t, std::size_t rows, const std::string& name) {
  if (t.shape() != Shape{rows}) {
    throw FormatError("checkpoint record '" + name + "' has shape " + shape_str(t.shape()) +
                      ", expected [" + std::to_string(rows) + "]");
  }
  std::vector<std::uint8_t> out(rows);
  for (std::size_t i = 0; i < rows; ++i) out[i] = t[i] != 0.0f ? 1 : 0;
  return out;
}

}  // namespace

const Tensor<float>* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : records) {
    if (n == name) return &t;
  }
  return nullptr;
}

const Tensor<float>& Checkpoint::require(const std::string& name) const {
  const auto* t = find(name);
  if (!t) throw FormatError("checkpoint is missing record '" + name + "'");
  return *t;
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  ByteWriter w;
  w.bytes(std::string_view(kCheckpointMagic, 4));
  w.u32(ckpt.version);
  for (const auto& [name, t] : ckpt.records) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (float v : t.data()) w.f32(v);
  }
  return w.str();
}

Checkpoint parse_checkpoint(std::string_view bytes, const std::string& source) {
  ByteReader r(bytes, source);
  if (r.remaining() < 4 || r.bytes(4, "magic") != std::string_view(kCheckpointMagic, 4)) {
    throw FormatError(source + ": bad magic (not an NVCK checkpoint)");
  }
  Checkpoint ckpt;
  ckpt.version = r.u32("version");
  if (ckpt.version != kCheckpointVersion) {
    throw FormatError(source + ": unsupported checkpoint version " + std::to_string(ckpt.version) +
                      " (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  std::set<std::string> seen;
  while (!r.at_end()) {
    const std::uint32_t len = r.u32("record name length");
    std::string name(r.bytes(len, "record name"));
    if (!seen.insert(name).second) throw FormatError(source + ": duplicate record '" + name + "'");
    const std::uint32_t rank = r.u32("rank of '" + name + "'");
    if (rank == 0 || rank > kMaxRank) {
      throw FormatError(source + ": record '" + name + "' has invalid rank " + std::to_string(rank));
    }
    Shape shape(rank);
    for (auto& d : shape) d = r.u32("dims of '" + name + "'");
    const std::size_t n = shape_numel(shape);
    const auto raw = r.bytes(n * 4, "data of '" + name + "'");
    std::vector<float> vals(n);
    std::memcpy(vals.data(), raw.data(), n * 4);
    ckpt.records.emplace_back(std::move(name), Tensor<float>(std::move(shape), std::move(vals)));
  }
  return ckpt;
}

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  atomic_write_file(path, serialize_checkpoint(ckpt));
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  return parse_checkpoint(read_file_bytes(path), path.string());
}

void append_model_records(Checkpoint& ckpt, const FrozenModel<float>& model) {
  model.validate();
  const auto& c = model.config;
  ckpt.add("meta", Tensor<float>(Shape{kMetaFields},
                                 {static_cast<float>(c.width), static_cast<float>(c.joint_dim),
                                  static_cast<float>(c.context_length),
                                  static_cast<float>(model.vocab_size()), static_cast<float>(c.layers),
                                  static_cast<float>(c.heads), static_cast<float>(model.logit_scale),
                                  static_cast<float>(c.eps), c.causal ? 1.0f : 0.0f}));
  for_each_tensor(model, std::function<void(const std::string&, const Tensor<float>&)>(
                             [&](const std::string& name, const Tensor<float>& t) { ckpt.add(name, t); }));
}

FrozenModel<float> model_from_checkpoint(const Checkpoint& ckpt) {
  const auto& meta = ckpt.require("meta");
  if (meta.shape() != Shape{kMetaFields}) {
    throw FormatError("checkpoint meta record has shape " + shape_str(meta.shape()));
  }
  FrozenModel<float> m;
  m.config.width = as_count(meta[0], "F");
  m.config.joint_dim = as_count(meta[1], "D");
  m.config.context_length = as_count(meta[2], "C");
  const std::size_t vocab = as_count(meta[3], "V");
  m.config.layers = as_count(meta[4], "layers");
  m.config.heads = as_count(meta[5], "heads");
  m.logit_scale = widen_meta(meta[6]);
  m.config.eps = widen_meta(meta[7]);
  m.config.causal = meta[8] != 0.0f;
  m.encoder.layers.resize(m.config.layers);
  for_each_tensor(m, std::function<void(const std::string&, Tensor<float>&)>(
                         [&](const std::string& name, Tensor<float>& t) { t = ckpt.require(name); }));
  try {
    m.validate();
  } catch (const Error& e) {
    throw FormatError(std::string("checkpoint tensors disagree with declared metadata: ") + e.what());
  }
  if (m.vocab_size() != vocab) {
    throw FormatError("checkpoint token table has " + std::to_string(m.vocab_size()) +
                      " rows, metadata declares V=" + std::to_string(vocab));
  }
  return m;
}

void append_embedding_records(Checkpoint& ckpt, const LearnableClassEmbeddings<float>& classes,
                              const TrainableRows<float>* context) {
  ckpt.add("class_meta", Tensor<float>(Shape{2}, {static_cast<float>(classes.num_classes),
                                                  static_cast<float>(classes.per_class)}));
  ckpt.add("class_embeddings", classes.rows.values);
  ckpt.add("class_frozen", frozen_flags(classes.rows.frozen));
  if (context) {
    ckpt.add("context_embeddings", context->values);
    ckpt.add("context_frozen", frozen_flags(context->frozen));
  }
}

std::optional<EmbeddingsFile> embeddings_from_checkpoint(const Checkpoint& ckpt) {
  const auto* meta = ckpt.find("class_meta");
  if (!meta) return std::nullopt;
  if (meta->shape() != Shape{2}) throw FormatError("class_meta record must hold [N, m]");
  EmbeddingsFile out;
  out.classes.num_classes = as_count((*meta)[0], "N");
  out.classes.per_class = as_count((*meta)[1], "m");
  const auto& table = ckpt.require("class_embeddings");
  const std::size_t rows = out.classes.num_classes * out.classes.per_class;
  if (table.rank() != 2 || table.dim(0) != rows) {
    throw FormatError("class_embeddings has shape " + shape_str(table.shape()) + ", expected " +
                      std::to_string(rows) + " rows from class_meta");
  }
  out.classes.rows.values = table;
  out.classes.rows.frozen = flags_from(ckpt.require("class_frozen"), rows, "class_frozen");
  if (const auto* ctx = ckpt.find("context_embeddings")) {
    if (ctx->rank() != 2 || ctx->dim(1) != table.dim(1)) {
      throw FormatError("context_embeddings width does not match class_embeddings");
    }
    TrainableRows<float> c{*ctx, flags_from(ckpt.require("context_frozen"), ctx->dim(0), "context_frozen")};
    out.context = std::move(c);
  }
  return out;
}

void save_checkpoint(const FrozenModel<float>& model, const LearnableClassEmbeddings<float>* classes,
                     const TrainableRows<float>* context, const std::filesystem::path& path) {
  Checkpoint ckpt;
  append_model_records(ckpt, model);
  if (classes) append_embedding_records(ckpt, *classes, context);
  write_checkpoint(ckpt, path);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  const Checkpoint ckpt = read_checkpoint(path);
  LoadedCheckpoint out{model_from_checkpoint(ckpt), std::nullopt, std::nullopt};
  if (auto emb = embeddings_from_checkpoint(ckpt)) {
    if (emb->classes.rows.values.dim(1) != out.model.config.width) {
      throw FormatError(path.string() + ": class embedding width does not match model width");
    }
    out.classes = std::move(emb->classes);
    out.context = std::move(emb->context);
  }
  return out;
}

void save_embeddings(const LearnableClassEmbeddings<float>& classes, const TrainableRows<float>* context,
                     const std::filesystem::path& path) {
  Checkpoint ckpt;
  append_embedding_records(ckpt, classes, context);
  write_checkpoint(ckpt, path);
}

EmbeddingsFile load_embeddings(const std::filesystem::path& path) {
  auto emb = embeddings_from_checkpoint(read_checkpoint(path));
  if (!emb) throw FormatError(path.string() + ": no class embedding records");
  return std::move(*emb);
}

}  // namespace namelearn
