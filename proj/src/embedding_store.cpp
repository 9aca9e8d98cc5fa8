// SPDX-License-Identifier: Apache-2.0
#include "namelearn/embedding_store.hpp"

#include <variant>

#include "namelearn/errors.hpp"

namespace namelearn {

template <typename T>
std::size_t LearnableClassEmbeddings<T>::row_index(std::size_t class_id, std::size_t slot) const {
  if (class_id >= num_classes || slot >= per_class) {
    throw ConfigError("class slot (" + std::to_string(class_id) + ", " + std::to_string(slot) +
                      ") outside learnable table of " + std::to_string(num_classes) +
                      " classes x " + std::to_string(per_class) + " slots");
  }
  return class_id * per_class + slot;
}

template <typename T>
void LearnableClassEmbeddings<T>::freeze_class(std::size_t class_id) {
  for (std::size_t s = 0; s < per_class; ++s) rows.freeze(row_index(class_id, s));
}

template <typename T>
void LearnableClassEmbeddings<T>::unfreeze_class(std::size_t class_id) {
  for (std::size_t s = 0; s < per_class; ++s) rows.unfreeze(row_index(class_id, s));
}

template <typename T>
bool LearnableClassEmbeddings<T>::class_frozen(std::size_t class_id) const {
  for (std::size_t s = 0; s < per_class; ++s) {
    if (!rows.is_frozen(row_index(class_id, s))) return false;
  }
  return true;
}

template <typename T>
LearnableClassEmbeddings<T> init_class_embeddings(const std::vector<std::string>& class_names,
                                                  const Vocabulary& vocab,
                                                  const Tensor<T>& token_table, std::size_t m,
                                                  InitReport* report) {
  if (m == 0) throw ConfigError("init_class_embeddings: m must be at least 1");
  if (token_table.rank() != 2 || token_table.dim(0) != vocab.size()) {
    throw DimensionError("token table " + shape_str(token_table.shape()) +
                         " does not match vocabulary of " + std::to_string(vocab.size()));
  }
  const std::size_t f = token_table.dim(1);
  const std::size_t v = token_table.dim(0);

  std::vector<T> table_mean(f, T{0});
  for (std::size_t r = 0; r < v; ++r) {
    for (std::size_t c = 0; c < f; ++c) table_mean[c] += token_table.at(r, c);
  }
  for (auto& x : table_mean) x /= static_cast<T>(v);

  LearnableClassEmbeddings<T> out;
  out.num_classes = class_names.size();
  out.per_class = m;
  out.rows.values = Tensor<T>(Shape{class_names.size() * m, f});
  out.rows.frozen.assign(class_names.size() * m, 0);

  for (std::size_t i = 0; i < class_names.size(); ++i) {
    std::vector<T> mean(f, T{0});
    std::size_t count = 0;
    for (TokenId id : tokenize(class_names[i], vocab)) {
      if (id == Vocabulary::kUnk) continue;
      for (std::size_t c = 0; c < f; ++c) mean[c] += token_table.at(id, c);
      ++count;
    }
    if (count == 0) {
      mean = table_mean;
      if (report) {
        report->fallback_classes.push_back(i);
        report->warnings.push_back("class " + std::to_string(i) + " '" + class_names[i] +
                                   "' has no in-vocabulary token; initialized to table mean");
      }
    } else {
      for (auto& x : mean) x /= static_cast<T>(count);
    }
    for (std::size_t s = 0; s < m; ++s) {
      auto row = out.rows.values.row(out.row_index(i, s));
      std::copy(mean.begin(), mean.end(), row.begin());
    }
  }
  return out;
}

template <typename T>
TrainableRows<T> init_context_embeddings(const PromptTemplate& tmpl, std::size_t count,
                                         const Vocabulary& vocab, const Tensor<T>& token_table) {
  const auto prefix = tokenize(tmpl.prefix, vocab);
  if (count > prefix.size()) {
    throw ConfigError("template '" + tmpl.name + "' prefix has only " +
                      std::to_string(prefix.size()) + " tokens for " + std::to_string(count) +
                      " context slots");
  }
  const std::size_t f = token_table.dim(1);
  TrainableRows<T> out{Tensor<T>(Shape{count, f}), std::vector<std::uint8_t>(count, 0)};
  for (std::size_t i = 0; i < count; ++i) {
    auto src = token_table.row(prefix[i]);
    std::copy(src.begin(), src.end(), out.values.row(i).begin());
  }
  return out;
}

namespace {

// Table slots inside gather_rows: 0 = E, 1 = E^l, 2 = context.
std::vector<RowRef> row_refs(const TokenSequence& seq, std::size_t vocab_size,
                             std::size_t class_rows, std::size_t per_class,
                             std::size_t context_rows) {
  std::vector<RowRef> refs;
  refs.reserve(seq.items.size());
  for (const auto& item : seq.items) {
    if (const auto* tok = std::get_if<VocabToken>(&item)) {
      if (tok->id >= vocab_size) {
        throw ConfigError("token id " + std::to_string(tok->id) + " outside vocabulary of " +
                          std::to_string(vocab_size));
      }
      refs.push_back({0, tok->id});
    } else if (const auto* slot = std::get_if<ClassSlot>(&item)) {
      if (per_class == 0 || slot->slot >= per_class ||
          slot->class_id * per_class + slot->slot >= class_rows) {
        throw ConfigError("unknown class slot (" + std::to_string(slot->class_id) + ", " +
                          std::to_string(slot->slot) + ") in query");
      }
      refs.push_back({1, slot->class_id * per_class + slot->slot});
    } else {
      const auto& ctx = std::get<ContextSlot>(item);
      if (ctx.index >= context_rows) {
        throw ConfigError("unknown context slot " + std::to_string(ctx.index) + " in query");
      }
      refs.push_back({2, ctx.index});
    }
  }
  return refs;
}

}  // namespace

template <typename T>
Var<T> resolve_sequence(Graph<T>& g, const TokenSequence& seq, const EmbeddingBinding<T>& tables) {
  const auto& pos = g.value(tables.positional);
  if (seq.items.size() != pos.dim(0)) {
    throw DimensionError("query of " + std::to_string(seq.items.size()) +
                         " tokens for context length " + std::to_string(pos.dim(0)));
  }
  const std::size_t class_rows = tables.classes.valid() ? g.value(tables.classes).dim(0) : 0;
  const std::size_t context_rows = tables.context.valid() ? g.value(tables.context).dim(0) : 0;
  const auto refs = row_refs(seq, g.value(tables.tokens).dim(0), class_rows, tables.per_class,
                             context_rows);
  // Unbound tables are replaced by the token table; no reference points at them.
  const Var<T> sources[3] = {tables.tokens, tables.classes.valid() ? tables.classes : tables.tokens,
                             tables.context.valid() ? tables.context : tables.tokens};
  auto rows = gather_rows(g, std::span<const Var<T>>(sources), std::span<const RowRef>(refs));
  return add(g, rows, tables.positional);
}

template <typename T>
Tensor<T> resolve_sequence(const TokenSequence& seq, const PretrainedEmbeddings<T>& pretrained,
                           const LearnableClassEmbeddings<T>* classes,
                           const TrainableRows<T>* context) {
  Graph<T> g;
  EmbeddingBinding<T> b;
  b.tokens = g.constant_ref(pretrained.tokens);
  b.positional = g.constant_ref(pretrained.positional);
  if (classes) {
    b.classes = g.constant_ref(classes->rows.values);
    b.per_class = classes->per_class;
  }
  if (context) b.context = g.constant_ref(context->values);
  return g.value(resolve_sequence(g, seq, b));
}

#define NAMELEARN_INSTANTIATE_STORE(T)                                                          \
  template struct LearnableClassEmbeddings<T>;                                                  \
  template LearnableClassEmbeddings<T> init_class_embeddings(                                   \
      const std::vector<std::string>&, const Vocabulary&, const Tensor<T>&, std::size_t,        \
      InitReport*);                                                                             \
  template TrainableRows<T> init_context_embeddings(const PromptTemplate&, std::size_t,         \
                                                    const Vocabulary&, const Tensor<T>&);       \
  template Var<T> resolve_sequence(Graph<T>&, const TokenSequence&, const EmbeddingBinding<T>&); \
  template Tensor<T> resolve_sequence(const TokenSequence&, const PretrainedEmbeddings<T>&,     \
                                      const LearnableClassEmbeddings<T>*,                       \
                                      const TrainableRows<T>*);

NAMELEARN_INSTANTIATE_STORE(float)
NAMELEARN_INSTANTIATE_STORE(double)

#undef NAMELEARN_INSTANTIATE_STORE

}  // namespace namelearn
