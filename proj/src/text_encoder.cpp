// SPDX-License-Identifier: Apache-2.0
#include "namelearn/text_encoder.hpp"

#include "namelearn/errors.hpp"

namespace namelearn {

template <typename T>
EncoderBinding<T> bind_encoder(Graph<T>& g, const EncoderWeights<T>& w) {
  EncoderBinding<T> b;
  b.layers.reserve(w.layers.size());
  for (const auto& l : w.layers) {
    typename EncoderBinding<T>::Layer v;
    v.ln1_gain = g.constant_ref(l.ln1_gain);
    v.ln1_bias = g.constant_ref(l.ln1_bias);
    v.qkv_weight = g.constant_ref(l.qkv_weight);
    v.qkv_bias = g.constant_ref(l.qkv_bias);
    v.out_weight = g.constant_ref(l.out_weight);
    v.out_bias = g.constant_ref(l.out_bias);
    v.ln2_gain = g.constant_ref(l.ln2_gain);
    v.ln2_bias = g.constant_ref(l.ln2_bias);
    v.fc1_weight = g.constant_ref(l.fc1_weight);
    v.fc1_bias = g.constant_ref(l.fc1_bias);
    v.fc2_weight = g.constant_ref(l.fc2_weight);
    v.fc2_bias = g.constant_ref(l.fc2_bias);
    b.layers.push_back(v);
  }
  b.final_gain = g.constant_ref(w.final_gain);
  b.final_bias = g.constant_ref(w.final_bias);
  b.projection = g.constant_ref(w.projection);
  return b;
}

template <typename T>
Var<T> encode_query(Graph<T>& g, Var<T> resolved, std::size_t eos_index,
                    const EncoderBinding<T>& w, const EncoderConfig& config) {
  const auto& in = g.value(resolved);
  if (in.rank() != 2 || in.dim(1) != config.width) {
    throw DimensionError("encode_query: resolved query " + shape_str(in.shape()) +
                         " does not have width " + std::to_string(config.width));
  }
  if (eos_index >= in.dim(0)) {
    throw ConfigError("encode_query: eos index " + std::to_string(eos_index) +
                      " outside query of " + std::to_string(in.dim(0)) + " tokens");
  }
  const T eps = static_cast<T>(config.eps);
  Var<T> x = slice_rows(g, resolved, 0, eos_index + 1);
  for (const auto& l : w.layers) {
    Var<T> h = layer_normalize(g, x, l.ln1_gain, l.ln1_bias, eps);
    h = add_bias(g, matmul(g, h, l.qkv_weight), l.qkv_bias);
    h = self_attention(g, h, config.heads, config.causal);
    h = add_bias(g, matmul(g, h, l.out_weight), l.out_bias);
    x = add(g, x, h);
    h = layer_normalize(g, x, l.ln2_gain, l.ln2_bias, eps);
    h = gelu(g, add_bias(g, matmul(g, h, l.fc1_weight), l.fc1_bias));
    h = add_bias(g, matmul(g, h, l.fc2_weight), l.fc2_bias);
    x = add(g, x, h);
  }
  Var<T> pooled = slice_rows(g, x, eos_index, eos_index + 1);
  pooled = layer_normalize(g, pooled, w.final_gain, w.final_bias, eps);
  return matmul(g, pooled, w.projection);
}

template <typename T>
Tensor<T> encode_query(const Tensor<T>& resolved, std::size_t eos_index,
                       const EncoderWeights<T>& weights, const EncoderConfig& config) {
  Graph<T> g;
  const auto binding = bind_encoder(g, weights);
  const auto in = g.constant_ref(resolved);
  const auto& out = g.value(encode_query(g, in, eos_index, binding, config));
  return Tensor<T>(Shape{out.numel()}, out.storage());
}

template <typename T>
TextGraph<T>::TextGraph(const FrozenModel<T>& model, const LearnableClassEmbeddings<T>* classes,
                        const TrainableRows<T>* context, bool trainable)
    : model_(model) {
  tables_.tokens = graph_.constant_ref(model.embeddings.tokens);
  tables_.positional = graph_.constant_ref(model.embeddings.positional);
  if (classes) {
    tables_.classes = trainable ? graph_.parameter_ref(classes->rows.values)
                                : graph_.constant_ref(classes->rows.values);
    tables_.per_class = classes->per_class;
  }
  if (context) {
    tables_.context = trainable ? graph_.parameter_ref(context->values)
                                : graph_.constant_ref(context->values);
  }
  encoder_ = bind_encoder(graph_, model.encoder);
}

template <typename T>
Var<T> TextGraph<T>::encode(const TokenSequence& query) {
  const auto resolved = resolve_sequence(graph_, query, tables_);
  return encode_query(graph_, resolved, query.eos_index, encoder_, model_.config);
}

template <typename T>
Var<T> TextGraph<T>::encode_set(std::span<const TokenSequence> queries) {
  std::vector<Var<T>> rows;
  rows.reserve(queries.size());
  for (const auto& q : queries) rows.push_back(encode(q));
  return concat_rows(graph_, std::span<const Var<T>>(rows));
}

template <typename T>
Tensor<T> encode_class_set(std::span<const TokenSequence> queries, const FrozenModel<T>& model,
                           const LearnableClassEmbeddings<T>* classes, const TrainableRows<T>* context) {
  TextGraph<T> tg(model, classes, context, false);
  return tg.graph().value(tg.encode_set(queries));
}

#define NAMELEARN_INSTANTIATE_ENCODER(T)                                                       \
  template EncoderBinding<T> bind_encoder(Graph<T>&, const EncoderWeights<T>&);               \
  template Var<T> encode_query(Graph<T>&, Var<T>, std::size_t, const EncoderBinding<T>&,      \
                               const EncoderConfig&);                                         \
  template Tensor<T> encode_query(const Tensor<T>&, std::size_t, const EncoderWeights<T>&,    \
                                  const EncoderConfig&);                                      \
  template class TextGraph<T>;                                                                \
  template Tensor<T> encode_class_set(std::span<const TokenSequence>, const FrozenModel<T>&,  \
                                      const LearnableClassEmbeddings<T>*,                     \
                                      const TrainableRows<T>*);

NAMELEARN_INSTANTIATE_ENCODER(float)
NAMELEARN_INSTANTIATE_ENCODER(double)

#undef NAMELEARN_INSTANTIATE_ENCODER

}  // namespace namelearn
