// SPDX-License-Identifier: Apache-2.0
#include "namelearn/model.hpp"

#include <cmath>
#include <random>

#include "namelearn/errors.hpp"

namespace namelearn {

void EncoderConfig::validate() const {
  if (width == 0 || joint_dim == 0 || heads == 0 || context_length < 2) {
    throw ConfigError("encoder config needs positive width, joint_dim, heads and context >= 2");
  }
  if (width % heads != 0) {
    throw ConfigError("encoder width " + std::to_string(width) + " is not divisible by " +
                      std::to_string(heads) + " heads");
  }
  if (!(eps > 0.0)) throw ConfigError("encoder eps must be positive");
}

namespace {

template <typename T>
void expect_shape(const Tensor<T>& t, const Shape& shape, const std::string& name) {
  if (t.shape() != shape) {
    throw DimensionError("tensor '" + name + "' has shape " + shape_str(t.shape()) +
                         ", expected " + shape_str(shape));
  }
}

std::string layer_prefix(std::size_t i) { return "layers." + std::to_string(i) + "."; }

}  // namespace

template <typename T>
void for_each_tensor(FrozenModel<T>& model,
                     const std::function<void(const std::string&, Tensor<T>&)>& fn) {
  fn("token_embedding", model.embeddings.tokens);
  fn("positional_embedding", model.embeddings.positional);
  for (std::size_t i = 0; i < model.encoder.layers.size(); ++i) {
    auto& l = model.encoder.layers[i];
    const std::string p = layer_prefix(i);
    fn(p + "ln1.gain", l.ln1_gain);
    fn(p + "ln1.bias", l.ln1_bias);
    fn(p + "attn.qkv.weight", l.qkv_weight);
    fn(p + "attn.qkv.bias", l.qkv_bias);
    fn(p + "attn.out.weight", l.out_weight);
    fn(p + "attn.out.bias", l.out_bias);
    fn(p + "ln2.gain", l.ln2_gain);
    fn(p + "ln2.bias", l.ln2_bias);
    fn(p + "mlp.fc1.weight", l.fc1_weight);
    fn(p + "mlp.fc1.bias", l.fc1_bias);
    fn(p + "mlp.fc2.weight", l.fc2_weight);
    fn(p + "mlp.fc2.bias", l.fc2_bias);
  }
  fn("final_norm.gain", model.encoder.final_gain);
  fn("final_norm.bias", model.encoder.final_bias);
  fn("projection", model.encoder.projection);
}

template <typename T>
void for_each_tensor(const FrozenModel<T>& model,
                     const std::function<void(const std::string&, const Tensor<T>&)>& fn) {
  for_each_tensor(const_cast<FrozenModel<T>&>(model),
                  std::function<void(const std::string&, Tensor<T>&)>(
                      [&fn](const std::string& name, Tensor<T>& t) { fn(name, t); }));
}

template <typename T>
void FrozenModel<T>::validate() const {
  config.validate();
  const std::size_t f = config.width;
  const std::size_t d = config.joint_dim;
  if (embeddings.tokens.rank() != 2 || embeddings.tokens.dim(1) != f) {
    throw DimensionError("token embedding " + shape_str(embeddings.tokens.shape()) +
                         " does not have width " + std::to_string(f));
  }
  if (encoder.layers.size() != config.layers) {
    throw DimensionError("model has " + std::to_string(encoder.layers.size()) +
                         " layers, config declares " + std::to_string(config.layers));
  }
  if (!(logit_scale > 0.0)) throw ConfigError("logit scale must be positive");
  expect_shape(embeddings.positional, {config.context_length, f}, "positional_embedding");
  for (std::size_t i = 0; i < encoder.layers.size(); ++i) {
    const auto& l = encoder.layers[i];
    const std::string p = layer_prefix(i);
    expect_shape(l.ln1_gain, {f}, p + "ln1.gain");
    expect_shape(l.ln1_bias, {f}, p + "ln1.bias");
    expect_shape(l.qkv_weight, {f, 3 * f}, p + "attn.qkv.weight");
    expect_shape(l.qkv_bias, {3 * f}, p + "attn.qkv.bias");
    expect_shape(l.out_weight, {f, f}, p + "attn.out.weight");
    expect_shape(l.out_bias, {f}, p + "attn.out.bias");
    expect_shape(l.ln2_gain, {f}, p + "ln2.gain");
    expect_shape(l.ln2_bias, {f}, p + "ln2.bias");
    expect_shape(l.fc1_weight, {f, 4 * f}, p + "mlp.fc1.weight");
    expect_shape(l.fc1_bias, {4 * f}, p + "mlp.fc1.bias");
    expect_shape(l.fc2_weight, {4 * f, f}, p + "mlp.fc2.weight");
    expect_shape(l.fc2_bias, {f}, p + "mlp.fc2.bias");
  }
  expect_shape(encoder.final_gain, {f}, "final_norm.gain");
  expect_shape(encoder.final_bias, {f}, "final_norm.bias");
  expect_shape(encoder.projection, {f, d}, "projection");
}

template <typename T>
template <typename U>
FrozenModel<U> FrozenModel<T>::cast() const {
  FrozenModel<U> out;
  out.config = config;
  out.logit_scale = logit_scale;
  out.encoder.layers.resize(encoder.layers.size());
  std::vector<const Tensor<T>*> src;
  for_each_tensor(*this, std::function<void(const std::string&, const Tensor<T>&)>(
                             [&](const std::string&, const Tensor<T>& t) { src.push_back(&t); }));
  std::size_t k = 0;
  for_each_tensor(out, std::function<void(const std::string&, Tensor<U>&)>(
                           [&](const std::string&, Tensor<U>& t) { t = src[k++]->template cast<U>(); }));
  return out;
}

FrozenModel<float> generate_pseudo_pretrained(const EncoderConfig& config,
                                              std::size_t vocab_size, std::uint64_t seed) {
  config.validate();
  if (vocab_size < 5) throw ConfigError("vocabulary too small for a generated model");
  const std::size_t f = config.width;
  const std::size_t d = config.joint_dim;
  const double residual_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(std::max<std::size_t>(config.layers, 1)));
  std::mt19937_64 rng(seed);
  auto normal = [&rng](Shape shape, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    Tensor<float> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<float>(dist(rng));
    return t;
  };
  const double inv_sqrt_f = 1.0 / std::sqrt(static_cast<double>(f));

  FrozenModel<float> m;
  m.config = config;
  m.logit_scale = 100.0;
  m.embeddings.tokens = normal({vocab_size, f}, 0.02);
  m.embeddings.positional = normal({config.context_length, f}, 0.01);
  m.encoder.layers.resize(config.layers);
  for (auto& l : m.encoder.layers) {
    l.ln1_gain = Tensor<float>({f}, 1.0f);
    l.ln1_bias = Tensor<float>({f});
    l.qkv_weight = normal({f, 3 * f}, inv_sqrt_f);
    l.qkv_bias = Tensor<float>({3 * f});
    l.out_weight = normal({f, f}, inv_sqrt_f * residual_scale);
    l.out_bias = Tensor<float>({f});
    l.ln2_gain = Tensor<float>({f}, 1.0f);
    l.ln2_bias = Tensor<float>({f});
    l.fc1_weight = normal({f, 4 * f}, inv_sqrt_f);
    l.fc1_bias = Tensor<float>({4 * f});
    l.fc2_weight = normal({4 * f, f}, residual_scale / std::sqrt(4.0 * static_cast<double>(f)));
    l.fc2_bias = Tensor<float>({f});
  }
  m.encoder.final_gain = Tensor<float>({f}, 1.0f);
  m.encoder.final_bias = Tensor<float>({f});
  m.encoder.projection = normal({f, d}, inv_sqrt_f);
  return m;
}

std::vector<std::string> builtin_words() {
  return {
      // template and prompt words
      "a", "an", "the", "photo", "of", "type", "flower", "pet", "aircraft", "food",
      "centered", "satellite", "person", "doing", "texture", "picture", "small", "large",
      ".", ",",
      // object names
      "dog", "cat", "bird", "horse", "sheep", "cow", "elephant", "bear", "zebra", "giraffe",
      "boot", "ski", "shoe", "sandal", "hat", "shirt", "jacket", "scarf", "glove", "sock",
      "apple", "banana", "orange", "lemon", "pepper", "bell", "carrot", "onion", "potato", "tomato",
      "car", "truck", "bus", "bicycle", "motorcycle", "tricycle", "rickshaw", "cart", "wagon", "tractor",
      "chair", "table", "sofa", "bed", "lamp", "desk", "shelf", "cabinet", "mirror", "clock",
      "cup", "mug", "bowl", "plate", "fork", "knife", "spoon", "bottle", "jar", "kettle",
      "guitar", "piano", "violin", "drum", "trumpet", "flute", "harp", "cello", "banjo", "ukulele",
      "phone", "laptop", "keyboard", "mouse", "monitor", "camera", "radio", "television", "speaker", "remote",
      "tree", "rose", "tulip", "daisy", "lily", "orchid", "cactus", "fern", "moss", "palm",
      "ball", "kite", "doll", "puzzle", "robot", "balloon", "frisbee", "skateboard", "surfboard", "sled",
      "house", "tower", "bridge", "castle", "church", "barn", "tent", "cabin", "garage", "fence",
      "boat", "ship", "canoe", "kayak", "yacht", "ferry", "submarine", "raft", "sailboat", "airplane",
      "hammer", "saw", "drill", "wrench", "shovel", "rake", "ladder", "bucket", "broom", "axe",
      "bread", "cake", "pizza", "burger", "sandwich", "cookie", "donut", "pie", "noodle", "rice",
      "pedestrian", "machinery", "traffic", "light", "sign", "cone", "barrier", "pole", "bench", "hydrant",
      "lorry", "trolley", "pram", "stroller", "nappy", "diaper", "torch", "flashlight", "jumper", "sweater",
      "vegetable", "instrument", "musical", "vehicle", "furniture", "animal", "tool", "toy", "plant", "misc",
  };
}

template struct FrozenModel<float>;
template struct FrozenModel<double>;
template FrozenModel<double> FrozenModel<float>::cast<double>() const;
template FrozenModel<float> FrozenModel<double>::cast<float>() const;
template FrozenModel<float> FrozenModel<float>::cast<float>() const;
template void for_each_tensor(FrozenModel<float>&, const std::function<void(const std::string&, Tensor<float>&)>&);
template void for_each_tensor(FrozenModel<double>&, const std::function<void(const std::string&, Tensor<double>&)>&);
template void for_each_tensor(const FrozenModel<float>&, const std::function<void(const std::string&, const Tensor<float>&)>&);
template void for_each_tensor(const FrozenModel<double>&, const std::function<void(const std::string&, const Tensor<double>&)>&);

}  // namespace namelearn
