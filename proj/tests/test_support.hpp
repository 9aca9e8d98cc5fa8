// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>

#include <unistd.h>

#include "namelearn/model.hpp"
#include "namelearn/tensor.hpp"
#include "namelearn/tokenizer.hpp"

namespace testing_support {

using namespace namelearn;

inline const Vocabulary& builtin_vocab() {
  static const Vocabulary vocab(builtin_words());
  return vocab;
}

/// Narrow two-layer model for fast unit tests.
inline EncoderConfig small_config() {
  EncoderConfig c;
  c.width = 16;
  c.joint_dim = 12;
  c.layers = 2;
  c.heads = 2;
  c.context_length = 16;
  return c;
}

inline const FrozenModel<float>& small_model() {
  static const FrozenModel<float> model = generate_pseudo_pretrained(small_config(), builtin_vocab().size(), 11);
  return model;
}

/// Default desk-scale model (F=64, L=4).
inline const FrozenModel<float>& desk_model() {
  static const FrozenModel<float> model = generate_pseudo_pretrained(EncoderConfig{}, builtin_vocab().size(), 7);
  return model;
}

template <typename T>
Tensor<T> random_tensor(Shape shape, std::uint64_t seed, double sd = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, sd);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(normal(rng));
  return t;
}

/// Independent central-difference gradient of a scalar function.
inline Tensor<double> numeric_gradient(const std::function<double(const Tensor<double>&)>& f,
                                       const Tensor<double>& at, double h = 1e-6) {
  Tensor<double> grad(at.shape());
  Tensor<double> probe = at;
  for (std::size_t i = 0; i < at.numel(); ++i) {
    probe[i] = at[i] + h;
    const double up = f(probe);
    probe[i] = at[i] - h;
    const double down = f(probe);
    probe[i] = at[i];
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

inline double max_rel_error(const Tensor<double>& a, const Tensor<double>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(b[i]), 1e-8});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("namelearn_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace testing_support
