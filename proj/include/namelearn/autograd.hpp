// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "namelearn/tensor.hpp"

namespace namelearn {

/// Tape-based reverse-mode differentiation graph.
///
/// Nodes are appended in evaluation order, so every input of a node has a
/// smaller id than the node itself and the tape is acyclic by construction.
/// A node needs a gradient when it is a parameter or when any of its inputs
/// does; constants (frozen weights, pretrained embeddings) never accumulate
/// gradients but operations reading them still propagate to their other
/// inputs. One graph is single-threaded; separate graphs are independent.
template <typename T>
class Graph {
 public:
  struct Var {
    static constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
    std::size_t id = kNone;
    bool valid() const noexcept { return id != kNone; }
  };

  using BackwardFn = std::function<void(Graph&, std::size_t)>;

  Var constant(Tensor<T> value);
  /// Borrows `value`; it must outlive the graph and stay unchanged.
  Var constant_ref(const Tensor<T>& value);
  Var parameter(Tensor<T> value);
  Var parameter_ref(const Tensor<T>& value);

  /// Appends an operation node. `backward` is dropped when no input needs a
  /// gradient. Throws NumericError when `value` holds NaN/Inf.
  Var record(std::string_view kind, Tensor<T> value, std::vector<Var> inputs,
             BackwardFn backward);

  const Tensor<T>& value(Var v) const;
  bool needs_grad(Var v) const;
  std::string_view kind(Var v) const;
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient accumulator of a node. Valid only inside a backward sweep or
  /// after `backward`; zero tensor for nodes that do not need a gradient.
  const Tensor<T>& grad(Var v) const;
  Tensor<T>& grad_mut(std::size_t id);
  const Tensor<T>& grad_of(std::size_t id) const { return nodes_[id].grad; }
  const Tensor<T>& value_of(std::size_t id) const;
  bool needs_grad_of(std::size_t id) const { return nodes_[id].needs_grad; }

  /// Zeroes every accumulator, seeds d(loss)/d(loss) = 1 and sweeps the tape
  /// backwards. `loss` must hold exactly one element.
  void backward(Var loss);

  /// Runs `backward(loss)` and returns one gradient per `wrt` node (zeros for
  /// nodes that are not ancestors of the loss or do not need a gradient).
  std::vector<Tensor<T>> gradients(Var loss, std::span<const Var> wrt);

 private:
  struct Node {
    std::string_view kind;
    Tensor<T> owned;
    const Tensor<T>* borrowed = nullptr;
    Tensor<T> grad;
    bool needs_grad = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };

  const Node& node(Var v) const;

  std::vector<Node> nodes_;
};

template <typename T>
using Var = typename Graph<T>::Var;

/// Row reference used by gather_rows: row `row` of input table `table`.
struct RowRef {
  std::size_t table;
  std::size_t row;
};

// Elementwise and reductions.
template <typename T> Var<T> add(Graph<T>& g, Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Graph<T>& g, Var<T> a, Var<T> b);
template <typename T> Var<T> scale(Graph<T>& g, Var<T> x, T factor);
template <typename T> Var<T> sum(Graph<T>& g, Var<T> x);
/// x[R×C] + bias[C] broadcast over rows.
template <typename T> Var<T> add_bias(Graph<T>& g, Var<T> x, Var<T> bias);
template <typename T> Var<T> gelu(Graph<T>& g, Var<T> x);

template <typename T> Var<T> matmul(Graph<T>& g, Var<T> a, Var<T> b);

/// Per-row normalization over the last axis followed by gain and bias.
template <typename T>
Var<T> layer_normalize(Graph<T>& g, Var<T> x, Var<T> gain, Var<T> bias, T eps);

/// Multi-head scaled dot-product self-attention over a packed [n×3F]
/// (query|key|value) input. With `causal`, row i only sees rows 0..i.
template <typename T>
Var<T> self_attention(Graph<T>& g, Var<T> qkv, std::size_t heads, bool causal);

template <typename T>
Var<T> slice_rows(Graph<T>& g, Var<T> x, std::size_t begin, std::size_t end);
template <typename T>
Var<T> concat_rows(Graph<T>& g, std::span<const Var<T>> parts);
/// Builds a [picks×F] matrix by copying rows out of several [*×F] tables.
template <typename T>
Var<T> gather_rows(Graph<T>& g, std::span<const Var<T>> tables,
                   std::span<const RowRef> picks);

/// scale · cos(a_b, t_q) for every pair, a[B×D], t[Q×D] → [B×Q].
template <typename T>
Var<T> cosine_logits(Graph<T>& g, Var<T> a, Var<T> t, T logit_scale);

/// Mean over rows of −log softmax(logits)[target].
template <typename T>
Var<T> softmax_cross_entropy(Graph<T>& g, Var<T> logits,
                             std::span<const std::size_t> targets);

/// Mean over all entries of the binary cross-entropy between
/// sigmoid(logits) and `targets` (same shape, values in {0,1}).
template <typename T>
Var<T> sigmoid_binary_cross_entropy(Graph<T>& g, Var<T> logits,
                                    const Tensor<T>& targets);

/// Loss with its analytic gradient. When `grad` is non-null it is resized
/// and filled with d(loss)/d(params).
template <typename T>
using LossFn = std::function<T(const Tensor<T>& params, Tensor<T>* grad)>;

/// Max over coordinates of |analytic − central difference| /
/// max(|analytic|, |fd|, 1e-12). Throws NumericError on a non-finite loss.
template <typename T>
double finite_difference_check(const LossFn<T>& loss_fn, const Tensor<T>& params,
                               T step);

}  // namespace namelearn
