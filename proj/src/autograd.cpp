// SPDX-License-Identifier: Apache-2.0
#include "namelearn/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace namelearn {

// ---------------------------------------------------------------------------
// Graph
// ---------------------------------------------------------------------------

namespace {

template <typename T>
void require_finite_leaf(const Tensor<T>& value, const char* kind) {
  if (!value.all_finite()) {
    throw NumericError(std::string("non-finite ") + kind + " " + shape_str(value.shape()));
  }
}

}  // namespace

template <typename T>
auto Graph<T>::constant(Tensor<T> value) -> Var {
  require_finite_leaf(value, "constant");
  Node n;
  n.kind = "constant";
  n.owned = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <typename T>
auto Graph<T>::constant_ref(const Tensor<T>& value) -> Var {
  require_finite_leaf(value, "constant");
  Node n;
  n.kind = "constant";
  n.borrowed = &value;
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <typename T>
auto Graph<T>::parameter(Tensor<T> value) -> Var {
  require_finite_leaf(value, "parameter");
  Node n;
  n.kind = "parameter";
  n.owned = std::move(value);
  n.needs_grad = true;
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <typename T>
auto Graph<T>::parameter_ref(const Tensor<T>& value) -> Var {
  require_finite_leaf(value, "parameter");
  Node n;
  n.kind = "parameter";
  n.borrowed = &value;
  n.needs_grad = true;
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <typename T>
auto Graph<T>::record(std::string_view kind, Tensor<T> value,
                      std::vector<Var> inputs, BackwardFn backward) -> Var {
  if (!value.all_finite()) {
    throw NumericError("non-finite output from " + std::string(kind) +
                       " " + shape_str(value.shape()));
  }
  Node n;
  n.kind = kind;
  n.owned = std::move(value);
  const std::size_t self = nodes_.size();
  for (Var in : inputs) {
    if (!in.valid() || in.id >= self) {
      throw Error("graph input of " + std::string(kind) +
                  " does not precede it (cycle or dangling reference)");
    }
    n.inputs.push_back(in.id);
    n.needs_grad = n.needs_grad || nodes_[in.id].needs_grad;
  }
  if (n.needs_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{self};
}

template <typename T>
auto Graph<T>::node(Var v) const -> const Node& {
  if (!v.valid() || v.id >= nodes_.size()) throw Error("invalid graph variable");
  return nodes_[v.id];
}

template <typename T>
const Tensor<T>& Graph<T>::value(Var v) const {
  const Node& n = node(v);
  return n.borrowed ? *n.borrowed : n.owned;
}

template <typename T>
const Tensor<T>& Graph<T>::value_of(std::size_t id) const {
  const Node& n = nodes_[id];
  return n.borrowed ? *n.borrowed : n.owned;
}

template <typename T>
bool Graph<T>::needs_grad(Var v) const {
  return node(v).needs_grad;
}

template <typename T>
std::string_view Graph<T>::kind(Var v) const {
  return node(v).kind;
}

template <typename T>
const Tensor<T>& Graph<T>::grad(Var v) const {
  return node(v).grad;
}

template <typename T>
Tensor<T>& Graph<T>::grad_mut(std::size_t id) {
  return nodes_[id].grad;
}

template <typename T>
void Graph<T>::backward(Var loss) {
  const Node& root = node(loss);
  if (value(loss).numel() != 1) {
    throw DimensionError("backward needs a scalar loss, got " +
                         shape_str(value(loss).shape()));
  }
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    Node& n = nodes_[id];
    n.grad = Tensor<T>(value_of(id).shape());
  }
  if (!root.needs_grad) return;
  nodes_[loss.id].grad[0] = T{1};
  for (std::size_t id = loss.id + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.needs_grad || !n.backward) continue;
    for (std::size_t in : n.inputs) {
      if (in >= id) throw Error("cyclic graph detected during backward");
    }
    n.backward(*this, id);
  }
}

template <typename T>
std::vector<Tensor<T>> Graph<T>::gradients(Var loss, std::span<const Var> wrt) {
  backward(loss);
  std::vector<Tensor<T>> out;
  out.reserve(wrt.size());
  for (Var v : wrt) {
    const Node& n = node(v);
    if (n.needs_grad) {
      out.push_back(n.grad);
    } else {
      out.emplace_back(value(v).shape());
    }
  }
  return out;
}

template class Graph<float>;
template class Graph<double>;

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

namespace {

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b,
                        std::string_view op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

template <typename T>
void require_matrix(const Tensor<T>& a, std::string_view op) {
  if (a.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " +
                         shape_str(a.shape()));
  }
}

template <typename T>
void accumulate(Tensor<T>& dst, const Tensor<T>& src) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

}  // namespace

template <typename T>
Var<T> add(Graph<T>& g, Var<T> a, Var<T> b) {
  const auto& av = g.value(a);
  const auto& bv = g.value(b);
  require_same_shape(av, bv, "add");
  Tensor<T> out = av;
  accumulate(out, bv);
  const std::size_t ia = a.id, ib = b.id;
  return g.record("add", std::move(out), {a, b}, [ia, ib](Graph<T>& gr, std::size_t self) {
    const auto& go = gr.grad_of(self);
    if (gr.needs_grad_of(ia)) accumulate(gr.grad_mut(ia), go);
    if (gr.needs_grad_of(ib)) accumulate(gr.grad_mut(ib), go);
  });
}

template <typename T>
Var<T> mul(Graph<T>& g, Var<T> a, Var<T> b) {
  const auto& av = g.value(a);
  const auto& bv = g.value(b);
  require_same_shape(av, bv, "mul");
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] * bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return g.record("mul", std::move(out), {a, b}, [ia, ib](Graph<T>& gr, std::size_t self) {
    const auto& go = gr.grad_of(self);
    const auto& x = gr.value_of(ia);
    const auto& y = gr.value_of(ib);
    if (gr.needs_grad_of(ia)) {
      auto& ga = gr.grad_mut(ia);
      for (std::size_t i = 0; i < go.numel(); ++i) ga[i] += go[i] * y[i];
    }
    if (gr.needs_grad_of(ib)) {
      auto& gb = gr.grad_mut(ib);
      for (std::size_t i = 0; i < go.numel(); ++i) gb[i] += go[i] * x[i];
    }
  });
}

template <typename T>
Var<T> scale(Graph<T>& g, Var<T> x, T factor) {
  Tensor<T> out = g.value(x);
  for (auto& v : out.data()) v *= factor;
  const std::size_t ix = x.id;
  return g.record("scale", std::move(out), {x}, [ix, factor](Graph<T>& gr, std::size_t self) {
    const auto& go = gr.grad_of(self);
    auto& gx = gr.grad_mut(ix);
    for (std::size_t i = 0; i < go.numel(); ++i) gx[i] += go[i] * factor;
  });
}

template <typename T>
Var<T> sum(Graph<T>& g, Var<T> x) {
  T total{0};
  for (T v : g.value(x).data()) total += v;
  const std::size_t ix = x.id;
  return g.record("sum", Tensor<T>::scalar(total), {x}, [ix](Graph<T>& gr, std::size_t self) {
    const T go = gr.grad_of(self)[0];
    for (auto& v : gr.grad_mut(ix).data()) v += go;
  });
}

template <typename T>
Var<T> add_bias(Graph<T>& g, Var<T> x, Var<T> bias) {
  const auto& xv = g.value(x);
  const auto& bv = g.value(bias);
  if (bv.numel() != xv.cols()) {
    throw DimensionError("add_bias: bias " + shape_str(bv.shape()) +
                         " does not match last axis of " + shape_str(xv.shape()));
  }
  Tensor<T> out = xv;
  const std::size_t cols = xv.cols();
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += bv[c];
  }
  const std::size_t ix = x.id, ib = bias.id;
  return g.record("add_bias", std::move(out), {x, bias}, [ix, ib](Graph<T>& gr, std::size_t self) {
    const auto& go = gr.grad_of(self);
    if (gr.needs_grad_of(ix)) accumulate(gr.grad_mut(ix), go);
    if (gr.needs_grad_of(ib)) {
      auto& gb = gr.grad_mut(ib);
      const std::size_t cols = gb.numel();
      for (std::size_t r = 0; r < go.numel() / cols; ++r) {
        for (std::size_t c = 0; c < cols; ++c) gb[c] += go[r * cols + c];
      }
    }
  });
}

namespace {

// tanh-approximation GELU constants.
constexpr double kGeluSqrt2OverPi = 0.7978845608028654;
constexpr double kGeluCubic = 0.044715;

}  // namespace

template <typename T>
Var<T> gelu(Graph<T>& g, Var<T> x) {
  const auto& xv = g.value(x);
  Tensor<T> out(xv.shape());
  const T c0 = static_cast<T>(kGeluSqrt2OverPi);
  const T c1 = static_cast<T>(kGeluCubic);
  for (std::size_t i = 0; i < xv.numel(); ++i) {
    const T v = xv[i];
    out[i] = T(0.5) * v * (T(1) + std::tanh(c0 * (v + c1 * v * v * v)));
  }
  const std::size_t ix = x.id;
  return g.record("gelu", std::move(out), {x}, [ix, c0, c1](Graph<T>& gr, std::size_t self) {
    const auto& go = gr.grad_of(self);
    const auto& xv = gr.value_of(ix);
    auto& gx = gr.grad_mut(ix);
    for (std::size_t i = 0; i < go.numel(); ++i) {
      const T v = xv[i];
      const T th = std::tanh(c0 * (v + c1 * v * v * v));
      const T dinner = c0 * (T(1) + T(3) * c1 * v * v);
      const T d = T(0.5) * (T(1) + th) + T(0.5) * v * (T(1) - th * th) * dinner;
      gx[i] += go[i] * d;
    }
  });
}

template <typename T>
Var<T> matmul(Graph<T>& g, Var<T> a, Var<T> b) {
  const auto& av = g.value(a);
  const auto& bv = g.value(b);
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_str(av.shape()) +
                         " by " + shape_str(bv.shape()));
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor<T> out(Shape{m, n});
  const T* A = av.data().data();
  const T* B = bv.data().data();
  T* C = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = C + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = A[i * k + p];
      const T* brow = B + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  const std::size_t ia = a.id, ib = b.id;
  return g.record("matmul", std::move(out), {a, b}, [ia, ib, m, k, n](Graph<T>& gr, std::size_t self) {
    const T* dC = gr.grad_of(self).data().data();
    const T* A = gr.value_of(ia).data().data();
    const T* B = gr.value_of(ib).data().data();
    if (gr.needs_grad_of(ia)) {
      T* dA = gr.grad_mut(ia).data().data();
      for (std::size_t i = 0; i < m; ++i) {
        const T* dcrow = dC + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const T* brow = B + p * n;
          T acc{0};
          for (std::size_t j = 0; j < n; ++j) acc += dcrow[j] * brow[j];
          dA[i * k + p] += acc;
        }
      }
    }
    if (gr.needs_grad_of(ib)) {
      T* dB = gr.grad_mut(ib).data().data();
      for (std::size_t i = 0; i < m; ++i) {
        const T* dcrow = dC + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const T aip = A[i * k + p];
          T* dbrow = dB + p * n;
          for (std::size_t j = 0; j < n; ++j) dbrow[j] += aip * dcrow[j];
        }
      }
    }
  });
}

template <typename T>
Var<T> layer_normalize(Graph<T>& g, Var<T> x, Var<T> gain, Var<T> bias, T eps) {
  if (!(eps > T{0})) throw ConfigError("layer_normalize: eps must be positive");
  const auto& xv = g.value(x);
  const auto& gv = g.value(gain);
  const auto& bv = g.value(bias);
  const std::size_t f = xv.cols();
  if (gv.numel() != f || bv.numel() != f) {
    throw DimensionError("layer_normalize: feature width " + std::to_string(f) +
                         " vs gain " + shape_str(gv.shape()) + " and bias " +
                         shape_str(bv.shape()));
  }
  const std::size_t rows = xv.rows();
  Tensor<T> out(xv.shape());
  std::vector<T> normed(xv.numel());
  std::vector<T> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.data().data() + r * f;
    T mean{0};
    for (std::size_t c = 0; c < f; ++c) mean += xr[c];
    mean /= static_cast<T>(f);
    T var{0};
    for (std::size_t c = 0; c < f; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= static_cast<T>(f);
    const T inv = T(1) / std::sqrt(var + eps);
    rstd[r] = inv;
    for (std::size_t c = 0; c < f; ++c) {
      const T h = (xr[c] - mean) * inv;
      normed[r * f + c] = h;
      out[r * f + c] = h * gv[c] + bv[c];
    }
  }
  const std::size_t ix = x.id, ig = gain.id, ib = bias.id;
  return g.record(
      "layer_normalize", std::move(out), {x, gain, bias},
      [ix, ig, ib, f, rows, normed = std::move(normed), rstd = std::move(rstd)](
          Graph<T>& gr, std::size_t self) {
        const auto& go = gr.grad_of(self);
        const auto& gv = gr.value_of(ig);
        if (gr.needs_grad_of(ig)) {
          auto& dg = gr.grad_mut(ig);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < f; ++c) dg[c] += go[r * f + c] * normed[r * f + c];
        }
        if (gr.needs_grad_of(ib)) {
          auto& db = gr.grad_mut(ib);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < f; ++c) db[c] += go[r * f + c];
        }
        if (gr.needs_grad_of(ix)) {
          auto& dx = gr.grad_mut(ix);
          std::vector<T> dh(f);
          for (std::size_t r = 0; r < rows; ++r) {
            T mean_dh{0}, mean_dh_h{0};
            for (std::size_t c = 0; c < f; ++c) {
              dh[c] = go[r * f + c] * gv[c];
              mean_dh += dh[c];
              mean_dh_h += dh[c] * normed[r * f + c];
            }
            mean_dh /= static_cast<T>(f);
            mean_dh_h /= static_cast<T>(f);
            for (std::size_t c = 0; c < f; ++c) {
              dx[r * f + c] +=
                  rstd[r] * (dh[c] - mean_dh - normed[r * f + c] * mean_dh_h);
            }
          }
        }
      });
}

template <typename T>
Var<T> self_attention(Graph<T>& g, Var<T> qkv, std::size_t heads, bool causal) {
  const auto& in = g.value(qkv);
  require_matrix(in, "self_attention");
  if (heads == 0 || in.dim(1) % (3 * heads) != 0) {
    throw DimensionError("self_attention: width " + std::to_string(in.dim(1)) +
                         " is not 3 x heads x head_dim");
  }
  const std::size_t n = in.dim(0);
  const std::size_t width = in.dim(1) / 3;
  const std::size_t hd = width / heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(hd));
  const std::size_t stride = 3 * width;
  const T* X = in.data().data();
  Tensor<T> out(Shape{n, width});
  // probs[h][i][j], zero where masked
  std::vector<T> probs(heads * n * n, T{0});
  std::vector<T> scores(n);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t qo = h * hd, ko = width + h * hd, vo = 2 * width + h * hd;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t last = causal ? i : n - 1;
      const T* q = X + i * stride + qo;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j <= last; ++j) {
        const T* kk = X + j * stride + ko;
        T s{0};
        for (std::size_t d = 0; d < hd; ++d) s += q[d] * kk[d];
        scores[j] = s * inv_sqrt;
        mx = std::max(mx, scores[j]);
      }
      T denom{0};
      for (std::size_t j = 0; j <= last; ++j) {
        scores[j] = std::exp(scores[j] - mx);
        denom += scores[j];
      }
      T* p = probs.data() + (h * n + i) * n;
      T* o = out.data().data() + i * width + h * hd;
      for (std::size_t j = 0; j <= last; ++j) {
        p[j] = scores[j] / denom;
        const T* v = X + j * stride + vo;
        for (std::size_t d = 0; d < hd; ++d) o[d] += p[j] * v[d];
      }
    }
  }
  const std::size_t iq = qkv.id;
  return g.record(
      "self_attention", std::move(out), {qkv},
      [iq, n, width, hd, heads, causal, inv_sqrt, probs = std::move(probs)](
          Graph<T>& gr, std::size_t self) {
        const std::size_t stride = 3 * width;
        const T* X = gr.value_of(iq).data().data();
        const T* dO = gr.grad_of(self).data().data();
        T* dX = gr.grad_mut(iq).data().data();
        std::vector<T> dp(n);
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t qo = h * hd, ko = width + h * hd, vo = 2 * width + h * hd;
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t last = causal ? i : n - 1;
            const T* p = probs.data() + (h * n + i) * n;
            const T* dout = dO + i * width + h * hd;
            T weighted{0};
            for (std::size_t j = 0; j <= last; ++j) {
              const T* v = X + j * stride + vo;
              T* dv = dX + j * stride + vo;
              T s{0};
              for (std::size_t d = 0; d < hd; ++d) {
                s += dout[d] * v[d];
                dv[d] += p[j] * dout[d];
              }
              dp[j] = s;
              weighted += p[j] * s;
            }
            const T* q = X + i * stride + qo;
            T* dq = dX + i * stride + qo;
            for (std::size_t j = 0; j <= last; ++j) {
              const T ds = p[j] * (dp[j] - weighted) * inv_sqrt;
              const T* kk = X + j * stride + ko;
              T* dk = dX + j * stride + ko;
              for (std::size_t d = 0; d < hd; ++d) {
                dq[d] += ds * kk[d];
                dk[d] += ds * q[d];
              }
            }
          }
        }
      });
}

template <typename T>
Var<T> slice_rows(Graph<T>& g, Var<T> x, std::size_t begin, std::size_t end) {
  const auto& xv = g.value(x);
  require_matrix(xv, "slice_rows");
  if (begin > end || end > xv.dim(0)) {
    throw DimensionError("slice_rows: range [" + std::to_string(begin) + ", " +
                         std::to_string(end) + ") outside " + shape_str(xv.shape()));
  }
  const std::size_t f = xv.dim(1);
  std::vector<T> vals(xv.data().begin() + begin * f, xv.data().begin() + end * f);
  const std::size_t ix = x.id;
  return g.record("slice_rows", Tensor<T>(Shape{end - begin, f}, std::move(vals)), {x},
                  [ix, begin, f](Graph<T>& gr, std::size_t self) {
                    const auto& go = gr.grad_of(self);
                    auto& gx = gr.grad_mut(ix);
                    for (std::size_t i = 0; i < go.numel(); ++i) gx[begin * f + i] += go[i];
                  });
}

template <typename T>
Var<T> concat_rows(Graph<T>& g, std::span<const Var<T>> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t f = g.value(parts[0]).cols();
  std::vector<T> vals;
  std::vector<std::size_t> offsets;
  std::vector<Var<T>> inputs(parts.begin(), parts.end());
  for (Var<T> p : parts) {
    const auto& pv = g.value(p);
    if (pv.cols() != f) {
      throw DimensionError("concat_rows: width mismatch " + shape_str(pv.shape()) +
                           " vs " + std::to_string(f));
    }
    offsets.push_back(vals.size());
    vals.insert(vals.end(), pv.data().begin(), pv.data().end());
  }
  const std::size_t rows = vals.size() / f;
  std::vector<std::size_t> ids;
  for (Var<T> p : parts) ids.push_back(p.id);
  return g.record("concat_rows", Tensor<T>(Shape{rows, f}, std::move(vals)), std::move(inputs),
                  [ids, offsets](Graph<T>& gr, std::size_t self) {
                    const auto& go = gr.grad_of(self);
                    for (std::size_t k = 0; k < ids.size(); ++k) {
                      if (!gr.needs_grad_of(ids[k])) continue;
                      auto& gx = gr.grad_mut(ids[k]);
                      for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] += go[offsets[k] + i];
                    }
                  });
}

template <typename T>
Var<T> gather_rows(Graph<T>& g, std::span<const Var<T>> tables,
                   std::span<const RowRef> picks) {
  if (tables.empty()) throw DimensionError("gather_rows: no tables");
  const std::size_t f = g.value(tables[0]).cols();
  for (Var<T> t : tables) {
    const auto& tv = g.value(t);
    if (tv.rank() != 2 || tv.cols() != f) {
      throw DimensionError("gather_rows: table " + shape_str(tv.shape()) +
                           " does not have width " + std::to_string(f));
    }
  }
  Tensor<T> out(Shape{picks.size(), f});
  for (std::size_t i = 0; i < picks.size(); ++i) {
    const RowRef ref = picks[i];
    if (ref.table >= tables.size() || ref.row >= g.value(tables[ref.table]).dim(0)) {
      throw DimensionError("gather_rows: row reference out of range");
    }
    auto src = g.value(tables[ref.table]).row(ref.row);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  std::vector<std::size_t> ids;
  for (Var<T> t : tables) ids.push_back(t.id);
  std::vector<RowRef> refs(picks.begin(), picks.end());
  std::vector<Var<T>> inputs(tables.begin(), tables.end());
  return g.record("gather_rows", std::move(out), std::move(inputs),
                  [ids, refs, f](Graph<T>& gr, std::size_t self) {
                    const auto& go = gr.grad_of(self);
                    for (std::size_t i = 0; i < refs.size(); ++i) {
                      const std::size_t id = ids[refs[i].table];
                      if (!gr.needs_grad_of(id)) continue;
                      auto& gt = gr.grad_mut(id);
                      for (std::size_t c = 0; c < f; ++c) gt[refs[i].row * f + c] += go[i * f + c];
                    }
                  });
}

namespace {

template <typename T>
std::vector<T> row_norms(const Tensor<T>& m, std::string_view which) {
  std::vector<T> norms(m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    T s{0};
    for (T v : m.row(r)) s += v * v;
    norms[r] = std::sqrt(s);
    if (!(norms[r] > T{0})) {
      throw DegenerateFeatureError("cosine_logits: zero-norm " + std::string(which) +
                                   " feature at row " + std::to_string(r));
    }
  }
  return norms;
}

}  // namespace

template <typename T>
Var<T> cosine_logits(Graph<T>& g, Var<T> a, Var<T> t, T logit_scale) {
  const auto& av = g.value(a);
  const auto& tv = g.value(t);
  require_matrix(av, "cosine_logits");
  require_matrix(tv, "cosine_logits");
  if (av.dim(1) != tv.dim(1)) {
    throw DimensionError("cosine_logits: feature width mismatch " +
                         shape_str(av.shape()) + " vs " + shape_str(tv.shape()));
  }
  const std::size_t b = av.dim(0), q = tv.dim(0), d = av.dim(1);
  auto an = row_norms(av, "image");
  auto tn = row_norms(tv, "text");
  Tensor<T> out(Shape{b, q});
  Tensor<T> cosines(Shape{b, q});
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < q; ++j) {
      T dot{0};
      for (std::size_t k = 0; k < d; ++k) dot += av.at(i, k) * tv.at(j, k);
      const T c = dot / (an[i] * tn[j]);
      cosines.at(i, j) = c;
      out.at(i, j) = logit_scale * c;
    }
  }
  const std::size_t ia = a.id, it = t.id;
  return g.record(
      "cosine_logits", std::move(out), {a, t},
      [ia, it, b, q, d, logit_scale, an = std::move(an), tn = std::move(tn),
       cosines = std::move(cosines)](Graph<T>& gr, std::size_t self) {
        const auto& go = gr.grad_of(self);
        const auto& av = gr.value_of(ia);
        const auto& tv = gr.value_of(it);
        // d cos(x, y) / dx = (y/|y| - cos * x/|x|) / |x|
        if (gr.needs_grad_of(it)) {
          auto& gt = gr.grad_mut(it);
          for (std::size_t j = 0; j < q; ++j) {
            for (std::size_t i = 0; i < b; ++i) {
              const T w = go.at(i, j) * logit_scale / tn[j];
              const T c = cosines.at(i, j);
              for (std::size_t k = 0; k < d; ++k) {
                gt.at(j, k) += w * (av.at(i, k) / an[i] - c * tv.at(j, k) / tn[j]);
              }
            }
          }
        }
        if (gr.needs_grad_of(ia)) {
          auto& ga = gr.grad_mut(ia);
          for (std::size_t i = 0; i < b; ++i) {
            for (std::size_t j = 0; j < q; ++j) {
              const T w = go.at(i, j) * logit_scale / an[i];
              const T c = cosines.at(i, j);
              for (std::size_t k = 0; k < d; ++k) {
                ga.at(i, k) += w * (tv.at(j, k) / tn[j] - c * av.at(i, k) / an[i]);
              }
            }
          }
        }
      });
}

template <typename T>
Var<T> softmax_cross_entropy(Graph<T>& g, Var<T> logits,
                             std::span<const std::size_t> targets) {
  const auto& lv = g.value(logits);
  require_matrix(lv, "softmax_cross_entropy");
  const std::size_t b = lv.dim(0), c = lv.dim(1);
  if (targets.size() != b) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                         " targets for " + std::to_string(b) + " rows");
  }
  if (b == 0 || c == 0) throw DimensionError("softmax_cross_entropy: empty logits");
  Tensor<T> probs(Shape{b, c});
  T total{0};
  for (std::size_t i = 0; i < b; ++i) {
    if (targets[i] >= c) {
      throw ConfigError("softmax_cross_entropy: target " + std::to_string(targets[i]) +
                        " outside [0, " + std::to_string(c) + ")");
    }
    T mx = lv.at(i, 0);
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, lv.at(i, j));
    T denom{0};
    for (std::size_t j = 0; j < c; ++j) {
      probs.at(i, j) = std::exp(lv.at(i, j) - mx);
      denom += probs.at(i, j);
    }
    for (std::size_t j = 0; j < c; ++j) probs.at(i, j) /= denom;
    total += std::log(denom) + mx - lv.at(i, targets[i]);
  }
  const T loss = total / static_cast<T>(b);
  std::vector<std::size_t> tg(targets.begin(), targets.end());
  const std::size_t il = logits.id;
  return g.record("softmax_cross_entropy", Tensor<T>::scalar(loss), {logits},
                  [il, b, c, tg = std::move(tg), probs = std::move(probs)](
                      Graph<T>& gr, std::size_t self) {
                    const T go = gr.grad_of(self)[0] / static_cast<T>(b);
                    auto& gl = gr.grad_mut(il);
                    for (std::size_t i = 0; i < b; ++i) {
                      for (std::size_t j = 0; j < c; ++j) {
                        const T onehot = j == tg[i] ? T(1) : T(0);
                        gl.at(i, j) += go * (probs.at(i, j) - onehot);
                      }
                    }
                  });
}

template <typename T>
Var<T> sigmoid_binary_cross_entropy(Graph<T>& g, Var<T> logits,
                                    const Tensor<T>& targets) {
  const auto& lv = g.value(logits);
  require_same_shape(lv, targets, "sigmoid_binary_cross_entropy");
  if (lv.numel() == 0) throw DimensionError("sigmoid_binary_cross_entropy: empty input");
  T total{0};
  for (std::size_t i = 0; i < lv.numel(); ++i) {
    const T z = lv[i];
    // max(z, 0) - z*y + log(1 + exp(-|z|))
    total += std::max(z, T{0}) - z * targets[i] + std::log1p(std::exp(-std::abs(z)));
  }
  const T count = static_cast<T>(lv.numel());
  const std::size_t il = logits.id;
  return g.record("sigmoid_binary_cross_entropy", Tensor<T>::scalar(total / count), {logits},
                  [il, count, y = targets](Graph<T>& gr, std::size_t self) {
                    const T go = gr.grad_of(self)[0] / count;
                    const auto& lv = gr.value_of(il);
                    auto& gl = gr.grad_mut(il);
                    for (std::size_t i = 0; i < lv.numel(); ++i) {
                      const T z = lv[i];
                      const T s = z >= T{0} ? T(1) / (T(1) + std::exp(-z))
                                            : std::exp(z) / (T(1) + std::exp(z));
                      gl[i] += go * (s - y[i]);
                    }
                  });
}

template <typename T>
double finite_difference_check(const LossFn<T>& loss_fn, const Tensor<T>& params,
                               T step) {
  if (!(step > T{0})) throw ConfigError("finite_difference_check: step must be positive");
  Tensor<T> analytic;
  const T base = loss_fn(params, &analytic);
  if (!std::isfinite(base)) throw NumericError("finite_difference_check: non-finite loss");
  if (analytic.numel() != params.numel()) {
    throw DimensionError("finite_difference_check: gradient has " +
                         std::to_string(analytic.numel()) + " entries for " +
                         std::to_string(params.numel()) + " parameters");
  }
  Tensor<T> probe = params;
  double worst = 0.0;
  for (std::size_t i = 0; i < params.numel(); ++i) {
    const T orig = probe[i];
    probe[i] = orig + step;
    const T up = loss_fn(probe, nullptr);
    probe[i] = orig - step;
    const T down = loss_fn(probe, nullptr);
    probe[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("finite_difference_check: non-finite loss at coordinate " +
                         std::to_string(i));
    }
    const double fd = (static_cast<double>(up) - static_cast<double>(down)) /
                      (2.0 * static_cast<double>(step));
    const double an = static_cast<double>(analytic[i]);
    const double denom = std::max({std::abs(an), std::abs(fd), 1e-12});
    worst = std::max(worst, std::abs(an - fd) / denom);
  }
  return worst;
}

#define NAMELEARN_INSTANTIATE_OPS(T)                                                    \
  template Var<T> add(Graph<T>&, Var<T>, Var<T>);                                       \
  template Var<T> mul(Graph<T>&, Var<T>, Var<T>);                                       \
  template Var<T> scale(Graph<T>&, Var<T>, T);                                          \
  template Var<T> sum(Graph<T>&, Var<T>);                                               \
  template Var<T> add_bias(Graph<T>&, Var<T>, Var<T>);                                  \
  template Var<T> gelu(Graph<T>&, Var<T>);                                              \
  template Var<T> matmul(Graph<T>&, Var<T>, Var<T>);                                    \
  template Var<T> layer_normalize(Graph<T>&, Var<T>, Var<T>, Var<T>, T);                \
  template Var<T> self_attention(Graph<T>&, Var<T>, std::size_t, bool);                 \
  template Var<T> slice_rows(Graph<T>&, Var<T>, std::size_t, std::size_t);              \
  template Var<T> concat_rows(Graph<T>&, std::span<const Var<T>>);                      \
  template Var<T> gather_rows(Graph<T>&, std::span<const Var<T>>,                       \
                              std::span<const RowRef>);                                 \
  template Var<T> cosine_logits(Graph<T>&, Var<T>, Var<T>, T);                          \
  template Var<T> softmax_cross_entropy(Graph<T>&, Var<T>, std::span<const std::size_t>); \
  template Var<T> sigmoid_binary_cross_entropy(Graph<T>&, Var<T>, const Tensor<T>&);    \
  template double finite_difference_check(const LossFn<T>&, const Tensor<T>&, T);

NAMELEARN_INSTANTIATE_OPS(float)
NAMELEARN_INSTANTIATE_OPS(double)

#undef NAMELEARN_INSTANTIATE_OPS

}  // namespace namelearn
