#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pmcm/tensor.hpp"

namespace pmcm {

class Graph;

// Handle to a node recorded on a Graph. Cheap to copy; only valid while the
// owning Graph is alive.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  explicit operator bool() const noexcept { return graph != nullptr; }
};

// Tape of operation records. Nodes are appended in evaluation order, so the
// insertion order is a topological order and backward() walks it in reverse.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t self)>;

  explicit Graph(bool enable_grad = true) : enable_grad_(enable_grad) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool grad_enabled() const noexcept { return enable_grad_; }

  Var constant(Tensor value) { return push(std::move(value), false, {}, "constant"); }

  // Leaf whose gradient is collected. In a no-grad graph this is a constant.
  Var parameter(Tensor value) { return push(std::move(value), enable_grad_, {}, "parameter"); }

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  // Gradient of the last backward() loss w.r.t. v; zeros when v was not reached.
  Tensor grad(Var v) const {
    const Node& n = nodes_[v.id];
    if (n.grad.empty() && !n.value.empty()) return Tensor(n.value.shape());
    return n.grad;
  }

  std::size_t size() const noexcept { return nodes_.size(); }

  void backward(Var loss) {
    if (loss.graph != this) throw std::invalid_argument("backward: loss belongs to another graph");
    Node& root = nodes_[loss.id];
    if (root.value.size() != 1) {
      throw ShapeError("backward: loss must be scalar, got shape " + shape_str(root.value.shape()));
    }
    for (auto& n : nodes_) n.grad = Tensor();
    if (!root.requires_grad) return;
    root.grad = Tensor(root.value.shape(), 1.0);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
      n.backward(*this, i);
    }
  }

  // --- used by op implementations ---

  const Tensor& out_grad(std::size_t id) const { return nodes_[id].grad; }

  // Gradient accumulator for an input, allocated on first use.
  Tensor& grad_slot(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor(n.value.shape());
    return n.grad;
  }

  Var record(Tensor value, std::initializer_list<Var> inputs, const char* op, BackwardFn fn) {
    bool rg = false;
    for (const Var& in : inputs) {
      if (in.graph != this) throw std::invalid_argument(std::string(op) + ": mixed graphs");
      rg = rg || nodes_[in.id].requires_grad;
    }
    return push(std::move(value), rg, rg ? std::move(fn) : BackwardFn{}, op);
  }

  Var record(Tensor value, const std::vector<Var>& inputs, const char* op, BackwardFn fn) {
    bool rg = false;
    for (const Var& in : inputs) {
      if (in.graph != this) throw std::invalid_argument(std::string(op) + ": mixed graphs");
      rg = rg || nodes_[in.id].requires_grad;
    }
    return push(std::move(value), rg, rg ? std::move(fn) : BackwardFn{}, op);
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var push(Tensor value, bool requires_grad, BackwardFn fn, const char* op) {
    if (!value.all_finite()) throw NumericalError(std::string("non-finite value produced by ") + op);
    nodes_.push_back(Node{std::move(value), Tensor(), requires_grad, std::move(fn)});
    return Var{this, nodes_.size() - 1};
  }

  bool enable_grad_;
  std::vector<Node> nodes_;
};

namespace kernels {

// c (m x n) (+)= a (m x k) * b (k x n)
inline void gemm(std::span<const double> a, std::span<const double> b, std::span<double> c,
                 std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  if (!accumulate) std::fill(c.begin(), c.end(), 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c.data() + i * n;
    const double* ai = a.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      const double* bp = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// c (m x n) (+)= a (m x k) * b^T, b is (n x k)
inline void gemm_nt(std::span<const double> a, std::span<const double> b, std::span<double> c,
                    std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a.data() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b.data() + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      double& cij = c[i * n + j];
      cij = accumulate ? cij + s : s;
    }
  }
}

// c (m x n) (+)= a^T * b, a is (k x m), b is (k x n)
inline void gemm_tn(std::span<const double> a, std::span<const double> b, std::span<double> c,
                    std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  if (!accumulate) std::fill(c.begin(), c.end(), 0.0);
  for (std::size_t p = 0; p < k; ++p) {
    const double* ap = a.data() + p * m;
    const double* bp = b.data() + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = ap[i];
      double* ci = c.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

inline void softmax_inplace(std::span<double> row) {
  double hi = -std::numeric_limits<double>::infinity();
  for (double v : row) hi = std::max(hi, v);
  double total = 0.0;
  for (double& v : row) {
    v = std::exp(v - hi);
    total += v;
  }
  for (double& v : row) v /= total;
}

inline double log_sum_exp(std::span<const double> row) {
  double hi = -std::numeric_limits<double>::infinity();
  for (double v : row) hi = std::max(hi, v);
  double total = 0.0;
  for (double v : row) total += std::exp(v - hi);
  return hi + std::log(total);
}

}  // namespace kernels

namespace detail {

inline Graph& graph_of(Var v) {
  if (!v.graph) throw std::invalid_argument("operation on an unbound Var");
  return *v.graph;
}

inline void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

inline void require_vector_len(const Tensor& t, std::size_t n, const char* op) {
  if (t.size() != n) {
    throw ShapeError(std::string(op) + ": vector length " + std::to_string(t.size()) + " != " +
                     std::to_string(n));
  }
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
  Graph& g = detail::graph_of(a);
  const Tensor& av = g.value(a);
  const Tensor& bv = g.value(b);
  detail::require_matrix(av, "matmul");
  detail::require_matrix(bv, "matmul");
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  if (bv.rows() != k) {
    throw ShapeError("matmul: inner dimensions disagree " + shape_str(av.shape()) + " x " +
                     shape_str(bv.shape()));
  }
  Tensor out = Tensor::matrix(m, n);
  kernels::gemm(av.data(), bv.data(), out.data(), m, k, n, false);
  return g.record(std::move(out), {a, b}, "matmul", [a = a.id, b = b.id, m, k, n](Graph& gr, std::size_t self) {
    const Tensor& go = gr.out_grad(self);
    if (gr.requires_grad(a)) kernels::gemm_nt(go.data(), gr.value(b).data(), gr.grad_slot(a).data(), m, n, k, true);
    if (gr.requires_grad(b)) kernels::gemm_tn(gr.value(a).data(), go.data(), gr.grad_slot(b).data(), k, m, n, true);
  });
}

inline Var transpose(Var a) {
  Graph& g = detail::graph_of(a);
  const Tensor& av = g.value(a);
  detail::require_matrix(av, "transpose");
  const std::size_t r = av.rows(), c = av.cols();
  Tensor out = Tensor::matrix(c, r);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.at(j, i) = av.at(i, j);
  return g.record(std::move(out), {a}, "transpose", [a = a.id, r, c](Graph& gr, std::size_t self) {
    const Tensor& go = gr.out_grad(self);
    Tensor& ga = gr.grad_slot(a);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga.at(i, j) += go.at(j, i);
  });
}

inline Var add(Var a, Var b) {
  Graph& g = detail::graph_of(a);
  Tensor out = g.value(a);
  out += g.value(b);
  return g.record(std::move(out), {a, b}, "add", [a = a.id, b = b.id](Graph& gr, std::size_t self) {
    const Tensor& go = gr.out_grad(self);
    if (gr.requires_grad(a)) gr.grad_slot(a) += go;
    if (gr.requires_grad(b)) gr.grad_slot(b) += go;
  });
}

inline Var sub(Var a, Var b) {
  Graph& g = detail::graph_of(a);
  Tensor out = g.value(a);
  out.axpy(-1.0, g.value(b));
  return g.record(std::move(out), {a, b}, "sub", [a = a.id, b = b.id](Graph& gr, std::size_t self) {
    const Tensor& go = gr.out_grad(self);
    if (gr.requires_grad(a)) gr.grad_slot(a) += go;
    if (gr.requires_grad(b)) gr.grad_slot(b).axpy(-1.0, go);
  });
}

inline Var mul(Var a, Var b) {
  Graph& g = detail::graph_of(a);
  const Tensor& av = g.value(a);
  const Tensor& bv = g.value(b);
  av.require_same_shape(bv, "mul");
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return g.record(std::move(out), {a, b}, "mul", [a = a.id, b = b.id](Graph& gr, std::size_t self) {
    const Tensor& go = gr.out_grad(self);
    if (gr.requires_grad(a)) {
      Tensor& ga = gr.grad_slot(a);
      const Tensor& bv = gr.value(b);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i] * bv[i];
    }
    if (gr.requires_grad(b)) {
      Tensor& gb = gr.grad_slot(b);
      const Tensor& av = gr.value(a);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += go[i] * av[i];
    }
  });
}

inline Var scale(Var a, double c) {
  Graph& g = detail::graph_of(a);
  Tensor out = g.value(a);
  for (auto& v : out.values()) v *= c;
  return g.record(std::move(out), {a}, "scale", [a = a.id, c](Graph& gr, std::size_t self) {
    gr.grad_slot(a).axpy(c, gr.out_grad(self));
  });
}

// x (rows x n) + bias (n) broadcast over rows.
inline Var add_row(Var x, Var bias) {
  Graph& g = detail::graph_of(x);
  const Tensor& xv = g.value(x);
  const Tensor& bv = g.value(bias);
  detail::require_matrix(xv, "add_row");
  const std::size_t r = xv.rows(), n = xv.cols();
  detail::require_vector_len(bv, n, "add_row");
  Tensor out = xv;
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) += bv[j];
  return g.record(std::move(out), {x, bias}, "add_row", [x = x.id, b = bias.id, r, n](Graph& gr, std::size_t self) {
    const Tensor& go = gr.out_grad(self);
    if (gr.requires_grad(x)) gr.grad_slot(x) += go;
    if (gr.requires_grad(b)) {
      Tensor& gb = gr.grad_slot(b);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += go.at(i, j);
    }
  });
}

// Exact (erf) GELU.
inline Var gelu(Var x) {
  Graph& g = detail::graph_of(x);
  Tensor out = g.value(x);
  for (auto& v : out.values()) v = 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
  return g.record(std::move(out), {x}, "gelu", [x = x.id](Graph& gr, std::size_t self) {
    const Tensor& go = gr.out_grad(self);
    const Tensor& xv = gr.value(x);
    Tensor& gx = gr.grad_slot(x);
    constexpr double inv_sqrt_2pi = 0.3989422804014327;
    for (std::size_t i = 0; i < gx.size(); ++i) {
      const double v = xv[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      gx[i] += go[i] * (cdf + v * pdf);
    }
  });
}

inline constexpr double kLayerNormEps = 1e-5;

// Per-row normalization over the last axis followed by gain/bias.
inline Var layer_norm(Var x, Var gain, Var bias, double eps = kLayerNormEps) {
  Graph& g = detail::graph_of(x);
  const Tensor& xv = g.value(x);
  const std::size_t r = xv.rows(), n = xv.cols();
  if (n == 0) throw ShapeError("layer_norm: empty rows");
  detail::require_vector_len(g.value(gain), n, "layer_norm gain");
  detail::require_vector_len(g.value(bias), n, "layer_norm bias");
  const Tensor& gv = g.value(gain);
  const Tensor& bv = g.value(bias);
  Tensor normed(xv.shape());
  std::vector<double> rstd(r);
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < r; ++i) {
    const auto row = xv.row(i);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    rstd[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      const double xh = (row[j] - mean) * rstd[i];
      normed.at(i, j) = xh;
      out.at(i, j) = xh * gv[j] + bv[j];
    }
  }
  return g.record(std::move(out), {x, gain, bias}, "layer_norm",
                  [x = x.id, ga = gain.id, b = bias.id, r, n, normed = std::move(normed),
                   rstd = std::move(rstd)](Graph& gr, std::size_t self) {
                    const Tensor& go = gr.out_grad(self);
                    const Tensor& gv = gr.value(ga);
                    if (gr.requires_grad(ga)) {
                      Tensor& gg = gr.grad_slot(ga);
                      for (std::size_t i = 0; i < r; ++i)
                        for (std::size_t j = 0; j < n; ++j) gg[j] += go.at(i, j) * normed.at(i, j);
                    }
                    if (gr.requires_grad(b)) {
                      Tensor& gb = gr.grad_slot(b);
                      for (std::size_t i = 0; i < r; ++i)
                        for (std::size_t j = 0; j < n; ++j) gb[j] += go.at(i, j);
                    }
                    if (gr.requires_grad(x)) {
                      Tensor& gx = gr.grad_slot(x);
                      const double inv_n = 1.0 / static_cast<double>(n);
                      for (std::size_t i = 0; i < r; ++i) {
                        double mean_d = 0.0, mean_dx = 0.0;
                        for (std::size_t j = 0; j < n; ++j) {
                          const double d = go.at(i, j) * gv[j];
                          mean_d += d;
                          mean_dx += d * normed.at(i, j);
                        }
                        mean_d *= inv_n;
                        mean_dx *= inv_n;
                        for (std::size_t j = 0; j < n; ++j) {
                          const double d = go.at(i, j) * gv[j];
                          gx.at(i, j) += rstd[i] * (d - mean_d - normed.at(i, j) * mean_dx);
                        }
                      }
                    }
                  });
}

// Softmax along the last axis (each row independently).
inline Var softmax_rows(Var x) {
  Graph& g = detail::graph_of(x);
  Tensor out = g.value(x);
  const std::size_t r = out.rows();
  for (std::size_t i = 0; i < r; ++i) kernels::softmax_inplace(out.row(i));
  return g.record(std::move(out), {x}, "softmax", [x = x.id, r](Graph& gr, std::size_t self) {
    const Tensor& go = gr.out_grad(self);
    const Tensor& y = gr.value(self);
    Tensor& gx = gr.grad_slot(x);
    const std::size_t n = y.cols();
    for (std::size_t i = 0; i < r; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += go.at(i, j) * y.at(i, j);
      for (std::size_t j = 0; j < n; ++j) gx.at(i, j) += y.at(i, j) * (go.at(i, j) - s);
    }
  });
}

// Mean over rows of -log softmax(logits)[label].
inline Var cross_entropy(Var logits, std::span<const std::size_t> labels) {
  Graph& g = detail::graph_of(logits);
  const Tensor& lv = g.value(logits);
  detail::require_matrix(lv, "cross_entropy");
  const std::size_t b = lv.rows(), c = lv.cols();
  if (labels.size() != b) throw ShapeError("cross_entropy: label count does not match batch");
  if (b == 0) throw ShapeError("cross_entropy: empty batch");
  Tensor probs = lv;
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] >= c) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(labels[i]) + " outside [0," +
                              std::to_string(c) + ")");
    }
    loss += kernels::log_sum_exp(lv.row(i)) - lv.at(i, labels[i]);
    kernels::softmax_inplace(probs.row(i));
  }
  loss /= static_cast<double>(b);
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  return g.record(Tensor::scalar(loss), {logits}, "cross_entropy",
                  [l = logits.id, probs = std::move(probs), lab = std::move(lab), b, c](Graph& gr, std::size_t self) {
                    const double go = gr.out_grad(self)[0] / static_cast<double>(b);
                    Tensor& gl = gr.grad_slot(l);
                    for (std::size_t i = 0; i < b; ++i) {
                      for (std::size_t j = 0; j < c; ++j) gl.at(i, j) += go * probs.at(i, j);
                      gl.at(i, lab[i]) -= go;
                    }
                  });
}

inline Var sum(Var x) {
  Graph& g = detail::graph_of(x);
  double s = 0.0;
  for (double v : g.value(x).data()) s += v;
  return g.record(Tensor::scalar(s), {x}, "sum", [x = x.id](Graph& gr, std::size_t self) {
    const double go = gr.out_grad(self)[0];
    for (auto& v : gr.grad_slot(x).values()) v += go;
  });
}

inline Var mean(Var x) {
  const auto n = static_cast<double>(detail::graph_of(x).value(x).size());
  return scale(sum(x), 1.0 / n);
}

// out[i] = x[index[i]]; repeated indices broadcast, their gradients add up.
inline Var gather_rows(Var x, std::vector<std::size_t> index) {
  Graph& g = detail::graph_of(x);
  const Tensor& xv = g.value(x);
  const std::size_t n = xv.cols();
  const std::size_t src_rows = xv.rows();
  Tensor out = Tensor::matrix(index.size(), n);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= src_rows) throw std::out_of_range("gather_rows: index out of range");
    const auto src = xv.row(index[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return g.record(std::move(out), {x}, "gather_rows", [x = x.id, index = std::move(index), n](Graph& gr, std::size_t self) {
    const Tensor& go = gr.out_grad(self);
    Tensor& gx = gr.grad_slot(x);
    for (std::size_t i = 0; i < index.size(); ++i) {
      double* dst = gx.values().data() + index[i] * n;
      const double* src = go.values().data() + i * n;
      for (std::size_t j = 0; j < n; ++j) dst[j] += src[j];
    }
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: nothing to concatenate");
  Graph& g = detail::graph_of(parts.front());
  const std::size_t n = g.value(parts.front()).cols();
  std::size_t total = 0;
  std::vector<std::size_t> offsets;
  for (const Var& p : parts) {
    const Tensor& v = g.value(p);
    if (v.cols() != n) throw ShapeError("concat_rows: column mismatch");
    offsets.push_back(total);
    total += v.rows();
  }
  Tensor out = Tensor::matrix(total, n);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& v = g.value(parts[k]);
    std::copy(v.values().begin(), v.values().end(), out.values().begin() + static_cast<std::ptrdiff_t>(offsets[k] * n));
  }
  std::vector<std::size_t> ids;
  for (const Var& p : parts) ids.push_back(p.id);
  return g.record(std::move(out), parts, "concat_rows",
                  [ids = std::move(ids), offsets = std::move(offsets), n](Graph& gr, std::size_t self) {
                    const Tensor& go = gr.out_grad(self);
                    for (std::size_t k = 0; k < ids.size(); ++k) {
                      if (!gr.requires_grad(ids[k])) continue;
                      Tensor& gp = gr.grad_slot(ids[k]);
                      const double* src = go.values().data() + offsets[k] * n;
                      for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += src[i];
                    }
                  });
}

// [a | b] along columns; both must have the same row count.
inline Var concat_cols(Var a, Var b) {
  Graph& g = detail::graph_of(a);
  const Tensor& av = g.value(a);
  const Tensor& bv = g.value(b);
  detail::require_matrix(av, "concat_cols");
  detail::require_matrix(bv, "concat_cols");
  const std::size_t r = av.rows(), ca = av.cols(), cb = bv.cols();
  if (bv.rows() != r) throw ShapeError("concat_cols: row mismatch");
  Tensor out = Tensor::matrix(r, ca + cb);
  for (std::size_t i = 0; i < r; ++i) {
    std::copy(av.row(i).begin(), av.row(i).end(), out.row(i).begin());
    std::copy(bv.row(i).begin(), bv.row(i).end(), out.row(i).begin() + static_cast<std::ptrdiff_t>(ca));
  }
  return g.record(std::move(out), {a, b}, "concat_cols", [a = a.id, b = b.id, r, ca, cb](Graph& gr, std::size_t self) {
    const Tensor& go = gr.out_grad(self);
    if (gr.requires_grad(a)) {
      Tensor& ga = gr.grad_slot(a);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < ca; ++j) ga.at(i, j) += go.at(i, j);
    }
    if (gr.requires_grad(b)) {
      Tensor& gb = gr.grad_slot(b);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < cb; ++j) gb.at(i, j) += go.at(i, ca + j);
    }
  });
}

// Each row divided by its L2 norm (with a small floor inside the sqrt).
inline Var l2_normalize_rows(Var x, double eps = 1e-12) {
  Graph& g = detail::graph_of(x);
  Tensor out = g.value(x);
  const std::size_t r = out.rows();
  std::vector<double> norms(r);
  for (std::size_t i = 0; i < r; ++i) {
    auto row = out.row(i);
    norms[i] = std::sqrt(dot(row, row) + eps);
    for (double& v : row) v /= norms[i];
  }
  return g.record(std::move(out), {x}, "l2_normalize", [x = x.id, norms = std::move(norms), r](Graph& gr, std::size_t self) {
    const Tensor& go = gr.out_grad(self);
    const Tensor& y = gr.value(self);
    Tensor& gx = gr.grad_slot(x);
    for (std::size_t i = 0; i < r; ++i) {
      const double yg = dot(y.row(i), go.row(i));
      for (std::size_t j = 0; j < y.cols(); ++j) gx.at(i, j) += (go.at(i, j) - y.at(i, j) * yg) / norms[i];
    }
  });
}

// Multi-head scaled dot-product self-attention over `sequences` stacked
// sequences of `seq_len` rows each. q, k, v are (sequences*seq_len x d), heads
// split the columns. When `segments` is given (one id per position), a
// position only attends to positions carrying the same id.
inline Var multihead_attention(Var q, Var k, Var v, std::size_t sequences, std::size_t seq_len,
                               std::size_t heads, std::vector<int> segments = {}) {
  Graph& g = detail::graph_of(q);
  const Tensor& qv = g.value(q);
  const Tensor& kv = g.value(k);
  const Tensor& vv = g.value(v);
  qv.require_same_shape(kv, "attention q/k");
  qv.require_same_shape(vv, "attention q/v");
  const std::size_t d = qv.cols();
  if (qv.rows() != sequences * seq_len) throw ShapeError("attention: rows != sequences * seq_len");
  if (heads == 0 || d % heads != 0) throw ShapeError("attention: dim not divisible by heads");
  if (!segments.empty() && segments.size() != seq_len) throw ShapeError("attention: segment ids length");
  const std::size_t dh = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t block = seq_len * seq_len;
  std::vector<double> probs(sequences * heads * block);
  Tensor out(qv.shape());
  for (std::size_t s = 0; s < sequences; ++s) {
    const std::size_t base = s * seq_len;
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * dh;
      double* p = probs.data() + (s * heads + h) * block;
      for (std::size_t i = 0; i < seq_len; ++i) {
        const double* qi = qv.values().data() + (base + i) * d + off;
        double* pi = p + i * seq_len;
        double hi = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < seq_len; ++j) {
          if (!segments.empty() && segments[i] != segments[j]) {
            pi[j] = -std::numeric_limits<double>::infinity();
            continue;
          }
          const double* kj = kv.values().data() + (base + j) * d + off;
          double acc = 0.0;
          for (std::size_t c = 0; c < dh; ++c) acc += qi[c] * kj[c];
          pi[j] = acc * sc;
          hi = std::max(hi, pi[j]);
        }
        double total = 0.0;
        for (std::size_t j = 0; j < seq_len; ++j) {
          pi[j] = std::isinf(pi[j]) ? 0.0 : std::exp(pi[j] - hi);
          total += pi[j];
        }
        for (std::size_t j = 0; j < seq_len; ++j) pi[j] /= total;
        double* oi = out.values().data() + (base + i) * d + off;
        for (std::size_t j = 0; j < seq_len; ++j) {
          const double w = pi[j];
          if (w == 0.0) continue;
          const double* vj = vv.values().data() + (base + j) * d + off;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += w * vj[c];
        }
      }
    }
  }
  return g.record(
      std::move(out), {q, k, v}, "attention",
      [q = q.id, k = k.id, v = v.id, sequences, seq_len, heads, d, dh, sc, block,
       probs = std::move(probs)](Graph& gr, std::size_t self) {
        const Tensor& go = gr.out_grad(self);
        const Tensor& qv = gr.value(q);
        const Tensor& kv = gr.value(k);
        const Tensor& vv = gr.value(v);
        const bool need_q = gr.requires_grad(q), need_k = gr.requires_grad(k), need_v = gr.requires_grad(v);
        double* gq = need_q ? gr.grad_slot(q).values().data() : nullptr;
        double* gk = need_k ? gr.grad_slot(k).values().data() : nullptr;
        double* gv = need_v ? gr.grad_slot(v).values().data() : nullptr;
        std::vector<double> dp(seq_len);
        for (std::size_t s = 0; s < sequences; ++s) {
          const std::size_t base = s * seq_len;
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = h * dh;
            const double* p = probs.data() + (s * heads + h) * block;
            for (std::size_t i = 0; i < seq_len; ++i) {
              const double* goi = go.values().data() + (base + i) * d + off;
              const double* pi = p + i * seq_len;
              double row_dot = 0.0;
              for (std::size_t j = 0; j < seq_len; ++j) {
                const double* vj = vv.values().data() + (base + j) * d + off;
                double acc = 0.0;
                for (std::size_t c = 0; c < dh; ++c) acc += goi[c] * vj[c];
                dp[j] = acc;
                row_dot += pi[j] * acc;
                if (gv && pi[j] != 0.0) {
                  double* gvj = gv + (base + j) * d + off;
                  for (std::size_t c = 0; c < dh; ++c) gvj[c] += pi[j] * goi[c];
                }
              }
              const double* qi = qv.values().data() + (base + i) * d + off;
              for (std::size_t j = 0; j < seq_len; ++j) {
                const double ds = pi[j] * (dp[j] - row_dot) * sc;
                if (ds == 0.0) continue;
                const double* kj = kv.values().data() + (base + j) * d + off;
                if (gq) {
                  double* gqi = gq + (base + i) * d + off;
                  for (std::size_t c = 0; c < dh; ++c) gqi[c] += ds * kj[c];
                }
                if (gk) {
                  double* gkj = gk + (base + j) * d + off;
                  for (std::size_t c = 0; c < dh; ++c) gkj[c] += ds * qi[c];
                }
              }
            }
          }
        }
      });
}

// Plain-value softmax used outside graphs (inference-time scoring).
inline std::vector<double> softmax(std::span<const double> x) {
  std::vector<double> out(x.begin(), x.end());
  kernels::softmax_inplace(out);
  return out;
}

}  // namespace pmcm
