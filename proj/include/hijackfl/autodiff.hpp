#pragma once

// Tape-based reverse-mode automatic differentiation over dense double tensors.
//
// A Graph owns every tensor produced while it is alive. Operations append a
// node holding the output value and a closure that scatters the node's
// gradient into its inputs. Nodes are appended after their inputs, so the
// tape is always in topological order and backward() is a single reverse
// sweep.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hijackfl/errors.hpp"
#include "hijackfl/tensor.hpp"

namespace hijackfl::autodiff {

class Graph;

/// Handle to a tensor recorded on a Graph.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;
};

class Graph {
 public:
  using Backprop = std::function<void(Graph&, std::size_t self)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Records a leaf. Gradients are tracked iff `t.requires_grad`.
  Var leaf(Tensor t) {
    const bool tracked = t.requires_grad;
    return push(std::move(t), tracked, {});
  }
  Var constant(Tensor t) {
    t.requires_grad = false;
    return push(std::move(t), false, {});
  }
  Var parameter(Tensor t) {
    t.requires_grad = true;
    return push(std::move(t), true, {});
  }

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  bool tracked(Var v) const { return nodes_.at(v.id).tracked; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient of the last backward() loss w.r.t. `v`; zeros when `v` was
  /// unreachable from the loss.
  std::vector<double> grad(Var v) const {
    const auto& n = nodes_.at(v.id);
    if (n.grad.empty()) return std::vector<double>(n.value.size(), 0.0);
    return n.grad;
  }

  /// Copy of the recorded tensor with its `grad` field populated.
  Tensor tensor_with_grad(Var v) const {
    Tensor t = value(v);
    if (t.requires_grad) t.grad = grad(v);
    return t;
  }

  /// Number of operation closures executed by the last backward().
  std::size_t last_backward_visits() const { return visits_; }

  void backward(Var loss) {
    if (loss.graph != this) throw InvalidArgument("loss belongs to another graph");
    auto& root = nodes_.at(loss.id);
    if (root.value.size() != 1) {
      throw DimensionError("backward() needs a scalar loss, got shape " +
                           shape_string(root.value.shape));
    }
    for (auto& n : nodes_) n.grad.clear();
    visits_ = 0;
    if (!root.tracked) return;
    root.grad.assign(1, 1.0);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.tracked || n.grad.empty() || !n.backprop) continue;
      n.backprop(*this, i);
      ++visits_;
    }
  }

  // ---- used by operation implementations ----

  Var record(Tensor out, std::vector<std::size_t> inputs, Backprop backprop) {
    bool tracked = false;
    for (auto in : inputs) tracked = tracked || nodes_.at(in).tracked;
    out.requires_grad = tracked;
    return push(std::move(out), tracked, tracked ? std::move(backprop) : Backprop{});
  }

  const std::vector<double>& node_grad(std::size_t id) const { return nodes_[id].grad; }

  /// Gradient accumulator of an input, or nullptr if it is not tracked.
  std::vector<double>* sink(std::size_t id) {
    auto& n = nodes_[id];
    if (!n.tracked) return nullptr;
    if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
    return &n.grad;
  }

 private:
  struct Node {
    Tensor value;
    bool tracked = false;
    Backprop backprop;
    std::vector<double> grad;
  };

  Var push(Tensor t, bool tracked, Backprop bp) {
    if (!t.all_finite()) {
      // Inputs must be finite; a non-finite output from finite inputs is a bug.
      throw InvalidArgument("non-finite value entering graph node " +
                            std::to_string(nodes_.size()));
    }
    nodes_.push_back(Node{std::move(t), tracked, std::move(bp), {}});
    return Var{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  std::size_t visits_ = 0;
};

namespace detail {

inline Graph& graph_of(Var a) {
  if (a.graph == nullptr) throw InvalidArgument("unbound Var");
  return *a.graph;
}

inline Graph& graph_of(Var a, Var b) {
  if (a.graph != b.graph) throw InvalidArgument("operands live on different graphs");
  return graph_of(a);
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape != b.shape) {
    throw DimensionError(std::string(op) + ": shape " + shape_string(a.shape) +
                         " vs " + shape_string(b.shape));
  }
}

inline void require_matrix(const Tensor& a, const char* op, const char* name) {
  if (a.rank() != 2) {
    throw DimensionError(std::string(op) + ": " + name + " must be a matrix, got " +
                         shape_string(a.shape));
  }
}

template <class F>
Var unary(Var a, F&& f, std::function<double(double x, double y)> dfdx) {
  Graph& g = graph_of(a);
  const Tensor& in = g.value(a);
  Tensor out(in.shape, std::vector<double>(in.size()));
  for (std::size_t i = 0; i < in.size(); ++i) out.values[i] = f(in.values[i]);
  const auto ia = a.id;
  return g.record(std::move(out), {ia}, [ia, dfdx](Graph& gr, std::size_t self) {
    const auto& up = gr.node_grad(self);
    const auto& x = gr.value(Var{&gr, ia}).values;
    const auto& y = gr.value(Var{&gr, self}).values;
    if (auto* s = gr.sink(ia))
      for (std::size_t i = 0; i < up.size(); ++i) (*s)[i] += up[i] * dfdx(x[i], y[i]);
  });
}

}  // namespace detail

/// output[b][j] = sum_i input[b][i] * weight[i][j] + bias[j].
inline Var affine(Var input, Var weight, Var bias) {
  Graph& g = detail::graph_of(input, weight);
  detail::graph_of(input, bias);
  const Tensor& x = g.value(input);
  const Tensor& w = g.value(weight);
  const Tensor& b = g.value(bias);
  detail::require_matrix(x, "affine", "input");
  detail::require_matrix(w, "affine", "weight");
  const std::size_t batch = x.shape[0], in = x.shape[1], out_dim = w.shape[1];
  if (w.shape[0] != in || b.rank() != 1 || b.shape[0] != out_dim) {
    throw DimensionError("affine: input " + shape_string(x.shape) + ", weight " +
                         shape_string(w.shape) + ", bias " + shape_string(b.shape));
  }
  Tensor out({batch, out_dim}, std::vector<double>(batch * out_dim));
  for (std::size_t r = 0; r < batch; ++r) {
    double* o = out.values.data() + r * out_dim;
    std::copy(b.values.begin(), b.values.end(), o);
    const double* xr = x.values.data() + r * in;
    for (std::size_t i = 0; i < in; ++i) {
      const double xv = xr[i];
      if (xv == 0.0) continue;
      const double* wr = w.values.data() + i * out_dim;
      for (std::size_t j = 0; j < out_dim; ++j) o[j] += xv * wr[j];
    }
  }
  const auto ix = input.id, iw = weight.id, ib = bias.id;
  return g.record(std::move(out), {ix, iw, ib},
                  [ix, iw, ib, batch, in, out_dim](Graph& gr, std::size_t self) {
    const auto& up = gr.node_grad(self);
    const auto& xv = gr.value(Var{&gr, ix}).values;
    const auto& wv = gr.value(Var{&gr, iw}).values;
    if (auto* dx = gr.sink(ix)) {
      // dx = up * w^T, accumulated over j with a transposed copy of w so the
      // inner loop is contiguous.
      std::vector<double> wt(in * out_dim);
      for (std::size_t i = 0; i < in; ++i)
        for (std::size_t j = 0; j < out_dim; ++j) wt[j * in + i] = wv[i * out_dim + j];
      for (std::size_t r = 0; r < batch; ++r) {
        const double* u = up.data() + r * out_dim;
        double* d = dx->data() + r * in;
        for (std::size_t j = 0; j < out_dim; ++j) {
          const double uj = u[j];
          if (uj == 0.0) continue;
          const double* wr = wt.data() + j * in;
          for (std::size_t i = 0; i < in; ++i) d[i] += uj * wr[i];
        }
      }
    }
    if (auto* dw = gr.sink(iw)) {
      for (std::size_t r = 0; r < batch; ++r) {
        const double* u = up.data() + r * out_dim;
        for (std::size_t i = 0; i < in; ++i) {
          const double xval = xv[r * in + i];
          if (xval == 0.0) continue;
          double* d = dw->data() + i * out_dim;
          for (std::size_t j = 0; j < out_dim; ++j) d[j] += xval * u[j];
        }
      }
    }
    if (auto* db = gr.sink(ib)) {
      for (std::size_t r = 0; r < batch; ++r)
        for (std::size_t j = 0; j < out_dim; ++j) (*db)[j] += up[r * out_dim + j];
    }
  });
}

/// Elementwise max(0, x); the subgradient at 0 is 0.
inline Var relu(Var a) {
  return detail::unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline double sigmoid_value(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Var sigmoid(Var a) {
  return detail::unary(
      a, [](double x) { return sigmoid_value(x); },
      [](double, double y) { return y * (1.0 - y); });
}

inline Var square(Var a) {
  return detail::unary(
      a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

inline Var scale(Var a, double c) {
  return detail::unary(
      a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Var add_scalar(Var a, double c) {
  return detail::unary(
      a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

inline Var add(Var a, Var b) {
  Graph& g = detail::graph_of(a, b);
  const Tensor& x = g.value(a);
  const Tensor& y = g.value(b);
  detail::require_same_shape(x, y, "add");
  Tensor out(x.shape, std::vector<double>(x.size()));
  for (std::size_t i = 0; i < x.size(); ++i) out.values[i] = x.values[i] + y.values[i];
  const auto ia = a.id, ib = b.id;
  return g.record(std::move(out), {ia, ib}, [ia, ib](Graph& gr, std::size_t self) {
    const auto& up = gr.node_grad(self);
    for (auto id : {ia, ib})
      if (auto* s = gr.sink(id))
        for (std::size_t i = 0; i < up.size(); ++i) (*s)[i] += up[i];
  });
}

inline Var mul(Var a, Var b) {
  Graph& g = detail::graph_of(a, b);
  const Tensor& x = g.value(a);
  const Tensor& y = g.value(b);
  detail::require_same_shape(x, y, "mul");
  Tensor out(x.shape, std::vector<double>(x.size()));
  for (std::size_t i = 0; i < x.size(); ++i) out.values[i] = x.values[i] * y.values[i];
  const auto ia = a.id, ib = b.id;
  return g.record(std::move(out), {ia, ib}, [ia, ib](Graph& gr, std::size_t self) {
    const auto& up = gr.node_grad(self);
    const auto& xv = gr.value(Var{&gr, ia}).values;
    const auto& yv = gr.value(Var{&gr, ib}).values;
    if (auto* s = gr.sink(ia))
      for (std::size_t i = 0; i < up.size(); ++i) (*s)[i] += up[i] * yv[i];
    if (auto* s = gr.sink(ib))
      for (std::size_t i = 0; i < up.size(); ++i) (*s)[i] += up[i] * xv[i];
  });
}

/// out[b][i] = matrix[b][i] + row[i]; broadcasts a vector over every row.
inline Var add_row_vector(Var matrix, Var row) {
  Graph& g = detail::graph_of(matrix, row);
  const Tensor& m = g.value(matrix);
  const Tensor& v = g.value(row);
  detail::require_matrix(m, "add_row_vector", "matrix");
  if (v.size() != m.shape[1]) {
    throw DimensionError("add_row_vector: matrix " + shape_string(m.shape) +
                         " vs row " + shape_string(v.shape));
  }
  const std::size_t rows = m.shape[0], cols = m.shape[1];
  Tensor out(m.shape, std::vector<double>(m.size()));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      out.values[r * cols + c] = m.values[r * cols + c] + v.values[c];
  const auto im = matrix.id, iv = row.id;
  return g.record(std::move(out), {im, iv}, [im, iv, rows, cols](Graph& gr, std::size_t self) {
    const auto& up = gr.node_grad(self);
    if (auto* s = gr.sink(im))
      for (std::size_t i = 0; i < up.size(); ++i) (*s)[i] += up[i];
    if (auto* s = gr.sink(iv))
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) (*s)[c] += up[r * cols + c];
  });
}

inline Var sum(Var a) {
  Graph& g = detail::graph_of(a);
  const Tensor& x = g.value(a);
  double acc = 0.0;
  for (double v : x.values) acc += v;
  const auto ia = a.id;
  return g.record(Tensor::scalar(acc), {ia}, [ia](Graph& gr, std::size_t self) {
    const double up = gr.node_grad(self)[0];
    if (auto* s = gr.sink(ia))
      for (auto& d : *s) d += up;
  });
}

inline Var mean(Var a) {
  const double n = static_cast<double>(detail::graph_of(a).value(a).size());
  return scale(sum(a), 1.0 / n);
}

/// Mean over the batch of -log softmax(logits)[target], max-subtracted.
inline Var softmax_cross_entropy(Var logits, std::span<const std::size_t> targets) {
  Graph& g = detail::graph_of(logits);
  const Tensor& z = g.value(logits);
  detail::require_matrix(z, "softmax_cross_entropy", "logits");
  const std::size_t batch = z.shape[0], classes = z.shape[1];
  if (targets.size() != batch) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                         " targets for batch of " + std::to_string(batch));
  }
  std::vector<double> probs(z.size());
  double loss = 0.0;
  for (std::size_t r = 0; r < batch; ++r) {
    if (targets[r] >= classes) {
      throw InvalidArgument("softmax_cross_entropy: target " + std::to_string(targets[r]) +
                            " outside [0, " + std::to_string(classes) + ")");
    }
    const double* row = z.values.data() + r * classes;
    const double mx = *std::max_element(row, row + classes);
    double denom = 0.0;
    for (std::size_t c = 0; c < classes; ++c) denom += std::exp(row[c] - mx);
    const double log_denom = std::log(denom);
    for (std::size_t c = 0; c < classes; ++c)
      probs[r * classes + c] = std::exp(row[c] - mx - log_denom);
    loss -= row[targets[r]] - mx - log_denom;
  }
  loss /= static_cast<double>(batch);
  const auto il = logits.id;
  std::vector<std::size_t> tgt(targets.begin(), targets.end());
  return g.record(Tensor::scalar(loss), {il},
                  [il, batch, classes, probs = std::move(probs), tgt = std::move(tgt)](
                      Graph& gr, std::size_t self) {
    const double up = gr.node_grad(self)[0] / static_cast<double>(batch);
    if (auto* s = gr.sink(il)) {
      for (std::size_t r = 0; r < batch; ++r)
        for (std::size_t c = 0; c < classes; ++c) {
          const double onehot = c == tgt[r] ? 1.0 : 0.0;
          (*s)[r * classes + c] += up * (probs[r * classes + c] - onehot);
        }
    }
  });
}

/// Mean of squared elementwise differences.
inline Var l2_distance(Var a, Var b) {
  Graph& g = detail::graph_of(a, b);
  const Tensor& x = g.value(a);
  const Tensor& y = g.value(b);
  detail::require_same_shape(x, y, "l2_distance");
  const double n = static_cast<double>(x.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x.values[i] - y.values[i];
    acc += d * d;
  }
  const auto ia = a.id, ib = b.id;
  return g.record(Tensor::scalar(acc / n), {ia, ib}, [ia, ib, n](Graph& gr, std::size_t self) {
    const double up = gr.node_grad(self)[0];
    const auto& xv = gr.value(Var{&gr, ia}).values;
    const auto& yv = gr.value(Var{&gr, ib}).values;
    const double k = 2.0 * up / n;
    if (auto* s = gr.sink(ia))
      for (std::size_t i = 0; i < xv.size(); ++i) (*s)[i] += k * (xv[i] - yv[i]);
    if (auto* s = gr.sink(ib))
      for (std::size_t i = 0; i < xv.size(); ++i) (*s)[i] -= k * (xv[i] - yv[i]);
  });
}

/// Plain-value helper: mean squared difference without a graph.
inline double l2_distance_value(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("l2_distance: size mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  return acc / static_cast<double>(a.size());
}

}  // namespace hijackfl::autodiff
