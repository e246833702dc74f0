#pragma once

// Tape-based reverse-mode automatic differentiation over dense row-major
// tensors of doubles.
//
// A Graph records every operation in construction order. Model parameters
// live outside the graph as plain Tensors; binding one with Graph::leaf makes
// backward() accumulate into its grad buffer. Values bound with
// Graph::constant (or passed through detach) never receive gradient.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "kduda/errors.hpp"

namespace kduda {

using Shape = std::vector<std::size_t>;

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>{});
}

struct Tensor {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until a backward pass reaches this tensor

  Tensor() = default;

  Tensor(Shape s, std::vector<double> v) : shape(std::move(s)), values(std::move(v)) {
    for (auto extent : shape) {
      if (extent == 0) throw DimensionError("tensor extents must be positive, got " + to_string(shape));
    }
    if (element_count(shape) != values.size()) {
      throw DimensionError("tensor of shape " + to_string(shape) + " cannot hold " +
                           std::to_string(values.size()) + " values");
    }
  }

  static Tensor zeros(Shape s) {
    auto n = element_count(s);
    return Tensor(std::move(s), std::vector<double>(n, 0.0));
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
    return Tensor({rows, cols}, std::move(v));
  }

  std::size_t size() const { return values.size(); }
  std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
  std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }
  bool is_scalar() const { return values.size() == 1; }
  bool has_grad() const { return !grad.empty(); }

  double at(std::size_t r, std::size_t c) const { return values[r * cols() + c]; }
  double& at(std::size_t r, std::size_t c) { return values[r * cols() + c]; }

  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

enum class OpKind {
  Leaf,
  Constant,
  MatMul,
  Relu,
  SoftmaxTemperature,
  Add,
  Subtract,
  Multiply,
  Scale,
  AddScalar,
  Sum,
  Mean,
  Exp,
  Log,
  Square,
  AddBias,
  GatherRows,
  ConcatRows,
  Pick,
  PairwiseSqDist,
};

class Graph;

// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
class Var {
 public:
  Var() = default;
  Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph& graph() const { return *graph_; }
  std::size_t id() const { return id_; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  double item() const;

 private:
  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

class Graph {
 public:
  // Accumulates the adjoint of node `self` into its inputs.
  using Adjoint = std::function<void(Graph&, std::size_t self)>;

  struct Node {
    OpKind op;
    std::vector<std::size_t> inputs;
    Tensor value;
    bool requires_grad = false;
    Tensor* target = nullptr;  // external storage of a leaf
    Adjoint adjoint;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var leaf(Tensor& t) {
    Node n{OpKind::Leaf, {}, Tensor(t.shape, t.values), true, &t, {}};
    return push(std::move(n));
  }

  Var constant(Tensor t) { return push(Node{OpKind::Constant, {}, std::move(t), false, nullptr, {}}); }

  Var record(OpKind op, std::vector<std::size_t> inputs, Tensor value, Adjoint adjoint) {
    for (auto in : inputs) {
      if (in >= nodes_.size()) throw ContractError("operation input created after its consumer");
    }
    bool needs = std::any_of(inputs.begin(), inputs.end(),
                             [&](std::size_t i) { return nodes_[i].requires_grad; });
    return push(Node{op, std::move(inputs), std::move(value), needs, nullptr,
                     needs ? std::move(adjoint) : Adjoint{}});
  }

  const Node& node(std::size_t id) const { return nodes_.at(id); }
  std::size_t size() const { return nodes_.size(); }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  const std::vector<double>& adjoint(std::size_t id) const { return adjoints_[id]; }
  std::vector<double>& adjoint(std::size_t id) { return adjoints_[id]; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  // Populates grad of every reachable leaf with d(loss)/d(leaf). Leaf grads
  // accumulate across calls; internal adjoints are rebuilt each call.
  void backward(Var loss) {
    if (&loss.graph() != this) throw ContractError("backward: loss belongs to a different graph");
    const auto& lv = nodes_[loss.id()].value;
    if (!lv.is_scalar()) throw ContractError("backward: loss must be scalar, got shape " + to_string(lv.shape));

    adjoints_.assign(nodes_.size(), {});
    for (std::size_t i = 0; i <= loss.id(); ++i) {
      if (nodes_[i].requires_grad) adjoints_[i].assign(nodes_[i].value.size(), 0.0);
    }
    if (!nodes_[loss.id()].requires_grad) return;
    adjoints_[loss.id()][0] = 1.0;

    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.requires_grad) continue;
      if (n.adjoint) n.adjoint(*this, i);
      if (n.target) {
        auto& g = n.target->grad;
        if (g.size() != n.value.size()) g.assign(n.value.size(), 0.0);
        const auto& a = adjoints_[i];
        for (std::size_t k = 0; k < a.size(); ++k) g[k] += a[k];
      }
    }
  }

 private:
  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  std::vector<std::vector<double>> adjoints_;
};

inline const Tensor& Var::value() const { return graph_->value(id_); }

inline double Var::item() const {
  const auto& v = value();
  if (!v.is_scalar()) throw ContractError("item() on non-scalar of shape " + to_string(v.shape));
  return v.values[0];
}

inline void backward(Var loss) { loss.graph().backward(loss); }

namespace detail {

inline void require_same_graph(Var a, Var b, const char* op) {
  if (&a.graph() != &b.graph()) throw ContractError(std::string(op) + ": operands from different graphs");
}

inline void require_matrix(Var a, const char* op) {
  if (a.shape().size() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + to_string(a.shape()));
  }
}

inline void require_same_shape(Var a, Var b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
}

// Adds `delta` into the adjoint of `input` when that input carries gradient.
template <typename F>
void accumulate(Graph& g, std::size_t input, F&& per_element) {
  if (!g.requires_grad(input)) return;
  auto& adj = g.adjoint(input);
  for (std::size_t k = 0; k < adj.size(); ++k) adj[k] += per_element(k);
}

// Elementwise unary op with derivative expressed through input x and output y.
template <typename Fwd, typename Deriv>
Var unary(Var x, OpKind kind, Fwd fwd, Deriv deriv) {
  const auto& xv = x.value();
  Tensor out(xv.shape, std::vector<double>(xv.size()));
  for (std::size_t k = 0; k < xv.size(); ++k) out.values[k] = fwd(xv.values[k]);
  auto in = x.id();
  return x.graph().record(kind, {in}, std::move(out), [in, deriv](Graph& g, std::size_t self) {
    const auto& xs = g.value(in).values;
    const auto& ys = g.value(self).values;
    const auto& up = g.adjoint(self);
    accumulate(g, in, [&](std::size_t k) { return up[k] * deriv(xs[k], ys[k]); });
  });
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
  detail::require_same_graph(a, b, "matmul");
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const auto& av = a.value();
  const auto& bv = b.value();
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  if (bv.rows() != k) {
    throw DimensionError("matmul: inner dimensions disagree, " + to_string(av.shape) + " x " +
                         to_string(bv.shape));
  }
  Tensor out = Tensor::zeros({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av.values[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = &bv.values[p * n];
      double* orow = &out.values[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  auto ia = a.id(), ib = b.id();
  return a.graph().record(OpKind::MatMul, {ia, ib}, std::move(out),
                          [ia, ib, m, k, n](Graph& g, std::size_t self) {
    const auto& up = g.adjoint(self);
    if (g.requires_grad(ia)) {
      const auto& bv = g.value(ib).values;
      auto& ga = g.adjoint(ia);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += up[i * n + j] * bv[p * n + j];
          ga[i * k + p] += s;
        }
      }
    }
    if (g.requires_grad(ib)) {
      const auto& av = g.value(ia).values;
      auto& gb = g.adjoint(ib);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = av[i * k + p];
          if (aip == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * up[i * n + j];
        }
      }
    }
  });
}

// Subgradient at exactly zero is 0.
inline Var relu(Var x) {
  return detail::unary(
      x, OpKind::Relu, [](double v) { return v < 0.0 ? 0.0 : v; },  // NaN passes through
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Var exp(Var x) {
  return detail::unary(
      x, OpKind::Exp, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

// Natural log of max(x, floor). Inputs at or below the floor get zero gradient.
inline Var log(Var x, double floor = 0.0) {
  return detail::unary(
      x, OpKind::Log, [floor](double v) { return std::log(std::max(v, floor)); },
      [floor](double v, double) { return v > floor ? 1.0 / v : 0.0; });
}

inline Var square(Var x) {
  return detail::unary(
      x, OpKind::Square, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

inline Var scale(Var x, double factor) {
  return detail::unary(
      x, OpKind::Scale, [factor](double v) { return factor * v; },
      [factor](double, double) { return factor; });
}

inline Var add_scalar(Var x, double c) {
  return detail::unary(
      x, OpKind::AddScalar, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

namespace detail {

template <typename Fwd, typename Da, typename Db>
Var binary(Var a, Var b, OpKind kind, const char* name, Fwd fwd, Da da, Db db) {
  require_same_graph(a, b, name);
  require_same_shape(a, b, name);
  const auto& av = a.value().values;
  const auto& bv = b.value().values;
  Tensor out(a.shape(), std::vector<double>(av.size()));
  for (std::size_t k = 0; k < av.size(); ++k) out.values[k] = fwd(av[k], bv[k]);
  auto ia = a.id(), ib = b.id();
  return a.graph().record(kind, {ia, ib}, std::move(out), [ia, ib, da, db](Graph& g, std::size_t self) {
    const auto& up = g.adjoint(self);
    const auto& x = g.value(ia).values;
    const auto& y = g.value(ib).values;
    accumulate(g, ia, [&](std::size_t k) { return up[k] * da(x[k], y[k]); });
    accumulate(g, ib, [&](std::size_t k) { return up[k] * db(x[k], y[k]); });
  });
}

}  // namespace detail

inline Var add(Var a, Var b) {
  return detail::binary(
      a, b, OpKind::Add, "add", [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

inline Var subtract(Var a, Var b) {
  return detail::binary(
      a, b, OpKind::Subtract, "subtract", [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

inline Var multiply(Var a, Var b) {
  return detail::binary(
      a, b, OpKind::Multiply, "multiply", [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return subtract(a, b); }
inline Var operator*(Var a, Var b) { return multiply(a, b); }
inline Var operator*(double s, Var x) { return scale(x, s); }
inline Var operator*(Var x, double s) { return scale(x, s); }

inline Var sum(Var x) {
  const auto& xv = x.value().values;
  double s = 0.0;
  for (double v : xv) s += v;
  auto in = x.id();
  return x.graph().record(OpKind::Sum, {in}, Tensor::scalar(s), [in](Graph& g, std::size_t self) {
    const double up = g.adjoint(self)[0];
    detail::accumulate(g, in, [up](std::size_t) { return up; });
  });
}

inline Var mean(Var x) {
  const auto& xv = x.value().values;
  const double n = static_cast<double>(xv.size());
  double s = 0.0;
  for (double v : xv) s += v;
  auto in = x.id();
  return x.graph().record(OpKind::Mean, {in}, Tensor::scalar(s / n), [in, n](Graph& g, std::size_t self) {
    const double up = g.adjoint(self)[0] / n;
    detail::accumulate(g, in, [up](std::size_t) { return up; });
  });
}

// x[batch x n] + bias[n], bias broadcast over rows.
inline Var add_bias(Var x, Var bias) {
  detail::require_same_graph(x, bias, "add_bias");
  detail::require_matrix(x, "add_bias");
  const auto& xv = x.value();
  const auto& bv = bias.value();
  const std::size_t rows = xv.rows(), cols = xv.cols();
  if (bv.size() != cols) {
    throw DimensionError("add_bias: bias " + to_string(bv.shape) + " does not match columns of " +
                         to_string(xv.shape));
  }
  Tensor out(xv.shape, xv.values);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out.values[r * cols + c] += bv.values[c];
  auto ix = x.id(), ib = bias.id();
  return x.graph().record(OpKind::AddBias, {ix, ib}, std::move(out),
                          [ix, ib, rows, cols](Graph& g, std::size_t self) {
    const auto& up = g.adjoint(self);
    detail::accumulate(g, ix, [&](std::size_t k) { return up[k]; });
    if (g.requires_grad(ib)) {
      auto& gb = g.adjoint(ib);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) gb[c] += up[r * cols + c];
    }
  });
}

// Row-wise softmax of logits / tau, computed with per-row max subtraction.
inline Var softmax_temperature(Var logits, double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) {
    throw ParameterError("softmax_temperature: tau must be positive and finite, got " + std::to_string(tau));
  }
  detail::require_matrix(logits, "softmax_temperature");
  const auto& lv = logits.value();
  const std::size_t rows = lv.rows(), cols = lv.cols();
  Tensor out(lv.shape, std::vector<double>(lv.size()));
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = &lv.values[r * cols];
    double* o = &out.values[r * cols];
    const double mx = *std::max_element(in, in + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      o[c] = std::exp((in[c] - mx) / tau);
      z += o[c];
    }
    for (std::size_t c = 0; c < cols; ++c) o[c] /= z;
  }
  auto in = logits.id();
  return logits.graph().record(OpKind::SoftmaxTemperature, {in}, std::move(out),
                               [in, tau, rows, cols](Graph& g, std::size_t self) {
    if (!g.requires_grad(in)) return;
    const auto& y = g.value(self).values;
    const auto& up = g.adjoint(self);
    auto& gx = g.adjoint(in);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += up[r * cols + c] * y[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c) {
        const auto k = r * cols + c;
        gx[k] += y[k] * (up[k] - dot) / tau;
      }
    }
  });
}

// Selects rows of x by index; indices may repeat.
inline Var gather_rows(Var x, std::span<const std::size_t> indices) {
  detail::require_matrix(x, "gather_rows");
  const auto& xv = x.value();
  const std::size_t cols = xv.cols();
  if (indices.empty()) throw ParameterError("gather_rows: empty index list");
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  Tensor out = Tensor::zeros({idx.size(), cols});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= xv.rows()) {
      throw ParameterError("gather_rows: index " + std::to_string(idx[r]) + " out of range for " +
                           to_string(xv.shape));
    }
    std::copy_n(&xv.values[idx[r] * cols], cols, &out.values[r * cols]);
  }
  auto in = x.id();
  return x.graph().record(OpKind::GatherRows, {in}, std::move(out),
                          [in, idx = std::move(idx), cols](Graph& g, std::size_t self) {
    if (!g.requires_grad(in)) return;
    const auto& up = g.adjoint(self);
    auto& gx = g.adjoint(in);
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t c = 0; c < cols; ++c) gx[idx[r] * cols + c] += up[r * cols + c];
  });
}

// Stacks a on top of b.
inline Var concat_rows(Var a, Var b) {
  detail::require_same_graph(a, b, "concat_rows");
  detail::require_matrix(a, "concat_rows");
  detail::require_matrix(b, "concat_rows");
  if (a.cols() != b.cols()) {
    throw DimensionError("concat_rows: column mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  const auto& av = a.value().values;
  const auto& bv = b.value().values;
  std::vector<double> v(av);
  v.insert(v.end(), bv.begin(), bv.end());
  const std::size_t na = av.size();
  auto ia = a.id(), ib = b.id();
  return a.graph().record(OpKind::ConcatRows, {ia, ib}, Tensor({a.rows() + b.rows(), a.cols()}, std::move(v)),
                          [ia, ib, na](Graph& g, std::size_t self) {
    const auto& up = g.adjoint(self);
    detail::accumulate(g, ia, [&](std::size_t k) { return up[k]; });
    detail::accumulate(g, ib, [&](std::size_t k) { return up[na + k]; });
  });
}

// Picks x[r, columns[r]] for each row, giving a [rows] vector.
inline Var pick(Var x, std::span<const std::size_t> columns) {
  detail::require_matrix(x, "pick");
  const auto& xv = x.value();
  const std::size_t rows = xv.rows(), cols = xv.cols();
  if (columns.size() != rows) {
    throw DimensionError("pick: " + std::to_string(columns.size()) + " indices for " + to_string(xv.shape));
  }
  std::vector<std::size_t> idx(columns.begin(), columns.end());
  Tensor out = Tensor::zeros({rows});
  for (std::size_t r = 0; r < rows; ++r) {
    if (idx[r] >= cols) {
      throw ParameterError("pick: column " + std::to_string(idx[r]) + " out of range for " + to_string(xv.shape));
    }
    out.values[r] = xv.values[r * cols + idx[r]];
  }
  auto in = x.id();
  return x.graph().record(OpKind::Pick, {in}, std::move(out),
                          [in, idx = std::move(idx), cols](Graph& g, std::size_t self) {
    if (!g.requires_grad(in)) return;
    const auto& up = g.adjoint(self);
    auto& gx = g.adjoint(in);
    for (std::size_t r = 0; r < idx.size(); ++r) gx[r * cols + idx[r]] += up[r];
  });
}

// D[i,j] = ||a_i - b_j||^2 for a[n x d], b[m x d].
inline Var pairwise_sq_dist(Var a, Var b) {
  detail::require_same_graph(a, b, "pairwise_sq_dist");
  detail::require_matrix(a, "pairwise_sq_dist");
  detail::require_matrix(b, "pairwise_sq_dist");
  if (a.cols() != b.cols()) {
    throw DimensionError("pairwise_sq_dist: feature dimension mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
  const auto& av = a.value().values;
  const auto& bv = b.value().values;
  const std::size_t n = a.rows(), m = b.rows(), d = a.cols();
  Tensor out = Tensor::zeros({n, m});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = av[i * d + k] - bv[j * d + k];
        s += diff * diff;
      }
      out.values[i * m + j] = s;
    }
  }
  auto ia = a.id(), ib = b.id();
  return a.graph().record(OpKind::PairwiseSqDist, {ia, ib}, std::move(out),
                          [ia, ib, n, m, d](Graph& g, std::size_t self) {
    const auto& up = g.adjoint(self);
    const auto& av = g.value(ia).values;
    const auto& bv = g.value(ib).values;
    const bool need_a = g.requires_grad(ia), need_b = g.requires_grad(ib);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < m; ++j) {
        const double w = 2.0 * up[i * m + j];
        if (w == 0.0) continue;
        for (std::size_t k = 0; k < d; ++k) {
          const double diff = w * (av[i * d + k] - bv[j * d + k]);
          if (need_a) g.adjoint(ia)[i * d + k] += diff;
          if (need_b) g.adjoint(ib)[j * d + k] -= diff;
        }
      }
    }
  });
}

// Same value, no gradient flows back through it.
inline Var detach(Var x) { return x.graph().constant(x.value()); }

}  // namespace kduda
