#pragma once

// Central finite-difference oracle for reverse-mode gradients. Lives in test
// code only and evaluates losses through fresh graphs with constant inputs.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "kduda/autodiff.hpp"

namespace kduda::testing {

// Builds a scalar loss. When `trainable` is false every parameter must enter
// the graph as a constant.
using LossFn = std::function<Var(Graph&, bool trainable)>;

inline Var bind_param(Graph& g, Tensor& t, bool trainable) { return trainable ? g.leaf(t) : g.constant(t); }

struct GradCheckResult {
  double max_rel_error = 0.0;  // normwise, worst parameter tensor
  std::vector<std::vector<double>> analytic;
  std::vector<std::vector<double>> numeric;
};

inline double eval_loss(const LossFn& fn) {
  Graph g;
  return fn(g, false).item();
}

inline GradCheckResult gradient_check(const std::vector<Tensor*>& params, const LossFn& fn, double h = 1e-5) {
  GradCheckResult r;
  for (auto* p : params) p->grad.clear();
  {
    Graph g;
    Var loss = fn(g, true);
    g.backward(loss);
  }
  for (auto* p : params) {
    r.analytic.push_back(p->grad.empty() ? std::vector<double>(p->size(), 0.0) : p->grad);
    p->grad.clear();
  }
  for (auto* p : params) {
    std::vector<double> num(p->size());
    for (std::size_t k = 0; k < p->size(); ++k) {
      const double orig = p->values[k];
      p->values[k] = orig + h;
      const double fp = eval_loss(fn);
      p->values[k] = orig - h;
      const double fm = eval_loss(fn);
      p->values[k] = orig;
      num[k] = (fp - fm) / (2.0 * h);
    }
    r.numeric.push_back(std::move(num));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    double diff = 0.0, na = 0.0, nn = 0.0;
    for (std::size_t k = 0; k < r.analytic[i].size(); ++k) {
      diff += std::pow(r.analytic[i][k] - r.numeric[i][k], 2);
      na += r.analytic[i][k] * r.analytic[i][k];
      nn += r.numeric[i][k] * r.numeric[i][k];
    }
    const double denom = std::max({std::sqrt(na), std::sqrt(nn), 1e-8});
    r.max_rel_error = std::max(r.max_rel_error, std::sqrt(diff) / denom);
  }
  return r;
}

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.values) v = u(rng);
  return t;
}

// Row-stochastic matrix with entries bounded away from zero.
inline Tensor random_stochastic(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  Tensor t = random_tensor({rows, cols}, rng, 0.05, 1.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += t.at(r, c);
    for (std::size_t c = 0; c < cols; ++c) t.at(r, c) /= s;
  }
  return t;
}

}  // namespace kduda::testing
