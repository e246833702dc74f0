#pragma once

// Feedforward ReLU classifiers split into a feature extractor and a linear
// logit head, plus parameter/MAC accounting and a plain-text model format.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <random>
#include <string>
#include <system_error>
#include <vector>

#include "kduda/autodiff.hpp"

namespace kduda {

struct ModelSpec {
  std::size_t input_dim = 2;
  std::vector<std::size_t> hidden_widths{32, 16};
  std::size_t num_classes = 2;
  std::uint64_t seed = 0;

  void validate() const {
    if (input_dim == 0) throw ParameterError("model spec: input_dim must be positive");
    if (hidden_widths.empty()) throw ParameterError("model spec: at least one hidden layer is required");
    for (auto w : hidden_widths) {
      if (w == 0) throw ParameterError("model spec: hidden widths must be positive");
    }
    if (num_classes < 2) throw ParameterError("model spec: num_classes must be at least 2");
  }

  // (fan_in, fan_out) of every linear layer, head last.
  std::vector<std::pair<std::size_t, std::size_t>> layer_dims() const {
    std::vector<std::pair<std::size_t, std::size_t>> dims;
    std::size_t in = input_dim;
    for (auto w : hidden_widths) {
      dims.emplace_back(in, w);
      in = w;
    }
    dims.emplace_back(in, num_classes);
    return dims;
  }
};

struct Complexity {
  std::uint64_t params = 0;
  std::uint64_t macs_per_sample = 0;
};

inline Complexity count_complexity(const ModelSpec& spec) {
  Complexity c;
  for (auto [fan_in, fan_out] : spec.layer_dims()) {
    c.params += fan_in * fan_out + fan_out;
    c.macs_per_sample += fan_in * fan_out;
  }
  return c;
}

struct Model {
  ModelSpec spec;
  std::vector<Tensor> weights;  // [fan_in x fan_out]
  std::vector<Tensor> biases;   // [fan_out]

  // Layers [0, feature_cut()) form the feature extractor; the rest is the head.
  std::size_t feature_cut() const { return spec.hidden_widths.size(); }
  std::size_t num_layers() const { return weights.size(); }

  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> ps;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      ps.push_back(&weights[l]);
      ps.push_back(&biases[l]);
    }
    return ps;
  }

  void zero_grad() {
    for (auto* p : parameters()) p->grad.clear();
  }
};

// Glorot-uniform weights, zero biases; deterministic in spec.seed.
inline Model build(const ModelSpec& spec) {
  spec.validate();
  Model m{spec, {}, {}};
  std::mt19937_64 rng(spec.seed);
  for (auto [fan_in, fan_out] : spec.layer_dims()) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    Tensor w = Tensor::zeros({fan_in, fan_out});
    for (auto& v : w.values) v = dist(rng);
    m.weights.push_back(std::move(w));
    m.biases.push_back(Tensor::zeros({fan_out}));
  }
  return m;
}

enum class Binding { Trainable, Frozen };

// A model's parameters placed into one graph.
struct BoundModel {
  const Model* model = nullptr;
  std::vector<Var> weights;
  std::vector<Var> biases;
};

// Parameters enter as constants; no gradient reaches the model.
inline BoundModel bind_frozen(Graph& g, const Model& model) {
  BoundModel b{&model, {}, {}};
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    b.weights.push_back(g.constant(model.weights[l]));
    b.biases.push_back(g.constant(model.biases[l]));
  }
  return b;
}

inline BoundModel bind(Graph& g, Model& model, Binding mode) {
  if (mode == Binding::Frozen) return bind_frozen(g, model);
  BoundModel b{&model, {}, {}};
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    b.weights.push_back(g.leaf(model.weights[l]));
    b.biases.push_back(g.leaf(model.biases[l]));
  }
  return b;
}

inline Var features(const BoundModel& m, Var x) {
  if (x.shape().size() != 2 || x.cols() != m.model->spec.input_dim) {
    throw DimensionError("features: input " + to_string(x.shape()) + " does not match input_dim " +
                         std::to_string(m.model->spec.input_dim));
  }
  Var h = x;
  for (std::size_t l = 0; l < m.model->feature_cut(); ++l) h = relu(add_bias(matmul(h, m.weights[l]), m.biases[l]));
  return h;
}

inline Var head(const BoundModel& m, Var feats) {
  const auto last = m.model->num_layers() - 1;
  return add_bias(matmul(feats, m.weights[last]), m.biases[last]);
}

inline Var logits(const BoundModel& m, Var x) { return head(m, features(m, x)); }

struct ForwardPass {
  Var features;
  Var logits;
};

// Logits share every node of the feature computation.
inline ForwardPass forward(const BoundModel& m, Var x) {
  Var f = features(m, x);
  return {f, head(m, f)};
}

// Graph-free inference helper.
inline Tensor predict_logits(const Model& model, const Tensor& x) {
  Graph g;
  auto b = bind_frozen(g, model);
  return logits(b, g.constant(x)).value();
}

inline Complexity count_complexity(const Model& model) { return count_complexity(model.spec); }

namespace detail {

inline void write_double(std::ostream& os, double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  os.write(buf, res.ptr - buf);
}

inline double parse_double(const std::string& token) {
  double v = 0.0;
  auto res = std::from_chars(token.data(), token.data() + token.size(), v);
  if (res.ec != std::errc{} || res.ptr != token.data() + token.size()) {
    throw ParameterError("model file: bad number '" + token + "'");
  }
  return v;
}

inline void write_tensor(std::ostream& os, const char* tag, const Tensor& t) {
  os << tag;
  for (auto e : t.shape) os << ' ' << e;
  os << '\n';
  for (std::size_t k = 0; k < t.size(); ++k) {
    if (k) os << ' ';
    write_double(os, t.values[k]);
  }
  os << '\n';
}

inline Tensor read_tensor(std::istream& is, const std::string& tag, Shape expected) {
  std::string word;
  if (!(is >> word) || word != tag) throw ParameterError("model file: expected '" + tag + "'");
  Shape shape(expected.size());
  for (auto& e : shape) is >> e;
  if (!is || shape != expected) {
    throw DimensionError("model file: " + tag + " shape " + to_string(shape) + " expected " + to_string(expected));
  }
  std::vector<double> values(element_count(shape));
  for (auto& v : values) {
    if (!(is >> word)) throw ParameterError("model file: truncated " + tag + " values");
    v = parse_double(word);
  }
  return Tensor(std::move(shape), std::move(values));
}

}  // namespace detail

inline constexpr const char* kModelHeader = "kduda-model v1";

// Shortest round-trip decimal, so load(save(m)) is value-exact.
inline void save_model(std::ostream& os, const Model& m) {
  os << kModelHeader << '\n';
  os << "spec " << m.spec.input_dim << ' ' << m.spec.num_classes << ' ' << m.spec.seed << ' '
     << m.spec.hidden_widths.size();
  for (auto w : m.spec.hidden_widths) os << ' ' << w;
  os << '\n';
  for (std::size_t l = 0; l < m.num_layers(); ++l) {
    detail::write_tensor(os, "weight", m.weights[l]);
    detail::write_tensor(os, "bias", m.biases[l]);
  }
}

inline Model load_model(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != kModelHeader) throw ParameterError("model file: missing header");
  std::string word;
  ModelSpec spec;
  std::size_t n_hidden = 0;
  if (!(is >> word) || word != "spec") throw ParameterError("model file: expected 'spec'");
  is >> spec.input_dim >> spec.num_classes >> spec.seed >> n_hidden;
  spec.hidden_widths.resize(n_hidden);
  for (auto& w : spec.hidden_widths) is >> w;
  if (!is) throw ParameterError("model file: malformed spec line");
  spec.validate();
  Model m{spec, {}, {}};
  for (auto [fan_in, fan_out] : spec.layer_dims()) {
    m.weights.push_back(detail::read_tensor(is, "weight", {fan_in, fan_out}));
    m.biases.push_back(detail::read_tensor(is, "bias", {fan_out}));
  }
  return m;
}

}  // namespace kduda
