#include <gtest/gtest.h>

#include <cstring>
#include <random>
#include <sstream>

#include "gradcheck.hpp"
#include "kduda/losses.hpp"
#include "kduda/models.hpp"

namespace kduda {
namespace {

using testing::random_tensor;

ModelSpec spec(std::size_t in, std::vector<std::size_t> hidden, std::size_t classes, std::uint64_t seed = 0) {
  return {in, std::move(hidden), classes, seed};
}

void zero_all(Model& m) {
  for (auto* p : m.parameters()) std::fill(p->values.begin(), p->values.end(), 0.0);
}

TEST(Build, WeightShapes) {
  auto m = build(spec(2, {4}, 3));
  ASSERT_EQ(m.num_layers(), 2u);
  EXPECT_EQ(m.weights[0].shape, (Shape{2, 4}));
  EXPECT_EQ(m.weights[1].shape, (Shape{4, 3}));
  EXPECT_EQ(m.biases[0].shape, (Shape{4}));
  EXPECT_EQ(m.feature_cut(), 1u);
}

TEST(Build, GlorotBoundsAndZeroBias) {
  auto m = build(spec(5, {7, 3}, 2, 42));
  for (std::size_t l = 0; l < m.num_layers(); ++l) {
    const double fan_in = static_cast<double>(m.weights[l].rows());
    const double fan_out = static_cast<double>(m.weights[l].cols());
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    for (double v : m.weights[l].values) {
      EXPECT_LE(std::abs(v), limit);
      EXPECT_TRUE(std::isfinite(v));
    }
    for (double v : m.biases[l].values) EXPECT_EQ(v, 0.0);
  }
}

TEST(Build, DeterministicInSeed) {
  auto a = build(spec(3, {8, 4}, 3, 17));
  auto b = build(spec(3, {8, 4}, 3, 17));
  auto c = build(spec(3, {8, 4}, 3, 18));
  bool differs = false;
  for (std::size_t l = 0; l < a.num_layers(); ++l) {
    ASSERT_EQ(a.weights[l].values.size(), b.weights[l].values.size());
    EXPECT_EQ(std::memcmp(a.weights[l].values.data(), b.weights[l].values.data(),
                          a.weights[l].values.size() * sizeof(double)),
              0);
    differs = differs || a.weights[l].values != c.weights[l].values;
  }
  EXPECT_TRUE(differs);
}

TEST(Build, InvalidSpec) {
  EXPECT_THROW(build(spec(2, {}, 3)), ParameterError);
  EXPECT_THROW(build(spec(2, {4}, 1)), ParameterError);
  EXPECT_THROW(build(spec(0, {4}, 2)), ParameterError);
}

TEST(Forward, ShapesAndDimensionError) {
  auto m = build(spec(3, {6, 4}, 5, 1));
  std::mt19937_64 rng(1);
  Graph g;
  auto b = bind(g, m, Binding::Frozen);
  auto pass = forward(b, g.constant(random_tensor({7, 3}, rng)));
  EXPECT_EQ(pass.features.shape(), (Shape{7, 4}));
  EXPECT_EQ(pass.logits.shape(), (Shape{7, 5}));
  EXPECT_THROW(features(b, g.constant(random_tensor({7, 2}, rng))), DimensionError);
}

TEST(Forward, ZeroWeightsGiveZeroFeaturesAndUniformSoftmax) {
  auto m = build(spec(3, {6, 4}, 4, 1));
  zero_all(m);
  std::mt19937_64 rng(2);
  Graph g;
  auto b = bind(g, m, Binding::Frozen);
  auto pass = forward(b, g.constant(random_tensor({5, 3}, rng)));
  for (double v : pass.features.value().values) EXPECT_EQ(v, 0.0);
  for (double v : pass.logits.value().values) EXPECT_EQ(v, 0.0);
  for (double p : softmax_temperature(pass.logits, 1.0).value().values) EXPECT_DOUBLE_EQ(p, 0.25);
}

TEST(Forward, LogitsShareFeatureNodes) {
  auto m = build(spec(3, {6, 4}, 2, 3));
  std::mt19937_64 rng(3);
  Graph g;
  auto b = bind(g, m, Binding::Frozen);
  auto pass = forward(b, g.constant(random_tensor({2, 3}, rng)));
  // The head is matmul(features, W) followed by add_bias.
  const auto& bias_node = g.node(pass.logits.id());
  const auto& mm_node = g.node(bias_node.inputs[0]);
  EXPECT_EQ(mm_node.op, OpKind::MatMul);
  EXPECT_EQ(mm_node.inputs[0], pass.features.id());

  // logits == head(features) exactly.
  Var again = head(b, pass.features);
  EXPECT_EQ(again.value().values, pass.logits.value().values);
}

TEST(Forward, BatchIndependence) {
  auto m = build(spec(3, {6, 4}, 3, 4));
  std::mt19937_64 rng(4);
  Tensor x = random_tensor({5, 3}, rng);
  const Tensor all = predict_logits(m, x);
  for (std::size_t r = 0; r < 5; ++r) {
    Tensor row = Tensor::matrix(1, 3, {x.at(r, 0), x.at(r, 1), x.at(r, 2)});
    const Tensor one = predict_logits(m, row);
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(one.values[c], all.at(r, c));
  }
}

TEST(Forward, HandComputedOneHiddenUnit) {
  Model m = build(spec(1, {1}, 2));
  m.weights[0] = Tensor::matrix(1, 1, {2.0});
  m.biases[0] = Tensor::zeros({1});
  m.weights[1] = Tensor::matrix(1, 2, {1.0, -1.0});
  m.biases[1] = Tensor::zeros({2});
  const Tensor out = predict_logits(m, Tensor::matrix(1, 1, {1.0}));
  EXPECT_EQ(out.values, (std::vector<double>{2.0, -2.0}));
}

TEST(Features, MmdGradientWrtFirstLayerMatchesFiniteDifferences) {
  auto m = build(spec(3, {6, 5}, 2, 9));
  std::mt19937_64 rng(9);
  for (auto& v : m.biases[0].values) v = 0.3;  // keep pre-activations away from the kink
  const Tensor xs = random_tensor({6, 3}, rng);
  const Tensor xt = random_tensor({5, 3}, rng, -0.5, 1.5);
  const auto k = KernelConfig::fixed({0.5, 1.0, 2.0});
  auto r = testing::gradient_check({&m.weights[0], &m.biases[0]}, [&](Graph& g, bool tr) {
    auto b = bind(g, m, tr ? Binding::Trainable : Binding::Frozen);
    return mmd_squared(features(b, g.constant(xs)), features(b, g.constant(xt)), k);
  });
  EXPECT_LT(r.max_rel_error, 1e-5);
}

TEST(Complexity, HandCounts) {
  auto c = count_complexity(spec(2, {32, 16}, 3));
  EXPECT_EQ(c.params, 675u);
  EXPECT_EQ(c.macs_per_sample, 624u);

  auto t = count_complexity(spec(2, {128, 128, 64}, 2));
  EXPECT_EQ(t.params, (2 * 128 + 128) + (128 * 128 + 128) + (128 * 64 + 64) + (64 * 2 + 2));
  EXPECT_EQ(t.params, 25282u);
  EXPECT_EQ(t.macs_per_sample, 256u + 16384u + 8192u + 128u);
  EXPECT_EQ(t.macs_per_sample, 24960u);
}

TEST(Complexity, SingleLinearLayerBaseCase) {
  const std::size_t d = 7, c = 4;
  ModelSpec s = spec(d, {1}, c);
  auto total = count_complexity(s);
  EXPECT_EQ(total.params, (d * 1 + 1) + (1 * c + c));
  EXPECT_EQ(total.macs_per_sample, d * 1 + 1 * c);
}

TEST(Complexity, IndependentOfParameterValues) {
  auto m = build(spec(4, {9, 3}, 3, 5));
  const auto before = count_complexity(m);
  zero_all(m);
  const auto after = count_complexity(m);
  EXPECT_EQ(before.params, after.params);
  EXPECT_EQ(before.macs_per_sample, after.macs_per_sample);
  std::size_t counted = 0;
  for (auto* p : m.parameters()) counted += p->size();
  EXPECT_EQ(before.params, counted);
}

TEST(Complexity, WiderTeacherHasMoreParameters) {
  const auto teacher = count_complexity(spec(2, {128, 128, 64}, 3));
  const auto large = count_complexity(spec(2, {64, 32}, 3));
  const auto small = count_complexity(spec(2, {32, 16}, 3));
  EXPECT_GT(teacher.params, large.params);
  EXPECT_GT(large.params, small.params);
  EXPECT_LT(2 * small.macs_per_sample, teacher.macs_per_sample);
  EXPECT_LT(2 * large.macs_per_sample, teacher.macs_per_sample);
}

TEST(ModelFile, RoundTripIsValueExact) {
  auto m = build(spec(3, {5, 4}, 3, 123));
  std::mt19937_64 rng(5);
  for (auto& v : m.biases[1].values) v = std::uniform_real_distribution<double>(-1, 1)(rng);
  m.weights[0].values[0] = 1e-300;
  m.weights[0].values[1] = -0.1;
  std::stringstream ss;
  save_model(ss, m);
  EXPECT_EQ(ss.str().rfind("kduda-model v1\n", 0), 0u);
  const Model back = load_model(ss);
  EXPECT_EQ(back.spec.hidden_widths, m.spec.hidden_widths);
  EXPECT_EQ(back.spec.seed, m.spec.seed);
  for (std::size_t l = 0; l < m.num_layers(); ++l) {
    EXPECT_EQ(back.weights[l].values, m.weights[l].values);
    EXPECT_EQ(back.biases[l].values, m.biases[l].values);
  }
}

TEST(ModelFile, RejectsMalformedInput) {
  std::stringstream bad_header("kduda-model v2\n");
  EXPECT_THROW(load_model(bad_header), ParameterError);
  auto m = build(spec(2, {3}, 2, 1));
  std::stringstream ss;
  save_model(ss, m);
  std::string text = ss.str();
  text.resize(text.size() - 10);
  std::stringstream truncated(text);
  EXPECT_THROW(load_model(truncated), std::invalid_argument);
}

}  // namespace
}  // namespace kduda
