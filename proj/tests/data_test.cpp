#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "kduda/data.hpp"
#include "kduda/losses.hpp"
#include "kduda/trainer.hpp"

namespace kduda {
namespace {

template <typename T>
constexpr bool has_labels = requires(T t) { t.y; };

double raw_mmd(const DomainPair& p) {
  Graph g;
  return mmd_squared(g.constant(p.source.x), g.constant(p.target.x), KernelConfig::median()).item();
}

std::vector<double> column_means(const Tensor& x) {
  std::vector<double> m(x.cols(), 0.0);
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c) m[c] += x.at(r, c) / static_cast<double>(x.rows());
  return m;
}

// ---- two moons -------------------------------------------------------------

TEST(TwoMoons, ShapesAndBalancedLabels) {
  auto p = gen_two_moons_shift(200, 30.0, 0.1, 1);
  EXPECT_EQ(p.source.x.shape, (Shape{200, 2}));
  EXPECT_EQ(p.target.x.shape, (Shape{200, 2}));
  EXPECT_EQ(p.num_classes, 2u);
  for (const auto* y : {&p.source.y, &p.target_eval_labels}) {
    EXPECT_EQ(std::count(y->begin(), y->end(), 0), 100);
    EXPECT_EQ(std::count(y->begin(), y->end(), 1), 100);
  }
}

TEST(TwoMoons, RotationIncreasesDiscrepancy) {
  double same = 0.0, rotated = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    same += raw_mmd(gen_two_moons_shift(200, 0.0, 0.1, seed));
    rotated += raw_mmd(gen_two_moons_shift(200, 45.0, 0.1, seed));
  }
  EXPECT_LT(same, rotated);
}

TEST(TwoMoons, FullTurnMatchesNoRotation) {
  auto a = gen_two_moons_shift(50, 0.0, 0.1, 3);
  auto b = gen_two_moons_shift(50, 360.0, 0.1, 3);
  for (std::size_t i = 0; i < a.target.x.size(); ++i) EXPECT_NEAR(a.target.x.values[i], b.target.x.values[i], 1e-12);
  EXPECT_EQ(a.source.x.values, b.source.x.values);
}

TEST(TwoMoons, DeterministicAndSeedSensitive) {
  auto a = gen_two_moons_shift(40, 45.0, 0.1, 7);
  auto b = gen_two_moons_shift(40, 45.0, 0.1, 7);
  auto c = gen_two_moons_shift(40, 45.0, 0.1, 8);
  EXPECT_EQ(a.source.x.values, b.source.x.values);
  EXPECT_EQ(a.target.x.values, b.target.x.values);
  EXPECT_NE(a.source.x.values, c.source.x.values);
}

TEST(TwoMoons, Errors) {
  EXPECT_THROW(gen_two_moons_shift(3, 0.0, 0.1, 1), ParameterError);
  EXPECT_THROW(gen_two_moons_shift(10, 0.0, -0.1, 1), ParameterError);
}

// ---- blobs -----------------------------------------------------------------

TEST(Blobs, ClassCountsAndShapes) {
  auto p = gen_blob_shift(300, 3, 4, 2.0, 1.0, 1);
  EXPECT_EQ(p.source.x.shape, (Shape{300, 4}));
  for (int c = 0; c < 3; ++c) {
    EXPECT_EQ(std::count(p.source.y.begin(), p.source.y.end(), c), 100);
    EXPECT_EQ(std::count(p.target_eval_labels.begin(), p.target_eval_labels.end(), c), 100);
  }
}

TEST(Blobs, SimplexVerticesAreEquidistant) {
  for (std::size_t classes : {2u, 3u, 4u}) {
    const auto m = simplex_means(classes, 3, kBlobRadius);
    std::set<long long> dists;
    for (std::size_t a = 0; a < classes; ++a) {
      double r2 = 0.0;
      for (double v : m[a]) r2 += v * v;
      EXPECT_NEAR(std::sqrt(r2), kBlobRadius, 1e-12);
      for (std::size_t b = a + 1; b < classes; ++b) {
        double d2 = 0.0;
        for (std::size_t k = 0; k < 3; ++k) d2 += (m[a][k] - m[b][k]) * (m[a][k] - m[b][k]);
        dists.insert(std::llround(d2 * 1e9));
      }
    }
    EXPECT_EQ(dists.size(), 1u) << classes << " classes";
  }
}

TEST(Blobs, ZeroShiftIsIdenticallyDistributed) {
  // Same per-class means and spread; only the draws differ.
  double same = 0.0, shifted = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto p = gen_blob_shift(300, 3, 2, 0.0, 1.0, seed);
    const auto ms = column_means(p.source.x);
    const auto mt = column_means(p.target.x);
    for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(ms[c], mt[c], 5.0 * std::sqrt(2.0 * 10.0 / 300.0));
    same += raw_mmd(p);
    shifted += raw_mmd(gen_blob_shift(300, 3, 2, 3.0, 1.0, seed));
  }
  EXPECT_LT(same, shifted);
}

TEST(Blobs, ClassMeansWithinMomentBound) {
  const std::size_t n = 2000, classes = 3, d = 2;
  const double shift = 1.5, scale = 2.0;
  auto p = gen_blob_shift(n, classes, d, shift, scale, 5);
  const auto means = simplex_means(classes, d, kBlobRadius);
  const std::size_t per = n / classes;
  auto class_mean = [&](const Tensor& x, const std::vector<int>& y, int c) {
    std::vector<double> m(d, 0.0);
    for (std::size_t r = 0; r < x.rows(); ++r)
      if (y[r] == c)
        for (std::size_t k = 0; k < d; ++k) m[k] += x.at(r, k) / static_cast<double>(per);
    return m;
  };
  // Target offset is a common translation of every class mean by `shift`.
  std::vector<double> offset(d, 0.0);
  for (int c = 0; c < static_cast<int>(classes); ++c) {
    const auto ms = class_mean(p.source.x, p.source.y, c);
    const auto mt = class_mean(p.target.x, p.target_eval_labels, c);
    for (std::size_t k = 0; k < d; ++k) {
      EXPECT_NEAR(ms[k], means[c][k], 5.0 / std::sqrt(static_cast<double>(per)));
      offset[k] += (mt[k] - means[c][k]) / static_cast<double>(classes);
    }
  }
  double norm = 0.0;
  for (double v : offset) norm += v * v;
  EXPECT_NEAR(std::sqrt(norm), shift, 5.0 * scale / std::sqrt(static_cast<double>(n)));
}

TEST(Blobs, ShiftHurtsSourceOnlyClassifier) {
  TrainConfig cfg;
  cfg.epochs = 30;
  cfg.lr_da = 0.01;
  double src = 0.0, tgt = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto p = gen_blob_shift(400, 2, 2, 3.0, 1.0, seed);
    standardize(p);
    Model m = build({2, {32, 16}, 2, seed});
    cfg.seed = seed;
    train_source_only(m, p, cfg);
    src += evaluate(m, p.source.x, p.source.y) / 10.0;
    tgt += evaluate(m, p.target.x, p.target_eval_labels) / 10.0;
  }
  EXPECT_GE(src - tgt, 0.10) << "source " << src << " target " << tgt;
}

TEST(Blobs, Errors) {
  EXPECT_THROW(gen_blob_shift(100, 1, 2, 0.0, 1.0, 1), ParameterError);
  EXPECT_THROW(gen_blob_shift(100, 2, 1, 0.0, 1.0, 1), ParameterError);
  EXPECT_THROW(gen_blob_shift(100, 2, 2, 0.0, 0.0, 1), ParameterError);
}

// ---- standardization -------------------------------------------------------

TEST(Standardize, UsesSourceStatisticsOnly) {
  auto p = gen_blob_shift(300, 3, 3, 4.0, 1.0, 2);
  const Tensor target_before = p.target.x;
  const auto s = standardize(p);
  const auto ms = column_means(p.source.x);
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_NEAR(ms[c], 0.0, 1e-12);
    double var = 0.0;
    for (std::size_t r = 0; r < p.source.x.rows(); ++r) var += p.source.x.at(r, c) * p.source.x.at(r, c);
    EXPECT_NEAR(var / 300.0, 1.0, 1e-12);
  }
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 3; ++c)
      EXPECT_NEAR(p.target.x.at(r, c), (target_before.at(r, c) - s.mean[c]) / s.stddev[c], 1e-12);
}

// ---- batching --------------------------------------------------------------

TEST(Batches, CountAndCoverage) {
  auto p = gen_blob_shift(100, 2, 2, 0.0, 1.0, 1);
  auto bs = batches(p, 10, 0, 42);
  EXPECT_EQ(bs.size(), 10u);
  std::vector<std::size_t> seen;
  for (const auto& b : bs) {
    EXPECT_EQ(b.source.size(), 10u);
    EXPECT_EQ(b.target.size(), 10u);
    seen.insert(seen.end(), b.source.begin(), b.source.end());
  }
  std::sort(seen.begin(), seen.end());
  for (std::size_t i = 0; i < 100; ++i) EXPECT_EQ(seen[i], i);
}

TEST(Batches, RaggedLastBatch) {
  auto p = gen_blob_shift(25, 2, 2, 0.0, 1.0, 1);
  auto bs = batches(p, 10, 0, 1);
  ASSERT_EQ(bs.size(), 3u);
  EXPECT_EQ(bs.batches[2].source.size(), 5u);
}

TEST(Batches, DeterministicPerSeedAndEpoch) {
  auto p = gen_blob_shift(100, 2, 2, 0.0, 1.0, 1);
  auto flat = [](const BatchStream& s) {
    std::vector<std::size_t> v;
    for (const auto& b : s) {
      v.insert(v.end(), b.source.begin(), b.source.end());
      v.insert(v.end(), b.target.begin(), b.target.end());
    }
    return v;
  };
  EXPECT_EQ(flat(batches(p, 10, 3, 9)), flat(batches(p, 10, 3, 9)));
  EXPECT_NE(flat(batches(p, 10, 3, 9)), flat(batches(p, 10, 4, 9)));
  EXPECT_NE(flat(batches(p, 10, 3, 9)), flat(batches(p, 10, 3, 10)));
}

TEST(Batches, ShorterTargetWrapsCyclically) {
  DomainPair p = gen_blob_shift(40, 2, 2, 0.0, 1.0, 1);
  p.target.x = select_rows(p.target.x, std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6});
  p.target_eval_labels.resize(7);
  auto bs = batches(p, 8, 0, 1);
  std::vector<std::size_t> tgt;
  for (const auto& b : bs) tgt.insert(tgt.end(), b.target.begin(), b.target.end());
  ASSERT_EQ(tgt.size(), 40u);
  for (std::size_t k = 7; k < 40; ++k) EXPECT_EQ(tgt[k], tgt[k % 7]);
  for (auto t : tgt) EXPECT_LT(t, 7u);
}

TEST(Batches, Errors) {
  auto p = gen_blob_shift(20, 2, 2, 0.0, 1.0, 1);
  EXPECT_THROW(batches(p, 21, 0, 1), ParameterError);
  EXPECT_THROW(batches(p, 0, 0, 1), ParameterError);
}

TEST(Batches, TrainingViewCarriesNoTargetLabels) {
  auto p = gen_blob_shift(20, 2, 2, 1.0, 1.0, 1);
  const TrainingData d = p.training();
  static_assert(!has_labels<TargetDomain>);
  EXPECT_EQ(d.target->x.rows(), 20u);
}

// ---- csv -------------------------------------------------------------------

TEST(DomainCsv, RoundTrip) {
  auto p = gen_blob_shift(30, 3, 3, 1.0, 1.5, 4);
  std::stringstream data, eval;
  write_domain_csv(data, eval, p);
  const std::string text = data.str();
  EXPECT_EQ(text.rfind("domain,x0,x1,x2,label\n", 0), 0u);
  EXPECT_NE(text.find("\ntarget,"), std::string::npos);
  EXPECT_EQ(eval.str().rfind("index,label\n", 0), 0u);

  auto back = read_domain_csv(data, &eval);
  EXPECT_EQ(back.source.x.values, p.source.x.values);
  EXPECT_EQ(back.target.x.values, p.target.x.values);
  EXPECT_EQ(back.source.y, p.source.y);
  EXPECT_EQ(back.target_eval_labels, p.target_eval_labels);
  EXPECT_EQ(back.num_classes, 3u);
}

TEST(DomainCsv, TargetLabelsStayOutOfTheDataFile) {
  auto p = gen_blob_shift(10, 2, 2, 1.0, 1.0, 4);
  std::stringstream data, eval;
  write_domain_csv(data, eval, p);
  std::string line;
  std::getline(data, line);
  while (std::getline(data, line)) {
    if (line.rfind("target,", 0) == 0) {
      EXPECT_EQ(line.back(), ',');
    }
  }
  std::stringstream again(data.str());
  auto back = read_domain_csv(again, nullptr);
  EXPECT_TRUE(back.target_eval_labels.empty());
}

TEST(DomainCsv, RejectsMalformed) {
  std::stringstream no_header("source,1,2,0\n");
  EXPECT_THROW(read_domain_csv(no_header, nullptr), ParameterError);
  std::stringstream bad_cols("domain,x0,x1,label\nsource,1,0\n");
  EXPECT_THROW(read_domain_csv(bad_cols, nullptr), ParameterError);
}

}  // namespace
}  // namespace kduda
