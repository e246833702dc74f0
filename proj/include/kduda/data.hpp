#pragma once

// Synthetic labelled-source / unlabelled-target domain pairs and seeded
// paired batching.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <numbers>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "kduda/autodiff.hpp"
#include "kduda/models.hpp"

namespace kduda {

struct ShiftDescriptor {
  std::string generator;
  double magnitude = 0.0;
};

struct SourceDomain {
  Tensor x;
  std::vector<int> y;
};

struct TargetDomain {
  Tensor x;
};

// Everything a training procedure may read. Target labels are not part of it.
struct TrainingData {
  const SourceDomain* source = nullptr;
  const TargetDomain* target = nullptr;
  std::size_t num_classes = 0;
};

struct EvalData {
  const Tensor* source_x = nullptr;
  const std::vector<int>* source_y = nullptr;
  const Tensor* target_x = nullptr;
  const std::vector<int>* target_y = nullptr;
};

struct DomainPair {
  SourceDomain source;
  TargetDomain target;
  std::vector<int> target_eval_labels;
  std::size_t num_classes = 0;
  ShiftDescriptor shift;
  std::uint64_t seed = 0;

  std::size_t dim() const { return source.x.cols(); }

  TrainingData training() const { return {&source, &target, num_classes}; }
  EvalData evaluation() const { return {&source.x, &source.y, &target.x, &target_eval_labels}; }
};

namespace detail {

// Independent generator streams derived from one user seed.
inline std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t extra = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(extra),
                    static_cast<std::uint32_t>(extra >> 32)};
  return std::mt19937_64(seq);
}

inline std::vector<std::size_t> class_counts(std::size_t n, std::size_t classes) {
  std::vector<std::size_t> counts(classes, n / classes);
  for (std::size_t c = 0; c < n % classes; ++c) ++counts[c];
  return counts;
}

// Centred two-moons sample for one domain, class-ordered.
inline void two_moons(std::size_t n, double noise_std, std::mt19937_64& rng, Tensor& x, std::vector<int>& y) {
  const auto counts = class_counts(n, 2);
  std::uniform_real_distribution<double> angle(0.0, std::numbers::pi);
  std::normal_distribution<double> noise(0.0, 1.0);
  x = Tensor::zeros({n, 2});
  y.assign(n, 0);
  std::size_t row = 0;
  for (int c = 0; c < 2; ++c) {
    for (std::size_t i = 0; i < counts[c]; ++i, ++row) {
      const double t = angle(rng);
      double px = c == 0 ? std::cos(t) : 1.0 - std::cos(t);
      double py = c == 0 ? std::sin(t) : 0.5 - std::sin(t);
      px += noise_std * noise(rng) - 0.5;
      py += noise_std * noise(rng) - 0.25;
      x.at(row, 0) = px;
      x.at(row, 1) = py;
      y[row] = c;
    }
  }
}

}  // namespace detail

// Source: two interleaved half circles centred at the origin. Target: the same
// generator rotated by rotation_deg about the origin.
inline DomainPair gen_two_moons_shift(std::size_t n_per_domain, double rotation_deg, double noise_std,
                                      std::uint64_t seed) {
  if (n_per_domain < 4) throw ParameterError("two_moons: need at least 4 samples per domain");
  if (!(noise_std >= 0.0)) throw ParameterError("two_moons: noise_std must be non-negative");
  DomainPair p;
  p.num_classes = 2;
  p.shift = {"two_moons", rotation_deg};
  p.seed = seed;
  auto rs = detail::make_rng(seed, 1);
  auto rt = detail::make_rng(seed, 2);
  detail::two_moons(n_per_domain, noise_std, rs, p.source.x, p.source.y);
  detail::two_moons(n_per_domain, noise_std, rt, p.target.x, p.target_eval_labels);
  const double rad = rotation_deg * std::numbers::pi / 180.0;
  const double c = std::cos(rad), s = std::sin(rad);
  for (std::size_t i = 0; i < n_per_domain; ++i) {
    const double px = p.target.x.at(i, 0), py = p.target.x.at(i, 1);
    p.target.x.at(i, 0) = c * px - s * py;
    p.target.x.at(i, 1) = s * px + c * py;
  }
  return p;
}

inline constexpr double kBlobRadius = 3.0;

// Vertices of a regular simplex with circumradius `radius`, embedded in d
// dimensions. With more classes than d + 1 the means sit on a regular polygon
// in the first two coordinates.
inline std::vector<std::vector<double>> simplex_means(std::size_t classes, std::size_t d, double radius) {
  std::vector<std::vector<double>> means(classes, std::vector<double>(d, 0.0));
  if (classes > d + 1) {
    for (std::size_t c = 0; c < classes; ++c) {
      const double a = 2.0 * std::numbers::pi * static_cast<double>(c) / static_cast<double>(classes);
      means[c][0] = radius * std::cos(a);
      means[c][1] = radius * std::sin(a);
    }
    return means;
  }
  // Centred basis vectors e_c - 1/C, expressed in an orthonormal (Helmert)
  // basis of the sum-zero subspace.
  const double C = static_cast<double>(classes);
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t k = 1; k < classes; ++k) {
      const double kk = static_cast<double>(k);
      const double norm = std::sqrt(kk * (kk + 1.0));
      double coord = 0.0;
      if (c < k) coord = 1.0 / norm;
      else if (c == k) coord = -kk / norm;
      means[c][k - 1] = coord;
    }
  }
  const double circumradius = std::sqrt((C - 1.0) / C);
  for (auto& m : means)
    for (auto& v : m) v *= radius / circumradius;
  return means;
}

// Source classes: unit-variance Gaussians at simplex vertices. Target: the
// same means translated by mean_shift along a seeded random unit direction,
// standard deviation multiplied by `scale`.
inline DomainPair gen_blob_shift(std::size_t n_per_domain, std::size_t classes, std::size_t d, double mean_shift,
                                 double scale, std::uint64_t seed) {
  if (classes < 2) throw ParameterError("blobs: need at least 2 classes");
  if (d < 2) throw ParameterError("blobs: need at least 2 dimensions");
  if (n_per_domain < classes) throw ParameterError("blobs: fewer samples than classes");
  if (!(scale > 0.0)) throw ParameterError("blobs: scale must be positive");
  DomainPair p;
  p.num_classes = classes;
  p.shift = {"blobs", mean_shift};
  p.seed = seed;
  const auto means = simplex_means(classes, d, kBlobRadius);

  auto rdir = detail::make_rng(seed, 3);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> dir(d);
  double norm = 0.0;
  do {
    norm = 0.0;
    for (auto& v : dir) {
      v = normal(rdir);
      norm += v * v;
    }
  } while (norm == 0.0);
  norm = std::sqrt(norm);
  for (auto& v : dir) v /= norm;

  auto sample = [&](std::mt19937_64& rng, double offset, double sd, Tensor& x, std::vector<int>& y) {
    const auto counts = detail::class_counts(n_per_domain, classes);
    x = Tensor::zeros({n_per_domain, d});
    y.assign(n_per_domain, 0);
    std::size_t row = 0;
    for (std::size_t c = 0; c < classes; ++c) {
      for (std::size_t i = 0; i < counts[c]; ++i, ++row) {
        for (std::size_t k = 0; k < d; ++k) x.at(row, k) = means[c][k] + offset * dir[k] + sd * normal(rng);
        y[row] = static_cast<int>(c);
      }
    }
  };
  auto rs = detail::make_rng(seed, 1);
  auto rt = detail::make_rng(seed, 2);
  sample(rs, 0.0, 1.0, p.source.x, p.source.y);
  sample(rt, mean_shift, scale, p.target.x, p.target_eval_labels);
  return p;
}

struct Standardizer {
  std::vector<double> mean;
  std::vector<double> stddev;

  void apply(Tensor& x) const {
    for (std::size_t r = 0; r < x.rows(); ++r)
      for (std::size_t c = 0; c < x.cols(); ++c) x.at(r, c) = (x.at(r, c) - mean[c]) / stddev[c];
  }
};

// Column statistics of the source domain, applied to both domains.
inline Standardizer standardize(DomainPair& p) {
  const auto& xs = p.source.x;
  const std::size_t n = xs.rows(), d = xs.cols();
  Standardizer s{std::vector<double>(d, 0.0), std::vector<double>(d, 0.0)};
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) s.mean[c] += xs.at(r, c);
  for (auto& m : s.mean) m /= static_cast<double>(n);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) s.stddev[c] += (xs.at(r, c) - s.mean[c]) * (xs.at(r, c) - s.mean[c]);
  for (auto& v : s.stddev) {
    v = std::sqrt(v / static_cast<double>(n));
    if (!(v > 0.0)) v = 1.0;
  }
  s.apply(p.source.x);
  s.apply(p.target.x);
  return s;
}

struct PairedBatch {
  std::vector<std::size_t> source;
  std::vector<std::size_t> target;
};

// One epoch of paired batches. Both domains are shuffled independently; the
// target order wraps cyclically when it is shorter than the source.
struct BatchStream {
  std::size_t batch_size = 0;
  std::vector<PairedBatch> batches;

  std::size_t size() const { return batches.size(); }
  auto begin() const { return batches.begin(); }
  auto end() const { return batches.end(); }
};

inline BatchStream batches(const TrainingData& data, std::size_t batch_size, std::uint64_t epoch,
                           std::uint64_t seed) {
  const std::size_t ns = data.source->x.rows();
  const std::size_t nt = data.target->x.rows();
  if (batch_size == 0) throw ParameterError("batches: batch_size must be positive");
  if (batch_size > ns) {
    throw ParameterError("batches: batch_size " + std::to_string(batch_size) + " exceeds source size " +
                         std::to_string(ns));
  }
  std::vector<std::size_t> ps(ns), pt(nt);
  std::iota(ps.begin(), ps.end(), 0);
  std::iota(pt.begin(), pt.end(), 0);
  auto rs = detail::make_rng(seed, 10, epoch);
  auto rt = detail::make_rng(seed, 11, epoch);
  std::shuffle(ps.begin(), ps.end(), rs);
  std::shuffle(pt.begin(), pt.end(), rt);

  BatchStream out{batch_size, {}};
  for (std::size_t start = 0; start < ns; start += batch_size) {
    PairedBatch b;
    for (std::size_t k = start; k < std::min(ns, start + batch_size); ++k) {
      b.source.push_back(ps[k]);
      b.target.push_back(pt[k % nt]);
    }
    out.batches.push_back(std::move(b));
  }
  return out;
}

inline BatchStream batches(const DomainPair& pair, std::size_t batch_size, std::uint64_t epoch, std::uint64_t seed) {
  return batches(pair.training(), batch_size, epoch, seed);
}

// Rows of x selected by index, as a new tensor.
inline Tensor select_rows(const Tensor& x, std::span<const std::size_t> idx) {
  const std::size_t d = x.cols();
  Tensor out = Tensor::zeros({idx.size(), d});
  for (std::size_t r = 0; r < idx.size(); ++r) std::copy_n(&x.values[idx[r] * d], d, &out.values[r * d]);
  return out;
}

inline std::vector<int> select_labels(const std::vector<int>& y, std::span<const std::size_t> idx) {
  std::vector<int> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(y[i]);
  return out;
}

// CSV layout: `domain,x0..x{d-1},label`, target rows with an empty label.
// Target labels go to a separate `index,label` stream.
inline void write_domain_csv(std::ostream& os, std::ostream& eval_os, const DomainPair& p) {
  const std::size_t d = p.dim();
  os << "domain";
  for (std::size_t k = 0; k < d; ++k) os << ",x" << k;
  os << ",label\n";
  auto row = [&](const char* tag, const Tensor& x, std::size_t r) {
    os << tag;
    for (std::size_t k = 0; k < d; ++k) {
      os << ',';
      detail::write_double(os, x.at(r, k));
    }
    os << ',';
  };
  for (std::size_t r = 0; r < p.source.x.rows(); ++r) {
    row("source", p.source.x, r);
    os << p.source.y[r] << '\n';
  }
  for (std::size_t r = 0; r < p.target.x.rows(); ++r) {
    row("target", p.target.x, r);
    os << '\n';
  }
  eval_os << "index,label\n";
  for (std::size_t r = 0; r < p.target_eval_labels.size(); ++r) eval_os << r << ',' << p.target_eval_labels[r] << '\n';
}

// Reads what write_domain_csv produced. `eval_is` may be null, leaving target
// labels empty.
inline DomainPair read_domain_csv(std::istream& is, std::istream* eval_is) {
  std::string line;
  if (!std::getline(is, line) || line.rfind("domain,", 0) != 0) throw ParameterError("domain csv: missing header");
  const auto d = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) - 1;
  if (d == 0) throw ParameterError("domain csv: no feature columns");
  std::vector<double> xs, xt;
  DomainPair p;
  int max_label = -1;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (line.back() == ',') cells.emplace_back();
    if (cells.size() != d + 2) throw ParameterError("domain csv: wrong column count in '" + line + "'");
    auto& dest = cells[0] == "source" ? xs : xt;
    if (cells[0] != "source" && cells[0] != "target") throw ParameterError("domain csv: unknown domain " + cells[0]);
    for (std::size_t k = 0; k < d; ++k) dest.push_back(detail::parse_double(cells[k + 1]));
    if (cells[0] == "source") {
      p.source.y.push_back(std::stoi(cells[d + 1]));
      max_label = std::max(max_label, p.source.y.back());
    }
  }
  if (xs.empty() || xt.empty()) throw ParameterError("domain csv: both domains need rows");
  const std::size_t ns = xs.size() / d, nt = xt.size() / d;
  p.source.x = Tensor({ns, d}, std::move(xs));
  p.target.x = Tensor({nt, d}, std::move(xt));
  if (eval_is) {
    std::getline(*eval_is, line);
    while (std::getline(*eval_is, line)) {
      if (line.empty()) continue;
      auto comma = line.find(',');
      p.target_eval_labels.push_back(std::stoi(line.substr(comma + 1)));
      max_label = std::max(max_label, p.target_eval_labels.back());
    }
    if (p.target_eval_labels.size() != p.target.x.rows()) throw ParameterError("domain csv: eval label count mismatch");
  }
  p.num_classes = static_cast<std::size_t>(std::max(max_label + 1, 2));
  p.shift = {"csv", 0.0};
  return p;
}

}  // namespace kduda
