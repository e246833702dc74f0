#pragma once

// Domain-adaptation and distillation objectives:
//   L_TDA = MMD^2(phi_T(xs), phi_T(xt)) + gamma * CE(softmax(T(xs)), ys)
//   L_TKD = KL(T(xt, tau) || S(xt, tau))
//   L_SKD = KL(T(xs, tau) || S(xs, tau)) + alpha * CE(softmax(S(xs)), ys)
//   L     = (1 - beta) L_TDA + beta (L_TKD + L_SKD)
// and the exponential beta schedule beta_t = b * exp(g t), g = ln(f / b) / epochs.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "kduda/autodiff.hpp"
#include "kduda/models.hpp"

namespace kduda {

inline constexpr double kLogFloor = 1e-12;

enum class BandwidthMode { Fixed, MedianHeuristic };

// Gaussian kernel family k(x,y) = mean_s exp(-||x-y||^2 / (2 sigma_s^2)).
// In Fixed mode `bandwidths` are the sigmas; in MedianHeuristic mode they are
// multipliers applied to the median pairwise distance of the pooled batch.
struct KernelConfig {
  BandwidthMode mode = BandwidthMode::MedianHeuristic;
  std::vector<double> bandwidths{0.25, 0.5, 1.0, 2.0, 4.0};

  static KernelConfig fixed(std::vector<double> sigmas) { return {BandwidthMode::Fixed, std::move(sigmas)}; }
  static KernelConfig median(std::vector<double> multipliers = {0.25, 0.5, 1.0, 2.0, 4.0}) {
    return {BandwidthMode::MedianHeuristic, std::move(multipliers)};
  }

  void validate() const {
    if (bandwidths.empty()) throw ParameterError("kernel: at least one bandwidth is required");
    for (double b : bandwidths) {
      if (!(b > 0.0) || !std::isfinite(b)) throw ParameterError("kernel: bandwidths must be positive and finite");
    }
  }
};

struct LossWeights {
  double gamma = 1.0;
  double alpha = 0.8;
  double tau = 20.0;
  bool tau_squared = true;  // multiply the distillation KL by tau^2

  void validate() const {
    if (!(gamma >= 0.0)) throw ParameterError("loss weights: gamma must be non-negative");
    if (!(alpha >= 0.0)) throw ParameterError("loss weights: alpha must be non-negative");
    if (!(tau > 0.0)) throw ParameterError("loss weights: tau must be positive");
  }
};

// Median of pairwise Euclidean distances over the pooled rows of a and b.
// Falls back to 1 when every pooled point coincides.
inline double median_pairwise_distance(const Tensor& a, const Tensor& b) {
  const std::size_t d = a.cols();
  std::vector<const double*> rows;
  for (std::size_t i = 0; i < a.rows(); ++i) rows.push_back(&a.values[i * d]);
  for (std::size_t i = 0; i < b.rows(); ++i) rows.push_back(&b.values[i * d]);
  std::vector<double> dist;
  dist.reserve(rows.size() * (rows.size() - 1) / 2);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = i + 1; j < rows.size(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = rows[i][k] - rows[j][k];
        s += diff * diff;
      }
      dist.push_back(std::sqrt(s));
    }
  }
  if (dist.empty()) return 1.0;
  const auto mid = dist.size() / 2;
  std::nth_element(dist.begin(), dist.begin() + mid, dist.end());
  double med = dist[mid];
  if (dist.size() % 2 == 0) {
    const double lower = *std::max_element(dist.begin(), dist.begin() + mid);
    med = 0.5 * (med + lower);
  }
  return (med > 0.0 && std::isfinite(med)) ? med : 1.0;
}

// Sigmas used for one batch. The median is computed on values only and is
// not differentiated.
inline std::vector<double> resolve_bandwidths(const KernelConfig& k, const Tensor& fs, const Tensor& ft) {
  k.validate();
  if (k.mode == BandwidthMode::Fixed) return k.bandwidths;
  const double med = median_pairwise_distance(fs, ft);
  std::vector<double> sigmas;
  for (double m : k.bandwidths) sigmas.push_back(m * med);
  return sigmas;
}

namespace detail {

inline Var kernel_mean(Var a, Var b, const std::vector<double>& sigmas) {
  Var d2 = pairwise_sq_dist(a, b);
  Var acc = exp(scale(d2, -1.0 / (2.0 * sigmas[0] * sigmas[0])));
  for (std::size_t s = 1; s < sigmas.size(); ++s) {
    acc = acc + exp(scale(d2, -1.0 / (2.0 * sigmas[s] * sigmas[s])));
  }
  return scale(mean(acc), 1.0 / static_cast<double>(sigmas.size()));
}

inline std::vector<std::size_t> checked_labels(std::span<const int> labels, std::size_t classes) {
  std::vector<std::size_t> out;
  out.reserve(labels.size());
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw ParameterError("label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
    }
    out.push_back(static_cast<std::size_t>(y));
  }
  return out;
}

}  // namespace detail

// Biased squared MMD:
//   mean k(fs, fs') + mean k(ft, ft') - 2 mean k(fs, ft)
inline Var mmd_squared(Var fs, Var ft, const KernelConfig& k) {
  if (fs.shape().size() != 2 || ft.shape().size() != 2) {
    throw DimensionError("mmd_squared: expected matrices, got " + to_string(fs.shape()) + " and " +
                         to_string(ft.shape()));
  }
  if (fs.rows() == 0 || ft.rows() == 0) throw ParameterError("mmd_squared: empty sample set");
  if (fs.cols() != ft.cols()) {
    throw DimensionError("mmd_squared: feature dimension mismatch " + to_string(fs.shape()) + " vs " +
                         to_string(ft.shape()));
  }
  const auto sigmas = resolve_bandwidths(k, fs.value(), ft.value());
  Var kss = detail::kernel_mean(fs, fs, sigmas);
  Var ktt = detail::kernel_mean(ft, ft, sigmas);
  Var kst = detail::kernel_mean(fs, ft, sigmas);
  return kss + ktt - scale(kst, 2.0);
}

// Mean negative log-likelihood of the labelled class; log clamped at 1e-12.
inline Var cross_entropy(Var probs, std::span<const int> labels) {
  if (probs.shape().size() != 2) throw DimensionError("cross_entropy: probs must be a matrix");
  if (labels.size() != probs.rows()) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for probs " +
                         to_string(probs.shape()));
  }
  const auto idx = detail::checked_labels(labels, probs.cols());
  return scale(mean(log(pick(probs, idx), kLogFloor)), -1.0);
}

// KL(teacher || student) averaged over the batch, optionally scaled by tau^2.
// The teacher distribution is treated as a constant.
inline Var distill_kl(Var student_soft, Var teacher_soft, double tau, bool tau_squared = true) {
  if (student_soft.shape() != teacher_soft.shape()) {
    throw DimensionError("distill_kl: shape mismatch " + to_string(student_soft.shape()) + " vs " +
                         to_string(teacher_soft.shape()));
  }
  if (!(tau > 0.0)) throw ParameterError("distill_kl: tau must be positive");
  Var t = detach(teacher_soft);
  Var kl = sum(t * (log(t, kLogFloor) - log(student_soft, kLogFloor)));
  const double factor = (tau_squared ? tau * tau : 1.0) / static_cast<double>(student_soft.rows());
  return scale(kl, factor);
}

struct TeacherDaLoss {
  Var total;  // mmd + gamma * ce
  Var mmd;
  Var ce;
};

inline TeacherDaLoss teacher_da_terms(Var feat_s, Var feat_t, Var logits_s, std::span<const int> ys,
                                      const KernelConfig& k, const LossWeights& w) {
  w.validate();
  Var m = mmd_squared(feat_s, feat_t, k);
  Var ce = cross_entropy(softmax_temperature(logits_s, 1.0), ys);
  return {m + scale(ce, w.gamma), m, ce};
}

inline TeacherDaLoss teacher_da_loss(const BoundModel& teacher, Var xs, std::span<const int> ys, Var xt,
                                     const KernelConfig& k, const LossWeights& w) {
  auto src = forward(teacher, xs);
  Var ft = features(teacher, xt);
  return teacher_da_terms(src.features, ft, src.logits, ys, k, w);
}

inline Var target_kd_terms(Var student_logits_t, Var teacher_logits_t, const LossWeights& w) {
  w.validate();
  return distill_kl(softmax_temperature(student_logits_t, w.tau), softmax_temperature(teacher_logits_t, w.tau),
                    w.tau, w.tau_squared);
}

inline Var target_kd_loss(const BoundModel& student, const BoundModel& teacher, Var xt, const LossWeights& w) {
  return target_kd_terms(logits(student, xt), logits(teacher, xt), w);
}

struct SourceKdLoss {
  Var total;  // distill + alpha * ce
  Var distill;
  Var ce;
};

inline SourceKdLoss source_kd_terms(Var student_logits_s, Var teacher_logits_s, std::span<const int> ys,
                                    const LossWeights& w) {
  w.validate();
  Var kd = distill_kl(softmax_temperature(student_logits_s, w.tau), softmax_temperature(teacher_logits_s, w.tau),
                      w.tau, w.tau_squared);
  Var ce = cross_entropy(softmax_temperature(student_logits_s, 1.0), ys);
  return {kd + scale(ce, w.alpha), kd, ce};
}

inline SourceKdLoss source_kd_loss(const BoundModel& student, const BoundModel& teacher, Var xs,
                                   std::span<const int> ys, const LossWeights& w) {
  return source_kd_terms(logits(student, xs), logits(teacher, xs), ys, w);
}

struct LossReport {
  double mmd = 0.0;
  double tda = 0.0;
  double tkd = 0.0;
  double skd = 0.0;
  double total = 0.0;
  double beta = 0.0;
  double gamma = 0.0;
};

struct TotalLoss {
  Var total;
  TeacherDaLoss tda;
  Var tkd;
  SourceKdLoss skd;
  LossReport report;
};

inline void check_beta(double beta) {
  if (!(beta >= 0.0 && beta <= 1.0)) throw ParameterError("beta must lie in [0, 1], got " + std::to_string(beta));
}

// Combined objective on a single graph. Gradient reaches the teacher only through L_TDA.
inline TotalLoss total_loss(const BoundModel& teacher, const BoundModel& student, Var xs, std::span<const int> ys,
                            Var xt, double beta, const KernelConfig& k, const LossWeights& w) {
  check_beta(beta);
  auto t_src = forward(teacher, xs);
  auto t_tgt = forward(teacher, xt);
  Var s_src = logits(student, xs);
  Var s_tgt = logits(student, xt);
  auto tda = teacher_da_terms(t_src.features, t_tgt.features, t_src.logits, ys, k, w);
  Var tkd = target_kd_terms(s_tgt, t_tgt.logits, w);
  auto skd = source_kd_terms(s_src, t_src.logits, ys, w);
  Var total = scale(tda.total, 1.0 - beta) + scale(tkd + skd.total, beta);
  LossReport r{tda.mmd.item(), tda.total.item(), tkd.item(), skd.total.item(), total.item(), beta, w.gamma};
  return {total, tda, tkd, skd, r};
}

struct BetaSchedule {
  double start = 0.1;  // b
  double end = 0.9;    // f
  int epochs = 400;

  void validate() const {
    if (!(start > 0.0 && start <= 1.0)) throw ParameterError("beta schedule: start must lie in (0, 1]");
    if (!(end > 0.0 && end <= 1.0)) throw ParameterError("beta schedule: end must lie in (0, 1]");
    if (epochs <= 0) throw ParameterError("beta schedule: epochs must be positive");
  }

  double growth() const { return std::log(end / start) / static_cast<double>(epochs); }
};

// beta at a possibly fractional epoch position, clamped to [0, 1].
inline double beta_at_position(const BetaSchedule& s, double t) {
  s.validate();
  if (!(t >= 0.0)) throw ParameterError("beta_at: epoch index must be non-negative");
  return std::clamp(s.start * std::exp(s.growth() * t), 0.0, 1.0);
}

inline double beta_at(const BetaSchedule& s, int t) {
  if (t < 0) throw ParameterError("beta_at: epoch index must be non-negative, got " + std::to_string(t));
  return beta_at_position(s, static_cast<double>(t));
}

enum class GammaMode { Constant, Ramp };

// Constant gamma_max, or the sigmoid ramp 2 gamma_max / (1 + e^{-10 t / epochs}) - gamma_max.
inline double gamma_at(int t, int epochs, double gamma_max, GammaMode mode = GammaMode::Constant) {
  if (t < 0 || epochs <= 0) throw ParameterError("gamma_at: need 0 <= t and epochs > 0");
  if (mode == GammaMode::Constant) return gamma_max;
  const double p = static_cast<double>(t) / static_cast<double>(epochs);
  return 2.0 * gamma_max / (1.0 + std::exp(-10.0 * p)) - gamma_max;
}

}  // namespace kduda
