#pragma once

// Joint progressive distillation + domain adaptation, the sequential
// baselines, momentum SGD and accuracy evaluation.

#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "kduda/autodiff.hpp"
#include "kduda/data.hpp"
#include "kduda/losses.hpp"
#include "kduda/models.hpp"

namespace kduda {

enum class LrDecay { Constant, Exponential };

struct OptimizerState {
  double initial_lr = 0.001;
  double lr = 0.001;
  double momentum = 0.9;
  LrDecay decay = LrDecay::Constant;
  double decay_factor = 1.0;  // per-epoch multiplier in Exponential mode
  std::vector<std::vector<double>> velocity;

  // lr for the given epoch: initial_lr * decay_factor^epoch.
  void set_epoch(int epoch) {
    lr = decay == LrDecay::Exponential ? initial_lr * std::pow(decay_factor, epoch) : initial_lr;
  }
};

inline OptimizerState make_optimizer(std::span<Tensor* const> params, double lr, double momentum,
                                     LrDecay decay = LrDecay::Constant, double decay_factor = 1.0) {
  if (!(lr > 0.0)) throw ParameterError("optimizer: learning rate must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ParameterError("optimizer: momentum must lie in [0, 1)");
  OptimizerState s{lr, lr, momentum, decay, decay_factor, {}};
  for (const auto* p : params) s.velocity.emplace_back(p->size(), 0.0);
  return s;
}

// v <- momentum v + grad; p <- p - lr v; grad <- 0. A parameter whose grad
// was never populated is stepped with a zero gradient.
inline void sgd_step(std::span<Tensor* const> params, OptimizerState& state) {
  if (params.size() != state.velocity.size()) {
    throw ContractError("sgd_step: " + std::to_string(params.size()) + " parameters but " +
                        std::to_string(state.velocity.size()) + " velocity buffers");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    auto& v = state.velocity[i];
    if (v.size() != p.size() || (!p.grad.empty() && p.grad.size() != p.size())) {
      throw ContractError("sgd_step: buffer shape mismatch for parameter " + std::to_string(i) + " of shape " +
                          to_string(p.shape));
    }
    const bool has = !p.grad.empty();
    for (std::size_t k = 0; k < p.size(); ++k) {
      v[k] = state.momentum * v[k] + (has ? p.grad[k] : 0.0);
      p.values[k] -= state.lr * v[k];
    }
    p.zero_grad();
  }
}

// Fraction of rows whose arg-max logit (lowest index on ties) equals the label.
inline double evaluate(const Model& model, const Tensor& x, std::span<const int> y) {
  if (x.rows() != y.size()) throw DimensionError("evaluate: label count does not match inputs");
  const Tensor out = predict_logits(model, x);
  const std::size_t c = out.cols();
  std::size_t correct = 0;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    const double* row = &out.values[r * c];
    const auto best = static_cast<int>(std::max_element(row, row + c) - row);
    if (best == y[r]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(y.size());
}

enum class OptimizerMode { Dual, Single };
enum class BetaUpdate { PerEpoch, PerBatch };

struct TrainConfig {
  int epochs = 400;
  std::size_t batch_size = 32;
  double beta_start = 0.1;
  double beta_end = 0.9;
  std::optional<double> beta_override;  // pins beta for every step
  LossWeights weights;                  // weights.gamma is gamma_max
  GammaMode gamma_mode = GammaMode::Constant;
  KernelConfig kernel;
  double lr_da = 0.001;
  double lr_kd = 0.001;
  double momentum = 0.9;
  LrDecay lr_da_decay = LrDecay::Exponential;
  double lr_da_final_ratio = 0.01;  // lr_da after `epochs` epochs, relative to start
  OptimizerMode optimizers = OptimizerMode::Dual;
  BetaUpdate beta_update = BetaUpdate::PerEpoch;
  std::uint64_t seed = 0;
  int eval_every = 1;

  BetaSchedule schedule() const { return {beta_start, beta_end, epochs}; }

  double lr_da_decay_factor() const { return std::pow(lr_da_final_ratio, 1.0 / static_cast<double>(epochs)); }

  void validate() const {
    if (epochs <= 0) throw ParameterError("train config: epochs must be positive");
    if (batch_size == 0) throw ParameterError("train config: batch_size must be positive");
    if (eval_every <= 0) throw ParameterError("train config: eval_every must be positive");
    if (!(lr_da_final_ratio > 0.0)) throw ParameterError("train config: lr_da_final_ratio must be positive");
    schedule().validate();
    weights.validate();
    kernel.validate();
    if (beta_override) check_beta(*beta_override);
  }
};

struct EpochRecord {
  int epoch = 0;
  std::string phase;
  double beta = 0.0;
  double gamma = 0.0;
  LossReport loss;  // batch means
  double teacher_src_acc = std::numeric_limits<double>::quiet_NaN();
  double teacher_tgt_acc = std::numeric_limits<double>::quiet_NaN();
  double student_src_acc = std::numeric_limits<double>::quiet_NaN();
  double student_tgt_acc = std::numeric_limits<double>::quiet_NaN();
  double seconds = 0.0;  // wall time since the start of training
};

struct PhaseMark {
  std::string name;
  int first_epoch = 0;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  std::vector<PhaseMark> phases;
  std::vector<LossReport> steps;  // one per optimized batch

  const EpochRecord& final() const { return epochs.back(); }
};

enum class StepStage { BeforeDa, AfterDa, BeforeKd, AfterKd };

// Called around every optimizer step of train_joint; `teacher` and `student`
// are the live models.
using StepObserver = std::function<void(StepStage, const Model& teacher, const Model& student)>;

inline constexpr const char* kTrainLogHeader =
    "epoch,beta,gamma,L_mmd,L_tda,L_tkd,L_skd,L_total,teacher_src_acc,teacher_tgt_acc,student_src_acc,"
    "student_tgt_acc,seconds";

inline void write_train_log_csv(std::ostream& os, const TrainLog& log) {
  os << kTrainLogHeader << '\n';
  auto num = [&](double v) {
    os << ',';
    if (std::isnan(v)) os << "nan";
    else detail::write_double(os, v);
  };
  for (const auto& e : log.epochs) {
    os << e.epoch;
    for (double v : {e.beta, e.gamma, e.loss.mmd, e.loss.tda, e.loss.tkd, e.loss.skd, e.loss.total, e.teacher_src_acc,
                     e.teacher_tgt_acc, e.student_src_acc, e.student_tgt_acc, e.seconds}) {
      num(v);
    }
    os << '\n';
  }
}

namespace detail {

inline void require_finite(double v, const char* term, int epoch, const std::string& phase) {
  if (!std::isfinite(v)) {
    throw NumericalError(std::string("non-finite ") + term + " at epoch " + std::to_string(epoch) + " (" + phase +
                         ")");
  }
}

struct Batch {
  Tensor xs;
  std::vector<int> ys;
  Tensor xt;
};

inline Batch gather(const TrainingData& data, const PairedBatch& b) {
  return {select_rows(data.source->x, b.source), select_labels(data.source->y, b.source),
          select_rows(data.target->x, b.target)};
}

// Drives the epoch/batch loop shared by every procedure and fills the log.
class PhaseRunner {
 public:
  PhaseRunner(const TrainingData& data, const EvalData& eval, const TrainConfig& cfg, TrainLog& log,
              const Model* teacher, const Model* student)
      : data_(data), eval_(eval), cfg_(cfg), log_(log), teacher_(teacher), student_(student),
        start_(std::chrono::steady_clock::now()) {}

  // step(batch, epoch, batch_index, batches_in_epoch) -> LossReport
  template <typename Step>
  void run(const std::string& phase, std::uint64_t stream, Step&& step) {
    log_.phases.push_back({phase, static_cast<int>(log_.epochs.size())});
    for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
      const auto stream_seed = cfg_.seed ^ (stream * 0x9E3779B97F4A7C15ULL);
      const auto bs = batches(data_, cfg_.batch_size, static_cast<std::uint64_t>(epoch), stream_seed);
      EpochRecord rec;
      rec.epoch = static_cast<int>(log_.epochs.size());
      rec.phase = phase;
      std::size_t index = 0;
      for (const auto& pb : bs) {
        const auto batch = gather(data_, pb);
        const LossReport r = step(batch, epoch, index++, bs.size());
        log_.steps.push_back(r);
        rec.loss.mmd += r.mmd;
        rec.loss.tda += r.tda;
        rec.loss.tkd += r.tkd;
        rec.loss.skd += r.skd;
        rec.loss.total += r.total;
        rec.beta = r.beta;
        rec.gamma = r.gamma;
      }
      const double n = static_cast<double>(bs.size());
      rec.loss.mmd /= n;
      rec.loss.tda /= n;
      rec.loss.tkd /= n;
      rec.loss.skd /= n;
      rec.loss.total /= n;
      rec.loss.beta = rec.beta;
      rec.loss.gamma = rec.gamma;
      if ((epoch + 1) % cfg_.eval_every == 0 || epoch + 1 == cfg_.epochs) {
        if (teacher_) {
          rec.teacher_src_acc = evaluate(*teacher_, *eval_.source_x, *eval_.source_y);
          rec.teacher_tgt_acc = evaluate(*teacher_, *eval_.target_x, *eval_.target_y);
        }
        if (student_) {
          rec.student_src_acc = evaluate(*student_, *eval_.source_x, *eval_.source_y);
          rec.student_tgt_acc = evaluate(*student_, *eval_.target_x, *eval_.target_y);
        }
      }
      rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
      log_.epochs.push_back(std::move(rec));
    }
  }

 private:
  const TrainingData& data_;
  const EvalData& eval_;
  const TrainConfig& cfg_;
  TrainLog& log_;
  const Model* teacher_;
  const Model* student_;
  std::chrono::steady_clock::time_point start_;
};

inline void require_compatible(const Model& a, const Model& b, const TrainingData& data) {
  if (a.spec.num_classes != b.spec.num_classes) {
    throw ParameterError("teacher and student must share num_classes");
  }
  if (a.spec.num_classes != data.num_classes) throw ParameterError("model num_classes does not match the data");
}

inline void require_matches_data(const Model& m, const TrainingData& data) {
  if (m.spec.num_classes != data.num_classes) throw ParameterError("model num_classes does not match the data");
  if (m.spec.input_dim != data.source->x.cols()) throw DimensionError("model input_dim does not match the data");
}

inline OptimizerState da_optimizer(Model& m, const TrainConfig& cfg) {
  auto ps = m.parameters();
  return make_optimizer(ps, cfg.lr_da, cfg.momentum, cfg.lr_da_decay, cfg.lr_da_decay_factor());
}

inline OptimizerState kd_optimizer(Model& m, const TrainConfig& cfg) {
  auto ps = m.parameters();
  return make_optimizer(ps, cfg.lr_kd, cfg.momentum);
}

inline double gamma_for(const TrainConfig& cfg, int epoch) {
  return gamma_at(epoch, cfg.epochs, cfg.weights.gamma, cfg.gamma_mode);
}

// L_TDA step on one model with the given optimizer; returns the report.
inline LossReport uda_step(Model& model, OptimizerState& opt, const Batch& b, const TrainConfig& cfg, int epoch,
                           const std::string& phase) {
  LossWeights w = cfg.weights;
  w.gamma = gamma_for(cfg, epoch);
  Graph g;
  auto m = bind(g, model, Binding::Trainable);
  auto tda = teacher_da_loss(m, g.constant(b.xs), b.ys, g.constant(b.xt), cfg.kernel, w);
  require_finite(tda.mmd.item(), "L_MMD", epoch, phase);
  require_finite(tda.ce.item(), "L_CE", epoch, phase);
  g.backward(tda.total);
  auto ps = model.parameters();
  sgd_step(ps, opt);
  LossReport r;
  r.mmd = tda.mmd.item();
  r.tda = tda.total.item();
  r.total = r.tda;
  r.gamma = w.gamma;
  return r;
}

inline LossReport supervised_step(Model& model, OptimizerState& opt, const Batch& b, int epoch,
                                  const std::string& phase) {
  Graph g;
  auto m = bind(g, model, Binding::Trainable);
  Var ce = cross_entropy(softmax_temperature(logits(m, g.constant(b.xs)), 1.0), b.ys);
  require_finite(ce.item(), "L_CE", epoch, phase);
  g.backward(ce);
  auto ps = model.parameters();
  sgd_step(ps, opt);
  LossReport r;
  r.total = ce.item();
  return r;
}

}  // namespace detail

// Joint progressive optimization. Per paired batch: a DA step on the teacher
// with (1 - beta) L_TDA, then teacher logits are recomputed with the updated
// teacher and a KD step on the student with beta (L_TKD + L_SKD). beta follows
// the exponential schedule, refreshed per epoch (or per batch, fractionally).
inline TrainLog train_joint(Model& teacher, Model& student, const TrainingData& data, const EvalData& eval,
                            const TrainConfig& cfg, const StepObserver& observe = {}) {
  cfg.validate();
  detail::require_compatible(teacher, student, data);
  detail::require_matches_data(teacher, data);
  detail::require_matches_data(student, data);
  const auto schedule = cfg.schedule();
  auto opt_da = detail::da_optimizer(teacher, cfg);
  auto opt_kd = detail::kd_optimizer(student, cfg);

  std::vector<Tensor*> joint_params = teacher.parameters();
  for (auto* p : student.parameters()) joint_params.push_back(p);
  auto opt_single = make_optimizer(joint_params, cfg.lr_da, cfg.momentum, cfg.lr_da_decay, cfg.lr_da_decay_factor());

  auto notify = [&](StepStage s) {
    if (observe) observe(s, teacher, student);
  };

  TrainLog log;
  detail::PhaseRunner runner(data, eval, cfg, log, &teacher, &student);
  const std::string phase = "joint";
  runner.run(phase, 1, [&](const detail::Batch& b, int epoch, std::size_t index, std::size_t count) {
    double beta = 0.0;
    if (cfg.beta_override) beta = *cfg.beta_override;
    else if (cfg.beta_update == BetaUpdate::PerBatch)
      beta = beta_at_position(schedule, epoch + static_cast<double>(index) / static_cast<double>(count));
    else beta = beta_at(schedule, epoch);
    LossWeights w = cfg.weights;
    w.gamma = detail::gamma_for(cfg, epoch);
    opt_da.set_epoch(epoch);
    opt_single.set_epoch(epoch);

    if (cfg.optimizers == OptimizerMode::Single) {
      Graph g;
      auto t = bind(g, teacher, Binding::Trainable);
      auto s = bind(g, student, Binding::Trainable);
      auto tl = total_loss(t, s, g.constant(b.xs), b.ys, g.constant(b.xt), beta, cfg.kernel, w);
      detail::require_finite(tl.report.mmd, "L_MMD", epoch, phase);
      detail::require_finite(tl.report.tda, "L_TDA", epoch, phase);
      detail::require_finite(tl.report.tkd, "L_TKD", epoch, phase);
      detail::require_finite(tl.report.skd, "L_SKD", epoch, phase);
      g.backward(tl.total);
      notify(StepStage::BeforeDa);
      sgd_step(joint_params, opt_single);
      notify(StepStage::AfterKd);
      return tl.report;
    }

    LossReport r;
    r.beta = beta;
    r.gamma = w.gamma;
    double da_value = 0.0;
    {
      Graph g;
      auto t = bind(g, teacher, Binding::Trainable);
      auto tda = teacher_da_loss(t, g.constant(b.xs), b.ys, g.constant(b.xt), cfg.kernel, w);
      detail::require_finite(tda.mmd.item(), "L_MMD", epoch, phase);
      detail::require_finite(tda.total.item(), "L_TDA", epoch, phase);
      Var da_loss = scale(tda.total, 1.0 - beta);
      g.backward(da_loss);
      r.mmd = tda.mmd.item();
      r.tda = tda.total.item();
      da_value = da_loss.item();
      notify(StepStage::BeforeDa);
      auto ps = teacher.parameters();
      sgd_step(ps, opt_da);
      notify(StepStage::AfterDa);
    }
    {
      Graph g;
      auto t = bind_frozen(g, teacher);
      auto s = bind(g, student, Binding::Trainable);
      Var xs = g.constant(b.xs);
      Var xt = g.constant(b.xt);
      Var tkd = target_kd_terms(logits(s, xt), logits(t, xt), w);
      auto skd = source_kd_terms(logits(s, xs), logits(t, xs), b.ys, w);
      detail::require_finite(tkd.item(), "L_TKD", epoch, phase);
      detail::require_finite(skd.total.item(), "L_SKD", epoch, phase);
      Var kd_loss = scale(tkd + skd.total, beta);
      g.backward(kd_loss);
      r.tkd = tkd.item();
      r.skd = skd.total.item();
      r.total = da_value + kd_loss.item();
      notify(StepStage::BeforeKd);
      auto ps = student.parameters();
      sgd_step(ps, opt_kd);
      notify(StepStage::AfterKd);
    }
    return r;
  });
  return log;
}

inline TrainLog train_joint(Model& teacher, Model& student, const DomainPair& pair, const TrainConfig& cfg,
                            const StepObserver& observe = {}) {
  return train_joint(teacher, student, pair.training(), pair.evaluation(), cfg, observe);
}

enum class ModelRole { Teacher, Student };

// Baseline: minimize L_TDA directly on one model with the DA optimizer.
inline TrainLog train_uda_only(Model& model, const TrainingData& data, const EvalData& eval, const TrainConfig& cfg,
                               ModelRole role = ModelRole::Student) {
  cfg.validate();
  detail::require_matches_data(model, data);
  auto opt = detail::da_optimizer(model, cfg);
  TrainLog log;
  const Model* t = role == ModelRole::Teacher ? &model : nullptr;
  const Model* s = role == ModelRole::Student ? &model : nullptr;
  detail::PhaseRunner runner(data, eval, cfg, log, t, s);
  runner.run("uda", 2, [&](const detail::Batch& b, int epoch, std::size_t, std::size_t) {
    opt.set_epoch(epoch);
    return detail::uda_step(model, opt, b, cfg, epoch, "uda");
  });
  return log;
}

inline TrainLog train_uda_only(Model& model, const DomainPair& pair, const TrainConfig& cfg,
                               ModelRole role = ModelRole::Student) {
  return train_uda_only(model, pair.training(), pair.evaluation(), cfg, role);
}

// Floor reference: supervised cross-entropy on the source only.
inline TrainLog train_source_only(Model& model, const TrainingData& data, const EvalData& eval,
                                  const TrainConfig& cfg, ModelRole role = ModelRole::Teacher) {
  cfg.validate();
  detail::require_matches_data(model, data);
  auto opt = detail::da_optimizer(model, cfg);
  TrainLog log;
  const Model* t = role == ModelRole::Teacher ? &model : nullptr;
  const Model* s = role == ModelRole::Student ? &model : nullptr;
  detail::PhaseRunner runner(data, eval, cfg, log, t, s);
  runner.run("source", 3, [&](const detail::Batch& b, int epoch, std::size_t, std::size_t) {
    opt.set_epoch(epoch);
    return detail::supervised_step(model, opt, b, epoch, "source");
  });
  return log;
}

inline TrainLog train_source_only(Model& model, const DomainPair& pair, const TrainConfig& cfg,
                                  ModelRole role = ModelRole::Teacher) {
  return train_source_only(model, pair.training(), pair.evaluation(), cfg, role);
}

// Baseline: supervised teacher on source, then source-only distillation with
// L_SKD (teacher fixed), then L_TDA on the student.
inline TrainLog train_kd_then_uda(Model& teacher, Model& student, const TrainingData& data, const EvalData& eval,
                                  const TrainConfig& cfg) {
  cfg.validate();
  detail::require_compatible(teacher, student, data);
  detail::require_matches_data(teacher, data);
  detail::require_matches_data(student, data);
  auto opt_t = detail::da_optimizer(teacher, cfg);
  auto opt_kd = detail::kd_optimizer(student, cfg);
  auto opt_s = detail::da_optimizer(student, cfg);
  TrainLog log;
  detail::PhaseRunner runner(data, eval, cfg, log, &teacher, &student);

  runner.run("source", 3, [&](const detail::Batch& b, int epoch, std::size_t, std::size_t) {
    opt_t.set_epoch(epoch);
    return detail::supervised_step(teacher, opt_t, b, epoch, "source");
  });

  runner.run("kd", 4, [&](const detail::Batch& b, int epoch, std::size_t, std::size_t) {
    Graph g;
    auto t = bind_frozen(g, teacher);
    auto s = bind(g, student, Binding::Trainable);
    auto skd = source_kd_loss(s, t, g.constant(b.xs), b.ys, cfg.weights);
    detail::require_finite(skd.total.item(), "L_SKD", epoch, "kd");
    g.backward(skd.total);
    auto ps = student.parameters();
    sgd_step(ps, opt_kd);
    LossReport r;
    r.skd = skd.total.item();
    r.total = r.skd;
    r.beta = 1.0;
    return r;
  });

  runner.run("uda", 2, [&](const detail::Batch& b, int epoch, std::size_t, std::size_t) {
    opt_s.set_epoch(epoch);
    return detail::uda_step(student, opt_s, b, cfg, epoch, "uda");
  });
  return log;
}

inline TrainLog train_kd_then_uda(Model& teacher, Model& student, const DomainPair& pair, const TrainConfig& cfg) {
  return train_kd_then_uda(teacher, student, pair.training(), pair.evaluation(), cfg);
}

// Baseline: L_TDA on the teacher, then target-only distillation with L_TKD
// (no labels, teacher fixed).
inline TrainLog train_uda_then_kd(Model& teacher, Model& student, const TrainingData& data, const EvalData& eval,
                                  const TrainConfig& cfg) {
  cfg.validate();
  detail::require_compatible(teacher, student, data);
  detail::require_matches_data(teacher, data);
  detail::require_matches_data(student, data);
  auto opt_t = detail::da_optimizer(teacher, cfg);
  auto opt_kd = detail::kd_optimizer(student, cfg);
  TrainLog log;
  detail::PhaseRunner runner(data, eval, cfg, log, &teacher, &student);

  runner.run("uda", 2, [&](const detail::Batch& b, int epoch, std::size_t, std::size_t) {
    opt_t.set_epoch(epoch);
    return detail::uda_step(teacher, opt_t, b, cfg, epoch, "uda");
  });

  runner.run("kd", 4, [&](const detail::Batch& b, int epoch, std::size_t, std::size_t) {
    Graph g;
    auto t = bind_frozen(g, teacher);
    auto s = bind(g, student, Binding::Trainable);
    Var tkd = target_kd_loss(s, t, g.constant(b.xt), cfg.weights);
    detail::require_finite(tkd.item(), "L_TKD", epoch, "kd");
    g.backward(tkd);
    auto ps = student.parameters();
    sgd_step(ps, opt_kd);
    LossReport r;
    r.tkd = tkd.item();
    r.total = r.tkd;
    r.beta = 1.0;
    return r;
  });
  return log;
}

inline TrainLog train_uda_then_kd(Model& teacher, Model& student, const DomainPair& pair, const TrainConfig& cfg) {
  return train_uda_then_kd(teacher, student, pair.training(), pair.evaluation(), cfg);
}

}  // namespace kduda
