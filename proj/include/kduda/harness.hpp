#pragma once

// Experiment orchestration: `key = value` configs, scenario runs over seeds,
// CSV outputs, complexity tables and teacher/student width sweeps.

#include <algorithm>
#include <array>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <tuple>
#include <type_traits>
#include <vector>

#include "kduda/data.hpp"
#include "kduda/losses.hpp"
#include "kduda/models.hpp"
#include "kduda/trainer.hpp"

namespace kduda {

enum class Scenario { Joint, UdaThenKd, KdThenUda, UdaOnly, SourceOnly };

inline constexpr std::array<std::pair<Scenario, const char*>, 5> kScenarioNames{{
    {Scenario::Joint, "joint"},
    {Scenario::UdaThenKd, "uda_then_kd"},
    {Scenario::KdThenUda, "kd_then_uda"},
    {Scenario::UdaOnly, "uda_only"},
    {Scenario::SourceOnly, "source_only"},
}};

inline std::string scenario_name(Scenario s) {
  for (auto [v, name] : kScenarioNames)
    if (v == s) return name;
  return "unknown";
}

inline Scenario parse_scenario(const std::string& name) {
  for (auto [v, n] : kScenarioNames)
    if (name == n) return v;
  std::string valid;
  for (auto [v, n] : kScenarioNames) valid += (valid.empty() ? "" : ", ") + std::string(n);
  throw ConfigError("unknown scenario '" + name + "'; valid scenarios: " + valid);
}

using ConfigMap = std::map<std::string, std::string>;

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc{} || res.ptr != text.data() + text.size()) {
    throw ConfigError("config key '" + key + "': cannot parse '" + text + "'");
  }
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + text + "'");
}

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& text) {
  std::vector<T> out;
  for (const auto& item : split(text, ',')) out.push_back(parse_number<T>(key, item));
  if (out.empty()) throw ConfigError("config key '" + key + "': empty list");
  return out;
}

template <typename T>
std::string join(const std::vector<T>& xs, const char* sep = ",") {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += sep;
    if constexpr (std::is_floating_point_v<T>) out += format_double(xs[i]);
    else out += std::to_string(xs[i]);
  }
  return out;
}

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace detail

// Flat `key = value` lines; `#` starts a comment.
inline ConfigMap parse_config(std::istream& is) {
  ConfigMap out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    auto key = detail::trim(line.substr(0, eq));
    auto value = detail::trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    if (out.count(key)) throw ConfigError("config line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    out[key] = value;
  }
  return out;
}

inline ConfigMap parse_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  return parse_config(in);
}

enum class Generator { Blobs, TwoMoons };

struct DatasetSpec {
  Generator generator = Generator::Blobs;
  std::size_t n_per_domain = 400;
  std::size_t classes = 3;
  std::size_t dim = 2;
  double mean_shift = 3.0;
  double scale = 1.0;
  double rotation_deg = 45.0;
  double noise_std = 0.1;
  bool standardize = true;

  std::size_t num_classes() const { return generator == Generator::TwoMoons ? 2 : classes; }
  std::size_t input_dim() const { return generator == Generator::TwoMoons ? 2 : dim; }
};

inline DomainPair make_domain_pair(const DatasetSpec& d, std::uint64_t seed) {
  DomainPair p = d.generator == Generator::TwoMoons
                     ? gen_two_moons_shift(d.n_per_domain, d.rotation_deg, d.noise_std, seed)
                     : gen_blob_shift(d.n_per_domain, d.classes, d.dim, d.mean_shift, d.scale, seed);
  if (d.standardize) standardize(p);
  return p;
}

struct ExperimentConfig {
  DatasetSpec dataset;
  std::vector<std::size_t> teacher_hidden{128, 128, 64};
  std::vector<std::size_t> student_hidden{32, 16};
  // Extra student shapes listed by report_complexity.
  std::vector<std::vector<std::size_t>> complexity_students{{64, 32}, {32, 16}};
  TrainConfig train = desk_train_defaults();
  std::vector<Scenario> scenarios{Scenario::Joint, Scenario::UdaThenKd, Scenario::KdThenUda, Scenario::UdaOnly};
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::string output_dir = "kduda_out";
  std::size_t threads = 1;

  static TrainConfig desk_train_defaults() {
    TrainConfig t;
    t.epochs = 100;
    return t;
  }

  ModelSpec teacher_spec(std::uint64_t seed) const {
    return {dataset.input_dim(), teacher_hidden, dataset.num_classes(), seed * 2654435761ULL + 1};
  }
  ModelSpec student_spec(std::uint64_t seed) const {
    return {dataset.input_dim(), student_hidden, dataset.num_classes(), seed * 2654435761ULL + 2};
  }

  void validate() const {
    if (scenarios.empty()) throw ConfigError("config: at least one scenario is required");
    if (seeds.empty()) throw ConfigError("config: at least one seed is required");
    if (threads == 0) throw ConfigError("config: experiment.threads must be positive");
    try {
      teacher_spec(0).validate();
      student_spec(0).validate();
      train.validate();
      if (dataset.generator == Generator::Blobs && (dataset.classes < 2 || dataset.dim < 2)) {
        throw ParameterError("dataset: blobs need classes >= 2 and dim >= 2");
      }
      if (dataset.n_per_domain < std::max<std::size_t>(4, train.batch_size)) {
        throw ParameterError("dataset: n_per_domain must be at least max(4, batch_size)");
      }
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
  }
};

namespace detail {

using Setter = std::function<void(ExperimentConfig&, const std::string& key, const std::string& value)>;

inline std::vector<std::size_t> parse_widths(const std::string& key, const std::string& v) {
  return parse_list<std::size_t>(key, v);
}

inline const std::map<std::string, Setter>& config_setters() {
  static const std::map<std::string, Setter> setters = [] {
    std::map<std::string, Setter> s;
    auto num = [](auto member) {
      return [member](ExperimentConfig& c, const std::string& k, const std::string& v) {
        auto& field = member(c);
        field = parse_number<std::remove_reference_t<decltype(field)>>(k, v);
      };
    };
    s["dataset.generator"] = [](ExperimentConfig& c, const std::string& k, const std::string& v) {
      if (v == "blobs") c.dataset.generator = Generator::Blobs;
      else if (v == "two_moons") c.dataset.generator = Generator::TwoMoons;
      else throw ConfigError("config key '" + k + "': expected blobs or two_moons, got '" + v + "'");
    };
    s["dataset.n_per_domain"] = num([](ExperimentConfig& c) -> auto& { return c.dataset.n_per_domain; });
    s["dataset.classes"] = num([](ExperimentConfig& c) -> auto& { return c.dataset.classes; });
    s["dataset.dim"] = num([](ExperimentConfig& c) -> auto& { return c.dataset.dim; });
    s["dataset.mean_shift"] = num([](ExperimentConfig& c) -> auto& { return c.dataset.mean_shift; });
    s["dataset.scale"] = num([](ExperimentConfig& c) -> auto& { return c.dataset.scale; });
    s["dataset.rotation_deg"] = num([](ExperimentConfig& c) -> auto& { return c.dataset.rotation_deg; });
    s["dataset.noise_std"] = num([](ExperimentConfig& c) -> auto& { return c.dataset.noise_std; });
    s["dataset.standardize"] = [](ExperimentConfig& c, const std::string& k, const std::string& v) {
      c.dataset.standardize = parse_bool(k, v);
    };
    s["teacher.hidden"] = [](ExperimentConfig& c, const std::string& k, const std::string& v) {
      c.teacher_hidden = parse_widths(k, v);
    };
    s["student.hidden"] = [](ExperimentConfig& c, const std::string& k, const std::string& v) {
      c.student_hidden = parse_widths(k, v);
    };
    s["complexity.students"] = [](ExperimentConfig& c, const std::string& k, const std::string& v) {
      c.complexity_students.clear();
      for (const auto& spec : split(v, ';')) c.complexity_students.push_back(parse_widths(k, spec));
    };
    s["train.epochs"] = num([](ExperimentConfig& c) -> auto& { return c.train.epochs; });
    s["train.batch_size"] = num([](ExperimentConfig& c) -> auto& { return c.train.batch_size; });
    s["train.beta_start"] = num([](ExperimentConfig& c) -> auto& { return c.train.beta_start; });
    s["train.beta_end"] = num([](ExperimentConfig& c) -> auto& { return c.train.beta_end; });
    s["train.beta_update"] = [](ExperimentConfig& c, const std::string& k, const std::string& v) {
      if (v == "epoch") c.train.beta_update = BetaUpdate::PerEpoch;
      else if (v == "batch") c.train.beta_update = BetaUpdate::PerBatch;
      else throw ConfigError("config key '" + k + "': expected epoch or batch");
    };
    s["train.tau"] = num([](ExperimentConfig& c) -> auto& { return c.train.weights.tau; });
    s["train.alpha"] = num([](ExperimentConfig& c) -> auto& { return c.train.weights.alpha; });
    s["train.gamma"] = num([](ExperimentConfig& c) -> auto& { return c.train.weights.gamma; });
    s["train.tau_squared"] = [](ExperimentConfig& c, const std::string& k, const std::string& v) {
      c.train.weights.tau_squared = parse_bool(k, v);
    };
    s["train.gamma_mode"] = [](ExperimentConfig& c, const std::string& k, const std::string& v) {
      if (v == "constant") c.train.gamma_mode = GammaMode::Constant;
      else if (v == "ramp") c.train.gamma_mode = GammaMode::Ramp;
      else throw ConfigError("config key '" + k + "': expected constant or ramp");
    };
    s["train.kernel"] = [](ExperimentConfig& c, const std::string& k, const std::string& v) {
      if (v == "median") c.train.kernel.mode = BandwidthMode::MedianHeuristic;
      else if (v == "fixed") c.train.kernel.mode = BandwidthMode::Fixed;
      else throw ConfigError("config key '" + k + "': expected median or fixed");
    };
    s["train.kernel_bandwidths"] = [](ExperimentConfig& c, const std::string& k, const std::string& v) {
      c.train.kernel.bandwidths = parse_list<double>(k, v);
    };
    s["train.lr_da"] = num([](ExperimentConfig& c) -> auto& { return c.train.lr_da; });
    s["train.lr_kd"] = num([](ExperimentConfig& c) -> auto& { return c.train.lr_kd; });
    s["train.momentum"] = num([](ExperimentConfig& c) -> auto& { return c.train.momentum; });
    s["train.lr_da_decay"] = [](ExperimentConfig& c, const std::string& k, const std::string& v) {
      if (v == "exponential") c.train.lr_da_decay = LrDecay::Exponential;
      else if (v == "constant") c.train.lr_da_decay = LrDecay::Constant;
      else throw ConfigError("config key '" + k + "': expected exponential or constant");
    };
    s["train.lr_da_final_ratio"] = num([](ExperimentConfig& c) -> auto& { return c.train.lr_da_final_ratio; });
    s["train.optimizers"] = [](ExperimentConfig& c, const std::string& k, const std::string& v) {
      if (v == "dual") c.train.optimizers = OptimizerMode::Dual;
      else if (v == "single") c.train.optimizers = OptimizerMode::Single;
      else throw ConfigError("config key '" + k + "': expected dual or single");
    };
    s["train.eval_every"] = num([](ExperimentConfig& c) -> auto& { return c.train.eval_every; });
    s["experiment.scenarios"] = [](ExperimentConfig& c, const std::string&, const std::string& v) {
      c.scenarios.clear();
      for (const auto& name : split(v, ',')) c.scenarios.push_back(parse_scenario(name));
    };
    s["experiment.seeds"] = [](ExperimentConfig& c, const std::string& k, const std::string& v) {
      c.seeds = parse_list<std::uint64_t>(k, v);
    };
    s["experiment.output_dir"] = [](ExperimentConfig& c, const std::string&, const std::string& v) {
      c.output_dir = v;
    };
    s["experiment.threads"] = num([](ExperimentConfig& c) -> auto& { return c.threads; });
    return s;
  }();
  return setters;
}

}  // namespace detail

inline ExperimentConfig make_experiment_config(const ConfigMap& map) {
  ExperimentConfig cfg;
  const auto& setters = detail::config_setters();
  for (const auto& [key, value] : map) {
    auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError("unknown config key '" + key + "'");
    it->second(cfg, key, value);
  }
  cfg.validate();
  return cfg;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  return make_experiment_config(parse_config_file(path));
}

// Every setting that affects results, in a fixed order. Output location and
// thread count are excluded.
inline std::string canonical_config_text(const ExperimentConfig& c) {
  using detail::format_double;
  using detail::join;
  const auto& d = c.dataset;
  const auto& t = c.train;
  std::ostringstream os;
  os << "dataset.generator = " << (d.generator == Generator::Blobs ? "blobs" : "two_moons") << '\n'
     << "dataset.n_per_domain = " << d.n_per_domain << '\n'
     << "dataset.classes = " << d.classes << '\n'
     << "dataset.dim = " << d.dim << '\n'
     << "dataset.mean_shift = " << format_double(d.mean_shift) << '\n'
     << "dataset.scale = " << format_double(d.scale) << '\n'
     << "dataset.rotation_deg = " << format_double(d.rotation_deg) << '\n'
     << "dataset.noise_std = " << format_double(d.noise_std) << '\n'
     << "dataset.standardize = " << (d.standardize ? "true" : "false") << '\n'
     << "teacher.hidden = " << join(c.teacher_hidden) << '\n'
     << "student.hidden = " << join(c.student_hidden) << '\n'
     << "train.epochs = " << t.epochs << '\n'
     << "train.batch_size = " << t.batch_size << '\n'
     << "train.beta_start = " << format_double(t.beta_start) << '\n'
     << "train.beta_end = " << format_double(t.beta_end) << '\n'
     << "train.beta_update = " << (t.beta_update == BetaUpdate::PerEpoch ? "epoch" : "batch") << '\n'
     << "train.tau = " << format_double(t.weights.tau) << '\n'
     << "train.alpha = " << format_double(t.weights.alpha) << '\n'
     << "train.gamma = " << format_double(t.weights.gamma) << '\n'
     << "train.tau_squared = " << (t.weights.tau_squared ? "true" : "false") << '\n'
     << "train.gamma_mode = " << (t.gamma_mode == GammaMode::Constant ? "constant" : "ramp") << '\n'
     << "train.kernel = " << (t.kernel.mode == BandwidthMode::Fixed ? "fixed" : "median") << '\n'
     << "train.kernel_bandwidths = " << join(t.kernel.bandwidths) << '\n'
     << "train.lr_da = " << format_double(t.lr_da) << '\n'
     << "train.lr_kd = " << format_double(t.lr_kd) << '\n'
     << "train.momentum = " << format_double(t.momentum) << '\n'
     << "train.lr_da_decay = " << (t.lr_da_decay == LrDecay::Exponential ? "exponential" : "constant") << '\n'
     << "train.lr_da_final_ratio = " << format_double(t.lr_da_final_ratio) << '\n'
     << "train.optimizers = " << (t.optimizers == OptimizerMode::Dual ? "dual" : "single") << '\n'
     << "train.eval_every = " << t.eval_every << '\n';
  return os.str();
}

inline std::string config_hash(const ExperimentConfig& c) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(detail::fnv1a(canonical_config_text(c))));
  return buf;
}

struct ScenarioResult {
  std::string scenario;
  std::uint64_t seed = 0;
  double student_tgt_acc = 0.0;
  double student_src_acc = 0.0;
  double teacher_tgt_acc = 0.0;
  double teacher_src_acc = 0.0;
  Complexity student;
  Complexity teacher;
  double seconds = 0.0;
  std::filesystem::path log_path;
};

// The last evaluated value of a log column.
inline double last_evaluated(const TrainLog& log, double EpochRecord::*field) {
  for (auto it = log.epochs.rbegin(); it != log.epochs.rend(); ++it) {
    if (!std::isnan((*it).*field)) return (*it).*field;
  }
  return std::numeric_limits<double>::quiet_NaN();
}

// Trains one (scenario, seed) cell. source_only trains the compact student;
// scenarios that never train a teacher report NaN teacher accuracies.
struct TrainedModels {
  Model teacher;
  Model student;
};

inline ScenarioResult run_scenario(const ExperimentConfig& cfg, Scenario scenario, std::uint64_t seed,
                                   TrainLog* log_out = nullptr, TrainedModels* models_out = nullptr) {
  const auto pair = make_domain_pair(cfg.dataset, seed);
  Model teacher = build(cfg.teacher_spec(seed));
  Model student = build(cfg.student_spec(seed));
  TrainConfig tc = cfg.train;
  tc.seed = seed;

  const auto start = std::chrono::steady_clock::now();
  TrainLog log;
  switch (scenario) {
    case Scenario::Joint: log = train_joint(teacher, student, pair, tc); break;
    case Scenario::UdaThenKd: log = train_uda_then_kd(teacher, student, pair, tc); break;
    case Scenario::KdThenUda: log = train_kd_then_uda(teacher, student, pair, tc); break;
    case Scenario::UdaOnly: log = train_uda_only(student, pair, tc, ModelRole::Student); break;
    case Scenario::SourceOnly: log = train_source_only(student, pair, tc, ModelRole::Student); break;
  }
  ScenarioResult r;
  r.scenario = scenario_name(scenario);
  r.seed = seed;
  r.student_tgt_acc = last_evaluated(log, &EpochRecord::student_tgt_acc);
  r.student_src_acc = last_evaluated(log, &EpochRecord::student_src_acc);
  r.teacher_tgt_acc = last_evaluated(log, &EpochRecord::teacher_tgt_acc);
  r.teacher_src_acc = last_evaluated(log, &EpochRecord::teacher_src_acc);
  r.student = count_complexity(student);
  r.teacher = count_complexity(teacher);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (log_out) *log_out = std::move(log);
  if (models_out) *models_out = {std::move(teacher), std::move(student)};
  return r;
}

struct SummaryRow {
  std::string scenario;
  std::size_t runs = 0;
  double mean_student_tgt_acc = 0.0;
  double std_student_tgt_acc = 0.0;  // sample standard deviation; 0 for a single run
  double mean_student_src_acc = 0.0;
  double mean_teacher_tgt_acc = 0.0;
};

inline std::pair<double, double> mean_and_std(const std::vector<double>& xs) {
  double m = 0.0;
  for (double x : xs) m += x;
  m /= static_cast<double>(xs.size());
  if (xs.size() < 2) return {m, 0.0};
  double ss = 0.0;
  for (double x : xs) ss += (x - m) * (x - m);
  return {m, std::sqrt(ss / static_cast<double>(xs.size() - 1))};
}

// Per-scenario aggregates in first-appearance order.
inline std::vector<SummaryRow> summarize(const std::vector<ScenarioResult>& results) {
  std::vector<std::string> order;
  for (const auto& r : results)
    if (std::find(order.begin(), order.end(), r.scenario) == order.end()) order.push_back(r.scenario);
  std::vector<SummaryRow> rows;
  for (const auto& name : order) {
    std::vector<double> tgt, src, ttgt;
    for (const auto& r : results) {
      if (r.scenario != name) continue;
      tgt.push_back(r.student_tgt_acc);
      src.push_back(r.student_src_acc);
      ttgt.push_back(r.teacher_tgt_acc);
    }
    SummaryRow row;
    row.scenario = name;
    row.runs = tgt.size();
    std::tie(row.mean_student_tgt_acc, row.std_student_tgt_acc) = mean_and_std(tgt);
    row.mean_student_src_acc = mean_and_std(src).first;
    row.mean_teacher_tgt_acc = mean_and_std(ttgt).first;
    rows.push_back(row);
  }
  return rows;
}

inline constexpr const char* kSummaryHeader =
    "scenario,runs,mean_student_tgt_acc,std_student_tgt_acc,mean_student_src_acc,mean_teacher_tgt_acc";

inline void write_summary_csv(std::ostream& os, const std::vector<SummaryRow>& rows) {
  using detail::format_double;
  os << kSummaryHeader << '\n';
  for (const auto& r : rows) {
    os << r.scenario << ',' << r.runs << ',' << format_double(r.mean_student_tgt_acc) << ','
       << format_double(r.std_student_tgt_acc) << ',' << format_double(r.mean_student_src_acc) << ','
       << format_double(r.mean_teacher_tgt_acc) << '\n';
  }
}

inline constexpr const char* kResultsHeader =
    "scenario,seed,student_tgt_acc,student_src_acc,teacher_tgt_acc,teacher_src_acc,student_params,student_macs,"
    "teacher_params,teacher_macs,seconds";

inline void write_results_csv(std::ostream& os, const std::vector<ScenarioResult>& results) {
  using detail::format_double;
  os << kResultsHeader << '\n';
  for (const auto& r : results) {
    os << r.scenario << ',' << r.seed << ',' << format_double(r.student_tgt_acc) << ','
       << format_double(r.student_src_acc) << ',' << format_double(r.teacher_tgt_acc) << ','
       << format_double(r.teacher_src_acc) << ',' << r.student.params << ',' << r.student.macs_per_sample << ','
       << r.teacher.params << ',' << r.teacher.macs_per_sample << ',' << format_double(r.seconds) << '\n';
  }
}

struct ExperimentPaths {
  std::filesystem::path dir;
  std::string hash;

  std::filesystem::path log(const std::string& scenario, std::uint64_t seed) const {
    return dir / ("log_" + hash + "_" + scenario + "_seed" + std::to_string(seed) + ".csv");
  }
  std::filesystem::path summary() const { return dir / ("summary_" + hash + ".csv"); }
  std::filesystem::path results() const { return dir / ("results_" + hash + ".csv"); }
  std::filesystem::path complexity() const { return dir / ("complexity_" + hash + ".csv"); }
  std::filesystem::path sweep() const { return dir / ("sweep_" + hash + ".csv"); }
};

inline ExperimentPaths experiment_paths(const ExperimentConfig& cfg) {
  return {cfg.output_dir, config_hash(cfg)};
}

namespace detail {

// Runs fn(i) for i in [0, n) on up to `threads` workers. The first exception
// is rethrown after all workers finish.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::jthread> pool;
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  pool.clear();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline void write_file(const std::filesystem::path& path, const std::function<void(std::ostream&)>& body) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  body(out);
}

}  // namespace detail

// Trains every (scenario, seed) cell, writes one TrainLog CSV per cell, the
// per-run results CSV and the per-scenario summary CSV.
inline std::vector<ScenarioResult> run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  const auto paths = experiment_paths(cfg);
  struct Cell {
    Scenario scenario;
    std::uint64_t seed;
  };
  std::vector<Cell> cells;
  for (auto s : cfg.scenarios)
    for (auto seed : cfg.seeds) cells.push_back({s, seed});

  std::vector<ScenarioResult> results(cells.size());
  detail::parallel_for(cells.size(), cfg.threads, [&](std::size_t i) {
    TrainLog log;
    results[i] = run_scenario(cfg, cells[i].scenario, cells[i].seed, &log);
    results[i].log_path = paths.log(results[i].scenario, cells[i].seed);
    detail::write_file(results[i].log_path, [&](std::ostream& os) { write_train_log_csv(os, log); });
  });
  detail::write_file(paths.results(), [&](std::ostream& os) { write_results_csv(os, results); });
  detail::write_file(paths.summary(), [&](std::ostream& os) { write_summary_csv(os, summarize(results)); });
  return results;
}

struct ComplexityRow {
  std::string model;
  std::vector<std::size_t> hidden;
  Complexity complexity;
  double mac_ratio = 1.0;  // macs / teacher macs
};

inline std::vector<ComplexityRow> report_complexity(const ExperimentConfig& cfg) {
  const auto teacher = count_complexity(cfg.teacher_spec(0));
  std::vector<ComplexityRow> rows{{"teacher", cfg.teacher_hidden, teacher, 1.0}};
  std::vector<std::vector<std::size_t>> students{cfg.student_hidden};
  for (const auto& s : cfg.complexity_students)
    if (std::find(students.begin(), students.end(), s) == students.end()) students.push_back(s);
  for (const auto& hidden : students) {
    ModelSpec spec{cfg.dataset.input_dim(), hidden, cfg.dataset.num_classes(), 0};
    const auto c = count_complexity(spec);
    rows.push_back({"student", hidden, c,
                    static_cast<double>(c.macs_per_sample) / static_cast<double>(teacher.macs_per_sample)});
  }
  return rows;
}

inline void write_complexity_csv(std::ostream& os, const std::vector<ComplexityRow>& rows) {
  os << "model,hidden,params,macs,mac_ratio\n";
  for (const auto& r : rows) {
    os << r.model << ',' << detail::join(r.hidden, "-") << ',' << r.complexity.params << ','
       << r.complexity.macs_per_sample << ',' << detail::format_double(r.mac_ratio) << '\n';
  }
}

// Width w maps to hidden layers [w, w, w/2] for a teacher and [w, w/2] for a
// student, matching the default 128 -> [128,128,64] and 32 -> [32,16] shapes.
inline std::vector<std::size_t> teacher_hidden_for_width(std::size_t w) { return {w, w, std::max<std::size_t>(1, w / 2)}; }
inline std::vector<std::size_t> student_hidden_for_width(std::size_t w) { return {w, std::max<std::size_t>(1, w / 2)}; }

struct SweepCell {
  std::size_t teacher_width = 0;
  std::size_t student_width = 0;
  Complexity teacher;
  Complexity student;
  std::size_t runs = 0;
  double mean_student_tgt_acc = 0.0;
  double std_student_tgt_acc = 0.0;
};

// Joint training over the teacher x student width grid, every cell over all
// configured seeds.
inline std::vector<SweepCell> sweep_sizes(const ExperimentConfig& cfg, const std::vector<std::size_t>& teacher_widths,
                                          const std::vector<std::size_t>& student_widths) {
  if (teacher_widths.empty() || student_widths.empty()) throw ConfigError("sweep: width lists must be non-empty");
  cfg.validate();
  struct Job {
    std::size_t cell;
    std::uint64_t seed;
  };
  std::vector<SweepCell> cells;
  std::vector<ExperimentConfig> cell_cfgs;
  for (auto tw : teacher_widths) {
    for (auto sw : student_widths) {
      if (tw == 0 || sw == 0) throw ConfigError("sweep: widths must be positive");
      ExperimentConfig c = cfg;
      c.teacher_hidden = teacher_hidden_for_width(tw);
      c.student_hidden = student_hidden_for_width(sw);
      c.scenarios = {Scenario::Joint};
      SweepCell cell;
      cell.teacher_width = tw;
      cell.student_width = sw;
      cell.teacher = count_complexity(c.teacher_spec(0));
      cell.student = count_complexity(c.student_spec(0));
      cells.push_back(cell);
      cell_cfgs.push_back(std::move(c));
    }
  }
  std::vector<Job> jobs;
  for (std::size_t i = 0; i < cells.size(); ++i)
    for (auto seed : cfg.seeds) jobs.push_back({i, seed});
  std::vector<double> acc(jobs.size());
  detail::parallel_for(jobs.size(), cfg.threads, [&](std::size_t j) {
    acc[j] = run_scenario(cell_cfgs[jobs[j].cell], Scenario::Joint, jobs[j].seed).student_tgt_acc;
  });
  for (std::size_t i = 0; i < cells.size(); ++i) {
    std::vector<double> xs;
    for (std::size_t j = 0; j < jobs.size(); ++j)
      if (jobs[j].cell == i) xs.push_back(acc[j]);
    cells[i].runs = xs.size();
    std::tie(cells[i].mean_student_tgt_acc, cells[i].std_student_tgt_acc) = mean_and_std(xs);
  }
  return cells;
}

inline void write_sweep_csv(std::ostream& os, const std::vector<SweepCell>& cells) {
  using detail::format_double;
  os << "teacher_width,student_width,teacher_params,teacher_macs,student_params,student_macs,runs,"
        "mean_student_tgt_acc,std_student_tgt_acc\n";
  for (const auto& c : cells) {
    os << c.teacher_width << ',' << c.student_width << ',' << c.teacher.params << ',' << c.teacher.macs_per_sample
       << ',' << c.student.params << ',' << c.student.macs_per_sample << ',' << c.runs << ','
       << format_double(c.mean_student_tgt_acc) << ',' << format_double(c.std_student_tgt_acc) << '\n';
  }
}

}  // namespace kduda
