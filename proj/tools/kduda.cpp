// kduda: experiment CLI for joint distillation + domain adaptation.
//
//   kduda train      --config <file> [--scenario S] [--seed N] [--save-model F]
//   kduda scenarios  --config <file>
//   kduda complexity --config <file>
//   kduda sweep      --config <file> --teachers 64,128,256 --students 16,32,64
//   kduda data       --config <file> [--seed N] --out <prefix>
//
// Exit codes: 0 success, 1 configuration error, 2 numerical abort.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "kduda/kduda.hpp"

namespace {

constexpr int kConfigExit = 1;
constexpr int kNumericalExit = 2;

std::vector<std::size_t> parse_widths(const std::string& text) {
  std::vector<std::size_t> out;
  for (const auto& item : kduda::detail::split(text, ',')) out.push_back(kduda::detail::parse_number<std::size_t>("widths", item));
  if (out.empty()) throw kduda::ConfigError("empty width list");
  return out;
}

int cmd_train(const kduda::ExperimentConfig& cfg, const std::string& scenario_text, std::optional<std::uint64_t> seed,
              const std::string& save_model) {
  const auto scenario = kduda::parse_scenario(scenario_text);
  const auto s = seed.value_or(cfg.seeds.front());
  kduda::TrainLog log;
  kduda::TrainedModels models;
  auto result = kduda::run_scenario(cfg, scenario, s, &log, &models);
  const auto paths = kduda::experiment_paths(cfg);
  kduda::detail::write_file(paths.log(result.scenario, s),
                            [&](std::ostream& os) { kduda::write_train_log_csv(os, log); });
  result.log_path = paths.log(result.scenario, s);
  kduda::write_results_csv(std::cout, {result});
  if (!save_model.empty()) {
    std::ofstream out(save_model);
    if (!out) throw kduda::ConfigError("cannot write " + save_model);
    kduda::save_model(out, models.student);
  }
  std::cerr << "log: " << result.log_path.string() << '\n';
  return 0;
}

int cmd_scenarios(const kduda::ExperimentConfig& cfg) {
  const auto results = kduda::run_experiment(cfg);
  kduda::write_summary_csv(std::cout, kduda::summarize(results));
  std::cerr << "summary: " << kduda::experiment_paths(cfg).summary().string() << '\n';
  return 0;
}

int cmd_complexity(const kduda::ExperimentConfig& cfg) {
  const auto rows = kduda::report_complexity(cfg);
  const auto path = kduda::experiment_paths(cfg).complexity();
  kduda::detail::write_file(path, [&](std::ostream& os) { kduda::write_complexity_csv(os, rows); });
  kduda::write_complexity_csv(std::cout, rows);
  return 0;
}

int cmd_sweep(const kduda::ExperimentConfig& cfg, const std::string& teachers, const std::string& students) {
  const auto cells = kduda::sweep_sizes(cfg, parse_widths(teachers), parse_widths(students));
  const auto path = kduda::experiment_paths(cfg).sweep();
  kduda::detail::write_file(path, [&](std::ostream& os) { kduda::write_sweep_csv(os, cells); });
  kduda::write_sweep_csv(std::cout, cells);
  return 0;
}

int cmd_data(const kduda::ExperimentConfig& cfg, std::optional<std::uint64_t> seed, const std::string& prefix) {
  const auto pair = kduda::make_domain_pair(cfg.dataset, seed.value_or(cfg.seeds.front()));
  std::ofstream data(prefix + ".csv"), eval(prefix + "_eval.csv");
  if (!data || !eval) throw kduda::ConfigError("cannot write " + prefix + ".csv");
  kduda::write_domain_csv(data, eval, pair);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Joint knowledge distillation and unsupervised domain adaptation experiments"};
  app.require_subcommand(1);

  std::string config_path;
  std::string scenario = "joint";
  std::optional<std::uint64_t> seed;
  std::string save_model;
  std::string teachers = "64,128,256";
  std::string students = "16,32,64";
  std::string out_prefix;

  auto add_config = [&](CLI::App* sub) { sub->add_option("--config", config_path, "Experiment config file")->required(); };

  auto* train = app.add_subcommand("train", "Train one scenario for one seed");
  add_config(train);
  train->add_option("--scenario", scenario, "joint, uda_then_kd, kd_then_uda, uda_only or source_only");
  train->add_option("--seed", seed, "Seed (defaults to the first configured seed)");
  train->add_option("--save-model", save_model, "Write the trained student in kduda-model v1 format");

  auto* scenarios = app.add_subcommand("scenarios", "Run every configured scenario and seed");
  add_config(scenarios);

  auto* complexity = app.add_subcommand("complexity", "Parameter and MAC counts of teacher and students");
  add_config(complexity);

  auto* sweep = app.add_subcommand("sweep", "Joint training over a teacher x student width grid");
  add_config(sweep);
  sweep->add_option("--teachers", teachers, "Comma-separated teacher widths")->required();
  sweep->add_option("--students", students, "Comma-separated student widths")->required();

  auto* data = app.add_subcommand("data", "Export a generated domain pair as CSV");
  add_config(data);
  data->add_option("--seed", seed, "Seed (defaults to the first configured seed)");
  data->add_option("--out", out_prefix, "Output prefix")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kConfigExit;
  }

  try {
    const auto cfg = kduda::load_experiment_config(config_path);
    if (train->parsed()) return cmd_train(cfg, scenario, seed, save_model);
    if (scenarios->parsed()) return cmd_scenarios(cfg);
    if (complexity->parsed()) return cmd_complexity(cfg);
    if (sweep->parsed()) return cmd_sweep(cfg, teachers, students);
    if (data->parsed()) return cmd_data(cfg, seed, out_prefix);
  } catch (const kduda::NumericalError& e) {
    std::cerr << "numerical abort: " << e.what() << '\n';
    return kNumericalExit;
  } catch (const kduda::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigExit;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigExit;
  }
  return 0;
}
