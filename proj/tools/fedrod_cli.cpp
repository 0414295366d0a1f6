// fedrod: run, compare, gradcheck, partition-report.
//
// Exit codes: 0 success, 1 invalid configuration or arguments, 2 runtime
// failure, 3 a --assert comparison did not hold.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fedrod/config.hpp"
#include "fedrod/errors.hpp"
#include "fedrod/gradcheck.hpp"
#include "fedrod/runner.hpp"

namespace {

using namespace fedrod;

constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;
constexpr int kExitAssertion = 3;

// --<key> VALUE for every config key, plus --config FILE.
struct ConfigArgs {
  std::string config_file;
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;

  void attach(CLI::App& app) {
    app.add_option("-c,--config", config_file, "TOML-style config file")->check(CLI::ExistingFile);
    for (const auto& key : config_keys()) {
      options[key] = app.add_option("--" + key, values[key], "override config key " + key);
    }
  }

  ExperimentConfig resolve() const {
    RawConfig raw;
    if (!config_file.empty()) raw = parse_config_file(config_file);
    for (const auto& [key, opt] : options) {
      if (opt->count() == 0) continue;
      const auto& text = values.at(key);
      try {
        raw[key] = parse_config_value(text);
      } catch (const ConfigurationError&) {
        ConfigValue v;  // bare words are strings
        v.s = text;
        raw[key] = v;
      }
    }
    return resolve_config(raw);
  }
};

int cmd_run(const ConfigArgs& args, bool force, bool quiet) {
  const auto config = args.resolve();
  RunOptions opts;
  opts.force = force;
  opts.progress = quiet ? nullptr : &std::cerr;
  const auto logs = run_experiment_dir(config, opts);
  write_summary_csv(std::cout, summarize(logs));
  return 0;
}

int cmd_compare(const std::vector<std::string>& dirs, const std::vector<std::string>& asserts,
                const std::string& output) {
  if (dirs.size() < 2) throw ConfigurationError("compare needs at least two run directories");
  std::vector<std::filesystem::path> paths(dirs.begin(), dirs.end());
  const auto rows = compare_runs(paths);
  write_compare_csv(std::cout, rows);
  if (!output.empty()) {
    std::ofstream f(output);
    if (!f) throw std::runtime_error("cannot write " + output);
    write_compare_csv(f, rows);
  }
  int status = 0;
  for (const auto& a : asserts) {
    const bool ok = evaluate_assertion(a, rows);
    std::cerr << (ok ? "PASS  " : "FAIL  ") << a << '\n';
    if (!ok) status = kExitAssertion;
  }
  return status;
}

int cmd_gradcheck(std::uint64_t seed, std::size_t points, double eps, double tol) {
  const auto results = run_gradcheck_suite(seed, points, eps);
  bool ok = true;
  for (const auto& r : results) {
    const bool pass = r.max_relative_error < tol;
    ok = ok && pass;
    std::printf("%-18s max_rel_err %.3e  %s\n", r.name.c_str(), r.max_relative_error, pass ? "ok" : "FAIL");
  }
  return ok ? 0 : kExitRuntime;
}

int cmd_partition_report(const ConfigArgs& args, const std::string& output) {
  const auto config = args.resolve();
  const auto fed = build_federation(config, config.seeds.front());
  auto j = fed.partition.to_json();
  j["training_clients"] = config.federation.clients;
  j["holdout_clients"] = config.federation.holdout_clients;
  j["meta_set_size"] = fed.meta_rows.size();
  const auto text = j.dump(2) + "\n";
  if (output.empty()) {
    std::cout << text;
  } else {
    std::ofstream f(output);
    if (!f) throw std::runtime_error("cannot write " + output);
    f << text;
  }
  for (auto m : fed.partition.empty_clients) std::cerr << "warning: client " << m << " received no samples\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated generic + personalized learning experiments"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "train and evaluate every repetition seed");
  ConfigArgs run_args;
  run_args.attach(*run);
  bool force = false, quiet = false;
  run->add_flag("--force", force, "write into a non-empty output directory");
  run->add_flag("-q,--quiet", quiet, "no progress output");

  auto* compare = app.add_subcommand("compare", "tabulate final G-FL(GM), P-FL(GM), P-FL(PM) of several runs");
  std::vector<std::string> dirs, asserts;
  std::string compare_out;
  compare->add_option("runs", dirs, "run directories holding summary.csv")->required();
  compare->add_option("--assert", asserts, "e.g. \"fedrod.pfl_pm >= fedavg.pfl_pm\"");
  compare->add_option("-o,--output", compare_out, "also write the table to this CSV file");

  auto* grad = app.add_subcommand("gradcheck", "finite-difference checks of every analytic gradient");
  std::uint64_t gc_seed = 0;
  std::size_t gc_points = 10;
  double gc_eps = 1e-5, gc_tol = 1e-4;
  grad->add_option("--seed", gc_seed);
  grad->add_option("--points", gc_points);
  grad->add_option("--eps", gc_eps);
  grad->add_option("--tol", gc_tol);

  auto* part = app.add_subcommand("partition-report", "emit the client partition as JSON without training");
  ConfigArgs part_args;
  part_args.attach(*part);
  std::string part_out;
  part->add_option("-o,--output", part_out, "JSON file (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kExitValidation;
  }

  try {
    if (*run) return cmd_run(run_args, force, quiet);
    if (*compare) return cmd_compare(dirs, asserts, compare_out);
    if (*grad) return cmd_gradcheck(gc_seed, gc_points, gc_eps, gc_tol);
    if (*part) return cmd_partition_report(part_args, part_out);
  } catch (const ConfigurationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return 0;
}
