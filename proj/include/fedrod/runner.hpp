#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "fedrod/config.hpp"
#include "fedrod/fedcore.hpp"

namespace fedrod {

// Builds the datasets (synthetic or IDX, then the global imbalance) and the
// client partition for one repetition seed.
Federation build_federation(const ExperimentConfig& config, std::uint64_t seed);

// One repetition. When out_dir is nonempty, writes metrics.csv,
// metrics.json, matrix.csv and checkpoints/ into it.
MetricsLog run_single(const ExperimentConfig& config, std::uint64_t seed, const std::filesystem::path& out_dir = {});

struct RunOptions {
  bool force = false;  // allow a non-empty output directory
  std::ostream* progress = nullptr;
};

// Every repetition into <output.dir>/seed_<s>/, plus resolved.toml, a
// combined metrics.csv (leading seed column) and summary.csv.
std::vector<MetricsLog> run_experiment_dir(const ExperimentConfig& config, const RunOptions& options = {});

// summary.csv rows: metric,mean,std,n over the final row of every seed.
struct SummaryStat {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for a single seed
  std::size_t n = 0;
};
using Summary = std::map<std::string, SummaryStat>;

Summary summarize(const std::vector<MetricsLog>& logs);
void write_summary_csv(std::ostream& os, const Summary& summary);
Summary read_summary_csv(const std::filesystem::path& path);

struct CompareRow {
  std::string run;
  double gfl_gm = 0.0;
  double pfl_gm = 0.0;
  double pfl_pm = 0.0;
};

std::vector<CompareRow> compare_runs(const std::vector<std::filesystem::path>& run_dirs);
void write_compare_csv(std::ostream& os, const std::vector<CompareRow>& rows);

// "<run>.<column> <op> <run>.<column or number>", op in >= <= > < ==.
// Throws ConfigurationError when malformed or naming an unknown run/column.
bool evaluate_assertion(const std::string& expr, const std::vector<CompareRow>& rows);

}  // namespace fedrod
