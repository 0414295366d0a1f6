#include "fedrod/runner.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "fedrod/errors.hpp"

namespace fedrod {

namespace fs = std::filesystem;

Federation build_federation(const ExperimentConfig& config, std::uint64_t seed) {
  const auto& ds = config.dataset;
  Dataset train, test;
  if (ds.kind == "idx") {
    IdxOptions opts;
    opts.num_classes = ds.classes;
    train = load_idx(ds.path, ds.labels_path, opts);
    test = load_idx(ds.test_path, ds.test_labels_path, opts);
  } else {
    train = gen_synthetic(ds.classes, ds.dim, ds.n_per_class, ds.separation, seed, 0);
    test = gen_synthetic(ds.classes, ds.dim, ds.test_per_class, ds.separation, seed, 1);
  }
  // Imbalance first, then partitioning; the test set stays balanced.
  if (config.imbalance_ratio > 1.0) train = exponential_imbalance(train, config.imbalance_ratio, seed);
  auto options = config.federation;
  options.seed = seed;
  return make_federation(config.net, config.hyper_hidden, std::move(train), std::move(test), options);
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
  if (!f) throw std::runtime_error("write failed for " + path.string());
}

std::vector<std::pair<std::string, double>> final_metrics(const MetricsLog& log) {
  std::vector<std::pair<std::string, double>> out;
  if (log.rows.empty()) return out;
  const auto& r = log.rows.back();
  out = {{"gfl_global", r.gfl_global},     {"gfl_local_mean", r.gfl_local_mean},
         {"gfl_local_var", r.gfl_local_var}, {"pfl_global", r.pfl_global},
         {"pfl_personal", r.pfl_personal}, {"drift_mean", r.drift_mean},
         {"drift_var", r.drift_var},       {"train_loss_mean", r.train_loss_mean},
         {"reg_local", r.reg_local},       {"reg_personal", r.reg_personal}};
  if (log.holdout_generic) {
    out.emplace_back("holdout_generic", *log.holdout_generic);
    out.emplace_back("holdout_zero_shot", log.holdout_zero_shot.value_or(NAN));
    out.emplace_back("holdout_finetuned", log.holdout_finetuned.value_or(NAN));
  }
  return out;
}

double parse_double(const std::string& s, const std::string& where) {
  if (s == "nan") return NAN;
  double v = 0.0;
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw FormatError(where + ": bad number '" + s + "'");
  return v;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  return out;
}

std::string run_name(const fs::path& dir) {
  auto p = dir.lexically_normal();
  auto name = p.filename().string();
  if (name.empty()) name = p.parent_path().filename().string();
  return name;
}

}  // namespace

MetricsLog run_single(const ExperimentConfig& config, std::uint64_t seed, const fs::path& out_dir) {
  const auto fed = build_federation(config, seed);
  auto plan = config.plan;
  plan.seed = seed;
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    plan.checkpoint_dir = out_dir / "checkpoints";
  }
  Experiment exp(fed, config.algorithm, plan);
  auto log = exp.run();
  if (!out_dir.empty()) {
    std::ostringstream csv, matrix;
    log.write_csv(csv);
    write_matrix_csv(matrix, log.matrix);
    write_text(out_dir / "metrics.csv", csv.str());
    write_text(out_dir / "metrics.json", log.to_json().dump(2) + "\n");
    write_text(out_dir / "matrix.csv", matrix.str());
    write_text(out_dir / "partition.json", fed.partition.to_json().dump(2) + "\n");
  }
  return log;
}

std::vector<MetricsLog> run_experiment_dir(const ExperimentConfig& config, const RunOptions& options) {
  const auto& dir = config.output_dir;
  if (fs::exists(dir) && !fs::is_directory(dir)) throw std::runtime_error(dir.string() + " is not a directory");
  if (fs::exists(dir) && !fs::is_empty(dir) && !options.force) {
    throw ConfigurationError("output directory " + dir.string() + " is not empty (pass --force to overwrite)");
  }
  fs::create_directories(dir);
  write_text(dir / "resolved.toml", config.to_toml());

  std::vector<MetricsLog> logs;
  for (auto seed : config.seeds) {
    if (options.progress) *options.progress << "seed " << seed << " ..." << std::endl;
    logs.push_back(run_single(config, seed, dir / ("seed_" + std::to_string(seed))));
    if (options.progress && !logs.back().rows.empty()) {
      const auto& r = logs.back().rows.back();
      *options.progress << "  round " << r.round << ": gfl_global " << format_double(r.gfl_global)
                        << ", pfl_personal " << format_double(r.pfl_personal) << std::endl;
    }
  }

  std::ostringstream combined;
  combined << "seed";
  for (const auto& c : MetricsLog::columns()) combined << ',' << c;
  combined << '\n';
  for (std::size_t i = 0; i < logs.size(); ++i) {
    std::ostringstream one;
    logs[i].write_csv(one);
    std::istringstream lines(one.str());
    std::string line;
    std::getline(lines, line);  // header
    while (std::getline(lines, line)) combined << config.seeds[i] << ',' << line << '\n';
  }
  write_text(dir / "metrics.csv", combined.str());

  std::ostringstream summary;
  write_summary_csv(summary, summarize(logs));
  write_text(dir / "summary.csv", summary.str());
  return logs;
}

Summary summarize(const std::vector<MetricsLog>& logs) {
  std::map<std::string, std::vector<double>> values;
  for (const auto& log : logs) {
    for (const auto& [k, v] : final_metrics(log)) values[k].push_back(v);
  }
  Summary out;
  for (const auto& [k, xs] : values) {
    SummaryStat s;
    s.n = xs.size();
    s.mean = mean_var(xs).mean;
    if (xs.size() > 1) {
      double ss = 0.0;
      for (double x : xs) ss += (x - s.mean) * (x - s.mean);
      s.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
    }
    out[k] = s;
  }
  return out;
}

void write_summary_csv(std::ostream& os, const Summary& summary) {
  os << "metric,mean,std,n\n";
  for (const auto& [k, s] : summary) {
    os << k << ',' << format_double(s.mean) << ',' << format_double(s.std) << ',' << s.n << '\n';
  }
}

Summary read_summary_csv(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw FormatError("missing summary " + path.string());
  std::string line;
  if (!std::getline(f, line) || line != "metric,mean,std,n") {
    throw FormatError(path.string() + ": unexpected summary header");
  }
  Summary out;
  std::size_t lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    const auto where = path.string() + ":" + std::to_string(lineno);
    if (cells.size() != 4) throw FormatError(where + ": expected 4 columns");
    SummaryStat s;
    s.mean = parse_double(cells[1], where);
    s.std = parse_double(cells[2], where);
    s.n = static_cast<std::size_t>(parse_double(cells[3], where));
    out[cells[0]] = s;
  }
  return out;
}

std::vector<CompareRow> compare_runs(const std::vector<fs::path>& run_dirs) {
  std::vector<CompareRow> rows;
  for (const auto& dir : run_dirs) {
    const auto summary = read_summary_csv(dir / "summary.csv");
    auto get = [&](const char* key) {
      auto it = summary.find(key);
      if (it == summary.end()) throw FormatError((dir / "summary.csv").string() + ": missing metric " + key);
      return it->second.mean;
    };
    rows.push_back({run_name(dir), get("gfl_global"), get("pfl_global"), get("pfl_personal")});
  }
  return rows;
}

void write_compare_csv(std::ostream& os, const std::vector<CompareRow>& rows) {
  os << "run,gfl_gm,pfl_gm,pfl_pm\n";
  for (const auto& r : rows) {
    os << r.run << ',' << format_double(r.gfl_gm) << ',' << format_double(r.pfl_gm) << ','
       << format_double(r.pfl_pm) << '\n';
  }
}

bool evaluate_assertion(const std::string& expr, const std::vector<CompareRow>& rows) {
  static const char* ops[] = {">=", "<=", "==", ">", "<"};
  std::size_t pos = std::string::npos;
  std::string op;
  for (const char* candidate : ops) {
    pos = expr.find(candidate);
    if (pos != std::string::npos) {
      op = candidate;
      break;
    }
  }
  if (op.empty()) throw ConfigurationError("assertion '" + expr + "' has no comparison operator");

  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t");
    const auto e = s.find_last_not_of(" \t");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  auto operand = [&](const std::string& text) {
    const auto t = trim(text);
    double literal = 0.0;
    auto r = std::from_chars(t.data(), t.data() + t.size(), literal);
    if (!t.empty() && r.ec == std::errc() && r.ptr == t.data() + t.size()) return literal;
    const auto dot = t.rfind('.');
    if (dot == std::string::npos) throw ConfigurationError("operand '" + t + "' must be <run>.<column>");
    const auto run = t.substr(0, dot);
    const auto col = t.substr(dot + 1);
    for (const auto& row : rows) {
      if (row.run != run) continue;
      if (col == "gfl_gm") return row.gfl_gm;
      if (col == "pfl_gm") return row.pfl_gm;
      if (col == "pfl_pm") return row.pfl_pm;
      throw ConfigurationError("unknown column '" + col + "' (expected gfl_gm, pfl_gm or pfl_pm)");
    }
    throw ConfigurationError("unknown run '" + run + "' in assertion");
  };
  const double lhs = operand(expr.substr(0, pos));
  const double rhs = operand(expr.substr(pos + op.size()));
  if (op == ">=") return lhs >= rhs;
  if (op == "<=") return lhs <= rhs;
  if (op == "==") return lhs == rhs;
  if (op == ">") return lhs > rhs;
  return lhs < rhs;
}

}  // namespace fedrod
