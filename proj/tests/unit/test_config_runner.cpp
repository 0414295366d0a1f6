#include <fstream>
#include <sstream>

#include "doctest.h"
#include "fedrod/config.hpp"
#include "fedrod/errors.hpp"
#include "fedrod/runner.hpp"
#include "helpers.hpp"

using namespace fedrod;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

// A config small enough to run in well under a second.
std::string tiny_config(const std::filesystem::path& out) {
  return "algorithm = \"fedrod\"\n"
         "rounds = 2\n"
         "clients = 4\n"
         "participation = 0.5\n"
         "local_epochs = 1\n"
         "alpha = 0.5\n"
         "[dataset]\n"
         "classes = 3\n"
         "dim = 4\n"
         "n_per_class = 20\n"
         "test_per_class = 10\n"
         "[model]\n"
         "hidden = [8]\n"
         "feature_dim = 4\n"
         "[output]\n"
         "dir = '" + out.string() + "'\n";
}

}  // namespace

TEST_CASE("minimal config resolves to the documented defaults") {
  const auto c = resolve_config(parse_config_text("algorithm = \"fedavg\"\n"));
  CHECK(c.plan.rounds == 100);
  CHECK(c.plan.local_epochs == 5);
  CHECK(c.plan.sgd.batch_size == 40);
  CHECK(c.plan.sgd.lr0 == 0.01);
  CHECK(c.plan.sgd.lr_round_decay == 0.99);
  CHECK(c.plan.sgd.momentum == 0.9);
  CHECK(c.plan.sgd.weight_decay == 1e-5);
  CHECK(c.algorithm.loss.kind == LossKind::CE);
  CHECK(resolve_config(parse_config_text("algorithm = \"fedrod\"")).algorithm.loss.kind == LossKind::BSM);
  CHECK(resolve_config(parse_config_text("algorithm = \"ditto\"")).algorithm.lambda == 0.75);
}

TEST_CASE("config errors name the offending key") {
  auto error_of = [](const std::string& text) {
    try {
      resolve_config(parse_config_text(text));
    } catch (const ConfigurationError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  CHECK(error_of("participation = 0").find("participation") != std::string::npos);
  CHECK(error_of("learning_rate = 0.1").find("learning_rate") != std::string::npos);
  CHECK(error_of("rounds = \"many\"").find("rounds") != std::string::npos);
  CHECK(error_of("alpha = -1").find("alpha") != std::string::npos);
  CHECK(error_of("algorithm = \"scaffold\"").find("scaffold") != std::string::npos);
  CHECK_THROWS_AS(parse_config_text("rounds = 1\nrounds = 2\n"), ConfigurationError);
  CHECK_THROWS_AS(parse_config_text("rounds 1\n"), ConfigurationError);
  CHECK_THROWS_AS(parse_config_text("seeds = [1, 2\n"), ConfigurationError);
}

TEST_CASE("later values override the file") {
  auto raw = parse_config_text("alpha = 0.1\n");
  raw["alpha"] = parse_config_value("0.3");
  CHECK(resolve_config(raw).federation.alpha == 0.3);
}

TEST_CASE("parse_config_value kinds") {
  CHECK(parse_config_value("true").kind == ConfigValue::Kind::Bool);
  CHECK(parse_config_value("12").i == 12);
  CHECK(parse_config_value("1e-3").d == 1e-3);
  CHECK(parse_config_value("'a\\b'").s == "a\\b");
  CHECK(parse_config_value("\"x\\ty\"").s == "x\ty");
  const auto arr = parse_config_value("[1, 2, 3]");
  CHECK(arr.kind == ConfigValue::Kind::Array);
  CHECK(arr.items.size() == 3);
}

TEST_CASE("resolved config round-trips") {
  const auto a = resolve_config(parse_config_text("algorithm = \"fedrod_hyper\"\nseeds = [3, 4]\nalpha = 0.2\n"));
  const auto text = a.to_toml();
  const auto b = resolve_config(parse_config_text(text));
  CHECK(b.to_toml() == text);
  CHECK(b.seeds == std::vector<std::uint64_t>{3, 4});
  CHECK(b.algorithm.kind == Algorithm::FedRoDHyper);
}

TEST_CASE("seed and repetitions expand to consecutive seeds") {
  const auto c = resolve_config(parse_config_text("seed = 7\nrepetitions = 3\n"));
  CHECK(c.seeds == std::vector<std::uint64_t>{7, 8, 9});
}

TEST_CASE("run directory: outputs, refusal, summary") {
  const auto dir = testing::scratch_dir("runner");
  auto config = resolve_config(parse_config_text("repetitions = 2\n" + tiny_config(dir / "run")));
  const auto logs = run_experiment_dir(config);
  CHECK(logs.size() == 2);
  for (const char* f : {"resolved.toml", "metrics.csv", "summary.csv", "seed_0/metrics.csv", "seed_0/metrics.json",
                        "seed_0/matrix.csv", "seed_1/partition.json"}) {
    CHECK_MESSAGE(std::filesystem::exists(dir / "run" / f), f);
  }
  CHECK_THROWS_AS(run_experiment_dir(config), ConfigurationError);
  RunOptions force;
  force.force = true;
  CHECK_NOTHROW(run_experiment_dir(config, force));

  const auto summary = read_summary_csv(dir / "run" / "summary.csv");
  REQUIRE(summary.count("gfl_global") == 1);
  const auto s = summary.at("gfl_global");
  CHECK(s.n == 2);
  const double a = logs[0].rows.back().gfl_global, b = logs[1].rows.back().gfl_global;
  CHECK(s.mean == doctest::Approx((a + b) / 2));
  CHECK(s.std == doctest::Approx(std::abs(a - b) / std::sqrt(2.0)));

  const auto combined = slurp(dir / "run" / "metrics.csv");
  CHECK(combined.rfind("seed,round,", 0) == 0);
}

TEST_CASE("metrics.csv is byte-identical across runs, serial or parallel") {
  const auto dir = testing::scratch_dir("determinism");
  auto config = resolve_config(parse_config_text(tiny_config(dir / "a")));
  run_experiment_dir(config);
  config.output_dir = dir / "b";
  run_experiment_dir(config);
  config.output_dir = dir / "c";
  config.plan.parallel = false;
  run_experiment_dir(config);
  const auto a = slurp(dir / "a" / "metrics.csv");
  CHECK(!a.empty());
  CHECK(a == slurp(dir / "b" / "metrics.csv"));
  CHECK(a == slurp(dir / "c" / "metrics.csv"));
}

TEST_CASE("compare and assertions") {
  const auto dir = testing::scratch_dir("compare");
  auto config = resolve_config(parse_config_text(tiny_config(dir / "fedrod")));
  run_experiment_dir(config);
  config.algorithm.kind = Algorithm::FedAvg;
  config.output_dir = dir / "fedavg";
  run_experiment_dir(config);

  const auto rows = compare_runs({dir / "fedrod", dir / "fedavg", dir / "fedrod"});
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].run == "fedrod");
  CHECK(rows[0].gfl_gm == rows[2].gfl_gm);
  CHECK(rows[0].pfl_pm == rows[2].pfl_pm);
  std::ostringstream os;
  write_compare_csv(os, rows);
  CHECK(os.str().rfind("run,gfl_gm,pfl_gm,pfl_pm\n", 0) == 0);

  CHECK(evaluate_assertion("fedrod.pfl_pm >= fedrod.pfl_pm", rows));
  CHECK(!evaluate_assertion("fedrod.gfl_gm > fedrod.gfl_gm", rows));
  CHECK(evaluate_assertion("fedavg.gfl_gm <= 1", rows));
  CHECK(evaluate_assertion("fedavg.gfl_gm >= 0.0", rows));
  CHECK_THROWS_AS(evaluate_assertion("fedrod.pfl_pm", rows), ConfigurationError);
  CHECK_THROWS_AS(evaluate_assertion("nope.pfl_pm > 0", rows), ConfigurationError);
  CHECK_THROWS_AS(evaluate_assertion("fedrod.accuracy > 0", rows), ConfigurationError);

  std::filesystem::create_directories(dir / "empty");
  CHECK_THROWS_AS(compare_runs({dir / "fedrod", dir / "empty"}), FormatError);
}
