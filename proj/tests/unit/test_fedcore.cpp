#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "doctest.h"
#include "fedrod/errors.hpp"
#include "fedrod/fedcore.hpp"
#include "fedrod/rng.hpp"
#include "helpers.hpp"

using namespace fedrod;

namespace {

NetworkSpec small_net() { return NetworkSpec{6, {10}, 6, 4}; }

Federation small_federation(std::size_t clients, double alpha, std::uint64_t seed, std::size_t per_class = 60) {
  auto net = small_net();
  auto train = gen_synthetic(4, 6, per_class, 2.0, seed, 0);
  auto test = gen_synthetic(4, 6, 25, 2.0, seed, 1);
  FederationOptions fo;
  fo.clients = clients;
  fo.alpha = alpha;
  fo.seed = seed;
  return make_federation(net, 0, std::move(train), std::move(test), fo);
}

ExperimentPlan small_plan(std::uint64_t seed, double participation = 0.5) {
  ExperimentPlan plan;
  plan.rounds = 3;
  plan.participation = participation;
  plan.local_epochs = 2;
  plan.sgd.batch_size = 16;
  plan.sgd.lr0 = 0.05;
  plan.seed = seed;
  return plan;
}

AlgorithmSpec algo(Algorithm kind, LossKind loss = LossKind::CE, double lambda = 0.0) {
  AlgorithmSpec a;
  a.kind = kind;
  a.loss = LossSpec{loss, LossSpec::default_gamma(loss), 1.0};
  a.lambda = lambda;
  return a;
}

// Generic (theta, psi) trajectories of two algorithms over three rounds.
void check_same_generic_trajectory(const Federation& fed, const AlgorithmSpec& a, const AlgorithmSpec& b,
                                   std::size_t rounds = 3) {
  const auto plan = small_plan(5);
  Experiment ea(fed, a, plan), eb(fed, b, plan);
  for (std::size_t r = 0; r < rounds; ++r) {
    ea.run_round();
    eb.run_round();
    CHECK(ea.global().extractor == eb.global().extractor);
    CHECK(ea.global().generic_head == eb.global().generic_head);
    CHECK(ea.last_stats().sampled == eb.last_stats().sampled);
  }
}

}  // namespace

TEST_CASE("sample_clients") {
  CHECK(sample_clients(7, 1.0, 3, 1) == std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6});
  const auto s = sample_clients(20, 0.4, 3, 5);
  CHECK(s.size() == 8);
  CHECK(std::set<std::size_t>(s.begin(), s.end()).size() == 8);
  CHECK(std::is_sorted(s.begin(), s.end()));
  CHECK(sample_clients(20, 0.4, 3, 5) == s);
  bool differs = false;
  for (std::size_t r = 6; r < 12; ++r) differs = differs || sample_clients(20, 0.4, 3, r) != s;
  CHECK(differs);
  CHECK(sample_clients(20, 0.01, 3, 1).size() == 1);
  CHECK_THROWS_AS(sample_clients(20, 0.0, 3, 1), ConfigurationError);

  std::vector<std::size_t> eligible{1, 4, 9};
  for (std::size_t r = 1; r < 10; ++r) {
    for (auto id : sample_clients(eligible, 0.5, 1, r)) CHECK((id == 1 || id == 4 || id == 9));
  }
}

TEST_CASE("empty clients are never sampled") {
  const auto fed = small_federation(20, 0.01, 1, 10);
  const auto eligible = fed.eligible_clients();
  REQUIRE(eligible.size() < 20);
  CHECK(!fed.partition.empty_clients.empty());
  Experiment exp(fed, algo(Algorithm::FedAvg), small_plan(1, 0.5));
  for (int r = 0; r < 3; ++r) {
    for (auto m : exp.run_round().sampled) CHECK(fed.clients[m].size() > 0);
  }
}

TEST_CASE("zero local epochs leave the model unchanged") {
  const auto fed = small_federation(4, 0.5, 2);
  auto plan = small_plan(2);
  plan.local_epochs = 0;
  const auto global = init_params(fed.net, 2, false);
  const Broadcast b{&global, nullptr, &global};
  const auto r = local_train(fed, algo(Algorithm::FedAvg), plan, 0, b, ClientState{}, 1);
  CHECK(r.model == global);
}

TEST_CASE("a single sampled client's model becomes the global model") {
  const auto fed = small_federation(1, 0.5, 3);
  const auto plan = small_plan(3, 1.0);
  Experiment exp(fed, algo(Algorithm::FedAvg), plan);
  const auto start = exp.global();
  const Broadcast b{&start, nullptr, &start};
  const auto local = local_train(fed, algo(Algorithm::FedAvg), plan, 0, b, ClientState{}, 1);
  exp.run_round();
  CHECK(exp.global().extractor == local.model.extractor);
  CHECK(exp.global().generic_head == local.model.generic_head);
}

TEST_CASE("aggregation is the size-weighted mean of the sampled local models") {
  const auto fed = small_federation(3, 0.5, 4);
  const auto plan = small_plan(4, 1.0);
  const auto alg = algo(Algorithm::FedAvg);
  Experiment exp(fed, alg, plan);
  const auto start = exp.global();
  const Broadcast b{&start, nullptr, &start};
  std::vector<LocalResult> locals;
  double total = 0.0;
  for (std::size_t m = 0; m < 3; ++m) {
    locals.push_back(local_train(fed, alg, plan, m, b, ClientState{}, 1));
    total += static_cast<double>(fed.clients[m].size());
  }
  exp.run_round();
  const auto& g = exp.global().generic_head;
  for (std::size_t i = 0; i < g.size(); ++i) {
    double want = 0.0;
    for (std::size_t m = 0; m < 3; ++m) want += static_cast<double>(fed.clients[m].size()) * locals[m].model.generic_head[i];
    CHECK(std::abs(g[i] - want / total) < 1e-12);
  }
}

TEST_CASE("FedProx with lambda 0 is FedAvg bit for bit") {
  const auto fed = small_federation(6, 0.3, 6);
  check_same_generic_trajectory(fed, algo(Algorithm::FedAvg), algo(Algorithm::FedProx, LossKind::CE, 0.0));
}

TEST_CASE("FedDyn with lambda 0 matches FedAvg on round 1") {
  const auto fed = small_federation(6, 0.3, 7);
  check_same_generic_trajectory(fed, algo(Algorithm::FedAvg), algo(Algorithm::FedDyn, LossKind::CE, 0.0), 1);
}

TEST_CASE("FedProx with lambda > 0 pulls local models toward the global model") {
  const auto fed = small_federation(6, 0.3, 7);
  const auto plan = small_plan(7, 1.0);
  Experiment a(fed, algo(Algorithm::FedAvg), plan), b(fed, algo(Algorithm::FedProx, LossKind::CE, 5.0), plan);
  CHECK(b.run_round().reg_local < a.run_round().reg_local);
}

TEST_CASE("Fed-RoD generic branch is FedAvg with BSM, linear and hypernetwork variants") {
  const auto fed = small_federation(6, 0.1, 8);
  const auto base = algo(Algorithm::FedAvg, LossKind::BSM);
  check_same_generic_trajectory(fed, base, algo(Algorithm::FedRoDLinear, LossKind::BSM));
  check_same_generic_trajectory(fed, base, algo(Algorithm::FedRoDHyper, LossKind::BSM));
}

TEST_CASE("Ditto's aggregated side is FedAvg") {
  const auto fed = small_federation(6, 0.1, 9);
  check_same_generic_trajectory(fed, algo(Algorithm::FedAvg), algo(Algorithm::Ditto, LossKind::CE, 0.75));
  Experiment exp(fed, algo(Algorithm::Ditto, LossKind::CE, 0.75), small_plan(9));
  const auto& s = exp.run_round();
  for (auto m : s.sampled) CHECK(exp.client_states()[m].ditto.has_value());
}

TEST_CASE("one client with full participation equals centralized SGD") {
  const auto fed = small_federation(1, 1.0, 10);
  const auto plan = small_plan(10, 1.0);
  Experiment exp(fed, algo(Algorithm::FedAvg), plan);
  for (std::size_t r = 0; r < plan.rounds; ++r) exp.run_round();

  // Oracle: plain minibatch SGD over the whole training set with the same
  // shuffle streams and learning-rate schedule.
  const auto& net = fed.net;
  const auto& data = fed.clients[0];
  auto w = init_params(net, plan.seed, false, plan.init_std);
  const auto counts = ClassCounts::from_counts(data.counts);
  ForwardCache cache;
  for (std::size_t round = 1; round <= plan.rounds; ++round) {
    auto rng = keyed_rng(plan.seed, Stream::LocalShuffle, {round, 0});
    auto vel = make_gradients(net, GroupSet::generic());
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t e = 0; e < plan.local_epochs; ++e) {
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t start = 0; start < order.size(); start += plan.sgd.batch_size) {
        const std::size_t end = std::min(order.size(), start + plan.sgd.batch_size);
        const double inv = 1.0 / static_cast<double>(end - start);
        auto g = make_gradients(net, GroupSet::generic());
        for (std::size_t i = start; i < end; ++i) {
          forward(net, w, fed.train.row(data.rows[order[i]]), cache);
          auto lv = instance_loss_and_grad(cache.generic_logits, data.labels[order[i]], LossSpec{}, counts);
          for (auto& d : lv.dloss_dlogits) d *= inv;
          backward(net, w, cache, Branch::Generic, lv.dloss_dlogits, GroupSet::generic(), g);
        }
        sgd_step(w.extractor, g.extractor, vel.extractor, plan.sgd, round - 1);
        sgd_step(w.generic_head, g.generic_head, vel.generic_head, plan.sgd, round - 1);
      }
    }
  }
  CHECK(exp.global().extractor == w.extractor);
  CHECK(exp.global().generic_head == w.generic_head);
}

TEST_CASE("parallel and serial client execution give identical logs") {
  const auto fed = small_federation(8, 0.3, 11);
  for (auto kind : {Algorithm::FedAvg, Algorithm::FedRoDHyper, Algorithm::Ditto}) {
    auto plan = small_plan(11, 0.75);
    const auto alg = algo(kind, kind == Algorithm::FedRoDHyper ? LossKind::BSM : LossKind::CE,
                          AlgorithmSpec::default_lambda(kind));
    plan.parallel = false;
    Experiment serial(fed, alg, plan);
    plan.parallel = true;
    Experiment parallel(fed, alg, plan);
    std::ostringstream a, b;
    serial.run().write_csv(a);
    parallel.run().write_csv(b);
    CHECK(a.str() == b.str());
    CHECK(serial.global() == parallel.global());
  }
}

TEST_CASE("zero rounds log only the initialization row") {
  const auto fed = small_federation(4, 0.3, 12);
  auto plan = small_plan(12);
  plan.rounds = 0;
  Experiment exp(fed, algo(Algorithm::FedAvg), plan);
  const auto log = exp.run();
  REQUIRE(log.rows.size() == 1);
  CHECK(log.rows[0].round == 0);
  CHECK(log.rows[0].gfl_local_mean == log.rows[0].gfl_global);
}

TEST_CASE("eval cadence and final row") {
  const auto fed = small_federation(4, 0.3, 12);
  auto plan = small_plan(12);
  plan.rounds = 5;
  plan.eval_every = 2;
  Experiment exp(fed, algo(Algorithm::FedAvg), plan);
  const auto log = exp.run();
  std::vector<std::size_t> rounds;
  for (const auto& r : log.rows) rounds.push_back(r.round);
  CHECK(rounds == std::vector<std::size_t>{0, 2, 4, 5});
  for (const auto& r : log.rows) {
    CHECK(r.gfl_global >= 0.0);
    CHECK(r.gfl_global <= 1.0);
    CHECK(r.drift_var >= 0.0);
    CHECK(std::isfinite(r.reg_local));
  }
}

TEST_CASE("Fed-RoD: zero initial head, and the head learns a dominant class") {
  // One client holding 95% class 0.
  auto net = small_net();
  auto full = gen_synthetic(4, 6, 380, 1.0, 13, 0);
  std::vector<std::size_t> keep;
  std::vector<std::size_t> taken(4, 0);
  for (std::size_t i = 0; i < full.size(); ++i) {
    const auto c = static_cast<std::size_t>(full.labels[i]);
    if (c == 0 || taken[c] < 6) {
      keep.push_back(i);
      ++taken[c];
    }
  }
  auto train = full.subset(keep);
  auto test = gen_synthetic(4, 6, 25, 1.0, 13, 1);
  FederationOptions fo;
  fo.clients = 1;
  fo.alpha = 1.0;
  fo.seed = 13;
  const auto fed = make_federation(net, 0, std::move(train), std::move(test), fo);
  CHECK(static_cast<double>(fed.clients[0].counts[0]) / static_cast<double>(fed.clients[0].size()) >= 0.95);

  auto plan = small_plan(13, 1.0);
  Experiment exp(fed, algo(Algorithm::FedRoDLinear, LossKind::BSM), plan);
  const auto m0 = exp.personalized_model(0);
  REQUIRE(m0.personal_head);
  CHECK(predict(net, m0, fed.test, Head::Personalized) == predict(net, m0, fed.test, Head::Generic));

  for (int r = 0; r < 3; ++r) exp.run_round();
  const auto m = exp.personalized_model(0);
  double gap = 0.0;
  for (auto row : fed.clients[0].rows) {
    const auto out = forward(net, m, fed.train.row(row));
    gap += (*out.personal_logits)[0] - out.generic_logits[0];
  }
  CHECK(gap / static_cast<double>(fed.clients[0].size()) > 0.0);
}

TEST_CASE("finetune_personal identities") {
  const auto fed = small_federation(3, 0.5, 14);
  const auto model = init_params(fed.net, 14, false);
  SgdConfig sgd;
  CHECK(finetune_personal(fed.net, model, fed.train, fed.clients[0], 0, 0.1, sgd, false, 1) == model);
  CHECK(finetune_personal(fed.net, model, fed.train, fed.clients[0], 10, 0.0, sgd, false, 1) == model);
  const auto tuned = finetune_personal(fed.net, model, fed.train, fed.clients[0], 10, 0.1, sgd, false, 1);
  CHECK(tuned.extractor == model.extractor);
  CHECK(tuned.generic_head == model.generic_head);
  REQUIRE(tuned.personal_head);
  CHECK(tuned.personal_head->squared_norm() > 0.0);
  ClientData empty;
  empty.counts.assign(4, 0);
  CHECK_THROWS_AS(finetune_personal(fed.net, model, fed.train, empty, 10, 0.1, sgd, false, 1), DomainError);
}

TEST_CASE("fine-tuning a one-class client reaches its generic recall") {
  const auto fed = small_federation(4, 0.3, 15);
  auto plan = small_plan(15, 1.0);
  Experiment exp(fed, algo(Algorithm::FedAvg), plan);
  for (int r = 0; r < 3; ++r) exp.run_round();

  for (int c = 0; c < 4; ++c) {
    ClientData one;
    one.counts.assign(4, 0);
    for (std::size_t i = 0; i < fed.train.size() && one.size() < 30; ++i) {
      if (fed.train.labels[i] != c) continue;
      one.rows.push_back(i);
      one.labels.push_back(c);
    }
    one.counts[static_cast<std::size_t>(c)] = one.size();
    const auto tuned = finetune_personal(fed.net, exp.global(), fed.train, one, 50, 0.01, plan.sgd, false, 15, c);
    std::vector<double> P(4, 0.0);
    P[static_cast<std::size_t>(c)] = 1.0;
    const double personal = *weighted_accuracy(predict(fed.net, tuned, fed.test, Head::Personalized), fed.test, P);
    const double generic = per_class_recall(predict(fed.net, exp.global(), fed.test), fed.test)[static_cast<std::size_t>(c)];
    CHECK(personal >= generic);
  }
}

TEST_CASE("LocalOnly ignores the global model and keeps its own") {
  const auto fed = small_federation(4, 0.3, 16);
  auto plan = small_plan(16, 1.0);
  Experiment exp(fed, algo(Algorithm::LocalOnly), plan);
  exp.run_round();
  const auto first = exp.local_model(0);
  exp.run_round();
  const auto start = init_params(fed.net, 16, false, plan.init_std);
  const Broadcast b{&exp.global(), nullptr, &start};
  ClientState s;
  s.local = first;
  const auto again = local_train(fed, algo(Algorithm::LocalOnly), plan, 0, b, s, 2);
  CHECK(again.model == exp.local_model(0));
}

TEST_CASE("client failures name the round and client") {
  auto fed = small_federation(4, 0.3, 17);
  fed.clients[2].labels[0] = 99;
  Experiment exp(fed, algo(Algorithm::FedAvg), small_plan(17, 1.0));
  try {
    exp.run_round();
    FAIL("expected DomainError");
  } catch (const DomainError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("round 1") != std::string::npos);
    CHECK(msg.find("client 2") != std::string::npos);
  }
}

TEST_CASE("checkpoints carry global and per-client sections") {
  const auto dir = testing::scratch_dir("fedcore_ckpt");
  const auto fed = small_federation(4, 0.3, 18);
  auto plan = small_plan(18, 1.0);
  plan.rounds = 2;
  plan.checkpoint_every = 1;
  plan.checkpoint_dir = dir;
  Experiment exp(fed, algo(Algorithm::FedRoDLinear, LossKind::BSM), plan);
  exp.run();
  CHECK(std::filesystem::exists(dir / "round_0001.ckpt"));
  const auto sections = read_checkpoint(dir / "round_0002.ckpt");
  std::set<std::string> names;
  for (const auto& s : sections) names.insert(s.name);
  CHECK(names.count("global.extractor") == 1);
  CHECK(names.count("client.0.personal_head") == 1);
  for (const auto& s : sections) {
    if (s.name == "global.generic_head") CHECK(s.params == exp.global().generic_head);
  }
}

TEST_CASE("holdout clients and poisoned clients") {
  auto net = small_net();
  FederationOptions fo;
  fo.clients = 6;
  fo.holdout_clients = 3;
  fo.alpha = 0.5;
  fo.seed = 19;
  fo.poisoned_clients = {1};
  const auto fed = make_federation(net, 0, gen_synthetic(4, 6, 60, 2.0, 19, 0), gen_synthetic(4, 6, 25, 2.0, 19, 1), fo);
  CHECK(fed.num_clients() == 6);
  CHECK(fed.holdout.size() <= 3);
  CHECK(!fed.evaluated[1]);
  CHECK(fed.clients[1].labels != client_view(fed.train, fed.partition, 1).labels);
  CHECK(fed.eval_distributions[1] == class_distribution(fed.partition.counts[1]));

  Experiment exp(fed, algo(Algorithm::FedRoDHyper, LossKind::BSM), small_plan(19, 1.0));
  const auto log = exp.run();
  CHECK(log.holdout_generic.has_value());
  CHECK(log.holdout_zero_shot.has_value());
  CHECK(log.holdout_finetuned.has_value());
  CHECK(log.matrix.size() == 5);
}

TEST_CASE("algorithm names and validation") {
  CHECK(parse_algorithm("fedrod_hyper") == Algorithm::FedRoDHyper);
  CHECK(to_string(Algorithm::LocalOnly) == "local");
  CHECK_THROWS_AS(parse_algorithm("scaffold"), ConfigurationError);
  auto a = algo(Algorithm::FedAvg);
  a.meta_gamma = true;
  CHECK_THROWS_AS(a.validate(), ConfigurationError);
  ExperimentPlan p;
  p.participation = 0.0;
  CHECK_THROWS_AS(p.validate(), ConfigurationError);
}
