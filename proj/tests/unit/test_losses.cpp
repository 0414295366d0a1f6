#include <cmath>
#include <random>

#include "doctest.h"
#include "fedrod/data.hpp"
#include "fedrod/errors.hpp"
#include "fedrod/gradcheck.hpp"
#include "fedrod/losses.hpp"
#include "helpers.hpp"

using namespace fedrod;

namespace {

double ce_oracle(const std::vector<double>& g, int y) {
  double mx = -1e300;
  for (double v : g) mx = std::max(mx, v);
  double s = 0.0;
  for (double v : g) s += std::exp(v - mx);
  return std::log(s) + mx - g[static_cast<std::size_t>(y)];
}

const LossKind kAllKinds[] = {LossKind::CE, LossKind::IR, LossKind::LDAM, LossKind::CDT, LossKind::BSM};

}  // namespace

TEST_CASE("adjusted_logits formulas") {
  const double a = 0.3, b = -1.2;
  const auto bsm = adjusted_logits(std::vector<double>{a, b}, std::nullopt, LossSpec{LossKind::BSM, 1.0, 1.0},
                                   ClassCounts({10, 10}));
  CHECK(bsm[0] == doctest::Approx(a + std::log(10.0)));
  CHECK(bsm[1] == doctest::Approx(b + std::log(10.0)));

  const auto cdt = adjusted_logits(std::vector<double>{1, 2}, std::nullopt, LossSpec{LossKind::CDT, 1.0, 1.0},
                                   ClassCounts({4, 2}));
  CHECK(cdt[0] == 1.0);
  CHECK(cdt[1] == 1.0);

  const auto ldam = adjusted_logits(std::vector<double>{0, 0}, 0, LossSpec{LossKind::LDAM, 1.0, 1.0},
                                    ClassCounts({16, 3}));
  CHECK(ldam[0] == doctest::Approx(-0.5));
  CHECK(ldam[1] == 0.0);

  const auto absent = adjusted_logits(std::vector<double>{1, 1}, std::nullopt, LossSpec{LossKind::BSM, 1.0, 1.0},
                                      ClassCounts({3, 0}));
  CHECK(std::isinf(absent[1]));
  CHECK(absent[1] < 0.0);

  CHECK_THROWS_AS(adjusted_logits(std::vector<double>{0, 0}, 1, LossSpec{LossKind::LDAM, 1.0, 1.0}, ClassCounts({5, 0})),
                  DomainError);
  CHECK_THROWS_AS(adjusted_logits(std::vector<double>{0, 0}, std::nullopt, LossSpec{LossKind::LDAM, 1.0, 1.0},
                                  ClassCounts({5, 5})),
                  DomainError);
}

TEST_CASE("instance loss hand values") {
  const auto ce = instance_loss_and_grad(std::vector<double>{0, 0}, 0, LossSpec{}, ClassCounts::uniform(2));
  CHECK(ce.loss == doctest::Approx(0.693147).epsilon(1e-6));
  CHECK(ce.dloss_dlogits[0] == doctest::Approx(-0.5));
  CHECK(ce.dloss_dlogits[1] == doctest::Approx(0.5));

  const auto bsm = instance_loss_and_grad(std::vector<double>{0, 0}, 0, LossSpec{LossKind::BSM, 1.0, 1.0},
                                          ClassCounts({1.0, std::exp(1.0)}));
  CHECK(bsm.loss == doctest::Approx(1.313262).epsilon(1e-6));
  CHECK(bsm.loss == doctest::Approx(std::log(1.0 + std::exp(1.0))).epsilon(1e-14));

  CHECK_THROWS_AS(instance_loss_and_grad(std::vector<double>{0, 0}, 1, LossSpec{}, ClassCounts({3, 0})), DomainError);
  CHECK_THROWS_AS(instance_loss_and_grad(std::vector<double>{0, 0}, 2, LossSpec{}, ClassCounts({3, 1})), DomainError);
}

TEST_CASE("identities: BSM equal counts, CDT and LDAM with gamma 0 are CE bit for bit") {
  std::mt19937_64 rng(21);
  for (int t = 0; t < 50; ++t) {
    const auto g = testing::random_vector(5, rng, 3.0);
    const int y = t % 5;
    const auto ce = instance_loss_and_grad(g, y, LossSpec{}, ClassCounts({7, 7, 7, 7, 7}));
    const auto bsm = instance_loss_and_grad(g, y, LossSpec{LossKind::BSM, 1.0, 1.0}, ClassCounts({7, 7, 7, 7, 7}));
    const ClassCounts skew({1, 40, 3, 9, 100});
    const auto ce_skew = instance_loss_and_grad(g, y, LossSpec{}, skew);
    const auto cdt0 = instance_loss_and_grad(g, y, LossSpec{LossKind::CDT, 0.0, 1.0}, skew);
    const auto ldam0 = instance_loss_and_grad(g, y, LossSpec{LossKind::LDAM, 0.0, 1.0}, skew);
    CHECK(bsm.loss == ce.loss);
    CHECK(bsm.dloss_dlogits == ce.dloss_dlogits);
    CHECK(cdt0.loss == ce_skew.loss);
    CHECK(cdt0.dloss_dlogits == ce_skew.dloss_dlogits);
    CHECK(ldam0.loss == ce_skew.loss);
    CHECK(ldam0.dloss_dlogits == ce_skew.dloss_dlogits);
    CHECK(ce.loss == doctest::Approx(ce_oracle(g, y)).epsilon(1e-12));
  }
}

TEST_CASE("instance gradients match finite differences for every kind") {
  std::mt19937_64 rng(3);
  const ClassCounts counts({5, 12, 1, 30});
  for (auto kind : kAllKinds) {
    const LossSpec spec{kind, LossSpec::default_gamma(kind), 1.0};
    for (int t = 0; t < 20; ++t) {
      auto g = testing::random_vector(4, rng, 2.0);
      const int y = t % 4;
      const auto lv = instance_loss_and_grad(g, y, spec, counts);
      for (std::size_t c = 0; c < 4; ++c) {
        const double eps = 1e-6;
        auto gp = g, gm = g;
        gp[c] += eps;
        gm[c] -= eps;
        const double fd =
            (instance_loss_and_grad(gp, y, spec, counts).loss - instance_loss_and_grad(gm, y, spec, counts).loss) /
            (2 * eps);
        CHECK(std::abs(fd - lv.dloss_dlogits[c]) < 1e-6);
      }
    }
  }
}

TEST_CASE("losses are nonnegative and vanish for a dominant true logit") {
  std::mt19937_64 rng(9);
  const ClassCounts counts({4, 9, 2});
  for (auto kind : kAllKinds) {
    const LossSpec spec{kind, LossSpec::default_gamma(kind), 1.0};
    for (int t = 0; t < 30; ++t) {
      const auto g = testing::random_vector(3, rng, 4.0);
      CHECK(instance_loss_and_grad(g, t % 3, spec, counts).loss >= 0.0);
    }
    std::vector<double> big{60.0, 0.0, 0.0};
    CHECK(instance_loss_and_grad(big, 0, spec, counts).loss < 1e-12);
  }
}

TEST_CASE("BSM loss does not increase as the true class count grows") {
  std::mt19937_64 rng(17);
  for (int t = 0; t < 30; ++t) {
    const auto g = testing::random_vector(3, rng, 2.0);
    double prev = 1e300;
    for (double n : {1.0, 2.0, 5.0, 20.0, 100.0, 1000.0}) {
      const double l = instance_loss_and_grad(g, 0, LossSpec{LossKind::BSM, 1.0, 1.0}, ClassCounts({n, 10, 3})).loss;
      CHECK(l <= prev);
      prev = l;
    }
  }
}

TEST_CASE("ir_weights") {
  auto q = ir_weights(ClassCounts({10, 10}));
  CHECK(q[0] == 1.0);
  CHECK(q[1] == 1.0);
  q = ir_weights(ClassCounts({30, 10}));
  CHECK(q[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
  CHECK(q[1] == doctest::Approx(2.0).epsilon(1e-14));
  CHECK(30 * q[0] + 10 * q[1] == doctest::Approx(40.0).epsilon(1e-14));
  q = ir_weights(ClassCounts({5, 0}));
  CHECK(q[0] == 1.0);
  CHECK(q[1] == 0.0);
}

namespace {

struct RiskFixture {
  NetworkSpec spec{4, {5}, 3, 2};
  Dataset data;
  std::vector<std::size_t> rows;
  std::vector<int> labels;
  ModelParams params;

  RiskFixture() : params(init_params(spec, 2, false, 0.5)) {
    std::mt19937_64 rng(6);
    data.dim = 4;
    data.num_classes = 2;
    for (int i = 0; i < 6; ++i) {
      const auto x = testing::random_vector(4, rng);
      data.features.insert(data.features.end(), x.begin(), x.end());
      data.labels.push_back(i % 2);
    }
  }

  BatchView batch(std::vector<std::size_t> r) {
    rows = std::move(r);
    labels.clear();
    for (auto i : rows) labels.push_back(data.labels[i]);
    return BatchView{&data, rows, labels};
  }

  double instance(std::size_t row, const LossSpec& s, const ClassCounts& counts) {
    return instance_loss_and_grad(forward(spec, params, data.row(row)).generic_logits, data.labels[row], s, counts).loss;
  }
};

}  // namespace

TEST_CASE("balanced_risk: IR on a balanced batch equals CE") {
  RiskFixture f;
  const auto b = f.batch({0, 1, 2, 3});
  const ClassCounts counts({8, 8});
  auto gi = make_gradients(f.spec, GroupSet::generic());
  auto gc = make_gradients(f.spec, GroupSet::generic());
  const double ri = balanced_risk(f.spec, f.params, b, LossSpec{LossKind::IR, 1.0, 1.0}, counts, gi);
  const double rc = balanced_risk(f.spec, f.params, b, LossSpec{}, counts, gc);
  CHECK(std::abs(ri - rc) < 1e-12);
  for (std::size_t i = 0; i < gi.extractor.size(); ++i) CHECK(std::abs(gi.extractor[i] - gc.extractor[i]) < 1e-12);
  for (std::size_t i = 0; i < gi.generic_head.size(); ++i) {
    CHECK(std::abs(gi.generic_head[i] - gc.generic_head[i]) < 1e-12);
  }
}

TEST_CASE("balanced_risk: single sample and the two-sample IR hand case") {
  RiskFixture f;
  const ClassCounts counts({30, 10});
  auto g = make_gradients(f.spec, GroupSet::generic());
  const auto one = f.batch({3});
  const LossSpec bsm{LossKind::BSM, 1.0, 1.0};
  CHECK(balanced_risk(f.spec, f.params, one, bsm, counts, g) == doctest::Approx(f.instance(3, bsm, counts)));

  const auto two = f.batch({0, 1});
  const double l0 = f.instance(0, LossSpec{}, counts);
  const double l1 = f.instance(1, LossSpec{}, counts);
  const double r = balanced_risk(f.spec, f.params, two, LossSpec{LossKind::IR, 1.0, 1.0}, counts, g);
  CHECK(r == doctest::Approx((2.0 / 3.0 * l0 + 2.0 * l1) / 2.0).epsilon(1e-12));
}

TEST_CASE("balanced_risk gradient matches finite differences, IR weights included") {
  RiskFixture f;
  const ClassCounts counts({30, 10});
  for (auto kind : kAllKinds) {
    const LossSpec s{kind, LossSpec::default_gamma(kind), 1.0};
    const auto b = f.batch({0, 1, 2, 3, 5});
    auto g = make_gradients(f.spec, GroupSet::generic());
    balanced_risk(f.spec, f.params, b, s, counts, g);
    ModelParams p = f.params;
    auto loss = [&] {
      auto scratch = make_gradients(f.spec, GroupSet::generic());
      return balanced_risk(f.spec, p, b, s, counts, scratch);
    };
    ParamVector* ps[] = {&p.extractor, &p.generic_head};
    const ParamVector* gs[] = {&g.extractor, &g.generic_head};
    CHECK(compare_with_finite_differences(ps, gs, loss, 1e-6).max_relative_error < 1e-6);
  }
}

TEST_CASE("balanced_risk rejects an empty batch") {
  RiskFixture f;
  const auto b = f.batch({});
  auto g = make_gradients(f.spec, GroupSet::generic());
  CHECK_THROWS_AS(balanced_risk(f.spec, f.params, b, LossSpec{}, ClassCounts({1, 1}), g), DomainError);
}

namespace {

struct MetaFixture {
  NetworkSpec spec{6, {8}, 5, 3};
  Dataset data = gen_synthetic(3, 6, 60, 2.0, 4);
  std::vector<std::size_t> client_rows, meta_rows;
  std::vector<int> client_labels, meta_labels;
  std::vector<std::size_t> counts{0, 0, 0};
  ModelParams params = init_params(spec, 1, false, 0.3);

  MetaFixture() {
    // Client: 40 / 8 / 2 of classes 0 / 1 / 2; meta set: 10 per class.
    const std::size_t take[] = {40, 8, 2};
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t k = 0; k < take[c]; ++k) {
        client_rows.push_back(c * 60 + k);
        client_labels.push_back(static_cast<int>(c));
      }
      counts[c] = take[c];
      for (std::size_t k = 0; k < 10; ++k) {
        meta_rows.push_back(c * 60 + 50 + k);
        meta_labels.push_back(static_cast<int>(c));
      }
    }
  }
  BatchView client() const { return {&data, client_rows, client_labels}; }
  BatchView meta() const { return {&data, meta_rows, meta_labels}; }
};

}  // namespace

TEST_CASE("meta_tune_gamma: zero meta rate is the identity and results stay clamped") {
  MetaFixture f;
  MetaTuneConfig cfg;
  cfg.eta_meta = 0.0;
  const auto cc = ClassCounts::from_counts(f.counts);
  CHECK(meta_tune_gamma(f.spec, f.params, f.client(), cc, f.meta(), 1.3, cfg) == 1.3);
  cfg.eta_meta = 1e6;
  const double g = meta_tune_gamma(f.spec, f.params, f.client(), cc, f.meta(), 1.0, cfg);
  CHECK(g >= 0.0);
  CHECK(g <= cfg.gamma_max);
  CHECK((g == 0.0 || g == cfg.gamma_max));
}

TEST_CASE("meta objective: central difference agrees with a one-sided difference") {
  MetaFixture f;
  const auto cc = ClassCounts::from_counts(f.counts);
  auto D = [&](double gamma) { return meta_objective(f.spec, f.params, f.client(), cc, f.meta(), gamma, 0.5); };
  const double gamma = 1.0, eps = 1e-2;
  const double central = (D(gamma + eps) - D(gamma - eps)) / (2 * eps);
  const double one_sided = (D(gamma + eps / 2) - D(gamma)) / (eps / 2);
  CHECK(std::abs(central - one_sided) < 10 * eps * std::max(1.0, std::abs(central)));
}

TEST_CASE("meta_tune_gamma descends the meta objective") {
  MetaFixture f;
  const auto cc = ClassCounts::from_counts(f.counts);
  MetaTuneConfig cfg;
  cfg.eta_inner = 0.5;
  cfg.eta_meta = 0.5;
  auto D = [&](double gamma) {
    return meta_objective(f.spec, f.params, f.client(), cc, f.meta(), gamma, cfg.eta_inner);
  };
  double gamma = 0.0;
  const double start = D(gamma);
  for (int i = 0; i < 20; ++i) gamma = meta_tune_gamma(f.spec, f.params, f.client(), cc, f.meta(), gamma, cfg);
  CHECK(D(gamma) <= start);
}

TEST_CASE("loss spec parsing and validation") {
  CHECK(parse_loss_kind("bsm") == LossKind::BSM);
  CHECK(to_string(LossKind::LDAM) == "ldam");
  CHECK_THROWS_AS(parse_loss_kind("focal"), ConfigurationError);
  CHECK_THROWS_AS((LossSpec{LossKind::BSM, -1.0, 1.0}.validate()), ConfigurationError);
}
