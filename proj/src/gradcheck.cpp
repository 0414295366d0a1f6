#include "fedrod/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "fedrod/errors.hpp"
#include "fedrod/rng.hpp"

namespace fedrod {

GradCheckReport compare_with_finite_differences(std::span<ParamVector* const> params,
                                                std::span<const ParamVector* const> analytic,
                                                const std::function<double()>& loss, double eps) {
  if (!(eps > 0.0)) throw ConfigurationError("finite-difference step must be > 0");
  if (params.size() != analytic.size()) throw ConfigurationError("one analytic gradient per parameter vector");
  GradCheckReport report;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = *params[k];
    const auto& g = *analytic[k];
    if (g.size() != p.size()) throw ConfigurationError("analytic gradient has wrong size");
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double saved = p[i];
      p[i] = saved + eps;
      const double up = loss();
      p[i] = saved - eps;
      const double down = loss();
      p[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double err = std::abs(g[i] - numeric) / std::max(1.0, std::abs(g[i]));
      if (report.worst_entry.empty() || err > report.max_relative_error) {
        report.max_relative_error = err;
        report.worst_entry = p.entry_name_at(i);
      }
      ++report.checked;
    }
  }
  return report;
}

GradCheckReport grad_check(const NetworkSpec& spec, const ModelParams& params, const LossSpec& loss_spec,
                           const ClassCounts& counts, std::span<const double> x, int label, double eps) {
  ModelParams work{params.extractor, params.generic_head, std::nullopt};
  const auto adj = make_adjustment(loss_spec, counts);
  std::vector<double> dlogits(spec.num_classes);
  ForwardCache cache;

  forward(spec, work, x, cache);
  instance_loss_and_grad(cache.generic_logits, label, adj, dlogits);
  auto grads = make_gradients(spec, GroupSet::generic());
  backward(spec, work, cache, Branch::Generic, dlogits, GroupSet::generic(), grads);

  auto loss = [&]() {
    ForwardCache c;
    forward(spec, work, x, c);
    std::vector<double> scratch(spec.num_classes);
    return instance_loss_and_grad(c.generic_logits, label, adj, scratch);
  };
  ParamVector* p[] = {&work.extractor, &work.generic_head};
  const ParamVector* g[] = {&grads.extractor, &grads.generic_head};
  return compare_with_finite_differences(p, g, loss, eps);
}

GradCheckReport grad_check_personal(const NetworkSpec& spec, const ModelParams& params, std::span<const double> x,
                                    int label, double eps) {
  if (!params.personal_head) throw ConfigurationError("personal gradient check needs a personal head");
  ModelParams work = params;
  const auto adj = make_adjustment(LossSpec{}, ClassCounts::uniform(spec.num_classes));
  std::vector<double> dlogits(spec.num_classes);
  ForwardCache cache;

  forward(spec, work, x, cache);
  instance_loss_and_grad(cache.personal_logits, label, adj, dlogits);
  auto grads = make_gradients(spec, GroupSet::all());
  backward(spec, work, cache, Branch::Personalized, dlogits, GroupSet::all(), grads);

  auto loss = [&]() {
    ForwardCache c;
    forward(spec, work, x, c);
    std::vector<double> scratch(spec.num_classes);
    return instance_loss_and_grad(c.personal_logits, label, adj, scratch);
  };
  ParamVector* p[] = {&work.extractor, &work.generic_head, &*work.personal_head};
  const ParamVector* g[] = {&grads.extractor, &grads.generic_head, &grads.personal_head};
  return compare_with_finite_differences(p, g, loss, eps);
}

GradCheckReport grad_check_hyper(const NetworkSpec& spec, const HyperNetSpec& hyper, const ModelParams& params,
                                 const ParamVector& nu, std::span<const double> a, std::span<const double> x,
                                 int label, double eps) {
  ParamVector work_nu = nu;
  const auto adj = make_adjustment(LossSpec{}, ClassCounts::uniform(spec.num_classes));
  std::vector<double> dlogits(spec.num_classes);

  HyperCache hcache;
  ModelParams model{params.extractor, params.generic_head, generate_head(hyper, work_nu, a, &hcache)};
  ForwardCache cache;
  forward(spec, model, x, cache);
  instance_loss_and_grad(cache.personal_logits, label, adj, dlogits);
  auto grads = make_gradients(spec, GroupSet::personal_only());
  backward(spec, model, cache, Branch::Personalized, dlogits, GroupSet::personal_only(), grads);
  const auto dnu = hyper_backward(hyper, work_nu, hcache, grads.personal_head);

  auto loss = [&]() {
    ModelParams m{params.extractor, params.generic_head, generate_head(hyper, work_nu, a)};
    ForwardCache c;
    forward(spec, m, x, c);
    std::vector<double> scratch(spec.num_classes);
    return instance_loss_and_grad(c.personal_logits, label, adj, scratch);
  };
  ParamVector* p[] = {&work_nu};
  const ParamVector* g[] = {&dnu};
  return compare_with_finite_differences(p, g, loss, eps);
}

// ---------------------------------------------------------------------------

namespace {

void randomize(ParamVector& p, Rng& rng, double sd) {
  std::normal_distribution<double> normal(0.0, sd);
  for (auto& v : p.values()) v = normal(rng);
}

}  // namespace

std::vector<GradCheckSuiteResult> run_gradcheck_suite(std::uint64_t seed, std::size_t points, double eps) {
  const NetworkSpec spec{6, {8, 7}, 5, 4};
  const auto hyper = HyperNetSpec::for_network(spec, 6);
  const LossKind kinds[] = {LossKind::CE, LossKind::IR, LossKind::LDAM, LossKind::CDT, LossKind::BSM};

  std::vector<GradCheckSuiteResult> results;
  for (auto kind : kinds) results.push_back({"generic/" + std::string(to_string(kind)), 0.0});
  results.push_back({"personal/linear", 0.0});
  results.push_back({"personal/hyper", 0.0});

  for (std::size_t pt = 0; pt < points; ++pt) {
    auto rng = keyed_rng(seed, Stream::GradCheck, {pt});
    auto params = init_params(spec, seed + pt, true);
    randomize(params.extractor, rng, 0.6);
    randomize(params.generic_head, rng, 0.6);
    randomize(*params.personal_head, rng, 0.6);
    ParamVector nu(hyper.layout());
    randomize(nu, rng, 0.6);

    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> x(spec.input_dim);
    for (auto& v : x) v = normal(rng);

    // Counts include an absent class to exercise exclusion.
    std::uniform_int_distribution<int> count_dist(1, 60);
    std::vector<double> counts(spec.num_classes);
    for (auto& n : counts) n = count_dist(rng);
    counts[pt % spec.num_classes] = 0.0;
    const int label = static_cast<int>((pt + 1) % spec.num_classes);
    std::uniform_real_distribution<double> gamma_dist(0.2, 1.5);

    std::vector<double> a(spec.num_classes);
    double sum = 0.0;
    for (auto& v : a) {
      v = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
      sum += v;
    }
    for (auto& v : a) v /= sum;

    for (std::size_t k = 0; k < std::size(kinds); ++k) {
      LossSpec ls{kinds[k], kinds[k] == LossKind::BSM ? 1.0 : gamma_dist(rng), 1.0};
      auto r = grad_check(spec, params, ls, ClassCounts(counts), x, label, eps);
      results[k].max_relative_error = std::max(results[k].max_relative_error, r.max_relative_error);
    }
    auto rp = grad_check_personal(spec, params, x, label, eps);
    results[5].max_relative_error = std::max(results[5].max_relative_error, rp.max_relative_error);
    auto rh = grad_check_hyper(spec, hyper, params, nu, a, x, label, eps);
    results[6].max_relative_error = std::max(results[6].max_relative_error, rh.max_relative_error);
  }
  return results;
}

}  // namespace fedrod
