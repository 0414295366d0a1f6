#pragma once

// Central finite-difference checks of the analytic gradients.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "fedrod/hyperhead.hpp"
#include "fedrod/losses.hpp"
#include "fedrod/nnet.hpp"

namespace fedrod {

struct GradCheckReport {
  double max_relative_error = 0.0;  // max |analytic - numeric| / max(1, |analytic|)
  std::string worst_entry;
  std::size_t checked = 0;
};

// Perturbs every coordinate of every vector in params by +-eps and compares
// the central difference of loss() with the matching analytic gradient.
GradCheckReport compare_with_finite_differences(std::span<ParamVector* const> params,
                                                std::span<const ParamVector* const> analytic,
                                                const std::function<double()>& loss, double eps);

// Generic branch: loss_spec on g_G, gradient w.r.t. extractor and generic head.
GradCheckReport grad_check(const NetworkSpec& spec, const ModelParams& params, const LossSpec& loss_spec,
                           const ClassCounts& counts, std::span<const double> x, int label, double eps);

// Personalized branch: CE on g_G + g_P, full gradient w.r.t. extractor, both heads.
GradCheckReport grad_check_personal(const NetworkSpec& spec, const ModelParams& params,
                                    std::span<const double> x, int label, double eps);

// Hypernetwork path x -> z -> g_G + h(z; phi(nu, a)) -> CE, gradient w.r.t. nu.
GradCheckReport grad_check_hyper(const NetworkSpec& spec, const HyperNetSpec& hyper, const ModelParams& params,
                                 const ParamVector& nu, std::span<const double> a, std::span<const double> x,
                                 int label, double eps);

struct GradCheckSuiteResult {
  std::string name;
  double max_relative_error = 0.0;
};

// Every loss kind on the generic branch plus the linear personalized head and
// the hypernetwork path, each at `points` seeded random points.
std::vector<GradCheckSuiteResult> run_gradcheck_suite(std::uint64_t seed, std::size_t points, double eps = 1e-5);

}  // namespace fedrod
