#pragma once

// Two-layer rectifier hypernetwork mapping a client's class distribution a_m
// to the weights and bias of its personalized linear head.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "fedrod/nnet.hpp"

namespace fedrod {

struct HyperNetSpec {
  std::size_t num_classes = 10;
  std::size_t feature_dim = 32;
  std::size_t hidden_dim = 16;

  // 16 for small heads, 32 once C * d exceeds 1000.
  static std::size_t default_hidden(std::size_t num_classes, std::size_t feature_dim);
  static HyperNetSpec for_network(const NetworkSpec& net, std::size_t hidden_dim = 0);

  std::size_t output_dim() const noexcept { return (feature_dim + 1) * num_classes; }
  Layout layout() const;
  void validate() const;
};

// Input layer Gaussian(0, sqrt(2/C)), output layer zero: the first generated
// head is all zeros.
ParamVector init_hypernet(const HyperNetSpec& spec, std::uint64_t seed);

struct HyperCache {
  std::vector<double> input;
  std::vector<double> hidden;  // post-rectifier
};

// Throws DomainError unless a has C nonnegative entries summing to 1 (1e-9).
void check_distribution(std::span<const double> a, std::size_t num_classes);

// Returns phi laid out as the network's personalized head.
ParamVector generate_head(const HyperNetSpec& spec, const ParamVector& nu, std::span<const double> a,
                          HyperCache* cache = nullptr);

// Chain rule through generate_head: d(loss)/d(nu) from d(loss)/d(phi).
ParamVector hyper_backward(const HyperNetSpec& spec, const ParamVector& nu, const HyperCache& cache,
                           const ParamVector& dloss_dphi);

// Global extractor and generic head plus a head generated from a_new alone.
ModelParams zero_shot_personalize(const HyperNetSpec& spec, const ModelParams& global, const ParamVector& nu,
                                  std::span<const double> a_new);

}  // namespace fedrod
