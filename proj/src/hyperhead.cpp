#include "fedrod/hyperhead.hpp"

#include <cmath>
#include <random>

#include "fedrod/errors.hpp"
#include "fedrod/rng.hpp"

namespace fedrod {

std::size_t HyperNetSpec::default_hidden(std::size_t num_classes, std::size_t feature_dim) {
  return num_classes * feature_dim <= 1000 ? 16 : 32;
}

HyperNetSpec HyperNetSpec::for_network(const NetworkSpec& net, std::size_t hidden_dim) {
  HyperNetSpec s;
  s.num_classes = net.num_classes;
  s.feature_dim = net.feature_dim;
  s.hidden_dim = hidden_dim > 0 ? hidden_dim : default_hidden(net.num_classes, net.feature_dim);
  return s;
}

Layout HyperNetSpec::layout() const {
  return {{"hyper.0.weight", {hidden_dim, num_classes}},
          {"hyper.0.bias", {hidden_dim}},
          {"hyper.1.weight", {output_dim(), hidden_dim}},
          {"hyper.1.bias", {output_dim()}}};
}

void HyperNetSpec::validate() const {
  if (num_classes == 0 || feature_dim == 0 || hidden_dim == 0) {
    throw ConfigurationError("hypernetwork dimensions must be >= 1");
  }
}

ParamVector init_hypernet(const HyperNetSpec& spec, std::uint64_t seed) {
  spec.validate();
  ParamVector nu(spec.layout());
  auto rng = keyed_rng(seed, Stream::HyperInit);
  std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(spec.num_classes)));
  for (auto& v : nu.entry(0)) v = normal(rng);
  return nu;
}

void check_distribution(std::span<const double> a, std::size_t num_classes) {
  if (a.size() != num_classes) throw DomainError("class distribution has wrong length");
  double sum = 0.0;
  for (double v : a) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw DomainError("class distribution entries must be >= 0");
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw DomainError("class distribution must sum to 1");
}

ParamVector generate_head(const HyperNetSpec& spec, const ParamVector& nu, std::span<const double> a,
                          HyperCache* cache) {
  check_distribution(a, spec.num_classes);
  if (nu.size() != ParamVector(spec.layout()).size()) throw ConfigurationError("hypernetwork parameters mismatch");
  const std::size_t H = spec.hidden_dim;
  const std::size_t C = spec.num_classes;
  const std::size_t out_dim = spec.output_dim();

  std::vector<double> hidden(H);
  auto w1 = nu.entry(0);
  auto b1 = nu.entry(1);
  for (std::size_t h = 0; h < H; ++h) {
    double acc = 0.0;
    for (std::size_t c = 0; c < C; ++c) acc += w1[h * C + c] * a[c];
    acc += b1[h];
    hidden[h] = acc > 0.0 ? acc : 0.0;
  }

  // Output rows [0, C*d) are the head weight (row-major C x d), then C biases.
  ParamVector phi(Layout{{"personal_head.weight", {C, spec.feature_dim}}, {"personal_head.bias", {C}}});
  auto out = phi.values();
  auto w2 = nu.entry(2);
  auto b2 = nu.entry(3);
  for (std::size_t o = 0; o < out_dim; ++o) {
    double acc = 0.0;
    const double* row = w2.data() + o * H;
    for (std::size_t h = 0; h < H; ++h) acc += row[h] * hidden[h];
    out[o] = acc + b2[o];
  }
  if (cache) {
    cache->input.assign(a.begin(), a.end());
    cache->hidden = std::move(hidden);
  }
  return phi;
}

ParamVector hyper_backward(const HyperNetSpec& spec, const ParamVector& nu, const HyperCache& cache,
                           const ParamVector& dloss_dphi) {
  const std::size_t H = spec.hidden_dim;
  const std::size_t C = spec.num_classes;
  const std::size_t out_dim = spec.output_dim();
  if (dloss_dphi.size() != out_dim) throw ConfigurationError("d(loss)/d(phi) has wrong length");
  if (cache.hidden.size() != H || cache.input.size() != C) throw ConfigurationError("hypernetwork cache is stale");

  ParamVector grad(spec.layout());
  auto dout = dloss_dphi.values();
  auto dw2 = grad.entry(2);
  auto db2 = grad.entry(3);
  auto w2 = nu.entry(2);
  std::vector<double> dhidden(H, 0.0);
  for (std::size_t o = 0; o < out_dim; ++o) {
    const double g = dout[o];
    db2[o] = g;
    if (g == 0.0) continue;
    for (std::size_t h = 0; h < H; ++h) {
      dw2[o * H + h] = g * cache.hidden[h];
      dhidden[h] += w2[o * H + h] * g;
    }
  }
  auto dw1 = grad.entry(0);
  auto db1 = grad.entry(1);
  for (std::size_t h = 0; h < H; ++h) {
    const double g = cache.hidden[h] > 0.0 ? dhidden[h] : 0.0;
    db1[h] = g;
    for (std::size_t c = 0; c < C; ++c) dw1[h * C + c] = g * cache.input[c];
  }
  return grad;
}

ModelParams zero_shot_personalize(const HyperNetSpec& spec, const ModelParams& global, const ParamVector& nu,
                                  std::span<const double> a_new) {
  ModelParams out{global.extractor, global.generic_head, std::nullopt};
  out.personal_head = generate_head(spec, nu, a_new);
  return out;
}

}  // namespace fedrod
