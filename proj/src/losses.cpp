#include "fedrod/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "fedrod/errors.hpp"

namespace fedrod {

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
}

std::string_view to_string(LossKind kind) {
  switch (kind) {
    case LossKind::CE: return "ce";
    case LossKind::IR: return "ir";
    case LossKind::LDAM: return "ldam";
    case LossKind::CDT: return "cdt";
    case LossKind::BSM: return "bsm";
  }
  return "ce";
}

LossKind parse_loss_kind(std::string_view name) {
  if (name == "ce") return LossKind::CE;
  if (name == "ir") return LossKind::IR;
  if (name == "ldam") return LossKind::LDAM;
  if (name == "cdt") return LossKind::CDT;
  if (name == "bsm") return LossKind::BSM;
  throw ConfigurationError("unknown loss kind '" + std::string(name) + "' (expected ce|ir|ldam|cdt|bsm)");
}

double LossSpec::default_gamma(LossKind kind) {
  switch (kind) {
    case LossKind::CDT: return 0.2;
    default: return 1.0;
  }
}

void LossSpec::validate() const {
  if (!std::isfinite(gamma)) throw ConfigurationError("loss.gamma must be finite");
  if ((kind == LossKind::CDT || kind == LossKind::BSM || kind == LossKind::LDAM) && gamma < 0.0) {
    throw ConfigurationError("loss.gamma must be >= 0");
  }
  if (ir_power != 1.0 && ir_power != 0.5) throw ConfigurationError("loss.ir_power must be 1 or 0.5");
}

ClassCounts::ClassCounts(std::vector<double> counts) : counts_(std::move(counts)) {
  if (counts_.empty()) throw DomainError("class counts must be nonempty");
  bool any = false;
  for (double n : counts_) {
    if (!(n >= 0.0) || !std::isfinite(n)) throw DomainError("class counts must be finite and nonnegative");
    any = any || n > 0.0;
  }
  if (!any) throw DomainError("class counts need at least one positive entry");
}

ClassCounts ClassCounts::from_counts(std::span<const std::size_t> counts) {
  std::vector<double> v(counts.begin(), counts.end());
  return ClassCounts(std::move(v));
}

ClassCounts ClassCounts::uniform(std::size_t num_classes) {
  return ClassCounts(std::vector<double>(num_classes, 1.0));
}

double ClassCounts::max() const noexcept { return *std::max_element(counts_.begin(), counts_.end()); }

LogitAdjustment make_adjustment(const LossSpec& spec, const ClassCounts& counts) {
  spec.validate();
  const std::size_t C = counts.num_classes();
  LogitAdjustment adj;
  adj.kind = spec.kind;
  adj.scale.assign(C, 1.0);
  adj.bias.assign(C, 0.0);
  adj.margin.assign(C, 0.0);
  adj.present.assign(C, false);
  for (std::size_t c = 0; c < C; ++c) adj.present[c] = counts[c] > 0.0;
  switch (spec.kind) {
    case LossKind::CE:
    case LossKind::IR:
      break;
    case LossKind::BSM:
      for (std::size_t c = 0; c < C; ++c) adj.bias[c] = counts[c] > 0.0 ? spec.gamma * std::log(counts[c]) : kNegInf;
      break;
    case LossKind::CDT: {
      const double n_max = counts.max();
      for (std::size_t c = 0; c < C; ++c) adj.scale[c] = std::pow(counts[c] / n_max, spec.gamma);
      break;
    }
    case LossKind::LDAM:
      for (std::size_t c = 0; c < C; ++c) {
        adj.margin[c] = counts[c] > 0.0 ? spec.gamma * std::pow(counts[c], -0.25)
                                        : std::numeric_limits<double>::infinity();
      }
      break;
  }
  return adj;
}

std::vector<double> adjusted_logits(std::span<const double> logits, std::optional<int> label, const LossSpec& spec,
                                    const ClassCounts& counts) {
  if (logits.size() != counts.num_classes()) throw ConfigurationError("logits and counts differ in length");
  if (spec.kind == LossKind::LDAM && !label) throw DomainError("LDAM adjustment needs the true label");
  const auto adj = make_adjustment(spec, counts);
  std::vector<double> out(logits.size());
  for (std::size_t c = 0; c < logits.size(); ++c) out[c] = adj.scale[c] * logits[c] + adj.bias[c];
  if (spec.kind == LossKind::LDAM) {
    const auto y = static_cast<std::size_t>(*label);
    if (counts[y] <= 0.0) throw DomainError("LDAM margin undefined for a class with zero count");
    out[y] -= adj.margin[y];
  }
  return out;
}

double instance_loss_and_grad(std::span<const double> logits, int label, const LogitAdjustment& adj,
                              std::span<double> grad) {
  const std::size_t C = logits.size();
  if (label < 0 || static_cast<std::size_t>(label) >= C) throw DomainError("label out of range");
  const auto y = static_cast<std::size_t>(label);
  if (!adj.present[y]) {
    throw DomainError("loss undefined for label " + std::to_string(label) + " with zero class count");
  }

  // Softmax is shift invariant, so biases are taken relative to the largest
  // one; equal counts then give exactly zero bias and reproduce CE bit for bit.
  double bias_shift = kNegInf;
  for (double b : adj.bias) bias_shift = std::max(bias_shift, b);

  double mx = kNegInf;
  for (std::size_t c = 0; c < C; ++c) {
    double a = adj.scale[c] * logits[c] + (adj.bias[c] - bias_shift);
    if (c == y) a -= adj.margin[c];
    grad[c] = a;  // adjusted logits, temporarily
    mx = std::max(mx, a);
  }
  double denom = 0.0;
  for (std::size_t c = 0; c < C; ++c) {
    const double e = grad[c] == kNegInf ? 0.0 : std::exp(grad[c] - mx);
    denom += e;
  }
  const double loss = std::max(0.0, std::log(denom) - (grad[y] - mx));
  for (std::size_t c = 0; c < C; ++c) {
    const double p = grad[c] == kNegInf ? 0.0 : std::exp(grad[c] - mx) / denom;
    grad[c] = (p - (c == y ? 1.0 : 0.0)) * adj.scale[c];
  }
  return loss;
}

LossValue instance_loss_and_grad(std::span<const double> logits, int label, const LossSpec& spec,
                                 const ClassCounts& counts) {
  if (logits.size() != counts.num_classes()) throw ConfigurationError("logits and counts differ in length");
  const auto adj = make_adjustment(spec, counts);
  LossValue v;
  v.dloss_dlogits.resize(logits.size());
  v.loss = instance_loss_and_grad(logits, label, adj, v.dloss_dlogits);
  return v;
}

std::vector<double> ir_weights(const ClassCounts& counts, double power) {
  const std::size_t C = counts.num_classes();
  double total = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < C; ++c) {
    total += counts[c];
    if (counts[c] > 0.0) ++present;
  }
  // Raw weights relative to the mean present count, so balanced counts give
  // exactly 1 before normalization.
  const double mean = total / static_cast<double>(present);
  std::vector<double> q(C, 0.0);
  double weighted = 0.0;
  for (std::size_t c = 0; c < C; ++c) {
    if (counts[c] <= 0.0) continue;
    q[c] = power == 1.0 ? mean / counts[c] : std::pow(mean / counts[c], power);
    weighted += counts[c] * q[c];
  }
  const double k = total / weighted;
  for (auto& v : q) v *= k;
  return q;
}

RiskContext::RiskContext(const LossSpec& s, const ClassCounts& counts)
    : spec(s), adjustment(make_adjustment(s, counts)) {
  class_weights = spec.kind == LossKind::IR ? ir_weights(counts, spec.ir_power)
                                            : std::vector<double>(counts.num_classes(), 1.0);
}

double accumulate_generic_sample(const NetworkSpec& spec, const ModelParams& params, ForwardCache& cache, int label,
                                 const RiskContext& ctx, double inv_batch, std::vector<double>& dlogits,
                                 Gradients& grads) {
  dlogits.resize(spec.num_classes);
  const double loss = instance_loss_and_grad(cache.generic_logits, label, ctx.adjustment, dlogits);
  const double w = ctx.class_weights[static_cast<std::size_t>(label)] * inv_batch;
  for (auto& g : dlogits) g *= w;
  backward(spec, params, cache, Branch::Generic, dlogits, GroupSet::generic(), grads);
  return loss;
}

double balanced_risk(const NetworkSpec& spec, const ModelParams& params, const BatchView& batch,
                     const RiskContext& ctx, Gradients& grads) {
  if (batch.size() == 0) throw DomainError("balanced_risk needs a nonempty batch");
  const double inv = 1.0 / static_cast<double>(batch.size());
  ForwardCache cache;
  std::vector<double> dlogits;
  double risk = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    forward(spec, params, batch.data->row(batch.rows[i]), cache);
    const int y = batch.labels[i];
    const double loss = accumulate_generic_sample(spec, params, cache, y, ctx, inv, dlogits, grads);
    risk += ctx.class_weights[static_cast<std::size_t>(y)] * loss;
  }
  return risk * inv;
}

double balanced_risk(const NetworkSpec& spec, const ModelParams& params, const BatchView& batch, const LossSpec& loss,
                     const ClassCounts& counts, Gradients& grads) {
  return balanced_risk(spec, params, batch, RiskContext(loss, counts), grads);
}

// ---------------------------------------------------------------------------

double meta_objective(const NetworkSpec& spec, const ModelParams& params, const BatchView& client_batch,
                      const ClassCounts& client_counts, const BatchView& meta_batch, double gamma, double eta_inner) {
  LossSpec bsm{LossKind::BSM, gamma, 1.0};
  ModelParams generic{params.extractor, params.generic_head, std::nullopt};
  auto grads = make_gradients(spec, GroupSet::generic());
  balanced_risk(spec, generic, client_batch, bsm, client_counts, grads);
  generic.extractor.add_scaled(grads.extractor, -eta_inner);
  generic.generic_head.add_scaled(grads.generic_head, -eta_inner);

  auto meta_grads = make_gradients(spec, GroupSet::generic());
  return balanced_risk(spec, generic, meta_batch, LossSpec{}, ClassCounts::uniform(spec.num_classes), meta_grads);
}

double meta_tune_gamma(const NetworkSpec& spec, const ModelParams& params, const BatchView& client_batch,
                       const ClassCounts& client_counts, const BatchView& meta_batch, double gamma,
                       const MetaTuneConfig& config) {
  if (meta_batch.size() == 0) throw DomainError("meta set must be nonempty");
  if (!(config.eps > 0.0)) throw ConfigurationError("meta.eps must be > 0");
  if (config.eta_meta == 0.0) return gamma;
  // Near zero the lower probe is clamped and the difference becomes one-sided.
  const double hi = gamma + config.eps;
  const double lo = std::max(0.0, gamma - config.eps);
  const double up = meta_objective(spec, params, client_batch, client_counts, meta_batch, hi, config.eta_inner);
  const double down = meta_objective(spec, params, client_batch, client_counts, meta_batch, lo, config.eta_inner);
  const double next = gamma - config.eta_meta * (up - down) / (hi - lo);
  return std::clamp(next, 0.0, config.gamma_max);
}

}  // namespace fedrod
