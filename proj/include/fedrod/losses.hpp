#pragma once

// Class-balanced loss zoo expressed as per-class logit adjustments:
//   adjusted_c = scale_c * g_c + bias_c  (minus a margin on the true class for LDAM)
// followed by softmax cross entropy on the adjusted logits.

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fedrod/data.hpp"
#include "fedrod/nnet.hpp"

namespace fedrod {

enum class LossKind { CE, IR, LDAM, CDT, BSM };

std::string_view to_string(LossKind kind);
LossKind parse_loss_kind(std::string_view name);

struct LossSpec {
  LossKind kind = LossKind::CE;
  double gamma = 1.0;
  double ir_power = 1.0;  // q_c ~ N_c^(-ir_power); 1 or 0.5

  void validate() const;
  static double default_gamma(LossKind kind);
};

// N_{m,c}; stored as reals so tests can use non-integer counts.
class ClassCounts {
 public:
  explicit ClassCounts(std::vector<double> counts);
  static ClassCounts from_counts(std::span<const std::size_t> counts);
  static ClassCounts uniform(std::size_t num_classes);

  std::size_t num_classes() const noexcept { return counts_.size(); }
  double operator[](std::size_t c) const noexcept { return counts_[c]; }
  std::span<const double> values() const noexcept { return counts_; }
  double max() const noexcept;

 private:
  std::vector<double> counts_;
};

// Precomputed per-class terms for one (spec, counts) pair.
struct LogitAdjustment {
  LossKind kind = LossKind::CE;
  std::vector<double> scale;
  std::vector<double> bias;    // -inf excludes a class from the partition function
  std::vector<double> margin;  // subtracted from the true-class logit
  std::vector<bool> present;   // N_c > 0
};

LogitAdjustment make_adjustment(const LossSpec& spec, const ClassCounts& counts);

std::vector<double> adjusted_logits(std::span<const double> logits, std::optional<int> label, const LossSpec& spec,
                                    const ClassCounts& counts);

struct LossValue {
  double loss = 0.0;
  std::vector<double> dloss_dlogits;
};

LossValue instance_loss_and_grad(std::span<const double> logits, int label, const LossSpec& spec,
                                 const ClassCounts& counts);

// Allocation-free kernel; writes d(loss)/d(logits) into grad and returns the loss.
double instance_loss_and_grad(std::span<const double> logits, int label, const LogitAdjustment& adj,
                              std::span<double> grad);

// Inverse-frequency weights normalized so that sum_c N_c q_c = sum_c N_c;
// absent classes get weight 0.
std::vector<double> ir_weights(const ClassCounts& counts, double power = 1.0);

// Minibatch of a client view: rows into a dataset plus labels.
struct BatchView {
  const Dataset* data = nullptr;
  std::span<const std::size_t> rows;
  std::span<const int> labels;

  std::size_t size() const noexcept { return rows.size(); }
};

// Per-client precomputation shared by every minibatch.
struct RiskContext {
  LossSpec spec;
  LogitAdjustment adjustment;
  std::vector<double> class_weights;  // IR weights, or all ones

  RiskContext(const LossSpec& spec, const ClassCounts& counts);
};

// Adds the gradient of one sample's weighted generic loss into grads and
// returns the unweighted instance loss. Shared by every training path so the
// generic trajectory is computed identically with or without extra branches.
double accumulate_generic_sample(const NetworkSpec& spec, const ModelParams& params, ForwardCache& cache,
                                 int label, const RiskContext& ctx, double inv_batch, std::vector<double>& dlogits,
                                 Gradients& grads);

// Mean over the batch of q_{y_i} * loss_i (IR) or loss_i (other kinds).
// Gradients for the extractor and generic head are added into grads.
double balanced_risk(const NetworkSpec& spec, const ModelParams& params, const BatchView& batch,
                     const RiskContext& ctx, Gradients& grads);

double balanced_risk(const NetworkSpec& spec, const ModelParams& params, const BatchView& batch,
                     const LossSpec& loss, const ClassCounts& counts, Gradients& grads);

struct MetaTuneConfig {
  double eta_inner = 0.1;
  double eta_meta = 0.05;
  double eps = 1e-2;
  double gamma_max = 4.0;
};

// L_meta(w - eta_inner * grad_w L_BSM(w; gamma)) with CE on the balanced meta batch.
double meta_objective(const NetworkSpec& spec, const ModelParams& params, const BatchView& client_batch,
                      const ClassCounts& client_counts, const BatchView& meta_batch, double gamma, double eta_inner);

// One central-difference step on the BSM exponent, clamped to [0, gamma_max].
double meta_tune_gamma(const NetworkSpec& spec, const ModelParams& params, const BatchView& client_batch,
                       const ClassCounts& client_counts, const BatchView& meta_batch, double gamma,
                       const MetaTuneConfig& config);

}  // namespace fedrod
