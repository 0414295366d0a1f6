#pragma once

// Minimal differentiable model core: a rectifier MLP feature extractor with
// a generic linear head and an optional personalized linear head whose
// logits are added to the generic ones.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace fedrod {

struct LayoutEntry {
  std::string name;
  std::vector<std::size_t> shape;

  std::size_t size() const noexcept;
  bool operator==(const LayoutEntry&) const = default;
};

using Layout = std::vector<LayoutEntry>;

// Flat array of 64-bit reals plus a layout naming each weight matrix / bias.
// The unit of aggregation, regularization and checkpointing.
class ParamVector {
 public:
  ParamVector() = default;
  explicit ParamVector(Layout layout);  // zero-filled
  ParamVector(Layout layout, std::vector<double> values);

  const Layout& layout() const noexcept { return layout_; }
  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }
  double& operator[](std::size_t i) noexcept { return values_[i]; }
  double operator[](std::size_t i) const noexcept { return values_[i]; }

  std::size_t num_entries() const noexcept { return layout_.size(); }
  std::size_t offset(std::size_t entry) const noexcept { return offsets_[entry]; }
  std::span<double> entry(std::size_t i) noexcept;
  std::span<const double> entry(std::size_t i) const noexcept;

  bool same_layout(const ParamVector& other) const noexcept { return layout_ == other.layout_; }
  bool same_shapes(const ParamVector& other) const noexcept;

  void fill(double v) noexcept;
  void add_scaled(const ParamVector& other, double a);  // this += a * other
  void scale(double a) noexcept;
  double squared_norm() const noexcept;
  double squared_distance(const ParamVector& other) const;

  // Index of the first layout entry holding a NaN/Inf, if any.
  std::optional<std::size_t> first_non_finite() const noexcept;
  // Name of the layout entry containing flat index i.
  const std::string& entry_name_at(std::size_t i) const;

  bool operator==(const ParamVector& other) const = default;

 private:
  Layout layout_;
  std::vector<std::size_t> offsets_;
  std::vector<double> values_;
};

struct NetworkSpec {
  std::size_t input_dim = 32;
  std::vector<std::size_t> hidden_dims{64};
  std::size_t feature_dim = 32;
  std::size_t num_classes = 10;

  void validate() const;
  // Extractor layer widths: input, hidden..., feature.
  std::vector<std::size_t> widths() const;
  std::size_t num_extractor_layers() const noexcept { return hidden_dims.size() + 1; }
  Layout extractor_layout() const;
  Layout generic_head_layout() const;
  Layout personal_head_layout() const;
};

struct ModelParams {
  ParamVector extractor;      // theta
  ParamVector generic_head;   // psi
  std::optional<ParamVector> personal_head;  // phi

  bool operator==(const ModelParams&) const = default;
};

// Gaussian(0, init_std) weights, zero biases; the personalized head, when
// requested, starts at zero so personalized logits equal generic logits.
ModelParams init_params(const NetworkSpec& spec, std::uint64_t seed, bool with_personal_head,
                        double init_std = 0.05);

void check_params(const NetworkSpec& spec, const ModelParams& params);

// Per-sample activations retained for backward.
struct ForwardCache {
  std::vector<std::vector<double>> activations;  // [0] input, [i+1] output of extractor layer i
  std::vector<double> generic_logits;
  std::vector<double> personal_logits;
  bool has_personal = false;
  std::vector<double> scratch_a, scratch_b;

  std::span<const double> features() const { return activations.back(); }
};

void forward(const NetworkSpec& spec, const ModelParams& params, std::span<const double> x,
             ForwardCache& cache);

struct ForwardResult {
  std::vector<double> features;
  std::vector<double> generic_logits;
  std::optional<std::vector<double>> personal_logits;
};

ForwardResult forward(const NetworkSpec& spec, const ModelParams& params, std::span<const double> x);

enum class Branch { Generic, Personalized };

struct GroupSet {
  bool extractor = false;
  bool generic_head = false;
  bool personal_head = false;

  static constexpr GroupSet generic() { return {true, true, false}; }
  static constexpr GroupSet personal_only() { return {false, false, true}; }
  static constexpr GroupSet all() { return {true, true, true}; }
};

// Gradient buffers; a group that was not requested stays empty.
struct Gradients {
  ParamVector extractor;
  ParamVector generic_head;
  ParamVector personal_head;

  void zero() noexcept;
};

Gradients make_gradients(const NetworkSpec& spec, GroupSet groups);

// Accumulates d(loss)/d(params) into grads given d(loss)/d(logits) of one
// branch. The personalized branch reaches the extractor and generic head only
// when those groups are requested; otherwise it updates phi alone.
void backward(const NetworkSpec& spec, const ModelParams& params, ForwardCache& cache,
              Branch branch, std::span<const double> dloss_dlogits, GroupSet groups,
              Gradients& grads);

struct SgdConfig {
  double lr0 = 0.01;
  double lr_round_decay = 0.99;
  double momentum = 0.9;
  double weight_decay = 1e-5;
  std::size_t batch_size = 40;

  void validate() const;
  double lr_at(std::size_t round_index) const;
};

// v' = momentum * v + (grad + weight_decay * params); params' = params - lr(round) * v'
void sgd_step(ParamVector& params, const ParamVector& grads, ParamVector& momentum,
              const SgdConfig& config, std::size_t round_index);

// Elementwise sum_m w_m p_m / sum_m w_m.
ParamVector weighted_average(std::span<const ParamVector* const> params,
                             std::span<const double> weights);
ParamVector weighted_average(std::span<const ParamVector> params, std::span<const double> weights);

// Checkpoints: named sections of parameter vectors, layout first, then raw
// little-endian doubles in layout order.
struct CheckpointSection {
  std::string name;
  ParamVector params;
};

void write_checkpoint(const std::filesystem::path& path, std::span<const CheckpointSection> sections);
std::vector<CheckpointSection> read_checkpoint(const std::filesystem::path& path);

}  // namespace fedrod
