#include "fedrod/nnet.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "fedrod/errors.hpp"
#include "fedrod/rng.hpp"

namespace fedrod {

std::size_t LayoutEntry::size() const noexcept {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

ParamVector::ParamVector(Layout layout) : layout_(std::move(layout)) {
  offsets_.reserve(layout_.size());
  std::size_t total = 0;
  for (const auto& e : layout_) {
    offsets_.push_back(total);
    total += e.size();
  }
  values_.assign(total, 0.0);
}

ParamVector::ParamVector(Layout layout, std::vector<double> values) : ParamVector(std::move(layout)) {
  if (values.size() != values_.size()) {
    throw ConfigurationError("parameter vector has " + std::to_string(values.size()) +
                             " values but its layout describes " + std::to_string(values_.size()));
  }
  values_ = std::move(values);
}

std::span<double> ParamVector::entry(std::size_t i) noexcept {
  return std::span<double>(values_).subspan(offsets_[i], layout_[i].size());
}

std::span<const double> ParamVector::entry(std::size_t i) const noexcept {
  return std::span<const double>(values_).subspan(offsets_[i], layout_[i].size());
}

bool ParamVector::same_shapes(const ParamVector& other) const noexcept {
  if (layout_.size() != other.layout_.size()) return false;
  for (std::size_t i = 0; i < layout_.size(); ++i) {
    if (layout_[i].shape != other.layout_[i].shape) return false;
  }
  return true;
}

void ParamVector::fill(double v) noexcept { std::fill(values_.begin(), values_.end(), v); }

void ParamVector::add_scaled(const ParamVector& other, double a) {
  if (other.size() != size()) throw ConfigurationError("add_scaled: size mismatch");
  for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += a * other.values_[i];
}

void ParamVector::scale(double a) noexcept {
  for (auto& v : values_) v *= a;
}

double ParamVector::squared_norm() const noexcept {
  double s = 0.0;
  for (double v : values_) s += v * v;
  return s;
}

double ParamVector::squared_distance(const ParamVector& other) const {
  if (other.size() != size()) throw ConfigurationError("squared_distance: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < values_.size(); ++i) {
    const double d = values_[i] - other.values_[i];
    s += d * d;
  }
  return s;
}

std::optional<std::size_t> ParamVector::first_non_finite() const noexcept {
  for (std::size_t e = 0; e < layout_.size(); ++e) {
    for (double v : entry(e)) {
      if (!std::isfinite(v)) return e;
    }
  }
  return std::nullopt;
}

const std::string& ParamVector::entry_name_at(std::size_t i) const {
  auto it = std::upper_bound(offsets_.begin(), offsets_.end(), i);
  return layout_[static_cast<std::size_t>(it - offsets_.begin()) - 1].name;
}

// ---------------------------------------------------------------------------

void NetworkSpec::validate() const {
  if (input_dim == 0) throw ConfigurationError("network input_dim must be >= 1");
  if (feature_dim == 0) throw ConfigurationError("network feature_dim must be >= 1");
  if (num_classes == 0) throw ConfigurationError("network num_classes must be >= 1");
  for (auto h : hidden_dims) {
    if (h == 0) throw ConfigurationError("network hidden dims must be >= 1");
  }
}

std::vector<std::size_t> NetworkSpec::widths() const {
  std::vector<std::size_t> w;
  w.push_back(input_dim);
  w.insert(w.end(), hidden_dims.begin(), hidden_dims.end());
  w.push_back(feature_dim);
  return w;
}

Layout NetworkSpec::extractor_layout() const {
  Layout layout;
  const auto w = widths();
  for (std::size_t i = 0; i + 1 < w.size(); ++i) {
    const auto prefix = "extractor." + std::to_string(i);
    layout.push_back({prefix + ".weight", {w[i + 1], w[i]}});
    layout.push_back({prefix + ".bias", {w[i + 1]}});
  }
  return layout;
}

Layout NetworkSpec::generic_head_layout() const {
  return {{"generic_head.weight", {num_classes, feature_dim}}, {"generic_head.bias", {num_classes}}};
}

Layout NetworkSpec::personal_head_layout() const {
  return {{"personal_head.weight", {num_classes, feature_dim}}, {"personal_head.bias", {num_classes}}};
}

ModelParams init_params(const NetworkSpec& spec, std::uint64_t seed, bool with_personal_head,
                        double init_std) {
  spec.validate();
  auto rng = keyed_rng(seed, Stream::ModelInit);
  std::normal_distribution<double> normal(0.0, init_std);
  auto fill_weights = [&](ParamVector& p) {
    for (std::size_t e = 0; e < p.num_entries(); ++e) {
      if (p.layout()[e].shape.size() != 2) continue;  // biases stay zero
      for (auto& v : p.entry(e)) v = normal(rng);
    }
  };
  ModelParams params{ParamVector(spec.extractor_layout()), ParamVector(spec.generic_head_layout()),
                     std::nullopt};
  fill_weights(params.extractor);
  fill_weights(params.generic_head);
  if (with_personal_head) params.personal_head = ParamVector(spec.personal_head_layout());
  return params;
}

void check_params(const NetworkSpec& spec, const ModelParams& params) {
  auto expect = [](const ParamVector& p, const Layout& layout, const char* what) {
    ParamVector ref(layout);
    if (!p.same_shapes(ref)) {
      throw ConfigurationError(std::string(what) + " parameters do not match the network layout");
    }
  };
  expect(params.extractor, spec.extractor_layout(), "extractor");
  expect(params.generic_head, spec.generic_head_layout(), "generic head");
  if (params.personal_head) expect(*params.personal_head, spec.personal_head_layout(), "personal head");
}

// ---------------------------------------------------------------------------

namespace {

// out = W in + b, W row-major [rows x cols]
void affine(std::span<const double> w, std::span<const double> b, std::span<const double> in,
            std::span<double> out) {
  const std::size_t rows = out.size();
  const std::size_t cols = in.size();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = w.data() + r * cols;
    double acc = 0.0;
    for (std::size_t c = 0; c < cols; ++c) acc += row[c] * in[c];
    out[r] = acc + b[r];
  }
}

// out += W^T g
void affine_transpose_accumulate(std::span<const double> w, std::span<const double> g,
                                 std::span<double> out) {
  const std::size_t rows = g.size();
  const std::size_t cols = out.size();
  for (std::size_t r = 0; r < rows; ++r) {
    const double gr = g[r];
    if (gr == 0.0) continue;
    const double* row = w.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) out[c] += row[c] * gr;
  }
}

// dW += g (outer) in, db += g
void accumulate_outer(std::span<const double> g, std::span<const double> in, std::span<double> dw,
                      std::span<double> db) {
  const std::size_t cols = in.size();
  for (std::size_t r = 0; r < g.size(); ++r) {
    const double gr = g[r];
    db[r] += gr;
    if (gr == 0.0) continue;
    double* row = dw.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) row[c] += gr * in[c];
  }
}

}  // namespace

void forward(const NetworkSpec& spec, const ModelParams& params, std::span<const double> x,
             ForwardCache& cache) {
  if (x.size() != spec.input_dim) {
    throw ConfigurationError("input has length " + std::to_string(x.size()) + ", network expects " +
                             std::to_string(spec.input_dim));
  }
  const auto w = spec.widths();
  const std::size_t layers = w.size() - 1;
  if (params.extractor.num_entries() != 2 * layers ||
      params.generic_head.size() != spec.num_classes * (spec.feature_dim + 1)) {
    throw ConfigurationError("parameters do not match the network layout");
  }
  cache.activations.resize(w.size());
  cache.activations[0].assign(x.begin(), x.end());
  for (std::size_t i = 0; i < layers; ++i) {
    auto& out = cache.activations[i + 1];
    out.resize(w[i + 1]);
    affine(params.extractor.entry(2 * i), params.extractor.entry(2 * i + 1), cache.activations[i], out);
    for (auto& v : out) v = v > 0.0 ? v : 0.0;
  }
  const auto& z = cache.activations.back();
  cache.generic_logits.resize(spec.num_classes);
  affine(params.generic_head.entry(0), params.generic_head.entry(1), z, cache.generic_logits);
  cache.has_personal = params.personal_head.has_value();
  if (cache.has_personal) {
    const auto& phi = *params.personal_head;
    if (phi.size() != params.generic_head.size()) {
      throw ConfigurationError("personal head does not match the generic head shape");
    }
    cache.personal_logits.resize(spec.num_classes);
    affine(phi.entry(0), phi.entry(1), z, cache.personal_logits);
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
      cache.personal_logits[c] = cache.generic_logits[c] + cache.personal_logits[c];
    }
  }
}

ForwardResult forward(const NetworkSpec& spec, const ModelParams& params, std::span<const double> x) {
  ForwardCache cache;
  forward(spec, params, x, cache);
  ForwardResult r;
  r.features = cache.activations.back();
  r.generic_logits = cache.generic_logits;
  if (cache.has_personal) r.personal_logits = cache.personal_logits;
  return r;
}

void Gradients::zero() noexcept {
  extractor.fill(0.0);
  generic_head.fill(0.0);
  personal_head.fill(0.0);
}

Gradients make_gradients(const NetworkSpec& spec, GroupSet groups) {
  Gradients g;
  if (groups.extractor) g.extractor = ParamVector(spec.extractor_layout());
  if (groups.generic_head) g.generic_head = ParamVector(spec.generic_head_layout());
  if (groups.personal_head) g.personal_head = ParamVector(spec.personal_head_layout());
  return g;
}

void backward(const NetworkSpec& spec, const ModelParams& params, ForwardCache& cache, Branch branch,
              std::span<const double> dloss_dlogits, GroupSet groups, Gradients& grads) {
  if (dloss_dlogits.size() != spec.num_classes) {
    throw ConfigurationError("dloss_dlogits has wrong length");
  }
  if (groups.personal_head && !params.personal_head) {
    throw ConfigurationError("personal head gradient requested but the model has no personal head");
  }
  if ((groups.extractor && grads.extractor.empty()) || (groups.generic_head && grads.generic_head.empty()) ||
      (groups.personal_head && grads.personal_head.empty())) {
    throw ConfigurationError("gradient buffer missing for a requested group");
  }
  const auto z = cache.features();
  const bool personal = branch == Branch::Personalized;

  if (groups.generic_head) {
    accumulate_outer(dloss_dlogits, z, grads.generic_head.entry(0), grads.generic_head.entry(1));
  }
  if (personal && groups.personal_head) {
    accumulate_outer(dloss_dlogits, z, grads.personal_head.entry(0), grads.personal_head.entry(1));
  }
  if (!groups.extractor) return;

  auto& dz = cache.scratch_a;
  dz.assign(z.size(), 0.0);
  affine_transpose_accumulate(params.generic_head.entry(0), dloss_dlogits, dz);
  if (personal && params.personal_head) {
    affine_transpose_accumulate(params.personal_head->entry(0), dloss_dlogits, dz);
  }

  const std::size_t layers = spec.num_extractor_layers();
  auto& next = cache.scratch_b;
  for (std::size_t i = layers; i-- > 0;) {
    const auto& out = cache.activations[i + 1];
    for (std::size_t k = 0; k < dz.size(); ++k) {
      if (out[k] <= 0.0) dz[k] = 0.0;
    }
    accumulate_outer(dz, cache.activations[i], grads.extractor.entry(2 * i), grads.extractor.entry(2 * i + 1));
    if (i == 0) break;
    next.assign(cache.activations[i].size(), 0.0);
    affine_transpose_accumulate(params.extractor.entry(2 * i), dz, next);
    std::swap(dz, next);
  }
}

// ---------------------------------------------------------------------------

void SgdConfig::validate() const {
  if (!(lr0 > 0.0)) throw ConfigurationError("sgd.lr must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigurationError("sgd.momentum must be in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigurationError("sgd.weight_decay must be >= 0");
  if (batch_size < 1) throw ConfigurationError("sgd.batch_size must be >= 1");
  if (!(lr_round_decay > 0.0)) throw ConfigurationError("sgd.decay must be > 0");
}

double SgdConfig::lr_at(std::size_t round_index) const {
  return lr0 * std::pow(lr_round_decay, static_cast<double>(round_index));
}

void sgd_step(ParamVector& params, const ParamVector& grads, ParamVector& momentum,
              const SgdConfig& config, std::size_t round_index) {
  if (grads.size() != params.size() || momentum.size() != params.size()) {
    throw ConfigurationError("sgd_step: parameter, gradient and momentum shapes disagree");
  }
  if (auto bad = grads.first_non_finite()) {
    throw NumericError("non-finite gradient in '" + grads.layout()[*bad].name + "'");
  }
  const double lr = config.lr_at(round_index);
  auto p = params.values();
  auto g = grads.values();
  auto v = momentum.values();
  for (std::size_t i = 0; i < p.size(); ++i) {
    v[i] = config.momentum * v[i] + (g[i] + config.weight_decay * p[i]);
    p[i] -= lr * v[i];
  }
}

ParamVector weighted_average(std::span<const ParamVector* const> params, std::span<const double> weights) {
  if (params.empty()) throw AggregationError("cannot aggregate an empty list");
  if (params.size() != weights.size()) throw AggregationError("one weight per parameter vector required");
  double total = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!(weights[i] >= 0.0) || !std::isfinite(weights[i])) {
      throw AggregationError("aggregation weights must be finite and nonnegative");
    }
    if (!params[i]->same_layout(*params[0])) throw AggregationError("aggregated layouts differ");
    total += weights[i];
  }
  if (!(total > 0.0)) throw AggregationError("aggregation weights sum to zero");
  // Accumulated as offsets from the first entry, so identical inputs come
  // back unchanged bit for bit.
  ParamVector out = *params[0];
  auto o = out.values();
  auto p0 = params[0]->values();
  std::vector<double> acc(o.size(), 0.0);
  for (std::size_t m = 1; m < params.size(); ++m) {
    const double w = weights[m] / total;
    auto p = params[m]->values();
    for (std::size_t i = 0; i < o.size(); ++i) acc[i] += w * (p[i] - p0[i]);
  }
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += acc[i];
  return out;
}

ParamVector weighted_average(std::span<const ParamVector> params, std::span<const double> weights) {
  std::vector<const ParamVector*> ptrs;
  ptrs.reserve(params.size());
  for (const auto& p : params) ptrs.push_back(&p);
  return weighted_average(std::span<const ParamVector* const>(ptrs), weights);
}

// ---------------------------------------------------------------------------
// Checkpoint format (all integers little-endian):
//   "FRODCKPT" u32 version=1 u32 n_sections
//   per section: str name, u32 n_entries,
//                per entry: str name, u32 ndim, u64 dims[ndim]
//                u64 n_values, f64 values[n_values]
//   str = u32 length + bytes

namespace {

constexpr char kMagic[8] = {'F', 'R', 'O', 'D', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put_le(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  os.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

void put_str(std::ostream& os, const std::string& s) {
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

class Reader {
 public:
  Reader(std::istream& is, std::filesystem::path path) : is_(is), path_(std::move(path)) {}

  template <typename T>
  T get() {
    unsigned char bytes[sizeof(T)];
    read(bytes, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    T v;
    std::memcpy(&v, bytes, sizeof(T));
    return v;
  }

  std::string get_str() {
    auto n = get<std::uint32_t>();
    if (n > (1u << 20)) fail("implausible string length");
    std::string s(n, '\0');
    read(s.data(), n);
    return s;
  }

  void read(void* dst, std::size_t n) {
    is_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n) fail("truncated checkpoint");
    offset_ += n;
  }

  [[noreturn]] void fail(const std::string& what) const {
    throw FormatError(path_.string() + ": " + what + " at byte offset " + std::to_string(offset_));
  }

 private:
  std::istream& is_;
  std::filesystem::path path_;
  std::size_t offset_ = 0;
};

}  // namespace

void write_checkpoint(const std::filesystem::path& path, std::span<const CheckpointSection> sections) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path.string());
  os.write(kMagic, sizeof(kMagic));
  put_le<std::uint32_t>(os, kVersion);
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(sections.size()));
  for (const auto& s : sections) {
    put_str(os, s.name);
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.params.num_entries()));
    for (const auto& e : s.params.layout()) {
      put_str(os, e.name);
      put_le<std::uint32_t>(os, static_cast<std::uint32_t>(e.shape.size()));
      for (auto d : e.shape) put_le<std::uint64_t>(os, d);
    }
    put_le<std::uint64_t>(os, s.params.size());
    for (double v : s.params.values()) put_le<double>(os, v);
  }
  if (!os) throw std::runtime_error("failed writing checkpoint: " + path.string());
}

std::vector<CheckpointSection> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path.string());
  Reader r(is, path);
  char magic[8];
  r.read(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(magic)) != 0) r.fail("bad checkpoint magic");
  if (r.get<std::uint32_t>() != kVersion) r.fail("unsupported checkpoint version");
  const auto n_sections = r.get<std::uint32_t>();
  std::vector<CheckpointSection> out;
  for (std::uint32_t s = 0; s < n_sections; ++s) {
    CheckpointSection section;
    section.name = r.get_str();
    const auto n_entries = r.get<std::uint32_t>();
    Layout layout;
    for (std::uint32_t e = 0; e < n_entries; ++e) {
      LayoutEntry entry;
      entry.name = r.get_str();
      const auto ndim = r.get<std::uint32_t>();
      if (ndim > 8) r.fail("implausible tensor rank");
      for (std::uint32_t d = 0; d < ndim; ++d) entry.shape.push_back(r.get<std::uint64_t>());
      layout.push_back(std::move(entry));
    }
    const auto n_values = r.get<std::uint64_t>();
    ParamVector params(std::move(layout));
    if (n_values != params.size()) r.fail("value count disagrees with layout");
    for (auto& v : params.values()) v = r.get<double>();
    section.params = std::move(params);
    out.push_back(std::move(section));
  }
  return out;
}

}  // namespace fedrod
