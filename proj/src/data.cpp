#include "fedrod/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>

#include "fedrod/errors.hpp"
#include "fedrod/rng.hpp"

namespace fedrod {

std::vector<std::size_t> Dataset::class_counts() const {
  std::vector<std::size_t> counts(num_classes, 0);
  for (int y : labels) ++counts[static_cast<std::size_t>(y)];
  return counts;
}

void Dataset::validate() const {
  if (labels.empty()) throw ConfigurationError("dataset is empty");
  if (dim == 0) throw ConfigurationError("dataset has zero feature dimension");
  if (features.size() != labels.size() * dim) throw ConfigurationError("dataset feature matrix has wrong size");
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
      throw ConfigurationError("dataset label out of range: " + std::to_string(y));
    }
  }
  for (double v : features) {
    if (!std::isfinite(v)) throw NumericError("dataset contains a non-finite feature");
  }
}

Dataset Dataset::subset(std::span<const std::size_t> rows) const {
  Dataset out;
  out.dim = dim;
  out.num_classes = num_classes;
  out.provenance = provenance;
  out.features.reserve(rows.size() * dim);
  out.labels.reserve(rows.size());
  for (auto r : rows) {
    auto x = row(r);
    out.features.insert(out.features.end(), x.begin(), x.end());
    out.labels.push_back(labels[r]);
  }
  return out;
}

Dataset gen_synthetic(std::size_t num_classes, std::size_t input_dim, std::size_t n_per_class,
                      double separation, std::uint64_t seed, std::uint64_t sample_stream) {
  if (input_dim < 1) throw ConfigurationError("dataset.dim must be >= 1");
  if (num_classes < 2) throw ConfigurationError("dataset.classes must be >= 2");
  if (n_per_class < 1) throw ConfigurationError("dataset.n_per_class must be >= 1");
  if (!(separation > 0.0)) throw ConfigurationError("dataset.separation must be > 0");

  std::normal_distribution<double> normal(0.0, 1.0);
  auto mean_rng = keyed_rng(seed, Stream::ClassMeans);
  std::vector<double> means(num_classes * input_dim);
  for (std::size_t c = 0; c < num_classes; ++c) {
    double norm2 = 0.0;
    auto u = std::span<double>(means).subspan(c * input_dim, input_dim);
    do {
      norm2 = 0.0;
      for (auto& v : u) {
        v = normal(mean_rng);
        norm2 += v * v;
      }
    } while (norm2 == 0.0);
    const double k = separation / std::sqrt(norm2);
    for (auto& v : u) v *= k;
  }

  Dataset data;
  data.dim = input_dim;
  data.num_classes = num_classes;
  data.provenance = Provenance::Synthetic;
  data.features.reserve(num_classes * n_per_class * input_dim);
  data.labels.reserve(num_classes * n_per_class);
  auto rng = keyed_rng(seed, Stream::Samples, {sample_stream});
  for (std::size_t c = 0; c < num_classes; ++c) {
    for (std::size_t i = 0; i < n_per_class; ++i) {
      for (std::size_t j = 0; j < input_dim; ++j) {
        data.features.push_back(means[c * input_dim + j] + normal(rng));
      }
      data.labels.push_back(static_cast<int>(c));
    }
  }
  return data;
}

// ---------------------------------------------------------------------------

namespace {

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

std::uint32_t be32(const std::vector<unsigned char>& bytes, std::size_t offset, const std::filesystem::path& path) {
  if (bytes.size() < offset + 4) {
    throw FormatError(path.string() + ": truncated header at byte offset " + std::to_string(bytes.size()));
  }
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

}  // namespace

Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                 const IdxOptions& options) {
  const auto images = read_file(images_path);
  const auto labels = read_file(labels_path);

  if (auto magic = be32(images, 0, images_path); magic != 0x00000803u) {
    throw FormatError(images_path.string() + ": bad magic at byte offset 0 (expected 0x00000803)");
  }
  const std::size_t n = be32(images, 4, images_path);
  const std::size_t rows = be32(images, 8, images_path);
  const std::size_t cols = be32(images, 12, images_path);
  const std::size_t dim = rows * cols;
  if (dim == 0) throw FormatError(images_path.string() + ": zero image size at byte offset 8");
  if (images.size() < 16 + n * dim) {
    throw FormatError(images_path.string() + ": truncated payload at byte offset " + std::to_string(images.size()) +
                      " (expected " + std::to_string(16 + n * dim) + " bytes)");
  }

  if (auto magic = be32(labels, 0, labels_path); magic != 0x00000801u) {
    throw FormatError(labels_path.string() + ": bad magic at byte offset 0 (expected 0x00000801)");
  }
  const std::size_t n_labels = be32(labels, 4, labels_path);
  if (n_labels != n) {
    throw FormatError(labels_path.string() + ": label count " + std::to_string(n_labels) +
                      " at byte offset 4 does not match image count " + std::to_string(n));
  }
  if (labels.size() < 8 + n) {
    throw FormatError(labels_path.string() + ": truncated payload at byte offset " + std::to_string(labels.size()));
  }
  if (n == 0) throw FormatError(images_path.string() + ": no images");

  Dataset data;
  data.dim = dim;
  data.num_classes = options.num_classes;
  data.provenance = Provenance::IdxFile;
  data.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned y = labels[8 + i];
    if (y >= options.num_classes) {
      throw FormatError(labels_path.string() + ": label " + std::to_string(y) + " out of range at byte offset " +
                        std::to_string(8 + i));
    }
    data.labels[i] = static_cast<int>(y);
  }
  data.features.resize(n * dim);
  for (std::size_t i = 0; i < n * dim; ++i) data.features[i] = images[16 + i] / 255.0;

  if (options.normalize) {
    double mean = 0.0;
    for (double v : data.features) mean += v;
    mean /= static_cast<double>(data.features.size());
    double var = 0.0;
    for (double v : data.features) var += (v - mean) * (v - mean);
    var /= static_cast<double>(data.features.size());
    const double sd = std::sqrt(var);
    for (auto& v : data.features) v = sd > 0.0 ? (v - mean) / sd : v - mean;
  }
  return data;
}

// ---------------------------------------------------------------------------

std::vector<std::size_t> apportion(std::size_t total, std::span<const double> shares) {
  const std::size_t m = shares.size();
  std::vector<std::size_t> out(m, 0);
  if (m == 0) return out;
  double sum = 0.0;
  for (double s : shares) sum += s;
  std::vector<double> remainder(m, 0.0);
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < m; ++i) {
    const double exact = sum > 0.0 ? static_cast<double>(total) * shares[i] / sum : 0.0;
    out[i] = static_cast<std::size_t>(std::floor(exact));
    remainder[i] = exact - static_cast<double>(out[i]);
    assigned += out[i];
  }
  // Rounding in the products can overshoot by one in pathological cases.
  while (assigned > total) {
    auto it = std::max_element(out.begin(), out.end());
    --*it;
    --assigned;
  }
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return remainder[a] > remainder[b]; });
  for (std::size_t k = 0; assigned < total; k = (k + 1) % m) {
    ++out[order[k]];
    ++assigned;
  }
  return out;
}

namespace {

// Dir(alpha * 1_M) via normalized Gamma(alpha, 1) draws, computed in log
// space (Gamma(a) = Gamma(a+1) * U^(1/a) for a < 1) so tiny alphas do not
// underflow to an all-zero vector.
std::vector<double> sample_dirichlet(std::size_t m, double alpha, Rng& rng) {
  std::vector<double> log_g(m);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  if (alpha < 1.0) {
    std::gamma_distribution<double> gamma(alpha + 1.0, 1.0);
    for (auto& v : log_g) {
      double u;
      do u = uniform(rng);
      while (u <= 0.0);
      v = std::log(gamma(rng)) + std::log(u) / alpha;
    }
  } else {
    std::gamma_distribution<double> gamma(alpha, 1.0);
    for (auto& v : log_g) v = std::log(gamma(rng));
  }
  const double mx = *std::max_element(log_g.begin(), log_g.end());
  std::vector<double> q(m);
  double sum = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    q[i] = std::exp(log_g[i] - mx);
    sum += q[i];
  }
  for (auto& v : q) v /= sum;
  return q;
}

}  // namespace

Partition dirichlet_partition(const Dataset& data, std::span<const std::size_t> pool, std::size_t num_clients,
                              double alpha, std::uint64_t seed) {
  if (num_clients < 1) throw ConfigurationError("clients must be >= 1");
  if (!(alpha > 0.0)) throw ConfigurationError("alpha must be > 0");
  const std::size_t C = data.num_classes;

  std::vector<std::vector<std::size_t>> by_class(C);
  for (auto r : pool) by_class[static_cast<std::size_t>(data.labels[r])].push_back(r);

  Partition part;
  part.num_classes = C;
  part.alpha = alpha;
  part.seed = seed;
  part.client_indices.assign(num_clients, {});
  part.counts.assign(num_clients, std::vector<std::size_t>(C, 0));

  for (std::size_t c = 0; c < C; ++c) {
    auto& rows = by_class[c];
    auto shuffle_rng = keyed_rng(seed, Stream::Partition, {c, 0});
    std::shuffle(rows.begin(), rows.end(), shuffle_rng);
    auto dir_rng = keyed_rng(seed, Stream::Partition, {c, 1});
    const auto q = sample_dirichlet(num_clients, alpha, dir_rng);
    const auto take = apportion(rows.size(), q);
    std::size_t pos = 0;
    for (std::size_t m = 0; m < num_clients; ++m) {
      auto& dst = part.client_indices[m];
      dst.insert(dst.end(), rows.begin() + static_cast<std::ptrdiff_t>(pos),
                 rows.begin() + static_cast<std::ptrdiff_t>(pos + take[m]));
      part.counts[m][c] = take[m];
      pos += take[m];
    }
  }
  part.distributions.assign(num_clients, std::vector<double>(C, 0.0));
  for (std::size_t m = 0; m < num_clients; ++m) {
    std::sort(part.client_indices[m].begin(), part.client_indices[m].end());
    if (part.client_indices[m].empty()) {
      part.empty_clients.push_back(m);
    } else {
      part.distributions[m] = class_distribution(part.counts[m]);
    }
  }
  return part;
}

Partition dirichlet_partition(const Dataset& data, std::size_t num_clients, double alpha, std::uint64_t seed) {
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), 0);
  return dirichlet_partition(data, all, num_clients, alpha, seed);
}

nlohmann::json Partition::to_json() const {
  nlohmann::json j;
  j["alpha"] = alpha;
  j["seed"] = seed;
  j["num_clients"] = num_clients();
  j["num_classes"] = num_classes;
  j["counts"] = counts;
  j["distributions"] = distributions;
  j["empty_clients"] = empty_clients;
  std::vector<std::size_t> sizes;
  for (const auto& idx : client_indices) sizes.push_back(idx.size());
  j["sizes"] = sizes;
  return j;
}

// ---------------------------------------------------------------------------

Dataset exponential_imbalance(const Dataset& data, double ratio, std::uint64_t seed) {
  if (!(ratio >= 1.0)) throw ConfigurationError("imbalance_ratio must be >= 1");
  if (ratio == 1.0) return data;
  const std::size_t C = data.num_classes;
  std::vector<std::vector<std::size_t>> by_class(C);
  for (std::size_t i = 0; i < data.size(); ++i) by_class[static_cast<std::size_t>(data.labels[i])].push_back(i);
  std::size_t n_max = 0;
  for (const auto& rows : by_class) n_max = std::max(n_max, rows.size());

  std::vector<std::size_t> kept;
  for (std::size_t c = 0; c < C; ++c) {
    const double exponent = C > 1 ? -static_cast<double>(c) / static_cast<double>(C - 1) : 0.0;
    const auto target = static_cast<std::size_t>(std::llround(static_cast<double>(n_max) * std::pow(ratio, exponent)));
    if (target == 0) {
      throw ConfigurationError("imbalance_ratio leaves class " + std::to_string(c) + " with zero samples");
    }
    auto rows = by_class[c];
    auto rng = keyed_rng(seed, Stream::Imbalance, {c});
    std::shuffle(rows.begin(), rows.end(), rng);
    rows.resize(std::min(target, rows.size()));
    kept.insert(kept.end(), rows.begin(), rows.end());
  }
  std::sort(kept.begin(), kept.end());
  return data.subset(kept);
}

std::vector<double> class_distribution(std::span<const std::size_t> counts) {
  std::size_t total = 0;
  for (auto n : counts) total += n;
  if (total == 0) throw DomainError("class distribution of an empty client is undefined");
  std::vector<double> a(counts.size());
  for (std::size_t c = 0; c < counts.size(); ++c) a[c] = static_cast<double>(counts[c]) / static_cast<double>(total);
  return a;
}

std::vector<double> class_distribution(const Partition& partition, std::size_t client) {
  if (client >= partition.num_clients()) throw DomainError("client id out of range");
  return class_distribution(partition.counts[client]);
}

ClientData client_view(const Dataset& data, const Partition& partition, std::size_t client) {
  ClientData view;
  view.rows = partition.client_indices.at(client);
  view.labels.reserve(view.rows.size());
  for (auto r : view.rows) view.labels.push_back(data.labels[r]);
  view.counts = partition.counts.at(client);
  return view;
}

MetaSplit split_meta_set(const Dataset& data, std::size_t per_class, std::uint64_t seed) {
  MetaSplit split;
  if (per_class == 0) {
    split.remaining.resize(data.size());
    std::iota(split.remaining.begin(), split.remaining.end(), 0);
    return split;
  }
  std::vector<std::vector<std::size_t>> by_class(data.num_classes);
  for (std::size_t i = 0; i < data.size(); ++i) by_class[static_cast<std::size_t>(data.labels[i])].push_back(i);
  std::vector<bool> taken(data.size(), false);
  for (std::size_t c = 0; c < data.num_classes; ++c) {
    auto rows = by_class[c];
    if (rows.size() < per_class) {
      throw ConfigurationError("class " + std::to_string(c) + " has fewer than meta_set.per_class samples");
    }
    auto rng = keyed_rng(seed, Stream::MetaSplit, {c});
    std::shuffle(rows.begin(), rows.end(), rng);
    for (std::size_t k = 0; k < per_class; ++k) {
      split.meta.push_back(rows[k]);
      taken[rows[k]] = true;
    }
  }
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (!taken[i]) split.remaining.push_back(i);
  }
  return split;
}

ClientData augment_with_meta(const ClientData& client, const Dataset& data, std::span<const std::size_t> meta_rows) {
  ClientData out = client;
  for (auto r : meta_rows) {
    out.rows.push_back(r);
    out.labels.push_back(data.labels[r]);
    ++out.counts[static_cast<std::size_t>(data.labels[r])];
  }
  return out;
}

ClientData poison_labels(const ClientData& client, std::size_t num_classes, std::uint64_t seed) {
  if (num_classes < 1) throw ConfigurationError("poison_labels needs at least one class");
  ClientData out = client;
  auto rng = keyed_rng(seed, Stream::Poison);
  std::uniform_int_distribution<int> pick(0, static_cast<int>(num_classes) - 1);
  std::fill(out.counts.begin(), out.counts.end(), 0);
  for (auto& y : out.labels) {
    y = pick(rng);
    ++out.counts[static_cast<std::size_t>(y)];
  }
  return out;
}

}  // namespace fedrod
