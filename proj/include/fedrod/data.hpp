#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace fedrod {

enum class Provenance { Synthetic, IdxFile };

// Row-major n x dim feature matrix with integer labels in [0, num_classes).
struct Dataset {
  std::size_t dim = 0;
  std::size_t num_classes = 0;
  std::vector<double> features;
  std::vector<int> labels;
  Provenance provenance = Provenance::Synthetic;

  std::size_t size() const noexcept { return labels.size(); }
  std::span<const double> row(std::size_t i) const noexcept {
    return std::span<const double>(features).subspan(i * dim, dim);
  }
  std::vector<std::size_t> class_counts() const;
  void validate() const;
  Dataset subset(std::span<const std::size_t> rows) const;
};

// Class-conditional unit-variance Gaussians around separation * u_c, u_c
// seeded random unit vectors. Class means depend only on (seed, C, d_in);
// sample_stream selects an independent draw (e.g. 1 for a test split).
Dataset gen_synthetic(std::size_t num_classes, std::size_t input_dim, std::size_t n_per_class,
                      double separation, std::uint64_t seed, std::uint64_t sample_stream = 0);

struct IdxOptions {
  std::size_t num_classes = 10;
  // Subtract the global pixel mean and divide by the global pixel std.
  bool normalize = true;
};

Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                 const IdxOptions& options = {});

// Per-client sample indices with class counts N_{m,c} and distributions a_m.
struct Partition {
  std::size_t num_classes = 0;
  std::vector<std::vector<std::size_t>> client_indices;
  std::vector<std::vector<std::size_t>> counts;
  std::vector<std::vector<double>> distributions;  // all-zero for an empty client
  std::vector<std::size_t> empty_clients;
  double alpha = 0.0;
  std::uint64_t seed = 0;

  std::size_t num_clients() const noexcept { return client_indices.size(); }
  nlohmann::json to_json() const;
};

Partition dirichlet_partition(const Dataset& data, std::span<const std::size_t> pool, std::size_t num_clients,
                              double alpha, std::uint64_t seed);
Partition dirichlet_partition(const Dataset& data, std::size_t num_clients, double alpha, std::uint64_t seed);

// Largest-remainder apportionment of total into parts proportional to shares.
std::vector<std::size_t> apportion(std::size_t total, std::span<const double> shares);

// Keeps round(N_max * ratio^(-c/(C-1))) samples of class c.
Dataset exponential_imbalance(const Dataset& data, double ratio, std::uint64_t seed);

std::vector<double> class_distribution(std::span<const std::size_t> counts);
std::vector<double> class_distribution(const Partition& partition, std::size_t client);

// A client's training view into a shared dataset. Labels are owned so they
// can be poisoned without touching the dataset.
struct ClientData {
  std::vector<std::size_t> rows;
  std::vector<int> labels;
  std::vector<std::size_t> counts;

  std::size_t size() const noexcept { return rows.size(); }
};

ClientData client_view(const Dataset& data, const Partition& partition, std::size_t client);

struct MetaSplit {
  std::vector<std::size_t> meta;       // per_class rows of every class
  std::vector<std::size_t> remaining;  // everything else, ascending
};

// Holds out a class-balanced meta set from the training data.
MetaSplit split_meta_set(const Dataset& data, std::size_t per_class, std::uint64_t seed);

ClientData augment_with_meta(const ClientData& client, const Dataset& data, std::span<const std::size_t> meta_rows);

// Replaces every label by a uniform random label in [0, C).
ClientData poison_labels(const ClientData& client, std::size_t num_classes, std::uint64_t seed);

}  // namespace fedrod
