#pragma once

#include <cstddef>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "fedrod/data.hpp"
#include "fedrod/nnet.hpp"
#include "json.hpp"

namespace fedrod {

enum class Head { Generic, Personalized };

// Argmax class per test row, ties to the lowest index. Head::Personalized
// uses g_G + g_P when the model carries a personal head and g_G otherwise.
std::vector<int> predict(const NetworkSpec& spec, const ModelParams& params, const Dataset& test,
                         Head head = Head::Generic);

double accuracy(std::span<const int> predictions, const Dataset& test);
double gfl_accuracy(const NetworkSpec& spec, const ModelParams& params, const Dataset& test);

// sum_i P(y_i) 1(correct_i) / sum_i P(y_i); nullopt when P puts no mass on
// any test label.
std::optional<double> weighted_accuracy(std::span<const int> predictions, const Dataset& test,
                                        std::span<const double> distribution);

// Mean over clients of weighted_accuracy(predictions[m], P_m); clients with
// zero weight are skipped and their ids appended to *skipped.
double pfl_accuracy(std::span<const std::vector<int>> predictions, const Dataset& test,
                    std::span<const std::vector<double>> distributions,
                    std::vector<std::size_t>* skipped = nullptr);
double pfl_accuracy(const NetworkSpec& spec, std::span<const ModelParams> models, const Dataset& test,
                    std::span<const std::vector<double>> distributions, Head head = Head::Personalized);

// Recall per class; NaN for classes absent from the test set.
std::vector<double> per_class_recall(std::span<const int> predictions, const Dataset& test);

struct MeanVar {
  double mean = 0.0;
  double variance = 0.0;  // population
};

MeanVar mean_var(std::span<const double> xs);

// Mean and population variance of ||w_m - w_bar||.
MeanVar drift_stats(std::span<const ParamVector> locals, const ParamVector& global);

// Entry (i, j): model i's weighted accuracy under client j's distribution
// (NaN where client j has no weight on the test labels).
std::vector<std::vector<double>> cross_client_matrix(const NetworkSpec& spec, std::span<const ModelParams> models,
                                                     std::span<const std::vector<double>> distributions,
                                                     const Dataset& test);

struct MetricsRow {
  std::size_t round = 0;
  double gfl_global = 0.0;
  double gfl_local_mean = 0.0;
  double gfl_local_var = 0.0;
  double pfl_global = 0.0;
  double pfl_personal = 0.0;
  double drift_mean = 0.0;
  double drift_var = 0.0;
  double train_loss_mean = 0.0;
  double reg_local = 0.0;     // |D_m|-weighted mean ||w_m - w_bar||^2 over sampled clients
  double reg_personal = 0.0;  // same for the models used as personalized models
};

struct MetricsLog {
  std::vector<MetricsRow> rows;
  std::vector<std::vector<double>> matrix;  // cross-client matrix at the final round
  std::vector<double> recall_global;        // per-class recall of the final global model
  // Held-out clients (hypernetwork runs only): P-FL of the generic model, the
  // zero-shot generated heads and the fine-tuned heads.
  std::optional<double> holdout_generic;
  std::optional<double> holdout_zero_shot;
  std::optional<double> holdout_finetuned;

  static const std::vector<std::string>& columns();
  void write_csv(std::ostream& os) const;
  nlohmann::json to_json() const;
};

void write_matrix_csv(std::ostream& os, const std::vector<std::vector<double>>& matrix);

// "%.17g", so CSV round-trips every double exactly.
std::string format_double(double v);

}  // namespace fedrod
