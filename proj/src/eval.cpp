#include "fedrod/eval.hpp"

#include <cmath>
#include <cstdio>
#include <limits>

#include "fedrod/errors.hpp"

namespace fedrod {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

int argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < v.size(); ++c) {
    if (v[c] > v[best]) best = c;
  }
  return static_cast<int>(best);
}

void require_nonempty(const Dataset& test) {
  if (test.size() == 0) throw DomainError("evaluation needs a nonempty test set");
}

}  // namespace

std::vector<int> predict(const NetworkSpec& spec, const ModelParams& params, const Dataset& test, Head head) {
  require_nonempty(test);
  const bool personal = head == Head::Personalized && params.personal_head.has_value();
  const auto n = static_cast<std::ptrdiff_t>(test.size());
  std::vector<int> out(test.size());
#pragma omp parallel
  {
    ForwardCache cache;
#pragma omp for schedule(static)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
      forward(spec, params, test.row(static_cast<std::size_t>(i)), cache);
      out[static_cast<std::size_t>(i)] = argmax(personal ? cache.personal_logits : cache.generic_logits);
    }
  }
  return out;
}

double accuracy(std::span<const int> predictions, const Dataset& test) {
  require_nonempty(test);
  if (predictions.size() != test.size()) throw DomainError("one prediction per test sample required");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test.size(); ++i) correct += predictions[i] == test.labels[i] ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

double gfl_accuracy(const NetworkSpec& spec, const ModelParams& params, const Dataset& test) {
  return accuracy(predict(spec, params, test, Head::Generic), test);
}

std::optional<double> weighted_accuracy(std::span<const int> predictions, const Dataset& test,
                                        std::span<const double> distribution) {
  require_nonempty(test);
  if (predictions.size() != test.size()) throw DomainError("one prediction per test sample required");
  if (distribution.size() != test.num_classes) throw DomainError("distribution length differs from class count");
  double p_max = 0.0;
  for (double p : distribution) {
    if (!(p >= 0.0) || !std::isfinite(p)) throw DomainError("distribution entries must be finite and >= 0");
    p_max = std::max(p_max, p);
  }
  if (p_max == 0.0) return std::nullopt;

  // Tallies are integers per class, so weights that are all equal reduce the
  // ratio to correct / total bit for bit.
  std::vector<double> correct(test.num_classes, 0.0), total(test.num_classes, 0.0);
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto y = static_cast<std::size_t>(test.labels[i]);
    total[y] += 1.0;
    if (predictions[i] == test.labels[i]) correct[y] += 1.0;
  }
  double num = 0.0, den = 0.0;
  for (std::size_t c = 0; c < test.num_classes; ++c) {
    const double w = distribution[c] / p_max;
    num += w * correct[c];
    den += w * total[c];
  }
  if (den == 0.0) return std::nullopt;
  return num / den;
}

double pfl_accuracy(std::span<const std::vector<int>> predictions, const Dataset& test,
                    std::span<const std::vector<double>> distributions, std::vector<std::size_t>* skipped) {
  if (predictions.size() != distributions.size()) throw DomainError("one distribution per client model required");
  if (predictions.empty()) throw DomainError("P-FL accuracy needs at least one client");
  // Running mean: a constant sequence averages to itself exactly.
  double mean = 0.0;
  std::size_t k = 0;
  for (std::size_t m = 0; m < predictions.size(); ++m) {
    const auto acc = weighted_accuracy(predictions[m], test, distributions[m]);
    if (!acc) {
      if (skipped) skipped->push_back(m);
      continue;
    }
    ++k;
    mean += (*acc - mean) / static_cast<double>(k);
  }
  if (k == 0) throw DomainError("no client has weight on the test labels");
  return mean;
}

double pfl_accuracy(const NetworkSpec& spec, std::span<const ModelParams> models, const Dataset& test,
                    std::span<const std::vector<double>> distributions, Head head) {
  std::vector<std::vector<int>> preds;
  preds.reserve(models.size());
  for (const auto& m : models) preds.push_back(predict(spec, m, test, head));
  return pfl_accuracy(preds, test, distributions);
}

std::vector<double> per_class_recall(std::span<const int> predictions, const Dataset& test) {
  require_nonempty(test);
  if (predictions.size() != test.size()) throw DomainError("one prediction per test sample required");
  std::vector<double> correct(test.num_classes, 0.0), total(test.num_classes, 0.0);
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto y = static_cast<std::size_t>(test.labels[i]);
    total[y] += 1.0;
    if (predictions[i] == test.labels[i]) correct[y] += 1.0;
  }
  std::vector<double> recall(test.num_classes);
  for (std::size_t c = 0; c < test.num_classes; ++c) recall[c] = total[c] > 0.0 ? correct[c] / total[c] : kNaN;
  return recall;
}

MeanVar mean_var(std::span<const double> xs) {
  MeanVar r;
  if (xs.empty()) return r;
  double m2 = 0.0;
  std::size_t k = 0;
  for (double x : xs) {
    ++k;
    const double delta = x - r.mean;
    r.mean += delta / static_cast<double>(k);
    m2 += delta * (x - r.mean);
  }
  r.variance = std::max(0.0, m2 / static_cast<double>(k));
  return r;
}

MeanVar drift_stats(std::span<const ParamVector> locals, const ParamVector& global) {
  if (locals.empty()) throw DomainError("drift statistics need at least one local model");
  std::vector<double> norms;
  norms.reserve(locals.size());
  for (const auto& w : locals) {
    if (!w.same_shapes(global)) throw DomainError("local and global parameters differ in layout");
    norms.push_back(std::sqrt(w.squared_distance(global)));
  }
  return mean_var(norms);
}

std::vector<std::vector<double>> cross_client_matrix(const NetworkSpec& spec, std::span<const ModelParams> models,
                                                     std::span<const std::vector<double>> distributions,
                                                     const Dataset& test) {
  if (models.size() != distributions.size()) throw DomainError("one distribution per client model required");
  const std::size_t M = models.size();
  std::vector<std::vector<double>> out(M, std::vector<double>(M, kNaN));
  for (std::size_t i = 0; i < M; ++i) {
    const auto preds = predict(spec, models[i], test, Head::Personalized);
    for (std::size_t j = 0; j < M; ++j) {
      if (auto acc = weighted_accuracy(preds, test, distributions[j])) out[i][j] = *acc;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

const std::vector<std::string>& MetricsLog::columns() {
  static const std::vector<std::string> cols{"round",         "gfl_global",      "gfl_local_mean", "gfl_local_var",
                                             "pfl_global",    "pfl_personal",    "drift_mean",     "drift_var",
                                             "train_loss_mean", "reg_local",     "reg_personal"};
  return cols;
}

namespace {

std::vector<double> row_values(const MetricsRow& r) {
  return {r.gfl_global, r.gfl_local_mean,  r.gfl_local_var, r.pfl_global,   r.pfl_personal,
          r.drift_mean, r.drift_var,       r.train_loss_mean, r.reg_local, r.reg_personal};
}

}  // namespace

void MetricsLog::write_csv(std::ostream& os) const {
  const auto& cols = columns();
  for (std::size_t i = 0; i < cols.size(); ++i) os << (i ? "," : "") << cols[i];
  os << '\n';
  for (const auto& r : rows) {
    os << r.round;
    for (double v : row_values(r)) os << ',' << format_double(v);
    os << '\n';
  }
}

nlohmann::json MetricsLog::to_json() const {
  nlohmann::json j;
  const auto& cols = columns();
  nlohmann::json by_round = nlohmann::json::object();
  for (const auto& r : rows) {
    nlohmann::json row;
    const auto vals = row_values(r);
    for (std::size_t i = 0; i < vals.size(); ++i) row[cols[i + 1]] = vals[i];
    by_round[std::to_string(r.round)] = row;
  }
  j["rounds"] = by_round;
  j["recall_global"] = recall_global;
  if (holdout_generic) {
    j["holdout"] = {{"generic", *holdout_generic},
                    {"zero_shot", holdout_zero_shot.value_or(kNaN)},
                    {"finetuned", holdout_finetuned.value_or(kNaN)}};
  }
  return j;
}

void write_matrix_csv(std::ostream& os, const std::vector<std::vector<double>>& matrix) {
  for (const auto& row : matrix) {
    for (std::size_t j = 0; j < row.size(); ++j) os << (j ? "," : "") << format_double(row[j]);
    os << '\n';
  }
}

}  // namespace fedrod
