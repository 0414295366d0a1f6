#pragma once

// Federated round orchestration: client sampling, per-algorithm local
// training, weighted aggregation and per-client persistent state.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "fedrod/data.hpp"
#include "fedrod/eval.hpp"
#include "fedrod/hyperhead.hpp"
#include "fedrod/losses.hpp"
#include "fedrod/nnet.hpp"

namespace fedrod {

enum class Algorithm { FedAvg, FedProx, FedDyn, Ditto, FedRoDLinear, FedRoDHyper, LocalOnly };

std::string_view to_string(Algorithm a);
// fedavg | fedprox | feddyn | ditto | fedrod | fedrod_hyper | local
Algorithm parse_algorithm(std::string_view name);

struct AlgorithmSpec {
  Algorithm kind = Algorithm::FedAvg;
  LossSpec loss;             // generic branch
  double lambda = 0.0;       // FedProx / FedDyn / Ditto strength
  double feddyn_sign = -1.0; // sign of the FedDyn linear term
  bool meta_gamma = false;   // meta-tune the BSM exponent per client
  MetaTuneConfig meta;

  static double default_lambda(Algorithm a);
  bool fedrod() const noexcept { return kind == Algorithm::FedRoDLinear || kind == Algorithm::FedRoDHyper; }
  bool hyper() const noexcept { return kind == Algorithm::FedRoDHyper; }
  void validate() const;
};

struct ExperimentPlan {
  std::size_t rounds = 100;
  double participation = 0.2;
  std::size_t local_epochs = 5;
  SgdConfig sgd;
  std::uint64_t seed = 0;
  double init_std = 0.05;
  std::size_t eval_every = 1;
  std::size_t checkpoint_every = 0;  // 0 disables checkpoints
  std::filesystem::path checkpoint_dir;
  bool parallel = true;  // train sampled clients concurrently
  std::size_t finetune_steps = 50;
  double finetune_lr = 0.01;
  bool finetune_full_model = false;

  void validate() const;
};

struct FederationOptions {
  std::size_t clients = 20;
  std::size_t holdout_clients = 0;  // extra clients never trained, for zero-shot evaluation
  double alpha = 0.3;
  std::size_t meta_per_class = 0;   // 0: no meta set is split off
  bool augment_meta = false;        // concatenate the meta set to every client
  std::vector<std::size_t> poisoned_clients;
  std::uint64_t seed = 0;
};

// Immutable data side of an experiment, shared read-only by client tasks.
struct Federation {
  NetworkSpec net;
  HyperNetSpec hyper;
  Dataset train;
  Dataset test;
  Partition partition;  // training clients first, then held-out clients
  std::vector<ClientData> clients;  // training views (augmented / poisoned)
  // P_m from the clean partition counts; empty for clients with no data.
  std::vector<std::vector<double>> eval_distributions;
  std::vector<bool> evaluated;  // nonempty and not poisoned
  std::vector<ClientData> holdout;
  std::vector<std::vector<double>> holdout_distributions;
  std::vector<std::size_t> meta_rows;

  std::size_t num_clients() const noexcept { return clients.size(); }
  std::vector<std::size_t> eligible_clients() const;  // clients with >= 1 sample
};

Federation make_federation(const NetworkSpec& net, std::size_t hyper_hidden, Dataset train, Dataset test,
                           const FederationOptions& options);

// Uniform sample without replacement of round(fraction * |eligible|) ids
// (at least one), sorted ascending.
std::vector<std::size_t> sample_clients(std::span<const std::size_t> eligible, double fraction, std::uint64_t seed,
                                        std::size_t round);
std::vector<std::size_t> sample_clients(std::size_t num_clients, double fraction, std::uint64_t seed,
                                        std::size_t round);

struct ClientState {
  std::optional<ModelParams> local;          // most recent local model, with phi for Fed-RoD
  std::optional<ParamVector> personal_head;  // linear Fed-RoD phi_m
  std::optional<ModelParams> ditto;          // Ditto personalized model
  std::optional<ModelParams> feddyn_h;       // FedDyn correction, extractor + generic head layout
  std::optional<double> gamma;               // meta-tuned BSM exponent
};

struct LocalResult {
  ModelParams model;               // theta*, psi* (+ phi* for Fed-RoD)
  std::optional<ParamVector> nu;   // hypernetwork after local training
  ClientState state;
  double mean_loss = 0.0;          // mean generic instance loss over all local steps
};

struct Broadcast {
  const ModelParams* global = nullptr;  // theta_bar, psi_bar
  const ParamVector* nu = nullptr;      // nu_bar (hyper variant)
  const ModelParams* initial = nullptr; // round-0 model, the start of a local-only client
};

LocalResult local_train(const Federation& fed, const AlgorithmSpec& alg, const ExperimentPlan& plan,
                        std::size_t client, const Broadcast& broadcast, const ClientState& state, std::size_t round);

// CE fine-tuning on the personalized logits for `steps` minibatches. Only the
// personalized head moves unless full_model; a model without a personal head
// gets a zero one first. steps == 0 or lr == 0 return the input unchanged.
ModelParams finetune_personal(const NetworkSpec& spec, const ModelParams& model, const Dataset& data,
                              const ClientData& client, std::size_t steps, double lr, const SgdConfig& sgd,
                              bool full_model, std::uint64_t seed, std::uint64_t client_key = 0);

// Extractor followed by generic head, as one vector (drift and distances).
ParamVector generic_vector(const ModelParams& params);

struct RoundStats {
  std::vector<std::size_t> sampled;
  MeanVar drift;
  double reg_local = 0.0;
  double reg_personal = 0.0;
  double train_loss_mean = 0.0;
};

class Experiment {
 public:
  // fed must outlive the experiment.
  Experiment(const Federation& fed, AlgorithmSpec alg, ExperimentPlan plan);

  // Executes round() + 1: sample, broadcast, local training, aggregation.
  const RoundStats& run_round();
  MetricsRow evaluate() const;
  // Round-0 row, then one row every eval_every rounds and at the last round;
  // final artifacts (matrix, recalls, held-out clients) at the end.
  MetricsLog run();

  std::size_t round() const noexcept { return round_; }
  const ModelParams& global() const noexcept { return global_; }
  const ParamVector& global_hyper() const noexcept { return nu_; }
  const std::vector<ClientState>& client_states() const noexcept { return states_; }
  const RoundStats& last_stats() const noexcept { return stats_; }

  // Model used for client m's G-FL "local" evaluation and for its P-FL.
  ModelParams local_model(std::size_t m) const;
  ModelParams personalized_model(std::size_t m) const;

  void evaluate_holdout(MetricsLog& log) const;
  void save_checkpoint(const std::filesystem::path& path) const;

 private:
  ModelParams fallback_model(std::span<const double> distribution) const;

  const Federation& fed_;
  AlgorithmSpec alg_;
  ExperimentPlan plan_;
  ModelParams initial_;
  ModelParams global_;
  ParamVector nu_;
  std::vector<ClientState> states_;
  std::vector<std::size_t> eligible_;
  RoundStats stats_;
  std::size_t round_ = 0;
};

}  // namespace fedrod
