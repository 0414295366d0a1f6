#include "fedrod/fedcore.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <numeric>
#include <random>
#include <string>

#include "fedrod/errors.hpp"
#include "fedrod/rng.hpp"

namespace fedrod {

std::string_view to_string(Algorithm a) {
  switch (a) {
    case Algorithm::FedAvg: return "fedavg";
    case Algorithm::FedProx: return "fedprox";
    case Algorithm::FedDyn: return "feddyn";
    case Algorithm::Ditto: return "ditto";
    case Algorithm::FedRoDLinear: return "fedrod";
    case Algorithm::FedRoDHyper: return "fedrod_hyper";
    case Algorithm::LocalOnly: return "local";
  }
  return "fedavg";
}

Algorithm parse_algorithm(std::string_view name) {
  for (auto a : {Algorithm::FedAvg, Algorithm::FedProx, Algorithm::FedDyn, Algorithm::Ditto, Algorithm::FedRoDLinear,
                 Algorithm::FedRoDHyper, Algorithm::LocalOnly}) {
    if (name == to_string(a)) return a;
  }
  throw ConfigurationError("unknown algorithm '" + std::string(name) +
                           "' (expected fedavg|fedprox|feddyn|ditto|fedrod|fedrod_hyper|local)");
}

double AlgorithmSpec::default_lambda(Algorithm a) {
  switch (a) {
    case Algorithm::FedProx: return 0.01;
    case Algorithm::FedDyn: return 0.01;
    case Algorithm::Ditto: return 0.75;
    default: return 0.0;
  }
}

void AlgorithmSpec::validate() const {
  loss.validate();
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigurationError("lambda must be >= 0");
  if (feddyn_sign != 1.0 && feddyn_sign != -1.0) throw ConfigurationError("feddyn_sign must be +1 or -1");
  if (meta_gamma && loss.kind != LossKind::BSM) throw ConfigurationError("meta_gamma requires loss.kind = bsm");
  if (meta_gamma && !(meta.eps > 0.0)) throw ConfigurationError("meta.eps must be > 0");
}

void ExperimentPlan::validate() const {
  if (!(participation > 0.0 && participation <= 1.0)) throw ConfigurationError("participation must be in (0, 1]");
  if (local_epochs < 1) throw ConfigurationError("local_epochs must be >= 1");
  if (eval_every < 1) throw ConfigurationError("eval_every must be >= 1");
  if (!(init_std > 0.0)) throw ConfigurationError("model.init_std must be > 0");
  if (!(finetune_lr >= 0.0)) throw ConfigurationError("finetune.lr must be >= 0");
  sgd.validate();
}

// ---------------------------------------------------------------------------

std::vector<std::size_t> Federation::eligible_clients() const {
  std::vector<std::size_t> out;
  for (std::size_t m = 0; m < clients.size(); ++m) {
    if (clients[m].size() > 0) out.push_back(m);
  }
  return out;
}

Federation make_federation(const NetworkSpec& net, std::size_t hyper_hidden, Dataset train, Dataset test,
                           const FederationOptions& options) {
  net.validate();
  if (options.clients < 1) throw ConfigurationError("clients must be >= 1");
  if (train.num_classes != net.num_classes || test.num_classes != net.num_classes) {
    throw ConfigurationError("dataset class count differs from the network's");
  }
  if (train.dim != net.input_dim || test.dim != net.input_dim) {
    throw ConfigurationError("dataset dimension differs from the network input");
  }
  if (options.augment_meta && options.meta_per_class == 0) {
    throw ConfigurationError("meta_set.augment needs meta_set.per_class >= 1");
  }
  for (auto m : options.poisoned_clients) {
    if (m >= options.clients) throw ConfigurationError("poisoned client id " + std::to_string(m) + " out of range");
  }

  Federation fed;
  fed.net = net;
  fed.hyper = HyperNetSpec::for_network(net, hyper_hidden);
  fed.train = std::move(train);
  fed.test = std::move(test);

  std::vector<std::size_t> pool;
  if (options.meta_per_class > 0) {
    auto split = split_meta_set(fed.train, options.meta_per_class, options.seed);
    fed.meta_rows = std::move(split.meta);
    pool = std::move(split.remaining);
  } else {
    pool.resize(fed.train.size());
    std::iota(pool.begin(), pool.end(), std::size_t{0});
  }
  const std::size_t total = options.clients + options.holdout_clients;
  fed.partition = dirichlet_partition(fed.train, pool, total, options.alpha, options.seed);

  const std::size_t C = net.num_classes;
  for (std::size_t m = 0; m < options.clients; ++m) {
    auto view = client_view(fed.train, fed.partition, m);
    const bool empty = view.size() == 0;
    fed.eval_distributions.push_back(empty ? std::vector<double>{} : class_distribution(view.counts));
    const bool poisoned = std::find(options.poisoned_clients.begin(), options.poisoned_clients.end(), m) !=
                          options.poisoned_clients.end();
    fed.evaluated.push_back(!empty && !poisoned);
    if (!empty && options.augment_meta) view = augment_with_meta(view, fed.train, fed.meta_rows);
    if (!empty && poisoned) view = poison_labels(view, C, keyed_rng(options.seed, Stream::Poison, {m})());
    fed.clients.push_back(std::move(view));
  }
  for (std::size_t h = options.clients; h < total; ++h) {
    auto view = client_view(fed.train, fed.partition, h);
    if (view.size() == 0) continue;
    fed.holdout_distributions.push_back(class_distribution(view.counts));
    fed.holdout.push_back(std::move(view));
  }
  if (fed.eligible_clients().empty()) throw ConfigurationError("every client is empty");
  return fed;
}

std::vector<std::size_t> sample_clients(std::span<const std::size_t> eligible, double fraction, std::uint64_t seed,
                                        std::size_t round) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigurationError("participation must be in (0, 1]");
  if (eligible.empty()) throw DomainError("no eligible clients to sample");
  const auto n = eligible.size();
  auto k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  k = std::clamp<std::size_t>(k, 1, n);
  std::vector<std::size_t> ids(eligible.begin(), eligible.end());
  if (k < n) {
    // Partial Fisher-Yates: the first k positions form the sample.
    auto rng = keyed_rng(seed, Stream::ClientSampling, {round});
    for (std::size_t i = 0; i < k; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, n - 1);
      std::swap(ids[i], ids[pick(rng)]);
    }
    ids.resize(k);
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

std::vector<std::size_t> sample_clients(std::size_t num_clients, double fraction, std::uint64_t seed,
                                        std::size_t round) {
  std::vector<std::size_t> all(num_clients);
  std::iota(all.begin(), all.end(), std::size_t{0});
  return sample_clients(all, fraction, seed, round);
}

// ---------------------------------------------------------------------------

ParamVector generic_vector(const ModelParams& params) {
  Layout layout = params.extractor.layout();
  const auto& head = params.generic_head.layout();
  layout.insert(layout.end(), head.begin(), head.end());
  std::vector<double> values(params.extractor.values().begin(), params.extractor.values().end());
  values.insert(values.end(), params.generic_head.values().begin(), params.generic_head.values().end());
  return ParamVector(std::move(layout), std::move(values));
}

namespace {

double generic_squared_distance(const ModelParams& a, const ModelParams& b) {
  return a.extractor.squared_distance(b.extractor) + a.generic_head.squared_distance(b.generic_head);
}

// g += lambda * (w - anchor)
void add_proximal(ParamVector& g, const ParamVector& w, const ParamVector& anchor, double lambda) {
  auto gv = g.values();
  auto wv = w.values();
  auto av = anchor.values();
  for (std::size_t i = 0; i < gv.size(); ++i) gv[i] += lambda * (wv[i] - av[i]);
}

// What one pass of local minibatch SGD optimizes besides the generic loss.
struct LoopOptions {
  LossSpec loss;
  const ModelParams* anchor = nullptr;  // proximal term lambda * (w - anchor)
  double prox_lambda = 0.0;
  const ModelParams* linear = nullptr;  // FedDyn term sign * h
  double linear_sign = -1.0;
  bool train_personal_head = false;     // CE on g_P into phi only
  const HyperNetSpec* hyper = nullptr;  // CE on g_P into nu through the hypernetwork
  ParamVector* nu = nullptr;
  std::span<const double> distribution;
  std::optional<double>* gamma = nullptr;  // meta-tuned BSM exponent, updated per minibatch
  const MetaTuneConfig* meta = nullptr;
  std::span<const std::size_t> meta_rows;
};

// E epochs of shuffled minibatch SGD on w; returns the mean generic instance loss.
double run_local_loop(const Federation& fed, const ClientData& data, ModelParams& w, const LoopOptions& opt,
                      std::size_t epochs, const SgdConfig& sgd, std::size_t lr_round, Rng& rng) {
  const auto& spec = fed.net;
  const std::size_t n = data.size();
  if (n == 0) return 0.0;
  const auto counts = ClassCounts::from_counts(data.counts);
  const bool personal = opt.train_personal_head || opt.hyper;
  if (opt.train_personal_head && !w.personal_head) throw ConfigurationError("personal head training without a head");

  std::optional<RiskContext> ctx;
  if (!opt.gamma) ctx.emplace(opt.loss, counts);
  const auto ce = make_adjustment(LossSpec{}, counts);

  std::vector<int> meta_labels;
  for (auto r : opt.meta_rows) meta_labels.push_back(fed.train.labels[r]);
  const BatchView meta_batch{&fed.train, opt.meta_rows, meta_labels};

  auto grads = make_gradients(spec, GroupSet::generic());
  auto velocity = make_gradients(spec, GroupSet::generic());
  Gradients pgrads;
  if (personal) pgrads = make_gradients(spec, GroupSet::personal_only());
  ParamVector v_phi(spec.personal_head_layout());
  ParamVector v_nu = opt.hyper ? ParamVector(opt.hyper->layout()) : ParamVector();
  HyperCache hcache;

  ForwardCache cache;
  std::vector<double> dlogits(spec.num_classes), dpersonal(spec.num_classes);
  std::vector<std::size_t> order(n), rows;
  std::vector<int> labels;
  std::iota(order.begin(), order.end(), std::size_t{0});
  double loss_sum = 0.0;
  std::size_t loss_count = 0;

  for (std::size_t e = 0; e < epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < n; start += sgd.batch_size) {
      const std::size_t end = std::min(n, start + sgd.batch_size);
      rows.clear();
      labels.clear();
      for (std::size_t i = start; i < end; ++i) {
        rows.push_back(data.rows[order[i]]);
        labels.push_back(data.labels[order[i]]);
      }
      if (opt.gamma) {
        const BatchView batch{&fed.train, rows, labels};
        const double g0 = opt.gamma->value_or(opt.loss.gamma);
        *opt.gamma = meta_tune_gamma(spec, w, batch, counts, meta_batch, g0, *opt.meta);
        LossSpec tuned = opt.loss;
        tuned.gamma = **opt.gamma;
        ctx.emplace(tuned, counts);
      }
      if (opt.hyper) w.personal_head = generate_head(*opt.hyper, *opt.nu, opt.distribution, &hcache);

      grads.zero();
      if (personal) pgrads.zero();
      const double inv = 1.0 / static_cast<double>(rows.size());
      for (std::size_t i = 0; i < rows.size(); ++i) {
        forward(spec, w, fed.train.row(rows[i]), cache);
        loss_sum += accumulate_generic_sample(spec, w, cache, labels[i], *ctx, inv, dlogits, grads);
        ++loss_count;
        if (personal) {
          instance_loss_and_grad(cache.personal_logits, labels[i], ce, dpersonal);
          for (auto& g : dpersonal) g *= inv;
          backward(spec, w, cache, Branch::Personalized, dpersonal, GroupSet::personal_only(), pgrads);
        }
      }
      if (opt.linear) {
        grads.extractor.add_scaled(opt.linear->extractor, opt.linear_sign);
        grads.generic_head.add_scaled(opt.linear->generic_head, opt.linear_sign);
      }
      if (opt.anchor && opt.prox_lambda > 0.0) {
        add_proximal(grads.extractor, w.extractor, opt.anchor->extractor, opt.prox_lambda);
        add_proximal(grads.generic_head, w.generic_head, opt.anchor->generic_head, opt.prox_lambda);
      }
      sgd_step(w.extractor, grads.extractor, velocity.extractor, sgd, lr_round);
      sgd_step(w.generic_head, grads.generic_head, velocity.generic_head, sgd, lr_round);
      if (opt.train_personal_head) {
        sgd_step(*w.personal_head, pgrads.personal_head, v_phi, sgd, lr_round);
      } else if (opt.hyper) {
        const auto dnu = hyper_backward(*opt.hyper, *opt.nu, hcache, pgrads.personal_head);
        sgd_step(*opt.nu, dnu, v_nu, sgd, lr_round);
      }
    }
  }
  if (opt.hyper) w.personal_head = generate_head(*opt.hyper, *opt.nu, opt.distribution);
  return loss_count ? loss_sum / static_cast<double>(loss_count) : 0.0;
}

}  // namespace

LocalResult local_train(const Federation& fed, const AlgorithmSpec& alg, const ExperimentPlan& plan,
                        std::size_t client, const Broadcast& broadcast, const ClientState& state, std::size_t round) {
  if (client >= fed.num_clients()) throw DomainError("client id out of range");
  const auto& data = fed.clients[client];
  if (data.size() == 0) throw DomainError("client " + std::to_string(client) + " has no data");
  if (round < 1) throw DomainError("rounds are numbered from 1");
  const auto& global = *broadcast.global;
  const std::size_t lr_round = round - 1;

  LocalResult out;
  out.state = state;
  LoopOptions opt;
  opt.loss = alg.loss;
  if (alg.meta_gamma) {
    if (fed.meta_rows.empty()) throw ConfigurationError("meta_gamma needs a meta set (meta_set.per_class >= 1)");
    opt.gamma = &out.state.gamma;
    opt.meta = &alg.meta;
    opt.meta_rows = fed.meta_rows;
  }

  ModelParams w{global.extractor, global.generic_head, std::nullopt};
  switch (alg.kind) {
    case Algorithm::FedAvg:
    case Algorithm::Ditto:
      break;
    case Algorithm::FedProx:
      opt.anchor = &global;
      opt.prox_lambda = alg.lambda;
      break;
    case Algorithm::FedDyn:
      if (!out.state.feddyn_h) {
        out.state.feddyn_h = ModelParams{ParamVector(global.extractor.layout()),
                                         ParamVector(global.generic_head.layout()), std::nullopt};
      }
      opt.anchor = &global;
      opt.prox_lambda = alg.lambda;
      opt.linear = &*out.state.feddyn_h;
      opt.linear_sign = alg.feddyn_sign;
      break;
    case Algorithm::FedRoDLinear:
      w.personal_head = state.personal_head ? *state.personal_head : ParamVector(fed.net.personal_head_layout());
      opt.train_personal_head = true;
      break;
    case Algorithm::FedRoDHyper:
      out.nu = *broadcast.nu;
      opt.hyper = &fed.hyper;
      opt.nu = &*out.nu;
      break;
    case Algorithm::LocalOnly:
      if (state.local) {
        w = ModelParams{state.local->extractor, state.local->generic_head, std::nullopt};
      } else {
        const auto& init = broadcast.initial ? *broadcast.initial : global;
        w = ModelParams{init.extractor, init.generic_head, std::nullopt};
      }
      break;
  }

  // The hypernetwork input is the class distribution of the data it trains on.
  std::vector<double> train_distribution;
  if (alg.hyper()) {
    train_distribution = class_distribution(data.counts);
    opt.distribution = train_distribution;
  }

  auto rng = keyed_rng(plan.seed, Stream::LocalShuffle, {round, client});
  out.mean_loss = run_local_loop(fed, data, w, opt, plan.local_epochs, plan.sgd, lr_round, rng);

  if (alg.kind == Algorithm::FedDyn && alg.lambda > 0.0) {
    auto& h = *out.state.feddyn_h;
    const double s = alg.feddyn_sign * alg.lambda;
    h.extractor.add_scaled(w.extractor, s);
    h.extractor.add_scaled(global.extractor, -s);
    h.generic_head.add_scaled(w.generic_head, s);
    h.generic_head.add_scaled(global.generic_head, -s);
  }
  if (alg.kind == Algorithm::FedRoDLinear) out.state.personal_head = *w.personal_head;
  if (alg.kind == Algorithm::Ditto) {
    // Personalized model: empirical risk plus lambda/2 ||w - w_bar||^2, on
    // its own shuffle stream so the aggregated side is untouched.
    ModelParams p = state.ditto ? *state.ditto : ModelParams{global.extractor, global.generic_head, std::nullopt};
    LoopOptions popt;
    popt.anchor = &global;
    popt.prox_lambda = alg.lambda;
    auto prng = keyed_rng(plan.seed, Stream::PersonalShuffle, {round, client});
    run_local_loop(fed, data, p, popt, plan.local_epochs, plan.sgd, lr_round, prng);
    out.state.ditto = std::move(p);
  }
  out.model = std::move(w);
  out.state.local = out.model;
  return out;
}

ModelParams finetune_personal(const NetworkSpec& spec, const ModelParams& model, const Dataset& data,
                              const ClientData& client, std::size_t steps, double lr, const SgdConfig& sgd,
                              bool full_model, std::uint64_t seed, std::uint64_t client_key) {
  if (steps == 0 || lr == 0.0) return model;
  if (client.size() == 0) throw DomainError("cannot fine-tune on an empty client");
  SgdConfig cfg = sgd;
  cfg.lr0 = lr;
  cfg.validate();
  ModelParams w = model;
  if (!w.personal_head) w.personal_head = ParamVector(spec.personal_head_layout());
  const auto groups = full_model ? GroupSet::all() : GroupSet::personal_only();
  const auto ce = make_adjustment(LossSpec{}, ClassCounts::from_counts(client.counts));

  auto grads = make_gradients(spec, groups);
  auto velocity = make_gradients(spec, groups);
  ForwardCache cache;
  std::vector<double> dlogits(spec.num_classes);
  std::vector<std::size_t> order(client.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto rng = keyed_rng(seed, Stream::Finetune, {client_key});
  std::size_t pos = order.size();
  for (std::size_t step = 0; step < steps; ++step) {
    grads.zero();
    const std::size_t b = std::min(cfg.batch_size, order.size());
    const double inv = 1.0 / static_cast<double>(b);
    for (std::size_t i = 0; i < b; ++i) {
      if (pos == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        pos = 0;
      }
      const auto k = order[pos++];
      forward(spec, w, data.row(client.rows[k]), cache);
      instance_loss_and_grad(cache.personal_logits, client.labels[k], ce, dlogits);
      for (auto& g : dlogits) g *= inv;
      backward(spec, w, cache, Branch::Personalized, dlogits, groups, grads);
    }
    if (full_model) {
      sgd_step(w.extractor, grads.extractor, velocity.extractor, cfg, 0);
      sgd_step(w.generic_head, grads.generic_head, velocity.generic_head, cfg, 0);
    }
    sgd_step(*w.personal_head, grads.personal_head, velocity.personal_head, cfg, 0);
  }
  return w;
}

// ---------------------------------------------------------------------------

Experiment::Experiment(const Federation& fed, AlgorithmSpec alg, ExperimentPlan plan)
    : fed_(fed), alg_(std::move(alg)), plan_(std::move(plan)) {
  alg_.validate();
  plan_.validate();
  initial_ = init_params(fed_.net, plan_.seed, false, plan_.init_std);
  global_ = initial_;
  if (alg_.hyper()) nu_ = init_hypernet(fed_.hyper, plan_.seed);
  states_.resize(fed_.num_clients());
  eligible_ = fed_.eligible_clients();
}

namespace {

[[noreturn]] void rethrow_with_context(std::exception_ptr e, const std::string& where) {
  try {
    std::rethrow_exception(e);
  } catch (const NumericError& ex) {
    throw NumericError(where + ex.what());
  } catch (const DomainError& ex) {
    throw DomainError(where + ex.what());
  } catch (const ConfigurationError& ex) {
    throw ConfigurationError(where + ex.what());
  } catch (const AggregationError& ex) {
    throw AggregationError(where + ex.what());
  } catch (const std::exception& ex) {
    throw std::runtime_error(where + ex.what());
  }
}

}  // namespace

const RoundStats& Experiment::run_round() {
  const std::size_t round = round_ + 1;
  const auto sampled = sample_clients(eligible_, plan_.participation, plan_.seed, round);
  const Broadcast broadcast{&global_, alg_.hyper() ? &nu_ : nullptr, &initial_};

  std::vector<LocalResult> results(sampled.size());
  std::vector<std::exception_ptr> errors(sampled.size());
  const auto count = static_cast<std::ptrdiff_t>(sampled.size());
#pragma omp parallel for schedule(dynamic) if (plan_.parallel)
  for (std::ptrdiff_t k = 0; k < count; ++k) {
    const auto i = static_cast<std::size_t>(k);
    try {
      results[i] = local_train(fed_, alg_, plan_, sampled[i], broadcast, states_[sampled[i]], round);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  }
  for (std::size_t i = 0; i < sampled.size(); ++i) {
    if (errors[i]) {
      rethrow_with_context(errors[i], "round " + std::to_string(round) + ", client " +
                                          std::to_string(sampled[i]) + ": ");
    }
  }

  RoundStats stats;
  stats.sampled = sampled;
  std::vector<ParamVector> locals;
  std::vector<double> losses, reg_local, reg_personal;
  std::vector<const ParamVector*> thetas, psis, nus;
  std::vector<double> weights;
  for (std::size_t i = 0; i < sampled.size(); ++i) {
    auto& r = results[i];
    locals.push_back(generic_vector(r.model));
    losses.push_back(r.mean_loss);
    const double d = generic_squared_distance(r.model, global_);
    reg_local.push_back(d);
    reg_personal.push_back(r.state.ditto ? generic_squared_distance(*r.state.ditto, global_) : d);
    thetas.push_back(&r.model.extractor);
    psis.push_back(&r.model.generic_head);
    if (r.nu) nus.push_back(&*r.nu);
    weights.push_back(static_cast<double>(fed_.clients[sampled[i]].size()));
  }
  stats.drift = drift_stats(locals, generic_vector(global_));
  double total = 0.0;
  for (double w : weights) total += w;
  stats.reg_local = 0.0;
  stats.reg_personal = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    stats.reg_local += weights[i] / total * reg_local[i];
    stats.reg_personal += weights[i] / total * reg_personal[i];
  }
  stats.train_loss_mean = mean_var(losses).mean;

  try {
    global_.extractor = weighted_average(thetas, weights);
    global_.generic_head = weighted_average(psis, weights);
    if (alg_.hyper()) nu_ = weighted_average(nus, weights);
  } catch (const std::exception& ex) {
    throw AggregationError("round " + std::to_string(round) + ": " + ex.what());
  }
  for (std::size_t i = 0; i < sampled.size(); ++i) states_[sampled[i]] = std::move(results[i].state);

  round_ = round;
  stats_ = std::move(stats);
  return stats_;
}

ModelParams Experiment::fallback_model(std::span<const double> distribution) const {
  ModelParams m{global_.extractor, global_.generic_head, std::nullopt};
  if (alg_.kind == Algorithm::FedRoDLinear) m.personal_head = ParamVector(fed_.net.personal_head_layout());
  if (alg_.hyper() && !distribution.empty()) m.personal_head = generate_head(fed_.hyper, nu_, distribution);
  return m;
}

ModelParams Experiment::local_model(std::size_t m) const {
  const auto& s = states_.at(m);
  if (s.local) return *s.local;
  if (alg_.kind == Algorithm::LocalOnly) return initial_;
  return fallback_model(fed_.clients[m].size() ? class_distribution(fed_.clients[m].counts) : std::vector<double>{});
}

ModelParams Experiment::personalized_model(std::size_t m) const {
  const auto& s = states_.at(m);
  if (alg_.kind == Algorithm::Ditto) {
    return s.ditto ? *s.ditto : ModelParams{global_.extractor, global_.generic_head, std::nullopt};
  }
  return local_model(m);
}

MetricsRow Experiment::evaluate() const {
  const auto& test = fed_.test;
  MetricsRow row;
  row.round = round_;
  const auto global_preds = predict(fed_.net, global_, test, Head::Generic);
  row.gfl_global = accuracy(global_preds, test);

  std::vector<std::size_t> ids;
  for (std::size_t m = 0; m < fed_.num_clients(); ++m) {
    if (fed_.evaluated[m]) ids.push_back(m);
  }
  std::vector<std::vector<double>> dists;
  std::vector<std::vector<int>> global_rep, personal_preds;
  std::vector<double> local_acc;
  for (auto m : ids) {
    dists.push_back(fed_.eval_distributions[m]);
    global_rep.push_back(global_preds);
    local_acc.push_back(accuracy(predict(fed_.net, local_model(m), test, Head::Generic), test));
    personal_preds.push_back(predict(fed_.net, personalized_model(m), test, Head::Personalized));
  }
  if (!ids.empty()) {
    const auto lv = mean_var(local_acc);
    row.gfl_local_mean = lv.mean;
    row.gfl_local_var = lv.variance;
    row.pfl_global = pfl_accuracy(global_rep, test, dists);
    row.pfl_personal = pfl_accuracy(personal_preds, test, dists);
  }
  if (round_ > 0) {
    row.drift_mean = stats_.drift.mean;
    row.drift_var = stats_.drift.variance;
    row.train_loss_mean = stats_.train_loss_mean;
    row.reg_local = stats_.reg_local;
    row.reg_personal = stats_.reg_personal;
  } else {
    row.gfl_local_mean = row.gfl_global;
    row.gfl_local_var = 0.0;
  }
  return row;
}

void Experiment::evaluate_holdout(MetricsLog& log) const {
  if (fed_.holdout.empty()) return;
  const auto& test = fed_.test;
  const auto global_preds = predict(fed_.net, global_, test, Head::Generic);
  std::vector<std::vector<int>> generic, zero_shot, tuned;
  for (std::size_t h = 0; h < fed_.holdout.size(); ++h) {
    const auto model = fallback_model(fed_.holdout_distributions[h]);
    generic.push_back(global_preds);
    zero_shot.push_back(predict(fed_.net, model, test, Head::Personalized));
    const auto ft = finetune_personal(fed_.net, model, fed_.train, fed_.holdout[h], plan_.finetune_steps,
                                      plan_.finetune_lr, plan_.sgd, plan_.finetune_full_model, plan_.seed, h);
    tuned.push_back(predict(fed_.net, ft, test, Head::Personalized));
  }
  log.holdout_generic = pfl_accuracy(generic, test, fed_.holdout_distributions);
  log.holdout_zero_shot = pfl_accuracy(zero_shot, test, fed_.holdout_distributions);
  log.holdout_finetuned = pfl_accuracy(tuned, test, fed_.holdout_distributions);
}

MetricsLog Experiment::run() {
  MetricsLog log;
  if (round_ == 0) log.rows.push_back(evaluate());
  while (round_ < plan_.rounds) {
    run_round();
    if (round_ % plan_.eval_every == 0 || round_ == plan_.rounds) log.rows.push_back(evaluate());
    if (plan_.checkpoint_every > 0 && round_ % plan_.checkpoint_every == 0 && !plan_.checkpoint_dir.empty()) {
      char name[32];
      std::snprintf(name, sizeof name, "round_%04zu.ckpt", round_);
      save_checkpoint(plan_.checkpoint_dir / name);
    }
  }

  std::vector<ModelParams> personal;
  std::vector<std::vector<double>> dists;
  for (std::size_t m = 0; m < fed_.num_clients(); ++m) {
    if (!fed_.evaluated[m]) continue;
    personal.push_back(personalized_model(m));
    dists.push_back(fed_.eval_distributions[m]);
  }
  log.matrix = cross_client_matrix(fed_.net, personal, dists, fed_.test);
  log.recall_global = per_class_recall(predict(fed_.net, global_, fed_.test, Head::Generic), fed_.test);
  evaluate_holdout(log);
  return log;
}

void Experiment::save_checkpoint(const std::filesystem::path& path) const {
  std::vector<CheckpointSection> sections;
  sections.push_back({"global.extractor", global_.extractor});
  sections.push_back({"global.generic_head", global_.generic_head});
  if (alg_.hyper()) sections.push_back({"global.hyper", nu_});
  for (std::size_t m = 0; m < states_.size(); ++m) {
    const auto& s = states_[m];
    const std::string prefix = "client." + std::to_string(m) + ".";
    if (s.personal_head) sections.push_back({prefix + "personal_head", *s.personal_head});
    if (s.feddyn_h) sections.push_back({prefix + "feddyn_h", generic_vector(*s.feddyn_h)});
    if (s.ditto) sections.push_back({prefix + "ditto", generic_vector(*s.ditto)});
  }
  std::filesystem::create_directories(path.parent_path());
  write_checkpoint(path, sections);
}

}  // namespace fedrod
