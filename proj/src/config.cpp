#include "fedrod/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "fedrod/errors.hpp"

namespace fedrod {

std::string ConfigValue::describe() const {
  switch (kind) {
    case Kind::Bool: return "boolean";
    case Kind::Int: return "integer";
    case Kind::Float: return "float";
    case Kind::String: return "string";
    case Kind::Array: return "array";
  }
  return "value";
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

// Splits "a, [b, c], 'd,e'" at top-level commas.
std::vector<std::string> split_items(const std::string& body) {
  std::vector<std::string> out;
  std::string cur;
  int depth = 0;
  char quote = 0;
  for (std::size_t i = 0; i < body.size(); ++i) {
    const char c = body[i];
    if (quote) {
      cur += c;
      if (c == '\\' && quote == '"' && i + 1 < body.size()) {
        cur += body[++i];
      } else if (c == quote) {
        quote = 0;
      }
      continue;
    }
    if (c == '"' || c == '\'') quote = c;
    if (c == '[') ++depth;
    if (c == ']') --depth;
    if (c == ',' && depth == 0) {
      out.push_back(trim(cur));
      cur.clear();
      continue;
    }
    cur += c;
  }
  if (quote || depth != 0) throw ConfigurationError("unbalanced array or string");
  const auto last = trim(cur);
  if (!last.empty()) out.push_back(last);
  for (const auto& item : out) {
    if (item.empty()) throw ConfigurationError("empty array element");
  }
  return out;
}

std::string parse_basic_string(const std::string& t) {
  std::string out;
  for (std::size_t i = 1; i + 1 < t.size(); ++i) {
    char c = t[i];
    if (c == '"') throw ConfigurationError("unescaped quote inside string");
    if (c == '\\') {
      if (i + 2 >= t.size()) throw ConfigurationError("dangling escape in string");
      switch (t[++i]) {
        case 'n': c = '\n'; break;
        case 't': c = '\t'; break;
        case '"': c = '"'; break;
        case '\\': c = '\\'; break;
        default: throw ConfigurationError("unsupported escape in string");
      }
    }
    out += c;
  }
  return out;
}

bool is_key_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.'; }

std::string strip_comment(const std::string& line) {
  char quote = 0;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quote) {
      if (c == '\\' && quote == '"') ++i;
      else if (c == quote) quote = 0;
    } else if (c == '"' || c == '\'') {
      quote = c;
    } else if (c == '#') {
      return line.substr(0, i);
    }
  }
  return line;
}

}  // namespace

ConfigValue parse_config_value(const std::string& text) {
  const auto t = trim(text);
  if (t.empty()) throw ConfigurationError("missing value");
  ConfigValue v;
  if (t.front() == '"') {
    if (t.size() < 2 || t.back() != '"') throw ConfigurationError("unterminated string " + t);
    v.kind = ConfigValue::Kind::String;
    v.s = parse_basic_string(t);
    return v;
  }
  if (t.front() == '\'') {
    if (t.size() < 2 || t.back() != '\'' || t.find('\'', 1) != t.size() - 1) {
      throw ConfigurationError("malformed literal string " + t);
    }
    v.kind = ConfigValue::Kind::String;
    v.s = t.substr(1, t.size() - 2);
    return v;
  }
  if (t == "true" || t == "false") {
    v.kind = ConfigValue::Kind::Bool;
    v.b = t == "true";
    return v;
  }
  if (t.front() == '[') {
    if (t.back() != ']') throw ConfigurationError("unterminated array " + t);
    v.kind = ConfigValue::Kind::Array;
    for (const auto& item : split_items(t.substr(1, t.size() - 2))) v.items.push_back(parse_config_value(item));
    return v;
  }
  const char* first = t.data();
  const char* last = t.data() + t.size();
  if (*first == '+') ++first;
  std::int64_t iv = 0;
  auto ir = std::from_chars(first, last, iv);
  if (ir.ec == std::errc() && ir.ptr == last) {
    v.kind = ConfigValue::Kind::Int;
    v.i = iv;
    return v;
  }
  double dv = 0.0;
  auto dr = std::from_chars(first, last, dv);
  if (dr.ec == std::errc() && dr.ptr == last && std::isfinite(dv)) {
    v.kind = ConfigValue::Kind::Float;
    v.d = dv;
    return v;
  }
  throw ConfigurationError("cannot parse value '" + t + "'");
}

RawConfig parse_config_text(const std::string& text, const std::string& origin) {
  RawConfig out;
  std::istringstream in(text);
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto where = origin + ":" + std::to_string(lineno) + ": ";
    const auto t = trim(strip_comment(line));
    if (t.empty()) continue;
    if (t.front() == '[') {
      if (t.back() != ']') throw ConfigurationError(where + "malformed section header");
      section = trim(t.substr(1, t.size() - 2));
      if (section.empty() || !std::all_of(section.begin(), section.end(), is_key_char)) {
        throw ConfigurationError(where + "bad section name '" + section + "'");
      }
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigurationError(where + "expected key = value");
    const auto key = trim(t.substr(0, eq));
    if (key.empty() || !std::all_of(key.begin(), key.end(), is_key_char)) {
      throw ConfigurationError(where + "bad key '" + key + "'");
    }
    const auto full = section.empty() ? key : section + "." + key;
    if (out.count(full)) throw ConfigurationError(where + "duplicate key '" + full + "'");
    try {
      out[full] = parse_config_value(t.substr(eq + 1));
    } catch (const ConfigurationError& e) {
      throw ConfigurationError(where + "key '" + full + "': " + e.what());
    }
  }
  return out;
}

RawConfig parse_config_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigurationError("cannot open config file " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str(), path.string());
}

// ---------------------------------------------------------------------------

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys{
      "algorithm",          "lambda",          "feddyn_sign",      "meta_gamma",       "rounds",
      "local_epochs",       "participation",   "clients",          "holdout_clients",  "alpha",
      "imbalance_ratio",    "seed",            "repetitions",      "seeds",            "eval_every",
      "checkpoint_every",   "parallel",        "loss.kind",        "loss.gamma",       "loss.ir_power",
      "meta.eta_inner",     "meta.eta_meta",   "meta.eps",         "meta.gamma_max",   "dataset.kind",
      "dataset.path",       "dataset.labels_path", "dataset.test_path", "dataset.test_labels_path",
      "dataset.classes",    "dataset.dim",     "dataset.n_per_class", "dataset.test_per_class",
      "dataset.separation", "model.hidden",    "model.feature_dim", "model.init_std",  "hyper.hidden",
      "sgd.lr",             "sgd.decay",       "sgd.momentum",     "sgd.weight_decay", "sgd.batch_size",
      "meta_set.per_class", "meta_set.augment", "attack.poisoned_clients", "finetune.steps", "finetune.lr",
      "finetune.full_model", "output.dir"};
  return keys;
}

namespace {

class Reader {
 public:
  explicit Reader(const RawConfig& raw) : raw_(raw) {
    const auto& keys = config_keys();
    for (const auto& [k, v] : raw_) {
      if (std::find(keys.begin(), keys.end(), k) == keys.end()) throw ConfigurationError("unknown key '" + k + "'");
    }
  }

  bool has(const std::string& key) const { return raw_.count(key) > 0; }

  double real(const std::string& key, double def) const {
    const auto* v = find(key);
    if (!v) return def;
    if (v->kind == ConfigValue::Kind::Int) return static_cast<double>(v->i);
    if (v->kind == ConfigValue::Kind::Float) return v->d;
    mismatch(key, "number", *v);
  }

  std::uint64_t uint(const std::string& key, std::uint64_t def) const {
    const auto* v = find(key);
    if (!v) return def;
    return as_uint(key, *v);
  }

  bool boolean(const std::string& key, bool def) const {
    const auto* v = find(key);
    if (!v) return def;
    if (v->kind != ConfigValue::Kind::Bool) mismatch(key, "boolean", *v);
    return v->b;
  }

  std::string str(const std::string& key, const std::string& def) const {
    const auto* v = find(key);
    if (!v) return def;
    if (v->kind != ConfigValue::Kind::String) mismatch(key, "string", *v);
    return v->s;
  }

  // An array of nonnegative integers; a bare integer is a one-element list.
  std::vector<std::uint64_t> uint_list(const std::string& key, std::vector<std::uint64_t> def) const {
    const auto* v = find(key);
    if (!v) return def;
    std::vector<std::uint64_t> out;
    if (v->kind == ConfigValue::Kind::Array) {
      for (const auto& item : v->items) out.push_back(as_uint(key, item));
    } else {
      out.push_back(as_uint(key, *v));
    }
    return out;
  }

 private:
  const ConfigValue* find(const std::string& key) const {
    auto it = raw_.find(key);
    return it == raw_.end() ? nullptr : &it->second;
  }

  [[noreturn]] static void mismatch(const std::string& key, const char* expected, const ConfigValue& v) {
    throw ConfigurationError("key '" + key + "': expected " + expected + ", got " + v.describe());
  }

  static std::uint64_t as_uint(const std::string& key, const ConfigValue& v) {
    if (v.kind != ConfigValue::Kind::Int) mismatch(key, "integer", v);
    if (v.i < 0) throw ConfigurationError("key '" + key + "' must be >= 0");
    return static_cast<std::uint64_t>(v.i);
  }

  const RawConfig& raw_;
};

std::string fmt_real(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  std::string s(buf, r.ptr);
  if (s.find_first_of(".e") == std::string::npos) s += ".0";
  return s;
}

std::string fmt_str(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    if (c == '\n') {
      out += "\\n";
      continue;
    }
    out += c;
  }
  return out + "\"";
}

template <class T>
std::string fmt_list(const std::vector<T>& xs) {
  std::string out = "[";
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? ", " : "") + std::to_string(xs[i]);
  return out + "]";
}

std::string fmt_bool(bool b) { return b ? "true" : "false"; }

}  // namespace

ExperimentConfig resolve_config(const RawConfig& values) {
  Reader r(values);
  ExperimentConfig c;

  auto& alg = c.algorithm;
  alg.kind = parse_algorithm(r.str("algorithm", "fedavg"));
  const bool fedrod = alg.fedrod();
  alg.loss.kind = parse_loss_kind(r.str("loss.kind", fedrod ? "bsm" : "ce"));
  alg.loss.gamma = r.real("loss.gamma", LossSpec::default_gamma(alg.loss.kind));
  alg.loss.ir_power = r.real("loss.ir_power", 1.0);
  alg.lambda = r.real("lambda", AlgorithmSpec::default_lambda(alg.kind));
  alg.feddyn_sign = r.real("feddyn_sign", -1.0);
  alg.meta_gamma = r.boolean("meta_gamma", false);
  alg.meta.eta_inner = r.real("meta.eta_inner", alg.meta.eta_inner);
  alg.meta.eta_meta = r.real("meta.eta_meta", alg.meta.eta_meta);
  alg.meta.eps = r.real("meta.eps", alg.meta.eps);
  alg.meta.gamma_max = r.real("meta.gamma_max", alg.meta.gamma_max);

  auto& plan = c.plan;
  plan.rounds = r.uint("rounds", 100);
  plan.local_epochs = r.uint("local_epochs", 5);
  plan.participation = r.real("participation", 0.2);
  plan.eval_every = r.uint("eval_every", 1);
  plan.checkpoint_every = r.uint("checkpoint_every", 0);
  plan.parallel = r.boolean("parallel", true);
  plan.init_std = r.real("model.init_std", 0.05);
  plan.sgd.lr0 = r.real("sgd.lr", 0.01);
  plan.sgd.lr_round_decay = r.real("sgd.decay", 0.99);
  plan.sgd.momentum = r.real("sgd.momentum", 0.9);
  plan.sgd.weight_decay = r.real("sgd.weight_decay", 1e-5);
  plan.sgd.batch_size = r.uint("sgd.batch_size", 40);
  plan.finetune_steps = r.uint("finetune.steps", 50);
  plan.finetune_lr = r.real("finetune.lr", plan.sgd.lr0);
  plan.finetune_full_model = r.boolean("finetune.full_model", false);

  auto& ds = c.dataset;
  ds.kind = r.str("dataset.kind", "synthetic");
  ds.path = r.str("dataset.path", "");
  ds.labels_path = r.str("dataset.labels_path", "");
  ds.test_path = r.str("dataset.test_path", "");
  ds.test_labels_path = r.str("dataset.test_labels_path", "");
  ds.classes = r.uint("dataset.classes", 10);
  ds.dim = r.uint("dataset.dim", ds.kind == "idx" ? 784 : 32);
  ds.n_per_class = r.uint("dataset.n_per_class", 500);
  ds.test_per_class = r.uint("dataset.test_per_class", 100);
  ds.separation = r.real("dataset.separation", 4.0);

  c.net.input_dim = ds.dim;
  c.net.num_classes = ds.classes;
  {
    auto hidden = r.uint_list("model.hidden", {64});
    c.net.hidden_dims.assign(hidden.begin(), hidden.end());
  }
  c.net.feature_dim = r.uint("model.feature_dim", 32);
  c.hyper_hidden = r.uint("hyper.hidden", 0);
  c.imbalance_ratio = r.real("imbalance_ratio", 1.0);
  c.meta_per_class = r.uint("meta_set.per_class", 10);

  auto& fo = c.federation;
  fo.clients = r.uint("clients", 20);
  fo.holdout_clients = r.uint("holdout_clients", 0);
  fo.alpha = r.real("alpha", 0.3);
  fo.augment_meta = r.boolean("meta_set.augment", false);
  {
    auto p = r.uint_list("attack.poisoned_clients", {});
    fo.poisoned_clients.assign(p.begin(), p.end());
  }
  fo.meta_per_class = (fo.augment_meta || alg.meta_gamma) ? c.meta_per_class : 0;

  const auto seed = r.uint("seed", 0);
  const auto reps = r.uint("repetitions", 1);
  if (r.has("seeds")) {
    auto s = r.uint_list("seeds", {});
    c.seeds.assign(s.begin(), s.end());
    if (r.has("repetitions") && reps != c.seeds.size()) {
      throw ConfigurationError("key 'repetitions' disagrees with the length of 'seeds'");
    }
  } else {
    if (reps < 1) throw ConfigurationError("key 'repetitions' must be >= 1");
    c.seeds.clear();
    for (std::uint64_t i = 0; i < reps; ++i) c.seeds.push_back(seed + i);
  }
  c.output_dir = r.str("output.dir", "runs/out");
  c.validate();
  return c;
}

void ExperimentConfig::validate() const {
  algorithm.validate();
  plan.validate();
  net.validate();
  if (dataset.kind != "synthetic" && dataset.kind != "idx") {
    throw ConfigurationError("key 'dataset.kind' must be synthetic or idx");
  }
  if (dataset.kind == "idx") {
    if (dataset.path.empty() || dataset.labels_path.empty() || dataset.test_path.empty() ||
        dataset.test_labels_path.empty()) {
      throw ConfigurationError("dataset.kind = idx needs dataset.path, labels_path, test_path, test_labels_path");
    }
    if (dataset.dim != 784) throw ConfigurationError("key 'dataset.dim' must be 784 for idx data");
  }
  if (dataset.classes < 2) throw ConfigurationError("key 'dataset.classes' must be >= 2");
  if (dataset.dim < 1) throw ConfigurationError("key 'dataset.dim' must be >= 1");
  if (dataset.n_per_class < 1) throw ConfigurationError("key 'dataset.n_per_class' must be >= 1");
  if (dataset.test_per_class < 1) throw ConfigurationError("key 'dataset.test_per_class' must be >= 1");
  if (!(dataset.separation > 0.0)) throw ConfigurationError("key 'dataset.separation' must be > 0");
  if (federation.clients < 1) throw ConfigurationError("key 'clients' must be >= 1");
  if (!(federation.alpha > 0.0) || !std::isfinite(federation.alpha)) {
    throw ConfigurationError("key 'alpha' must be > 0");
  }
  if (!(imbalance_ratio >= 1.0)) throw ConfigurationError("key 'imbalance_ratio' must be >= 1");
  if ((federation.augment_meta || algorithm.meta_gamma) && meta_per_class < 1) {
    throw ConfigurationError("key 'meta_set.per_class' must be >= 1 when the meta set is used");
  }
  for (auto m : federation.poisoned_clients) {
    if (m >= federation.clients) {
      throw ConfigurationError("key 'attack.poisoned_clients': id " + std::to_string(m) + " >= clients");
    }
  }
  if (seeds.empty()) throw ConfigurationError("key 'seeds' must be nonempty");
  if (algorithm.hyper() && federation.holdout_clients > 0 && plan.finetune_steps > 0 && !(plan.finetune_lr > 0.0)) {
    throw ConfigurationError("key 'finetune.lr' must be > 0");
  }
}

std::string ExperimentConfig::to_toml() const {
  std::ostringstream o;
  o << "algorithm = " << fmt_str(std::string(to_string(algorithm.kind))) << '\n'
    << "lambda = " << fmt_real(algorithm.lambda) << '\n'
    << "feddyn_sign = " << fmt_real(algorithm.feddyn_sign) << '\n'
    << "meta_gamma = " << fmt_bool(algorithm.meta_gamma) << '\n'
    << "rounds = " << plan.rounds << '\n'
    << "local_epochs = " << plan.local_epochs << '\n'
    << "participation = " << fmt_real(plan.participation) << '\n'
    << "clients = " << federation.clients << '\n'
    << "holdout_clients = " << federation.holdout_clients << '\n'
    << "alpha = " << fmt_real(federation.alpha) << '\n'
    << "imbalance_ratio = " << fmt_real(imbalance_ratio) << '\n'
    << "seed = " << seeds.front() << '\n'
    << "repetitions = " << seeds.size() << '\n'
    << "seeds = " << fmt_list(seeds) << '\n'
    << "eval_every = " << plan.eval_every << '\n'
    << "checkpoint_every = " << plan.checkpoint_every << '\n'
    << "parallel = " << fmt_bool(plan.parallel) << '\n'
    << "\n[loss]\n"
    << "kind = " << fmt_str(std::string(to_string(algorithm.loss.kind))) << '\n'
    << "gamma = " << fmt_real(algorithm.loss.gamma) << '\n'
    << "ir_power = " << fmt_real(algorithm.loss.ir_power) << '\n'
    << "\n[meta]\n"
    << "eta_inner = " << fmt_real(algorithm.meta.eta_inner) << '\n'
    << "eta_meta = " << fmt_real(algorithm.meta.eta_meta) << '\n'
    << "eps = " << fmt_real(algorithm.meta.eps) << '\n'
    << "gamma_max = " << fmt_real(algorithm.meta.gamma_max) << '\n'
    << "\n[dataset]\n"
    << "kind = " << fmt_str(dataset.kind) << '\n'
    << "path = " << fmt_str(dataset.path) << '\n'
    << "labels_path = " << fmt_str(dataset.labels_path) << '\n'
    << "test_path = " << fmt_str(dataset.test_path) << '\n'
    << "test_labels_path = " << fmt_str(dataset.test_labels_path) << '\n'
    << "classes = " << dataset.classes << '\n'
    << "dim = " << dataset.dim << '\n'
    << "n_per_class = " << dataset.n_per_class << '\n'
    << "test_per_class = " << dataset.test_per_class << '\n'
    << "separation = " << fmt_real(dataset.separation) << '\n'
    << "\n[model]\n"
    << "hidden = " << fmt_list(net.hidden_dims) << '\n'
    << "feature_dim = " << net.feature_dim << '\n'
    << "init_std = " << fmt_real(plan.init_std) << '\n'
    << "\n[hyper]\n"
    << "hidden = " << hyper_hidden << '\n'
    << "\n[sgd]\n"
    << "lr = " << fmt_real(plan.sgd.lr0) << '\n'
    << "decay = " << fmt_real(plan.sgd.lr_round_decay) << '\n'
    << "momentum = " << fmt_real(plan.sgd.momentum) << '\n'
    << "weight_decay = " << fmt_real(plan.sgd.weight_decay) << '\n'
    << "batch_size = " << plan.sgd.batch_size << '\n'
    << "\n[meta_set]\n"
    << "per_class = " << meta_per_class << '\n'
    << "augment = " << fmt_bool(federation.augment_meta) << '\n'
    << "\n[attack]\n"
    << "poisoned_clients = " << fmt_list(federation.poisoned_clients) << '\n'
    << "\n[finetune]\n"
    << "steps = " << plan.finetune_steps << '\n'
    << "lr = " << fmt_real(plan.finetune_lr) << '\n'
    << "full_model = " << fmt_bool(plan.finetune_full_model) << '\n'
    << "\n[output]\n"
    << "dir = " << fmt_str(output_dir.string()) << '\n';
  return o.str();
}

}  // namespace fedrod
