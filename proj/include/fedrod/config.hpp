#pragma once

// Flat TOML-style experiment configuration: `key = value` lines, optional
// one-level `[section]` headers, strings, booleans, numbers and arrays.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "fedrod/fedcore.hpp"

namespace fedrod {

struct ConfigValue {
  enum class Kind { Bool, Int, Float, String, Array };
  Kind kind = Kind::String;
  bool b = false;
  std::int64_t i = 0;
  double d = 0.0;
  std::string s;
  std::vector<ConfigValue> items;

  std::string describe() const;  // kind name for error messages
};

// Parses one TOML value; throws ConfigurationError on malformed input.
ConfigValue parse_config_value(const std::string& text);

// Dotted key -> value. Later assignments of the same key win.
using RawConfig = std::map<std::string, ConfigValue>;

RawConfig parse_config_text(const std::string& text, const std::string& origin = "<config>");
RawConfig parse_config_file(const std::filesystem::path& path);

struct DatasetConfig {
  std::string kind = "synthetic";  // synthetic | idx
  std::string path, labels_path, test_path, test_labels_path;
  std::size_t classes = 10;
  std::size_t dim = 32;
  std::size_t n_per_class = 500;
  std::size_t test_per_class = 100;
  double separation = 4.0;
};

struct ExperimentConfig {
  AlgorithmSpec algorithm;
  ExperimentPlan plan;
  FederationOptions federation;
  DatasetConfig dataset;
  NetworkSpec net;
  std::size_t hyper_hidden = 0;  // 0: choose from C * d
  double imbalance_ratio = 1.0;
  std::size_t meta_per_class = 10;
  std::vector<std::uint64_t> seeds{0};
  std::filesystem::path output_dir = "runs/out";

  void validate() const;
  // Every key with its resolved value, re-parseable by parse_config_text.
  std::string to_toml() const;
};

// Every accepted dotted key, in resolved-file order.
const std::vector<std::string>& config_keys();

// Applies defaults, then values; unknown keys, type mismatches and
// constraint violations raise ConfigurationError naming the key.
ExperimentConfig resolve_config(const RawConfig& values);

}  // namespace fedrod
