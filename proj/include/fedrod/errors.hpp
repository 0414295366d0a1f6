#pragma once

#include <stdexcept>

namespace fedrod {

// Invalid configuration, mismatched dimensions or layouts.
class ConfigurationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite values reached an optimizer or a parameter vector.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class AggregationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Arguments outside a function's mathematical domain (absent class, empty client).
class DomainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed input files (IDX, checkpoints, config).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace fedrod
