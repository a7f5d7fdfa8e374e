#pragma once

#include <stdexcept>
#include <string>

namespace lgabc {

/// Precondition violated by the caller (bad dimension, bad index, bad value).
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A factorization or numerical routine broke down.
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& what, long pivot = -1)
      : std::runtime_error(what), pivot_(pivot) {}

  /// Index of the offending pivot for factorization failures, -1 otherwise.
  long pivot() const noexcept { return pivot_; }

 private:
  long pivot_;
};

/// The particle population collapsed (no particle carries weight).
class DegeneracyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent experiment configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace lgabc
