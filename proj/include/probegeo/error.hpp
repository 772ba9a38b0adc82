#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace probegeo {

// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad user configuration: invalid fractions, synthetic parameters out of range, missing protocol.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Data that violates an invariant or a malformed file.
class DataError : public Error {
 public:
  using Error::Error;
};

class FormatError : public DataError {
 public:
  using DataError::DataError;
};

// Selection produced zero rows.
class EmptySelectionError : public DataError {
 public:
  using DataError::DataError;
};

// Solver failure. Carries the last iterate so callers can inspect it.
class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what, std::vector<double> last_iterate = {})
      : Error(what), last_iterate_(std::move(last_iterate)) {}

  const std::vector<double>& last_iterate() const noexcept { return last_iterate_; }

 private:
  std::vector<double> last_iterate_;
};

// Process exit codes used by the command-line tool.
enum class ExitCode : int { ok = 0, config_error = 2, data_error = 3, numerical_failure = 4 };

}  // namespace probegeo
