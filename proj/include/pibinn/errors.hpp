#pragma once

#include <stdexcept>
#include <string>

namespace pibinn {

/// Base of every error raised by the library. The CLI maps subclasses to
/// process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Configuration or schema violation (exit code 2).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values, divergence, non-convergence (exit code 3).
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Power iteration ran out of iterations; carries the last estimate.
class ConvergenceError : public NumericError {
 public:
  ConvergenceError(const std::string& what, double last_estimate)
      : NumericError(what), last_estimate_(last_estimate) {}
  double last_estimate() const noexcept { return last_estimate_; }

 private:
  double last_estimate_;
};

/// File system and serialization failures (exit code 4).
class IoError : public Error {
 public:
  using Error::Error;
};

class CorruptManifest : public IoError {
 public:
  using IoError::IoError;
};

class TruncatedFile : public IoError {
 public:
  using IoError::IoError;
};

class ShapeMismatch : public IoError {
 public:
  using IoError::IoError;
};

}  // namespace pibinn
