#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace dslens {

// Root of every error thrown by the library. The CLI maps subclasses onto
// exit codes via exit_code().
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const noexcept { return 2; }
};

// Caller-side contract violations. Exit code 1.
class ValidationError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 1; }
};

class DimensionError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class SiteError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class ConfigError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class PlacementError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Runtime / numeric failures. Exit code 2.
class NumericError : public Error {
 public:
  using Error::Error;
};

class DegenerateVectorError : public NumericError {
 public:
  using NumericError::NumericError;
};

class SingularityError : public NumericError {
 public:
  using NumericError::NumericError;
};

class CorrelationError : public NumericError {
 public:
  using NumericError::NumericError;
};

class InterventionError : public Error {
 public:
  using Error::Error;
};

class CacheError : public Error {
 public:
  using Error::Error;
};

class SamplingError : public Error {
 public:
  using Error::Error;
};

class UnsupportedError : public Error {
 public:
  using Error::Error;
};

// File-level failures. Exit code 3.
class IoError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 3; }
};

class FormatError : public IoError {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : IoError(what + " (byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

}  // namespace dslens
