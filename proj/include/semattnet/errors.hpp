#pragma once

#include <stdexcept>
#include <string>

namespace semattnet {

// Base for every error the library raises. `category()` maps onto the CLI's
// exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual const char* category() const noexcept { return "error"; }
  virtual int exit_code() const noexcept { return 1; }
};

// Tensor shapes that do not line up (channel counts, spatial sizes, lists).
class DimensionError : public Error {
 public:
  using Error::Error;
  const char* category() const noexcept override { return "dimension"; }
  int exit_code() const noexcept override { return 6; }
};

// Geometric preconditions such as "H divisible by 32" or crop sizes.
class ShapeError : public Error {
 public:
  using Error::Error;
  const char* category() const noexcept override { return "shape"; }
  int exit_code() const noexcept override { return 6; }
};

// Non-finite values, out-of-range arguments, unnormalized affinities.
class ValidationError : public Error {
 public:
  using Error::Error;
  const char* category() const noexcept override { return "validation"; }
  int exit_code() const noexcept override { return 7; }
};

// A loss or metric was requested over a mask with no valid pixels.
class EmptyMaskError : public ValidationError {
 public:
  using ValidationError::ValidationError;
  const char* category() const noexcept override { return "empty-mask"; }
};

// Wrong file encoding (bit depth, channel count, corrupt container).
class FormatError : public Error {
 public:
  using Error::Error;
  const char* category() const noexcept override { return "format"; }
  int exit_code() const noexcept override { return 3; }
};

// Missing files or incomplete dataset layouts.
class DataError : public Error {
 public:
  using Error::Error;
  const char* category() const noexcept override { return "data"; }
  int exit_code() const noexcept override { return 3; }
};

class ConfigError : public Error {
 public:
  using Error::Error;
  const char* category() const noexcept override { return "config"; }
  int exit_code() const noexcept override { return 2; }
};

// Checkpoint/config incompatibility.
class VersionError : public Error {
 public:
  using Error::Error;
  const char* category() const noexcept override { return "version"; }
  int exit_code() const noexcept override { return 4; }
};

// Training diverged (NaN/inf loss).
class NumericalError : public Error {
 public:
  using Error::Error;
  const char* category() const noexcept override { return "numerical"; }
  int exit_code() const noexcept override { return 5; }
};

}  // namespace semattnet
