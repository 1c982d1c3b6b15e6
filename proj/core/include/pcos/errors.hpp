#pragma once

#include <stdexcept>
#include <string>

namespace pcos {

/// Base of every error thrown by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad configuration, layout or usage (CLI exit code 2).
class ConfigError : public Error {
 public:
  using Error::Error;
};

class EmptyDatasetError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

class InfeasibleSplitError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

class ParameterError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

class InputError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

class ShapeError : public InputError {
 public:
  using InputError::InputError;
};

class InvalidImageError : public InputError {
 public:
  using InputError::InputError;
};

class CheckpointError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

class WeightsUnavailableError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

class AttributionError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Raised when a loss becomes NaN or infinite during training.
class TrainingDivergedError : public Error {
 public:
  TrainingDivergedError(int epoch, const std::string& what);
  int epoch() const noexcept { return epoch_; }

 private:
  int epoch_;
};

}  // namespace pcos
