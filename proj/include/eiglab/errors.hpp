#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace eiglab {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad user configuration; maps to CLI exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class InvalidDesignError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

/// Operation not supported by the model (e.g. enumeration on a continuous model).
class CapabilityError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

/// Outcome outside the model's outcome space.
class InvalidOutcomeError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

class UnknownModelError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Numerical failure (non-finite values, domain violations); CLI exit code 3.
class NumericError : public Error {
 public:
  using Error::Error;
};

class DomainError : public NumericError {
 public:
  using NumericError::NumericError;
};

class TrainingError : public NumericError {
 public:
  TrainingError(std::size_t step, const std::string& what)
      : NumericError("step " + std::to_string(step) + ": " + what), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

class DegenerateBeliefError : public NumericError {
 public:
  using NumericError::NumericError;
};

class ImpossibleOutcomeError : public NumericError {
 public:
  using NumericError::NumericError;
};

class PolicyError : public NumericError {
 public:
  using NumericError::NumericError;
};

}  // namespace eiglab
