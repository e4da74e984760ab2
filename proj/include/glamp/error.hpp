#pragma once

#include <stdexcept>
#include <string>

namespace glamp {

/// Malformed input: bad config, violated preconditions on user data.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid model description (non-SPD covariance, bad dimensions, ...).
class ModelError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A numerical procedure failed to produce a trustworthy result.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NonConvergenceError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

/// Fixed-point iterate ran off (tau growing without bound).
class DivergenceError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

/// kappa_e * delta_e >= 1 (or kappa_1 * gamma_rt >= 1) was hit.
class ContractionViolation : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

}  // namespace glamp
