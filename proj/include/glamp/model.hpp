#pragma once

#include <cstdint>
#include <numbers>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace glamp {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Default bound c1: every covariance eigenvalue must lie in [1/c1, c1].
inline constexpr double kDefaultEigenBound = 1e4;

struct CovarianceSpec {
  enum class Kind { identity, two_eigenvalue, dense };
  Kind kind = Kind::identity;
  double chi = 1.0;  // two_eigenvalue only
  Mat matrix;        // dense only
};

struct SignalSpec {
  enum class Kind { iid_gaussian, shifted, fixed };
  Kind kind = Kind::iid_gaussian;
  /// iid_gaussian: per-coordinate variance.  shifted: the shift variance
  /// sigma_tilde^2; the perturbation has per-coordinate variance
  /// variance * shift_scale / 2.  With the default scale pi this makes
  /// E|shift_j| = sigma_tilde.
  double variance = 1.0;
  int base = 0;  // shifted only: index of the base environment
  double shift_scale = std::numbers::pi;
  Vec values;                   // fixed only
};

struct EnvironmentSpec {
  int n = 0;
  CovarianceSpec covariance;
  SignalSpec signal;
  double noise_variance = 1.0;
  double weight = 0.5;  // pi_e
  double lambda = 1.0;  // used when lambda_values is empty
  Vec lambda_values;
};

/// A covariance together with its symmetric square root.
struct Covariance {
  Mat sigma;
  Mat sqrt;
  bool diagonal = false;

  Vec apply(const Vec& v) const;       // Sigma v
  Vec apply_sqrt(const Vec& v) const;  // Sigma^{1/2} v
};

/// Design-independent part of an environment: everything the state
/// evolution needs.  The signal is realized once and held fixed.
struct EnvironmentModel {
  int n = 0;
  int p = 0;
  double kappa = 0.0;
  Covariance cov;
  Vec beta;
  double noise_variance = 1.0;
  double weight = 0.5;
  Vec lambda;

  double sigma_norm2(const Vec& v) const;  // (1/p) v' Sigma v
  double sigma_inner(const Vec& a, const Vec& b) const;  // (1/p) a' Sigma b
};

/// One realized environment.
struct Environment {
  EnvironmentModel model;
  Mat z_design;  // n x p, iid N(0, 1/n)
  Mat x_design;  // z_design * Sigma^{1/2}
  Vec w;
  Vec y;
};

Mat covariance_sqrt(const Mat& sigma);
Covariance make_covariance(const CovarianceSpec& spec, int p,
                           double eigen_bound = kDefaultEigenBound);

/// Realizes the signals of all environments from the master seed.  A
/// shifted signal must refer to an environment with a smaller index.
std::vector<Vec> draw_signals(std::span<const EnvironmentSpec> specs, int p,
                              std::uint64_t seed);

std::vector<EnvironmentModel> build_models(std::span<const EnvironmentSpec> specs,
                                           int p, std::uint64_t seed);

/// Draws the design and the noise of one environment for one replicate.
Environment generate_environment(const EnvironmentModel& model,
                                 std::uint64_t seed, std::uint64_t replicate,
                                 std::size_t env_index);

std::vector<Environment> generate_environments(
    std::span<const EnvironmentModel> models, std::uint64_t seed,
    std::uint64_t replicate);

}  // namespace glamp
