#pragma once

#include <span>
#include <vector>

#include "glamp/model.hpp"

namespace glamp {

struct ProxOptions {
  double tol = 1e-8;         // KKT residual target (max norm)
  int max_sweeps = 0;        // 0 means max(10000, 10 p)
  bool reverse_order = false;
  bool track_objective = false;
};

struct ProxResult {
  Vec b;
  std::vector<int> support;
  double kkt_residual = 0.0;
  int iterations = 0;
  bool converged = false;
  std::vector<double> objective_trace;  // one entry per sweep when tracked
};

// ---------------------------------------------------------------------------
// Solver core:  minimize  1/2 b'Qb - c'b + sum_j w_j |b_j|.
// Every denoiser and every data-level estimator reduces to this form.

ProxResult solve_quadratic_l1(const Mat& q, bool q_diagonal, const Vec& c,
                              const Vec& w, const ProxOptions& opts,
                              const Vec* warm_start = nullptr);

/// Max over coordinates of the distance from -(Qb - c) to w .* subdiff|b|.
double quadratic_l1_kkt(const Mat& q, bool q_diagonal, const Vec& c,
                        const Vec& w, const Vec& b);
double quadratic_l1_objective(const Mat& q, bool q_diagonal, const Vec& c,
                              const Vec& w, const Vec& b);

inline double soft_threshold(double x, double t) {
  if (x > t) return x - t;
  if (x < -t) return x + t;
  return 0.0;
}

// ---------------------------------------------------------------------------
// Multi-environment denoiser eta.

struct ProxTerm {
  double varpi = 0.0;
  Covariance cov;
  Vec beta;
  Vec v;
};

struct MultiEnvProxProblem {
  std::vector<ProxTerm> terms;
  double theta = 1.0;
  Vec lambda;
};

/// eta(v_1..v_E) for fixed (varpi, theta, lambda).  The quadratic part is
/// assembled once, so repeated evaluation over Monte-Carlo draws only pays
/// for the linear term and the solve.  Environments with varpi = 0 drop out.
class StackDenoiser {
 public:
  StackDenoiser(std::span<const EnvironmentModel> models, const Vec& varpi,
                double theta, const Vec& lambda);
  explicit StackDenoiser(const MultiEnvProxProblem& problem);

  ProxResult operator()(std::span<const Vec> v, const ProxOptions& opts = {},
                        const Vec* warm_start = nullptr) const;

  /// c(v) = sum_e varpi_e (Sigma_e^{1/2} v_e + Sigma_e beta_e)
  Vec linear_term(std::span<const Vec> v) const;
  const Mat& quadratic() const { return q_; }
  bool diagonal() const { return diagonal_; }
  const Vec& weights() const { return w_; }
  std::size_t environments() const { return varpi_.size(); }

 private:
  void add_term(std::size_t index, double varpi, const Covariance& cov, const Vec& beta);

  int p_ = 0;
  Mat q_;
  bool diagonal_ = true;
  Vec c0_;
  Vec w_;
  std::vector<double> varpi_;              // all environments, zeros included
  std::vector<std::size_t> active_;        // indices with varpi > 0
  std::vector<Mat> weighted_sqrt_;         // varpi_e Sigma_e^{1/2}, per active env
  std::vector<bool> sqrt_diagonal_;
};

ProxResult eta_multi(const MultiEnvProxProblem& problem, const ProxOptions& opts = {});
ProxResult eta_single(const Vec& v, double theta, const Vec& lambda,
                      const Covariance& cov, const Vec& beta,
                      const ProxOptions& opts = {});
double kkt_residual(const Vec& b, const MultiEnvProxProblem& problem);

// ---------------------------------------------------------------------------
// Second-step denoiser xi.

/// Decreasing positive weight function mu for the adaptive penalty.  Either
/// the built-in 5 + 10/(0.05 + x^2) or a piecewise-linear table in |x|
/// with constant extrapolation.
class AdaptiveWeight {
 public:
  AdaptiveWeight() = default;
  static AdaptiveWeight table(std::vector<double> x, std::vector<double> mu);

  double operator()(double x) const;
  double derivative(double x) const;  // d mu / dx at x >= 0
  bool is_default() const { return x_.empty(); }
  const std::vector<double>& grid() const { return x_; }
  const std::vector<double>& values() const { return mu_; }

 private:
  std::vector<double> x_;
  std::vector<double> mu_;
};

struct SecondStepPenalty {
  enum class Kind { joint, adaptive };
  Kind kind = Kind::joint;
  double lambda_rt = 0.5;
  AdaptiveWeight mu;

  static SecondStepPenalty joint(double lambda_rt) {
    return {Kind::joint, lambda_rt, AdaptiveWeight{}};
  }
  static SecondStepPenalty adaptive(AdaptiveWeight mu = {}) {
    return {Kind::adaptive, 0.0, std::move(mu)};
  }
};

struct SecondStepProxProblem {
  Vec v_rt;
  Vec beta_hat;
  Vec beta1;
  Covariance cov1;
  double gamma_ro = 0.0;
  double kappa1 = 0.0;
  double theta_rt = 1.0;
  SecondStepPenalty penalty;
};

/// xi(v_rt, beta_hat) for fixed (gamma_ro, theta_rt).  For the joint penalty
/// the reported support is {j : b_j != beta_hat_j}.
class SecondStepDenoiser {
 public:
  SecondStepDenoiser(const Covariance& cov1, const Vec& beta1, double kappa1,
                     double gamma_ro, double theta_rt, SecondStepPenalty penalty);

  ProxResult operator()(const Vec& v_rt, const Vec& beta_hat,
                        const ProxOptions& opts = {},
                        const Vec* warm_start = nullptr) const;

  /// The centring vector m = v + S beta1 - kappa1 gamma_ro S (beta1 - beta_hat).
  Vec centre(const Vec& v_rt, const Vec& beta_hat) const;
  /// Per-coordinate l1 weights theta_rt * (lambda_rt or mu(|beta_hat_j|)).
  Vec weights(const Vec& beta_hat) const;
  const Covariance& covariance() const { return cov_; }
  const SecondStepPenalty& penalty() const { return penalty_; }
  double theta_rt() const { return theta_rt_; }

 private:
  Covariance cov_;
  Vec beta1_;
  double kappa1_;
  double gamma_ro_;
  double theta_rt_;
  SecondStepPenalty penalty_;
};

ProxResult xi_second_step(const SecondStepProxProblem& problem, const ProxOptions& opts = {});
double kkt_residual(const Vec& b, const SecondStepProxProblem& problem);

}  // namespace glamp
