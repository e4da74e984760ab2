#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "glamp/model.hpp"
#include "glamp/prox.hpp"

namespace glamp {

struct MCSettings {
  int draws = 400;  // R_mc
  std::uint64_t seed = 0;
  bool common_random_numbers = true;
  int threads = 1;
  ProxOptions prox{};
};

/// Pre-generated standard Gaussian draws: `draws` matrices of size p x columns.
class GaussianBank {
 public:
  GaussianBank(int p, int columns, int draws, std::uint64_t seed, std::string_view tag,
               std::uint64_t round = 0);
  const Mat& draw(int r) const { return draws_[static_cast<std::size_t>(r)]; }
  int draws() const { return static_cast<int>(draws_.size()); }
  int columns() const { return columns_; }
  int p() const { return p_; }

 private:
  int p_;
  int columns_;
  std::vector<Mat> draws_;
};

/// Sample mean and standard error of the mean.
struct MeanSE {
  double mean = 0.0;
  double se = 0.0;
};
MeanSE mean_se(std::span<const double> x);

struct StackParameters {
  Vec tau;
  Vec varpi;
  double theta = 1.0;
};

/// Monte-Carlo moments of eta_bar = eta(tau_1 Z_1, ..., tau_E Z_E).
struct StackMoments {
  std::vector<MeanSE> mse_sigma;    // (1/p) E||eta_bar - beta_e||^2_{Sigma_e}
  std::vector<MeanSE> inner_sigma;  // (1/p) E<beta_e, eta_bar>_{Sigma_e}
  std::vector<MeanSE> delta;        // support-trace form of delta_bar_e
  MeanSE sparsity;                  // E||eta_bar||_0 / p
  double identity_gap = 0.0;        // max_r |sum_e delta_e^r - |S_r|/p|
  int draws = 0;
};

/// Per-draw outputs kept when a caller needs them (second step, oracles).
struct EtaBarDraws {
  std::vector<Vec> eta;
  std::vector<std::vector<int>> support;
};

StackMoments estimate_eta_bar_moments(const StackParameters& params,
                                      std::span<const EnvironmentModel> models,
                                      const Vec& lambda, const GaussianBank& bank,
                                      const MCSettings& mc, EtaBarDraws* keep = nullptr,
                                      std::vector<Vec>* warm = nullptr);

/// Definitional (Stein) estimator (1/(tau_e p)) E[Z_e' Sigma_e^{1/2} eta_bar]
/// on the same draws; a diagnostic cross-check of the trace form.
std::vector<MeanSE> stein_delta_bar(const StackParameters& params,
                                    std::span<const EnvironmentModel> models,
                                    const Vec& lambda, const GaussianBank& bank,
                                    const MCSettings& mc);

struct FixedPointOptions {
  double damping = 0.5;
  double tol = 1e-3;
  int max_outer = 200;
  std::string tag = "eta-bar";  // Gaussian bank tag
  std::uint64_t tag_index = 0;
  bool has_init = false;
  StackParameters init;
};

struct StackFixedPoint {
  Vec tau;
  Vec varpi;
  double theta = 1.0;
  Vec lambda;
  Vec delta_bar;
  Vec delta_bar_se;
  /// 2E+1 equation residuals: tau_e (relative, on tau_e^2), varpi_e, theta.
  std::vector<double> residuals;
  std::vector<double> residual_se;
  double residual = 0.0;
  StackMoments moments;
  StackParameters initial;
  int iterations = 0;
  bool converged = false;
  FixedPointOptions options;
  MCSettings mc;

  StackParameters parameters() const { return {tau, varpi, theta}; }
};

struct IndividualFixedPoint {
  double tau_ind = 0.0;
  double theta_ind = 1.0;
  double delta_ind = 0.0;
  double delta_ind_se = 0.0;
  double residual = 0.0;
  std::vector<double> residuals;
  std::vector<double> residual_se;
  bool converged = false;
  int iterations = 0;
  std::size_t env_index = 0;
  /// The same solution expressed as a one-environment stack fixed point
  /// (weight one), which is what the AMP and risk modules consume.
  StackFixedPoint as_stack;
};

/// Initial point used when none is supplied: the lambda -> infinity values.
StackParameters default_stack_init(std::span<const EnvironmentModel> models);

/// Evaluates the 2E+1 equations at `params` on `bank`.
StackFixedPoint evaluate_stack_equations(const StackParameters& params,
                                         std::span<const EnvironmentModel> models,
                                         const Vec& lambda, const GaussianBank& bank,
                                         const MCSettings& mc,
                                         std::vector<Vec>* warm = nullptr);

StackFixedPoint solve_stack_fixed_point(std::span<const EnvironmentModel> models,
                                        const Vec& lambda, const MCSettings& mc,
                                        const FixedPointOptions& opts = {});

/// Individual system of environment `env_index` (its own weight replaced by one).
IndividualFixedPoint solve_individual_fixed_point(std::span<const EnvironmentModel> models,
                                                  std::size_t env_index, const MCSettings& mc,
                                                  const FixedPointOptions& opts = {});

// ---------------------------------------------------------------------------
// Second step

struct SecondStepParameters {
  double tau_rt = 1.0;
  double zeta = 1.0;
  double theta_rt = 1.0;
  double gamma_ro = 0.0;
};

/// Gaussian draws for the second step: the stack bank (Z_1..Z_E) plus Z_1'.
struct SecondStepBanks {
  GaussianBank z;
  GaussianBank z_prime;
};
SecondStepBanks make_second_step_banks(const StackFixedPoint& stack, int p, int environments,
                                       const MCSettings& mc, std::string_view tag,
                                       std::uint64_t round = 0);

struct GammaBars {
  MeanSE gamma_ro;  // gamma_bar_ro evaluated at the supplied gamma_ro
  MeanSE gamma_rt;
  MeanSE delta1;    // trace-form delta_bar_1 on the same draws
  MeanSE eq_tau;    // (1/p) E||D||^2_{Sigma_1}
  MeanSE eq_zeta;   // (1/p) E<beta_1 - eta_bar, D>_{Sigma_1}
  MeanSE support_fraction;  // E|supp(xi_bar)|/p
  int draws = 0;
};

GammaBars estimate_gamma_bars(const StackFixedPoint& stack,
                              std::span<const EnvironmentModel> models,
                              const SecondStepParameters& params,
                              const SecondStepPenalty& penalty, const SecondStepBanks& banks,
                              const MCSettings& mc, const EtaBarDraws* eta = nullptr);

struct SecondStepFixedPoint {
  double tau_rt = 0.0;
  double zeta = 1.0;
  double theta_rt = 1.0;
  double gamma_ro = 0.0;       // self-consistent gamma_ro
  double gamma_ro_bar = 0.0;   // gamma_bar_ro recomputed at the solution
  double gamma_rt = 0.0;
  double gamma_rt_se = 0.0;
  double gamma_ro_se = 0.0;
  /// Residuals of: tau_rt equation, zeta equation, theta_rt equation,
  /// gamma_ro self-consistency (all relative).
  std::vector<double> residuals;
  std::vector<double> residual_se;
  double residual = 0.0;
  int zeta_clamped = 0;
  int iterations = 0;
  bool converged = false;
  SecondStepPenalty penalty;
  GammaBars bars;
  SecondStepParameters initial;

  SecondStepParameters parameters() const { return {tau_rt, zeta, theta_rt, gamma_ro}; }
};

/// The lambda_rt -> infinity solution, used as the initial point.
SecondStepParameters default_second_step_init(const StackFixedPoint& stack,
                                              std::span<const EnvironmentModel> models);

SecondStepFixedPoint evaluate_second_step_equations(const StackFixedPoint& stack,
                                                    std::span<const EnvironmentModel> models,
                                                    const SecondStepParameters& params,
                                                    const SecondStepPenalty& penalty,
                                                    const SecondStepBanks& banks,
                                                    const MCSettings& mc,
                                                    const EtaBarDraws* eta = nullptr);

SecondStepFixedPoint solve_second_step_fixed_point(const StackFixedPoint& stack,
                                                   std::span<const EnvironmentModel> models,
                                                   const SecondStepPenalty& penalty,
                                                   const MCSettings& mc,
                                                   const FixedPointOptions& opts = {});

// ---------------------------------------------------------------------------
// H maps and contraction diagnostics

struct HMapEstimate {
  Vec value;
  Vec se;
};

HMapEstimate evaluate_H_map(const Vec& rho, const StackFixedPoint& stack,
                            std::span<const EnvironmentModel> models, const MCSettings& mc);

MeanSE evaluate_H_rt(double rho, const StackFixedPoint& stack,
                     const SecondStepFixedPoint& second,
                     std::span<const EnvironmentModel> models, const MCSettings& mc);

struct ContractionReport {
  Vec kappa_delta_margin;  // 1 - kappa_e delta_e (stack), or 1 - kappa_1 gamma_rt
  double delta_sum = 0.0;
  double delta_sum_se = 0.0;
  double identity_gap = 0.0;
  bool ok = true;
  std::vector<std::string> violations;
};

ContractionReport check_contraction(const StackFixedPoint& fp,
                                    std::span<const EnvironmentModel> models);
ContractionReport check_contraction(const SecondStepFixedPoint& fp,
                                    std::span<const EnvironmentModel> models);

}  // namespace glamp
