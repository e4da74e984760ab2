#pragma once

#include <span>
#include <string_view>

#include "glamp/model.hpp"
#include "glamp/prox.hpp"

namespace glamp {

enum class EstimatorKind { stack, individual, average, second_step_joint, second_step_adaptive };

std::string_view to_string(EstimatorKind kind);

struct EstimateRecord {
  Vec beta_hat;
  double objective = 0.0;
  double kkt_residual = 0.0;
  int iterations = 0;
  bool converged = false;
  EstimatorKind kind = EstimatorKind::stack;
};

/// Minimizes 1/2 sum_e pi_e ||y_e - X_e b||^2 + ||diag(lambda) b||_1.
EstimateRecord solve_stacked_lasso(std::span<const Environment> envs, const Vec& lambda,
                                   const ProxOptions& opts = {},
                                   const Vec* warm_start = nullptr);

/// Same with a single environment and weight one.
EstimateRecord solve_individual_lasso(const Environment& env, const Vec& lambda,
                                      const ProxOptions& opts = {},
                                      const Vec* warm_start = nullptr);

/// sum_e pi_e estimates_e; the weights must sum to one.
Vec model_average(std::span<const Vec> estimates, std::span<const double> pi);

/// Minimizes 1/2 ||y_1 - X_1 b||^2 + mu_rt(b; beta_hat).
EstimateRecord solve_second_step(const Environment& env1, const Vec& beta_hat_first,
                                 const SecondStepPenalty& penalty,
                                 const ProxOptions& opts = {},
                                 const Vec* warm_start = nullptr);

/// Objective of the stacked problem at b (exposed for tests and diagnostics).
double stacked_objective(std::span<const Environment> envs, const Vec& lambda, const Vec& b);
double second_step_objective(const Environment& env1, const Vec& beta_hat,
                             const SecondStepPenalty& penalty, const Vec& b);

}  // namespace glamp
