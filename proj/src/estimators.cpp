#include "glamp/estimators.hpp"

#include <cmath>

#include "glamp/error.hpp"

namespace glamp {

std::string_view to_string(EstimatorKind kind) {
  switch (kind) {
    case EstimatorKind::stack: return "stack";
    case EstimatorKind::individual: return "individual";
    case EstimatorKind::average: return "average";
    case EstimatorKind::second_step_joint: return "second-step-joint";
    case EstimatorKind::second_step_adaptive: return "second-step-adaptive";
  }
  return "unknown";
}

namespace {

void check_lambda(const Vec& lambda, Eigen::Index p) {
  if (lambda.size() != p) throw ModelError("lambda must have length p");
  if (!(lambda.minCoeff() > 0.0)) throw ModelError("lambda entries must be positive");
}

EstimateRecord from_prox(ProxResult&& r, EstimatorKind kind) {
  EstimateRecord out;
  out.beta_hat = std::move(r.b);
  out.kkt_residual = r.kkt_residual;
  out.iterations = r.iterations;
  out.converged = r.converged;
  out.kind = kind;
  return out;
}

Vec second_step_weights(const SecondStepPenalty& penalty, const Vec& beta_hat) {
  const Eigen::Index p = beta_hat.size();
  if (penalty.kind == SecondStepPenalty::Kind::joint) return Vec::Constant(p, penalty.lambda_rt);
  Vec w(p);
  for (Eigen::Index j = 0; j < p; ++j) w[j] = penalty.mu(beta_hat[j]);
  return w;
}

}  // namespace

double stacked_objective(std::span<const Environment> envs, const Vec& lambda, const Vec& b) {
  double f = 0.0;
  for (const auto& e : envs) f += 0.5 * e.model.weight * (e.y - e.x_design * b).squaredNorm();
  return f + lambda.cwiseProduct(b.cwiseAbs()).sum();
}

double second_step_objective(const Environment& env1, const Vec& beta_hat,
                             const SecondStepPenalty& penalty, const Vec& b) {
  const Vec w = second_step_weights(penalty, beta_hat);
  const double fit = 0.5 * (env1.y - env1.x_design * b).squaredNorm();
  if (penalty.kind == SecondStepPenalty::Kind::joint)
    return fit + w.cwiseProduct((b - beta_hat).cwiseAbs()).sum();
  return fit + w.cwiseProduct(b.cwiseAbs()).sum();
}

EstimateRecord solve_stacked_lasso(std::span<const Environment> envs, const Vec& lambda,
                                   const ProxOptions& opts, const Vec* warm_start) {
  if (envs.empty()) throw ModelError("stacked lasso needs at least one environment");
  const Eigen::Index p = envs.front().x_design.cols();
  check_lambda(lambda, p);
  Mat q = Mat::Zero(p, p);
  Vec c = Vec::Zero(p);
  double total = 0.0;
  for (const auto& e : envs) {
    const double pi = e.model.weight;
    if (pi < 0.0) throw ModelError("environment weights must be non-negative");
    if (pi == 0.0) continue;
    total += pi;
    q.selfadjointView<Eigen::Lower>().rankUpdate(e.x_design.transpose(), pi);
    c.noalias() += pi * (e.x_design.transpose() * e.y);
  }
  if (total == 0.0) throw ModelError("all environment weights are zero");
  q = q.selfadjointView<Eigen::Lower>();
  auto rec = from_prox(solve_quadratic_l1(q, false, c, lambda, opts, warm_start),
                       envs.size() == 1 ? EstimatorKind::individual : EstimatorKind::stack);
  rec.objective = stacked_objective(envs, lambda, rec.beta_hat);
  return rec;
}

EstimateRecord solve_individual_lasso(const Environment& env, const Vec& lambda,
                                      const ProxOptions& opts, const Vec* warm_start) {
  Environment unit = env;
  unit.model.weight = 1.0;
  auto rec = solve_stacked_lasso(std::span<const Environment>(&unit, 1), lambda, opts, warm_start);
  rec.kind = EstimatorKind::individual;
  return rec;
}

Vec model_average(std::span<const Vec> estimates, std::span<const double> pi) {
  if (estimates.empty() || estimates.size() != pi.size())
    throw ModelError("model average needs one weight per estimate");
  double total = 0.0;
  for (double w : pi) total += w;
  if (std::abs(total - 1.0) > 1e-12) throw ModelError("model-average weights must sum to one");
  Vec out = Vec::Zero(estimates.front().size());
  for (std::size_t e = 0; e < estimates.size(); ++e) {
    if (estimates[e].size() != out.size()) throw ModelError("estimates must share dimension");
    out += pi[e] * estimates[e];
  }
  return out;
}

EstimateRecord solve_second_step(const Environment& env1, const Vec& beta_hat_first,
                                 const SecondStepPenalty& penalty, const ProxOptions& opts,
                                 const Vec* warm_start) {
  const Eigen::Index p = env1.x_design.cols();
  if (beta_hat_first.size() != p) throw ModelError("first-step estimate must have length p");
  Mat q = Mat::Zero(p, p);
  q.selfadjointView<Eigen::Lower>().rankUpdate(env1.x_design.transpose(), 1.0);
  q = q.selfadjointView<Eigen::Lower>();
  const Vec c = env1.x_design.transpose() * env1.y;
  const Vec w = second_step_weights(penalty, beta_hat_first);
  const auto kind = penalty.kind == SecondStepPenalty::Kind::joint
                        ? EstimatorKind::second_step_joint
                        : EstimatorKind::second_step_adaptive;
  EstimateRecord rec;
  if (penalty.kind == SecondStepPenalty::Kind::joint) {
    if (!(penalty.lambda_rt >= 0.0)) throw ModelError("lambda_rt must be non-negative");
    Vec warm_d;
    if (warm_start && warm_start->size() == p) warm_d = *warm_start - beta_hat_first;
    rec = from_prox(solve_quadratic_l1(q, false, c - q * beta_hat_first, w, opts,
                                       warm_d.size() ? &warm_d : nullptr),
                    kind);
    rec.beta_hat += beta_hat_first;
  } else {
    rec = from_prox(solve_quadratic_l1(q, false, c, w, opts, warm_start), kind);
  }
  rec.objective = second_step_objective(env1, beta_hat_first, penalty, rec.beta_hat);
  return rec;
}

}  // namespace glamp
