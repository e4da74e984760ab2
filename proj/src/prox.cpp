#include "glamp/prox.hpp"

#include <algorithm>
#include <cmath>

#include "glamp/error.hpp"

namespace glamp {

namespace {

Vec quad_apply(const Mat& q, bool diag, const Vec& b) {
  if (diag) return q.diagonal().cwiseProduct(b);
  return q * b;
}

double coordinate_kkt(double g, double w, double b) {
  if (b > 0.0) return std::abs(g + w);
  if (b < 0.0) return std::abs(g - w);
  return std::max(0.0, std::abs(g) - w);
}

double kkt_from_gradient(const Vec& g, const Vec& w, const Vec& b) {
  double r = 0.0;
  for (Eigen::Index j = 0; j < b.size(); ++j) r = std::max(r, coordinate_kkt(g[j], w[j], b[j]));
  return r;
}

std::vector<int> support_of(const Vec& b) {
  std::vector<int> s;
  for (Eigen::Index j = 0; j < b.size(); ++j)
    if (b[j] != 0.0) s.push_back(static_cast<int>(j));
  return s;
}

double objective_from_gradient(const Vec& g, const Vec& c, const Vec& w, const Vec& b) {
  // with g = Qb - c:  1/2 b'Qb - c'b = 1/2 b'(g + c) - c'b
  return 0.5 * b.dot(g) - 0.5 * c.dot(b) + w.cwiseProduct(b.cwiseAbs()).sum();
}

}  // namespace

double quadratic_l1_kkt(const Mat& q, bool q_diagonal, const Vec& c, const Vec& w,
                        const Vec& b) {
  return kkt_from_gradient(quad_apply(q, q_diagonal, b) - c, w, b);
}

double quadratic_l1_objective(const Mat& q, bool q_diagonal, const Vec& c, const Vec& w,
                              const Vec& b) {
  return objective_from_gradient(quad_apply(q, q_diagonal, b) - c, c, w, b);
}

ProxResult solve_quadratic_l1(const Mat& q, bool q_diagonal, const Vec& c, const Vec& w,
                              const ProxOptions& opts, const Vec* warm_start) {
  const Eigen::Index p = c.size();
  if (q.rows() != p || q.cols() != p || w.size() != p)
    throw ModelError("quadratic-l1 problem has inconsistent dimensions");
  ProxResult res;

  if (q_diagonal) {
    res.b.resize(p);
    for (Eigen::Index j = 0; j < p; ++j) {
      const double qjj = q(j, j);
      if (!(qjj > 0.0)) throw ModelError("quadratic diagonal must be positive");
      res.b[j] = soft_threshold(c[j], w[j]) / qjj;
    }
    const Vec g = q.diagonal().cwiseProduct(res.b) - c;
    res.kkt_residual = kkt_from_gradient(g, w, res.b);
    res.iterations = 1;
    res.converged = res.kkt_residual <= opts.tol;
    if (opts.track_objective) res.objective_trace.push_back(objective_from_gradient(g, c, w, res.b));
    res.support = support_of(res.b);
    return res;
  }

  const int max_sweeps =
      opts.max_sweeps > 0 ? opts.max_sweeps : std::max(10000, static_cast<int>(10 * p));
  Vec b = warm_start && warm_start->size() == p ? *warm_start : Vec::Zero(p);
  Vec g = q * b - c;
  const Vec qdiag = q.diagonal();
  if (!(qdiag.minCoeff() > 0.0)) throw ModelError("quadratic diagonal must be positive");
  if (opts.track_objective) res.objective_trace.push_back(objective_from_gradient(g, c, w, b));

  // Alternate full sweeps with sweeps restricted to the current support;
  // the support sweeps do most of the work once the sign pattern settles.
  auto sweep = [&](bool active_only) {
    double max_change = 0.0;
    for (Eigen::Index k = 0; k < p; ++k) {
      const Eigen::Index j = opts.reverse_order ? p - 1 - k : k;
      if (active_only && b[j] == 0.0) continue;
      const double old = b[j];
      const double next = soft_threshold(qdiag[j] * old - g[j], w[j]) / qdiag[j];
      const double delta = next - old;
      if (delta != 0.0) {
        b[j] = next;
        g.noalias() += delta * q.col(j);
        max_change = std::max(max_change, std::abs(delta) * std::sqrt(qdiag[j]));
      }
    }
    return max_change;
  };

  int sweeps = 0;
  bool converged = false;
  while (sweeps < max_sweeps) {
    sweep(false);
    ++sweeps;
    if (opts.track_objective) res.objective_trace.push_back(objective_from_gradient(g, c, w, b));
    for (int inner = 0; inner < std::max(100, 10 * static_cast<int>(p)) && sweeps < max_sweeps; ++inner) {
      if (kkt_from_gradient(g, w, b) <= 0.25 * opts.tol) break;
      const double change = sweep(true);
      ++sweeps;
      if (opts.track_objective) res.objective_trace.push_back(objective_from_gradient(g, c, w, b));
      if (change <= 0.1 * opts.tol) break;
    }
    if (kkt_from_gradient(g, w, b) <= 0.5 * opts.tol) {
      g = q * b - c;  // drop accumulated rounding before the final verdict
      if (kkt_from_gradient(g, w, b) <= opts.tol) {
        converged = true;
        break;
      }
    }
  }
  g = q * b - c;
  res.b = std::move(b);
  res.kkt_residual = kkt_from_gradient(g, w, res.b);
  res.converged = converged || res.kkt_residual <= opts.tol;
  res.iterations = sweeps;
  res.support = support_of(res.b);
  return res;
}

// ---------------------------------------------------------------------------

StackDenoiser::StackDenoiser(std::span<const EnvironmentModel> models, const Vec& varpi,
                             double theta, const Vec& lambda) {
  if (models.empty()) throw ModelError("denoiser needs at least one environment");
  if (static_cast<std::size_t>(varpi.size()) != models.size())
    throw ModelError("varpi length must equal the number of environments");
  if (!(theta > 0.0)) throw ModelError("theta must be positive");
  p_ = models.front().p;
  if (lambda.size() != p_) throw ModelError("lambda must have length p");
  q_ = Mat::Zero(p_, p_);
  c0_ = Vec::Zero(p_);
  varpi_.assign(varpi.data(), varpi.data() + varpi.size());
  for (std::size_t e = 0; e < models.size(); ++e) {
    if (varpi[e] < 0.0) throw ModelError("varpi entries must be non-negative");
    if (varpi[e] > 0.0) add_term(e, varpi[e], models[e].cov, models[e].beta);
  }
  if (active_.empty()) throw ModelError("all environment weights are zero");
  w_ = theta * lambda;
}

StackDenoiser::StackDenoiser(const MultiEnvProxProblem& problem) {
  if (problem.terms.empty()) throw ModelError("denoiser needs at least one environment");
  if (!(problem.theta > 0.0)) throw ModelError("theta must be positive");
  p_ = static_cast<int>(problem.lambda.size());
  q_ = Mat::Zero(p_, p_);
  c0_ = Vec::Zero(p_);
  for (std::size_t e = 0; e < problem.terms.size(); ++e) {
    const auto& t = problem.terms[e];
    varpi_.push_back(t.varpi);
    if (t.varpi < 0.0) throw ModelError("varpi entries must be non-negative");
    if (t.varpi > 0.0) add_term(e, t.varpi, t.cov, t.beta);
  }
  if (active_.empty()) throw ModelError("all environment weights are zero");
  w_ = problem.theta * problem.lambda;
}

void StackDenoiser::add_term(std::size_t index, double varpi, const Covariance& cov,
                             const Vec& beta) {
  if (cov.sigma.rows() != p_ || beta.size() != p_)
    throw ModelError("environment dimensions do not match lambda");
  active_.push_back(index);
  q_ += varpi * cov.sigma;
  c0_ += varpi * cov.apply(beta);
  diagonal_ = diagonal_ && cov.diagonal;
  weighted_sqrt_.push_back(varpi * cov.sqrt);
  sqrt_diagonal_.push_back(cov.diagonal);
}

Vec StackDenoiser::linear_term(std::span<const Vec> v) const {
  if (v.size() != varpi_.size()) throw ModelError("need one v vector per environment");
  Vec c = c0_;
  for (std::size_t k = 0; k < active_.size(); ++k) {
    const Vec& ve = v[active_[k]];
    if (sqrt_diagonal_[k])
      c += weighted_sqrt_[k].diagonal().cwiseProduct(ve);
    else
      c.noalias() += weighted_sqrt_[k] * ve;
  }
  return c;
}

ProxResult StackDenoiser::operator()(std::span<const Vec> v, const ProxOptions& opts,
                                     const Vec* warm_start) const {
  return solve_quadratic_l1(q_, diagonal_, linear_term(v), w_, opts, warm_start);
}

ProxResult eta_multi(const MultiEnvProxProblem& problem, const ProxOptions& opts) {
  double total = 0.0;
  for (const auto& t : problem.terms) total += t.varpi;
  if (std::abs(total - 1.0) > 1e-12) throw ModelError("varpi must sum to one");
  StackDenoiser d(problem);
  std::vector<Vec> v;
  for (const auto& t : problem.terms) v.push_back(t.v);
  return d(v, opts);
}

ProxResult eta_single(const Vec& v, double theta, const Vec& lambda, const Covariance& cov,
                      const Vec& beta, const ProxOptions& opts) {
  MultiEnvProxProblem prob;
  prob.terms.push_back({1.0, cov, beta, v});
  prob.theta = theta;
  prob.lambda = lambda;
  return eta_multi(prob, opts);
}

double kkt_residual(const Vec& b, const MultiEnvProxProblem& problem) {
  StackDenoiser d(problem);
  std::vector<Vec> v;
  for (const auto& t : problem.terms) v.push_back(t.v);
  return quadratic_l1_kkt(d.quadratic(), d.diagonal(), d.linear_term(v), d.weights(), b);
}

// ---------------------------------------------------------------------------

AdaptiveWeight AdaptiveWeight::table(std::vector<double> x, std::vector<double> mu) {
  if (x.size() != mu.size() || x.size() < 1)
    throw ModelError("adaptive weight table needs matching non-empty x and mu arrays");
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(mu[i] > 0.0)) throw ModelError("adaptive weight values must be positive");
    if (i > 0 && !(x[i] > x[i - 1])) throw ModelError("adaptive weight grid must increase");
    if (i > 0 && mu[i] > mu[i - 1]) throw ModelError("adaptive weight must be non-increasing");
  }
  if (x.front() < 0.0) throw ModelError("adaptive weight grid must start at x >= 0");
  AdaptiveWeight a;
  a.x_ = std::move(x);
  a.mu_ = std::move(mu);
  return a;
}

double AdaptiveWeight::operator()(double x) const {
  x = std::abs(x);
  if (x_.empty()) return 5.0 + 10.0 / (0.05 + x * x);
  if (x <= x_.front()) return mu_.front();
  if (x >= x_.back()) return mu_.back();
  const auto it = std::upper_bound(x_.begin(), x_.end(), x);
  const std::size_t i = static_cast<std::size_t>(it - x_.begin());
  const double t = (x - x_[i - 1]) / (x_[i] - x_[i - 1]);
  return mu_[i - 1] + t * (mu_[i] - mu_[i - 1]);
}

double AdaptiveWeight::derivative(double x) const {
  x = std::abs(x);
  if (x_.empty()) {
    const double d = 0.05 + x * x;
    return -20.0 * x / (d * d);
  }
  if (x <= x_.front() || x >= x_.back()) return 0.0;
  const auto it = std::upper_bound(x_.begin(), x_.end(), x);
  const std::size_t i = static_cast<std::size_t>(it - x_.begin());
  return (mu_[i] - mu_[i - 1]) / (x_[i] - x_[i - 1]);
}

SecondStepDenoiser::SecondStepDenoiser(const Covariance& cov1, const Vec& beta1,
                                       double kappa1, double gamma_ro, double theta_rt,
                                       SecondStepPenalty penalty)
    : cov_(cov1),
      beta1_(beta1),
      kappa1_(kappa1),
      gamma_ro_(gamma_ro),
      theta_rt_(theta_rt),
      penalty_(std::move(penalty)) {
  if (!(theta_rt > 0.0)) throw ModelError("theta_rt must be positive");
  if (penalty_.kind == SecondStepPenalty::Kind::joint && !(penalty_.lambda_rt > 0.0))
    throw ModelError("lambda_rt must be positive");
}

Vec SecondStepDenoiser::centre(const Vec& v_rt, const Vec& beta_hat) const {
  return v_rt + cov_.apply_sqrt(beta1_ - kappa1_ * gamma_ro_ * (beta1_ - beta_hat));
}

Vec SecondStepDenoiser::weights(const Vec& beta_hat) const {
  const Eigen::Index p = beta_hat.size();
  if (penalty_.kind == SecondStepPenalty::Kind::joint)
    return Vec::Constant(p, theta_rt_ * penalty_.lambda_rt);
  Vec w(p);
  for (Eigen::Index j = 0; j < p; ++j) w[j] = theta_rt_ * penalty_.mu(beta_hat[j]);
  return w;
}

ProxResult SecondStepDenoiser::operator()(const Vec& v_rt, const Vec& beta_hat,
                                          const ProxOptions& opts,
                                          const Vec* warm_start) const {
  // 1/2 ||S b - m||^2 = 1/2 b' Sigma b - (S m)' b + const
  const Vec c = cov_.apply_sqrt(centre(v_rt, beta_hat));
  const Vec w = weights(beta_hat);
  if (penalty_.kind == SecondStepPenalty::Kind::adaptive)
    return solve_quadratic_l1(cov_.sigma, cov_.diagonal, c, w, opts, warm_start);
  // joint: substitute d = b - beta_hat
  const Vec c_shift = c - cov_.apply(beta_hat);
  Vec warm_d;
  if (warm_start && warm_start->size() == beta_hat.size()) warm_d = *warm_start - beta_hat;
  ProxResult r = solve_quadratic_l1(cov_.sigma, cov_.diagonal, c_shift, w, opts,
                                    warm_d.size() ? &warm_d : nullptr);
  // support stays relative to beta_hat
  r.b += beta_hat;
  return r;
}

ProxResult xi_second_step(const SecondStepProxProblem& problem, const ProxOptions& opts) {
  SecondStepDenoiser d(problem.cov1, problem.beta1, problem.kappa1, problem.gamma_ro,
                       problem.theta_rt, problem.penalty);
  return d(problem.v_rt, problem.beta_hat, opts);
}

double kkt_residual(const Vec& b, const SecondStepProxProblem& problem) {
  SecondStepDenoiser d(problem.cov1, problem.beta1, problem.kappa1, problem.gamma_ro,
                       problem.theta_rt, problem.penalty);
  const Vec c = problem.cov1.apply_sqrt(d.centre(problem.v_rt, problem.beta_hat));
  const Vec w = d.weights(problem.beta_hat);
  if (problem.penalty.kind == SecondStepPenalty::Kind::adaptive)
    return quadratic_l1_kkt(problem.cov1.sigma, problem.cov1.diagonal, c, w, b);
  const Vec shifted = b - problem.beta_hat;
  return quadratic_l1_kkt(problem.cov1.sigma, problem.cov1.diagonal,
                          c - problem.cov1.apply(problem.beta_hat), w, shifted);
}

}  // namespace glamp
