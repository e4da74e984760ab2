#include <cmath>
#include <string>

#include "glamp/error.hpp"
#include "glamp/glamp.hpp"

namespace glamp {

namespace {

double sample_corr(const Vec& a, const Vec& b) {
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) return std::nan("");
  return a.dot(b) / (na * nb);
}

Vec z_times_sqrt(const Environment& env, const Vec& b) {
  return env.z_design * env.model.cov.apply_sqrt(b);
}

}  // namespace

SubgradientReport subgradient_residual(std::span<const Environment> envs,
                                       const StackFixedPoint& fp, std::span<const Vec> v,
                                       const Vec& eta) {
  const std::size_t E = envs.size();
  const Eigen::Index p = eta.size();
  Vec acc = Vec::Zero(p);
  for (std::size_t e = 0; e < E; ++e) {
    if (fp.varpi[e] == 0.0) continue;
    const auto& m = envs[e].model;
    acc += fp.varpi[e] * (m.cov.apply_sqrt(v[e]) + m.cov.apply(m.beta - eta));
  }
  SubgradientReport rep;
  rep.s = acc.cwiseQuotient(fp.lambda) / fp.theta;
  Vec grad = fp.lambda.cwiseProduct(rep.s);
  for (const auto& env : envs) {
    if (env.model.weight == 0.0) continue;
    const Vec resid = env.y - env.x_design * eta;
    grad -= env.model.weight * env.model.cov.apply_sqrt(env.z_design.transpose() * resid);
  }
  rep.grad_norm2 = grad.squaredNorm() / static_cast<double>(p);
  rep.max_abs_s = rep.s.cwiseAbs().maxCoeff();
  return rep;
}

StackAmpResult run_stack_glamp(std::span<const Environment> envs, const StackFixedPoint& fp,
                               int steps, const AmpOptions& opts) {
  if (steps < 1) throw ConfigError("AMP needs at least one step");
  const std::size_t E = envs.size();
  if (E == 0 || static_cast<std::size_t>(fp.tau.size()) != E)
    throw ModelError("fixed point does not match the environments");
  const int p = envs.front().model.p;
  std::vector<EnvironmentModel> models;
  for (const auto& e : envs) models.push_back(e.model);
  const StackDenoiser den(models, fp.varpi, fp.theta, fp.lambda);

  StackAmpResult res;
  // eta^0 from fresh Gaussians at the fixed-point scale.
  auto init = make_stream(opts.seed, "amp-init", 0);
  std::vector<Vec> v(E, Vec(p));
  for (std::size_t e = 0; e < E; ++e) {
    init.fill_normal(v[e]);
    v[e] *= fp.tau[e];
  }
  ProxResult pr = den(v, opts.prox);
  Vec eta = pr.b;
  std::vector<Vec> r(E);
  for (std::size_t e = 0; e < E; ++e) r[e] = z_times_sqrt(envs[e], eta);
  if (opts.keep_iterates) {
    res.eta.push_back(eta);
    res.v.push_back({});
  }
  auto record_eta = [&](int t, const Vec& cur, const Vec* prev) {
    if (prev) res.trace.add(t, "eta_step", 0, (cur - *prev).squaredNorm() / p);
    if (opts.target) res.trace.add(t, "dist_target", 0, (cur - *opts.target).squaredNorm() / p);
  };
  record_eta(0, eta, nullptr);

  std::vector<Vec> v_prev;
  for (int t = 1; t <= steps; ++t) {
    for (std::size_t e = 0; e < E; ++e) {
      const auto& env = envs[e];
      const auto& m = env.model;
      v[e] = env.z_design.transpose() * (env.y - r[e]) + m.cov.apply_sqrt(eta - m.beta);
    }
    bool bad = false;
    for (std::size_t e = 0; e < E; ++e) {
      const int ei = static_cast<int>(e) + 1;
      const double vn = v[e].squaredNorm() / p;
      res.trace.add(t, "v_norm2", ei, vn);
      res.trace.add(t, "tau2", ei, fp.tau[e] * fp.tau[e]);
      if (!v_prev.empty()) res.trace.add(t, "v_corr", ei, sample_corr(v[e], v_prev[e]));
      if (!std::isfinite(vn)) {
        res.status = AmpStatus::non_finite;
        res.message = "non-finite iterate at t = " + std::to_string(t);
        bad = true;
      } else if (vn > opts.divergence_factor * fp.tau[e] * fp.tau[e]) {
        res.status = AmpStatus::diverged;
        res.message = "divergence guard: (1/p)||v_" + std::to_string(ei) + "^t||^2 exceeded " +
                      std::to_string(opts.divergence_factor) + " tau^2 at t = " + std::to_string(t);
        bad = true;
      }
    }
    if (bad) {
      res.last_t = t;
      break;
    }
    pr = den(v, opts.prox, &eta);
    if (!pr.converged)
      throw NonConvergenceError("eta solve inside AMP did not converge at t = " + std::to_string(t));
    const Vec eta_prev = std::move(eta);
    eta = std::move(pr.b);
    for (std::size_t e = 0; e < E; ++e) {
      const double c = opts.onsager ? envs[e].model.kappa * fp.delta_bar[e] : 0.0;
      r[e] = z_times_sqrt(envs[e], eta) - c * (envs[e].y - r[e]);
    }
    record_eta(t, eta, &eta_prev);
    const SubgradientReport sg = subgradient_residual(envs, fp, v, eta);
    res.trace.add(t, "grad_norm2", 0, sg.grad_norm2);
    res.trace.add(t, "subgrad_max", 0, sg.max_abs_s);
    if (opts.keep_iterates) {
      res.eta.push_back(eta);
      res.v.push_back(v);
    }
    v_prev = v;
    res.last_t = t;
  }
  res.eta_final = eta;
  res.v_final = v;
  res.r_final = r;
  return res;
}

StackAmpResult run_individual_glamp(const Environment& env, const IndividualFixedPoint& fp,
                                    int steps, const AmpOptions& opts) {
  Environment unit = env;
  unit.model.weight = 1.0;
  return run_stack_glamp(std::span<const Environment>(&unit, 1), fp.as_stack, steps, opts);
}

SubgradientReport second_step_subgradient(const Environment& env1, const Vec& beta_hat,
                                          const SecondStepFixedPoint& second, const Vec& v,
                                          const Vec& xi) {
  const auto& m = env1.model;
  const double k = m.kappa;
  const Eigen::Index p = xi.size();
  SubgradientReport rep;
  rep.s = (m.cov.apply_sqrt(v) + (1.0 - k * second.gamma_ro) * m.cov.apply(m.beta - beta_hat) -
           m.cov.apply(xi - beta_hat)) /
          second.theta_rt;
  const Vec resid = env1.y - env1.x_design * xi;
  const Vec grad = -m.cov.apply_sqrt(env1.z_design.transpose() * resid) + rep.s;
  rep.grad_norm2 = grad.squaredNorm() / static_cast<double>(p);
  double mx = 0.0;
  for (Eigen::Index j = 0; j < p; ++j) {
    const double bound = second.penalty.kind == SecondStepPenalty::Kind::joint
                             ? second.penalty.lambda_rt
                             : second.penalty.mu(beta_hat[j]);
    mx = std::max(mx, std::abs(rep.s[j]) / bound);
  }
  rep.max_abs_s = mx;
  return rep;
}

SecondStepAmpResult run_induced_second_step_amp(const Environment& env1,
                                                const Vec& beta_hat_stack,
                                                const StackFixedPoint& stack,
                                                const SecondStepFixedPoint& second, int steps,
                                                const AmpOptions& opts) {
  if (steps < 1) throw ConfigError("AMP needs at least one step");
  const auto& m = env1.model;
  const int p = m.p;
  const double k = m.kappa;
  const double delta1 = stack.delta_bar[0];
  const double tau1 = stack.tau[0];
  const double g_ro = second.gamma_ro;
  const double g_rt = opts.onsager ? second.gamma_rt : 0.0;
  const SecondStepDenoiser xi(m.cov, m.beta, k, g_ro, second.theta_rt, second.penalty);

  const Vec resid_hat = env1.y - env1.x_design * beta_hat_stack;
  const Vec u_inf = resid_hat / (1.0 - k * delta1);  // y_1 - r_1^inf
  const Vec v_inf = env1.z_design.transpose() * u_inf + m.cov.apply_sqrt(beta_hat_stack - m.beta);

  auto init = make_stream(opts.seed, "induced-amp-init", 0);
  Vec z_init(p);
  init.fill_normal(z_init);
  const double comp = std::sqrt(std::max(0.0, 1.0 - second.zeta * second.zeta));
  Vec v = second.zeta * second.tau_rt * v_inf / tau1 + comp * second.tau_rt * z_init;
  ProxResult pr = xi(v, beta_hat_stack, opts.prox);
  Vec x = pr.b;
  Vec r = z_times_sqrt(env1, x) - (g_rt * second.tau_rt * second.zeta / tau1 + g_ro) * k * u_inf;

  SecondStepAmpResult res;
  if (opts.keep_iterates) res.xi.push_back(x);
  if (opts.target) res.trace.add(0, "dist_target", 0, (x - *opts.target).squaredNorm() / p);
  res.trace.add(0, "v_norm2", 1, v.squaredNorm() / p);

  const Vec sb1 = m.cov.apply_sqrt(m.beta);
  const Vec sbh = m.cov.apply_sqrt(beta_hat_stack);
  const double t2 = second.tau_rt * second.tau_rt;
  for (int t = 1; t <= steps; ++t) {
    const Vec u = env1.y - r - k * g_ro * u_inf;
    const Vec v_prev = v;
    v = env1.z_design.transpose() * u - (1.0 - k * g_ro) * sb1 - k * g_ro * sbh +
        m.cov.apply_sqrt(x);
    const double vn = v.squaredNorm() / p;
    res.trace.add(t, "v_norm2", 1, vn);
    res.trace.add(t, "tau2", 1, t2);
    res.trace.add(t, "v_corr", 1, sample_corr(v, v_prev));
    if (!std::isfinite(vn)) {
      res.status = AmpStatus::non_finite;
      res.message = "non-finite iterate at t = " + std::to_string(t);
      res.last_t = t;
      break;
    }
    if (vn > opts.divergence_factor * t2) {
      res.status = AmpStatus::diverged;
      res.message = "divergence guard: (1/p)||v_rt^t||^2 exceeded " +
                    std::to_string(opts.divergence_factor) + " tau_rt^2 at t = " + std::to_string(t);
      res.last_t = t;
      break;
    }
    pr = xi(v, beta_hat_stack, opts.prox, &x);
    if (!pr.converged)
      throw NonConvergenceError("xi solve inside AMP did not converge at t = " + std::to_string(t));
    const Vec x_prev = std::move(x);
    x = std::move(pr.b);
    r = z_times_sqrt(env1, x) - k * g_ro * u_inf - k * g_rt * u;
    res.trace.add(t, "xi_step", 0, (x - x_prev).squaredNorm() / p);
    if (opts.target) res.trace.add(t, "dist_target", 0, (x - *opts.target).squaredNorm() / p);
    const SubgradientReport sg = second_step_subgradient(env1, beta_hat_stack, second, v, x);
    res.trace.add(t, "grad_norm2", 0, sg.grad_norm2);
    res.trace.add(t, "subgrad_max", 0, sg.max_abs_s);
    if (opts.keep_iterates) res.xi.push_back(x);
    res.last_t = t;
  }
  res.xi_final = x;
  res.v_final = v;
  return res;
}

ConvergenceSummary track_convergence(std::span<const Vec> iterates, const Vec& target,
                                     std::vector<double> ladder) {
  ConvergenceSummary out;
  out.ladder = std::move(ladder);
  out.first_below.assign(out.ladder.size(), -1);
  for (std::size_t t = 0; t < iterates.size(); ++t) {
    if (iterates[t].size() != target.size()) throw ModelError("iterate and target dimensions differ");
    const double d = (iterates[t] - target).squaredNorm() / static_cast<double>(target.size());
    out.distance.push_back(d);
    for (std::size_t k = 0; k < out.ladder.size(); ++k)
      if (out.first_below[k] < 0 && d <= out.ladder[k]) out.first_below[k] = static_cast<int>(t);
    if (t + 1 < iterates.size())
      out.cauchy.push_back((iterates[t + 1] - iterates[t]).squaredNorm() /
                           static_cast<double>(target.size()));
  }
  return out;
}

}  // namespace glamp
