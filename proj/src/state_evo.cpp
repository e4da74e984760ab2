#include "glamp/state_evo.hpp"

#include <algorithm>
#include <cmath>
#include <iterator>
#include <optional>
#include <string>

#include "glamp/error.hpp"
#include "glamp/parallel.hpp"
#include "glamp/rng.hpp"

namespace glamp {

GaussianBank::GaussianBank(int p, int columns, int draws, std::uint64_t seed,
                           std::string_view tag, std::uint64_t round)
    : p_(p), columns_(columns) {
  if (draws < 1) throw ConfigError("Monte-Carlo draw count must be positive");
  draws_.reserve(static_cast<std::size_t>(draws));
  for (int r = 0; r < draws; ++r) {
    auto s = make_stream(seed, tag, round, static_cast<std::uint64_t>(r));
    Mat z(p, columns);
    s.fill_normal(z);
    draws_.push_back(std::move(z));
  }
}

MeanSE mean_se(std::span<const double> x) {
  MeanSE out;
  const std::size_t n = x.size();
  if (n == 0) return out;
  double s = 0.0;
  for (double v : x) s += v;
  out.mean = s / static_cast<double>(n);
  if (n < 2) return out;
  double ss = 0.0;
  for (double v : x) ss += (v - out.mean) * (v - out.mean);
  out.se = std::sqrt(ss / static_cast<double>(n - 1) / static_cast<double>(n));
  return out;
}

namespace {

std::string bank_tag(const FixedPointOptions& opts) {
  return opts.tag + ":" + std::to_string(opts.tag_index);
}

std::vector<int> intersect_sorted(const std::vector<int>& a, const std::vector<int>& b) {
  std::vector<int> out;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
  return out;
}

Mat gather(const Mat& m, const std::vector<int>& rows, const std::vector<int>& cols) {
  Mat out(rows.size(), cols.size());
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t k = 0; k < cols.size(); ++k) out(i, k) = m(rows[i], cols[k]);
  return out;
}

/// (1/p) varpi_e tr([Q]_SS^{-1} [Sigma_e]_SS) for every environment.
std::vector<double> trace_deltas(const Mat& q, bool q_diagonal,
                                 std::span<const EnvironmentModel> models, const Vec& varpi,
                                 const std::vector<int>& s) {
  const std::size_t E = models.size();
  std::vector<double> out(E, 0.0);
  if (s.empty()) return out;
  const double p = models.front().p;
  bool all_diag = q_diagonal;
  for (const auto& m : models) all_diag = all_diag && m.cov.diagonal;
  if (all_diag) {
    for (std::size_t e = 0; e < E; ++e) {
      if (varpi[e] == 0.0) continue;
      double t = 0.0;
      for (int j : s) t += models[e].cov.sigma(j, j) / q(j, j);
      out[e] = varpi[e] * t / p;
    }
    return out;
  }
  const Eigen::LLT<Mat> llt(gather(q, s, s));
  if (llt.info() != Eigen::Success) throw NumericalError("restricted aggregate quadratic is singular");
  for (std::size_t e = 0; e < E; ++e) {
    if (varpi[e] == 0.0) continue;
    const Mat x = llt.solve(gather(models[e].cov.sigma, s, s));
    out[e] = varpi[e] * x.trace() / p;
  }
  return out;
}

struct StackImage {
  Vec tau;
  Vec varpi;
  double theta;
};

StackImage stack_image(const StackFixedPoint& fp, std::span<const EnvironmentModel> models) {
  const std::size_t E = models.size();
  double denom = 0.0;
  for (std::size_t e = 0; e < E; ++e)
    denom += models[e].weight * (1.0 - models[e].kappa * fp.delta_bar[e]);
  StackImage img{Vec(E), Vec(E), 1.0 / denom};
  for (std::size_t e = 0; e < E; ++e) {
    img.varpi[e] = models[e].weight * img.theta * (1.0 - models[e].kappa * fp.delta_bar[e]);
    img.tau[e] = std::sqrt(models[e].noise_variance +
                           models[e].kappa * fp.moments.mse_sigma[e].mean);
  }
  return img;
}

void check_stack_contraction(const StackFixedPoint& fp, std::span<const EnvironmentModel> models) {
  for (std::size_t e = 0; e < models.size(); ++e) {
    if (models[e].weight > 0.0 && models[e].kappa * fp.delta_bar[e] >= 1.0)
      throw ContractionViolation("kappa_e * delta_e >= 1 in environment " + std::to_string(e + 1));
  }
}

double rel(double lhs, double rhs, double scale) {
  return std::abs(lhs - rhs) / std::max(std::abs(scale), 1e-300);
}

}  // namespace

StackMoments estimate_eta_bar_moments(const StackParameters& params,
                                      std::span<const EnvironmentModel> models,
                                      const Vec& lambda, const GaussianBank& bank,
                                      const MCSettings& mc, EtaBarDraws* keep,
                                      std::vector<Vec>* warm) {
  const std::size_t E = models.size();
  const int R = bank.draws();
  if (bank.columns() != static_cast<int>(E) || bank.p() != models.front().p)
    throw ModelError("Gaussian bank shape does not match the environments");
  for (std::size_t e = 0; e < E; ++e)
    if (!(params.tau[e] > 0.0)) throw ModelError("tau must be positive");
  const StackDenoiser den(models, params.varpi, params.theta, lambda);
  const double p = models.front().p;

  std::vector<std::vector<double>> mse(E, std::vector<double>(R)), inner(E, std::vector<double>(R)),
      delta(E, std::vector<double>(R));
  std::vector<double> spars(R), gap(R);
  if (keep) {
    keep->eta.assign(R, Vec());
    keep->support.assign(R, {});
  }
  if (warm && static_cast<int>(warm->size()) != R) warm->assign(R, Vec());

  parallel_for(static_cast<std::size_t>(R), mc.threads, [&](std::size_t r) {
    const Mat& z = bank.draw(static_cast<int>(r));
    std::vector<Vec> v(E);
    for (std::size_t e = 0; e < E; ++e) v[e] = params.tau[e] * z.col(e);
    const Vec* ws = warm && (*warm)[r].size() ? &(*warm)[r] : nullptr;
    ProxResult res = den(v, mc.prox, ws);
    if (!res.converged)
      throw NonConvergenceError("eta_bar solve did not converge at Monte-Carlo draw " +
                                std::to_string(r));
    const auto d = trace_deltas(den.quadratic(), den.diagonal(), models, params.varpi, res.support);
    double dsum = 0.0;
    for (std::size_t e = 0; e < E; ++e) {
      const Vec diff = res.b - models[e].beta;
      mse[e][r] = models[e].sigma_norm2(diff);
      inner[e][r] = models[e].sigma_inner(models[e].beta, res.b);
      delta[e][r] = d[e];
      dsum += d[e];
    }
    spars[r] = static_cast<double>(res.support.size()) / p;
    gap[r] = std::abs(dsum - spars[r]);
    if (warm) (*warm)[r] = res.b;
    if (keep) {
      keep->support[r] = std::move(res.support);
      keep->eta[r] = std::move(res.b);
    }
  });

  StackMoments out;
  out.draws = R;
  for (std::size_t e = 0; e < E; ++e) {
    out.mse_sigma.push_back(mean_se(mse[e]));
    out.inner_sigma.push_back(mean_se(inner[e]));
    out.delta.push_back(mean_se(delta[e]));
  }
  out.sparsity = mean_se(spars);
  out.identity_gap = *std::max_element(gap.begin(), gap.end());
  return out;
}

std::vector<MeanSE> stein_delta_bar(const StackParameters& params,
                                    std::span<const EnvironmentModel> models,
                                    const Vec& lambda, const GaussianBank& bank,
                                    const MCSettings& mc) {
  const std::size_t E = models.size();
  const int R = bank.draws();
  const StackDenoiser den(models, params.varpi, params.theta, lambda);
  const double p = models.front().p;
  std::vector<std::vector<double>> st(E, std::vector<double>(R));
  parallel_for(static_cast<std::size_t>(R), mc.threads, [&](std::size_t r) {
    const Mat& z = bank.draw(static_cast<int>(r));
    std::vector<Vec> v(E);
    for (std::size_t e = 0; e < E; ++e) v[e] = params.tau[e] * z.col(e);
    const ProxResult res = den(v, mc.prox);
    for (std::size_t e = 0; e < E; ++e)
      st[e][r] = z.col(e).dot(models[e].cov.apply_sqrt(res.b)) / (params.tau[e] * p);
  });
  std::vector<MeanSE> out;
  for (std::size_t e = 0; e < E; ++e) out.push_back(mean_se(st[e]));
  return out;
}

StackParameters default_stack_init(std::span<const EnvironmentModel> models) {
  const std::size_t E = models.size();
  StackParameters s{Vec(E), Vec(E), 1.0};
  double total = 0.0;
  for (const auto& m : models) total += m.weight;
  if (!(total > 0.0)) throw ModelError("at least one environment weight must be positive");
  for (std::size_t e = 0; e < E; ++e) {
    const auto& m = models[e];
    s.tau[e] = std::sqrt(m.noise_variance + m.kappa * m.sigma_norm2(m.beta));
    if (!(s.tau[e] > 0.0)) s.tau[e] = 1e-8;  // null signal and zero noise
    s.varpi[e] = m.weight / total;
  }
  s.theta = 1.0 / total;
  return s;
}

StackFixedPoint evaluate_stack_equations(const StackParameters& params,
                                         std::span<const EnvironmentModel> models,
                                         const Vec& lambda, const GaussianBank& bank,
                                         const MCSettings& mc, std::vector<Vec>* warm) {
  const std::size_t E = models.size();
  StackFixedPoint fp;
  fp.tau = params.tau;
  fp.varpi = params.varpi;
  fp.theta = params.theta;
  fp.lambda = lambda;
  fp.mc = mc;
  fp.moments = estimate_eta_bar_moments(params, models, lambda, bank, mc, nullptr, warm);
  fp.delta_bar.resize(E);
  fp.delta_bar_se.resize(E);
  for (std::size_t e = 0; e < E; ++e) {
    fp.delta_bar[e] = fp.moments.delta[e].mean;
    fp.delta_bar_se[e] = fp.moments.delta[e].se;
  }
  const StackImage img = stack_image(fp, models);
  fp.residuals.clear();
  fp.residual_se.clear();
  for (std::size_t e = 0; e < E; ++e) {
    const double t2 = params.tau[e] * params.tau[e];
    fp.residuals.push_back(rel(t2, img.tau[e] * img.tau[e], t2));
    fp.residual_se.push_back(models[e].kappa * fp.moments.mse_sigma[e].se / t2);
  }
  for (std::size_t e = 0; e < E; ++e) {
    fp.residuals.push_back(std::abs(params.varpi[e] - img.varpi[e]));
    fp.residual_se.push_back(models[e].weight * img.theta * models[e].kappa * fp.delta_bar_se[e]);
  }
  fp.residuals.push_back(rel(params.theta, img.theta, params.theta));
  double th_se2 = 0.0;
  for (std::size_t e = 0; e < E; ++e) {
    const double d = models[e].weight * models[e].kappa * fp.delta_bar_se[e];
    th_se2 += d * d;
  }
  fp.residual_se.push_back(img.theta * std::sqrt(th_se2));
  fp.residual = *std::max_element(fp.residuals.begin(), fp.residuals.end());
  return fp;
}

StackFixedPoint solve_stack_fixed_point(std::span<const EnvironmentModel> models,
                                        const Vec& lambda, const MCSettings& mc,
                                        const FixedPointOptions& opts) {
  if (models.empty()) throw ModelError("at least one environment is required");
  if (!(opts.damping > 0.0 && opts.damping <= 1.0)) throw ConfigError("damping must lie in (0, 1]");
  const int p = models.front().p;
  const int E = static_cast<int>(models.size());
  StackParameters s = opts.has_init ? opts.init : default_stack_init(models);
  const StackParameters init = s;
  const std::string tag = bank_tag(opts);
  std::optional<GaussianBank> crn;
  if (mc.common_random_numbers) crn.emplace(p, E, mc.draws, mc.seed, tag, 0);
  std::vector<Vec> warm;

  StackFixedPoint fp;
  for (int it = 1; it <= opts.max_outer; ++it) {
    std::optional<GaussianBank> fresh;
    if (!crn) fresh.emplace(p, E, mc.draws, mc.seed, tag, static_cast<std::uint64_t>(it));
    const GaussianBank& bank = crn ? *crn : *fresh;
    fp = evaluate_stack_equations(s, models, lambda, bank, mc, &warm);
    fp.iterations = it;
    check_stack_contraction(fp, models);
    bool done = true;
    for (std::size_t i = 0; i < fp.residuals.size(); ++i)
      done = done && fp.residuals[i] <= std::max(opts.tol, 2.0 * fp.residual_se[i]);
    if (done) {
      fp.converged = true;
      break;
    }
    const StackImage img = stack_image(fp, models);
    const double a = opts.damping;
    s.tau = (1.0 - a) * s.tau + a * img.tau;
    s.varpi = (1.0 - a) * s.varpi + a * img.varpi;
    s.theta = (1.0 - a) * s.theta + a * img.theta;
    for (int e = 0; e < E; ++e) {
      if (!std::isfinite(s.tau[e]) || s.tau[e] > 1e6 * std::max(init.tau[e], 1.0))
        throw DivergenceError("stack fixed point diverged: tau_" + std::to_string(e + 1) +
                              " grew without bound at outer step " + std::to_string(it));
    }
    if (!std::isfinite(s.theta) || s.theta <= 0.0)
      throw DivergenceError("stack fixed point left the feasible region (theta)");
  }
  fp.initial = init;
  fp.options = opts;
  return fp;
}

IndividualFixedPoint solve_individual_fixed_point(std::span<const EnvironmentModel> models,
                                                  std::size_t env_index, const MCSettings& mc,
                                                  const FixedPointOptions& opts) {
  if (env_index >= models.size()) throw ModelError("environment index out of range");
  EnvironmentModel m = models[env_index];
  m.weight = 1.0;
  FixedPointOptions o = opts;
  if (o.tag == "eta-bar") {
    o.tag = "individual";
    o.tag_index = env_index;
  }
  IndividualFixedPoint out;
  out.env_index = env_index;
  out.as_stack = solve_stack_fixed_point(std::span<const EnvironmentModel>(&m, 1), m.lambda, mc, o);
  const auto& s = out.as_stack;
  out.tau_ind = s.tau[0];
  out.theta_ind = s.theta;
  out.delta_ind = s.delta_bar[0];
  out.delta_ind_se = s.delta_bar_se[0];
  out.residuals = s.residuals;
  out.residual_se = s.residual_se;
  out.residual = s.residual;
  out.converged = s.converged;
  out.iterations = s.iterations;
  return out;
}

// ---------------------------------------------------------------------------

SecondStepBanks make_second_step_banks(const StackFixedPoint& stack, int p, int environments,
                                       const MCSettings& mc, std::string_view tag,
                                       std::uint64_t round) {
  // Reuse the stack system's own draws when it ran on common random numbers.
  const bool shared = stack.mc.common_random_numbers && stack.mc.seed == mc.seed &&
                      stack.mc.draws == mc.draws && round == 0;
  const std::string ztag = shared ? bank_tag(stack.options) : std::string(tag) + "-z";
  return SecondStepBanks{GaussianBank(p, environments, mc.draws, mc.seed, ztag, round),
                         GaussianBank(p, 1, mc.draws, mc.seed, std::string(tag) + "-prime", round)};
}

SecondStepParameters default_second_step_init(const StackFixedPoint& stack,
                                              std::span<const EnvironmentModel> models) {
  SecondStepParameters s;
  s.gamma_ro = stack.delta_bar[0];
  s.theta_rt = 1.0;
  s.zeta = 1.0;
  s.tau_rt = (1.0 - models[0].kappa * stack.delta_bar[0]) * stack.tau[0];
  return s;
}

GammaBars estimate_gamma_bars(const StackFixedPoint& stack,
                              std::span<const EnvironmentModel> models,
                              const SecondStepParameters& params,
                              const SecondStepPenalty& penalty, const SecondStepBanks& banks,
                              const MCSettings& mc, const EtaBarDraws* eta) {
  const std::size_t E = models.size();
  const int R = banks.z.draws();
  const auto& m1 = models[0];
  const double p = m1.p;
  const double kappa = m1.kappa;
  if (std::abs(params.zeta) > 1.0) throw ModelError("zeta must lie in [-1, 1]");
  const StackDenoiser den(models, stack.varpi, stack.theta, stack.lambda);
  const SecondStepDenoiser xi(m1.cov, m1.beta, kappa, params.gamma_ro, params.theta_rt, penalty);
  const bool joint = penalty.kind == SecondStepPenalty::Kind::joint;
  const double varpi1 = stack.varpi[0];
  const double comp = std::sqrt(std::max(0.0, 1.0 - params.zeta * params.zeta));
  const bool diag = den.diagonal() && m1.cov.diagonal;
  const Mat& qbar = den.quadratic();
  const Mat& sig = m1.cov.sigma;

  std::vector<double> g_ro(R), g_rt(R), d1(R), eq_t(R), eq_z(R), sf(R);
  parallel_for(static_cast<std::size_t>(R), mc.threads, [&](std::size_t r) {
    const Mat& z = banks.z.draw(static_cast<int>(r));
    Vec eta_bar;
    std::vector<int> s;
    if (eta) {
      eta_bar = eta->eta[r];
      s = eta->support[r];
    } else {
      std::vector<Vec> v(E);
      for (std::size_t e = 0; e < E; ++e) v[e] = stack.tau[e] * z.col(e);
      ProxResult er = den(v, mc.prox);
      if (!er.converged)
        throw NonConvergenceError("eta_bar solve did not converge at draw " + std::to_string(r));
      eta_bar = std::move(er.b);
      s = std::move(er.support);
    }
    Vec zrt = params.zeta * z.col(0);
    if (comp > 0.0) zrt += comp * banks.z_prime.draw(static_cast<int>(r)).col(0);
    const ProxResult xr = xi(params.tau_rt * zrt, eta_bar, mc.prox);
    if (!xr.converged)
      throw NonConvergenceError("xi_bar solve did not converge at draw " + std::to_string(r));
    const std::vector<int>& rs = xr.support;  // S_rt
    g_rt[r] = static_cast<double>(rs.size()) / p;

    // delta_1 on the same support S
    double delta1 = 0.0;
    double t_main = 0.0;
    double t_mu = 0.0;
    const auto rs_and_s = intersect_sorted(rs, s);
    if (!s.empty()) {
      if (diag) {
        for (int j : s) delta1 += sig(j, j) / qbar(j, j);
        delta1 *= varpi1 / p;
        for (int j : rs_and_s) {
          t_main += sig(j, j) / qbar(j, j);
          if (!joint) {
            const double sg = (eta_bar[j] > 0 ? 1.0 : -1.0) * (xr.b[j] > 0 ? 1.0 : -1.0);
            t_mu += penalty.mu.derivative(std::abs(eta_bar[j])) * sg / qbar(j, j);
          }
        }
      } else {
        const Eigen::LLT<Mat> lq(gather(qbar, s, s));
        if (lq.info() != Eigen::Success) throw NumericalError("restricted aggregate quadratic is singular");
        delta1 = varpi1 * lq.solve(gather(sig, s, s)).trace() / p;
        if (!rs.empty()) {
          const Eigen::LLT<Mat> lr(gather(sig, rs, rs));
          if (lr.info() != Eigen::Success) throw NumericalError("restricted covariance is singular");
          const Mat a = lr.solve(gather(sig, rs, s));     // Sigma_RR^{-1} Sigma_RS
          const Mat b = lq.solve(gather(sig, s, rs));     // Qbar_SS^{-1} Sigma_SR
          t_main = (a.array() * b.transpose().array()).sum();
          if (!joint && !rs_and_s.empty()) {
            Mat msr = Mat::Zero(rs.size(), s.size());
            for (int j : rs_and_s) {
              const auto ir = std::lower_bound(rs.begin(), rs.end(), j) - rs.begin();
              const auto is = std::lower_bound(s.begin(), s.end(), j) - s.begin();
              const double sg = (eta_bar[j] > 0 ? 1.0 : -1.0) * (xr.b[j] > 0 ? 1.0 : -1.0);
              msr(ir, is) = penalty.mu.derivative(std::abs(eta_bar[j])) * sg;
            }
            const Mat am = lr.solve(msr);
            t_mu = (am.array() * b.transpose().array()).sum();
          }
        }
      }
    }
    t_main /= p;
    t_mu /= p;
    d1[r] = delta1;
    if (joint)
      g_ro[r] = delta1 - varpi1 * (1.0 - kappa * params.gamma_ro) * t_main;
    else
      g_ro[r] = varpi1 * kappa * params.gamma_ro * t_main - varpi1 * params.theta_rt * t_mu;

    const Vec dvec = m1.beta - xr.b - kappa * params.gamma_ro * (m1.beta - eta_bar);
    eq_t[r] = m1.sigma_norm2(dvec);
    eq_z[r] = m1.sigma_inner(m1.beta - eta_bar, dvec);
    std::size_t nz = 0;
    for (Eigen::Index j = 0; j < xr.b.size(); ++j) nz += xr.b[j] != 0.0;
    sf[r] = static_cast<double>(nz) / p;
  });

  GammaBars out;
  out.draws = R;
  out.gamma_ro = mean_se(g_ro);
  out.gamma_rt = mean_se(g_rt);
  out.delta1 = mean_se(d1);
  out.eq_tau = mean_se(eq_t);
  out.eq_zeta = mean_se(eq_z);
  out.support_fraction = mean_se(sf);
  return out;
}

namespace {

struct SecondImage {
  double tau_rt;
  double zeta_raw;
  double theta_rt;
  double gamma_ro;
};

SecondImage second_image(const StackFixedPoint& stack, const EnvironmentModel& m1,
                         const SecondStepParameters& prm, const GammaBars& g) {
  const double k = m1.kappa;
  const double s2 = m1.noise_variance;
  const double a = 1.0 - k * prm.gamma_ro;
  SecondImage img;
  img.tau_rt = std::sqrt(a * a * s2 + k * g.eq_tau.mean);
  img.zeta_raw = (a * s2 + k * g.eq_zeta.mean) / (img.tau_rt * stack.tau[0]);
  img.theta_rt = 1.0 / (1.0 - k * g.gamma_rt.mean);
  img.gamma_ro = g.gamma_ro.mean;
  return img;
}

}  // namespace

SecondStepFixedPoint evaluate_second_step_equations(const StackFixedPoint& stack,
                                                    std::span<const EnvironmentModel> models,
                                                    const SecondStepParameters& prm,
                                                    const SecondStepPenalty& penalty,
                                                    const SecondStepBanks& banks,
                                                    const MCSettings& mc,
                                                    const EtaBarDraws* eta) {
  const auto& m1 = models[0];
  const double k = m1.kappa;
  const double s2 = m1.noise_variance;
  SecondStepFixedPoint fp;
  fp.tau_rt = prm.tau_rt;
  fp.zeta = prm.zeta;
  fp.theta_rt = prm.theta_rt;
  fp.gamma_ro = prm.gamma_ro;
  fp.penalty = penalty;
  fp.bars = estimate_gamma_bars(stack, models, prm, penalty, banks, mc, eta);
  fp.gamma_ro_bar = fp.bars.gamma_ro.mean;
  fp.gamma_ro_se = fp.bars.gamma_ro.se;
  fp.gamma_rt = fp.bars.gamma_rt.mean;
  fp.gamma_rt_se = fp.bars.gamma_rt.se;

  const double a = 1.0 - k * prm.gamma_ro;
  const double t2 = prm.tau_rt * prm.tau_rt;
  const double scale_z = prm.tau_rt * stack.tau[0];
  fp.residuals = {
      rel(t2, a * a * s2 + k * fp.bars.eq_tau.mean, t2),
      rel(scale_z * prm.zeta, a * s2 + k * fp.bars.eq_zeta.mean, scale_z),
      rel(prm.theta_rt, 1.0 / (1.0 - k * fp.gamma_rt), prm.theta_rt),
      rel(prm.gamma_ro, fp.gamma_ro_bar, std::max(std::abs(prm.gamma_ro), 1e-12)),
  };
  const double th = 1.0 / (1.0 - k * fp.gamma_rt);
  fp.residual_se = {
      k * fp.bars.eq_tau.se / t2,
      k * fp.bars.eq_zeta.se / scale_z,
      th * k * fp.gamma_rt_se,
      fp.gamma_ro_se / std::max(std::abs(prm.gamma_ro), 1e-12),
  };
  fp.residual = *std::max_element(fp.residuals.begin(), fp.residuals.end());
  return fp;
}

SecondStepFixedPoint solve_second_step_fixed_point(const StackFixedPoint& stack,
                                                   std::span<const EnvironmentModel> models,
                                                   const SecondStepPenalty& penalty,
                                                   const MCSettings& mc,
                                                   const FixedPointOptions& opts) {
  const int p = models.front().p;
  const int E = static_cast<int>(models.size());
  SecondStepParameters s = default_second_step_init(stack, models);
  const SecondStepParameters init = s;
  const double k = models[0].kappa;

  std::optional<SecondStepBanks> crn;
  EtaBarDraws eta;
  if (mc.common_random_numbers) {
    crn.emplace(make_second_step_banks(stack, p, E, mc, "second-step", 0));
    // eta_bar does not depend on the second-step parameters: solve it once.
    estimate_eta_bar_moments(stack.parameters(), models, stack.lambda, crn->z, mc, &eta);
  }

  SecondStepFixedPoint fp;
  int clamped = 0;
  for (int it = 1; it <= opts.max_outer; ++it) {
    std::optional<SecondStepBanks> fresh;
    if (!crn) fresh.emplace(make_second_step_banks(stack, p, E, mc, "second-step",
                                                   static_cast<std::uint64_t>(it)));
    const SecondStepBanks& banks = crn ? *crn : *fresh;
    fp = evaluate_second_step_equations(stack, models, s, penalty, banks, mc,
                                        crn ? &eta : nullptr);
    fp.iterations = it;
    if (k * fp.gamma_rt >= 1.0)
      throw ContractionViolation("kappa_1 * gamma_rt >= 1 (theta_rt infeasible)");
    bool done = true;
    for (std::size_t i = 0; i < fp.residuals.size(); ++i)
      done = done && fp.residuals[i] <= std::max(opts.tol, 2.0 * fp.residual_se[i]);
    if (done) {
      fp.converged = true;
      break;
    }
    const SecondImage img = second_image(stack, models[0], s, fp.bars);
    const double a = opts.damping;
    s.tau_rt = (1.0 - a) * s.tau_rt + a * img.tau_rt;
    double z = (1.0 - a) * s.zeta + a * img.zeta_raw;
    if (z > 1.0 || z < -1.0) {
      ++clamped;
      z = std::clamp(z, -1.0, 1.0);
    }
    s.zeta = z;
    s.theta_rt = (1.0 - a) * s.theta_rt + a * img.theta_rt;
    s.gamma_ro = (1.0 - a) * s.gamma_ro + a * img.gamma_ro;
    if (!std::isfinite(s.tau_rt) || s.tau_rt > 1e6 * std::max(init.tau_rt, 1.0))
      throw DivergenceError("second-step fixed point diverged at outer step " + std::to_string(it));
    if (!(s.theta_rt > 0.0)) throw ContractionViolation("theta_rt left the feasible region");
  }
  fp.zeta_clamped = clamped;
  fp.initial = init;
  return fp;
}

// ---------------------------------------------------------------------------

HMapEstimate evaluate_H_map(const Vec& rho, const StackFixedPoint& stack,
                            std::span<const EnvironmentModel> models, const MCSettings& mc) {
  const std::size_t E = models.size();
  if (static_cast<std::size_t>(rho.size()) != E) throw ModelError("rho must have one entry per environment");
  for (Eigen::Index e = 0; e < rho.size(); ++e)
    if (rho[e] < 0.0 || rho[e] > 1.0) throw ModelError("rho entries must lie in [0, 1]");
  const int p = models.front().p;
  const int R = mc.draws;
  const GaussianBank zb(p, static_cast<int>(E), R, mc.seed, "h-map", 0);
  const GaussianBank wb(p, static_cast<int>(E), R, mc.seed, "h-map-pair", 0);
  const StackDenoiser den(models, stack.varpi, stack.theta, stack.lambda);
  std::vector<std::vector<double>> vals(E, std::vector<double>(R));
  parallel_for(static_cast<std::size_t>(R), mc.threads, [&](std::size_t r) {
    const Mat& z = zb.draw(static_cast<int>(r));
    const Mat& w = wb.draw(static_cast<int>(r));
    std::vector<Vec> v1(E), v2(E);
    for (std::size_t e = 0; e < E; ++e) {
      v1[e] = stack.tau[e] * z.col(e);
      if (rho[e] == 1.0)
        v2[e] = v1[e];
      else
        v2[e] = stack.tau[e] * (rho[e] * z.col(e) + std::sqrt(1.0 - rho[e] * rho[e]) * w.col(e));
    }
    const ProxResult a = den(v1, mc.prox);
    const ProxResult b = den(v2, mc.prox);
    for (std::size_t e = 0; e < E; ++e) {
      const auto& m = models[e];
      vals[e][r] = (m.noise_variance + m.kappa * m.sigma_inner(a.b - m.beta, b.b - m.beta)) /
                   (stack.tau[e] * stack.tau[e]);
    }
  });
  HMapEstimate out{Vec(E), Vec(E)};
  for (std::size_t e = 0; e < E; ++e) {
    const MeanSE ms = mean_se(vals[e]);
    out.value[e] = ms.mean;
    out.se[e] = ms.se;
  }
  return out;
}

MeanSE evaluate_H_rt(double rho, const StackFixedPoint& stack, const SecondStepFixedPoint& second,
                     std::span<const EnvironmentModel> models, const MCSettings& mc) {
  if (rho < 0.0 || rho > 1.0) throw ModelError("rho must lie in [0, 1]");
  const std::size_t E = models.size();
  const int p = models.front().p;
  const int R = mc.draws;
  const auto& m1 = models[0];
  const double k = m1.kappa;
  const GaussianBank zb(p, static_cast<int>(E), R, mc.seed, "h-rt", 0);
  const GaussianBank pb(p, 2, R, mc.seed, "h-rt-prime", 0);
  const StackDenoiser den(models, stack.varpi, stack.theta, stack.lambda);
  const SecondStepDenoiser xi(m1.cov, m1.beta, k, second.gamma_ro, second.theta_rt,
                              second.penalty);
  const double comp = std::sqrt(std::max(0.0, 1.0 - second.zeta * second.zeta));
  const double a = 1.0 - k * second.gamma_ro;
  std::vector<double> vals(R);
  parallel_for(static_cast<std::size_t>(R), mc.threads, [&](std::size_t r) {
    const Mat& z = zb.draw(static_cast<int>(r));
    const Mat& zp = pb.draw(static_cast<int>(r));
    std::vector<Vec> v(E);
    for (std::size_t e = 0; e < E; ++e) v[e] = stack.tau[e] * z.col(e);
    const Vec eta_bar = den(v, mc.prox).b;
    const Vec z1p = zp.col(0);
    const Vec z2p = rho == 1.0 ? z1p : Vec(rho * zp.col(0) + std::sqrt(1.0 - rho * rho) * zp.col(1));
    const Vec base = second.zeta * z.col(0);
    const Vec x1 = xi(second.tau_rt * (base + comp * z1p), eta_bar, mc.prox).b;
    const Vec x2 = xi(second.tau_rt * (base + comp * z2p), eta_bar, mc.prox).b;
    const Vec d1 = m1.beta - x1 - k * second.gamma_ro * (m1.beta - eta_bar);
    const Vec d2 = m1.beta - x2 - k * second.gamma_ro * (m1.beta - eta_bar);
    vals[r] = (a * a * m1.noise_variance + k * m1.sigma_inner(d1, d2)) /
              (second.tau_rt * second.tau_rt);
  });
  return mean_se(vals);
}

ContractionReport check_contraction(const StackFixedPoint& fp,
                                    std::span<const EnvironmentModel> models) {
  ContractionReport rep;
  const std::size_t E = models.size();
  rep.kappa_delta_margin.resize(E);
  for (std::size_t e = 0; e < E; ++e) {
    rep.kappa_delta_margin[e] = 1.0 - models[e].kappa * fp.delta_bar[e];
    rep.delta_sum += fp.delta_bar[e];
    if (models[e].weight > 0.0 && rep.kappa_delta_margin[e] <= 0.0) {
      rep.ok = false;
      rep.violations.push_back("kappa_" + std::to_string(e + 1) + " * delta_" +
                               std::to_string(e + 1) + " >= 1");
    }
    if (fp.delta_bar[e] < 0.0) {
      rep.ok = false;
      rep.violations.push_back("delta_" + std::to_string(e + 1) + " < 0");
    }
  }
  // The per-draw deltas sum to |S|/p, so this SE is the sparsity SE.
  rep.delta_sum_se = fp.moments.sparsity.se;
  rep.identity_gap = fp.moments.identity_gap;
  if (rep.delta_sum > 1.0 + 3.0 * rep.delta_sum_se) {
    rep.ok = false;
    rep.violations.push_back("sum of delta_e exceeds 1");
  }
  return rep;
}

ContractionReport check_contraction(const SecondStepFixedPoint& fp,
                                    std::span<const EnvironmentModel> models) {
  ContractionReport rep;
  rep.kappa_delta_margin = Vec::Constant(1, 1.0 - models[0].kappa * fp.gamma_rt);
  rep.delta_sum = fp.gamma_rt;
  rep.delta_sum_se = fp.gamma_rt_se;
  if (rep.kappa_delta_margin[0] <= 0.0) {
    rep.ok = false;
    rep.violations.push_back("kappa_1 * gamma_rt >= 1");
  }
  if (std::abs(fp.zeta) > 1.0) {
    rep.ok = false;
    rep.violations.push_back("|zeta| > 1");
  }
  return rep;
}

}  // namespace glamp
