#include "glamp/risk.hpp"

#include <cmath>
#include <cstdio>

#include "glamp/error.hpp"
#include "glamp/parallel.hpp"
#include "glamp/rng.hpp"

namespace glamp {

Functional Functional::parse(const std::string& name) {
  Functional f;
  f.name = name;
  if (name == "support-fraction") {
    f.kind = Kind::support_fraction;
    return f;
  }
  if (name == "inner-product-with-beta1") {
    f.kind = Kind::inner_product;
    return f;
  }
  const std::string prefix = "mse-vs-beta";
  if (name.rfind(prefix, 0) == 0 && name.size() > prefix.size()) {
    const std::string idx = name.substr(prefix.size());
    if (idx.find_first_not_of("0123456789") == std::string::npos) {
      const int e = std::stoi(idx);
      if (e >= 1) {
        f.kind = Kind::mse;
        f.env = e - 1;
        return f;
      }
    }
  }
  throw ConfigError("unknown risk functional '" + name + "'");
}

double Functional::operator()(const Vec& est, std::span<const Vec> betas) const {
  const double p = static_cast<double>(est.size());
  switch (kind) {
    case Kind::mse:
      if (static_cast<std::size_t>(env) >= betas.size())
        throw ConfigError("functional '" + name + "' refers to a missing environment");
      return (est - betas[static_cast<std::size_t>(env)]).squaredNorm() / p;
    case Kind::support_fraction: {
      std::size_t nz = 0;
      for (Eigen::Index j = 0; j < est.size(); ++j) nz += est[j] != 0.0;
      return static_cast<double>(nz) / p;
    }
    case Kind::inner_product:
      return est.dot(betas[0]) / p;
    case Kind::custom:
      if (!custom) throw ConfigError("custom functional without a callback");
      return custom(est, betas);
  }
  return 0.0;
}

namespace {

std::vector<Vec> betas_of(std::span<const EnvironmentModel> models) {
  std::vector<Vec> b;
  for (const auto& m : models) b.push_back(m.beta);
  return b;
}

Estimate summarize(const std::vector<double>& x) {
  const MeanSE ms = mean_se(x);
  return {ms.mean, ms.se, static_cast<int>(x.size())};
}

}  // namespace

Estimate predict_risk_stack(const StackFixedPoint& fp, std::span<const EnvironmentModel> models,
                            const Functional& phi, const MCSettings& mc) {
  const std::size_t E = models.size();
  const int p = models.front().p;
  const GaussianBank bank(p, static_cast<int>(E), mc.draws, mc.seed, "theory", 0);
  const StackDenoiser den(models, fp.varpi, fp.theta, fp.lambda);
  const auto betas = betas_of(models);
  std::vector<double> vals(static_cast<std::size_t>(mc.draws));
  parallel_for(vals.size(), mc.threads, [&](std::size_t r) {
    const Mat& z = bank.draw(static_cast<int>(r));
    std::vector<Vec> v(E);
    for (std::size_t e = 0; e < E; ++e) v[e] = fp.tau[e] * z.col(e);
    const ProxResult res = den(v, mc.prox);
    if (!res.converged) throw NonConvergenceError("eta_bar solve failed at draw " + std::to_string(r));
    vals[r] = phi(res.b, betas);
  });
  return summarize(vals);
}

Estimate predict_risk_average(std::span<const IndividualFixedPoint> fps,
                              std::span<const EnvironmentModel> models, const Functional& phi,
                              const MCSettings& mc) {
  const std::size_t E = models.size();
  if (fps.size() != E) throw ModelError("need one individual fixed point per environment");
  double total = 0.0;
  for (const auto& m : models) total += m.weight;
  if (std::abs(total - 1.0) > 1e-12) throw ModelError("model-average weights must sum to one");
  const int p = models.front().p;
  const GaussianBank bank(p, static_cast<int>(E), mc.draws, mc.seed, "theory-average", 0);
  std::vector<StackDenoiser> dens;
  for (std::size_t e = 0; e < E; ++e) {
    EnvironmentModel m = models[e];
    m.weight = 1.0;
    dens.emplace_back(std::span<const EnvironmentModel>(&m, 1), Vec::Constant(1, 1.0),
                      fps[e].theta_ind, models[e].lambda);
  }
  const auto betas = betas_of(models);
  std::vector<double> vals(static_cast<std::size_t>(mc.draws));
  parallel_for(vals.size(), mc.threads, [&](std::size_t r) {
    const Mat& z = bank.draw(static_cast<int>(r));
    Vec avg = Vec::Zero(p);
    for (std::size_t e = 0; e < E; ++e) {
      if (models[e].weight == 0.0) continue;
      const Vec v = fps[e].tau_ind * z.col(e);
      const ProxResult res = dens[e](std::span<const Vec>(&v, 1), mc.prox);
      if (!res.converged) throw NonConvergenceError("eta_bar_e solve failed at draw " + std::to_string(r));
      avg += models[e].weight * res.b;
    }
    vals[r] = phi(avg, betas);
  });
  return summarize(vals);
}

Estimate predict_risk_second_step(const StackFixedPoint& stack, const SecondStepFixedPoint& second,
                                  std::span<const EnvironmentModel> models, const Functional& phi,
                                  const MCSettings& mc) {
  const std::size_t E = models.size();
  const int p = models.front().p;
  const auto& m1 = models[0];
  // Same Z_1..Z_E as predict_risk_stack, plus an independent Z_1'.
  const GaussianBank bank(p, static_cast<int>(E), mc.draws, mc.seed, "theory", 0);
  const GaussianBank prime(p, 1, mc.draws, mc.seed, "theory-prime", 0);
  const StackDenoiser den(models, stack.varpi, stack.theta, stack.lambda);
  const SecondStepDenoiser xi(m1.cov, m1.beta, m1.kappa, second.gamma_ro, second.theta_rt,
                              second.penalty);
  const double comp = std::sqrt(std::max(0.0, 1.0 - second.zeta * second.zeta));
  const auto betas = betas_of(models);
  std::vector<double> vals(static_cast<std::size_t>(mc.draws));
  parallel_for(vals.size(), mc.threads, [&](std::size_t r) {
    const Mat& z = bank.draw(static_cast<int>(r));
    std::vector<Vec> v(E);
    for (std::size_t e = 0; e < E; ++e) v[e] = stack.tau[e] * z.col(e);
    const ProxResult er = den(v, mc.prox);
    if (!er.converged) throw NonConvergenceError("eta_bar solve failed at draw " + std::to_string(r));
    Vec zrt = second.zeta * z.col(0);
    if (comp > 0.0) zrt += comp * prime.draw(static_cast<int>(r)).col(0);
    const ProxResult xr = xi(second.tau_rt * zrt, er.b, mc.prox);
    if (!xr.converged) throw NonConvergenceError("xi_bar solve failed at draw " + std::to_string(r));
    vals[r] = phi(xr.b, betas);
  });
  return summarize(vals);
}

Estimate empirical_risk(std::span<const Vec> estimates, std::span<const Vec> betas,
                        const Functional& phi) {
  if (estimates.empty()) throw ModelError("empirical risk needs at least one replicate");
  std::vector<double> vals;
  for (const auto& est : estimates) vals.push_back(phi(est, betas));
  return summarize(vals);
}

std::string fingerprint(std::string_view canonical_settings) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(hash_tag(canonical_settings)));
  return buf;
}

}  // namespace glamp
