#include <doctest.h>

#include <cmath>

#include "glamp/error.hpp"
#include "glamp/risk.hpp"
#include "glamp/state_evo.hpp"
#include "oracles.hpp"

using namespace glamp;

namespace {

Mat ar1(int p, double rho) {
  Mat s(p, p);
  for (int i = 0; i < p; ++i)
    for (int j = 0; j < p; ++j) s(i, j) = std::pow(rho, std::abs(i - j));
  return s;
}

std::vector<EnvironmentModel> models_for(int p, bool dense, double shift = 0.5) {
  std::vector<EnvironmentSpec> specs(2);
  specs[0].n = 2 * p;
  specs[1].n = 3 * p / 2;
  if (dense) {
    specs[0].covariance.kind = CovarianceSpec::Kind::dense;
    specs[0].covariance.matrix = ar1(p, 0.4);
    specs[1].covariance.kind = CovarianceSpec::Kind::dense;
    specs[1].covariance.matrix = ar1(p, -0.3);
  } else {
    specs[1].covariance.kind = CovarianceSpec::Kind::two_eigenvalue;
    specs[1].covariance.chi = 2.0;
  }
  specs[1].signal.kind = SignalSpec::Kind::shifted;
  specs[1].signal.base = 0;
  specs[1].signal.variance = shift;
  return build_models(specs, p, 17);
}

MCSettings mc_with(int draws, std::uint64_t seed = 3) {
  MCSettings mc;
  mc.draws = draws;
  mc.seed = seed;
  return mc;
}

struct SteinGamma {
  oracle::MeanSE ro, rt;
};

/// Definitional gamma estimators on the banks' draws.
SteinGamma stein_gammas(const StackFixedPoint& st, const SecondStepFixedPoint& sp,
                        const std::vector<EnvironmentModel>& models, const SecondStepBanks& banks,
                        const MCSettings& mc) {
  const auto& m1 = models[0];
  const int p = m1.p;
  const StackDenoiser den(models, st.varpi, st.theta, st.lambda);
  const SecondStepDenoiser xi(m1.cov, m1.beta, m1.kappa, sp.gamma_ro, sp.theta_rt, sp.penalty);
  const double z = sp.zeta, c = std::sqrt(1.0 - z * z);
  std::vector<double> ro, rt;
  for (int r = 0; r < banks.z.draws(); ++r) {
    const Mat& g = banks.z.draw(r);
    const Vec g1p = banks.z_prime.draw(r).col(0);
    std::vector<Vec> v;
    for (int e = 0; e < 2; ++e) v.push_back(st.tau[e] * g.col(e));
    const Vec eta = den(v, mc.prox).b;
    const Vec x = xi(sp.tau_rt * (z * g.col(0) + c * g1p), eta, mc.prox).b;
    const Vec sx = m1.cov.sqrt * x;
    ro.push_back((g.col(0) - (z / c) * g1p).dot(sx) / (st.tau[0] * p));
    rt.push_back((g1p / c).dot(sx) / (sp.tau_rt * p));
  }
  return {oracle::mean_se(ro), oracle::mean_se(rt)};
}

}  // namespace

TEST_CASE("trivial fixed point: zero signal and a huge penalty") {
  auto specs = std::vector<EnvironmentSpec>(2);
  specs[0].n = 100;
  specs[1].n = 50;
  for (auto& s : specs) {
    s.signal.variance = 0.0;
    s.lambda = 1e8;
    s.noise_variance = 2.0;
  }
  specs[0].weight = 0.25;
  specs[1].weight = 0.25;
  const auto models = build_models(specs, 40, 1);
  const auto fp = solve_stack_fixed_point(models, models[0].lambda, mc_with(20));
  CHECK(fp.converged);
  for (int e = 0; e < 2; ++e) {
    CHECK(fp.tau[e] == doctest::Approx(std::sqrt(2.0)).epsilon(1e-14));
    CHECK(fp.varpi[e] == doctest::Approx(0.5).epsilon(1e-14));
    CHECK(fp.delta_bar[e] == 0.0);
  }
  CHECK(fp.theta == doctest::Approx(2.0).epsilon(1e-14));  // 1 / sum pi
}

TEST_CASE("stack fixed point satisfies its equations and the support identity") {
  const auto models = models_for(100, false);
  const auto mc = mc_with(200);
  const auto fp = solve_stack_fixed_point(models, models[0].lambda, mc);
  REQUIRE(fp.converged);
  REQUIRE(fp.residuals.size() == 5);
  for (std::size_t i = 0; i < fp.residuals.size(); ++i)
    CHECK(fp.residuals[i] <= std::max(1e-3, 3.0 * fp.residual_se[i]));
  // sum_e delta_e equals the support fraction draw by draw
  CHECK(fp.moments.identity_gap < 1e-12);
  const auto rep = check_contraction(fp, models);
  CHECK(rep.ok);
  CHECK(fp.delta_bar.sum() <= 1.0);
  // varpi_e = pi_e theta (1 - kappa_e delta_e)
  for (int e = 0; e < 2; ++e)
    CHECK(fp.varpi[e] ==
          doctest::Approx(0.5 * fp.theta * (1.0 - models[e].kappa * fp.delta_bar[e])).epsilon(5e-3));
  CHECK(fp.varpi.sum() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("trace-form delta agrees with the Stein form for diagonal and dense covariances") {
  for (bool dense : {false, true}) {
    CAPTURE(dense);
    const int p = dense ? 60 : 120;
    const auto models = models_for(p, dense);
    const auto mc = mc_with(300);
    const auto fp = solve_stack_fixed_point(models, models[0].lambda, mc);
    const GaussianBank bank(p, 2, mc.draws, 99, "stein-test", 0);
    const auto mom = estimate_eta_bar_moments(fp.parameters(), models, fp.lambda, bank, mc);
    const auto stein = stein_delta_bar(fp.parameters(), models, fp.lambda, bank, mc);
    for (int e = 0; e < 2; ++e)
      CHECK(std::abs(mom.delta[e].mean - stein[e].mean) <= 3.0 * std::hypot(mom.delta[e].se, stein[e].se));
  }
}

TEST_CASE("gamma trace forms agree with their definitional Stein forms") {
  struct Case {
    bool dense;
    SecondStepPenalty pen;
    const char* name;
  };
  const std::vector<Case> cases = {{false, SecondStepPenalty::joint(0.5), "diagonal joint"},
                                   {false, SecondStepPenalty::adaptive(), "diagonal adaptive"},
                                   {true, SecondStepPenalty::joint(0.5), "dense joint"},
                                   {true, SecondStepPenalty::adaptive(), "dense adaptive"}};
  for (const auto& c : cases) {
    CAPTURE(c.name);
    const int p = c.dense ? 60 : 120;
    const auto models = models_for(p, c.dense, 1.0);
    const auto mc = mc_with(c.dense ? 600 : 1500);
    const auto st = solve_stack_fixed_point(models, models[0].lambda, mc);
    const auto sp = solve_second_step_fixed_point(st, models, c.pen, mc);
    REQUIRE(std::abs(sp.zeta) < 0.99);
    const auto banks = make_second_step_banks(st, p, 2, mc, "stein-gamma", 7);
    const auto bars = estimate_gamma_bars(st, models, sp.parameters(), c.pen, banks, mc);
    const auto stein = stein_gammas(st, sp, models, banks, mc);
    CHECK(std::abs(bars.gamma_rt.mean - stein.rt.mean) <= 3.0 * std::hypot(bars.gamma_rt.se, stein.rt.se));
    CHECK(std::abs(bars.gamma_ro.mean - stein.ro.mean) <= 3.0 * std::hypot(bars.gamma_ro.se, stein.ro.se));
  }
}

TEST_CASE("second-step fixed point converges and is self-consistent in gamma_ro") {
  const auto models = models_for(100, false);
  const auto mc = mc_with(300);
  const auto st = solve_stack_fixed_point(models, models[0].lambda, mc);
  const auto sp = solve_second_step_fixed_point(st, models, SecondStepPenalty::joint(0.5), mc);
  CHECK(sp.converged);
  CHECK(sp.gamma_ro == doctest::Approx(sp.gamma_ro_bar).epsilon(0.02));
  CHECK(models[0].kappa * sp.gamma_rt < 1.0);
  CHECK(std::abs(sp.zeta) <= 1.0);
  CHECK(check_contraction(sp, models).ok);
}

TEST_CASE("huge second-step penalty reproduces the first-step quantities") {
  const auto models = models_for(80, false);
  const auto mc = mc_with(200);
  const auto st = solve_stack_fixed_point(models, models[0].lambda, mc);
  const auto init = default_second_step_init(st, models);
  const auto sp = solve_second_step_fixed_point(st, models, SecondStepPenalty::joint(1e8), mc);
  // xi = eta_bar exactly: gamma_ro = delta_1, zeta = 1 and
  // tau_rt = (1 - kappa_1 delta_1) tau_1.
  const double k = models[0].kappa, d1 = st.delta_bar[0];
  CHECK(sp.gamma_ro == doctest::Approx(d1).epsilon(1e-3));
  CHECK(sp.tau_rt == doctest::Approx((1.0 - k * d1) * st.tau[0]).epsilon(1e-3));
  CHECK(sp.zeta == doctest::Approx(1.0).epsilon(1e-3));
  CHECK(init.tau_rt == doctest::Approx((1.0 - k * d1) * st.tau[0]).epsilon(1e-3));
  CHECK(sp.gamma_rt == 0.0);
}

TEST_CASE("individual system is the single-environment stack system") {
  const auto models = models_for(80, false);
  const auto mc = mc_with(200);
  const auto ind = solve_individual_fixed_point(models, 1, mc);
  CHECK(ind.converged);
  CHECK(ind.env_index == 1);
  // theta_ind = 1 / (1 - kappa delta)
  CHECK(ind.theta_ind == doctest::Approx(1.0 / (1.0 - models[1].kappa * ind.delta_ind)).epsilon(5e-3));
}

TEST_CASE("H maps fix one and are monotone along the correlation chain") {
  const auto models = models_for(100, false);
  const auto mc = mc_with(300);
  const auto st = solve_stack_fixed_point(models, models[0].lambda, mc);
  const auto h1 = evaluate_H_map(Vec::Ones(2), st, models, mc);
  const auto hh = evaluate_H_map(Vec::Constant(2, 0.5), st, models, mc);
  const auto h0 = evaluate_H_map(Vec::Zero(2), st, models, mc);
  for (int e = 0; e < 2; ++e) {
    CHECK(std::abs(h1.value[e] - 1.0) <= 3.0 * h1.se[e] + 1e-12);
    CHECK(h0.value[e] <= hh.value[e] + 3.0 * std::hypot(h0.se[e], hh.se[e]));
    CHECK(hh.value[e] <= h1.value[e] + 3.0 * std::hypot(hh.se[e], h1.se[e]));
    CHECK(hh.value[e] >= 0.5 - 3.0 * hh.se[e]);  // contraction toward one
  }
  const auto sp = solve_second_step_fixed_point(st, models, SecondStepPenalty::joint(0.5), mc);
  const auto r1 = evaluate_H_rt(1.0, st, sp, models, mc);
  CHECK(std::abs(r1.mean - 1.0) <= 3.0 * r1.se + 1e-12);
  for (double rho : {0.0, 0.5}) {
    const auto r = evaluate_H_rt(rho, st, sp, models, mc);
    CHECK(r.mean >= sp.zeta * sp.zeta - 3.0 * r.se);
  }
}

TEST_CASE("results do not depend on the thread count") {
  const auto models = models_for(60, true);
  auto mc = mc_with(80);
  const auto a = solve_stack_fixed_point(models, models[0].lambda, mc);
  mc.threads = 4;
  const auto b = solve_stack_fixed_point(models, models[0].lambda, mc);
  CHECK(a.tau == b.tau);
  CHECK(a.theta == b.theta);
  CHECK(a.delta_bar == b.delta_bar);
}

TEST_CASE("fresh draws per iteration still reach the fixed point within Monte-Carlo error") {
  const auto models = models_for(100, false);
  auto mc = mc_with(300);
  const auto crn = solve_stack_fixed_point(models, models[0].lambda, mc);
  mc.common_random_numbers = false;
  FixedPointOptions fo;
  fo.max_outer = 60;
  const auto fresh = solve_stack_fixed_point(models, models[0].lambda, mc, fo);
  for (int e = 0; e < 2; ++e) CHECK(fresh.tau[e] == doctest::Approx(crn.tau[e]).epsilon(0.02));
}

TEST_CASE("risk predictions for the stack equal the fixed-point moments") {
  const auto models = models_for(100, false);
  const auto mc = mc_with(300);
  const auto st = solve_stack_fixed_point(models, models[0].lambda, mc);
  const auto risk = predict_risk_stack(st, models, Functional::parse("mse-vs-beta1"), mc);
  // MSE against beta_1 with Sigma_1 = I equals the Sigma_1-weighted moment
  CHECK(risk.value == doctest::Approx(st.moments.mse_sigma[0].mean).epsilon(0.02));
  const auto sf = predict_risk_stack(st, models, Functional::parse("support-fraction"), mc);
  CHECK(sf.value == doctest::Approx(st.delta_bar.sum()).epsilon(0.02));
  CHECK_THROWS_AS(Functional::parse("no-such-functional"), ConfigError);
}
