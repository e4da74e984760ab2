#include <doctest.h>

#include "glamp/prox.hpp"
#include "glamp/rng.hpp"
#include "oracles.hpp"

using namespace glamp;

namespace {

Mat random_spd(int p, RandomStream& rs) {
  Mat a(p, p);
  rs.fill_normal(a);
  return a * a.transpose() / p + 0.2 * Mat::Identity(p, p);
}

Covariance dense_cov(const Mat& s) {
  CovarianceSpec cs;
  cs.kind = CovarianceSpec::Kind::dense;
  cs.matrix = s;
  return make_covariance(cs, static_cast<int>(s.rows()));
}

Vec gaussian(int p, RandomStream& rs, double scale = 1.0) {
  Vec v(p);
  rs.fill_normal(v, scale);
  return v;
}

}  // namespace

TEST_CASE("solver core matches the sign-pattern oracle on small dense problems") {
  for (int inst = 0; inst < 60; ++inst) {
    RandomStream rs = make_stream(11, "prox-core", inst);
    const int p = 1 + inst % 6;
    const Mat q = random_spd(p, rs);
    const Vec c = gaussian(p, rs, 2.0);
    Vec w(p);
    for (int j = 0; j < p; ++j) w[j] = 0.1 + 1.5 * rs.uniform();
    ProxOptions po;
    po.tol = 1e-13;
    const ProxResult r = solve_quadratic_l1(q, false, c, w, po);
    CHECK(r.converged);
    CHECK((r.b - oracle::sign_pattern_minimizer(q, c, w)).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("solver core agrees with FISTA at moderate dimension") {
  RandomStream rs = make_stream(12, "prox-fista", 0);
  const int p = 60;
  const Mat q = random_spd(p, rs);
  const Vec c = gaussian(p, rs, 1.5);
  const Vec w = Vec::Constant(p, 0.4);
  ProxOptions po;
  po.tol = 1e-12;
  const ProxResult r = solve_quadratic_l1(q, false, c, w, po);
  const Vec ref = oracle::fista(q, c, w, 20000);
  CHECK((r.b - ref).cwiseAbs().maxCoeff() < 1e-7);
  CHECK(quadratic_l1_kkt(q, false, c, w, r.b) <= 1e-12);
}

TEST_CASE("objective is non-increasing across sweeps") {
  RandomStream rs = make_stream(13, "prox-monotone", 0);
  const int p = 40;
  const Mat q = random_spd(p, rs);
  const Vec c = gaussian(p, rs, 2.0);
  const Vec w = Vec::Constant(p, 0.3);
  ProxOptions po;
  po.track_objective = true;
  po.tol = 1e-12;
  const ProxResult r = solve_quadratic_l1(q, false, c, w, po);
  REQUIRE(r.objective_trace.size() >= 2);
  for (std::size_t k = 1; k < r.objective_trace.size(); ++k)
    CHECK(r.objective_trace[k] <= r.objective_trace[k - 1] + 1e-10);
}

TEST_CASE("reverse coordinate order reaches the same minimizer") {
  RandomStream rs = make_stream(14, "prox-order", 0);
  const int p = 30;
  const Mat q = random_spd(p, rs);
  const Vec c = gaussian(p, rs, 2.0);
  const Vec w = Vec::Constant(p, 0.5);
  ProxOptions a, b;
  a.tol = b.tol = 1e-12;
  b.reverse_order = true;
  CHECK((solve_quadratic_l1(q, false, c, w, a).b - solve_quadratic_l1(q, false, c, w, b).b)
            .cwiseAbs()
            .maxCoeff() < 1e-9);
}

TEST_CASE("warm start does not change the answer") {
  RandomStream rs = make_stream(15, "prox-warm", 0);
  const int p = 25;
  const Mat q = random_spd(p, rs);
  const Vec c = gaussian(p, rs, 2.0);
  const Vec w = Vec::Constant(p, 0.5);
  ProxOptions po;
  po.tol = 1e-12;
  const Vec warm = gaussian(p, rs);
  CHECK((solve_quadratic_l1(q, false, c, w, po).b - solve_quadratic_l1(q, false, c, w, po, &warm).b)
            .cwiseAbs()
            .maxCoeff() < 1e-9);
}

TEST_CASE("huge weights give the zero solution and zero weights give Q^{-1}c") {
  RandomStream rs = make_stream(16, "prox-limits", 0);
  const int p = 8;
  const Mat q = random_spd(p, rs);
  const Vec c = gaussian(p, rs);
  ProxOptions po;
  po.tol = 1e-12;
  CHECK(solve_quadratic_l1(q, false, c, Vec::Constant(p, 1e6), po).b.isZero(0.0));
  const Vec ls = q.ldlt().solve(c);
  CHECK((solve_quadratic_l1(q, false, c, Vec::Zero(p), po).b - ls).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("eta_multi satisfies its own KKT conditions and is shift-equivariant in beta") {
  RandomStream rs = make_stream(17, "eta-kkt", 0);
  const int p = 5;
  MultiEnvProxProblem prob;
  prob.theta = 1.3;
  prob.lambda = Vec::Constant(p, 0.7);
  for (int e = 0; e < 2; ++e) {
    ProxTerm t;
    t.varpi = 0.5;
    t.cov = dense_cov(random_spd(p, rs));
    t.beta = gaussian(p, rs);
    t.v = gaussian(p, rs);
    prob.terms.push_back(t);
  }
  ProxOptions po;
  po.tol = 1e-12;
  const ProxResult r = eta_multi(prob, po);
  CHECK(kkt_residual(r.b, prob) < 1e-10);
}

TEST_CASE("eta_multi rejects weights that do not sum to one") {
  MultiEnvProxProblem prob;
  prob.theta = 1.0;
  prob.lambda = Vec::Ones(3);
  ProxTerm t;
  t.varpi = 0.7;
  t.cov = make_covariance({}, 3);
  t.beta = Vec::Zero(3);
  t.v = Vec::Ones(3);
  prob.terms = {t};
  CHECK_THROWS(eta_multi(prob));
}

TEST_CASE("isotropic eta_single is a soft threshold of v + beta") {
  RandomStream rs = make_stream(18, "eta-iso", 0);
  const int p = 200;
  const Covariance id = make_covariance({}, p);
  const Vec v = gaussian(p, rs), beta = gaussian(p, rs);
  const Vec lambda = Vec::Constant(p, 0.8);
  const ProxResult r = eta_single(v, 1.4, lambda, id, beta);
  for (int j = 0; j < p; ++j) CHECK(r.b[j] == doctest::Approx(oracle::soft(v[j] + beta[j], 1.12)).epsilon(1e-12));
}

TEST_CASE("joint second-step xi on a diagonal covariance matches the closed form") {
  RandomStream rs = make_stream(19, "xi-diag", 0);
  const int p = 50;
  CovarianceSpec cs;
  cs.kind = CovarianceSpec::Kind::two_eigenvalue;
  cs.chi = 3.0;
  const Covariance cov = make_covariance(cs, p);
  SecondStepProxProblem prob;
  prob.v_rt = gaussian(p, rs);
  prob.beta_hat = gaussian(p, rs);
  prob.beta1 = gaussian(p, rs);
  prob.cov1 = cov;
  prob.gamma_ro = 0.2;
  prob.kappa1 = 0.5;
  prob.theta_rt = 1.1;
  prob.penalty = SecondStepPenalty::joint(0.6);
  const ProxResult r = xi_second_step(prob);
  for (int j = 0; j < p; ++j) {
    const double s = std::sqrt(cov.sigma(j, j)), sig = cov.sigma(j, j);
    const double m = prob.v_rt[j] + s * prob.beta1[j] - 0.1 * s * (prob.beta1[j] - prob.beta_hat[j]);
    const double want = prob.beta_hat[j] + oracle::soft(s * m - sig * prob.beta_hat[j], 1.1 * 0.6) / sig;
    CHECK(r.b[j] == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("adaptive weights are positive, non-increasing and differentiate correctly") {
  const AdaptiveWeight mu;
  for (double x = 0.01; x < 5.0; x += 0.01) {
    CHECK(mu(x) > 0.0);
    CHECK(mu(x + 0.01) <= mu(x));
    const double fd = (mu(x + 1e-6) - mu(std::max(0.0, x - 1e-6))) / (x + 1e-6 - std::max(0.0, x - 1e-6));
    CHECK(mu.derivative(x) == doctest::Approx(fd).epsilon(1e-4).scale(1.0));
  }
  CHECK(mu(-0.3) == mu(0.3));
  CHECK(mu(0.0) == doctest::Approx(5.0 + 10.0 / 0.05));
  const auto tab = AdaptiveWeight::table({0.0, 1.0, 2.0}, {3.0, 2.0, 1.0});
  CHECK(tab(0.5) == doctest::Approx(2.5));
  CHECK(tab(10.0) == doctest::Approx(1.0));
  CHECK(tab.derivative(1.5) == doctest::Approx(-1.0));
  CHECK_THROWS(AdaptiveWeight::table({0.0, 1.0}, {1.0, 2.0}));
}

TEST_CASE("dense second-step xi matches the sign-pattern oracle for both penalties") {
  for (int inst = 0; inst < 40; ++inst) {
    RandomStream rs = make_stream(20, "xi-dense", inst);
    const int p = 2 + inst % 5;
    SecondStepProxProblem prob;
    prob.cov1 = dense_cov(random_spd(p, rs));
    prob.v_rt = gaussian(p, rs);
    prob.beta_hat = gaussian(p, rs);
    prob.beta1 = gaussian(p, rs);
    prob.gamma_ro = 0.3 * rs.uniform();
    prob.kappa1 = 0.5;
    prob.theta_rt = 0.5 + rs.uniform();
    const bool joint = inst % 2 == 0;
    prob.penalty = joint ? SecondStepPenalty::joint(0.4) : SecondStepPenalty::adaptive();
    ProxOptions po;
    po.tol = 1e-13;
    const ProxResult r = xi_second_step(prob, po);

    const Mat& s = prob.cov1.sqrt;
    const Mat& sig = prob.cov1.sigma;
    const Vec m = prob.v_rt + s * prob.beta1 - prob.kappa1 * prob.gamma_ro * s * (prob.beta1 - prob.beta_hat);
    Vec want;
    if (joint) {
      const Vec d = oracle::sign_pattern_minimizer(sig, s * m - sig * prob.beta_hat,
                                                   Vec::Constant(p, prob.theta_rt * 0.4));
      want = prob.beta_hat + d;
    } else {
      Vec w(p);
      for (int j = 0; j < p; ++j) {
        const double x = std::abs(prob.beta_hat[j]);
        w[j] = prob.theta_rt * (5.0 + 10.0 / (0.05 + x * x));
      }
      want = oracle::sign_pattern_minimizer(sig, s * m, w);
    }
    CHECK((r.b - want).cwiseAbs().maxCoeff() < 1e-9);
    CHECK(kkt_residual(r.b, prob) < 1e-10);
  }
}
