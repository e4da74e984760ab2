// Fast invariant suite behind `glamp selfcheck`.

#include <chrono>
#include <cmath>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "glamp/experiment.hpp"
#include "glamp/prox.hpp"
#include "glamp/rng.hpp"

namespace glamp {
namespace {

/// Minimizer of 1/2 b'Qb - c'b + sum w|b| by enumerating all 3^p sign
/// patterns and keeping the one whose stationary point satisfies the KKT
/// conditions.  Only usable for tiny p.
Vec enumerate_sign_patterns(const Mat& q, const Vec& c, const Vec& w) {
  const int p = static_cast<int>(c.size());
  int total = 1;
  for (int j = 0; j < p; ++j) total *= 3;
  Vec best;
  double best_obj = INFINITY;
  for (int code = 0; code < total; ++code) {
    std::vector<int> s(p), act;
    int k = code;
    for (int j = 0; j < p; ++j) {
      s[j] = k % 3 - 1;
      k /= 3;
      if (s[j] != 0) act.push_back(j);
    }
    Vec b = Vec::Zero(p);
    if (!act.empty()) {
      const int a = static_cast<int>(act.size());
      Mat qa(a, a);
      Vec ra(a);
      for (int i = 0; i < a; ++i) {
        ra[i] = c[act[i]] - w[act[i]] * s[act[i]];
        for (int l = 0; l < a; ++l) qa(i, l) = q(act[i], act[l]);
      }
      const Vec ba = qa.llt().solve(ra);
      bool ok = true;
      for (int i = 0; i < a; ++i) {
        if (ba[i] * s[act[i]] <= 0.0) ok = false;
        b[act[i]] = ba[i];
      }
      if (!ok) continue;
    }
    const Vec g = c - q * b;
    bool ok = true;
    for (int j = 0; j < p; ++j)
      if (s[j] == 0 && std::abs(g[j]) > w[j] * (1.0 + 1e-12) + 1e-12) ok = false;
    if (!ok) continue;
    const double obj = 0.5 * b.dot(q * b) - c.dot(b) + (w.array() * b.array().abs()).sum();
    if (obj < best_obj) {
      best_obj = obj;
      best = b;
    }
  }
  return best;
}

Mat random_spd(int p, RandomStream& rs) {
  Mat a(p, p);
  rs.fill_normal(a);
  return a * a.transpose() / p + 0.3 * Mat::Identity(p, p);
}

struct Check {
  std::string name;
  std::function<std::string()> run;  // empty string means pass
};

std::string check_prox(std::uint64_t seed) {
  double worst = 0.0;
  for (int inst = 0; inst < 40; ++inst) {
    RandomStream rs = make_stream(seed, "selfcheck-prox", inst);
    const int p = 2 + inst % 4;
    const int E = 1 + inst % 3;
    MultiEnvProxProblem prob;
    prob.theta = 0.5 + rs.uniform();
    prob.lambda = Vec(p);
    for (int j = 0; j < p; ++j) prob.lambda[j] = 0.2 + rs.uniform();
    double total = 0.0;
    std::vector<double> raw(E);
    for (auto& r : raw) total += (r = 0.2 + rs.uniform());
    Mat q = Mat::Zero(p, p);
    Vec c = Vec::Zero(p);
    for (int e = 0; e < E; ++e) {
      ProxTerm t;
      t.varpi = raw[e] / total;
      CovarianceSpec cs;
      cs.kind = CovarianceSpec::Kind::dense;
      cs.matrix = random_spd(p, rs);
      t.cov = make_covariance(cs, p);
      t.beta = Vec(p);
      t.v = Vec(p);
      rs.fill_normal(t.beta);
      rs.fill_normal(t.v);
      q += t.varpi * t.cov.sigma;
      c += t.varpi * (t.cov.sqrt * t.v + t.cov.sigma * t.beta);
      prob.terms.push_back(std::move(t));
    }
    ProxOptions po;
    po.tol = 1e-12;
    const Vec got = eta_multi(prob, po).b;
    const Vec want = enumerate_sign_patterns(q, c, prob.theta * prob.lambda);
    worst = std::max(worst, (got - want).cwiseAbs().maxCoeff());
  }
  if (worst > 1e-8) return "max abs difference " + std::to_string(worst);
  return {};
}

std::vector<EnvironmentModel> small_models(std::uint64_t seed, double signal_var, double lambda) {
  std::vector<EnvironmentSpec> specs(2);
  specs[0].n = 200;
  specs[1].n = 150;
  specs[1].covariance.kind = CovarianceSpec::Kind::two_eigenvalue;
  specs[1].covariance.chi = 2.0;
  for (auto& s : specs) {
    s.signal.variance = signal_var;
    s.lambda = lambda;
  }
  return build_models(specs, 100, seed);
}

std::string check_stein(const SelfcheckOptions& o) {
  const auto models = small_models(o.seed, 1.0, 1.0);
  MCSettings mc;
  mc.draws = 200;
  mc.seed = o.seed;
  mc.threads = o.threads;
  const Vec lambda = models[0].lambda;
  const auto fp = solve_stack_fixed_point(models, lambda, mc);
  if (!fp.converged) return "stack fixed point did not converge";
  const GaussianBank bank(100, 2, mc.draws, mc.seed, "selfcheck-stein", 0);
  const auto mom = estimate_eta_bar_moments(fp.parameters(), models, lambda, bank, mc);
  const auto stein = stein_delta_bar(fp.parameters(), models, lambda, bank, mc);
  for (std::size_t e = 0; e < models.size(); ++e) {
    const double trace = o.flip_delta_sign ? -mom.delta[e].mean : mom.delta[e].mean;
    const double se = std::hypot(mom.delta[e].se, stein[e].se);
    if (std::abs(trace - stein[e].mean) > 3.0 * se + 1e-12)
      return "environment " + std::to_string(e + 1) + ": trace " + std::to_string(trace) +
             " vs Stein " + std::to_string(stein[e].mean) + " (se " + std::to_string(se) + ")";
  }
  return {};
}

std::string check_h_fixed(const SelfcheckOptions& o) {
  const auto models = small_models(o.seed, 1.0, 1.0);
  MCSettings mc;
  mc.draws = 200;
  mc.seed = o.seed;
  mc.threads = o.threads;
  const auto fp = solve_stack_fixed_point(models, models[0].lambda, mc);
  const auto h = evaluate_H_map(Vec::Ones(2), fp, models, mc);
  for (int e = 0; e < 2; ++e)
    if (std::abs(h.value[e] - 1.0) > 3.0 * h.se[e] + 1e-9)
      return "H_" + std::to_string(e + 1) + "(1) = " + std::to_string(h.value[e]);
  return {};
}

std::string check_trivial(const SelfcheckOptions& o) {
  const auto models = small_models(o.seed, 0.0, 1e6);
  MCSettings mc;
  mc.draws = 50;
  mc.seed = o.seed;
  const auto fp = solve_stack_fixed_point(models, models[0].lambda, mc);
  if (!fp.converged) return "did not converge";
  for (int e = 0; e < 2; ++e) {
    if (std::abs(fp.tau[e] - 1.0) > 1e-12) return "tau not equal to the noise level";
    if (fp.delta_bar[e] != 0.0) return "delta_bar not zero";
    if (std::abs(fp.varpi[e] - 0.5) > 1e-12) return "varpi not equal to the weights";
  }
  if (std::abs(fp.theta - 1.0) > 1e-12) return "theta not one";
  return {};
}

std::string check_determinism(const SelfcheckOptions& o) {
  const auto models = small_models(o.seed, 1.0, 1.0);
  MCSettings mc;
  mc.draws = 60;
  mc.seed = o.seed;
  mc.threads = 1;
  const auto a = solve_stack_fixed_point(models, models[0].lambda, mc);
  mc.threads = 3;
  const auto b = solve_stack_fixed_point(models, models[0].lambda, mc);
  if (a.tau != b.tau || a.varpi != b.varpi || a.theta != b.theta)
    return "results depend on the thread count";
  return {};
}

}  // namespace

int cmd_selfcheck(const SelfcheckOptions& opts, std::ostream& out) {
  const std::vector<Check> checks = {
      {"prox-sign-pattern-oracle", [&] { return check_prox(opts.seed); }},
      {"stein-vs-trace-delta", [&] { return check_stein(opts); }},
      {"h-map-fixed-at-one", [&] { return check_h_fixed(opts); }},
      {"trivial-fixed-point", [&] { return check_trivial(opts); }},
      {"thread-count-determinism", [&] { return check_determinism(opts); }},
  };
  int failed = 0;
  for (const auto& c : checks) {
    std::string msg;
    try {
      msg = c.run();
    } catch (const std::exception& e) {
      msg = std::string("exception: ") + e.what();
    }
    if (msg.empty()) {
      out << "PASS " << c.name << '\n';
    } else {
      out << "FAIL " << c.name << ": " << msg << '\n';
      ++failed;
    }
  }
  out << (failed == 0 ? "selfcheck: all checks passed" : "selfcheck: " + std::to_string(failed) + " check(s) failed")
      << '\n';
  return failed == 0 ? 0 : 1;
}

}  // namespace glamp
