#include "glamp/experiment.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <ostream>
#include <sstream>

#include "glamp/error.hpp"
#include "glamp/estimators.hpp"
#include "glamp/parallel.hpp"

namespace glamp {

using nlohmann::json;

ExperimentConfig with_overrides(ExperimentConfig cfg, const RunOptions& opts) {
  if (opts.seed) cfg.seed = *opts.seed;
  if (opts.mc) cfg.replicates.mc = *opts.mc;
  if (opts.design_reps) cfg.replicates.design = *opts.design_reps;
  return cfg;
}

MCSettings mc_settings(const ExperimentConfig& cfg, const RunOptions& opts) {
  MCSettings mc;
  mc.draws = cfg.replicates.mc;
  mc.seed = cfg.seed;
  mc.common_random_numbers = cfg.solver.common_random_numbers;
  mc.threads = opts.threads;
  mc.prox.tol = cfg.solver.prox_tol;
  return mc;
}

FixedPointOptions fixed_point_options(const ExperimentConfig& cfg) {
  FixedPointOptions o;
  o.damping = cfg.solver.damping;
  o.tol = cfg.solver.tol;
  o.max_outer = cfg.solver.max_outer;
  return o;
}

namespace {

bool is_second_step(EstimatorKind k) {
  return k == EstimatorKind::second_step_joint || k == EstimatorKind::second_step_adaptive;
}

std::string fmt(double x) {
  if (!std::isfinite(x)) return std::isnan(x) ? "nan" : (x > 0 ? "inf" : "-inf");
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c == '\n' ? ' ' : c;
  }
  return out + "\"";
}

json to_json(const Vec& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

json stack_json(const StackFixedPoint& fp, std::span<const EnvironmentModel> models) {
  const auto rep = check_contraction(fp, models);
  json j;
  j["tau"] = to_json(fp.tau);
  j["varpi"] = to_json(fp.varpi);
  j["theta"] = fp.theta;
  j["delta_bar"] = to_json(fp.delta_bar);
  j["delta_bar_se"] = to_json(fp.delta_bar_se);
  j["residuals"] = fp.residuals;
  j["residual_se"] = fp.residual_se;
  j["residual"] = fp.residual;
  j["iterations"] = fp.iterations;
  j["converged"] = fp.converged;
  j["initial_tau"] = to_json(fp.initial.tau);
  j["contraction"] = {{"kappa_delta_margin", to_json(rep.kappa_delta_margin)},
                      {"delta_sum", rep.delta_sum},
                      {"delta_sum_se", rep.delta_sum_se},
                      {"ok", rep.ok},
                      {"violations", rep.violations}};
  return j;
}

json second_json(const SecondStepFixedPoint& fp, std::span<const EnvironmentModel> models) {
  const auto rep = check_contraction(fp, models);
  json j;
  j["tau_rt"] = fp.tau_rt;
  j["zeta"] = fp.zeta;
  j["theta_rt"] = fp.theta_rt;
  j["gamma_ro"] = fp.gamma_ro;
  j["gamma_ro_bar"] = fp.gamma_ro_bar;
  j["gamma_ro_se"] = fp.gamma_ro_se;
  j["gamma_rt"] = fp.gamma_rt;
  j["gamma_rt_se"] = fp.gamma_rt_se;
  j["residuals"] = fp.residuals;
  j["residual_se"] = fp.residual_se;
  j["residual"] = fp.residual;
  j["zeta_clamped"] = fp.zeta_clamped;
  j["iterations"] = fp.iterations;
  j["converged"] = fp.converged;
  j["contraction"] = {{"kappa_gamma_rt_margin", rep.kappa_delta_margin[0]},
                      {"ok", rep.ok},
                      {"violations", rep.violations}};
  return j;
}

const char* error_type(const std::exception& e) {
  if (dynamic_cast<const ContractionViolation*>(&e)) return "contraction-violation";
  if (dynamic_cast<const DivergenceError*>(&e)) return "divergence";
  if (dynamic_cast<const NonConvergenceError*>(&e)) return "non-convergence";
  if (dynamic_cast<const NumericalError*>(&e)) return "numerical";
  if (dynamic_cast<const ConfigError*>(&e)) return "config";
  if (dynamic_cast<const ModelError*>(&e)) return "model";
  return "internal";
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ModelError*>(&e)) return 2;
  return 1;
}

/// Runs fn, mapping exceptions to exit codes and a machine-readable error line.
template <class F>
int guarded(std::ostream& err, F&& fn) {
  try {
    return fn();
  } catch (const std::exception& e) {
    json j = {{"error", {{"type", error_type(e)}, {"message", e.what()}}}};
    err << j.dump() << '\n';
    return exit_code_for(e);
  }
}

void write_to(const std::string& path, std::ostream& fallback, const std::string& text) {
  if (path.empty()) {
    fallback << text;
    return;
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open output file '" + path + "'");
  f << text;
}

std::vector<double> all_weights(const std::vector<EnvironmentModel>& models) {
  std::vector<double> w;
  for (const auto& m : models) w.push_back(m.weight);
  return w;
}

}  // namespace

TheoryBundle solve_theory(const ExperimentConfig& cfg, const EstimatorSpec& est,
                          const MCSettings& mc) {
  TheoryBundle tb;
  tb.models = build_models(cfg.environments, cfg.p, cfg.seed);
  const FixedPointOptions fo = fixed_point_options(cfg);
  if (est.kind == EstimatorKind::average) {
    for (std::size_t e = 0; e < tb.models.size(); ++e)
      tb.individual.push_back(solve_individual_fixed_point(tb.models, e, mc, fo));
    return tb;
  }
  tb.stack = solve_stack_fixed_point(tb.models, common_lambda(tb.models), mc, fo);
  if (is_second_step(est.kind))
    tb.second = solve_second_step_fixed_point(*tb.stack, tb.models, est.penalty, mc, fo);
  return tb;
}

Estimate theory_risk(const ExperimentConfig& cfg, const EstimatorSpec& est,
                     const TheoryBundle& tb, const MCSettings& mc) {
  const Functional phi = Functional::parse(cfg.functional);
  if (est.kind == EstimatorKind::average)
    return predict_risk_average(tb.individual, tb.models, phi, mc);
  if (is_second_step(est.kind)) return predict_risk_second_step(*tb.stack, *tb.second, tb.models, phi, mc);
  return predict_risk_stack(*tb.stack, tb.models, phi, mc);
}

std::vector<Vec> simulate_estimates(const ExperimentConfig& cfg, const EstimatorSpec& est,
                                    const std::vector<EnvironmentModel>& models, int threads) {
  const int R = cfg.replicates.design;
  std::vector<Vec> out(static_cast<std::size_t>(R));
  ProxOptions po;
  po.tol = cfg.solver.prox_tol;
  const auto weights = all_weights(models);
  parallel_for(out.size(), threads, [&](std::size_t r) {
    const auto envs = generate_environments(models, cfg.seed, r);
    auto check = [&](const EstimateRecord& rec) {
      if (!rec.converged)
        throw NonConvergenceError("direct solver did not converge in design replicate " + std::to_string(r));
    };
    if (est.kind == EstimatorKind::average) {
      std::vector<Vec> each;
      for (std::size_t e = 0; e < envs.size(); ++e) {
        if (models[e].weight == 0.0) {
          each.push_back(Vec::Zero(cfg.p));
          continue;
        }
        auto rec = solve_individual_lasso(envs[e], models[e].lambda, po);
        check(rec);
        each.push_back(std::move(rec.beta_hat));
      }
      out[r] = model_average(each, weights);
      return;
    }
    auto first = solve_stacked_lasso(envs, common_lambda(models), po);
    check(first);
    if (!is_second_step(est.kind)) {
      out[r] = std::move(first.beta_hat);
      return;
    }
    auto second = solve_second_step(envs[0], first.beta_hat, est.penalty, po);
    check(second);
    out[r] = std::move(second.beta_hat);
  });
  return out;
}

std::vector<ResultRow> run_experiment(const ExperimentConfig& cfg_in, const RunOptions& opts) {
  const ExperimentConfig cfg = with_overrides(cfg_in, opts);
  if (!cfg.sweep) throw ConfigError("sweep: the experiment command needs a sweep axis");
  std::vector<ResultRow> rows;
  for (double value : cfg.sweep->values) {
    const ExperimentConfig pt = apply_sweep(cfg, value);
    const MCSettings mc = mc_settings(pt, opts);
    for (const auto& est : pt.estimators) {
      const auto t0 = std::chrono::steady_clock::now();
      ResultRow row;
      row.experiment_id = cfg.id;
      row.sweep_param = cfg.sweep->param;
      row.sweep_value = value;
      row.estimator = est.label();
      row.r_design = pt.replicates.design;
      row.r_mc = pt.replicates.mc;
      row.seed = pt.seed;
      row.mse_theory = row.mse_theory_se = row.mse_empirical = row.mse_empirical_se =
          std::numeric_limits<double>::quiet_NaN();
      try {
        const TheoryBundle tb = solve_theory(pt, est, mc);
        bool converged = true;
        if (tb.stack) converged = converged && tb.stack->converged;
        if (tb.second) converged = converged && tb.second->converged;
        for (const auto& f : tb.individual) converged = converged && f.converged;
        if (!converged) row.error = "fixed point did not reach tolerance";
        const Estimate th = theory_risk(pt, est, tb, mc);
        row.mse_theory = th.value;
        row.mse_theory_se = th.se;
        const auto ests = simulate_estimates(pt, est, tb.models, opts.threads);
        std::vector<Vec> betas;
        for (const auto& m : tb.models) betas.push_back(m.beta);
        const Estimate em = empirical_risk(ests, betas, Functional::parse(pt.functional));
        row.mse_empirical = em.value;
        row.mse_empirical_se = em.se;
      } catch (const ConfigError&) {
        throw;
      } catch (const std::exception& e) {
        row.error = std::string(error_type(e)) + ": " + e.what();
      }
      row.wall_time_s =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

void write_results_csv(std::ostream& out, const std::vector<ResultRow>& rows, bool timing) {
  out << "schema_version,experiment_id,sweep_param,sweep_value,estimator,mse_theory,"
         "mse_theory_se,mse_empirical,mse_empirical_se,R_design,R_mc,seed,error";
  if (timing) out << ",wall_time_s";
  out << '\n';
  for (const auto& r : rows) {
    out << kCsvSchemaVersion << ',' << csv_escape(r.experiment_id) << ',' << csv_escape(r.sweep_param)
        << ',' << fmt(r.sweep_value) << ',' << r.estimator << ','
        << (r.has_theory ? fmt(r.mse_theory) : "") << ','
        << (r.has_theory ? fmt(r.mse_theory_se) : "") << ','
        << (r.has_empirical ? fmt(r.mse_empirical) : "") << ','
        << (r.has_empirical ? fmt(r.mse_empirical_se) : "") << ',' << r.r_design << ','
        << r.r_mc << ',' << r.seed << ',' << csv_escape(r.error);
    if (timing) out << ',' << fmt(r.wall_time_s);
    out << '\n';
  }
}

// ---------------------------------------------------------------------------

int cmd_fixed_point(const std::string& config_path, const RunOptions& opts,
                    const std::string& out_path, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const ExperimentConfig cfg = with_overrides(load_config(config_path), opts);
    const MCSettings mc = mc_settings(cfg, opts);
    const FixedPointOptions fo = fixed_point_options(cfg);
    const auto models = build_models(cfg.environments, cfg.p, cfg.seed);
    json doc;
    doc["seed"] = cfg.seed;
    doc["R_mc"] = mc.draws;
    bool need_stack = false, need_ind = false;
    std::optional<SecondStepPenalty> penalty;
    for (const auto& e : cfg.estimators) {
      if (e.kind == EstimatorKind::average) need_ind = true;
      else need_stack = true;
      if (is_second_step(e.kind)) penalty = e.penalty;
    }
    bool converged = true;
    if (need_stack) {
      const auto fp = solve_stack_fixed_point(models, common_lambda(models), mc, fo);
      doc["stack"] = stack_json(fp, models);
      converged = converged && fp.converged;
      if (penalty) {
        const auto sp = solve_second_step_fixed_point(fp, models, *penalty, mc, fo);
        doc["second_step"] = second_json(sp, models);
        converged = converged && sp.converged;
      }
    }
    if (need_ind) {
      doc["individual"] = json::array();
      for (std::size_t e = 0; e < models.size(); ++e) {
        const auto fp = solve_individual_fixed_point(models, e, mc, fo);
        json j = stack_json(fp.as_stack, std::span<const EnvironmentModel>(&models[e], 1));
        j["environment"] = e + 1;
        doc["individual"].push_back(j);
        converged = converged && fp.converged;
      }
    }
    if (!converged)
      doc["error"] = {{"type", "non-convergence"}, {"message", "fixed point did not reach tolerance"}};
    write_to(out_path, out, doc.dump(2) + "\n");
    return converged ? 0 : 1;
  });
}

int cmd_predict(const std::string& config_path, const RunOptions& opts, const std::string& out_path,
                std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const ExperimentConfig cfg = with_overrides(load_config(config_path), opts);
    const MCSettings mc = mc_settings(cfg, opts);
    std::vector<ResultRow> rows;
    for (const auto& est : cfg.estimators) {
      ResultRow row;
      row.experiment_id = cfg.id;
      row.estimator = est.label();
      row.r_mc = mc.draws;
      row.seed = cfg.seed;
      row.sweep_value = std::numeric_limits<double>::quiet_NaN();
      row.has_empirical = false;
      const TheoryBundle tb = solve_theory(cfg, est, mc);
      const Estimate th = theory_risk(cfg, est, tb, mc);
      row.mse_theory = th.value;
      row.mse_theory_se = th.se;
      rows.push_back(row);
    }
    std::ostringstream ss;
    write_results_csv(ss, rows, false);
    write_to(out_path, out, ss.str());
    return 0;
  });
}

int cmd_simulate(const std::string& config_path, const RunOptions& opts, const std::string& out_path,
                 std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const ExperimentConfig cfg = with_overrides(load_config(config_path), opts);
    const auto models = build_models(cfg.environments, cfg.p, cfg.seed);
    std::vector<Vec> betas;
    for (const auto& m : models) betas.push_back(m.beta);
    std::vector<ResultRow> rows;
    for (const auto& est : cfg.estimators) {
      ResultRow row;
      row.experiment_id = cfg.id;
      row.estimator = est.label();
      row.r_design = cfg.replicates.design;
      row.seed = cfg.seed;
      row.sweep_value = std::numeric_limits<double>::quiet_NaN();
      row.has_theory = false;
      const auto ests = simulate_estimates(cfg, est, models, opts.threads);
      const Estimate em = empirical_risk(ests, betas, Functional::parse(cfg.functional));
      row.mse_empirical = em.value;
      row.mse_empirical_se = em.se;
      rows.push_back(row);
    }
    std::ostringstream ss;
    write_results_csv(ss, rows, false);
    write_to(out_path, out, ss.str());
    return 0;
  });
}

namespace {
constexpr int kAmpAgreementSteps = 50;
constexpr double kAmpAgreementTol = 1e-4;
}  // namespace

int cmd_amp(const std::string& config_path, const RunOptions& opts, const std::string& out_path,
            std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const ExperimentConfig cfg = with_overrides(load_config(config_path), opts);
    const MCSettings mc = mc_settings(cfg, opts);
    const EstimatorSpec& est = cfg.estimators.front();
    const TheoryBundle tb = solve_theory(cfg, est, mc);
    const auto envs = generate_environments(tb.models, cfg.seed, 0);
    ProxOptions po;
    po.tol = cfg.solver.prox_tol;
    AmpOptions ao;
    ao.onsager = opts.onsager;
    ao.seed = cfg.seed;
    ao.keep_iterates = false;
    IterateTrace trace;
    std::string message;
    bool failed = false;
    std::vector<std::pair<std::vector<double>, std::vector<double>>> tracking;  // (v_norm2, tau2)
    double final_dist = 0.0;
    auto note_dist = [&](const IterateTrace& tr) {
      const auto d = tr.series("dist_target", 0);
      if (!d.empty() && std::isfinite(d.back())) final_dist = std::max(final_dist, d.back());
    };

    auto collect = [&](const IterateTrace& tr, int environments) {
      for (int e = 1; e <= environments; ++e)
        tracking.emplace_back(tr.series("v_norm2", e), tr.series("tau2", e));
    };
    if (est.kind == EstimatorKind::average) {
      for (std::size_t e = 0; e < envs.size(); ++e) {
        const auto direct = solve_individual_lasso(envs[e], tb.models[e].lambda, po);
        ao.target = &direct.beta_hat;
        const auto res = run_individual_glamp(envs[e], tb.individual[e], opts.steps, ao);
        for (const auto& r : res.trace.records())
          trace.add(r.t, r.quantity, static_cast<int>(e) + 1, r.value);
        note_dist(res.trace);
        if (res.status != AmpStatus::ok) {
          failed = true;
          message = res.message;
        }
      }
      for (std::size_t e = 0; e < envs.size(); ++e)
        tracking.emplace_back(trace.series("v_norm2", static_cast<int>(e) + 1),
                              trace.series("tau2", static_cast<int>(e) + 1));
    } else {
      const auto first = solve_stacked_lasso(envs, tb.stack->lambda, po);
      if (!is_second_step(est.kind)) {
        ao.target = &first.beta_hat;
        const auto res = run_stack_glamp(envs, *tb.stack, opts.steps, ao);
        trace = res.trace;
        collect(res.trace, static_cast<int>(envs.size()));
        note_dist(res.trace);
        if (res.status != AmpStatus::ok) {
          failed = true;
          message = res.message;
        }
      } else {
        const auto direct = solve_second_step(envs[0], first.beta_hat, est.penalty, po);
        ao.target = &direct.beta_hat;
        const auto res = run_induced_second_step_amp(envs[0], first.beta_hat, *tb.stack, *tb.second,
                                                      opts.steps, ao);
        trace = res.trace;
        collect(res.trace, 1);
        note_dist(res.trace);
        if (res.status != AmpStatus::ok) {
          failed = true;
          message = res.message;
        }
      }
    }
    std::ostringstream ss;
    trace.write_csv(ss);
    write_to(out_path, out, ss.str());
    if (failed) {
      err << json{{"error", {{"type", "divergence"}, {"message", message}}}}.dump() << '\n';
      return 1;
    }
    // A long run that has not reached the direct estimator means the
    // iteration is not solving the estimator's optimality conditions.
    if (opts.steps >= kAmpAgreementSteps && final_dist > kAmpAgreementTol) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.3g", final_dist);
      err << json{{"error",
                   {{"type", "solver-disagreement"},
                    {"message", std::string("(1/p)||iterate - direct estimator||^2 = ") + buf +
                                    " after " + std::to_string(opts.steps) + " steps"}}}}
                 .dump()
          << '\n';
      return 1;
    }
    // State-evolution sanity check over the early window.
    for (const auto& [vn, t2] : tracking) {
      for (std::size_t t = 5; t < vn.size() && t <= 20; ++t) {
        if (std::isnan(vn[t]) || std::isnan(t2[t])) continue;
        if (std::abs(vn[t] / t2[t] - 1.0) > 0.2) {
          err << json{{"error",
                       {{"type", "state-evolution"},
                        {"message", "(1/p)||v^t||^2 departs from tau^2 by more than 20% at t = " +
                                        std::to_string(t)}}}}
                     .dump()
              << '\n';
          return 1;
        }
      }
    }
    return 0;
  });
}

int cmd_experiment(const std::string& config_path, const RunOptions& opts, const std::string& out_path,
                   const std::string& svg_path, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const ExperimentConfig cfg = load_config(config_path);
    const auto rows = run_experiment(cfg, opts);
    std::ostringstream ss;
    write_results_csv(ss, rows, opts.timing);
    write_to(out_path, out, ss.str());
    if (!svg_path.empty()) {
      std::ofstream f(svg_path, std::ios::binary);
      if (!f) throw ConfigError("cannot open SVG output '" + svg_path + "'");
      f << render_svg_from_csv(ss.str());
    }
    return 0;
  });
}

}  // namespace glamp
