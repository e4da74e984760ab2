#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "glamp/experiment.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Exact-asymptotics toolkit for transfer-learning Lasso estimators"};
  app.require_subcommand(1);

  glamp::RunOptions opts;
  std::string config, out, svg, onsager = "on";
  std::uint64_t seed = 0;
  int mc = 0, reps = 0;
  bool flip = false;

  auto add_common = [&](CLI::App* sub, bool needs_config) {
    if (needs_config) sub->add_option("config", config, "JSON configuration file")->required();
    sub->add_option("--seed", seed, "master seed (overrides the config)");
    sub->add_option("--threads", opts.threads, "worker threads for replicates and MC draws")
        ->check(CLI::PositiveNumber);
  };
  auto add_run = [&](CLI::App* sub) {
    add_common(sub, true);
    sub->add_option("--mc", mc, "Monte-Carlo draws R_mc")->check(CLI::PositiveNumber);
    sub->add_option("--design-reps", reps, "design replicates R_design")->check(CLI::PositiveNumber);
    sub->add_option("--out", out, "output path (default: stdout)");
  };

  auto* fp = app.add_subcommand("fixed-point", "solve the state-evolution fixed point(s)");
  add_run(fp);
  auto* pr = app.add_subcommand("predict", "theory prediction of the configured functional");
  add_run(pr);
  auto* sim = app.add_subcommand("simulate", "empirical risk over design replicates");
  add_run(sim);
  auto* amp = app.add_subcommand("amp", "run the AMP iteration and write its trace");
  add_run(amp);
  amp->add_option("--steps", opts.steps, "number of AMP steps")->check(CLI::NonNegativeNumber);
  amp->add_option("--onsager", onsager, "Onsager correction (off is a demonstration only)")
      ->check(CLI::IsMember({"on", "off"}));
  auto* ex = app.add_subcommand("experiment", "run a sweep: theory and simulation per point");
  add_run(ex);
  ex->add_option("--svg", svg, "also render an SVG plot from the CSV");
  ex->add_flag("--timing", opts.timing, "append a wall_time_s column");
  auto* sc = app.add_subcommand("selfcheck", "fast invariant suite");
  add_common(sc, false);
  sc->add_flag("--inject-delta-sign-flip", flip, "fault injection for testing")->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  for (auto* sub : {fp, pr, sim, amp, ex, sc})
    if (sub->count("--seed")) opts.seed = seed;
  if (mc > 0) opts.mc = mc;
  if (reps > 0) opts.design_reps = reps;
  opts.onsager = onsager == "on";

  if (*fp) return glamp::cmd_fixed_point(config, opts, out, std::cout, std::cerr);
  if (*pr) return glamp::cmd_predict(config, opts, out, std::cout, std::cerr);
  if (*sim) return glamp::cmd_simulate(config, opts, out, std::cout, std::cerr);
  if (*amp) return glamp::cmd_amp(config, opts, out, std::cout, std::cerr);
  if (*ex) return glamp::cmd_experiment(config, opts, out, svg, std::cout, std::cerr);
  glamp::SelfcheckOptions so;
  so.seed = opts.seed.value_or(0);
  so.threads = opts.threads;
  so.flip_delta_sign = flip;
  return glamp::cmd_selfcheck(so, std::cout);
}
