#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "glamp/config.hpp"
#include "glamp/glamp.hpp"
#include "glamp/risk.hpp"
#include "glamp/state_evo.hpp"

namespace glamp {

inline constexpr int kCsvSchemaVersion = 1;

/// Command-line overrides shared by the subcommands.
struct RunOptions {
  std::optional<std::uint64_t> seed;
  std::optional<int> mc;
  std::optional<int> design_reps;
  int threads = 1;
  bool onsager = true;
  int steps = 100;
  bool timing = false;
};

struct ResultRow {
  std::string experiment_id;
  std::string sweep_param;
  double sweep_value = 0.0;
  std::string estimator;
  double mse_theory = 0.0;
  double mse_theory_se = 0.0;
  double mse_empirical = 0.0;
  double mse_empirical_se = 0.0;
  int r_design = 0;
  int r_mc = 0;
  std::uint64_t seed = 0;
  double wall_time_s = 0.0;
  bool has_theory = true;
  bool has_empirical = true;
  std::string error;
};

/// Applies command-line overrides to a parsed config.
ExperimentConfig with_overrides(ExperimentConfig cfg, const RunOptions& opts);
MCSettings mc_settings(const ExperimentConfig& cfg, const RunOptions& opts);
FixedPointOptions fixed_point_options(const ExperimentConfig& cfg);

/// Everything the theory side needs at one configuration point.
struct TheoryBundle {
  std::vector<EnvironmentModel> models;
  std::optional<StackFixedPoint> stack;
  std::vector<IndividualFixedPoint> individual;
  std::optional<SecondStepFixedPoint> second;
};

TheoryBundle solve_theory(const ExperimentConfig& cfg, const EstimatorSpec& est,
                          const MCSettings& mc);
Estimate theory_risk(const ExperimentConfig& cfg, const EstimatorSpec& est,
                     const TheoryBundle& theory, const MCSettings& mc);
/// Runs R_design replicates and returns the per-replicate estimates.
std::vector<Vec> simulate_estimates(const ExperimentConfig& cfg, const EstimatorSpec& est,
                                    const std::vector<EnvironmentModel>& models, int threads);

/// One row per (sweep value x estimator).  Per-point failures land in the
/// error column and the run continues.
std::vector<ResultRow> run_experiment(const ExperimentConfig& cfg, const RunOptions& opts);

void write_results_csv(std::ostream& out, const std::vector<ResultRow>& rows, bool timing);
std::string render_svg_from_csv(const std::string& csv_text);

int cmd_fixed_point(const std::string& config_path, const RunOptions& opts, const std::string& out_path,
                    std::ostream& out, std::ostream& err);
int cmd_predict(const std::string& config_path, const RunOptions& opts, const std::string& out_path,
                std::ostream& out, std::ostream& err);
int cmd_simulate(const std::string& config_path, const RunOptions& opts, const std::string& out_path,
                 std::ostream& out, std::ostream& err);
int cmd_amp(const std::string& config_path, const RunOptions& opts, const std::string& out_path,
            std::ostream& out, std::ostream& err);
int cmd_experiment(const std::string& config_path, const RunOptions& opts, const std::string& out_path,
                   const std::string& svg_path, std::ostream& out, std::ostream& err);

struct SelfcheckOptions {
  std::uint64_t seed = 0;
  int threads = 1;
  bool flip_delta_sign = false;  // fault injection: negates the trace-form delta
};
int cmd_selfcheck(const SelfcheckOptions& opts, std::ostream& out);

}  // namespace glamp
