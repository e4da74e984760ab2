#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "glamp/estimators.hpp"
#include "glamp/model.hpp"
#include "glamp/prox.hpp"

namespace glamp {

struct SweepSpec {
  std::string param;
  std::vector<double> values;
  int environment = 0;  // 1-based; 0 means "all applicable environments"
};

struct ReplicateSpec {
  int design = 20;
  int mc = 400;
};

struct EstimatorSpec {
  EstimatorKind kind = EstimatorKind::stack;
  SecondStepPenalty penalty;  // second-step kinds only
  std::string label() const;
};

struct SolverSpec {
  double damping = 0.5;
  double tol = 1e-3;
  int max_outer = 200;
  bool common_random_numbers = true;
  double prox_tol = 1e-8;
};

struct ExperimentConfig {
  std::string id = "experiment";
  int p = 0;
  std::vector<EnvironmentSpec> environments;
  std::optional<SweepSpec> sweep;
  ReplicateSpec replicates;
  std::uint64_t seed = 0;
  std::vector<EstimatorSpec> estimators{EstimatorSpec{}};
  SolverSpec solver;
  std::string functional = "mse-vs-beta1";
  nlohmann::json source;  // the input document, kept for fingerprinting
};

/// Sweep parameters understood by apply_sweep.
const std::vector<std::string>& sweep_parameters();

ExperimentConfig parse_config(const nlohmann::json& doc);
ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig load_config(const std::string& path);

/// The configuration at one point of its sweep axis.
ExperimentConfig apply_sweep(const ExperimentConfig& cfg, double value);

/// Lambda vector shared by the stacked and second-step estimators; they
/// require every environment to carry the same lambda specification.
Vec common_lambda(const std::vector<EnvironmentModel>& models);

}  // namespace glamp
