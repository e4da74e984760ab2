#pragma once

#include <functional>
#include <span>
#include <string>

#include "glamp/model.hpp"
#include "glamp/prox.hpp"
#include "glamp/state_evo.hpp"

namespace glamp {

/// Per-coordinate functionals of an estimate.  Built-in names:
///   mse-vs-beta1, mse-vs-beta<e> (1-based e), support-fraction,
///   inner-product-with-beta1.
/// A custom callback receives (estimate, betas) and must return a value
/// already divided by p; pseudo-Lipschitz behaviour is the caller's concern.
/// support-fraction is a diagnostic: it is not pseudo-Lipschitz, and its
/// prediction rests on the support identity rather than the risk theorems.
struct Functional {
  enum class Kind { mse, support_fraction, inner_product, custom };
  Kind kind = Kind::mse;
  int env = 0;  // 0-based environment the functional refers to
  std::string name = "mse-vs-beta1";
  std::function<double(const Vec&, std::span<const Vec>)> custom;

  static Functional parse(const std::string& name);
  double operator()(const Vec& estimate, std::span<const Vec> betas) const;
};

struct Estimate {
  double value = 0.0;
  double se = 0.0;
  int n = 0;
};

Estimate predict_risk_stack(const StackFixedPoint& fp, std::span<const EnvironmentModel> models,
                            const Functional& phi, const MCSettings& mc);

/// Independent Gaussians across environments; the averaging weights are the
/// environment weights pi_e, which must sum to one.
Estimate predict_risk_average(std::span<const IndividualFixedPoint> fps,
                              std::span<const EnvironmentModel> models, const Functional& phi,
                              const MCSettings& mc);

Estimate predict_risk_second_step(const StackFixedPoint& stack, const SecondStepFixedPoint& second,
                                  std::span<const EnvironmentModel> models, const Functional& phi,
                                  const MCSettings& mc);

Estimate empirical_risk(std::span<const Vec> estimates, std::span<const Vec> betas,
                        const Functional& phi);

struct RiskReport {
  std::string functional;
  double theory_value = 0.0;
  double theory_se = 0.0;
  double empirical_value = 0.0;
  double empirical_se = 0.0;
  int n_theory_draws = 0;
  int n_design_replicates = 0;
  std::string fingerprint;
};

/// 64-bit FNV-1a digest of a canonical settings string, as 16 hex digits.
std::string fingerprint(std::string_view canonical_settings);

}  // namespace glamp
