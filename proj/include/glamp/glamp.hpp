#pragma once

#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "glamp/model.hpp"
#include "glamp/prox.hpp"
#include "glamp/rng.hpp"
#include "glamp/state_evo.hpp"

namespace glamp {

/// Long-format per-iteration record: (t, quantity, environment, value).
/// environment is 1-based, 0 when the quantity is not per-environment.
struct TraceRecord {
  int t = 0;
  std::string quantity;
  int environment = 0;
  double value = 0.0;
};

class IterateTrace {
 public:
  void add(int t, std::string quantity, int environment, double value);
  const std::vector<TraceRecord>& records() const { return records_; }
  /// Values of one quantity for one environment, indexed by t (NaN if absent).
  std::vector<double> series(std::string_view quantity, int environment = 0) const;
  int max_t() const;
  void write_csv(std::ostream& out) const;

 private:
  std::vector<TraceRecord> records_;
};

// ---------------------------------------------------------------------------
// Symmetric GLAMP

/// f_t(x, Y) -> N x q.
using GlampDenoiser = std::function<Mat(const Mat& x, const Mat& y, int t)>;
/// (1/N) sum_j d f_t(x, Y)_{j,:} / d x_{j,:}, a q x q matrix.
using GlampJacobian = std::function<Mat(const Mat& x, const Mat& y, int t)>;

enum class OnsagerMode { analytic, mc_jacobian };

struct SymmetricGlampInstance {
  Mat a;  // N x N symmetric
  GlampDenoiser f;
  GlampJacobian jacobian;  // required for OnsagerMode::analytic
  Mat x0;
  Mat y;
  OnsagerMode onsager_mode = OnsagerMode::analytic;
  int jacobian_rows = 256;  // row subsample for finite differences
};

struct SymmetricGlampResult {
  std::vector<Mat> iterates;    // x^0 .. x^T
  std::vector<Mat> sigma;       // sigma[t] = Sigma^t predicted for x^t (sigma[0] unused)
  std::vector<Mat> onsager;     // onsager[t] = B_{t-1}, the term used to form x^t
  std::vector<Mat> onsager_se;  // MC standard errors of onsager[t]
  IterateTrace trace;
};

/// GOE matrix G + G' with G entries iid N(0, 1/(2N)).
Mat make_goe(int n, RandomStream& stream);

SymmetricGlampResult run_symmetric_glamp(const SymmetricGlampInstance& inst, int steps,
                                         const MCSettings& mc);

/// Finite-difference estimate of the averaged row Jacobian of f at x.
/// Central differences with step 1e-5 (1 + |x_jk|), averaged over `rows`
/// rows taken on a fixed stride (all rows when rows <= 0).
Mat finite_difference_jacobian(const GlampDenoiser& f, const Mat& x, const Mat& y, int t,
                               int rows);

// ---------------------------------------------------------------------------
// Multi-environment instances

struct AmpOptions {
  bool onsager = true;
  std::uint64_t seed = 0;       // fresh Gaussians for the initialization
  bool keep_iterates = true;
  double divergence_factor = 100.0;
  const Vec* target = nullptr;  // direct estimator, for distance tracking
  ProxOptions prox{};
};

enum class AmpStatus { ok, diverged, non_finite };

struct StackAmpResult {
  IterateTrace trace;
  std::vector<Vec> eta;               // eta^0 .. eta^T (when kept)
  std::vector<std::vector<Vec>> v;    // v^t_e, t = 1..T (index 0 empty)
  std::vector<Vec> r_final;
  Vec eta_final;
  std::vector<Vec> v_final;
  AmpStatus status = AmpStatus::ok;
  int last_t = 0;
  std::string message;
};

StackAmpResult run_stack_glamp(std::span<const Environment> envs,
                               const StackFixedPoint& fp, int steps,
                               const AmpOptions& opts = {});

StackAmpResult run_individual_glamp(const Environment& env, const IndividualFixedPoint& fp,
                                    int steps, const AmpOptions& opts = {});

struct SubgradientReport {
  Vec s;                 // the penalty subgradient carried by the iterate
  double grad_norm2 = 0; // ||grad L(eta)||^2 / p
  double max_abs_s = 0;  // max_j |s_j| / lambda_j bound (should be <= 1)
};

/// s^t and the induced loss-subgradient norm for the stacked Lasso.
SubgradientReport subgradient_residual(std::span<const Environment> envs,
                                       const StackFixedPoint& fp, std::span<const Vec> v,
                                       const Vec& eta);

struct SecondStepAmpResult {
  IterateTrace trace;
  std::vector<Vec> xi;  // xi^0 .. xi^T (when kept)
  Vec xi_final;
  Vec v_final;
  AmpStatus status = AmpStatus::ok;
  int last_t = 0;
  std::string message;
};

/// Induced second-step AMP started from the converged first-step estimate.
SecondStepAmpResult run_induced_second_step_amp(const Environment& env1,
                                                const Vec& beta_hat_stack,
                                                const StackFixedPoint& stack,
                                                const SecondStepFixedPoint& second, int steps,
                                                const AmpOptions& opts = {});

/// Second-step analogue of subgradient_residual: |s_j| is measured against
/// lambda_rt (joint) or mu(|beta_hat_j|) (adaptive).
SubgradientReport second_step_subgradient(const Environment& env1, const Vec& beta_hat,
                                          const SecondStepFixedPoint& second, const Vec& v,
                                          const Vec& xi);

struct ConvergenceSummary {
  std::vector<double> ladder;
  std::vector<int> first_below;  // -1 when never reached
  std::vector<double> distance;  // (1/p)||x^t - target||^2
  std::vector<double> cauchy;    // (1/p)||x^{t+1} - x^t||^2
};

ConvergenceSummary track_convergence(std::span<const Vec> iterates, const Vec& target,
                                     std::vector<double> ladder = {1e-2, 1e-3, 1e-4, 1e-6});

}  // namespace glamp
