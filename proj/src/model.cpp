#include "glamp/model.hpp"

#include <cmath>
#include <string>

#include "glamp/error.hpp"
#include "glamp/rng.hpp"

namespace glamp {

Vec Covariance::apply(const Vec& v) const {
  if (diagonal) return sigma.diagonal().cwiseProduct(v);
  return sigma * v;
}

Vec Covariance::apply_sqrt(const Vec& v) const {
  if (diagonal) return sqrt.diagonal().cwiseProduct(v);
  return sqrt * v;
}

double EnvironmentModel::sigma_norm2(const Vec& v) const {
  return v.dot(cov.apply(v)) / p;
}

double EnvironmentModel::sigma_inner(const Vec& a, const Vec& b) const {
  return a.dot(cov.apply(b)) / p;
}

Mat covariance_sqrt(const Mat& sigma) {
  if (sigma.rows() != sigma.cols() || sigma.rows() == 0)
    throw ModelError("covariance must be a non-empty square matrix");
  const double scale = std::max(1.0, sigma.cwiseAbs().maxCoeff());
  if ((sigma - sigma.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale)
    throw ModelError("covariance must be symmetric");
  const Mat sym = 0.5 * (sigma + sigma.transpose());
  Eigen::SelfAdjointEigenSolver<Mat> eig(sym);
  if (eig.info() != Eigen::Success) throw ModelError("eigendecomposition failed");
  const Vec& ev = eig.eigenvalues();
  if (ev.minCoeff() <= 0.0)
    throw ModelError("covariance is not positive definite (min eigenvalue " +
                     std::to_string(ev.minCoeff()) + ")");
  const Mat& u = eig.eigenvectors();
  Mat s = u * ev.cwiseSqrt().asDiagonal() * u.transpose();
  return 0.5 * (s + s.transpose());
}

Covariance make_covariance(const CovarianceSpec& spec, int p, double eigen_bound) {
  if (p < 1) throw ModelError("dimension p must be positive");
  Covariance c;
  switch (spec.kind) {
    case CovarianceSpec::Kind::identity:
      c.sigma = Mat::Identity(p, p);
      c.sqrt = Mat::Identity(p, p);
      c.diagonal = true;
      return c;
    case CovarianceSpec::Kind::two_eigenvalue: {
      if (p % 2 != 0) throw ModelError("two-eigenvalue covariance requires even p");
      if (!(spec.chi > 0.0)) throw ModelError("two-eigenvalue chi must be positive");
      const double hi = std::max(spec.chi, 1.0 / spec.chi);
      if (hi > eigen_bound) throw ModelError("covariance eigenvalues outside [1/c1, c1]");
      Vec d(p);
      d.head(p / 2).setConstant(spec.chi);
      d.tail(p / 2).setConstant(1.0 / spec.chi);
      c.sigma = d.asDiagonal();
      c.sqrt = d.cwiseSqrt().asDiagonal();
      c.diagonal = true;
      return c;
    }
    case CovarianceSpec::Kind::dense: {
      if (spec.matrix.rows() != p || spec.matrix.cols() != p)
        throw ModelError("dense covariance must be p x p");
      c.sigma = 0.5 * (spec.matrix + spec.matrix.transpose());
      c.sqrt = covariance_sqrt(spec.matrix);
      Eigen::SelfAdjointEigenSolver<Mat> eig(c.sigma, Eigen::EigenvaluesOnly);
      const Vec& ev = eig.eigenvalues();
      if (ev.maxCoeff() > eigen_bound || ev.minCoeff() < 1.0 / eigen_bound)
        throw ModelError("covariance eigenvalues outside [1/c1, c1]");
      const Mat off = c.sigma - Mat(c.sigma.diagonal().asDiagonal());
      c.diagonal = off.cwiseAbs().maxCoeff() == 0.0;
      return c;
    }
  }
  throw ModelError("unknown covariance kind");
}

std::vector<Vec> draw_signals(std::span<const EnvironmentSpec> specs, int p,
                              std::uint64_t seed) {
  std::vector<Vec> out;
  out.reserve(specs.size());
  for (std::size_t e = 0; e < specs.size(); ++e) {
    const SignalSpec& s = specs[e].signal;
    Vec beta(p);
    switch (s.kind) {
      case SignalSpec::Kind::iid_gaussian: {
        if (s.variance < 0.0) throw ModelError("signal variance must be non-negative");
        auto rs = make_stream(seed, "signal", e);
        rs.fill_normal(beta, std::sqrt(s.variance));
        break;
      }
      case SignalSpec::Kind::shifted: {
        if (s.base < 0 || static_cast<std::size_t>(s.base) >= e)
          throw ModelError("shifted signal must reference an earlier environment");
        if (s.variance < 0.0) throw ModelError("shift variance must be non-negative");
        auto rs = make_stream(seed, "signal-shift", e);
        Vec shift(p);
        rs.fill_normal(shift, std::sqrt(s.variance * s.shift_scale / 2.0));
        beta = out[static_cast<std::size_t>(s.base)] + shift;
        break;
      }
      case SignalSpec::Kind::fixed:
        if (s.values.size() != p) throw ModelError("fixed signal must have length p");
        beta = s.values;
        break;
    }
    out.push_back(std::move(beta));
  }
  return out;
}

std::vector<EnvironmentModel> build_models(std::span<const EnvironmentSpec> specs,
                                           int p, std::uint64_t seed) {
  if (specs.empty()) throw ModelError("at least one environment is required");
  auto betas = draw_signals(specs, p, seed);
  std::vector<EnvironmentModel> models;
  models.reserve(specs.size());
  for (std::size_t e = 0; e < specs.size(); ++e) {
    const auto& s = specs[e];
    if (s.n < 1) throw ModelError("sample count n must be positive");
    if (s.noise_variance < 0.0) throw ModelError("noise variance must be non-negative");
    if (s.weight < 0.0) throw ModelError("environment weight must be non-negative");
    EnvironmentModel m;
    m.n = s.n;
    m.p = p;
    m.kappa = static_cast<double>(p) / s.n;
    m.cov = make_covariance(s.covariance, p);
    m.beta = std::move(betas[e]);
    m.noise_variance = s.noise_variance;
    m.weight = s.weight;
    if (s.lambda_values.size() > 0) {
      if (s.lambda_values.size() != p) throw ModelError("lambda array must have length p");
      m.lambda = s.lambda_values;
    } else {
      m.lambda = Vec::Constant(p, s.lambda);
    }
    if (!(m.lambda.minCoeff() > 0.0)) throw ModelError("lambda entries must be positive");
    models.push_back(std::move(m));
  }
  return models;
}

Environment generate_environment(const EnvironmentModel& model, std::uint64_t seed,
                                 std::uint64_t replicate, std::size_t env_index) {
  Environment env;
  env.model = model;
  const int n = model.n;
  const int p = model.p;
  env.z_design.resize(n, p);
  auto zs = make_stream(seed, "design", replicate, env_index);
  zs.fill_normal(env.z_design, 1.0 / std::sqrt(static_cast<double>(n)));
  env.w.resize(n);
  auto ws = make_stream(seed, "noise", replicate, env_index);
  ws.fill_normal(env.w, std::sqrt(model.noise_variance));
  env.x_design = model.cov.diagonal
                     ? Mat(env.z_design * model.cov.sqrt.diagonal().asDiagonal())
                     : Mat(env.z_design * model.cov.sqrt);
  const Vec beta_tilde = model.cov.apply_sqrt(model.beta);
  env.y = env.z_design * beta_tilde + env.w;
  return env;
}

std::vector<Environment> generate_environments(std::span<const EnvironmentModel> models,
                                               std::uint64_t seed,
                                               std::uint64_t replicate) {
  std::vector<Environment> out;
  out.reserve(models.size());
  for (std::size_t e = 0; e < models.size(); ++e)
    out.push_back(generate_environment(models[e], seed, replicate, e));
  return out;
}

}  // namespace glamp
