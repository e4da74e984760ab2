#include <cmath>
#include <ostream>
#include <string>

#include "glamp/error.hpp"
#include "glamp/glamp.hpp"
#include "glamp/parallel.hpp"

namespace glamp {

void IterateTrace::add(int t, std::string quantity, int environment, double value) {
  records_.push_back({t, std::move(quantity), environment, value});
}

std::vector<double> IterateTrace::series(std::string_view quantity, int environment) const {
  std::vector<double> out(static_cast<std::size_t>(max_t() + 1), std::nan(""));
  for (const auto& r : records_)
    if (r.quantity == quantity && r.environment == environment && r.t >= 0)
      out[static_cast<std::size_t>(r.t)] = r.value;
  return out;
}

int IterateTrace::max_t() const {
  int m = -1;
  for (const auto& r : records_) m = std::max(m, r.t);
  return m;
}

void IterateTrace::write_csv(std::ostream& out) const {
  out << "t,quantity,environment,value\n";
  char buf[64];
  for (const auto& r : records_) {
    std::snprintf(buf, sizeof buf, "%.17g", r.value);
    out << r.t << ',' << r.quantity << ',' << r.environment << ',' << buf << '\n';
  }
}

Mat make_goe(int n, RandomStream& stream) {
  Mat g(n, n);
  stream.fill_normal(g, 1.0 / std::sqrt(2.0 * n));
  return g + g.transpose();
}

namespace {

Mat psd_sqrt(const Mat& s) {
  Eigen::SelfAdjointEigenSolver<Mat> eig(0.5 * (s + s.transpose()));
  const Vec ev = eig.eigenvalues().cwiseMax(0.0);
  return eig.eigenvectors() * ev.cwiseSqrt().asDiagonal() * eig.eigenvectors().transpose();
}

void check_finite(const Mat& x, int t) {
  if (!x.allFinite()) throw NumericalError("non-finite GLAMP iterate at t = " + std::to_string(t));
}

}  // namespace

Mat finite_difference_jacobian(const GlampDenoiser& f, const Mat& x, const Mat& y, int t,
                               int rows) {
  // rows are taken on a fixed stride, so the estimate is deterministic
  const Eigen::Index n = x.rows();
  const Eigen::Index q = x.cols();
  const Eigen::Index m = rows <= 0 || rows >= n ? n : rows;
  const double stride = static_cast<double>(n) / static_cast<double>(m);
  Mat acc = Mat::Zero(q, q);
  Mat xp = x;
  for (Eigen::Index i = 0; i < m; ++i) {
    const Eigen::Index j = static_cast<Eigen::Index>(std::floor(i * stride));
    for (Eigen::Index k = 0; k < q; ++k) {
      const double h = 1e-5 * (1.0 + std::abs(x(j, k)));
      xp(j, k) = x(j, k) + h;
      const Eigen::RowVectorXd up = f(xp, y, t).row(j);
      xp(j, k) = x(j, k) - h;
      const Eigen::RowVectorXd dn = f(xp, y, t).row(j);
      xp(j, k) = x(j, k);
      acc.col(k) += (up - dn).transpose() / (2.0 * h);
    }
  }
  return acc / static_cast<double>(m);
}

SymmetricGlampResult run_symmetric_glamp(const SymmetricGlampInstance& inst, int steps,
                                         const MCSettings& mc) {
  if (steps < 1) throw ConfigError("GLAMP needs at least one step");
  const Eigen::Index n = inst.a.rows();
  const Eigen::Index q = inst.x0.cols();
  if (inst.a.cols() != n || inst.x0.rows() != n) throw ModelError("GLAMP instance dimensions disagree");
  if ((inst.a - inst.a.transpose()).cwiseAbs().maxCoeff() > 1e-12)
    throw ModelError("GLAMP matrix must be symmetric");
  if (inst.onsager_mode == OnsagerMode::analytic && !inst.jacobian)
    throw ModelError("analytic Onsager mode needs a Jacobian callback");

  SymmetricGlampResult res;
  res.iterates.push_back(inst.x0);
  res.sigma.push_back(Mat::Zero(q, q));
  res.onsager.push_back(Mat::Zero(q, q));
  res.onsager_se.push_back(Mat::Zero(q, q));

  auto record = [&](int t) {
    const Mat& x = res.iterates[static_cast<std::size_t>(t)];
    for (Eigen::Index k = 0; k < q; ++k) {
      const int col = static_cast<int>(k) + 1;
      res.trace.add(t, "x_norm2", col, x.col(k).squaredNorm() / n);
      if (t > 0) {
        const Mat& prev = res.iterates[static_cast<std::size_t>(t - 1)];
        res.trace.add(t, "step", col, (x.col(k) - prev.col(k)).squaredNorm() / n);
        res.trace.add(t, "sigma", col, res.sigma[static_cast<std::size_t>(t)](k, k));
        res.trace.add(t, "onsager", col, res.onsager[static_cast<std::size_t>(t)](k, k));
      }
    }
  };
  record(0);

  Mat f_prev = Mat::Zero(n, q);
  Mat f_cur = inst.f(inst.x0, inst.y, 0);
  check_finite(f_cur, 0);
  // Sigma^1 is the empirical second moment of f_0(x^0).
  Mat sigma_next = f_cur.transpose() * f_cur / static_cast<double>(n);
  Mat b_cur = Mat::Zero(q, q);
  Mat b_se = Mat::Zero(q, q);

  for (int t = 0; t < steps; ++t) {
    Mat x_next = inst.a * f_cur;
    if (t > 0) x_next.noalias() -= f_prev * b_cur.transpose();
    check_finite(x_next, t + 1);
    res.iterates.push_back(x_next);
    res.sigma.push_back(sigma_next);
    res.onsager.push_back(b_cur);
    res.onsager_se.push_back(b_se);
    record(t + 1);
    if (t + 1 == steps) break;

    // State evolution at step t+1: Z ~ rows iid N(0, Sigma^{t+1}).
    const int s = t + 1;
    const Mat root = psd_sqrt(sigma_next);
    const int R = mc.draws;
    std::vector<Mat> jac(static_cast<std::size_t>(R)), second(static_cast<std::size_t>(R));
    parallel_for(static_cast<std::size_t>(R), mc.threads, [&](std::size_t r) {
      auto st = make_stream(mc.seed, "glamp-state-evolution", static_cast<std::uint64_t>(s), r);
      Mat g(n, q);
      st.fill_normal(g);
      const Mat z = g * root;
      const Mat fz = inst.f(z, inst.y, s);
      second[r] = fz.transpose() * fz / static_cast<double>(n);
      jac[r] = inst.onsager_mode == OnsagerMode::analytic
                   ? inst.jacobian(z, inst.y, s)
                   : finite_difference_jacobian(inst.f, z, inst.y, s, inst.jacobian_rows);
    });
    Mat jm = Mat::Zero(q, q), jm2 = Mat::Zero(q, q), sm = Mat::Zero(q, q);
    for (int r = 0; r < R; ++r) {
      jm += jac[static_cast<std::size_t>(r)];
      jm2 += jac[static_cast<std::size_t>(r)].cwiseProduct(jac[static_cast<std::size_t>(r)]);
      sm += second[static_cast<std::size_t>(r)];
    }
    jm /= R;
    sm /= R;
    Mat se = Mat::Zero(q, q);
    if (R > 1) se = ((jm2 / R - jm.cwiseProduct(jm)).cwiseMax(0.0) * (R / (R - 1.0)) / R).cwiseSqrt();
    b_se = se;
    b_cur = jm;
    sigma_next = sm;
    f_prev = std::move(f_cur);
    f_cur = inst.f(x_next, inst.y, s);
    check_finite(f_cur, s);
  }
  return res;
}

}  // namespace glamp
