#pragma once
// Reference implementations used only by the tests.  They share no code with
// the library's solvers so that agreement is evidence, not tautology.

#include <cmath>
#include <limits>
#include <vector>

#include <Eigen/Dense>

namespace oracle {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

inline double soft(double x, double t) {
  return x > t ? x - t : (x < -t ? x + t : 0.0);
}

inline double objective(const Mat& q, const Vec& c, const Vec& w, const Vec& b) {
  return 0.5 * b.dot(q * b) - c.dot(b) + (w.array() * b.array().abs()).sum();
}

/// Exhaustive search over sign patterns s in {-1,0,1}^p for the minimizer of
/// 1/2 b'Qb - c'b + sum_j w_j |b_j|.  For each pattern the candidate is the
/// stationary point of the smooth problem on the active set; it is accepted
/// when the signs agree and the inactive coordinates satisfy |g_j| <= w_j.
inline Vec sign_pattern_minimizer(const Mat& q, const Vec& c, const Vec& w) {
  const int p = static_cast<int>(c.size());
  long total = 1;
  for (int j = 0; j < p; ++j) total *= 3;
  Vec best = Vec::Zero(p);
  double best_val = std::numeric_limits<double>::infinity();
  for (long code = 0; code < total; ++code) {
    long k = code;
    std::vector<int> sign(p), active;
    for (int j = 0; j < p; ++j, k /= 3) {
      sign[j] = static_cast<int>(k % 3) - 1;
      if (sign[j]) active.push_back(j);
    }
    Vec b = Vec::Zero(p);
    const int a = static_cast<int>(active.size());
    if (a > 0) {
      Mat qa(a, a);
      Vec rhs(a);
      for (int i = 0; i < a; ++i) {
        rhs[i] = c[active[i]] - w[active[i]] * sign[active[i]];
        for (int l = 0; l < a; ++l) qa(i, l) = q(active[i], active[l]);
      }
      const Vec ba = qa.ldlt().solve(rhs);
      bool signs_ok = true;
      for (int i = 0; i < a; ++i) {
        signs_ok = signs_ok && ba[i] * sign[active[i]] > 0.0;
        b[active[i]] = ba[i];
      }
      if (!signs_ok) continue;
    }
    const Vec g = c - q * b;
    bool kkt_ok = true;
    for (int j = 0; j < p; ++j)
      if (!sign[j] && std::abs(g[j]) > w[j] + 1e-10) kkt_ok = false;
    if (!kkt_ok) continue;
    const double val = objective(q, c, w, b);
    if (val < best_val) {
      best_val = val;
      best = b;
    }
  }
  return best;
}

/// FISTA with constant step 1/L, L the top eigenvalue of Q.
inline Vec fista(const Mat& q, const Vec& c, const Vec& w, int iters) {
  const double L = Eigen::SelfAdjointEigenSolver<Mat>(q).eigenvalues().maxCoeff();
  Vec x = Vec::Zero(c.size()), y = x;
  double t = 1.0;
  for (int k = 0; k < iters; ++k) {
    const Vec grad = q * y - c;
    Vec xn = y - grad / L;
    for (Eigen::Index j = 0; j < xn.size(); ++j) xn[j] = soft(xn[j], w[j] / L);
    const double tn = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
    y = xn + ((t - 1.0) / tn) * (xn - x);
    x = std::move(xn);
    t = tn;
  }
  return x;
}

/// Symmetric square root by eigen-decomposition.
inline Mat sqrtm(const Mat& s) {
  Eigen::SelfAdjointEigenSolver<Mat> es(s);
  return es.eigenvectors() * es.eigenvalues().cwiseSqrt().asDiagonal() *
         es.eigenvectors().transpose();
}

struct MeanSE {
  double mean = 0.0;
  double se = 0.0;
};

inline MeanSE mean_se(const std::vector<double>& x) {
  const double n = static_cast<double>(x.size());
  double m = 0.0;
  for (double v : x) m += v;
  m /= n;
  double s2 = 0.0;
  for (double v : x) s2 += (v - m) * (v - m);
  return {m, std::sqrt(s2 / (n - 1.0) / n)};
}

}  // namespace oracle
