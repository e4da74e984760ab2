#include <doctest.h>

#include <cmath>
#include <sstream>

#include "glamp/error.hpp"
#include "glamp/glamp.hpp"

using namespace glamp;

namespace {

SymmetricGlampInstance linear_instance(int n, double c, std::uint64_t seed) {
  auto rs = make_stream(seed, "glamp-test", 0);
  SymmetricGlampInstance inst;
  inst.a = make_goe(n, rs);
  inst.x0 = Mat(n, 1);
  rs.fill_normal(inst.x0);
  inst.y = Mat::Zero(n, 0);
  inst.f = [c](const Mat& x, const Mat&, int) { return Mat(c * x); };
  inst.jacobian = [c](const Mat&, const Mat&, int) { return Mat::Constant(1, 1, c); };
  return inst;
}

}  // namespace

TEST_CASE("GOE matrix is symmetric with the right entry variances") {
  auto rs = make_stream(1, "goe");
  const int n = 400;
  const Mat a = make_goe(n, rs);
  CHECK((a - a.transpose()).cwiseAbs().maxCoeff() == 0.0);
  double off = 0.0, diag = 0.0;
  for (int i = 0; i < n; ++i) {
    diag += a(i, i) * a(i, i);
    for (int j = i + 1; j < n; ++j) off += a(i, j) * a(i, j);
  }
  CHECK(off / (n * (n - 1) / 2.0) * n == doctest::Approx(1.0).epsilon(0.02));
  CHECK(diag / n * n == doctest::Approx(2.0).epsilon(0.2));
}

TEST_CASE("linear denoiser: state evolution is Sigma^{t+1} = c^2 Sigma^t and the iterates follow it") {
  const double c = 0.8;
  const int n = 3000;
  const auto inst = linear_instance(n, c, 2);
  MCSettings mc;
  mc.draws = 50;
  const auto res = run_symmetric_glamp(inst, 6, mc);
  for (int t = 1; t < 6; ++t) {
    CHECK(res.sigma[t + 1](0, 0) == doctest::Approx(c * c * res.sigma[t](0, 0)).epsilon(0.01));
    CHECK(res.onsager[t + 1](0, 0) == doctest::Approx(c).epsilon(1e-12));
  }
  // empirical second moment of x^t against Sigma^t
  for (int t = 1; t <= 6; ++t) {
    const double emp = res.iterates[t].squaredNorm() / n;
    CHECK(emp == doctest::Approx(res.sigma[t](0, 0)).epsilon(0.08));
  }
}

namespace {

SymmetricGlampInstance two_column_instance(int n, std::uint64_t seed, bool transpose_jacobian) {
  auto rs = make_stream(seed, "glamp-nl", 0);
  SymmetricGlampInstance inst;
  inst.a = make_goe(n, rs);
  inst.x0 = Mat(n, 2);
  rs.fill_normal(inst.x0);
  inst.y = Mat(n, 1);
  rs.fill_normal(inst.y);
  // f(x) = (tanh(x_1) + y / 2, x_1 / 2 + sin(x_2))
  inst.f = [](const Mat& x, const Mat& y, int) {
    Mat out(x.rows(), 2);
    out.col(0) = x.col(0).array().tanh() + 0.5 * y.col(0).array();
    out.col(1) = 0.5 * x.col(0).array() + x.col(1).array().sin();
    return out;
  };
  inst.jacobian = [transpose_jacobian](const Mat& x, const Mat&, int) {
    Mat j = Mat::Zero(2, 2);  // j(i, k) = mean d f_i / d x_k
    j(0, 0) = (1.0 - x.col(0).array().tanh().square()).mean();
    j(1, 0) = 0.5;
    j(1, 1) = x.col(1).array().cos().mean();
    if (transpose_jacobian) j.transposeInPlace();
    return j;
  };
  return inst;
}

/// Largest seed-averaged |(1/N) x^t' x^t - Sigma^t| entry over 2 <= t <= steps.
double average_tracking_error(bool transpose_jacobian, int steps) {
  const int n = 2000, seeds = 12;
  MCSettings mc;
  mc.draws = 20;
  std::vector<Mat> bias(steps + 1, Mat::Zero(2, 2));
  for (int s = 0; s < seeds; ++s) {
    const auto res = run_symmetric_glamp(two_column_instance(n, s, transpose_jacobian), steps, mc);
    for (int t = 2; t <= steps; ++t)
      bias[t] += (res.iterates[t].transpose() * res.iterates[t] / n - res.sigma[t]) / seeds;
  }
  double worst = 0.0;
  for (int t = 2; t <= steps; ++t) worst = std::max(worst, bias[t].cwiseAbs().maxCoeff());
  return worst;
}

}  // namespace

TEST_CASE("two-column GLAMP tracks its state evolution on average over instances") {
  // Sigma^t entries are of order 0.4 to 0.8 here.
  CHECK(average_tracking_error(false, 5) < 0.05);
  // Negative control: the Onsager matrix applied with the wrong orientation.
  CHECK(average_tracking_error(true, 5) > 0.1);
}

TEST_CASE("finite-difference Onsager estimates agree with the analytic Jacobian") {
  auto inst = two_column_instance(1000, 9, false);
  MCSettings mc;
  mc.draws = 20;
  const auto res = run_symmetric_glamp(inst, 4, mc);
  inst.onsager_mode = OnsagerMode::mc_jacobian;
  inst.jacobian = nullptr;
  const auto res_fd = run_symmetric_glamp(inst, 4, mc);
  // the finite-difference path averages over a 256-row subsample
  for (int t = 2; t <= 4; ++t) CHECK((res_fd.onsager[t] - res.onsager[t]).cwiseAbs().maxCoeff() < 0.03);
}

TEST_CASE("finite-difference Jacobian matches the analytic one") {
  Mat x(50, 1);
  auto rs = make_stream(4, "fd");
  rs.fill_normal(x);
  const GlampDenoiser f = [](const Mat& z, const Mat&, int) { return Mat(z.array().tanh()); };
  const Mat j = finite_difference_jacobian(f, x, Mat(), 0, 0);
  CHECK(j(0, 0) == doctest::Approx((1.0 - x.array().tanh().square()).mean()).epsilon(1e-7));
}

TEST_CASE("symmetric GLAMP input validation and divergence detection") {
  auto inst = linear_instance(50, 1.0, 5);
  MCSettings mc;
  mc.draws = 5;
  inst.a(0, 1) += 1.0;
  CHECK_THROWS_AS(run_symmetric_glamp(inst, 3, mc), ModelError);
  auto bad = linear_instance(50, 1.0, 5);
  bad.f = [](const Mat& x, const Mat&, int) { return Mat(x.array() * 1e300); };
  CHECK_THROWS_AS(run_symmetric_glamp(bad, 3, mc), NumericalError);
}

TEST_CASE("trace CSV has a fixed header and round-trips series") {
  IterateTrace tr;
  tr.add(0, "q", 1, 0.5);
  tr.add(2, "q", 1, 0.25);
  const auto s = tr.series("q", 1);
  REQUIRE(s.size() == 3);
  CHECK(s[0] == 0.5);
  CHECK(std::isnan(s[1]));
  std::ostringstream out;
  tr.write_csv(out);
  CHECK(out.str() == "t,quantity,environment,value\n0,q,1,0.5\n2,q,1,0.25\n");
}
