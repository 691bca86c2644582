#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "p2plab/qp.hpp"

using namespace p2plab;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

QpProblem box_1d(double pcoef, double lin, double lo, double hi) {
  QpProblem p;
  p.P = MatrixXd::Constant(1, 1, pcoef);
  p.q = VectorXd::Constant(1, lin);
  p.A = MatrixXd::Identity(1, 1);
  p.l = VectorXd::Constant(1, lo);
  p.u = VectorXd::Constant(1, hi);
  return p;
}

}  // namespace

TEST_CASE("one-variable boxes hit the analytic minimizers") {
  // min x^2 + x on [0,1]: unconstrained minimum -1/2 is cut off -> x*=0
  auto r0 = solve_qp(box_1d(2.0, 1.0, 0.0, 1.0));
  REQUIRE(r0.status == QpStatus::Optimal);
  CHECK(r0.x[0] == Catch::Approx(0.0).margin(1e-7));
  CHECK(r0.obj == Catch::Approx(0.0).margin(1e-7));
  // same objective on [-1,1]: interior optimum x*=-1/2, f*=-1/4
  auto r1 = solve_qp(box_1d(2.0, 1.0, -1.0, 1.0));
  REQUIRE(r1.status == QpStatus::Optimal);
  CHECK(r1.x[0] == Catch::Approx(-0.5).margin(1e-7));
  CHECK(r1.obj == Catch::Approx(-0.25).margin(1e-7));
}

TEST_CASE("constructed-optimum problems are recovered to 1e-6") {
  // Build random problems whose optimum is known by construction: pick x*,
  // an active set and valid multipliers, then define q = -(P x* + A' y*).
  // KKT then certifies (x*, y*) as the unique optimum (P is PD).
  std::mt19937_64 rng(7101);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  for (int trial = 0; trial < 25; ++trial) {
    int n = 2 + static_cast<int>(rng() % 5);
    int m = n + static_cast<int>(rng() % 4);
    MatrixXd M(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) M(i, j) = unit(rng);
    QpProblem p;
    p.P = M.transpose() * M + 0.3 * MatrixXd::Identity(n, n);
    p.A = MatrixXd(m, n);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) p.A(i, j) = unit(rng);
    VectorXd xs(n);
    for (int i = 0; i < n; ++i) xs[i] = unit(rng);
    VectorXd ax = p.A * xs;
    VectorXd ys = VectorXd::Zero(m);
    p.l = VectorXd::Constant(m, -kInf);
    p.u = VectorXd::Constant(m, kInf);
    for (int i = 0; i < m; ++i) {
      switch (rng() % 3) {
        case 0:  // active at upper bound, y > 0
          p.u[i] = ax[i];
          p.l[i] = ax[i] - 2.0;
          ys[i] = 0.3 + 0.7 * std::abs(unit(rng));
          break;
        case 1:  // active at lower bound, y < 0
          p.l[i] = ax[i];
          p.u[i] = ax[i] + 2.0;
          ys[i] = -0.3 - 0.7 * std::abs(unit(rng));
          break;
        default:  // strictly inactive
          p.l[i] = ax[i] - 1.0;
          p.u[i] = ax[i] + 1.0;
          break;
      }
    }
    p.q = -(p.P * xs + p.A.transpose() * ys);
    QpOptions tight;
    tight.eps_abs = tight.eps_rel = 1e-9;
    auto r = solve_qp(p, tight);
    REQUIRE(r.status == QpStatus::Optimal);
    CHECK((r.x - xs).cwiseAbs().maxCoeff() < 1e-6);
    CHECK(kkt_residual(p, r.x, r.y) < 1e-5);
  }
}

TEST_CASE("equality-constrained least squares matches the Lagrange solution") {
  // min 1/2|x|^2 - c'x  s.t.  a'x = b   has x* = c + a (b - a'c)/|a|^2
  std::mt19937_64 rng(88);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  for (int trial = 0; trial < 10; ++trial) {
    int n = 3 + static_cast<int>(rng() % 4);
    VectorXd c(n), a(n);
    for (int i = 0; i < n; ++i) {
      c[i] = unit(rng);
      a[i] = unit(rng);
    }
    double b = unit(rng);
    QpProblem p;
    p.P = MatrixXd::Identity(n, n);
    p.q = -c;
    p.A = a.transpose();
    p.l = VectorXd::Constant(1, b);
    p.u = VectorXd::Constant(1, b);
    auto r = solve_qp(p);
    REQUIRE(r.status == QpStatus::Optimal);
    VectorXd expect = c + a * (b - a.dot(c)) / a.squaredNorm();
    CHECK((r.x - expect).cwiseAbs().maxCoeff() < 1e-6);
    CHECK(std::abs(a.dot(r.x) - b) < 1e-8);
  }
}

TEST_CASE("contradictory rows are reported primal infeasible") {
  QpProblem p;
  p.P = MatrixXd::Constant(1, 1, 2.0);
  p.q = VectorXd::Zero(1);
  p.A = MatrixXd::Ones(2, 1);
  p.l = VectorXd(2);
  p.u = VectorXd(2);
  p.l << 1.0, -kInf;  // x >= 1
  p.u << kInf, 0.0;   // x <= 0
  auto r = solve_qp(p);
  CHECK(r.status == QpStatus::PrimalInfeasible);
}

TEST_CASE("descent rays are reported dual infeasible") {
  QpProblem p;  // min -x, x >= 0
  p.P = MatrixXd::Zero(1, 1);
  p.q = VectorXd::Constant(1, -1.0);
  p.A = MatrixXd::Identity(1, 1);
  p.l = VectorXd::Constant(1, 0.0);
  p.u = VectorXd::Constant(1, kInf);
  auto r = solve_qp(p);
  CHECK(r.status == QpStatus::DualInfeasible);
}

TEST_CASE("polish drives the KKT residual far below the ADMM tolerance") {
  std::mt19937_64 rng(424);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  MatrixXd M(6, 6);
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 6; ++j) M(i, j) = unit(rng);
  QpProblem p;
  p.P = M.transpose() * M + 0.1 * MatrixXd::Identity(6, 6);
  p.q = VectorXd::Ones(6);
  p.A = MatrixXd::Identity(6, 6);
  p.l = VectorXd::Constant(6, -0.05);
  p.u = VectorXd::Constant(6, 0.05);
  auto r = solve_qp(p);
  REQUIRE(r.status == QpStatus::Optimal);
  CHECK(kkt_residual(p, r.x, r.y) < 1e-9);
}

TEST_CASE("warm starts reduce the iteration count on nearby problems") {
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  int n = 20;
  MatrixXd M(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) M(i, j) = unit(rng);
  QpProblem p;
  p.P = M.transpose() * M + 0.05 * MatrixXd::Identity(n, n);
  p.q = VectorXd::Ones(n);
  p.A = MatrixXd::Identity(n, n);
  p.l = VectorXd::Constant(n, -0.2);
  p.u = VectorXd::Constant(n, 0.2);
  auto cold = solve_qp(p);
  REQUIRE(cold.status == QpStatus::Optimal);
  QpProblem p2 = p;
  p2.q.array() += 0.01;  // small drift, as along a receding horizon
  auto warm = solve_qp(p2, {}, &cold.x, &cold.y);
  auto cold2 = solve_qp(p2);
  REQUIRE(warm.status == QpStatus::Optimal);
  CHECK(warm.iters <= cold2.iters);
  CHECK((warm.x - cold2.x).cwiseAbs().maxCoeff() < 1e-5);
}
