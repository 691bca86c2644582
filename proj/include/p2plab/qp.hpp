#pragma once
// Dense convex QP solver:  min 1/2 x'Px + q'x  s.t.  l <= Ax <= u.
//
// Operator-splitting (ADMM) method in the style of OSQP: a single
// quasi-definite KKT factorization reused across iterations, over-relaxation,
// per-row penalty with stiffer rho on equality rows, primal/dual infeasibility
// certificates from the iterate differences, and an active-set polish step
// that solves the equality-constrained KKT system for high-accuracy
// solutions.  Problem sizes here are a few hundred variables, so dense
// factorizations are the right tool.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "p2plab/common.hpp"

namespace p2plab {

struct QpProblem {
  Eigen::MatrixXd P;  // n x n, symmetric PSD
  Eigen::VectorXd q;  // n
  Eigen::MatrixXd A;  // m x n
  Eigen::VectorXd l, u;  // m (entries may be +-inf)
};

struct QpOptions {
  int max_iter = 10000;
  double eps_abs = 1e-6;
  double eps_rel = 1e-6;
  double eps_infeas = 1e-7;
  double rho = 0.1;
  double rho_eq_scale = 1e3;  // stiffer penalty on equality rows
  double sigma = 1e-6;
  double alpha = 1.6;  // over-relaxation
  bool polish = true;
  // A polished point whose KKT residual clears this bar is optimal by the
  // first-order conditions, independent of the ADMM iterate state.
  double kkt_accept = 1e-7;
  int check_every = 10;
  int adapt_every = 200;  // rho re-tuning cadence (0 disables)
};

enum class QpStatus { Optimal, PrimalInfeasible, DualInfeasible, MaxIter };

struct QpResult {
  QpStatus status = QpStatus::MaxIter;
  Eigen::VectorXd x, y, z;  // primal, dual, constraint activity Ax
  int iters = 0;
  double obj = 0.0;
  double r_prim = kInf, r_dual = kInf;
  double kkt = kInf;  // certified worst KKT residual of (x, y)
  bool polished = false;
};

inline const char* to_string(QpStatus s) {
  switch (s) {
    case QpStatus::Optimal: return "optimal";
    case QpStatus::PrimalInfeasible: return "primal_infeasible";
    case QpStatus::DualInfeasible: return "dual_infeasible";
    default: return "max_iter";
  }
}

namespace detail {

inline double inf_norm(const Eigen::VectorXd& v) {
  return v.size() ? v.cwiseAbs().maxCoeff() : 0.0;
}

}  // namespace detail

// Worst KKT residual of a candidate primal/dual pair: stationarity,
// primal feasibility and complementary slackness, all in the inf-norm.
inline double kkt_residual(const QpProblem& p, const Eigen::VectorXd& x,
                           const Eigen::VectorXd& y) {
  Eigen::VectorXd ax = p.A * x;
  double stat = detail::inf_norm(p.P * x + p.q + p.A.transpose() * y);
  double feas = 0.0, comp = 0.0;
  for (int i = 0; i < ax.size(); ++i) {
    if (std::isfinite(p.u[i])) feas = std::max(feas, ax[i] - p.u[i]);
    if (std::isfinite(p.l[i])) feas = std::max(feas, p.l[i] - ax[i]);
    double yp = std::max(y[i], 0.0), ym = std::max(-y[i], 0.0);
    if (std::isfinite(p.u[i]))
      comp = std::max(comp, std::abs(yp * (p.u[i] - ax[i])));
    else
      comp = std::max(comp, yp);  // +inf bound must carry no multiplier
    if (std::isfinite(p.l[i]))
      comp = std::max(comp, std::abs(ym * (ax[i] - p.l[i])));
    else
      comp = std::max(comp, ym);
  }
  return std::max({stat, feas, comp});
}

namespace detail {

// Equality-constrained re-solve on the active set detected from (z, y) at
// primal tolerance `atol`.  Keeps the polished pair only when it improves
// the KKT residual.  Returns true on improvement.
inline bool polish(const QpProblem& p, QpResult& r, double atol) {
  const int n = static_cast<int>(p.q.size());
  const int m = static_cast<int>(p.l.size());
  std::vector<int> act;
  std::vector<double> rhs;
  const double ytol = 1e-9;
  for (int i = 0; i < m; ++i) {
    bool lo_act = std::isfinite(p.l[i]) &&
                  (r.z[i] - p.l[i] < atol || r.y[i] < -ytol);
    bool hi_act = std::isfinite(p.u[i]) &&
                  (p.u[i] - r.z[i] < atol || r.y[i] > ytol);
    if (p.l[i] == p.u[i]) {  // equality row: always active
      act.push_back(i);
      rhs.push_back(p.l[i]);
    } else if (hi_act && !lo_act) {
      act.push_back(i);
      rhs.push_back(p.u[i]);
    } else if (lo_act && !hi_act) {
      act.push_back(i);
      rhs.push_back(p.l[i]);
    }
  }
  const int k = static_cast<int>(act.size());
  Eigen::MatrixXd kkt = Eigen::MatrixXd::Zero(n + k, n + k);
  kkt.topLeftCorner(n, n) = p.P;
  // tiny regularization keeps the system solvable when P is singular on
  // the nullspace of the active rows
  kkt.topLeftCorner(n, n).diagonal().array() += 1e-10;
  Eigen::VectorXd b(n + k);
  b.head(n) = -p.q;
  for (int j = 0; j < k; ++j) {
    kkt.block(n + j, 0, 1, n) = p.A.row(act[j]);
    kkt.block(0, n + j, n, 1) = p.A.row(act[j]).transpose();
    kkt(n + j, n + j) = -1e-10;
    b[n + j] = rhs[j];
  }
  Eigen::PartialPivLU<Eigen::MatrixXd> lu(kkt);
  Eigen::VectorXd sol = lu.solve(b);
  if (!sol.allFinite()) return false;
  Eigen::VectorXd x = sol.head(n);
  Eigen::VectorXd y = Eigen::VectorXd::Zero(m);
  for (int j = 0; j < k; ++j) y[act[j]] = sol[n + j];
  double after = kkt_residual(p, x, y);
  if (after < r.kkt) {
    r.x = x;
    r.y = y;
    r.z = p.A * x;
    r.kkt = after;
    r.polished = true;
    return true;
  }
  return false;
}

}  // namespace detail

inline QpResult solve_qp(const QpProblem& p, const QpOptions& opt = {},
                         const Eigen::VectorXd* warm_x = nullptr,
                         const Eigen::VectorXd* warm_y = nullptr) {
  const int n = static_cast<int>(p.q.size());
  const int m = static_cast<int>(p.l.size());
  if (p.P.rows() != n || p.P.cols() != n || p.A.rows() != m || p.A.cols() != n ||
      p.u.size() != m)
    throw DataError("qp: inconsistent problem dimensions");
  for (int i = 0; i < m; ++i)
    if (p.l[i] > p.u[i]) throw DataError("qp: l > u in row " + std::to_string(i));

  double rho_base = opt.rho;
  Eigen::VectorXd rho(m);
  Eigen::MatrixXd kkt = Eigen::MatrixXd::Zero(n + m, n + m);
  Eigen::PartialPivLU<Eigen::MatrixXd> lu;
  auto refactor = [&]() {
    for (int i = 0; i < m; ++i)
      rho[i] = (p.l[i] == p.u[i]) ? rho_base * opt.rho_eq_scale : rho_base;
    kkt.topLeftCorner(n, n) = p.P;
    kkt.topLeftCorner(n, n).diagonal().array() += opt.sigma;
    kkt.topRightCorner(n, m) = p.A.transpose();
    kkt.bottomLeftCorner(m, n) = p.A;
    for (int i = 0; i < m; ++i) kkt(n + i, n + i) = -1.0 / rho[i];
    lu.compute(kkt);
  };
  refactor();

  QpResult r;
  r.x = warm_x && warm_x->size() == n ? *warm_x : Eigen::VectorXd::Zero(n);
  r.y = warm_y && warm_y->size() == m ? *warm_y : Eigen::VectorXd::Zero(m);
  r.z = p.A * r.x;
  // initial z must be feasible w.r.t. the box for the projection algebra
  for (int i = 0; i < m; ++i) r.z[i] = std::clamp(r.z[i], p.l[i], p.u[i]);

  Eigen::VectorXd rhs(n + m), xt(n), zt(m), z_prev(m), dx(n), dy(m);
  for (int it = 1; it <= opt.max_iter; ++it) {
    rhs.head(n) = opt.sigma * r.x - p.q;
    for (int i = 0; i < m; ++i) rhs[n + i] = r.z[i] - r.y[i] / rho[i];
    Eigen::VectorXd sol = lu.solve(rhs);
    xt = sol.head(n);
    for (int i = 0; i < m; ++i) zt[i] = r.z[i] + (sol[n + i] - r.y[i]) / rho[i];

    dx = xt - r.x;  // pre-relaxation iterate differences for certificates
    z_prev = r.z;
    r.x = opt.alpha * xt + (1.0 - opt.alpha) * r.x;
    for (int i = 0; i < m; ++i) {
      double zr = opt.alpha * zt[i] + (1.0 - opt.alpha) * z_prev[i];
      double znew = std::clamp(zr + r.y[i] / rho[i], p.l[i], p.u[i]);
      dy[i] = rho[i] * (zr - znew);
      r.z[i] = znew;
      r.y[i] += dy[i];
    }

    if (it % opt.check_every != 0 && it != opt.max_iter) continue;

    Eigen::VectorXd ax = p.A * r.x;
    r.r_prim = detail::inf_norm(ax - r.z);
    r.r_dual = detail::inf_norm(p.P * r.x + p.q + p.A.transpose() * r.y);
    double eps_p = opt.eps_abs +
                   opt.eps_rel * std::max(detail::inf_norm(ax),
                                          detail::inf_norm(r.z));
    double eps_d =
        opt.eps_abs + opt.eps_rel * std::max({detail::inf_norm(p.P * r.x),
                                              detail::inf_norm(p.q),
                                              detail::inf_norm(p.A.transpose() * r.y)});
    r.iters = it;
    if (r.r_prim <= eps_p && r.r_dual <= eps_d) {
      r.status = QpStatus::Optimal;
      break;
    }

    // rescale rho toward balanced primal/dual progress, as OSQP does
    if (opt.adapt_every > 0 && it % opt.adapt_every == 0) {
      double np = r.r_prim / std::max({detail::inf_norm(ax),
                                       detail::inf_norm(r.z), 1e-10});
      double nd = r.r_dual /
                  std::max({detail::inf_norm(p.P * r.x), detail::inf_norm(p.q),
                            detail::inf_norm(p.A.transpose() * r.y), 1e-10});
      double scale = std::sqrt(np / std::max(nd, 1e-300));
      if (scale > 5.0 || scale < 0.2) {
        rho_base = std::clamp(rho_base * scale, 1e-6, 1e6);
        refactor();
      }
    }

    // primal infeasibility: dy certifies an inconsistent constraint system
    double ndy = detail::inf_norm(dy);
    if (ndy > 1e-14) {
      double lhs = detail::inf_norm(p.A.transpose() * dy);
      double gap = 0.0;
      bool bounded = true;
      for (int i = 0; i < m; ++i) {
        double yp = std::max(dy[i], 0.0), ym = std::max(-dy[i], 0.0);
        if (yp > opt.eps_infeas * ndy && !std::isfinite(p.u[i])) bounded = false;
        if (ym > opt.eps_infeas * ndy && !std::isfinite(p.l[i])) bounded = false;
        gap += (yp > 0 && std::isfinite(p.u[i]) ? p.u[i] * yp : 0.0) -
               (ym > 0 && std::isfinite(p.l[i]) ? p.l[i] * ym : 0.0);
      }
      if (bounded && lhs <= opt.eps_infeas * ndy &&
          gap < -opt.eps_infeas * ndy) {
        r.status = QpStatus::PrimalInfeasible;
        break;
      }
    }
    // dual infeasibility: dx certifies an unbounded descent ray
    double ndx = detail::inf_norm(dx);
    if (ndx > 1e-14) {
      bool ray = detail::inf_norm(p.P * dx) <= opt.eps_infeas * ndx &&
                 p.q.dot(dx) < -opt.eps_infeas * ndx;
      if (ray) {
        Eigen::VectorXd adx = p.A * dx;
        for (int i = 0; i < m && ray; ++i) {
          if (std::isfinite(p.u[i]) && adx[i] > opt.eps_infeas * ndx) ray = false;
          if (std::isfinite(p.l[i]) && adx[i] < -opt.eps_infeas * ndx) ray = false;
        }
        if (ray) {
          r.status = QpStatus::DualInfeasible;
          break;
        }
      }
    }
  }

  if (r.status == QpStatus::Optimal || r.status == QpStatus::MaxIter) {
    r.kkt = kkt_residual(p, r.x, r.y);
    if (opt.polish)
      for (double atol : {1e-8, 1e-6, 1e-4})
        detail::polish(p, r, atol);
    // first-order certificate: a near-exact KKT point is optimal even when
    // the ADMM tail was still grinding
    if (r.status == QpStatus::MaxIter && r.kkt <= opt.kkt_accept)
      r.status = QpStatus::Optimal;
    r.obj = 0.5 * r.x.dot(p.P * r.x) + p.q.dot(r.x);
  }
  return r;
}

}  // namespace p2plab
