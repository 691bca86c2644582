#pragma once
// Radial distribution network model and AC power flow.
//
// Conventions (used consistently across the whole code base):
//  * per-unit quantities everywhere; injections are generation-positive
//    (a load is a negative injection),
//  * polar voltage representation, slack bus fixed at v_base, angle 0,
//  * branch admittances are series only, no shunt elements, so every row of
//    the bus admittance matrix sums to zero.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <map>
#include <queue>
#include <string>
#include <vector>

#include "p2plab/common.hpp"

namespace p2plab {

struct Bus {
  int id = 0;                 // external id, arbitrary (fixture bus numbers)
  double v_min = 0.95;
  double v_max = 1.05;
  double v_base = 1.0;
  bool is_slack = false;
};

struct Branch {
  int from = 0, to = 0;       // external bus ids
  double g = 0.0, b = 0.0;    // series admittance (p.u.)
};

struct Network {
  std::vector<Bus> buses;
  std::vector<Branch> branches;
  double s_base_mva = 1.0;
  double v_level_kv = 12.47;

  int n() const { return static_cast<int>(buses.size()); }

  int index_of(int bus_id) const {
    for (int i = 0; i < n(); ++i)
      if (buses[i].id == bus_id) return i;
    throw DataError("unknown bus id " + std::to_string(bus_id));
  }

  int slack_index() const {
    int s = -1;
    for (int i = 0; i < n(); ++i)
      if (buses[i].is_slack) {
        if (s >= 0) throw DataError("multiple slack buses");
        s = i;
      }
    if (s < 0) throw DataError("no slack bus");
    return s;
  }

  void validate() const {
    if (buses.empty()) throw DataError("network has no buses");
    std::map<int, int> seen;
    for (const Bus& b : buses) {
      if (seen.count(b.id)) throw DataError("duplicate bus id");
      seen[b.id] = 1;
      if (!(b.v_min < b.v_max)) throw DataError("bus voltage band empty");
      if (b.v_base <= 0) throw DataError("bus v_base must be positive");
    }
    (void)slack_index();
    for (const Branch& br : branches) {
      if (!seen.count(br.from) || !seen.count(br.to))
        throw DataError("branch references unknown bus");
      if (br.from == br.to) throw DataError("branch is a self-loop");
    }
  }
};

struct Admittance {
  Eigen::MatrixXd G, B;
};

// Assembles Y = G + jB from series branch admittances and verifies the graph
// is connected (throws TopologyError otherwise).
inline Admittance build_admittance(const Network& net) {
  net.validate();
  const int n = net.n();
  Admittance y{Eigen::MatrixXd::Zero(n, n), Eigen::MatrixXd::Zero(n, n)};
  std::vector<std::vector<int>> adj(n);
  for (const Branch& br : net.branches) {
    int i = net.index_of(br.from), j = net.index_of(br.to);
    y.G(i, j) -= br.g;
    y.G(j, i) -= br.g;
    y.B(i, j) -= br.b;
    y.B(j, i) -= br.b;
    y.G(i, i) += br.g;
    y.G(j, j) += br.g;
    y.B(i, i) += br.b;
    y.B(j, j) += br.b;
    adj[i].push_back(j);
    adj[j].push_back(i);
  }
  // connectivity
  std::vector<char> vis(n, 0);
  std::queue<int> q;
  q.push(0);
  vis[0] = 1;
  int count = 1;
  while (!q.empty()) {
    int u = q.front();
    q.pop();
    for (int v : adj[u])
      if (!vis[v]) {
        vis[v] = 1;
        ++count;
        q.push(v);
      }
  }
  if (count != n) throw TopologyError("network graph is disconnected");
  return y;
}

// Calculated injections at a voltage point.
inline void calc_injections(const Admittance& y, const Eigen::VectorXd& v,
                            const Eigen::VectorXd& theta, Eigen::VectorXd& p,
                            Eigen::VectorXd& q) {
  const int n = static_cast<int>(v.size());
  p.setZero(n);
  q.setZero(n);
  for (int i = 0; i < n; ++i) {
    double pi = 0.0, qi = 0.0;
    for (int j = 0; j < n; ++j) {
      double th = theta(i) - theta(j);
      double c = std::cos(th), s = std::sin(th);
      pi += v(j) * (y.G(i, j) * c + y.B(i, j) * s);
      qi += v(j) * (y.G(i, j) * s - y.B(i, j) * c);
    }
    p(i) = v(i) * pi;
    q(i) = v(i) * qi;
  }
}

// Mismatch spec - calc for given voltages and target injections.
inline std::pair<Eigen::VectorXd, Eigen::VectorXd> injection_residual(
    const Network& net, const Eigen::VectorXd& v, const Eigen::VectorXd& theta,
    const Eigen::VectorXd& p_inj, const Eigen::VectorXd& q_inj) {
  Admittance y = build_admittance(net);
  Eigen::VectorXd pc, qc;
  calc_injections(y, v, theta, pc, qc);
  return {p_inj - pc, q_inj - qc};
}

// Newton-Raphson Jacobian of the calculated injections w.r.t. the reduced
// state [theta_nonslack; v_nonslack].  Row order matches the mismatch vector
// [dP_nonslack; dQ_nonslack].  Exposed separately so tests can check it
// against finite differences of injection_residual.
inline Eigen::MatrixXd nr_jacobian(const Network& net, const Admittance& y,
                                   const Eigen::VectorXd& v,
                                   const Eigen::VectorXd& theta) {
  const int n = net.n();
  const int slack = net.slack_index();
  std::vector<int> red;  // non-slack bus indices
  for (int i = 0; i < n; ++i)
    if (i != slack) red.push_back(i);
  const int m = static_cast<int>(red.size());
  Eigen::VectorXd pc, qc;
  calc_injections(y, v, theta, pc, qc);
  Eigen::MatrixXd J(2 * m, 2 * m);
  for (int a = 0; a < m; ++a) {
    int i = red[a];
    for (int b = 0; b < m; ++b) {
      int j = red[b];
      double th = theta(i) - theta(j);
      double c = std::cos(th), s = std::sin(th);
      double dp_dth, dp_dv, dq_dth, dq_dv;
      if (i == j) {
        dp_dth = -qc(i) - y.B(i, i) * v(i) * v(i);
        dp_dv = pc(i) / v(i) + y.G(i, i) * v(i);
        dq_dth = pc(i) - y.G(i, i) * v(i) * v(i);
        dq_dv = qc(i) / v(i) - y.B(i, i) * v(i);
      } else {
        dp_dth = v(i) * v(j) * (y.G(i, j) * s - y.B(i, j) * c);
        dp_dv = v(i) * (y.G(i, j) * c + y.B(i, j) * s);
        dq_dth = -v(i) * v(j) * (y.G(i, j) * c + y.B(i, j) * s);
        dq_dv = v(i) * (y.G(i, j) * s - y.B(i, j) * c);
      }
      J(a, b) = dp_dth;
      J(a, m + b) = dp_dv;
      J(m + a, b) = dq_dth;
      J(m + a, m + b) = dq_dv;
    }
  }
  return J;
}

struct BusSolution {
  Eigen::VectorXd v, theta;
  double residual = 0.0;  // final infinity-norm mismatch over non-slack buses
  int iterations = 0;
};

struct PowerFlowOptions {
  double tol = 1e-8;
  int max_iter = 30;
};

// Full Newton-Raphson AC power flow.  p_inj/q_inj are generation-positive
// injections indexed like net.buses; the slack entries are ignored.  Throws
// DivergenceError when the iteration fails to reach tol.
inline BusSolution ac_power_flow(const Network& net,
                                 const Eigen::VectorXd& p_inj,
                                 const Eigen::VectorXd& q_inj,
                                 const PowerFlowOptions& opt = {}) {
  const int n = net.n();
  if (p_inj.size() != n || q_inj.size() != n)
    throw DataError("injection vector size mismatch");
  Admittance y = build_admittance(net);
  const int slack = net.slack_index();
  std::vector<int> red;
  for (int i = 0; i < n; ++i)
    if (i != slack) red.push_back(i);
  const int m = static_cast<int>(red.size());

  BusSolution sol;
  sol.v = Eigen::VectorXd::Constant(n, 1.0);
  sol.v(slack) = net.buses[slack].v_base;
  sol.theta = Eigen::VectorXd::Zero(n);

  Eigen::VectorXd pc, qc;
  for (int it = 0; it <= opt.max_iter; ++it) {
    calc_injections(y, sol.v, sol.theta, pc, qc);
    Eigen::VectorXd f(2 * m);
    for (int a = 0; a < m; ++a) {
      f(a) = p_inj(red[a]) - pc(red[a]);
      f(m + a) = q_inj(red[a]) - qc(red[a]);
    }
    sol.residual = m > 0 ? f.lpNorm<Eigen::Infinity>() : 0.0;
    sol.iterations = it;
    if (!std::isfinite(sol.residual))
      throw DivergenceError("power flow diverged: non-finite mismatch after " +
                            std::to_string(it) + " iterations");
    if (sol.residual <= opt.tol) return sol;
    if (it == opt.max_iter) break;

    Eigen::MatrixXd J = nr_jacobian(net, y, sol.v, sol.theta);
    Eigen::VectorXd dx = J.partialPivLu().solve(f);
    if (!dx.allFinite())
      throw DivergenceError("power flow diverged: singular Jacobian");
    for (int a = 0; a < m; ++a) {
      sol.theta(red[a]) += dx(a);
      sol.v(red[a]) += dx(m + a);
      if (sol.v(red[a]) <= 0.0)
        throw DivergenceError("power flow diverged: negative voltage");
    }
  }
  throw DivergenceError("power flow did not converge in " +
                        std::to_string(opt.max_iter) +
                        " iterations, residual " + std::to_string(sol.residual));
}

// Per-bus violation magnitude against the symmetric band around v_base:
// max{0, |v_base - v_i| - (v_max - v_min)/2}.
inline Eigen::VectorXd voltage_violation(const Eigen::VectorXd& v,
                                         const Network& net) {
  const int n = net.n();
  if (v.size() != n) throw DataError("voltage vector size mismatch");
  Eigen::VectorXd out(n);
  for (int i = 0; i < n; ++i) {
    const Bus& b = net.buses[i];
    double half = 0.5 * (b.v_max - b.v_min);
    out(i) = std::max(0.0, std::abs(b.v_base - v(i)) - half);
  }
  return out;
}

struct VoltSensitivity {
  Eigen::MatrixXd dv_dp, dv_dq;  // n x n, slack row/col identically zero
};

// LinDistFlow voltage sensitivities for a radial feeder rooted at the slack:
// dV_i/dP_j = sum of branch resistances on the common root path of i and j,
// divided by the root voltage (dV/dQ likewise with reactances).  Injections
// are generation-positive, so adding load (negative dP) lowers voltage.
// Throws UnsupportedTopologyError for meshed inputs.
inline VoltSensitivity lindistflow_sensitivity(const Network& net) {
  build_admittance(net);  // validates + connectivity
  const int n = net.n();
  if (static_cast<int>(net.branches.size()) != n - 1)
    throw UnsupportedTopologyError(
        "lindistflow requires a radial feeder (|branches| == |buses| - 1)");
  const int root = net.slack_index();

  // Build the tree: parent pointers + per-bus cumulative R/X to the root.
  std::vector<std::vector<std::pair<int, int>>> adj(n);  // (neighbor, branch)
  for (int k = 0; k < n - 1; ++k) {
    int i = net.index_of(net.branches[k].from);
    int j = net.index_of(net.branches[k].to);
    adj[i].push_back({j, k});
    adj[j].push_back({i, k});
  }
  std::vector<int> parent(n, -1), depth(n, 0);
  std::vector<double> r_up(n, 0.0), x_up(n, 0.0);  // cumulative to root
  std::vector<char> vis(n, 0);
  std::queue<int> q;
  q.push(root);
  vis[root] = 1;
  while (!q.empty()) {
    int u = q.front();
    q.pop();
    for (auto [v, k] : adj[u]) {
      if (vis[v]) continue;
      vis[v] = 1;
      parent[v] = u;
      depth[v] = depth[u] + 1;
      const Branch& br = net.branches[k];
      double den = br.g * br.g + br.b * br.b;
      if (den <= 0) throw DataError("branch with zero admittance");
      r_up[v] = r_up[u] + br.g / den;    // r = g / (g^2 + b^2)
      x_up[v] = x_up[u] + (-br.b) / den; // x = -b / (g^2 + b^2)
      q.push(v);
    }
  }

  auto lca = [&](int a, int b) {
    while (depth[a] > depth[b]) a = parent[a];
    while (depth[b] > depth[a]) b = parent[b];
    while (a != b) {
      a = parent[a];
      b = parent[b];
    }
    return a;
  };

  double v0 = net.buses[root].v_base;
  VoltSensitivity s{Eigen::MatrixXd::Zero(n, n), Eigen::MatrixXd::Zero(n, n)};
  for (int i = 0; i < n; ++i) {
    if (i == root) continue;
    for (int j = 0; j < n; ++j) {
      if (j == root) continue;
      int a = lca(i, j);
      s.dv_dp(i, j) = r_up[a] / v0;
      s.dv_dq(i, j) = x_up[a] / v0;
    }
  }
  return s;
}

}  // namespace p2plab
