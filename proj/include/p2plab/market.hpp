#pragma once
// Real-time P2P trading environment: multiple prosumers on a radial feeder,
// 15-minute steps, decentralized observations, shared reward.
//
// Step pipeline: project raw actions -> net exchanges -> pro-rata P2P
// clearing (zero-sum by construction) -> residual to the utility grid ->
// AC power flow -> voltage violations -> shared reward.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "p2plab/common.hpp"
#include "p2plab/network.hpp"
#include "p2plab/prosumer.hpp"

namespace p2plab {

inline constexpr int kObsDim = 9;
inline constexpr int kActDim = 5;
using Obs = std::array<double, kObsDim>;

// Daily TOU price track, shared by all days of a scenario.
struct PriceSchedule {
  std::vector<double> buy, sell, p2p;
  double dso_fee = 0.0;

  void validate(int steps_per_day) const {
    auto n = static_cast<std::size_t>(steps_per_day);
    if (buy.size() != n || sell.size() != n || p2p.size() != n)
      throw DataError("price schedule must cover one day");
    for (std::size_t t = 0; t < n; ++t) {
      if (buy[t] < 0 || sell[t] < 0 || p2p[t] < 0 || dso_fee < 0)
        throw DataError("negative price entry");
      if (sell[t] > buy[t])
        throw DataError("feed-in price above purchase price invites arbitrage");
    }
  }

  PricesAtT at(int t) const {
    return {buy[t], sell[t], p2p[t], dso_fee};
  }
};

// Exogenous series for one agent over the whole scenario horizon
// (steps_per_day * n_days rows).
struct AgentSeries {
  std::vector<double> load_p, load_q, rdg;
};

struct ScenarioData {
  int steps_per_day = 96;
  int n_days = 1;
  std::vector<AgentSeries> agents;

  int total_steps() const { return steps_per_day * n_days; }
  void validate() const {
    if (steps_per_day <= 0 || n_days <= 0)
      throw DataError("bad scenario horizon");
    for (const AgentSeries& a : agents) {
      auto n = static_cast<std::size_t>(total_steps());
      if (a.load_p.size() != n || a.load_q.size() != n || a.rdg.size() != n)
        throw DataError("agent series length != steps_per_day * n_days");
    }
  }
};

// Fully assembled scenario.  Day 0 is held out for validation, the last day
// for testing; days in between are the training pool.
struct Scenario {
  Network net;
  std::vector<ProsumerSpec> prosumers;
  PriceSchedule prices;
  ScenarioData data;
  double dt_hours = 0.25;

  // filled by build()
  std::vector<int> bus_index;                    // per agent
  std::vector<std::array<double, kActDim>> act_lo, act_hi;

  int n_agents() const { return static_cast<int>(prosumers.size()); }
  int validation_day() const { return 0; }
  int test_day() const { return data.n_days - 1; }

  void build() {
    net.validate();
    data.validate();
    prices.validate(data.steps_per_day);
    if (prosumers.size() != data.agents.size())
      throw DataError("prosumer roster and profile series disagree");
    bus_index.clear();
    act_lo.clear();
    act_hi.clear();
    for (std::size_t i = 0; i < prosumers.size(); ++i) {
      const ProsumerSpec& s = prosumers[i];
      s.validate();
      bus_index.push_back(net.index_of(s.bus_id));
      std::array<double, kActDim> lo{}, hi{};
      if (s.cdg) {
        lo[0] = s.cdg->p_min;
        hi[0] = s.cdg->p_max;
      }
      if (s.rdg) {
        hi[1] = s.rdg->s_max;
        lo[2] = -s.rdg->s_max;
        hi[2] = s.rdg->s_max;
      }
      if (s.bess) {
        lo[3] = s.bess->p_min;
        hi[3] = s.bess->p_max;
      }
      if (s.cl) {
        double peak = 0.0;
        for (double v : data.agents[i].load_p) peak = std::max(peak, v);
        hi[4] = s.cl->alpha * peak;
      }
      act_lo.push_back(lo);
      act_hi.push_back(hi);
    }
  }
};

// Pro-rata double-auction clearing of desired net P2P positions (positive =
// wants to buy).  The short market side is served in full, the long side is
// scaled proportionally, so cleared trades sum to zero.
inline std::vector<double> clear_p2p(const std::vector<double>& desired) {
  double buy = 0.0, sell = 0.0;
  for (double d : desired) (d > 0 ? buy : sell) += std::abs(d);
  std::vector<double> out(desired.size(), 0.0);
  if (buy <= 0.0 || sell <= 0.0) return out;
  double matched = std::min(buy, sell);
  double kb = matched / buy, ks = matched / sell;
  for (std::size_t i = 0; i < desired.size(); ++i)
    out[i] = desired[i] > 0 ? desired[i] * kb : desired[i] * ks;
  return out;
}

struct RewardConfig {
  double delta = -1e-3;              // cost-to-reward scale
  double a_pen = -1.0;               // fixed penalty per violating bus
  double c_pen = -1000.0;            // per-unit violation penalty
  double violation_threshold = 0.02; // terminate when any violation exceeds
  bool terminate_on_violation = true;
  double divergence_penalty = -100.0;
};

struct StepInfo {
  Eigen::VectorXd voltages, violations;
  std::vector<Action> executed;
  std::vector<double> p_ex, q_ex, p2p, p_grid;
  std::vector<CostBreakdown> costs;
  bool diverged = false;
  bool violation_stop = false;
  int pf_iterations = 0;
  double total_cost() const {
    double s = 0.0;
    for (const CostBreakdown& c : costs) s += c.total();
    return s;
  }
};

struct StepResult {
  std::vector<Obs> obs;
  double reward = 0.0;
  bool done = false;
  StepInfo info;
};

class TradingEnv {
 public:
  explicit TradingEnv(const Scenario& sc, RewardConfig rc = {})
      : sc_(&sc), rc_(rc) {
    if (sc.bus_index.empty() && sc.n_agents() > 0)
      throw DataError("scenario not built (call Scenario::build)");
  }

  int n_agents() const { return sc_->n_agents(); }
  int steps_per_day() const { return sc_->data.steps_per_day; }
  int t() const { return t_; }
  int day() const { return day_; }
  const Scenario& scenario() const { return *sc_; }
  const RewardConfig& reward_config() const { return rc_; }
  const std::vector<DeviceState>& device_states() const { return st_; }

  // Deterministic for a fixed (day, seed); the environment itself has no
  // stochastic transitions, the seed only feeds the internal rng reserved
  // for future noise hooks.
  std::vector<Obs> reset(int day, std::uint64_t seed = 0) {
    if (day < 0 || day >= sc_->data.n_days) throw DataError("day out of range");
    rng_.seed(seed);
    day_ = day;
    t_ = 0;
    done_ = false;
    st_.assign(n_agents(), DeviceState{});
    p2p_prev_.assign(n_agents(), 0.0);
    v_prev_.assign(n_agents(), 1.0);
    for (int i = 0; i < n_agents(); ++i)
      v_prev_[i] = sc_->net.buses[sc_->bus_index[i]].v_base;
    return observations();
  }

  StepResult step(const std::vector<Action>& raw) {
    if (done_) throw DataError("step on finished episode (reset first)");
    if (static_cast<int>(raw.size()) != n_agents())
      throw DataError("joint action arity mismatch");
    const int n = n_agents();
    const int idx = day_ * steps_per_day() + t_;
    StepResult res;
    StepInfo& info = res.info;

    // 1. project, net exchange, desired position
    info.executed.resize(n);
    info.p_ex.resize(n);
    info.q_ex.resize(n);
    std::vector<double> desired(n);
    for (int i = 0; i < n; ++i) {
      const AgentSeries& ser = sc_->data.agents[i];
      info.executed[i] =
          project_action(raw[i], sc_->prosumers[i], st_[i], ser.rdg[idx],
                         ser.load_p[idx], sc_->dt_hours);
      auto [pex, qex] =
          grid_exchange(info.executed[i], ser.load_p[idx], ser.load_q[idx]);
      info.p_ex[i] = pex;
      info.q_ex[i] = qex;
      desired[i] = -pex;  // exporters offer, importers bid
    }

    // 2. clearing; residual goes to the utility grid
    info.p2p = clear_p2p(desired);
    info.p_grid.resize(n);
    for (int i = 0; i < n; ++i) info.p_grid[i] = -info.p_ex[i] - info.p2p[i];

    // 3. physics: exchanges are bus injections regardless of who the
    //    counterparty is
    Eigen::VectorXd p_inj = Eigen::VectorXd::Zero(sc_->net.n());
    Eigen::VectorXd q_inj = Eigen::VectorXd::Zero(sc_->net.n());
    for (int i = 0; i < n; ++i) {
      p_inj(sc_->bus_index[i]) += info.p_ex[i];
      q_inj(sc_->bus_index[i]) += info.q_ex[i];
    }
    bool diverged = false;
    BusSolution sol;
    try {
      sol = ac_power_flow(sc_->net, p_inj, q_inj);
    } catch (const DivergenceError&) {
      diverged = true;
    }

    // 4. costs + reward
    PricesAtT pr = sc_->prices.at(t_);
    info.costs.resize(n);
    for (int i = 0; i < n; ++i)
      info.costs[i] = operational_cost(info.executed[i], info.p_grid[i],
                                       info.p2p[i], pr, sc_->prosumers[i]);
    if (diverged) {
      info.diverged = true;
      res.reward = rc_.divergence_penalty;
      done_ = true;
    } else {
      info.voltages = sol.v;
      info.violations = voltage_violation(sol.v, sc_->net);
      info.pf_iterations = sol.iterations;
      double r = rc_.delta * info.total_cost();
      double worst = 0.0;
      for (int i = 0; i < sc_->net.n(); ++i) {
        if (info.violations(i) > 0)
          r += rc_.a_pen + rc_.c_pen * info.violations(i);
        worst = std::max(worst, info.violations(i));
      }
      res.reward = r;
      info.violation_stop =
          rc_.terminate_on_violation && worst > rc_.violation_threshold;
      done_ = info.violation_stop;
    }

    // 5. advance slow state
    for (int i = 0; i < n; ++i) {
      const Action& a = info.executed[i];
      st_[i].p_cdg_prev = a.p_cdg;
      if (sc_->prosumers[i].bess)
        st_[i].soc = step_soc(st_[i].soc, a.p_bess, *sc_->prosumers[i].bess,
                              sc_->dt_hours);
      p2p_prev_[i] = info.p2p[i];
      if (!diverged) v_prev_[i] = sol.v(sc_->bus_index[i]);
    }
    ++t_;
    if (t_ >= steps_per_day()) done_ = true;
    res.done = done_;
    res.obs = observations();
    return res;
  }

  // Local observation of agent i at the current (day, t).
  Obs observe(int i) const {
    int tc = std::min(t_, steps_per_day() - 1);  // terminal obs clamps
    int idx = day_ * steps_per_day() + tc;
    const AgentSeries& ser = sc_->data.agents[i];
    return {static_cast<double>(tc) / steps_per_day(),
            sc_->prices.buy[tc],
            sc_->prices.sell[tc],
            ser.rdg[idx],
            ser.load_p[idx],
            st_[i].p_cdg_prev,
            st_[i].soc,
            p2p_prev_[i],
            v_prev_[i]};
  }

  std::vector<Obs> observations() const {
    std::vector<Obs> out;
    out.reserve(n_agents());
    for (int i = 0; i < n_agents(); ++i) out.push_back(observe(i));
    return out;
  }

 private:
  const Scenario* sc_;
  RewardConfig rc_;
  Rng rng_;
  int day_ = 0, t_ = 0;
  bool done_ = true;
  std::vector<DeviceState> st_;
  std::vector<double> p2p_prev_, v_prev_;
};

// Deterministic policy rollout over one day.  The callback maps
// (agent, t, obs) to a raw action in environment units.
struct RolloutStats {
  double total_cost = 0.0;
  double total_reward = 0.0;
  int steps = 0;
  int steps_with_violation = 0;
  int violating_bus_steps = 0;
  int bus_steps = 0;
  bool ended_early = false;

  double violation_rate() const {
    return bus_steps > 0 ? static_cast<double>(violating_bus_steps) / bus_steps
                         : 0.0;
  }
};

using PolicyFn = std::function<Action(int agent, int t, const Obs&)>;

inline RolloutStats evaluate_rollout(TradingEnv& env, int day,
                                     const PolicyFn& policy,
                                     std::uint64_t seed = 0) {
  RolloutStats st;
  std::vector<Obs> obs = env.reset(day, seed);
  const int n = env.n_agents();
  bool done = false;
  while (!done) {
    std::vector<Action> acts(n);
    for (int i = 0; i < n; ++i) acts[i] = policy(i, env.t(), obs[i]);
    StepResult r = env.step(acts);
    st.total_cost += r.info.total_cost();
    st.total_reward += r.reward;
    st.steps += 1;
    if (!r.info.diverged) {
      int viol = 0;
      for (int b = 0; b < r.info.violations.size(); ++b)
        if (r.info.violations(b) > 0) ++viol;
      st.violating_bus_steps += viol;
      st.bus_steps += static_cast<int>(r.info.violations.size());
      if (viol > 0) ++st.steps_with_violation;
    }
    obs = r.obs;
    done = r.done;
  }
  st.ended_early = st.steps < env.steps_per_day();
  return st;
}

}  // namespace p2plab
