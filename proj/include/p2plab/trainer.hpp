#pragma once
// Centralized-critic imitation trainer.  Each agent holds a Gaussian policy,
// twin attention Q critics over the joint state/action, a state value net
// with a Polyak-averaged target, and a dual variable lambda.  Per batch:
//
//   L_Q  = 1/2 E[(Q(s,a) - y)^2],  y = r + gamma * Vbar(s')  (y = r when done)
//   L_V  = E[(V(s) - min_z Q_z(s, a~pi))^2]   (gradient reaches only V)
//   L_pi = E[-min_z Q_z(s, a~pi) + lambda * (W2 - eps)]
//   lambda <- max(0, lambda + lr_lambda * (mean W2 - eps))
//
// where W2 is the 2-Wasserstein distance between the policy Gaussian (in raw
// pre-squash space) and a point mass at the expert action.  Replay keeps
// violation transitions in a separate prioritized buffer and mixes the two at
// a fixed ratio.

#include <p2plab/checkpoint.hpp>
#include <p2plab/config.hpp>
#include <p2plab/expert.hpp>
#include <p2plab/market.hpp>
#include <p2plab/nets.hpp>
#include <p2plab/replay.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

namespace p2plab::train {

using nets::Mat;
using nets::Tape;
using nets::Var;
using replay::DualReplay;
using replay::SampleRef;
using replay::Transition;

// ---------------------------------------------------------------------------
// Wasserstein-2 distance between a diagonal Gaussian and a point target:
//   W2^2(N(mu, diag sigma^2), delta_a) = |mu - a|^2 + sum_d sigma_d^2.
// ---------------------------------------------------------------------------

inline double w2_gaussian_dirac(const std::vector<double>& mu,
                                const std::vector<double>& sigma,
                                const std::vector<double>& a) {
  if (mu.size() != sigma.size() || mu.size() != a.size())
    throw NumericalError("w2: dimension mismatch");
  double s = 0.0;
  for (std::size_t d = 0; d < mu.size(); ++d) {
    double dm = mu[d] - a[d];
    s += dm * dm + sigma[d] * sigma[d];
  }
  return std::sqrt(s);
}

// Batched in-graph version: mu, sigma, target are B x D, result is B x 1.
inline Var w2_rows(Tape& t, Var mu, Var sigma, Var target) {
  Var d = t.sub(mu, target);
  return t.sqrt(t.sum_rows(t.add(t.square(d), t.square(sigma))));
}

// Pre-squash expert target.  Components whose action range collapses to a
// point (device absent) carry no information; pin their raw target at zero
// instead of feeding atanh a degenerate coordinate.
inline double expert_raw_target(double a, double lo, double hi) {
  return hi - lo > 1e-12 ? nets::unsquash(a, lo, hi) : 0.0;
}

// ---------------------------------------------------------------------------
// Replayed batch, split into per-agent views.  Expert actions are mapped back
// to raw pre-squash space so they live where the policy Gaussian does.
// ---------------------------------------------------------------------------

struct Batch {
  int B = 0, n = 0;
  std::vector<Mat> obs, act, next_obs;  // per agent, B x dim
  std::vector<Mat> expert_raw;          // per agent, B x act, pre-squash
  Mat reward, bootmask;                 // B x 1; bootmask = gamma * (1 - done)
  std::vector<Mat> lo, hi;              // per agent 1 x act bound rows
  std::vector<SampleRef> refs;          // for the priority refresh
};

inline Batch make_batch(const DualReplay& buf, std::vector<SampleRef> refs,
                        const Scenario& sc, double gamma) {
  const int n = sc.n_agents();
  const int B = static_cast<int>(refs.size());
  Batch bt;
  bt.B = B;
  bt.n = n;
  bt.refs = std::move(refs);
  bt.reward = Mat(B, 1);
  bt.bootmask = Mat(B, 1);
  for (int i = 0; i < n; ++i) {
    bt.obs.emplace_back(B, kObsDim);
    bt.act.emplace_back(B, kActDim);
    bt.next_obs.emplace_back(B, kObsDim);
    bt.expert_raw.emplace_back(B, kActDim);
    Mat lo(1, kActDim), hi(1, kActDim);
    for (int d = 0; d < kActDim; ++d) {
      lo.a[d] = sc.act_lo[i][d];
      hi.a[d] = sc.act_hi[i][d];
    }
    bt.lo.push_back(std::move(lo));
    bt.hi.push_back(std::move(hi));
  }
  for (int b = 0; b < B; ++b) {
    const Transition& tr = buf.get(bt.refs[b]);
    if (static_cast<int>(tr.state.size()) != n * kObsDim ||
        static_cast<int>(tr.action.size()) != n * kActDim)
      throw DataError("batch: transition layout mismatch");
    bt.reward.a[b] = tr.reward;
    bt.bootmask.a[b] = tr.done ? 0.0 : gamma;
    for (int i = 0; i < n; ++i) {
      for (int d = 0; d < kObsDim; ++d) {
        bt.obs[i].at(b, d) = tr.state[i * kObsDim + d];
        bt.next_obs[i].at(b, d) = tr.next_state[i * kObsDim + d];
      }
      for (int d = 0; d < kActDim; ++d) {
        bt.act[i].at(b, d) = tr.action[i * kActDim + d];
        bt.expert_raw[i].at(b, d) = expert_raw_target(
            tr.expert[i * kActDim + d], bt.lo[i].a[d], bt.hi[i].a[d]);
      }
    }
  }
  return bt;
}

// ---------------------------------------------------------------------------
// Adam over a named parameter set.
// ---------------------------------------------------------------------------

struct Adam {
  double lr = 1e-4, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  int t = 0;
  std::vector<Mat> m, v;

  void init(const nets::ParamSet& ps) {
    t = 0;
    m.clear();
    v.clear();
    for (const auto& it : ps.items) {
      m.emplace_back(it.m->rows, it.m->cols, 0.0);
      v.emplace_back(it.m->rows, it.m->cols, 0.0);
    }
  }

  void step(nets::ParamSet& ps, const std::vector<Mat>& grads) {
    if (grads.size() != ps.items.size() || m.size() != ps.items.size())
      throw NumericalError("adam: parameter/gradient count mismatch");
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, t);
    const double bc2 = 1.0 - std::pow(beta2, t);
    for (std::size_t k = 0; k < ps.items.size(); ++k) {
      Mat& th = *ps.items[k].m;
      const Mat& g = grads[k];
      if (g.rows != th.rows || g.cols != th.cols)
        throw NumericalError("adam: gradient shape mismatch at " +
                             ps.items[k].name);
      for (std::size_t j = 0; j < th.a.size(); ++j) {
        m[k].a[j] = beta1 * m[k].a[j] + (1.0 - beta1) * g.a[j];
        v[k].a[j] = beta2 * v[k].a[j] + (1.0 - beta2) * g.a[j] * g.a[j];
        th.a[j] -= lr * (m[k].a[j] / bc1) / (std::sqrt(v[k].a[j] / bc2) + eps);
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Loss operators.  Frozen-vs-tracked attachment encodes which parameters each
// loss is allowed to move; the tests assert those contracts by gradient.
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<Var> const_views(Tape& t, const std::vector<Mat>& ms) {
  std::vector<Var> out;
  out.reserve(ms.size());
  for (const Mat& m : ms) out.push_back(t.constant(m));
  return out;
}

// Fresh-action branch shared by the value and actor losses: sample
// a_i = squash(mu + sigma * z) for one agent, keep the replayed actions for
// the others, and score the joint through both Q twins with frozen weights
// (gradients can then reach the action but never theta).
struct FreshQ {
  nets::PolicyOut po;
  Var action;  // squashed, env scale
  Var minq;    // B x 1
};

inline FreshQ fresh_minq(Tape& t, nets::CriticBundle& cb,
                         nets::GaussianPolicy& pol, const Batch& bt, int agent,
                         const Mat& z, bool track_policy) {
  std::vector<Var> ov = const_views(t, bt.obs);
  std::vector<Var> av = const_views(t, bt.act);
  FreshQ f;
  f.po = pol.forward(t, ov[agent], /*frozen=*/!track_policy);
  Var u = pol.rsample(t, f.po, z);
  f.action = nets::squash_actions(t, u, bt.lo[agent], bt.hi[agent]);
  av[agent] = f.action;
  auto tok = cb.q_tokens(t, ov, av);
  Var q1 = cb.q1.forward(t, tok, /*frozen=*/true);
  Var q2 = cb.q2.forward(t, tok, /*frozen=*/true);
  f.minq = t.minimum(q1, q2);
  return f;
}

}  // namespace detail

struct QLossOut {
  Var loss;      // scalar: 1/2 mean[(Q1-y)^2 + (Q2-y)^2]
  Var q1, q2, y; // B x 1 pieces, kept for the priority refresh
};

// Replayed actions against the bootstrapped target.  The target value net is
// always frozen; track=false freezes the Q twins too (for probing).
inline QLossOut q_loss(Tape& t, nets::CriticBundle& cb, const Batch& bt,
                       bool track = true) {
  std::vector<Var> ov = detail::const_views(t, bt.obs);
  std::vector<Var> av = detail::const_views(t, bt.act);
  std::vector<Var> ov2 = detail::const_views(t, bt.next_obs);
  auto tok = cb.q_tokens(t, ov, av);
  QLossOut out;
  out.q1 = cb.q1.forward(t, tok, /*frozen=*/!track);
  out.q2 = cb.q2.forward(t, tok, /*frozen=*/!track);
  Var vbar = cb.v_target.forward(t, ov2, /*frozen=*/true);
  out.y = t.add(t.constant(bt.reward), t.mul(vbar, t.constant(bt.bootmask)));
  Var l1 = t.mean(t.square(t.sub(out.q1, out.y)));
  Var l2 = t.mean(t.square(t.sub(out.q2, out.y)));
  out.loss = t.scale(t.add(l1, l2), 0.5);
  return out;
}

struct VLossOut {
  Var loss;
};

// V regresses onto min_z Q_z at a freshly sampled policy action.  The sampled
// min-Q enters as a detached constant, and the policy/Q nets are attached
// frozen, so the only trainable leaves are the V parameters.
inline VLossOut v_loss(Tape& t, nets::CriticBundle& cb,
                       nets::GaussianPolicy& pol, const Batch& bt, int agent,
                       const Mat& z) {
  detail::FreshQ f =
      detail::fresh_minq(t, cb, pol, bt, agent, z, /*track_policy=*/false);
  Var target = t.constant(f.minq.val());  // stop-gradient
  std::vector<Var> ov = detail::const_views(t, bt.obs);
  Var v = cb.v.forward(t, ov, /*frozen=*/false);
  return {t.mean(t.square(t.sub(v, target)))};
}

struct ActorLossOut {
  Var loss;
  Var w2;               // B x 1 distances in raw action space
  double w2_mean = 0.0; // batch mean, feeds the dual update
};

// Reparameterized policy loss: push min-Q up, keep the Gaussian inside the
// W2 ball around the expert.  Q weights are frozen; gradients flow through
// the sampled action and through (mu, sigma) in the W2 term.
inline ActorLossOut actor_loss(Tape& t, nets::CriticBundle& cb,
                               nets::GaussianPolicy& pol, const Batch& bt,
                               int agent, const Mat& z, double lambda,
                               double epsilon) {
  detail::FreshQ f =
      detail::fresh_minq(t, cb, pol, bt, agent, z, /*track_policy=*/true);
  ActorLossOut out;
  out.w2 = w2_rows(t, f.po.mu, f.po.sigma, t.constant(bt.expert_raw[agent]));
  Var w2m = t.mean(out.w2);
  out.w2_mean = w2m.val().a[0];
  out.loss = t.add(t.scale(t.mean(f.minq), -1.0),
                   t.scale(w2m, lambda, -lambda * epsilon));
  return out;
}

// Projected dual ascent on the expert-distance constraint.
inline double lambda_update(double lambda, double w2_mean, double epsilon,
                            double lr_lambda) {
  return std::max(0.0, lambda + lr_lambda * (w2_mean - epsilon));
}

// ---------------------------------------------------------------------------
// Expert schedules, precomputed per day and looked up during training.
// ---------------------------------------------------------------------------

struct ExpertCache {
  // days[day][agent][t] holds verified env-scale actions.
  std::map<int, std::vector<std::vector<Action>>> days;

  bool has(int day) const { return days.count(day) > 0; }

  const Action& at(int day, int agent, int t) const {
    auto it = days.find(day);
    if (it == days.end())
      throw DataError("expert cache: no schedule for day " +
                      std::to_string(day));
    const auto& per_agent = it->second;
    if (agent < 0 || agent >= static_cast<int>(per_agent.size()) || t < 0 ||
        t >= static_cast<int>(per_agent[agent].size()))
      throw DataError("expert cache: index out of range");
    return per_agent[agent][t];
  }
};

// Days the trainer will touch: every training day plus the validation and
// test days (all days collapse together on scenarios too short to split).
inline std::vector<int> schedule_days(const Scenario& sc) {
  std::vector<int> out;
  for (int d = 0; d < sc.data.n_days; ++d) out.push_back(d);
  return out;
}

inline ExpertCache compute_expert_cache(const Scenario& sc,
                                        const std::vector<int>& days,
                                        GeneratorBackend& backend,
                                        const ExpertOptions& opts = {}) {
  ExpertCache cache;
  for (int day : days) {
    if (cache.has(day)) continue;
    auto schedules = plan_and_verify(sc, day, backend, opts);
    std::vector<std::vector<Action>> per_agent;
    for (const auto& s : schedules) per_agent.push_back(s.actions);
    cache.days.emplace(day, std::move(per_agent));
  }
  return cache;
}

inline void save_expert_cache(const std::filesystem::path& path,
                              const ExpertCache& cache) {
  nlohmann::json j;
  for (const auto& [day, per_agent] : cache.days) {
    nlohmann::json agents = nlohmann::json::array();
    for (const auto& acts : per_agent) {
      nlohmann::json steps = nlohmann::json::array();
      for (const Action& a : acts) steps.push_back(a.as_array());
      agents.push_back(std::move(steps));
    }
    j[std::to_string(day)] = std::move(agents);
  }
  std::ofstream f(path);
  if (!f) throw DataError("expert cache: cannot write " + path.string());
  f << j.dump(1) << "\n";
}

inline ExpertCache load_expert_cache(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw DataError("expert cache: cannot read " + path.string());
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("expert cache: bad JSON in " + path.string() + ": " +
                    e.what());
  }
  ExpertCache cache;
  for (auto it = j.begin(); it != j.end(); ++it) {
    int day = std::stoi(it.key());
    std::vector<std::vector<Action>> per_agent;
    for (const auto& steps : it.value()) {
      std::vector<Action> acts;
      for (const auto& arr : steps) {
        std::array<double, 5> a{};
        for (int d = 0; d < 5; ++d) a[d] = arr.at(d).get<double>();
        acts.push_back(Action::from_array(a));
      }
      per_agent.push_back(std::move(acts));
    }
    cache.days.emplace(day, std::move(per_agent));
  }
  return cache;
}

// ---------------------------------------------------------------------------
// Per-agent learner: nets + optimizer + dual variable.
// ---------------------------------------------------------------------------

inline nets::AttnKind parse_attn_kind(const std::string& s) {
  if (s == "differential") return nets::AttnKind::Differential;
  if (s == "standard") return nets::AttnKind::Standard;
  throw ConfigError("unknown critic kind: " + s);
}

struct AgentLearner {
  nets::GaussianPolicy policy;
  nets::CriticBundle critic;
  double lambda = 0.0;
  Adam opt;
  nets::ParamSet params;  // trainable: policy + q1 + q2 + v (never v_target)

  void init(const Scenario& sc, const HyperParams& hp, double lambda0,
            Rng& rng) {
    policy.init({kObsDim, kActDim, hp.policy_hidden}, rng);
    nets::CriticConfig cc;
    cc.n_agents = sc.n_agents();
    cc.obs_dim = kObsDim;
    cc.act_dim = kActDim;
    cc.d_model = hp.critic_d_model;
    cc.heads = hp.critic_heads;
    cc.d_k = hp.critic_d_k;
    cc.xi_init = hp.critic_xi_init;
    cc.kind = parse_attn_kind(hp.critic_kind);
    cc.embed_hidden = hp.critic_hidden;
    cc.out_hidden = hp.critic_hidden;
    critic.init(cc, rng);
    lambda = lambda0;
    params = nets::ParamSet{};
    policy.collect(params, "pi");
    critic.q1.collect(params, "q1");
    critic.q2.collect(params, "q2");
    critic.v.collect(params, "v");
    opt = Adam{};
    opt.lr = hp.lr;
    opt.init(params);
  }

  // Everything, including the target net, for checkpointing.
  nets::ParamSet full_params() {
    nets::ParamSet ps;
    policy.collect(ps, "pi");
    critic.collect(ps, "critic");
    return ps;
  }
};

// ---------------------------------------------------------------------------
// Evaluation: deterministic policy rollout scored against the expert.
// ---------------------------------------------------------------------------

struct EvalRecord {
  int episode = -1;
  int day = -1;
  double cost = 0.0;         // realized operational cost, policy
  double expert_cost = 0.0;  // realized operational cost, expert rollout
  double reward = 0.0;
  double violation_rate = 0.0;  // violating bus-steps / bus-steps
  double w2 = 0.0;              // mean raw-space W2 to the expert actions
  double deviation = 0.0;       // |cost - expert| / expert * 100
  double gap = 0.0;             // mean per-component relative action error, %
  double accuracy = 0.0;        // 100 - (gap + deviation) / 2
  bool ended_early = false;
};

inline constexpr double kGapFloor = 1e-3;  // reference components below this
                                           // are skipped in the gap metric

// Realized cost of the expert schedule on one day (full env rollout).
inline double expert_rollout_cost(const Scenario& sc, const ExpertCache& cache,
                                  int day, const RewardConfig& rc,
                                  std::uint64_t seed) {
  TradingEnv env(sc, rc);
  PolicyFn pol = [&cache, day](int agent, int t, const Obs&) {
    return cache.at(day, agent, t);
  };
  return evaluate_rollout(env, day, pol, seed).total_cost;
}

// Deterministic-mean rollout of trained learners on one day, scored against
// the expert schedule: realized cost, violation share, raw-space W2 to the
// expert actions, and the cost/action agreement metrics.
inline EvalRecord evaluate_policy(
    const Scenario& sc, const std::vector<std::unique_ptr<AgentLearner>>& ls,
    const ExpertCache& cache, int day, const RewardConfig& rc,
    std::uint64_t env_seed,
    double expert_cost_hint = std::numeric_limits<double>::quiet_NaN()) {
  EvalRecord r;
  r.day = day;
  r.expert_cost = std::isfinite(expert_cost_hint)
                      ? expert_cost_hint
                      : expert_rollout_cost(sc, cache, day, rc, env_seed);
  TradingEnv env(sc, rc);
  std::vector<Obs> obs = env.reset(day, env_seed);
  const int n = static_cast<int>(ls.size());
  double w2_sum = 0.0, gap_sum = 0.0;
  long w2_count = 0, gap_count = 0;
  int viol_buses = 0, bus_steps = 0;
  while (true) {
    const int t = env.t();
    std::vector<Action> acts(n);
    for (int i = 0; i < n; ++i) {
      std::vector<double> o(obs[i].begin(), obs[i].end());
      nets::GaussianPolicy::Stats st = ls[i]->policy.stats(o);
      std::array<double, 5> a{};
      for (int d = 0; d < kActDim; ++d)
        a[d] = nets::squash(st.mu[d], sc.act_lo[i][d], sc.act_hi[i][d]);
      acts[i] = Action::from_array(a);
      std::array<double, 5> ex_arr = cache.at(day, i, t).as_array();
      std::vector<double> ex_raw(kActDim);
      for (int d = 0; d < kActDim; ++d)
        ex_raw[d] =
            expert_raw_target(ex_arr[d], sc.act_lo[i][d], sc.act_hi[i][d]);
      w2_sum += w2_gaussian_dirac(st.mu, st.sigma, ex_raw);
      ++w2_count;
      for (int d = 0; d < kActDim; ++d) {
        if (std::abs(ex_arr[d]) <= kGapFloor) continue;
        gap_sum += 100.0 * std::abs(a[d] - ex_arr[d]) / std::abs(ex_arr[d]);
        ++gap_count;
      }
    }
    StepResult sr = env.step(acts);
    r.cost += sr.info.total_cost();
    r.reward += sr.reward;
    for (int b = 0; b < sr.info.violations.size(); ++b)
      if (sr.info.violations(b) > 0) ++viol_buses;
    bus_steps += static_cast<int>(sr.info.violations.size());
    obs = sr.obs;
    if (sr.done) {
      r.ended_early = sr.info.violation_stop || sr.info.diverged;
      break;
    }
  }
  r.violation_rate = bus_steps > 0 ? double(viol_buses) / bus_steps : 0.0;
  r.w2 = w2_count > 0 ? w2_sum / w2_count : 0.0;
  r.gap = gap_count > 0 ? gap_sum / gap_count : 0.0;
  r.deviation = 100.0 * std::abs(r.cost - r.expert_cost) /
                std::max(std::abs(r.expert_cost), 1e-9);
  r.accuracy = 100.0 - (r.gap + r.deviation) / 2.0;
  return r;
}

// Scores the expert schedule against itself: cost deviation and action gap
// are identically zero, so Accuracy lands exactly at 100.  Used as the
// reference point for evaluation reports.
inline EvalRecord evaluate_expert(const Scenario& sc, const ExpertCache& cache,
                                  int day, const RewardConfig& rc = {},
                                  std::uint64_t seed = 0) {
  TradingEnv env(sc, rc);
  PolicyFn pol = [&cache, day](int agent, int t, const Obs&) {
    return cache.at(day, agent, t);
  };
  RolloutStats st = evaluate_rollout(env, day, pol, seed);
  EvalRecord r;
  r.day = day;
  r.cost = st.total_cost;
  r.expert_cost = st.total_cost;
  r.reward = st.total_reward;
  r.violation_rate = st.violation_rate();
  r.ended_early = st.ended_early;
  r.accuracy = 100.0;
  return r;
}

// ---------------------------------------------------------------------------
// Trainer.
// ---------------------------------------------------------------------------

struct TrainOptions {
  std::uint64_t seed = 0;
  bool expert_constraint = true;  // false pins lambda at zero (ablation)
  std::filesystem::path out_dir;  // metrics + checkpoints; empty = in-memory
  RewardConfig reward;
};

struct TrainResult {
  std::vector<EvalRecord> validation;  // periodic validation-day probes
  EvalRecord test;                     // final test-day evaluation
  std::vector<double> w2_by_episode;   // NaN when an episode had no updates
  std::vector<double> final_lambda;
  int updates = 0;
  std::filesystem::path metrics_path;
};

class Trainer {
 public:
  Trainer(const Scenario& sc, const HyperParams& hp, const ExpertCache& cache,
          TrainOptions opt = {})
      : sc_(&sc),
        hp_(hp),
        cache_(&cache),
        opt_(std::move(opt)),
        env_(sc, opt_.reward),
        buffer_(static_cast<std::size_t>(hp.buffer_size), hp.per_alpha,
                hp.per_floor),
        master_(opt_.seed) {
    validate(hp_);
    for (int d = 0; d < sc.data.n_days; ++d) {
      if (sc.data.n_days > 2 && (d == sc.validation_day() || d == sc.test_day()))
        continue;
      train_days_.push_back(d);
    }
    if (train_days_.empty()) train_days_.push_back(0);
    std::vector<int> needed = train_days_;
    needed.push_back(sc.validation_day());
    needed.push_back(sc.test_day());
    for (int d : needed)
      if (!cache_->has(d))
        throw DataError("trainer: expert schedule missing for day " +
                        std::to_string(d));
    // One deterministic sub-stream per consumer, all derived from the seed.
    Rng init_rng(master_());
    roll_rng_.seed(master_());
    batch_rng_.seed(master_());
    noise_rng_.seed(master_());
    for (int i = 0; i < sc.n_agents(); ++i) {
      auto l = std::make_unique<AgentLearner>();
      l->init(sc, hp_, opt_.expert_constraint ? hp_.lambda_init : 0.0,
              init_rng);
      learners_.push_back(std::move(l));
    }
    if (!opt_.out_dir.empty()) {
      std::filesystem::create_directories(opt_.out_dir);
      metrics_path_ = opt_.out_dir / "metrics.jsonl";
      log_.open(metrics_path_, std::ios::trunc);
      if (!log_)
        throw DataError("trainer: cannot write " + metrics_path_.string());
      nlohmann::json j{{"type", "run"},
                       {"version", kVersion},
                       {"seed", opt_.seed},
                       {"config_hash", config_hash(hp_)},
                       {"agents", sc.n_agents()},
                       {"expert_constraint", opt_.expert_constraint}};
      log_ << j.dump() << "\n";
    }
  }

  int n_agents() const { return static_cast<int>(learners_.size()); }
  AgentLearner& learner(int i) { return *learners_[i]; }
  const std::vector<int>& train_days() const { return train_days_; }

  TrainResult run() {
    TrainResult res;
    res.metrics_path = metrics_path_;
    for (int ep = 0; ep < hp_.episodes; ++ep) {
      const double eps_now = epsilon_at(hp_, ep);
      const int day = train_days_[ep % train_days_.size()];
      ep_w2_sum_ = 0.0;
      ep_w2_count_ = 0;
      rollout_episode(day, ep, eps_now);
      res.w2_by_episode.push_back(
          ep_w2_count_ > 0 ? ep_w2_sum_ / ep_w2_count_
                           : std::numeric_limits<double>::quiet_NaN());
      if (hp_.eval_every > 0 && (ep + 1) % hp_.eval_every == 0) {
        EvalRecord r = evaluate(sc_->validation_day());
        r.episode = ep;
        log_eval(r, "validation");
        res.validation.push_back(r);
      }
    }
    res.test = evaluate(sc_->test_day());
    res.test.episode = hp_.episodes - 1;
    log_eval(res.test, "test");
    for (auto& l : learners_) res.final_lambda.push_back(l->lambda);
    res.updates = updates_;
    if (!opt_.out_dir.empty()) save_checkpoints(opt_.out_dir);
    if (log_.is_open()) log_.flush();
    return res;
  }

  // Deterministic-mean rollout on one day against the expert schedule; the
  // realized expert cost is memoized per day.
  EvalRecord evaluate(int day) {
    const std::uint64_t es = opt_.seed ^ (0x9e3779b97f4a7c15ull * (day + 1));
    return evaluate_policy(*sc_, learners_, *cache_, day, opt_.reward, es,
                           expert_cost(day));
  }

  void save_checkpoints(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    for (std::size_t i = 0; i < learners_.size(); ++i) {
      nets::ParamSet ps = learners_[i]->full_params();
      save_checkpoint(dir / ("agent" + std::to_string(i)), ps,
                      {opt_.seed, config_hash(hp_)});
    }
  }

  void load_checkpoints(const std::filesystem::path& dir) {
    for (std::size_t i = 0; i < learners_.size(); ++i) {
      nets::ParamSet ps = learners_[i]->full_params();
      CheckpointMeta meta =
          load_checkpoint(dir / ("agent" + std::to_string(i)), ps);
      if (meta.config_hash != config_hash(hp_))
        throw DataError("checkpoint " + std::to_string(i) +
                        " was trained under a different configuration");
    }
  }

 private:
  void rollout_episode(int day, int episode, double eps_now) {
    const std::uint64_t ep_seed = roll_rng_();
    std::vector<Obs> obs = env_.reset(day, ep_seed);
    const int n = n_agents();
    const int T = sc_->data.steps_per_day;
    for (int t = 0; t < T; ++t) {
      Transition tr;
      tr.state.reserve(n * kObsDim);
      for (int i = 0; i < n; ++i)
        tr.state.insert(tr.state.end(), obs[i].begin(), obs[i].end());
      std::vector<Action> acts(n);
      tr.action.reserve(n * kActDim);
      tr.expert.reserve(n * kActDim);
      for (int i = 0; i < n; ++i) {
        std::vector<double> o(obs[i].begin(), obs[i].end());
        std::vector<double> u = learners_[i]->policy.act(o, roll_rng_, false);
        std::array<double, 5> a{};
        for (int d = 0; d < kActDim; ++d)
          a[d] = nets::squash(u[d], sc_->act_lo[i][d], sc_->act_hi[i][d]);
        acts[i] = Action::from_array(a);
        tr.action.insert(tr.action.end(), a.begin(), a.end());
        std::array<double, 5> ex = cache_->at(day, i, t).as_array();
        tr.expert.insert(tr.expert.end(), ex.begin(), ex.end());
      }
      StepResult sr = env_.step(acts);
      tr.reward = sr.reward;
      tr.done = sr.done;
      tr.next_state.reserve(n * kObsDim);
      for (int i = 0; i < n; ++i)
        tr.next_state.insert(tr.next_state.end(), sr.obs[i].begin(),
                             sr.obs[i].end());
      for (int b = 0; b < sr.info.violations.size(); ++b)
        if (sr.info.violations(b) > 0) {
          tr.violation = true;
          break;
        }
      buffer_.push(tr, max_loss_seen_);
      ++global_step_;
      if (buffer_.size() >= static_cast<std::size_t>(hp_.batch) &&
          global_step_ % hp_.update_every == 0)
        do_update(episode, eps_now);
      obs = sr.obs;
      if (sr.done) break;
    }
  }

  void do_update(int episode, double eps_now) {
    auto refs = buffer_.sample(hp_.batch, hp_.k, batch_rng_);
    Batch bt = make_batch(buffer_, std::move(refs), *sc_, hp_.gamma);
    std::vector<double> td(bt.B, 0.0);
    nlohmann::json agents_log = nlohmann::json::array();
    const int n = n_agents();
    for (int i = 0; i < n; ++i) {
      AgentLearner& L = *learners_[i];
      Mat z(bt.B, kActDim);
      std::normal_distribution<double> gauss(0.0, 1.0);
      for (auto& v : z.a) v = gauss(noise_rng_);
      // One tape carries all three losses; the separate loss operators above
      // define the attachment contracts this composition reproduces.
      Tape t;
      QLossOut ql = q_loss(t, L.critic, bt, /*track=*/true);
      detail::FreshQ f = detail::fresh_minq(t, L.critic, L.policy, bt, i, z,
                                            /*track_policy=*/true);
      Var w2 = w2_rows(t, f.po.mu, f.po.sigma, t.constant(bt.expert_raw[i]));
      Var w2m = t.mean(w2);
      const double w2_mean = w2m.val().a[0];
      Var lpi = t.add(t.scale(t.mean(f.minq), -1.0),
                      t.scale(w2m, L.lambda, -L.lambda * eps_now));
      // The same fresh sample serves the value target; re-injecting its value
      // as a constant is the stop-gradient, so only V's parameters move.
      Var vtar = t.constant(f.minq.val());
      std::vector<Var> ov = detail::const_views(t, bt.obs);
      Var v = L.critic.v.forward(t, ov, /*frozen=*/false);
      Var lv = t.mean(t.square(t.sub(v, vtar)));
      Var total = t.add(t.add(ql.loss, lv), lpi);
      const double lq_v = ql.loss.val().a[0];
      const double lv_v = lv.val().a[0];
      const double lpi_v = lpi.val().a[0];
      if (!std::isfinite(lq_v) || !std::isfinite(lv_v) ||
          !std::isfinite(lpi_v) || !std::isfinite(w2_mean))
        abort_non_finite(episode, i, lq_v, lv_v, lpi_v, w2_mean);
      t.backward(total);
      std::vector<Mat> grads;
      grads.reserve(L.params.items.size());
      for (const auto& it : L.params.items) grads.push_back(t.grad_of(*it.m));
      L.opt.step(L.params, grads);
      if (opt_.expert_constraint)
        L.lambda = lambda_update(L.lambda, w2_mean, eps_now, hp_.lr_lambda);
      L.critic.polyak(hp_.tau);
      // Per-sample TD loss, averaged over agents, refreshes priorities.
      for (int b = 0; b < bt.B; ++b) {
        double d1 = ql.q1.val().a[b] - ql.y.val().a[b];
        double d2 = ql.q2.val().a[b] - ql.y.val().a[b];
        td[b] += 0.5 * (d1 * d1 + d2 * d2) / n;
      }
      ep_w2_sum_ += w2_mean;
      ++ep_w2_count_;
      if (log_.is_open())
        agents_log.push_back({{"lq", lq_v},
                              {"lv", lv_v},
                              {"lpi", lpi_v},
                              {"w2", w2_mean},
                              {"lambda", L.lambda}});
    }
    for (int b = 0; b < bt.B; ++b) {
      buffer_.update(bt.refs[b], td[b]);
      max_loss_seen_ = std::max(max_loss_seen_, td[b]);
    }
    ++updates_;
    if (log_.is_open()) {
      nlohmann::json j{{"type", "update"},
                       {"episode", episode},
                       {"step", global_step_},
                       {"update", updates_},
                       {"epsilon", eps_now},
                       {"agents", std::move(agents_log)}};
      log_ << j.dump() << "\n";
    }
  }

  [[noreturn]] void abort_non_finite(int episode, int agent, double lq,
                                     double lv, double lpi, double w2) {
    if (!opt_.out_dir.empty()) {
      nlohmann::json j{{"episode", episode}, {"step", global_step_},
                       {"agent", agent},     {"lq", lq},
                       {"lv", lv},           {"lpi", lpi},
                       {"w2", w2},           {"lambda", learners_[agent]->lambda}};
      std::ofstream f(opt_.out_dir / "diagnostics.json");
      f << j.dump(1) << "\n";
    }
    throw NumericalError(
        "train: non-finite loss at episode " + std::to_string(episode) +
        " step " + std::to_string(global_step_) + " agent " +
        std::to_string(agent));
  }

  double expert_cost(int day) {
    auto it = expert_cost_.find(day);
    if (it != expert_cost_.end()) return it->second;
    double c = expert_rollout_cost(*sc_, *cache_, day, opt_.reward, opt_.seed);
    expert_cost_[day] = c;
    return c;
  }

  void log_eval(const EvalRecord& r, const char* split) {
    if (!log_.is_open()) return;
    nlohmann::json j{{"type", "eval"},
                     {"split", split},
                     {"episode", r.episode},
                     {"day", r.day},
                     {"cost", r.cost},
                     {"expert_cost", r.expert_cost},
                     {"reward", r.reward},
                     {"violation_rate", r.violation_rate},
                     {"w2", r.w2},
                     {"deviation", r.deviation},
                     {"gap", r.gap},
                     {"accuracy", r.accuracy},
                     {"ended_early", r.ended_early}};
    log_ << j.dump() << "\n";
  }

  const Scenario* sc_;
  HyperParams hp_;
  const ExpertCache* cache_;
  TrainOptions opt_;
  TradingEnv env_;
  DualReplay buffer_;
  Rng master_, roll_rng_, batch_rng_, noise_rng_;
  std::vector<std::unique_ptr<AgentLearner>> learners_;
  std::vector<int> train_days_;
  double max_loss_seen_ = 1.0;
  long global_step_ = 0;
  int updates_ = 0;
  double ep_w2_sum_ = 0.0;
  long ep_w2_count_ = 0;
  std::ofstream log_;
  std::filesystem::path metrics_path_;
  std::map<int, double> expert_cost_;
};

}  // namespace p2plab::train
