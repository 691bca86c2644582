// Acceptance gate: ten pinned criteria covering the transport-distance
// oracle, attention algebra, gradient correctness, power-flow accuracy,
// expert optimality, workflow repair, replay ratios, market accounting, the
// scaled imitation experiment, and bitwise reproducibility.  Each criterion
// prints one PASS/FAIL line; the exit code is the number of failures.

#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "fd_check.hpp"
#include "p2plab/cli.hpp"

using namespace p2plab;
using namespace p2plab::train;
using ad::Mat;
using ad::Tape;
using ad::Var;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void report(int idx, bool ok, const std::string& name,
            const std::string& detail) {
  std::printf("[%2d] %s  %s (%s)\n", idx, ok ? "PASS" : "FAIL", name.c_str(),
              detail.c_str());
  std::fflush(stdout);
  if (!ok) ++g_failures;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
      .count();
}

std::string fmt(const char* f, ...) {
  char buf[256];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

// Acklam's rational approximation of the standard normal quantile, good to
// ~1e-9 over (0, 1).
double norm_quantile(double p) {
  static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                             -2.759285104469687e+02, 1.383577518672690e+02,
                             -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                             -1.556989798598866e+02, 6.680131188771972e+01,
                             -1.328068155288572e+01};
  static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                             -2.400758277161838e+00, -2.549732539343734e+00,
                             4.374664141464968e+00,  2.938163982698783e+00};
  static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                             2.445134137142996e+00, 3.754408661907416e+00};
  const double pl = 0.02425;
  if (p < pl) {
    double q = std::sqrt(-2.0 * std::log(p));
    return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q +
            c[5]) /
           ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  if (p > 1.0 - pl) return -norm_quantile(1.0 - p);
  double q = p - 0.5, r = q * q;
  return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) *
         q /
         (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
}

Mat randn(int r, int c, Rng& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Mat m(r, c);
  for (auto& v : m.a) v = g(rng);
  return m;
}

std::vector<Mat*> collected(nets::ParamSet& ps) {
  std::vector<Mat*> out;
  for (auto& it : ps.items) out.push_back(it.m);
  return out;
}

// Random but layout-correct transitions pushed through the replay path.
Batch random_batch(const Scenario& sc, int B, Rng& rng, double gamma) {
  replay::DualReplay buf(64, 0.6, 1e-6);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const int n = sc.n_agents();
  for (int b = 0; b < B; ++b) {
    Transition tr;
    for (int i = 0; i < n * kObsDim; ++i) {
      tr.state.push_back(u(rng));
      tr.next_state.push_back(u(rng));
    }
    for (int i = 0; i < n; ++i)
      for (int d = 0; d < kActDim; ++d) {
        double lo = sc.act_lo[i][d], hi = sc.act_hi[i][d];
        double mid = 0.5 * (lo + hi), span = 0.5 * (hi - lo);
        tr.action.push_back(mid + 0.9 * span * u(rng));
        tr.expert.push_back(mid + 0.9 * span * u(rng));
      }
    tr.reward = u(rng);
    tr.done = b + 1 == B;
    buf.push(tr, 1.0);
  }
  std::vector<SampleRef> refs;
  for (int b = 0; b < B; ++b) refs.push_back({false, std::size_t(b)});
  return make_batch(buf, refs, sc, gamma);
}

// slack -- (r=0.02, x=0.06) -- load bus
Network two_bus() {
  Network net;
  net.buses = {{1, 0.95, 1.05, 1.0, true}, {2, 0.95, 1.05, 1.0, false}};
  double r = 0.02, x = 0.06, d = r * r + x * x;
  net.branches = {{1, 2, r / d, -x / d}};
  return net;
}

// Four-step generator-plus-trading instance for the exhaustive oracle; the
// loads and ramp are exact multiples of the grid pitch.
ProsumerSpec small_cdg_spec() {
  ProsumerSpec s;
  s.bus_id = 1;
  s.tag = "Industrial";
  s.cdg = CdgParams{0.0, 0.8, 0.3, 0.9, 0.08};
  return s;
}

IrData small_cdg_data() {
  IrData d;
  d.series["load_p"] = {0.35, 0.62, 0.48, 0.2};
  d.series["price_buy"] = {0.6, 1.1, 0.85, 0.4};
  d.series["price_sell"] = {0.25, 0.25, 0.25, 0.25};
  d.series["price_p2p"] = {0.45, 0.7, 0.55, 0.32};
  d.scalars["dso_fee"] = 0.02;
  d.scalars["init:p_cdg"] = 0.0;
  return d;
}

// Exhaustive dynamic program over a 1e-3 grid of generator setpoints with
// the per-step trade cost in closed form.
double dp_oracle(const ProsumerSpec& spec, const IrData& d) {
  const CdgParams& c = *spec.cdg;
  const double h = 1e-3;
  const int np = static_cast<int>(std::llround((c.p_max - c.p_min) / h)) + 1;
  const auto& load = d.series.at("load_p");
  const auto& buy = d.series.at("price_buy");
  const auto& sell = d.series.at("price_sell");
  const auto& p2p = d.series.at("price_p2p");
  const double fee = d.scalars.at("dso_fee");
  const int T = static_cast<int>(load.size());
  auto step_cost = [&](int t, double p) {
    double imbalance = load[t] - p;
    double trade = imbalance > 0 ? std::min(buy[t], p2p[t] + fee) * imbalance
                                 : std::max(sell[t], p2p[t] - fee) * imbalance;
    return c.cost_quad * p * p + c.cost_lin * p + trade;
  };
  const double init = d.scalars.at("init:p_cdg");
  std::vector<double> best(np, kInf), next(np);
  for (int i = 0; i < np; ++i) {
    double p = c.p_min + i * h;
    if (std::abs(p - init) <= c.ramp + 1e-12) best[i] = step_cost(0, p);
  }
  const int w = static_cast<int>(std::floor(c.ramp / h + 1e-9));
  for (int t = 1; t < T; ++t) {
    for (int i = 0; i < np; ++i) {
      double acc = kInf;
      for (int j = std::max(0, i - w); j <= std::min(np - 1, i + w); ++j)
        acc = std::min(acc, best[j]);
      next[i] = acc + step_cost(t, c.p_min + i * h);
    }
    std::swap(best, next);
  }
  double out = kInf;
  for (double v : best) out = std::min(out, v);
  return out;
}

IrData healthy_window() {
  IrData d;
  d.series["load_p"] = std::vector<double>(8, 0.2);
  d.series["rdg_avail"] = std::vector<double>(8, 0.15);
  d.series["price_buy"] = std::vector<double>(8, 0.8);
  d.series["price_sell"] = std::vector<double>(8, 0.25);
  d.series["price_p2p"] = std::vector<double>(8, 0.5);
  d.scalars["dso_fee"] = 0.02;
  d.scalars["init:p_cdg"] = 0.0;
  d.scalars["init:soc"] = 0.5;
  return d;
}

fs::path fresh_dir(const std::string& tag) {
  fs::path p = fs::temp_directory_path() / ("p2plab_accept_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// Training configuration for the scaled experiment: wide enough to learn,
// small enough that ten runs plus expert planning fit the wall-clock cap.
HyperParams experiment_hp() {
  HyperParams hp;
  hp.episodes = 200;
  hp.batch = 128;
  hp.buffer_size = 20000;
  hp.update_every = 8;
  hp.eval_every = 10;
  hp.lr = 3e-4;
  hp.critic_d_model = 32;
  hp.critic_heads = 2;
  hp.critic_d_k = 8;
  hp.critic_hidden = {32};
  hp.policy_hidden = {32};
  return hp;
}

// ---------------------------------------------------------------------------

void criterion_1_w2_oracle() {
  auto t0 = std::chrono::steady_clock::now();
  Rng rng(101);
  std::uniform_real_distribution<double> um(-2.0, 2.0), us(0.05, 1.5);
  const int N = 100000;
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    double mu = um(rng), sigma = us(rng), a = um(rng);
    double closed = w2_gaussian_dirac({mu}, {sigma}, {a});
    // transport cost against a point mass, integrated over the quantile map
    double acc = 0.0;
    for (int i = 0; i < N; ++i) {
      double q = (i + 0.5) / N;
      double x = mu + sigma * norm_quantile(q) - a;
      acc += x * x;
    }
    worst = std::max(worst, std::abs(closed - std::sqrt(acc / N)));
  }
  double el = seconds_since(t0);
  report(1, worst < 1e-3 && el < 5.0, "W2 closed form vs quantile integration",
         fmt("max err %.2e over 100 triples, %.1fs", worst, el));
}

void criterion_2_attention_reduction() {
  Rng rng(29);
  nets::DiffAttnConfig cfg;
  cfg.n_agents = 4;
  cfg.d_model = 8;
  cfg.heads = 2;
  cfg.d_k = 2;
  cfg.xi_init = 0.0;
  nets::DiffAttnBlock blk;
  blk.init(cfg, rng);
  for (Mat* m : {&blk.xi_q1, &blk.xi_k1, &blk.xi_q2, &blk.xi_k2})
    for (auto& v : m->a) v = 0.0;

  Mat E = randn(cfg.n_agents, cfg.d_model, rng);
  Tape t;
  nets::AttnTrace trace;
  Var X = blk.forward(t, t.constant(E), false, &trace);

  // independent oracle: plain softmax attention on (Q1, K1, V) only
  const int n = cfg.n_agents;
  Mat Xs(n, cfg.d_model, 0.0);
  {
    auto proj = [&](const Mat& W, int i, int j) {
      double s = 0.0;
      for (int k = 0; k < cfg.d_model; ++k) s += E.at(i, k) * W.at(k, j);
      return s;
    };
    Mat cat(n, blk.proj_cols(), 0.0);
    for (int h = 0; h < cfg.heads; ++h) {
      int off = h * 2 * cfg.d_k;
      std::vector<std::vector<double>> S(n, std::vector<double>(n));
      for (int i = 0; i < n; ++i) {
        double z = 0.0;
        for (int j = 0; j < n; ++j) {
          double dot = 0.0;
          for (int k = 0; k < cfg.d_k; ++k)
            dot += proj(blk.Wq, i, off + k) * proj(blk.Wk, j, off + k);
          S[i][j] = std::exp(dot / std::sqrt(static_cast<double>(cfg.d_k)));
          z += S[i][j];
        }
        for (int j = 0; j < n; ++j) S[i][j] /= z;
      }
      for (int i = 0; i < n; ++i)
        for (int k = 0; k < 2 * cfg.d_k; ++k)
          for (int j = 0; j < n; ++j)
            cat.at(i, off + k) += S[i][j] * proj(blk.Wv, j, off + k);
    }
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < cfg.d_model; ++j)
        for (int k = 0; k < blk.proj_cols(); ++k)
          Xs.at(i, j) += cat.at(i, k) * blk.Wo.at(k, j);
  }
  double red_err = 0.0;
  for (std::size_t k = 0; k < Xs.size(); ++k)
    red_err = std::max(red_err, std::abs(X.val().a[k] - Xs.a[k]));

  // nonzero gates: every differential map row sums to 1 - xi^h
  nets::DiffAttnConfig cfg2 = cfg;
  cfg2.xi_init = 0.2;
  nets::DiffAttnBlock blk2;
  blk2.init(cfg2, rng);
  for (Mat* m : {&blk2.xi_q1, &blk2.xi_k1, &blk2.xi_q2, &blk2.xi_k2})
    for (auto& v : m->a) v *= 5.0;
  Mat E2 = randn(2 * cfg2.n_agents, cfg2.d_model, rng);
  Tape t2;
  nets::AttnTrace tr2;
  blk2.forward(t2, t2.constant(E2), false, &tr2);
  double row_err = 0.0;
  for (int h = 0; h < cfg2.heads; ++h) {
    const Mat& A = tr2.attn[h];
    for (int r = 0; r < A.rows; ++r) {
      double s = 0.0;
      for (int c = 0; c < A.cols; ++c) s += A.at(r, c);
      row_err = std::max(row_err, std::abs(s - (1.0 - tr2.xi[h])));
    }
  }
  report(2, red_err < 1e-12 && row_err < 1e-10,
         "differential attention reduction and row sums",
         fmt("reduction err %.1e, row-sum err %.1e", red_err, row_err));
}

void criterion_3_gradient_suite() {
  auto t0 = std::chrono::steady_clock::now();
  Scenario sc = make_six_bus({1, 3});
  Rng rng(11);
  nets::CriticConfig cc;
  cc.n_agents = sc.n_agents();
  cc.d_model = 6;
  cc.heads = 2;
  cc.d_k = 3;
  cc.embed_hidden = {6};
  cc.out_hidden = {6};
  nets::CriticBundle cb;
  cb.init(cc, rng);
  nets::GaussianPolicy pol;
  pol.init({kObsDim, kActDim, {8}}, rng);
  Batch bt = random_batch(sc, 6, rng, 0.95);
  Mat z = randn(6, kActDim, rng);

  nets::ParamSet pq, pv, pp, pall;
  cb.q1.collect(pq, "q1");
  cb.q2.collect(pq, "q2");
  cb.v.collect(pv, "v");
  pol.collect(pp, "pi");
  cb.q1.collect(pall, "q1");
  cb.q2.collect(pall, "q2");
  cb.v.collect(pall, "v");

  double eq = testutil::fd_check(
      [&](Tape& t) { return q_loss(t, cb, bt).loss; }, collected(pq));
  double ev = testutil::fd_check(
      [&](Tape& t) { return v_loss(t, cb, pol, bt, 1, z).loss; },
      collected(pv));
  double ep = testutil::fd_check(
      [&](Tape& t) { return actor_loss(t, cb, pol, bt, 1, z, 1.7, 0.05).loss; },
      collected(pp));
  // full critic stack, all three heads live on one tape
  double ec = testutil::fd_check(
      [&](Tape& t) {
        std::vector<Var> ov, av;
        for (const Mat& m : bt.obs) ov.push_back(t.constant(m));
        for (const Mat& m : bt.act) av.push_back(t.constant(m));
        auto tok = cb.q_tokens(t, ov, av);
        Var s = t.add(t.mean(cb.q1.forward(t, tok)),
                      t.mean(cb.q2.forward(t, tok)));
        return t.add(s, t.mean(cb.v.forward(t, ov)));
      },
      collected(pall));
  double worst = std::max(std::max(eq, ev), std::max(ep, ec));
  double el = seconds_since(t0);
  report(3, worst < 1e-4 && el < 60.0, "gradient suite vs central differences",
         fmt("LQ %.1e LV %.1e Lpi %.1e critic %.1e, %.1fs", eq, ev, ep, ec,
             el));
}

void criterion_4_power_flow() {
  // residuals on both shipped fixtures under randomized loading, with the
  // total drawn power held roughly constant so the long feeder stays solvable
  double worst_res = 0.0;
  Rng rng(23);
  for (const char* kind : {"six_bus", "ieee141_like"}) {
    Scenario sc = make_fixture(kind, {1, 5});
    const int n = sc.net.n();
    std::uniform_real_distribution<double> dp(-0.6 / n, 0.15 / n);
    for (int trial = 0; trial < 20; ++trial) {
      Eigen::VectorXd p(n), q(n);
      for (int i = 0; i < n; ++i) {
        p(i) = dp(rng);
        q(i) = 0.4 * dp(rng);
      }
      BusSolution sol = ac_power_flow(sc.net, p, q, {1e-10, 40});
      auto [fp, fq] = injection_residual(sc.net, sol.v, sol.theta, p, q);
      const int slack = sc.net.slack_index();
      for (int i = 0; i < n; ++i) {
        if (i == slack) continue;
        worst_res = std::max(worst_res,
                             std::max(std::abs(fp(i)), std::abs(fq(i))));
      }
    }
  }

  // independent scalar Newton oracle on the 2-bus line
  Network net = two_bus();
  double g = net.branches[0].g, b = net.branches[0].b;
  double p_spec = -0.4, q_spec = -0.15;
  auto calc = [&](double v, double th, double& pc, double& qc) {
    double G10 = -g, B10 = -b, G11 = g, B11 = b;
    pc = v * (1.0 * (G10 * std::cos(th) + B10 * std::sin(th)) + v * G11);
    qc = v * (1.0 * (G10 * std::sin(th) - B10 * std::cos(th)) - v * B11);
  };
  double v = 1.0, th = 0.0;
  for (int it = 0; it < 60; ++it) {
    double pc, qc;
    calc(v, th, pc, qc);
    double f1 = p_spec - pc, f2 = q_spec - qc;
    if (std::max(std::abs(f1), std::abs(f2)) < 1e-13) break;
    double h = 1e-7, pa, qa, pb, qb;
    calc(v, th + h, pa, qa);
    calc(v, th - h, pb, qb);
    double j11 = (pa - pb) / (2 * h), j21 = (qa - qb) / (2 * h);
    calc(v + h, th, pa, qa);
    calc(v - h, th, pb, qb);
    double j12 = (pa - pb) / (2 * h), j22 = (qa - qb) / (2 * h);
    double det = j11 * j22 - j12 * j21;
    th += (f1 * j22 - f2 * j12) / det;
    v += (j11 * f2 - j21 * f1) / det;
  }
  Eigen::VectorXd p2(2), q2(2);
  p2 << 0.0, p_spec;
  q2 << 0.0, q_spec;
  BusSolution sol = ac_power_flow(net, p2, q2, {1e-10, 30});
  double two_err =
      std::max(std::abs(sol.v(1) - v), std::abs(sol.theta(1) - th));
  report(4, worst_res <= 1e-8 && two_err < 1e-6,
         "power-flow residuals and 2-bus Newton oracle",
         fmt("residual %.1e, 2-bus err %.1e", worst_res, two_err));
}

void criterion_5_expert_optimality() {
  ProsumerSpec spec = small_cdg_spec();
  IrData d = small_cdg_data();
  ModelIR ir = generate_model(spec, 4);
  integrate_trading(ir, spec);
  IrSolution sol = solve_convex(compile_ir(ir), d);
  double ref = dp_oracle(spec, d);
  bool ok = sol.status == QpStatus::Optimal &&
            std::abs(sol.objective - ref) <= 1e-3 && sol.kkt <= 1e-5;
  double worst_kkt = sol.kkt;

  // every archetype instance solved here must carry a tight certificate
  IrData hw = healthy_window();
  for (const char* tag : {"Commercial", "Rural", "Industrial", "Residential",
                          "EnergyHub"}) {
    ProsumerSpec s = archetype_spec(tag, 1);
    ModelIR m = generate_model(s, 8);
    integrate_trading(m, s);
    IrSolution r = solve_convex(m, hw);
    ok = ok && r.status == QpStatus::Optimal && r.kkt <= 1e-5;
    worst_kkt = std::max(worst_kkt, r.kkt);
  }
  report(5, ok, "expert solutions match the exhaustive oracle",
         fmt("|obj-grid| %.1e, worst KKT %.1e", std::abs(sol.objective - ref),
             worst_kkt));
}

void criterion_6_workflow_metrics() {
  DeterministicBackend backend;
  WorkflowMetrics m = workflow_metrics(backend, 25);
  bool ok = m.pass_rate == 1.0 && m.avg_corrections == 0.0;

  // injected defects must be repaired within the iteration cap
  ProsumerSpec spec = archetype_spec("Commercial", 1);
  IrData d = healthy_window();
  int worst_iters = 0;
  for (const char* mode : {"unbounded", "undeclared", "soc_bounds",
                           "nonconvex"}) {
    ModelIR ir = generate_model(spec, 8);
    integrate_trading(ir, spec);
    apply_defect(ir, mode);
    CorrectionReport rep = validate_and_correct(ir, d);
    worst_iters = std::max(worst_iters, rep.iterations);
    ok = ok && rep.passed && rep.iterations <= 5 &&
         solve_convex(ir, d).status == QpStatus::Optimal;
  }
  report(6, ok, "workflow metrics clean, defects repaired",
         fmt("pass rate %.2f, corrections %.2f, defect iters <= %d",
             m.pass_rate, m.avg_corrections, worst_iters));
}

void criterion_7_per_ratio() {
  replay::DualReplay buf(4096, 0.6, 1e-6);
  Rng rng(77);
  std::uniform_real_distribution<double> u(0.1, 2.0);
  for (int i = 0; i < 800; ++i) {
    Transition tr;
    tr.violation = false;
    buf.push(tr, u(rng));
  }
  for (int i = 0; i < 400; ++i) {
    Transition tr;
    tr.violation = true;
    buf.push(tr, u(rng));
  }
  long normal = 0, total = 0;
  while (total < 10000) {
    for (const SampleRef& r : buf.sample(128, 0.8, rng)) {
      normal += r.from_violation ? 0 : 1;
      ++total;
    }
  }
  double frac = double(normal) / double(total);
  report(7, frac >= 0.78 && frac <= 0.82, "replay normal-buffer share at k=0.8",
         fmt("%.4f over %ld draws", frac, total));
}

void criterion_8_zero_sum() {
  Rng rng(99);
  std::uniform_real_distribution<double> d(-1.0, 1.0), up(0.2, 1.2);
  double worst_trade = 0.0, worst_pay = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    std::uniform_int_distribution<int> nn(2, 12);
    int n = nn(rng);
    std::vector<double> desired(n);
    for (double& v : desired) v = d(rng);
    std::vector<double> trades = clear_p2p(desired);
    double price = up(rng);
    double st = 0.0, sp = 0.0;
    for (double tr : trades) {
      st += tr;
      sp += price * tr;
    }
    worst_trade = std::max(worst_trade, std::abs(st));
    worst_pay = std::max(worst_pay, std::abs(sp));
  }
  report(8, worst_trade < 1e-12 && worst_pay < 1e-12,
         "peer trades and payments sum to zero",
         fmt("|sum trade| %.1e, |sum pay| %.1e", worst_trade, worst_pay));
}

void criterion_9_scaled_training(const Scenario& sc, const ExpertCache& cache,
                                 double planning_s) {
  auto t0 = std::chrono::steady_clock::now();
  HyperParams hp = experiment_hp();
  const std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};

  struct Arm {
    double w2_start = 0.0, w2_end = 0.0, cost = 0.0, viol = 0.0;
  };
  std::vector<Arm> full(seeds.size()), abl(seeds.size());
  for (std::size_t s = 0; s < seeds.size(); ++s) {
    for (bool constrained : {true, false}) {
      TrainOptions to;
      to.seed = seeds[s];
      to.expert_constraint = constrained;
      Trainer tr(sc, hp, cache, to);
      TrainResult res = tr.run();
      Arm& a = constrained ? full[s] : abl[s];
      a.w2_start = res.validation.front().w2;
      a.w2_end = res.validation.back().w2;
      a.cost = res.test.cost;
      a.viol = res.test.violation_rate;
      std::printf("   seed %llu %s: w2 %.3f -> %.3f, test cost %.3f, viol "
                  "%.4f\n",
                  static_cast<unsigned long long>(seeds[s]),
                  constrained ? "full" : "abl ", a.w2_start, a.w2_end, a.cost,
                  a.viol);
      std::fflush(stdout);
    }
  }
  double expert_cost = expert_rollout_cost(sc, cache, sc.test_day(), {}, 0);

  double w2s = 0.0, w2e = 0.0, cost = 0.0;
  int wins = 0;
  for (std::size_t s = 0; s < seeds.size(); ++s) {
    w2s += full[s].w2_start / seeds.size();
    w2e += full[s].w2_end / seeds.size();
    cost += full[s].cost / seeds.size();
    if (full[s].viol <= abl[s].viol) ++wins;
  }
  double el = seconds_since(t0) + planning_s;
  bool a_ok = w2e <= 0.5 * w2s;
  bool b_ok = std::abs(cost - expert_cost) <=
              0.15 * std::max(std::abs(expert_cost), 1e-9);
  bool c_ok = wins >= 4;
  bool t_ok = el < 1800.0;
  report(9, a_ok && b_ok && c_ok && t_ok,
         "scaled imitation experiment (5 paired seeds)",
         fmt("w2 %.3f->%.3f (-%.0f%%), cost %.3f vs expert %.3f (%+.1f%%), "
             "viol wins %d/5, %.0fs",
             w2s, w2e, 100.0 * (1.0 - w2e / std::max(w2s, 1e-12)), cost,
             expert_cost, 100.0 * (cost - expert_cost) / expert_cost, wins,
             el));
}

void criterion_10_determinism(const Scenario& sc, const ExpertCache& cache) {
  fs::path root = fresh_dir("determinism");
  HyperParams hp = experiment_hp();
  hp.episodes = 12;
  hp.eval_every = 4;
  std::vector<std::string> logs;
  for (const char* tag : {"a", "b"}) {
    TrainOptions to;
    to.seed = 7;
    to.out_dir = root / tag;
    Trainer tr(sc, hp, cache, to);
    tr.run();
    logs.push_back(slurp(to.out_dir / "metrics.jsonl"));
  }
  // the serialized expert stage must be reproducible too
  save_expert_cache(root / "cache_a.json", cache);
  save_expert_cache(root / "cache_b.json", cache);
  bool ok = !logs[0].empty() && logs[0] == logs[1] &&
            slurp(root / "cache_a.json") == slurp(root / "cache_b.json");
  report(10, ok, "identically-seeded pipelines are byte-identical",
         fmt("metrics logs %zu bytes, %s", logs[0].size(),
             ok ? "equal" : "DIFFER"));
}

}  // namespace

// A criterion that throws still gets its FAIL line and the gate moves on.
void guarded(int idx, const char* name, const std::function<void()>& fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    report(idx, false, name, std::string("threw: ") + e.what());
  }
}

int main() {
  std::printf("acceptance gate\n");
  guarded(1, "W2 closed form vs quantile integration", criterion_1_w2_oracle);
  guarded(2, "differential attention reduction and row sums",
          criterion_2_attention_reduction);
  guarded(3, "gradient suite vs central differences",
          criterion_3_gradient_suite);
  guarded(4, "power-flow residuals and 2-bus Newton oracle",
          criterion_4_power_flow);
  guarded(5, "expert solutions match the exhaustive oracle",
          criterion_5_expert_optimality);
  guarded(6, "workflow metrics clean, defects repaired",
          criterion_6_workflow_metrics);
  guarded(7, "replay normal-buffer share at k=0.8", criterion_7_per_ratio);
  guarded(8, "peer trades and payments sum to zero", criterion_8_zero_sum);

  // shared six-bus instance: the expert planning cost is paid once and
  // counted against the experiment budget
  auto tp = std::chrono::steady_clock::now();
  Scenario sc = make_fixture("six_bus", {6, 1});
  DeterministicBackend backend;
  ExpertCache cache = compute_expert_cache(sc, schedule_days(sc), backend);
  double planning_s = seconds_since(tp);
  std::printf("   expert planning for 6 days: %.0fs\n", planning_s);
  std::fflush(stdout);

  guarded(9, "scaled imitation experiment (5 paired seeds)",
          [&] { criterion_9_scaled_training(sc, cache, planning_s); });
  guarded(10, "identically-seeded pipelines are byte-identical",
          [&] { criterion_10_determinism(sc, cache); });

  std::printf("acceptance: %d/10 criteria passed\n", 10 - g_failures);
  return g_failures;
}
