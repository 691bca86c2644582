#pragma once
// Agent networks: plain MLPs, the Gaussian policy head, and the multi-head
// differential-attention critic (double Q + V + Polyak-target V per agent).
//
// Conventions:
//  * Row-vector convention throughout: activations are B x d, weights in x out,
//    biases 1 x out broadcast over the batch.
//  * Parameters are plain Mat members owned by the modules; every forward pass
//    attaches them to the caller's tape, tracked (param) or frozen (constant).
//    Tape::param is idempotent per matrix, so a module can be forwarded twice
//    on one tape (e.g. Q on replay actions and again on fresh policy actions)
//    and gradients still land on a single leaf.
//  * Batched attention over agent tokens uses block-diagonal bmm: tokens are
//    stacked sample-major as a (B*n) x d matrix, each sample owning n rows.
//  * Weight init is uniform fan-in scaling U(+-1/sqrt(fan_in)), biases zero;
//    the log-std head bias starts at -1 (sigma ~= 0.37 early on).

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "p2plab/autodiff.hpp"
#include "p2plab/common.hpp"

namespace p2plab::nets {

using ad::Mat;
using ad::Tape;
using ad::Var;

// ---------------------------------------------------------------------------
// Parameter registry: named views into module-owned matrices.  This is the
// surface optimizers, Polyak updates, and checkpoints operate on.
// ---------------------------------------------------------------------------

struct ParamSet {
  struct Item {
    std::string name;
    Mat* m;
  };
  std::vector<Item> items;

  void add(std::string name, Mat& m) { items.push_back({std::move(name), &m}); }

  std::size_t scalars() const {
    std::size_t n = 0;
    for (const auto& it : items) n += it.m->size();
    return n;
  }

  Mat* find(const std::string& name) {
    for (auto& it : items)
      if (it.name == name) return it.m;
    return nullptr;
  }
};

// target <- tau * online + (1 - tau) * target, elementwise.  Manifests must
// agree in order, relative names, and shapes.
inline void polyak_update(ParamSet& target, const ParamSet& online,
                          double tau) {
  if (target.items.size() != online.items.size())
    throw ConfigError("polyak_update: parameter manifests differ in length");
  for (std::size_t i = 0; i < target.items.size(); ++i) {
    Mat& tm = *target.items[i].m;
    const Mat& om = *online.items[i].m;
    if (target.items[i].name != online.items[i].name || tm.rows != om.rows ||
        tm.cols != om.cols)
      throw ConfigError("polyak_update: manifest mismatch at " +
                        target.items[i].name);
    for (std::size_t k = 0; k < tm.size(); ++k)
      tm.a[k] = tau * om.a[k] + (1.0 - tau) * tm.a[k];
  }
}

namespace detail {

inline Mat uniform_fan_in(int rows, int cols, int fan_in, Rng& rng) {
  double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> d(-bound, bound);
  Mat m(rows, cols);
  for (auto& v : m.a) v = d(rng);
  return m;
}

// Attach a parameter: tracked by default, frozen for stop-gradient paths.
inline Var attach(Tape& t, Mat& m, bool frozen) {
  return frozen ? t.constant(m) : t.param(m);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// MLP: affine-tanh stack with a linear final layer.  An empty hidden list
// degenerates to a single linear map (used for the policy heads); composite
// modules that require depth validate hidden-layer counts themselves.
// ---------------------------------------------------------------------------

struct MlpConfig {
  int in = 0;
  std::vector<int> hidden;
  int out = 1;
};

struct Mlp {
  MlpConfig cfg;
  std::vector<Mat> W, b;

  void init(const MlpConfig& c, Rng& rng) {
    if (c.in <= 0 || c.out <= 0)
      throw ConfigError("mlp: widths must be positive");
    for (int w : c.hidden)
      if (w <= 0) throw ConfigError("mlp: widths must be positive");
    cfg = c;
    std::vector<int> dims;
    dims.push_back(c.in);
    for (int w : c.hidden) dims.push_back(w);
    dims.push_back(c.out);
    W.clear();
    b.clear();
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
      W.push_back(detail::uniform_fan_in(dims[l], dims[l + 1], dims[l], rng));
      b.push_back(Mat(1, dims[l + 1], 0.0));
    }
  }

  Var forward(Tape& t, Var x, bool frozen = false) {
    if (x.val().cols != cfg.in)
      throw NumericalError("mlp: input width mismatch");
    for (std::size_t l = 0; l < W.size(); ++l) {
      x = t.add(t.matmul(x, detail::attach(t, W[l], frozen)),
                detail::attach(t, b[l], frozen));
      if (l + 1 < W.size()) x = t.tanh(x);
    }
    return x;
  }

  // Tape-free evaluation for rollouts.
  Mat eval(const Mat& x) const {
    if (x.cols != cfg.in) throw NumericalError("mlp: input width mismatch");
    Mat h = x;
    for (std::size_t l = 0; l < W.size(); ++l) {
      Mat z(h.rows, W[l].cols);
      z.map().noalias() = h.map() * W[l].map();
      for (int r = 0; r < z.rows; ++r)
        for (int c = 0; c < z.cols; ++c) z.at(r, c) += b[l].a[c];
      if (l + 1 < W.size())
        for (auto& v : z.a) v = std::tanh(v);
      h = std::move(z);
    }
    return h;
  }

  void collect(ParamSet& ps, const std::string& prefix) {
    for (std::size_t l = 0; l < W.size(); ++l) {
      ps.add(prefix + "/W" + std::to_string(l), W[l]);
      ps.add(prefix + "/b" + std::to_string(l), b[l]);
    }
  }
};

// Plain evaluation under the op-style name used by callers that never need
// gradients.
inline Mat mlp_forward(const Mlp& net, const Mat& x) { return net.eval(x); }

// ---------------------------------------------------------------------------
// Gaussian policy: trunk MLP (tanh-bounded feature) with linear mean and
// log-std heads.  Outputs live in raw pre-squash space; the trainer maps them
// into env bounds with squash_actions below.
// ---------------------------------------------------------------------------

inline constexpr double kLogStdMin = -5.0;
inline constexpr double kLogStdMax = 2.0;

struct PolicyConfig {
  int obs_dim = 9;
  int act_dim = 5;
  std::vector<int> hidden{64};
};

struct PolicyOut {
  Var mu, log_std, sigma;
};

struct GaussianPolicy {
  PolicyConfig cfg;
  Mlp trunk;  // obs -> feature; the forward tanh-bounds its output
  Mat w_mu, b_mu, w_ls, b_ls;

  void init(const PolicyConfig& c, Rng& rng) {
    if (c.hidden.empty())
      throw ConfigError("policy: trunk needs at least one hidden layer");
    cfg = c;
    int feat = c.hidden.back();
    trunk.init({c.obs_dim, c.hidden, feat}, rng);
    w_mu = detail::uniform_fan_in(feat, c.act_dim, feat, rng);
    b_mu = Mat(1, c.act_dim, 0.0);
    w_ls = detail::uniform_fan_in(feat, c.act_dim, feat, rng);
    b_ls = Mat(1, c.act_dim, -1.0);
  }

  PolicyOut forward(Tape& t, Var obs, bool frozen = false) {
    Var f = t.tanh(trunk.forward(t, obs, frozen));
    Var mu = t.add(t.matmul(f, detail::attach(t, w_mu, frozen)),
                   detail::attach(t, b_mu, frozen));
    Var ls = t.add(t.matmul(f, detail::attach(t, w_ls, frozen)),
                   detail::attach(t, b_ls, frozen));
    ls = t.clamp(ls, kLogStdMin, kLogStdMax);
    return {mu, ls, t.exp(ls)};
  }

  // Reparameterized sample a = mu + sigma * z with externally drawn noise, so
  // the result stays differentiable w.r.t. the policy parameters.
  Var rsample(Tape& t, const PolicyOut& p, const Mat& z) {
    return t.add(p.mu, t.mul(p.sigma, t.constant(z)));
  }

  // Tape-free distribution parameters at a single observation.
  struct Stats {
    std::vector<double> mu, sigma;
  };
  Stats stats(const std::vector<double>& obs) const {
    Mat o(1, cfg.obs_dim);
    if (static_cast<int>(obs.size()) != cfg.obs_dim)
      throw NumericalError("policy: obs width mismatch");
    o.a = obs;
    Mat f = trunk.eval(o);
    for (auto& v : f.a) v = std::tanh(v);
    Stats st;
    st.mu.resize(cfg.act_dim);
    st.sigma.resize(cfg.act_dim);
    for (int j = 0; j < cfg.act_dim; ++j) {
      double mu = b_mu.a[j], ls = b_ls.a[j];
      for (int i = 0; i < f.cols; ++i) {
        mu += f.a[i] * w_mu.at(i, j);
        ls += f.a[i] * w_ls.at(i, j);
      }
      ls = std::min(kLogStdMax, std::max(kLogStdMin, ls));
      st.mu[j] = mu;
      st.sigma[j] = std::exp(ls);
    }
    return st;
  }

  // Tape-free rollout path.  deterministic=true returns mu.
  std::vector<double> act(const std::vector<double>& obs, Rng& rng,
                          bool deterministic = false) const {
    Stats st = stats(obs);
    std::vector<double> out(cfg.act_dim);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (int j = 0; j < cfg.act_dim; ++j)
      out[j] = deterministic ? st.mu[j] : st.mu[j] + st.sigma[j] * gauss(rng);
    return out;
  }

  void collect(ParamSet& ps, const std::string& prefix) {
    trunk.collect(ps, prefix + "/trunk");
    ps.add(prefix + "/w_mu", w_mu);
    ps.add(prefix + "/b_mu", b_mu);
    ps.add(prefix + "/w_ls", w_ls);
    ps.add(prefix + "/b_ls", b_ls);
  }
};

// ---------------------------------------------------------------------------
// Action squashing between raw policy space and env bounds:
//   a = lo + (hi - lo) * (tanh(u) + 1) / 2.
// unsquash clamps the normalized coordinate to +-0.999 before atanh so expert
// actions sitting exactly on a bound stay finite.
// ---------------------------------------------------------------------------

inline double squash(double u, double lo, double hi) {
  return lo + (hi - lo) * 0.5 * (std::tanh(u) + 1.0);
}

inline double unsquash(double a, double lo, double hi) {
  double n = 2.0 * (a - lo) / (hi - lo) - 1.0;
  n = std::min(0.999, std::max(-0.999, n));
  return std::atanh(n);
}

// In-graph squash: u is B x d, lo/hi are 1 x d rows broadcast over the batch.
inline Var squash_actions(Tape& t, Var u, const Mat& lo, const Mat& hi) {
  Mat span(1, lo.cols);
  for (int j = 0; j < lo.cols; ++j) span.a[j] = hi.a[j] - lo.a[j];
  Var half = t.scale(t.tanh(u), 0.5, 0.5);  // (tanh+1)/2 in [0,1]
  return t.add(t.mul(half, t.constant(span)), t.constant(lo));
}

// ---------------------------------------------------------------------------
// Differential attention.  Per head:
//   [Q1,Q2] = E Wq, [K1,K2] = E Wk, V = E Wv,
//   head = [softmax(Q1 K1^T / sqrt(dk)) - xi_h softmax(Q2 K2^T / sqrt(dk))] V,
//   xi_h = exp(xi_q1 . xi_k1) - exp(xi_q2 . xi_k2) + xi_init,
//   X = concat(heads) Wo.
// Standard mode drops the second map and the gates, using single-softmax
// heads of width d_k; with twice the head count its projection matrices have
// exactly the shapes of the differential block (parameter parity).
// ---------------------------------------------------------------------------

enum class AttnKind { Differential, Standard };

struct DiffAttnConfig {
  int n_agents = 3;
  int token_dim = 14;
  int d_model = 64;
  int heads = 4;  // 0 disables attention: the critic becomes an MLP on E
  int d_k = 8;
  double xi_init = 0.2;
  AttnKind kind = AttnKind::Differential;
  std::vector<int> embed_hidden{64};
  std::vector<int> out_hidden{64};
};

// The scalar gate, exposed standalone for tests and plain evaluation.
inline double lambda_scale(const std::vector<double>& xi_q1,
                           const std::vector<double>& xi_k1,
                           const std::vector<double>& xi_q2,
                           const std::vector<double>& xi_k2, double xi_init) {
  if (xi_q1.size() != xi_k1.size() || xi_q2.size() != xi_k2.size())
    throw NumericalError("lambda_scale: vector lengths differ");
  double d1 = 0.0, d2 = 0.0;
  for (std::size_t i = 0; i < xi_q1.size(); ++i) d1 += xi_q1[i] * xi_k1[i];
  for (std::size_t i = 0; i < xi_q2.size(); ++i) d2 += xi_q2[i] * xi_k2[i];
  return std::exp(d1) - std::exp(d2) + xi_init;
}

// Optional per-forward introspection: gate values and the (B*n) x n
// differential attention map per head, recorded post-hoc from the tape.
struct AttnTrace {
  std::vector<double> xi;
  std::vector<Mat> attn;
};

struct DiffAttnBlock {
  DiffAttnConfig cfg;
  Mat Wq, Wk, Wv, Wo;
  Mat xi_q1, xi_k1, xi_q2, xi_k2;  // heads x d_k, Differential only

  int proj_cols() const {
    int per = cfg.kind == AttnKind::Differential ? 2 * cfg.d_k : cfg.d_k;
    return cfg.heads * per;
  }

  void init(const DiffAttnConfig& c, Rng& rng) {
    if (c.heads < 0) throw ConfigError("attention: heads must be >= 0");
    if (c.heads > 0 && c.d_k <= 0)
      throw ConfigError("attention: d_k must be positive");
    if (c.d_model <= 0) throw ConfigError("attention: d_model must be positive");
    cfg = c;
    if (c.heads == 0) return;
    int pc = proj_cols();
    Wq = detail::uniform_fan_in(c.d_model, pc, c.d_model, rng);
    Wk = detail::uniform_fan_in(c.d_model, pc, c.d_model, rng);
    Wv = detail::uniform_fan_in(c.d_model, pc, c.d_model, rng);
    Wo = detail::uniform_fan_in(pc, c.d_model, pc, rng);
    if (c.kind == AttnKind::Differential) {
      std::uniform_real_distribution<double> d(-0.1, 0.1);
      for (Mat* m : {&xi_q1, &xi_k1, &xi_q2, &xi_k2}) {
        *m = Mat(c.heads, c.d_k);
        for (auto& v : m->a) v = d(rng);
      }
    }
  }

  // E is (B*n_agents) x d_model, sample-major.  Returns X of the same shape.
  Var forward(Tape& t, Var E, bool frozen = false, AttnTrace* trace = nullptr) {
    if (cfg.heads == 0) throw NumericalError("attention: no heads configured");
    const int n = cfg.n_agents;
    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(cfg.d_k));
    Var q = t.matmul(E, detail::attach(t, Wq, frozen));
    Var k = t.matmul(E, detail::attach(t, Wk, frozen));
    Var v = t.matmul(E, detail::attach(t, Wv, frozen));
    std::vector<Var> heads;
    heads.reserve(cfg.heads);
    for (int h = 0; h < cfg.heads; ++h) {
      Var A{nullptr, -1};
      Var vh{nullptr, -1};
      if (cfg.kind == AttnKind::Differential) {
        int off = h * 2 * cfg.d_k;
        Var s1 = t.softmax_rows(t.scale(
            t.bmm(t.slice_cols(q, off, cfg.d_k), t.slice_cols(k, off, cfg.d_k),
                  n, true),
            inv_sqrt_dk));
        Var s2 = t.softmax_rows(t.scale(
            t.bmm(t.slice_cols(q, off + cfg.d_k, cfg.d_k),
                  t.slice_cols(k, off + cfg.d_k, cfg.d_k), n, true),
            inv_sqrt_dk));
        Var g1 = t.exp(t.sum(t.mul(t.gather_rows(detail::attach(t, xi_q1, frozen), {h}),
                                   t.gather_rows(detail::attach(t, xi_k1, frozen), {h}))));
        Var g2 = t.exp(t.sum(t.mul(t.gather_rows(detail::attach(t, xi_q2, frozen), {h}),
                                   t.gather_rows(detail::attach(t, xi_k2, frozen), {h}))));
        Var xi = t.add(t.sub(g1, g2), t.constant(Mat::scalar(cfg.xi_init)));
        A = t.sub(s1, t.mul(s2, xi));
        vh = t.slice_cols(v, off, 2 * cfg.d_k);
        if (trace) trace->xi.push_back(t.val(xi.id).a[0]);
      } else {
        int off = h * cfg.d_k;
        A = t.softmax_rows(t.scale(
            t.bmm(t.slice_cols(q, off, cfg.d_k), t.slice_cols(k, off, cfg.d_k),
                  n, true),
            inv_sqrt_dk));
        vh = t.slice_cols(v, off, cfg.d_k);
        if (trace) trace->xi.push_back(0.0);
      }
      if (trace) trace->attn.push_back(t.val(A.id));
      heads.push_back(t.bmm(A, vh, n, false));
    }
    Var cat = heads[0];
    for (std::size_t i = 1; i < heads.size(); ++i)
      cat = t.concat_cols(cat, heads[i]);
    return t.matmul(cat, detail::attach(t, Wo, frozen));
  }

  // Projection weights only (Wq, Wk, Wv, Wo) -- the quantities the
  // differential/standard parameter-parity comparison is about; the four gate
  // vectors add 4*heads*d_k scalars on top in differential mode.
  std::size_t projection_scalars() const {
    return Wq.size() + Wk.size() + Wv.size() + Wo.size();
  }

  void collect(ParamSet& ps, const std::string& prefix) {
    if (cfg.heads == 0) return;
    ps.add(prefix + "/Wq", Wq);
    ps.add(prefix + "/Wk", Wk);
    ps.add(prefix + "/Wv", Wv);
    ps.add(prefix + "/Wo", Wo);
    if (cfg.kind == AttnKind::Differential) {
      ps.add(prefix + "/xi_q1", xi_q1);
      ps.add(prefix + "/xi_k1", xi_k1);
      ps.add(prefix + "/xi_q2", xi_q2);
      ps.add(prefix + "/xi_k2", xi_k2);
    }
  }
};

// ---------------------------------------------------------------------------
// Scalar-valued attention network: per-agent embedding MLPs -> differential
// attention -> residual concat [X | E] -> output MLP -> one value per sample.
// Q networks take [obs_j | act_j] tokens, the V network obs_j tokens only.
// ---------------------------------------------------------------------------

struct AttnValueNet {
  DiffAttnConfig cfg;
  std::vector<Mlp> embed;  // one per agent token
  DiffAttnBlock attn;
  Mlp out;

  void init(const DiffAttnConfig& c, Rng& rng) {
    if (c.n_agents <= 0) throw ConfigError("critic: n_agents must be positive");
    if (c.token_dim <= 0) throw ConfigError("critic: token_dim must be positive");
    if (c.embed_hidden.empty() || c.out_hidden.empty())
      throw ConfigError("critic: embed/out MLPs need a hidden layer");
    cfg = c;
    embed.clear();
    for (int j = 0; j < c.n_agents; ++j) {
      embed.emplace_back();
      embed.back().init({c.token_dim, c.embed_hidden, c.d_model}, rng);
    }
    attn.init(c, rng);
    int flat = (c.heads > 0 ? 2 : 1) * c.n_agents * c.d_model;
    out.init({flat, c.out_hidden, 1}, rng);
  }

  // tokens[j] is B x token_dim; returns B x 1 values.
  Var forward(Tape& t, const std::vector<Var>& tokens, bool frozen = false,
              AttnTrace* trace = nullptr) {
    const int n = cfg.n_agents;
    if (static_cast<int>(tokens.size()) != n)
      throw NumericalError("critic: agent count mismatch");
    int B = tokens[0].val().rows;
    std::vector<Var> e;
    e.reserve(n);
    for (int j = 0; j < n; ++j) {
      const Mat& tv = tokens[j].val();
      if (tv.rows != B || tv.cols != cfg.token_dim)
        throw NumericalError("critic: token shape mismatch");
      e.push_back(embed[j].forward(t, tokens[j], frozen));
    }
    Var E = e[0];
    if (n > 1) {
      for (int j = 1; j < n; ++j) E = t.concat_rows(E, e[j]);
      // concat_rows stacks agent-major; reorder to sample-major (B*n rows).
      std::vector<int> perm(static_cast<std::size_t>(B) * n);
      for (int b = 0; b < B; ++b)
        for (int j = 0; j < n; ++j) perm[b * n + j] = j * B + b;
      E = t.gather_rows(E, std::move(perm));
    }
    Var H = E;
    int width = cfg.d_model;
    if (cfg.heads > 0) {
      Var X = attn.forward(t, E, frozen, trace);
      H = t.concat_cols(X, E);
      width = 2 * cfg.d_model;
    }
    Var flat = t.reshape(H, B, n * width);
    return out.forward(t, flat, frozen);
  }

  void collect(ParamSet& ps, const std::string& prefix) {
    for (std::size_t j = 0; j < embed.size(); ++j)
      embed[j].collect(ps, prefix + "/embed" + std::to_string(j));
    attn.collect(ps, prefix + "/attn");
    out.collect(ps, prefix + "/out");
  }
};

// ---------------------------------------------------------------------------
// Per-agent critic bundle: twin Q networks, V network, Polyak-averaged target
// V (identical architecture, delayed parameters).
// ---------------------------------------------------------------------------

struct CriticConfig {
  int n_agents = 3;
  int obs_dim = 9;
  int act_dim = 5;
  int d_model = 64;
  int heads = 4;
  int d_k = 8;
  double xi_init = 0.2;
  AttnKind kind = AttnKind::Differential;
  std::vector<int> embed_hidden{64};
  std::vector<int> out_hidden{64};
};

struct CriticBundle {
  CriticConfig cfg;
  AttnValueNet q1, q2;  // independently initialized twins over [obs | act]
  AttnValueNet v, v_target;

  void init(const CriticConfig& c, Rng& rng) {
    cfg = c;
    DiffAttnConfig qc{c.n_agents, c.obs_dim + c.act_dim, c.d_model, c.heads,
                      c.d_k,      c.xi_init,             c.kind,
                      c.embed_hidden, c.out_hidden};
    DiffAttnConfig vc = qc;
    vc.token_dim = c.obs_dim;
    q1.init(qc, rng);
    q2.init(qc, rng);
    v.init(vc, rng);
    v_target = v;  // deep copy: target starts equal to the online V
  }

  // Builds [obs_j | act_j] token Vars for the Q networks.
  std::vector<Var> q_tokens(Tape& t, const std::vector<Var>& obs,
                            const std::vector<Var>& act) const {
    if (obs.size() != act.size() ||
        static_cast<int>(obs.size()) != cfg.n_agents)
      throw NumericalError("critic: agent count mismatch");
    std::vector<Var> tok;
    tok.reserve(obs.size());
    for (std::size_t j = 0; j < obs.size(); ++j)
      tok.push_back(t.concat_cols(obs[j], act[j]));
    return tok;
  }

  void polyak(double tau) {
    ParamSet tgt, on;
    v_target.collect(tgt, "v");
    v.collect(on, "v");
    polyak_update(tgt, on, tau);
  }

  void collect(ParamSet& ps, const std::string& prefix) {
    q1.collect(ps, prefix + "/q1");
    q2.collect(ps, prefix + "/q2");
    v.collect(ps, prefix + "/v");
    v_target.collect(ps, prefix + "/v_target");
  }
};

// Plain joint evaluation: per-agent observation and action rows (B x dim
// each) -> Q1, Q2, V values as B x 1 matrices.  No gradients.
struct CriticOut {
  Mat q1, q2, v;
};

inline CriticOut critic_forward(CriticBundle& cb, const std::vector<Mat>& obs,
                                const std::vector<Mat>& act) {
  Tape t;
  std::vector<Var> ov, av;
  for (const Mat& m : obs) ov.push_back(t.constant(m));
  for (const Mat& m : act) av.push_back(t.constant(m));
  auto qtok = cb.q_tokens(t, ov, av);
  Var vq1 = cb.q1.forward(t, qtok, /*frozen=*/true);
  Var vq2 = cb.q2.forward(t, qtok, /*frozen=*/true);
  Var vv = cb.v.forward(t, ov, /*frozen=*/true);
  return {t.val(vq1.id), t.val(vq2.id), t.val(vv.id)};
}

}  // namespace p2plab::nets
