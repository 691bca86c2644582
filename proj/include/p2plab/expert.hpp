#pragma once
// Expert workflow: model generation backends, IR validation/correction,
// IR -> QP compilation, receding-horizon day planning and the distribution
// operator's voltage verification pass.
//
// The pipeline mirrors how an operator would deploy it: a generator (template
// expansion, recorded fixtures, or an external service with fallback)
// produces a convex dispatch IR per prosumer; the IR is checked and — where
// possible — repaired; a QP compiled from the IR is re-bound and re-solved
// along a receding horizon to produce a full-day schedule; finally the
// schedules of all prosumers are verified jointly against the feeder's
// voltage envelope and nudged via linearized sensitivities if needed.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "p2plab/common.hpp"
#include "p2plab/fixtures.hpp"
#include "p2plab/market.hpp"
#include "p2plab/model_ir.hpp"
#include "p2plab/network.hpp"
#include "p2plab/prosumer.hpp"
#include "p2plab/qp.hpp"

namespace p2plab {

inline constexpr double kBigM = 1e3;          // bound patch for repaired vars
inline constexpr double kSlackPenalty = 1e3;  // soft-constraint price

// --- IR -> QP compilation ------------------------------------------------

// Structure compiled once per IR; per-solve data only touches q/l/u, so a
// receding horizon re-binds the same matrices every step.
struct CompiledQp {
  int horizon = 0;
  Eigen::MatrixXd P, A;
  Eigen::VectorXd q0, l0, u0;  // data-independent parts
  std::unordered_map<std::string, int> base;  // var -> first column
  std::vector<std::pair<std::string, int>> blocks;  // layout (name, len)

  struct QRef {
    int idx;
    double coef;
    std::string ref;
    int t;
  };
  struct RowRef {  // rhs data contribution of one row
    int row;
    double coef;
    std::string ref;
    int t;
    bool lo, hi;
  };
  struct InitRef {  // lagged var at t=0 resolved from "init:<var>"
    int row;
    double coef;  // moved to the rhs with opposite sign
    std::string var;
    bool lo, hi;
  };
  std::vector<QRef> qrefs;
  std::vector<RowRef> rowrefs;
  std::vector<InitRef> initrefs;

  int col(const std::string& var, int t) const { return base.at(var) + t; }
};

namespace detail {

inline double ref_value(const IrData& data, const std::string& name, int t) {
  auto s = data.series.find(name);
  if (s != data.series.end()) {
    if (t < 0 || t >= static_cast<int>(s->second.size()))
      throw DataError("data series too short: " + name);
    return s->second[t];
  }
  auto c = data.scalars.find(name);
  if (c != data.scalars.end()) return c->second;
  throw DataError("missing data ref: " + name);
}

}  // namespace detail

inline CompiledQp compile_ir(const ModelIR& ir) {
  CompiledQp c;
  const int T = ir.horizon;
  c.horizon = T;

  int n = 0;
  for (const IrVariable& v : ir.vars) {
    if (v.horizon != T)
      throw DataError("variable horizon mismatch: " + v.name);
    if (c.base.count(v.name))
      throw DataError("duplicate IR variable: " + v.name);
    c.base[v.name] = n;
    c.blocks.push_back({v.name, v.horizon});
    n += v.horizon;
  }
  // epigraph auxiliaries for absolute-value objective terms
  std::vector<std::pair<int, const IrObjTerm*>> abs_terms;
  int k = 0;
  for (const IrObjTerm& o : ir.objective) {
    if (o.kind != "abs") continue;
    std::string aux = "abs" + std::to_string(k++) + ":" + o.var;
    c.base[aux] = n;
    c.blocks.push_back({aux, T});
    abs_terms.push_back({n, &o});
    n += T;
  }

  int m = 0;  // rows: boxes with at least one finite bound, constraints, abs
  for (const IrVariable& v : ir.vars)
    if (std::isfinite(v.lb) || std::isfinite(v.ub)) m += T;
  for (auto& [idx, o] : abs_terms) m += T;  // aux >= 0
  m += static_cast<int>(ir.constraints.size()) * T;
  m += static_cast<int>(abs_terms.size()) * 2 * T;  // epigraph rows

  c.P = Eigen::MatrixXd::Zero(n, n);
  c.A = Eigen::MatrixXd::Zero(m, n);
  c.q0 = Eigen::VectorXd::Zero(n);
  c.l0 = Eigen::VectorXd::Constant(m, -kInf);
  c.u0 = Eigen::VectorXd::Constant(m, kInf);

  int row = 0;
  for (const IrVariable& v : ir.vars) {
    if (!std::isfinite(v.lb) && !std::isfinite(v.ub)) continue;
    for (int t = 0; t < T; ++t) {
      c.A(row, c.col(v.name, t)) = 1.0;
      c.l0[row] = v.lb;
      c.u0[row] = v.ub;
      ++row;
    }
  }
  for (auto& [idx, o] : abs_terms)
    for (int t = 0; t < T; ++t) {
      c.A(row, idx + t) = 1.0;
      c.l0[row] = 0.0;
      ++row;
    }

  for (const IrConstraint& con : ir.constraints) {
    bool eq = con.kind == "eq", le = con.kind == "le", ge = con.kind == "ge";
    if (!eq && !le && !ge)
      throw DataError("invalid constraint kind: " + con.kind);
    for (int t = 0; t < T; ++t) {
      bool lo = eq || ge, hi = eq || le;
      double rhs = con.rhs;
      for (const IrTerm& term : con.terms) {
        if (!c.base.count(term.var))
          throw DataError("constraint references undeclared variable: " +
                          term.var);
        int tt = t - term.lag;
        if (tt >= 0) {
          c.A(row, c.col(term.var, tt)) += term.coef;
        } else {
          c.initrefs.push_back({row, term.coef, term.var, lo, hi});
        }
      }
      if (lo) c.l0[row] = rhs;
      if (hi) c.u0[row] = rhs;
      if (!con.rhs_ref.empty())
        c.rowrefs.push_back({row, con.rhs_ref_coef, con.rhs_ref, t, lo, hi});
      ++row;
    }
  }
  for (auto& [idx, o] : abs_terms) {
    int vcol = -1;
    if (!c.base.count(o->var))
      throw DataError("objective references undeclared variable: " + o->var);
    vcol = c.base.at(o->var);
    for (int t = 0; t < T; ++t) {  //  v - w <= 0   and   -v - w <= 0
      c.A(row, vcol + t) = 1.0;
      c.A(row, idx + t) = -1.0;
      c.u0[row] = 0.0;
      ++row;
      c.A(row, vcol + t) = -1.0;
      c.A(row, idx + t) = -1.0;
      c.u0[row] = 0.0;
      ++row;
    }
  }
  if (row != m) throw NumericalError("compile_ir row accounting bug");

  k = 0;
  for (const IrObjTerm& o : ir.objective) {
    if (!c.base.count(o.var))
      throw DataError("objective references undeclared variable: " + o.var);
    if (o.kind == "quad") {
      if (o.coef < 0)
        throw DataError("nonconvex quadratic objective on " + o.var);
      for (int t = 0; t < T; ++t) {
        int i = c.col(o.var, t);
        c.P(i, i) += 2.0 * o.coef;  // objective is 1/2 x'Px
      }
    } else if (o.kind == "lin") {
      for (int t = 0; t < T; ++t) {
        int i = c.col(o.var, t);
        if (o.coef_ref.empty())
          c.q0[i] += o.coef;
        else
          c.qrefs.push_back({i, o.coef, o.coef_ref, t});
      }
    } else if (o.kind == "abs") {
      if (o.coef < 0)
        throw DataError("negative absolute-value coefficient on " + o.var);
      int aux = c.base.at("abs" + std::to_string(k++) + ":" + o.var);
      for (int t = 0; t < T; ++t) {
        if (o.coef_ref.empty())
          c.q0[aux + t] += o.coef;
        else
          c.qrefs.push_back({aux + t, o.coef, o.coef_ref, t});
      }
    } else {
      throw DataError("unknown objective kind: " + o.kind);
    }
  }
  return c;
}

// Instantiates the numeric QP for one data binding.
inline QpProblem bind_qp(const CompiledQp& c, const IrData& data) {
  QpProblem p;
  p.P = c.P;
  p.A = c.A;
  p.q = c.q0;
  p.l = c.l0;
  p.u = c.u0;
  for (const auto& r : c.qrefs)
    p.q[r.idx] += r.coef * detail::ref_value(data, r.ref, r.t);
  for (const auto& r : c.rowrefs) {
    double v = r.coef * detail::ref_value(data, r.ref, r.t);
    if (r.lo) p.l[r.row] += v;
    if (r.hi) p.u[r.row] += v;
  }
  for (const auto& r : c.initrefs) {
    double v = -r.coef * detail::ref_value(data, "init:" + r.var, 0);
    if (r.lo) p.l[r.row] += v;
    if (r.hi) p.u[r.row] += v;
  }
  return p;
}

struct IrSolution {
  QpStatus status = QpStatus::MaxIter;
  double objective = 0.0;
  double kkt = kInf;
  int iters = 0;
  std::unordered_map<std::string, std::vector<double>> values;
  QpResult raw;
};

inline IrSolution solve_convex(const CompiledQp& c, const IrData& data,
                               const QpOptions& opt = {},
                               const QpResult* warm = nullptr) {
  QpProblem p = bind_qp(c, data);
  QpResult r = solve_qp(p, opt, warm ? &warm->x : nullptr,
                        warm ? &warm->y : nullptr);
  IrSolution s;
  s.status = r.status;
  s.iters = r.iters;
  if (r.status == QpStatus::Optimal) {
    s.objective = r.obj;
    s.kkt = r.kkt;
    for (const auto& [name, len] : c.blocks) {
      std::vector<double> vals(len);
      int b = c.base.at(name);
      for (int t = 0; t < len; ++t) vals[t] = r.x[b + t];
      s.values[name] = std::move(vals);
    }
  }
  s.raw = std::move(r);
  return s;
}

inline IrSolution solve_convex(const ModelIR& ir, const IrData& data,
                               const QpOptions& opt = {}) {
  return solve_convex(compile_ir(ir), data, opt);
}

// --- validation & correction --------------------------------------------

struct CorrectionIssue {
  std::string code;    // stable identifier, e.g. "undeclared_variable"
  std::string detail;  // what was wrong
  std::string fix;     // empty when unfixable
};

struct CorrectionReport {
  bool passed = false;
  int iterations = 0;  // repair loop passes consumed (1 == clean first try)
  std::vector<CorrectionIssue> issues;

  bool has(const std::string& code) const {
    for (const auto& i : issues)
      if (i.code == code) return true;
    return false;
  }
};

namespace detail {

// Declares a slack variable and rewrites `con` (an equality) into the pair
// lhs - s <= rhs, lhs + s >= rhs with a linear penalty on s.
inline void soften_constraint(ModelIR& ir, std::size_t ci) {
  IrConstraint con = ir.constraints[ci];
  std::string s = "slack:" + con.name;
  if (ir.has_var(s)) return;
  ir.vars.push_back({s, ir.horizon, 0.0, kInf});
  IrConstraint lo = con, hi = con;
  hi.name = con.name + ":soft_hi";
  hi.kind = "le";
  hi.terms.push_back({-1.0, s, 0});
  lo.name = con.name + ":soft_lo";
  lo.kind = "ge";
  lo.terms.push_back({1.0, s, 0});
  ir.constraints[ci] = hi;
  ir.constraints.push_back(lo);
  ir.objective.push_back({"lin", s, kSlackPenalty, ""});
}

}  // namespace detail

// Static checks plus trial solves with targeted repairs, up to `max_iters`
// passes.  Unfixable defects (notably missing data references) abort with
// passed == false; everything else is patched in place and recorded.
inline CorrectionReport validate_and_correct(ModelIR& ir, const IrData& data,
                                             int max_iters = 5) {
  CorrectionReport rep;
  for (int pass = 1; pass <= max_iters; ++pass) {
    rep.iterations = pass;
    bool changed = false;
    bool fatal = false;

    // -- static sweep ---------------------------------------------------
    std::unordered_set<std::string> names;
    for (const IrVariable& v : ir.vars) {
      if (!names.insert(v.name).second) {
        rep.issues.push_back({"duplicate_variable", v.name, ""});
        fatal = true;
      }
    }
    for (IrVariable& v : ir.vars) {
      if (v.horizon != ir.horizon) {
        rep.issues.push_back({"horizon_mismatch", v.name,
                              "stretched to the model horizon"});
        v.horizon = ir.horizon;
        changed = true;
      }
    }
    auto ensure_declared = [&](const std::string& var, const std::string& where) {
      if (ir.has_var(var)) return;
      rep.issues.push_back({"undeclared_variable", var + " used by " + where,
                            "declared with big-M bounds"});
      ir.vars.push_back({var, ir.horizon, -kBigM, kBigM});
      changed = true;
    };
    for (const IrConstraint& con : ir.constraints) {
      if (con.kind != "eq" && con.kind != "le" && con.kind != "ge") {
        rep.issues.push_back({"invalid_constraint_kind",
                              con.name + ": " + con.kind, ""});
        fatal = true;
      }
      for (const IrTerm& t : con.terms) ensure_declared(t.var, con.name);
    }
    for (const IrObjTerm& o : ir.objective) ensure_declared(o.var, "objective");
    for (std::size_t i = 0; i < ir.vars.size(); ++i) {
      IrVariable& v = ir.vars[i];
      if (v.lb > v.ub) {
        rep.issues.push_back(
            {"contradictory_bounds",
             v.name + ": [" + std::to_string(v.lb) + ", " +
                 std::to_string(v.ub) + "]",
             "softened into a penalized corridor"});
        double lb = v.lb, ub = v.ub;
        v.lb = -kBigM;
        v.ub = kBigM;
        std::string s = "slack:" + v.name;
        ir.vars.push_back({s, ir.horizon, 0.0, kInf});
        ir.constraints.push_back({"soft_ub:" + v.name,
                                  {{1.0, v.name, 0}, {-1.0, s, 0}},
                                  "le",
                                  ub,
                                  "",
                                  1.0});
        ir.constraints.push_back({"soft_lb:" + v.name,
                                  {{1.0, v.name, 0}, {1.0, s, 0}},
                                  "ge",
                                  lb,
                                  "",
                                  1.0});
        ir.objective.push_back({"lin", s, kSlackPenalty, ""});
        changed = true;
        break;  // vars vector was touched; rescan on the next checks
      }
    }
    for (auto& o : ir.objective) {
      if (o.kind == "quad" && o.coef < 0) {
        rep.issues.push_back({"nonconvex_objective",
                              "negative quadratic on " + o.var,
                              "coefficient sign flipped"});
        o.coef = -o.coef;
        changed = true;
      }
      if (o.kind == "abs" && o.coef < 0) {
        rep.issues.push_back({"nonconvex_objective",
                              "negative |.| coefficient on " + o.var,
                              "coefficient sign flipped"});
        o.coef = -o.coef;
        changed = true;
      }
    }
    // data references must resolve; no repair can invent measurements
    auto check_ref = [&](const std::string& name, const std::string& where) {
      if (name.empty()) return;
      auto s = data.series.find(name);
      if (s != data.series.end()) {
        if (static_cast<int>(s->second.size()) < ir.horizon) {
          rep.issues.push_back({"missing_data_ref",
                                name + " shorter than horizon (" + where + ")",
                                ""});
          fatal = true;
        }
        return;
      }
      if (data.scalars.count(name)) return;
      rep.issues.push_back({"missing_data_ref", name + " (" + where + ")", ""});
      fatal = true;
    };
    for (const IrConstraint& con : ir.constraints) {
      check_ref(con.rhs_ref, con.name);
      for (const IrTerm& t : con.terms)
        if (t.lag > 0) check_ref("init:" + t.var, con.name);
    }
    for (const IrObjTerm& o : ir.objective) check_ref(o.coef_ref, "objective");

    if (fatal) {
      rep.passed = false;
      return rep;
    }
    if (changed) continue;  // re-run statics until a clean sweep

    // -- trial solve ----------------------------------------------------
    IrSolution sol;
    try {
      sol = solve_convex(ir, data);
    } catch (const DataError& e) {
      rep.issues.push_back({"compile_error", e.what(), ""});
      rep.passed = false;
      return rep;
    }
    if (sol.status == QpStatus::Optimal) {
      rep.passed = true;
      return rep;
    }
    if (sol.status == QpStatus::DualInfeasible) {
      rep.issues.push_back({"unbounded_problem",
                            "objective decreases along a feasible ray",
                            "free variable bounds clamped to big-M"});
      for (IrVariable& v : ir.vars) {
        if (!std::isfinite(v.lb)) v.lb = -kBigM;
        if (!std::isfinite(v.ub)) v.ub = kBigM;
      }
      continue;
    }
    if (sol.status == QpStatus::PrimalInfeasible) {
      // soften stateful equality chains first (the usual culprit), then
      // every equality if that was not enough
      bool soft = false;
      for (std::size_t i = 0; i < ir.constraints.size(); ++i) {
        const IrConstraint& con = ir.constraints[i];
        if (con.kind != "eq") continue;
        bool lagged = false;
        for (const IrTerm& t : con.terms) lagged |= t.lag > 0;
        if (!lagged || ir.has_var("slack:" + con.name)) continue;
        rep.issues.push_back({"infeasible_state_chain", con.name,
                              "equality softened with a penalized slack"});
        detail::soften_constraint(ir, i);
        soft = true;
      }
      if (!soft) {
        for (std::size_t i = 0; i < ir.constraints.size(); ++i) {
          const IrConstraint& con = ir.constraints[i];
          if (con.kind != "eq" || ir.has_var("slack:" + con.name)) continue;
          rep.issues.push_back({"infeasible_constraints", con.name,
                                "equality softened with a penalized slack"});
          detail::soften_constraint(ir, i);
          soft = true;
        }
      }
      if (!soft) {
        rep.issues.push_back({"infeasible_constraints",
                              "no further softening available", ""});
        rep.passed = false;
        return rep;
      }
      continue;
    }
    rep.issues.push_back({"solver_stall", "trial solve hit iteration limit",
                          ""});
    rep.passed = false;
    return rep;
  }
  rep.issues.push_back({"correction_budget_exhausted", "", ""});
  rep.passed = false;
  return rep;
}

// --- defect injection (test fixtures and the metrics CLI) ----------------

inline const std::vector<std::string>& defect_modes() {
  static const std::vector<std::string> m{"unbounded", "undeclared",
                                          "soc_bounds", "nonconvex",
                                          "missing_ref"};
  return m;
}

// Damages a healthy IR in a controlled way so the correction loop has
// something to fix (or, for missing_ref, something it must refuse to fix).
inline void apply_defect(ModelIR& ir, const std::string& mode) {
  if (mode == "unbounded") {
    ir.vars.push_back({"spurious", ir.horizon, -kInf, kInf});
    ir.objective.push_back({"lin", "spurious", -1.0, ""});
  } else if (mode == "undeclared") {
    ir.constraints.push_back({"ghost_link",
                              {{1.0, "ghost_var", 0}},
                              "le",
                              1.0,
                              "",
                              1.0});
  } else if (mode == "soc_bounds") {
    IrVariable& v = ir.has_var("soc") ? ir.var("soc") : ir.vars.front();
    v.lb = 0.9;
    v.ub = 0.2;
  } else if (mode == "nonconvex") {
    bool flipped = false;
    for (auto& o : ir.objective)
      if (o.kind == "quad") {
        o.coef = -std::abs(o.coef);
        flipped = true;
        break;
      }
    if (!flipped) ir.objective.push_back({"quad", ir.vars.front().name, -1.0, ""});
  } else if (mode == "missing_ref") {
    ir.constraints.push_back({"phantom_cap",
                              {{1.0, ir.vars.front().name, 0}},
                              "le",
                              0.0,
                              "no_such_series",
                              1.0});
  } else {
    throw ConfigError("unknown defect mode: " + mode);
  }
}

// --- generation backends -------------------------------------------------

class GeneratorBackend {
 public:
  virtual ~GeneratorBackend() = default;
  // Produces the device-side dispatch IR (no trading integration).
  virtual ModelIR generate(const ProsumerSpec& spec, int horizon,
                           double dt_hours) = 0;
  virtual std::string name() const = 0;
};

class DeterministicBackend : public GeneratorBackend {
 public:
  ModelIR generate(const ProsumerSpec& spec, int horizon,
                   double dt_hours) override {
    return generate_model(spec, horizon, dt_hours);
  }
  std::string name() const override { return "deterministic"; }
};

// Loads a recorded IR from "<dir>/<tag>.json" and re-stamps the horizon;
// the IR is a per-step template, so stretching it is exact.
class FixtureBackend : public GeneratorBackend {
 public:
  explicit FixtureBackend(std::string dir) : dir_(std::move(dir)) {}
  ModelIR generate(const ProsumerSpec& spec, int horizon,
                   double dt_hours) override {
    std::string path = dir_ + "/" + spec.tag + ".json";
    std::ifstream in(path);
    if (!in) throw DataError("no recorded model at " + path);
    nlohmann::json j;
    in >> j;
    ModelIR ir = ModelIR::from_json(j);
    ir.horizon = horizon;
    ir.dt_hours = dt_hours;
    for (IrVariable& v : ir.vars) v.horizon = horizon;
    return ir;
  }
  std::string name() const override { return "fixture"; }

 private:
  std::string dir_;
};

struct ExpertOptions {
  int horizon = 8;        // receding lookahead in steps
  int correction_iters = 5;
  double dso_margin = 0.002;  // envelope shrink targeted by corrections
  int dso_rounds = 3;         // per-step adjustment rounds
  QpOptions qp;
};

// --- receding-horizon day planning ---------------------------------------

struct ExpertSchedule {
  int agent = -1;
  std::vector<Action> actions;    // feasible along the true state chain
  std::vector<double> p2p, grid;  // planned market split per step
  std::vector<double> step_cost;  // plan-accounted operational cost
  double objective = 0.0;         // sum of step costs
  int corrections = 0;            // repair issues hit during generation
};

namespace detail {

// Series value with access past the current day: later days are real data,
// beyond the horizon the last sample holds; prices wrap daily.
inline double series_at(const std::vector<double>& s, int idx) {
  if (s.empty()) return 0.0;
  return s[std::min<int>(idx, static_cast<int>(s.size()) - 1)];
}

inline IrData bind_window(const Scenario& sc, int agent, int day, int t,
                          int H, const DeviceState& st, bool has_cdg,
                          bool has_bess) {
  const AgentSeries& ser = sc.data.agents[agent];
  const int T = sc.data.steps_per_day;
  IrData d;
  std::vector<double> load(H), avail(H), pb(H), ps(H), pp(H);
  for (int w = 0; w < H; ++w) {
    int g = day * T + t + w;
    load[w] = series_at(ser.load_p, g);
    avail[w] = series_at(ser.rdg, g);
    PricesAtT pr = sc.prices.at((t + w) % T);
    pb[w] = pr.buy;
    ps[w] = pr.sell;
    pp[w] = pr.p2p;
  }
  d.series["load_p"] = std::move(load);
  d.series["rdg_avail"] = std::move(avail);
  d.series["price_buy"] = std::move(pb);
  d.series["price_sell"] = std::move(ps);
  d.series["price_p2p"] = std::move(pp);
  d.scalars["dso_fee"] = sc.prices.dso_fee;
  if (has_cdg) d.scalars["init:p_cdg"] = st.p_cdg_prev;
  if (has_bess) d.scalars["init:soc"] = st.soc;
  return d;
}

}  // namespace detail

// Plans one agent's day by re-solving its dispatch QP every step on a
// window of `opts.horizon` steps, committing only the first step.  The
// committed action is re-projected against the true device state, which
// also keeps the plan honest when the model was repaired.
inline ExpertSchedule plan_day(const Scenario& sc, int agent, int day,
                               GeneratorBackend& backend,
                               const ExpertOptions& opts = {}) {
  const ProsumerSpec& spec = sc.prosumers[agent];
  const AgentSeries& ser = sc.data.agents[agent];
  const int T = sc.data.steps_per_day;
  const int H = opts.horizon;

  ModelIR ir = backend.generate(spec, H, sc.dt_hours);
  integrate_trading(ir, spec);
  DeviceState probe_state{};  // validation binding at the day's start
  IrData d0 = detail::bind_window(sc, agent, day, 0, H, probe_state,
                                  spec.cdg.has_value(), spec.bess.has_value());
  CorrectionReport rep = validate_and_correct(ir, d0, opts.correction_iters);
  if (!rep.passed)
    throw DataError("dispatch model for agent " + std::to_string(agent) +
                    " failed validation (" +
                    (rep.issues.empty() ? std::string("unknown")
                                        : rep.issues.back().code) +
                    ")");
  CompiledQp qp = compile_ir(ir);

  ExpertSchedule out;
  out.agent = agent;
  out.corrections = static_cast<int>(rep.issues.size());
  out.actions.resize(T);
  out.p2p.resize(T);
  out.grid.resize(T);
  out.step_cost.resize(T);

  DeviceState st{};
  IrSolution prev;
  for (int t = 0; t < T; ++t) {
    IrData d = detail::bind_window(sc, agent, day, t, H, st,
                                   spec.cdg.has_value(), spec.bess.has_value());
    IrSolution sol = solve_convex(qp, d, opts.qp,
                                  t > 0 ? &prev.raw : nullptr);
    if (sol.status != QpStatus::Optimal)
      throw NumericalError("receding-horizon solve failed at step " +
                           std::to_string(t) + " (" +
                           to_string(sol.status) + ")");

    Action a;
    auto first = [&](const char* name) {
      auto it = sol.values.find(name);
      return it == sol.values.end() ? 0.0 : it->second[0];
    };
    a.p_cdg = first("p_cdg");
    a.p_rdg = first("p_rdg");
    a.q_rdg = first("q_rdg");
    a.p_bess = first("p_ch") - first("p_dis");
    a.p_cl = first("p_cl");

    int idx = day * T + t;
    Action exec = project_action(a, spec, st, ser.rdg[idx], ser.load_p[idx],
                                 sc.dt_hours);
    auto [pex, qex] = grid_exchange(exec, ser.load_p[idx], ser.load_q[idx]);
    (void)qex;
    double p2p = first("p_p2p");
    // projection dust lands on the grid leg so accounting stays exact
    double grid = -pex - p2p;
    out.actions[t] = exec;
    out.p2p[t] = p2p;
    out.grid[t] = grid;
    out.step_cost[t] =
        operational_cost(exec, grid, p2p, sc.prices.at(t), spec).total();

    st.p_cdg_prev = exec.p_cdg;
    if (spec.bess) st.soc = step_soc(st.soc, exec.p_bess, *spec.bess, sc.dt_hours);
    prev = std::move(sol);
  }
  for (double c : out.step_cost) out.objective += c;
  return out;
}

// --- DSO voltage verification --------------------------------------------

struct DsoReport {
  int steps_checked = 0;
  int pre_violation_steps = 0;   // steps with any envelope violation as planned
  int post_violation_steps = 0;  // ... after adjustment
  double worst_pre = 0.0, worst_post = 0.0;
  int adjusted_steps = 0;
  int rounds_used = 0;  // max adjustment rounds needed on any step
  bool clean = false;   // no violations remain anywhere
};

namespace detail {

// Exact exchange headroom by probing the projection with saturating raw
// actions: the projection layer already encodes every box, ramp and SOC
// rule, so the probe needs no device-specific duplication.
inline double probed_pex(const Action& base, double dir,
                         const ProsumerSpec& spec, const DeviceState& st,
                         double avail, double load_p, double load_q,
                         double dt_hours) {
  Action raw = base;
  const double big = 1e6;
  if (dir > 0) {  // push exports up
    raw.p_cdg = big;
    raw.p_rdg = big;
    raw.p_bess = -big;
    raw.p_cl = big;
  } else {  // pull exports down
    raw.p_cdg = -big;
    raw.p_rdg = 0.0;
    raw.p_bess = big;
    raw.p_cl = 0.0;
  }
  Action p = project_action(raw, spec, st, avail, load_p, dt_hours);
  return grid_exchange(p, load_p, load_q).first;
}

}  // namespace detail

// Joint verification of all agents' schedules against the feeder's voltage
// envelope.  Steps with violations get a minimum-norm injection shift
// computed from LinDistFlow sensitivities, realized per agent by blending
// toward the saturating probe action and re-projecting (binary search on
// the blend, since projected exchange is monotone along it).  A step's
// adjustment is kept only if it does not increase the violating bus count.
inline DsoReport dso_verify(const Scenario& sc, int day,
                            std::vector<ExpertSchedule>& schedules,
                            const ExpertOptions& opts = {}) {
  const int n = static_cast<int>(schedules.size());
  if (n != sc.n_agents()) throw DataError("schedule/agent arity mismatch");
  const int T = sc.data.steps_per_day;
  const int nb = sc.net.n();
  const int slack = sc.net.slack_index();
  VoltSensitivity sens = lindistflow_sensitivity(sc.net);

  DsoReport rep;
  std::vector<DeviceState> st(n);
  for (int t = 0; t < T; ++t) {
    const int idx = day * T + t;
    auto run_step = [&](const std::vector<Action>& acts) {
      std::vector<Action> exec(n);
      std::vector<double> pex(n), qex(n);
      for (int i = 0; i < n; ++i) {
        const AgentSeries& ser = sc.data.agents[i];
        exec[i] = project_action(acts[i], sc.prosumers[i], st[i], ser.rdg[idx],
                                 ser.load_p[idx], sc.dt_hours);
        std::tie(pex[i], qex[i]) =
            grid_exchange(exec[i], ser.load_p[idx], ser.load_q[idx]);
      }
      Eigen::VectorXd p_inj = Eigen::VectorXd::Zero(nb);
      Eigen::VectorXd q_inj = Eigen::VectorXd::Zero(nb);
      for (int i = 0; i < n; ++i) {
        p_inj(sc.bus_index[i]) += pex[i];
        q_inj(sc.bus_index[i]) += qex[i];
      }
      BusSolution sol = ac_power_flow(sc.net, p_inj, q_inj);
      Eigen::VectorXd viol = voltage_violation(sol.v, sc.net);
      return std::tuple(exec, pex, sol, viol);
    };

    std::vector<Action> acts(n);
    for (int i = 0; i < n; ++i) acts[i] = schedules[i].actions[t];
    auto [exec, pex, sol, viol] = run_step(acts);
    auto count = [](const Eigen::VectorXd& v) {
      int c = 0;
      for (int i = 0; i < v.size(); ++i) c += v(i) > 1e-12;
      return c;
    };
    int pre_cnt = count(viol);
    double pre_worst = viol.maxCoeff();
    rep.steps_checked++;
    if (pre_cnt > 0) {
      rep.pre_violation_steps++;
      rep.worst_pre = std::max(rep.worst_pre, pre_worst);
    }

    int rounds = 0;
    while (pre_cnt > 0 && rounds < opts.dso_rounds) {
      ++rounds;
      // headroom boxes from the projection probes
      Eigen::VectorXd up(n), dn(n);
      for (int i = 0; i < n; ++i) {
        const AgentSeries& ser = sc.data.agents[i];
        up[i] = detail::probed_pex(acts[i], +1.0, sc.prosumers[i], st[i],
                                   ser.rdg[idx], ser.load_p[idx],
                                   ser.load_q[idx], sc.dt_hours) -
                pex[i];
        dn[i] = detail::probed_pex(acts[i], -1.0, sc.prosumers[i], st[i],
                                   ser.rdg[idx], ser.load_p[idx],
                                   ser.load_q[idx], sc.dt_hours) -
                pex[i];
      }
      // min ||dp||^2 + penalty*||s||^2  s.t. envelope rows with soft slack
      int nrows = nb - 1;
      QpProblem qp;
      int nv = n + 2 * nrows;
      qp.P = Eigen::MatrixXd::Zero(nv, nv);
      qp.P.topLeftCorner(n, n).diagonal().setConstant(1.0);
      qp.P.bottomRightCorner(2 * nrows, 2 * nrows).diagonal().setConstant(1e4);
      qp.q = Eigen::VectorXd::Zero(nv);
      qp.A = Eigen::MatrixXd::Zero(2 * nrows + nv, nv);
      qp.l = Eigen::VectorXd::Constant(2 * nrows + nv, -kInf);
      qp.u = Eigen::VectorXd::Constant(2 * nrows + nv, kInf);
      int row = 0, r = 0;
      for (int b = 0; b < nb; ++b) {
        if (b == slack) continue;
        const Bus& bus = sc.net.buses[b];
        double lo = bus.v_min + opts.dso_margin - sol.v(b);
        double hi = bus.v_max - opts.dso_margin - sol.v(b);
        // sum_i S(b, bus_i) dp_i + s_lo >= lo
        for (int i = 0; i < n; ++i)
          qp.A(row, i) = sens.dv_dp(b, sc.bus_index[i]);
        qp.A(row, n + r) = 1.0;
        qp.l[row] = lo;
        ++row;
        // sum_i S(b, bus_i) dp_i - s_hi <= hi
        for (int i = 0; i < n; ++i)
          qp.A(row, i) = sens.dv_dp(b, sc.bus_index[i]);
        qp.A(row, n + nrows + r) = -1.0;
        qp.u[row] = hi;
        ++row;
        ++r;
      }
      for (int i = 0; i < nv; ++i) {  // boxes
        qp.A(row, i) = 1.0;
        if (i < n) {
          qp.l[row] = std::min(dn[i], 0.0);
          qp.u[row] = std::max(up[i], 0.0);
        } else {
          qp.l[row] = 0.0;
        }
        ++row;
      }
      QpResult res = solve_qp(qp);
      if (res.status != QpStatus::Optimal) break;

      // realize each dp_i by blending toward the matching probe action
      std::vector<Action> cand = acts;
      for (int i = 0; i < n; ++i) {
        double target = pex[i] + res.x[i];
        if (std::abs(res.x[i]) < 1e-12) continue;
        const AgentSeries& ser = sc.data.agents[i];
        Action probe = acts[i];
        if (res.x[i] > 0) {
          probe.p_cdg = 1e6;
          probe.p_rdg = 1e6;
          probe.p_bess = -1e6;
          probe.p_cl = 1e6;
        } else {
          probe.p_cdg = -1e6;
          probe.p_rdg = 0.0;
          probe.p_bess = 1e6;
          probe.p_cl = 0.0;
        }
        double lo_mu = 0.0, hi_mu = 1.0;
        for (int it = 0; it < 50; ++it) {
          double mu = 0.5 * (lo_mu + hi_mu);
          Action blend;
          blend.p_cdg = acts[i].p_cdg + mu * (probe.p_cdg - acts[i].p_cdg);
          blend.p_rdg = acts[i].p_rdg + mu * (probe.p_rdg - acts[i].p_rdg);
          blend.q_rdg = acts[i].q_rdg;
          blend.p_bess = acts[i].p_bess + mu * (probe.p_bess - acts[i].p_bess);
          blend.p_cl = acts[i].p_cl + mu * (probe.p_cl - acts[i].p_cl);
          Action pj = project_action(blend, sc.prosumers[i], st[i],
                                     ser.rdg[idx], ser.load_p[idx],
                                     sc.dt_hours);
          double got =
              grid_exchange(pj, ser.load_p[idx], ser.load_q[idx]).first;
          bool need_more = (res.x[i] > 0) ? got < target : got > target;
          if (need_more)
            lo_mu = mu;
          else
            hi_mu = mu;
          cand[i] = blend;
        }
      }
      auto [exec2, pex2, sol2, viol2] = run_step(cand);
      int cnt2 = count(viol2);
      double worst2 = viol2.maxCoeff();
      if (cnt2 < pre_cnt || (cnt2 == pre_cnt && worst2 < pre_worst - 1e-12)) {
        acts = cand;
        exec = exec2;
        pex = pex2;
        sol = sol2;
        viol = viol2;
        pre_cnt = cnt2;
        pre_worst = worst2;
        if (rounds == 1) rep.adjusted_steps++;
      } else {
        break;  // no improvement; keep the previous step as-is
      }
    }
    rep.rounds_used = std::max(rep.rounds_used, rounds);
    if (pre_cnt > 0) {
      rep.post_violation_steps++;
      rep.worst_post = std::max(rep.worst_post, pre_worst);
    }

    // commit the step: write back executable actions and realized splits
    std::vector<double> desired(n);
    for (int i = 0; i < n; ++i) desired[i] = -pex[i];
    std::vector<double> p2p = clear_p2p(desired);
    for (int i = 0; i < n; ++i) {
      schedules[i].actions[t] = exec[i];
      schedules[i].p2p[t] = p2p[i];
      schedules[i].grid[t] = -pex[i] - p2p[i];
      schedules[i].step_cost[t] =
          operational_cost(exec[i], schedules[i].grid[t], p2p[i],
                           sc.prices.at(t), sc.prosumers[i])
              .total();
      st[i].p_cdg_prev = exec[i].p_cdg;
      if (sc.prosumers[i].bess)
        st[i].soc =
            step_soc(st[i].soc, exec[i].p_bess, *sc.prosumers[i].bess,
                     sc.dt_hours);
    }
  }
  for (ExpertSchedule& s : schedules) {
    s.objective = 0.0;
    for (double c : s.step_cost) s.objective += c;
  }
  rep.clean = rep.post_violation_steps == 0;
  return rep;
}

// Full pipeline for one day: per-agent receding plans, then the joint
// verification pass.
inline std::vector<ExpertSchedule> plan_and_verify(
    const Scenario& sc, int day, GeneratorBackend& backend,
    const ExpertOptions& opts = {}, DsoReport* report = nullptr) {
  std::vector<ExpertSchedule> out;
  for (int i = 0; i < sc.n_agents(); ++i)
    out.push_back(plan_day(sc, i, day, backend, opts));
  DsoReport rep = dso_verify(sc, day, out, opts);
  if (report) *report = rep;
  return out;
}

// Schedule lookup as an environment policy.
inline PolicyFn expert_policy(const std::vector<ExpertSchedule>& schedules) {
  return [&schedules](int agent, int t, const Obs&) {
    return schedules[agent].actions[t];
  };
}

// --- workflow metrics ----------------------------------------------------

struct WorkflowMetrics {
  int trials = 0;
  double pass_rate = 0.0;        // validated models / trials
  double avg_corrections = 0.0;  // mean repair issues per trial
  double mean_abs_deviation = 0.0;  // |obj - reference| / max(|ref|, 1e-9)
  double accuracy = 0.0;         // trials within 1% of the reference objective
};

// Benchmarks a generation backend against the template reference on
// synthetic windows over the five prosumer archetypes.
inline WorkflowMetrics workflow_metrics(GeneratorBackend& backend, int trials,
                                        int horizon = 8, double dt_hours = 0.25,
                                        std::uint64_t seed = 1) {
  static const char* tags[] = {"Commercial", "Rural", "Industrial",
                               "Residential", "EnergyHub"};
  WorkflowMetrics m;
  m.trials = trials;
  if (trials <= 0) return m;
  DeterministicBackend reference;
  int passed = 0, accurate = 0;
  double corr_sum = 0.0, dev_sum = 0.0;
  int dev_n = 0;
  for (int trial = 0; trial < trials; ++trial) {
    const char* tag = tags[trial % 5];
    ProsumerSpec spec = archetype_spec(tag, /*bus_id=*/1);
    Rng rng(seed + 977 * trial);
    std::uniform_real_distribution<double> jitter(0.9, 1.1);
    double peak = archetype_peak_load(tag);
    IrData d;
    std::vector<double> load(horizon), avail(horizon), pb(horizon),
        ps(horizon), pp(horizon);
    for (int t = 0; t < horizon; ++t) {
      load[t] = peak * (0.55 + 0.35 * std::sin(0.7 * t)) * jitter(rng);
      avail[t] = spec.rdg ? 0.5 * spec.rdg->s_max * jitter(rng) : 0.0;
      pb[t] = 0.75 * jitter(rng);
      ps[t] = 0.25;
      pp[t] = 0.5 * (pb[t] + ps[t]);
    }
    d.series["load_p"] = load;
    d.series["rdg_avail"] = avail;
    d.series["price_buy"] = pb;
    d.series["price_sell"] = ps;
    d.series["price_p2p"] = pp;
    d.scalars["dso_fee"] = 0.02;
    d.scalars["init:p_cdg"] = 0.0;
    d.scalars["init:soc"] = 0.5;

    auto pipeline = [&](GeneratorBackend& b, int* nissues) -> std::optional<double> {
      ModelIR ir;
      try {
        ir = b.generate(spec, horizon, dt_hours);
        integrate_trading(ir, spec);
      } catch (const std::exception&) {
        return std::nullopt;
      }
      CorrectionReport rep = validate_and_correct(ir, d);
      if (nissues) *nissues = static_cast<int>(rep.issues.size());
      if (!rep.passed) return std::nullopt;
      IrSolution sol = solve_convex(ir, d);
      if (sol.status != QpStatus::Optimal) return std::nullopt;
      return sol.objective;
    };
    std::optional<double> ref = pipeline(reference, nullptr);
    int nissues = 0;
    std::optional<double> got = pipeline(backend, &nissues);
    corr_sum += nissues;
    if (!got || !ref) continue;
    ++passed;
    double dev = std::abs(*got - *ref) / std::max(std::abs(*ref), 1e-9);
    dev_sum += dev;
    ++dev_n;
    if (dev <= 1e-2) ++accurate;
  }
  m.pass_rate = static_cast<double>(passed) / trials;
  m.avg_corrections = corr_sum / trials;
  m.mean_abs_deviation = dev_n ? dev_sum / dev_n : 0.0;
  m.accuracy = static_cast<double>(accurate) / trials;
  return m;
}

}  // namespace p2plab
