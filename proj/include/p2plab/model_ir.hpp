#pragma once
// Intermediate representation for per-prosumer convex dispatch models.
//
// The IR is the contract between the model generator (template-based,
// recorded fixture, or external service), the validation/correction loop and
// the QP compiler.  It is deliberately small:
//   * variables with a horizon and box bounds,
//   * linear constraints over {var[t], var[t-1]} with data-series RHS,
//   * objective terms: quadratic, linear (optionally scaled by a data
//     series per step, e.g. prices) and absolute-value.
// Lagged references at t=0 resolve to scalar data entries "init:<var>", so
// one IR can be re-bound cheaply along a receding horizon.
//
// JSON serialization is canonical: nlohmann keeps object keys sorted, and
// array order is generation order, so equal IRs serialize byte-identically.

#include <cmath>
#include <limits>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "p2plab/common.hpp"
#include "p2plab/prosumer.hpp"

namespace p2plab {

struct IrVariable {
  std::string name;
  int horizon = 0;
  double lb = -kInf, ub = kInf;
};

struct IrTerm {
  double coef = 0.0;
  std::string var;
  int lag = 0;  // 0 or 1
};

struct IrConstraint {
  std::string name;
  std::vector<IrTerm> terms;
  std::string kind;  // "eq" | "le" | "ge"
  double rhs = 0.0;
  std::string rhs_ref;        // optional data series added to rhs
  double rhs_ref_coef = 1.0;  // scales the series contribution
};

struct IrObjTerm {
  std::string kind;  // "quad" | "lin" | "abs"
  std::string var;
  double coef = 1.0;
  std::string coef_ref;  // optional data series multiplying coef per step
};

struct ModelIR {
  std::string schema = "convex-dispatch-v1";
  int horizon = 0;
  double dt_hours = 0.25;
  std::vector<IrVariable> vars;
  std::vector<IrConstraint> constraints;
  std::vector<IrObjTerm> objective;
  bool trading = false;

  bool has_var(const std::string& name) const {
    for (const IrVariable& v : vars)
      if (v.name == name) return true;
    return false;
  }
  IrVariable& var(const std::string& name) {
    for (IrVariable& v : vars)
      if (v.name == name) return v;
    throw DataError("IR variable not found: " + name);
  }

  // total scalar decision slots
  int scalar_count() const {
    int n = 0;
    for (const IrVariable& v : vars) n += v.horizon;
    return n;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["schema"] = schema;
    j["horizon"] = horizon;
    j["dt_hours"] = dt_hours;
    j["trading"] = trading;
    j["vars"] = nlohmann::json::array();
    for (const IrVariable& v : vars) {
      nlohmann::json jv{{"name", v.name}, {"horizon", v.horizon}};
      if (std::isfinite(v.lb)) jv["lb"] = v.lb;
      if (std::isfinite(v.ub)) jv["ub"] = v.ub;
      j["vars"].push_back(jv);
    }
    j["constraints"] = nlohmann::json::array();
    for (const IrConstraint& c : constraints) {
      nlohmann::json jc{{"name", c.name}, {"kind", c.kind}, {"rhs", c.rhs}};
      jc["terms"] = nlohmann::json::array();
      for (const IrTerm& t : c.terms) {
        nlohmann::json jt{{"coef", t.coef}, {"var", t.var}};
        if (t.lag) jt["lag"] = t.lag;
        jc["terms"].push_back(jt);
      }
      if (!c.rhs_ref.empty()) {
        jc["rhs_ref"] = c.rhs_ref;
        jc["rhs_ref_coef"] = c.rhs_ref_coef;
      }
      j["constraints"].push_back(jc);
    }
    j["objective"] = nlohmann::json::array();
    for (const IrObjTerm& o : objective) {
      nlohmann::json jo{{"kind", o.kind}, {"var", o.var}, {"coef", o.coef}};
      if (!o.coef_ref.empty()) jo["coef_ref"] = o.coef_ref;
      j["objective"].push_back(jo);
    }
    return j;
  }

  static ModelIR from_json(const nlohmann::json& j) {
    ModelIR ir;
    ir.schema = j.value("schema", std::string("convex-dispatch-v1"));
    ir.horizon = j.at("horizon").get<int>();
    ir.dt_hours = j.value("dt_hours", 0.25);
    ir.trading = j.value("trading", false);
    for (const auto& jv : j.at("vars")) {
      IrVariable v;
      v.name = jv.at("name").get<std::string>();
      v.horizon = jv.at("horizon").get<int>();
      v.lb = jv.value("lb", -kInf);
      v.ub = jv.value("ub", kInf);
      ir.vars.push_back(v);
    }
    for (const auto& jc : j.value("constraints", nlohmann::json::array())) {
      IrConstraint c;
      c.name = jc.at("name").get<std::string>();
      c.kind = jc.at("kind").get<std::string>();
      c.rhs = jc.value("rhs", 0.0);
      c.rhs_ref = jc.value("rhs_ref", std::string());
      c.rhs_ref_coef = jc.value("rhs_ref_coef", 1.0);
      for (const auto& jt : jc.at("terms"))
        c.terms.push_back({jt.at("coef").get<double>(),
                           jt.at("var").get<std::string>(),
                           jt.value("lag", 0)});
      ir.constraints.push_back(c);
    }
    for (const auto& jo : j.value("objective", nlohmann::json::array())) {
      IrObjTerm o;
      o.kind = jo.at("kind").get<std::string>();
      o.var = jo.at("var").get<std::string>();
      o.coef = jo.at("coef").get<double>();
      o.coef_ref = jo.value("coef_ref", std::string());
      ir.objective.push_back(o);
    }
    return ir;
  }

  std::string canonical() const { return to_json().dump(2); }
};

// Data bound to an IR for one solve: series windows of at least `horizon`
// steps plus scalar initial values for lagged references ("init:<var>").
struct IrData {
  std::unordered_map<std::string, std::vector<double>> series;
  std::unordered_map<std::string, double> scalars;
};

// --- template-based model generation ------------------------------------

// Number of half-planes approximating the inverter apparent-power circle.
// The polygon is inscribed (vertices on the circle) so every plan it admits
// is feasible for the exact circle; 32 sides keep the worst-case radial
// shortfall at 1 - cos(pi/32) = 0.48% < 0.5%.
inline constexpr int kCirclePolygonSides = 32;

// Expands the device templates of one prosumer into a dispatch IR over
// `horizon` steps (no trading yet; see integrate_trading).
inline ModelIR generate_model(const ProsumerSpec& spec, int horizon,
                              double dt_hours = 0.25) {
  if (horizon <= 0) throw DataError("model horizon must be positive");
  ModelIR ir;
  ir.horizon = horizon;
  ir.dt_hours = dt_hours;

  if (spec.cdg) {
    const CdgParams& c = *spec.cdg;
    ir.vars.push_back({"p_cdg", horizon, c.p_min, c.p_max});
    ir.constraints.push_back({"cdg_ramp_up",
                              {{1.0, "p_cdg", 0}, {-1.0, "p_cdg", 1}},
                              "le",
                              c.ramp,
                              "",
                              1.0});
    ir.constraints.push_back({"cdg_ramp_dn",
                              {{-1.0, "p_cdg", 0}, {1.0, "p_cdg", 1}},
                              "le",
                              c.ramp,
                              "",
                              1.0});
    if (c.cost_quad != 0.0)
      ir.objective.push_back({"quad", "p_cdg", c.cost_quad, ""});
    if (c.cost_lin != 0.0)
      ir.objective.push_back({"lin", "p_cdg", c.cost_lin, ""});
  }

  if (spec.rdg) {
    const RdgParams& r = *spec.rdg;
    ir.vars.push_back({"p_rdg", horizon, 0.0, r.s_max});
    ir.vars.push_back({"q_rdg", horizon, -r.s_max, r.s_max});
    ir.constraints.push_back({"rdg_avail",
                              {{1.0, "p_rdg", 0}},
                              "le",
                              0.0,
                              "rdg_avail",
                              1.0});
    double offset = r.s_max * std::cos(M_PI / kCirclePolygonSides);
    for (int k = 0; k < kCirclePolygonSides; ++k) {
      double phi = (2 * k + 1) * M_PI / kCirclePolygonSides;
      ir.constraints.push_back({"rdg_circle_" + std::to_string(k),
                                {{std::cos(phi), "p_rdg", 0},
                                 {std::sin(phi), "q_rdg", 0}},
                                "le",
                                offset,
                                "",
                                1.0});
    }
  }

  if (spec.bess) {
    const BessParams& b = *spec.bess;
    double dtn = dt_hours / b.e_cap;
    ir.vars.push_back({"p_ch", horizon, 0.0, std::max(0.0, b.p_max)});
    ir.vars.push_back({"p_dis", horizon, 0.0, std::max(0.0, -b.p_min)});
    ir.vars.push_back({"soc", horizon, b.soc_min, b.soc_max});
    // soc[t] - soc[t-1] - eta_ch*dtn*p_ch[t] + dtn/eta_dis*p_dis[t] = 0
    ir.constraints.push_back({"soc_balance",
                              {{1.0, "soc", 0},
                               {-1.0, "soc", 1},
                               {-b.eta_ch * dtn, "p_ch", 0},
                               {dtn / b.eta_dis, "p_dis", 0}},
                              "eq",
                              0.0,
                              "",
                              1.0});
    if (b.cost_coeff != 0.0) {
      ir.objective.push_back({"lin", "p_ch", b.cost_coeff, ""});
      ir.objective.push_back({"lin", "p_dis", b.cost_coeff, ""});
    }
  }

  if (spec.cl) {
    const ClParams& c = *spec.cl;
    ir.vars.push_back({"p_cl", horizon, 0.0, kInf});
    ir.constraints.push_back({"cl_fraction",
                              {{1.0, "p_cl", 0}},
                              "le",
                              0.0,
                              "load_p",
                              c.alpha});
    if (c.comp != 0.0) ir.objective.push_back({"lin", "p_cl", c.comp, ""});
  }

  return ir;
}

// Splices market interaction into a device IR: P2P and grid positions, the
// energy balance, and the buy/sell split of the grid position with its TOU
// cost.  Adds exactly 2*T balance-related scalar variables (p_p2p, p_grid)
// plus the 2*T split variables.  Refuses to run twice on the same IR.
inline void integrate_trading(ModelIR& ir, const ProsumerSpec& spec) {
  if (ir.trading)
    throw DataError("integrate_trading applied twice to the same model");
  const int T = ir.horizon;
  ir.vars.push_back({"p_p2p", T, -kInf, kInf});
  ir.vars.push_back({"p_grid", T, -kInf, kInf});
  ir.vars.push_back({"p_buy", T, 0.0, kInf});
  ir.vars.push_back({"p_sell", T, 0.0, kInf});

  // generation - bess + imports = load
  IrConstraint bal{"energy_balance", {}, "eq", 0.0, "load_p", 1.0};
  if (spec.cdg) bal.terms.push_back({1.0, "p_cdg", 0});
  if (spec.rdg) bal.terms.push_back({1.0, "p_rdg", 0});
  if (spec.cl) bal.terms.push_back({1.0, "p_cl", 0});
  if (spec.bess) {
    bal.terms.push_back({-1.0, "p_ch", 0});
    bal.terms.push_back({1.0, "p_dis", 0});
  }
  bal.terms.push_back({1.0, "p_grid", 0});
  bal.terms.push_back({1.0, "p_p2p", 0});
  ir.constraints.push_back(bal);

  ir.constraints.push_back({"grid_split",
                            {{1.0, "p_grid", 0},
                             {-1.0, "p_buy", 0},
                             {1.0, "p_sell", 0}},
                            "eq",
                            0.0,
                            "",
                            1.0});

  ir.objective.push_back({"lin", "p_buy", 1.0, "price_buy"});
  ir.objective.push_back({"lin", "p_sell", -1.0, "price_sell"});
  ir.objective.push_back({"lin", "p_p2p", 1.0, "price_p2p"});
  ir.objective.push_back({"abs", "p_p2p", 1.0, "dso_fee"});
  ir.trading = true;
}

}  // namespace p2plab
