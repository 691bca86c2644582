#pragma once
// Prosumer device models: controllable DG, renewable DG, battery storage and
// curtailable load, plus the per-step projection that turns an arbitrary raw
// action into a feasible one.  All powers in p.u.; positive BESS power is
// charging; the action uses device output conventions (CL power is the
// curtailed amount, >= 0).

#include <array>
#include <cmath>
#include <optional>
#include <string>

#include "p2plab/common.hpp"

namespace p2plab {

struct CdgParams {
  double p_min = 0.0, p_max = 0.0;
  double ramp = 0.0;           // max |p_t - p_{t-1}| per step
  double cost_quad = 0.0;      // c in c*p^2 + b*p
  double cost_lin = 0.0;       // b
};

struct RdgParams {
  enum class Kind { PV, WT };
  Kind kind = Kind::PV;
  double s_max = 0.0;          // inverter apparent-power rating
};

struct BessParams {
  double p_min = 0.0;          // < 0, max discharge
  double p_max = 0.0;          // > 0, max charge
  double soc_min = 0.1, soc_max = 0.9;
  double eta_ch = 0.95, eta_dis = 0.95;
  double e_cap = 4.0;          // energy capacity in p.u.-hours
  double cost_coeff = 0.0;     // degradation cost per |p|
};

struct ClParams {
  double alpha = 0.0;          // curtailable fraction of current load
  double comp = 0.0;           // compensation price per curtailed unit
};

// One prosumer: bus placement, scenario archetype tag, and whichever devices
// the archetype carries.
struct ProsumerSpec {
  int bus_id = 0;
  std::string tag;             // Commercial | Rural | Industrial |
                               // Residential | EnergyHub
  std::optional<CdgParams> cdg;
  std::optional<RdgParams> rdg;
  std::optional<BessParams> bess;
  std::optional<ClParams> cl;

  // Device-class pattern per archetype.  Rural and Residential share the
  // same pattern and are told apart by the renewable kind.
  void validate() const {
    auto require = [&](bool cond, const char* what) {
      if (!cond)
        throw DataError("prosumer at bus " + std::to_string(bus_id) +
                        " (tag " + tag + "): " + what);
    };
    auto kind_is = [&](RdgParams::Kind k) {
      return rdg.has_value() && rdg->kind == k;
    };
    if (tag == "Commercial") {
      require(cdg && rdg && bess && cl, "needs CDG+RDG+BESS+CL");
      require(kind_is(RdgParams::Kind::PV), "renewable must be PV");
    } else if (tag == "Rural") {
      require(!cdg && rdg && bess && cl, "needs RDG+BESS+CL, no CDG");
      require(kind_is(RdgParams::Kind::WT), "renewable must be WT");
    } else if (tag == "Industrial") {
      require(cdg && rdg && !bess && cl, "needs CDG+RDG+CL, no BESS");
      require(kind_is(RdgParams::Kind::WT), "renewable must be WT");
    } else if (tag == "Residential") {
      require(!cdg && rdg && bess && cl, "needs RDG+BESS+CL, no CDG");
      require(kind_is(RdgParams::Kind::PV), "renewable must be PV");
    } else if (tag == "EnergyHub") {
      require(cdg && rdg && bess && cl, "needs all four device classes");
    } else {
      throw DataError("unknown archetype tag: " + tag);
    }
    if (cdg) {
      if (!(cdg->p_min <= cdg->p_max) || cdg->ramp < 0)
        throw DataError("bad CDG parameters");
    }
    if (rdg && rdg->s_max < 0) throw DataError("bad RDG parameters");
    if (bess) {
      if (!(bess->p_min <= 0 && bess->p_max >= 0) ||
          !(bess->soc_min < bess->soc_max) || bess->e_cap <= 0 ||
          bess->eta_ch <= 0 || bess->eta_ch > 1 || bess->eta_dis <= 0 ||
          bess->eta_dis > 1)
        throw DataError("bad BESS parameters");
    }
    if (cl && (cl->alpha < 0 || cl->alpha > 1))
      throw DataError("bad CL parameters");
  }
};

// Slow per-step state carried between environment steps.
struct DeviceState {
  double p_cdg_prev = 0.0;
  double soc = 0.5;
};

// Joint device action of one prosumer.
struct Action {
  double p_cdg = 0.0;
  double p_rdg = 0.0;
  double q_rdg = 0.0;
  double p_bess = 0.0;
  double p_cl = 0.0;

  std::array<double, 5> as_array() const {
    return {p_cdg, p_rdg, q_rdg, p_bess, p_cl};
  }
  static Action from_array(const std::array<double, 5>& a) {
    return {a[0], a[1], a[2], a[3], a[4]};
  }
};

// SOC recursion for one step.  p >= 0 charges at efficiency eta, p < 0
// discharges at 1/eta; dt_norm = (step hours) / (energy capacity in p.u.-h),
// so soc stays a dimensionless fraction.
inline double step_soc(double soc, double p_bess, double eta, double dt_norm) {
  if (p_bess >= 0) return soc + eta * p_bess * dt_norm;
  return soc + p_bess * dt_norm / eta;
}

inline double step_soc(double soc, double p_bess, const BessParams& b,
                       double dt_hours) {
  double dtn = dt_hours / b.e_cap;
  return step_soc(soc, p_bess, p_bess >= 0 ? b.eta_ch : b.eta_dis, dtn);
}

namespace detail {
inline double clip(double v, double lo, double hi) {
  return v < lo ? lo : (v > hi ? hi : v);
}
}  // namespace detail

// Componentwise projection of a raw action onto the feasible set:
//  * CDG: capacity bounds intersected with the ramp window around prev,
//  * RDG: active power into [0, min(avail, s_max)], then the (p,q) pair is
//    scaled radially onto the apparent-power circle if outside,
//  * BESS: power bounds, then clipped so the SOC recursion stays in band,
//  * CL: [0, alpha * current load].
// Absent devices are forced to zero.  The projection is idempotent.
inline Action project_action(const Action& raw, const ProsumerSpec& spec,
                             const DeviceState& st, double rdg_avail,
                             double load_p, double dt_hours = 0.25) {
  using detail::clip;
  Action a;  // zeros
  if (spec.cdg) {
    const CdgParams& c = *spec.cdg;
    double lo = std::max(c.p_min, st.p_cdg_prev - c.ramp);
    double hi = std::min(c.p_max, st.p_cdg_prev + c.ramp);
    // ramp window can leave the capacity box empty only through bad state;
    // collapse to the nearest capacity bound then
    if (lo > hi) lo = hi = clip(st.p_cdg_prev, c.p_min, c.p_max);
    a.p_cdg = clip(raw.p_cdg, lo, hi);
  }
  if (spec.rdg) {
    const RdgParams& r = *spec.rdg;
    // available energy caps the active side first, then the pair is scaled
    // radially onto the apparent-power circle (angle preserved)
    a.p_rdg = clip(raw.p_rdg, 0.0, std::max(rdg_avail, 0.0));
    a.q_rdg = raw.q_rdg;
    double s = std::hypot(a.p_rdg, a.q_rdg);
    if (s > r.s_max && s > 0) {
      double k = r.s_max / s;
      a.p_rdg *= k;
      a.q_rdg *= k;
    }
  }
  if (spec.bess) {
    const BessParams& b = *spec.bess;
    double p = clip(raw.p_bess, b.p_min, b.p_max);
    double dtn = dt_hours / b.e_cap;
    // headroom limits from the SOC recursion
    double max_ch = (b.soc_max - st.soc) / (b.eta_ch * dtn);
    double max_dis = (st.soc - b.soc_min) * b.eta_dis / dtn;
    a.p_bess = clip(p, -std::max(max_dis, 0.0), std::max(max_ch, 0.0));
  }
  if (spec.cl) {
    a.p_cl = clip(raw.p_cl, 0.0, spec.cl->alpha * std::max(load_p, 0.0));
  }
  return a;
}

// Net exchange with the outside (positive = export):
//   p_ex = p_cdg + p_rdg + p_cl - load_p - p_bess
//   q_ex = q_rdg - load_q
inline std::pair<double, double> grid_exchange(const Action& a, double load_p,
                                               double load_q) {
  return {a.p_cdg + a.p_rdg + a.p_cl - load_p - a.p_bess, a.q_rdg - load_q};
}

struct PricesAtT {
  double buy = 0.0;    // grid TOU purchase price
  double sell = 0.0;   // grid feed-in price
  double p2p = 0.0;    // P2P clearing price
  double dso_fee = 0.0;
};

struct CostBreakdown {
  double grid = 0.0, cdg = 0.0, bess = 0.0, cl = 0.0, p2p = 0.0;
  double total() const { return grid + cdg + bess + cl + p2p; }
};

// Per-step operational cost.  p_grid > 0 means buying from the utility,
// p_p2p > 0 means buying from peers.  P2P trades pay the DSO utilization fee
// on volume plus the clearing price on the signed quantity.
inline CostBreakdown operational_cost(const Action& a, double p_grid,
                                      double p_p2p, const PricesAtT& pr,
                                      const ProsumerSpec& spec) {
  CostBreakdown c;
  c.grid = p_grid >= 0 ? pr.buy * p_grid : pr.sell * p_grid;
  if (spec.cdg)
    c.cdg = spec.cdg->cost_quad * a.p_cdg * a.p_cdg +
            spec.cdg->cost_lin * a.p_cdg;
  if (spec.bess) c.bess = spec.bess->cost_coeff * std::abs(a.p_bess);
  if (spec.cl) c.cl = spec.cl->comp * std::abs(a.p_cl);
  c.p2p = pr.dso_fee * std::abs(p_p2p) + pr.p2p * p_p2p;
  return c;
}

}  // namespace p2plab
