#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "p2plab/prosumer.hpp"

using namespace p2plab;

namespace {

ProsumerSpec hub_spec() {
  ProsumerSpec s;
  s.bus_id = 7;
  s.tag = "EnergyHub";
  s.cdg = CdgParams{0.05, 0.4, 0.1, 2.0, 0.5};
  s.rdg = RdgParams{RdgParams::Kind::WT, 0.5};
  s.bess = BessParams{-0.2, 0.2, 0.1, 0.9, 0.95, 0.95, 4.0, 0.05};
  s.cl = ClParams{0.3, 0.6};
  return s;
}

}  // namespace

TEST_CASE("soc recursion charge and discharge") {
  CHECK(step_soc(0.5, 0.1, 0.9, 1.0) == Catch::Approx(0.59));
  CHECK(step_soc(0.5, -0.09, 0.9, 1.0) == Catch::Approx(0.40));
  // dt normalization: 0.25h step on a 4 p.u.-h battery -> dt_norm 1/16
  BessParams b{-0.2, 0.2, 0.1, 0.9, 0.9, 0.9, 4.0, 0.0};
  CHECK(step_soc(0.5, 0.16, b, 0.25) == Catch::Approx(0.5 + 0.9 * 0.16 / 16.0));
}

TEST_CASE("rdg projection scales radially onto the circle") {
  ProsumerSpec s = hub_spec();
  s.rdg->s_max = 0.5;
  Action raw;
  raw.p_rdg = 0.8;
  raw.q_rdg = 0.6;
  Action p = project_action(raw, s, {}, /*rdg_avail=*/1.0, 0.2);
  CHECK(p.p_rdg == Catch::Approx(0.4));
  CHECK(p.q_rdg == Catch::Approx(0.3));
  // availability caps active power before the circle test
  p = project_action(raw, s, {}, /*rdg_avail=*/0.1, 0.2);
  CHECK(p.p_rdg <= 0.1 + 1e-12);
}

TEST_CASE("cdg ramp window intersects capacity bounds") {
  ProsumerSpec s = hub_spec();
  DeviceState st;
  st.p_cdg_prev = 0.2;
  Action raw;
  raw.p_cdg = 0.4;
  Action p = project_action(raw, s, st, 0.0, 0.2);
  CHECK(p.p_cdg == Catch::Approx(0.3));  // prev + ramp
  raw.p_cdg = -1.0;
  p = project_action(raw, s, st, 0.0, 0.2);
  CHECK(p.p_cdg == Catch::Approx(0.1));  // prev - ramp, above p_min
}

TEST_CASE("bess projection respects soc headroom") {
  ProsumerSpec s = hub_spec();
  DeviceState st;
  st.soc = 0.899;  // almost full: a 15-min step must not overshoot soc_max
  Action raw;
  raw.p_bess = 0.2;
  Action p = project_action(raw, s, st, 0.0, 0.2, /*dt_hours=*/0.25);
  double soc_next = step_soc(st.soc, p.p_bess, *s.bess, 0.25);
  CHECK(soc_next <= s.bess->soc_max + 1e-12);
  CHECK(p.p_bess < 0.2);

  st.soc = 0.101;
  raw.p_bess = -0.2;
  p = project_action(raw, s, st, 0.0, 0.2, 0.25);
  soc_next = step_soc(st.soc, p.p_bess, *s.bess, 0.25);
  CHECK(soc_next >= s.bess->soc_min - 1e-12);
  CHECK(p.p_bess > -0.2);
}

TEST_CASE("cl projection bounded by curtailable fraction of current load") {
  ProsumerSpec s = hub_spec();
  Action raw;
  raw.p_cl = 1.0;
  Action p = project_action(raw, s, {}, 0.0, /*load_p=*/0.2);
  CHECK(p.p_cl == Catch::Approx(0.3 * 0.2));
  raw.p_cl = -0.5;
  p = project_action(raw, s, {}, 0.0, 0.2);
  CHECK(p.p_cl == 0.0);
}

TEST_CASE("projection is idempotent and absent devices stay at zero") {
  ProsumerSpec hub = hub_spec();
  ProsumerSpec res;
  res.bus_id = 9;
  res.tag = "Residential";
  res.rdg = RdgParams{RdgParams::Kind::PV, 0.3};
  res.bess = BessParams{-0.15, 0.15, 0.1, 0.9, 0.95, 0.95, 2.0, 0.02};
  res.cl = ClParams{0.2, 0.5};
  res.validate();

  Rng rng(77);
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    Action raw{d(rng), d(rng), d(rng), d(rng), d(rng)};
    DeviceState st{0.3 * d(rng) + 0.2, 0.5 + 0.35 * d(rng)};
    double avail = 0.5 * (d(rng) + 1.0), load = 0.3 * (d(rng) + 1.0);
    for (const ProsumerSpec& s : {hub, res}) {
      Action p1 = project_action(raw, s, st, avail, load);
      Action p2 = project_action(p1, s, st, avail, load);
      auto a1 = p1.as_array(), a2 = p2.as_array();
      for (int k = 0; k < 5; ++k)
        CHECK(a1[k] == Catch::Approx(a2[k]).margin(1e-12));
      if (!s.cdg) CHECK(p1.p_cdg == 0.0);
    }
  }
}

TEST_CASE("grid exchange identity") {
  Action a{0.3, 0.2, 0.1, 0.15, 0.05};
  auto [pex, qex] = grid_exchange(a, 0.4, 0.12);
  CHECK(pex == Catch::Approx(0.3 + 0.2 + 0.05 - 0.4 - 0.15));
  CHECK(qex == Catch::Approx(0.1 - 0.12));
}

TEST_CASE("operational cost terms") {
  ProsumerSpec s = hub_spec();
  s.cdg->cost_quad = 2.0;
  s.cdg->cost_lin = 1.0;
  Action a;
  a.p_cdg = 3.0;
  PricesAtT pr{0.8, 0.3, 0.5, 0.02};

  CostBreakdown buy = operational_cost(a, 1.5, 0.0, pr, s);
  CHECK(buy.cdg == Catch::Approx(21.0));  // 2*9 + 1*3
  CHECK(buy.grid == Catch::Approx(0.8 * 1.5));

  CostBreakdown sell = operational_cost(a, -2.0, 0.0, pr, s);
  CHECK(sell.grid == Catch::Approx(0.3 * -2.0));  // signed revenue

  a.p_bess = -0.1;
  a.p_cl = 0.2;
  CostBreakdown c = operational_cost(a, 0.0, -0.4, pr, s);
  CHECK(c.bess == Catch::Approx(0.05 * 0.1));
  CHECK(c.cl == Catch::Approx(0.6 * 0.2));
  // P2P seller: pays the volume fee, earns the clearing price
  CHECK(c.p2p == Catch::Approx(0.02 * 0.4 + 0.5 * -0.4));
}

TEST_CASE("archetype validation catches wrong device patterns") {
  ProsumerSpec s = hub_spec();
  CHECK_NOTHROW(s.validate());
  s.tag = "Rural";
  CHECK_THROWS_AS(s.validate(), DataError);  // Rural must not carry CDG
  s.cdg.reset();
  CHECK_NOTHROW(s.validate());
  s.rdg->kind = RdgParams::Kind::PV;
  CHECK_THROWS_AS(s.validate(), DataError);  // Rural renewable is WT
  s.tag = "Unknown";
  CHECK_THROWS_AS(s.validate(), DataError);
}
