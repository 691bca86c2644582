#pragma once
// Scenario directory layout:
//   <dir>/network.json    grid topology, admittances, DSO fee, step length
//   <dir>/prosumers.json  device roster
//   <dir>/prices.csv      t,buy,sell,p2p  (one day, shared across days)
//   <dir>/profiles/bus<id>/{load_p,load_q,rdg}.csv   t,value over all days
//
// Doubles go through the shortest-round-trip printer on both the JSON and
// CSV paths, so save -> load -> save is byte-stable.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "p2plab/common.hpp"
#include "p2plab/market.hpp"

namespace p2plab {

namespace fs = std::filesystem;
using nlohmann::json;

// --- CSV ----------------------------------------------------------------

inline void write_csv_series(const fs::path& path, const char* value_header,
                             const std::vector<double>& v) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path.string());
  f << "t," << value_header << "\n";
  char buf[40];
  for (std::size_t t = 0; t < v.size(); ++t) {
    std::snprintf(buf, sizeof buf, "%.17g", v[t]);
    f << t << "," << buf << "\n";
  }
}

inline std::vector<double> read_csv_series(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot read " + path.string());
  std::string line;
  if (!std::getline(f, line)) throw DataError("empty csv: " + path.string());
  std::vector<double> out;
  std::size_t expect = 0;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string tcol, vcol;
    if (!std::getline(ss, tcol, ',') || !std::getline(ss, vcol, ','))
      throw DataError("malformed csv row in " + path.string() + ": " + line);
    if (static_cast<std::size_t>(std::stoul(tcol)) != expect)
      throw DataError("non-contiguous t column in " + path.string());
    out.push_back(std::stod(vcol));
    ++expect;
  }
  return out;
}

// --- JSON pieces --------------------------------------------------------

inline json network_to_json(const Network& net, double dso_fee,
                            double dt_hours) {
  json j;
  j["version"] = kVersion;
  j["s_base_mva"] = net.s_base_mva;
  j["v_level_kv"] = net.v_level_kv;
  j["dso_fee"] = dso_fee;
  j["dt_hours"] = dt_hours;
  j["buses"] = json::array();
  for (const Bus& b : net.buses)
    j["buses"].push_back({{"id", b.id},
                          {"v_min", b.v_min},
                          {"v_max", b.v_max},
                          {"v_base", b.v_base},
                          {"slack", b.is_slack}});
  j["branches"] = json::array();
  for (const Branch& br : net.branches)
    j["branches"].push_back(
        {{"from", br.from}, {"to", br.to}, {"g", br.g}, {"b", br.b}});
  return j;
}

inline void network_from_json(const json& j, Network& net, double& dso_fee,
                              double& dt_hours) {
  net = Network{};
  net.s_base_mva = j.value("s_base_mva", 1.0);
  net.v_level_kv = j.value("v_level_kv", 12.47);
  dso_fee = j.value("dso_fee", 0.0);
  dt_hours = j.value("dt_hours", 0.25);
  for (const json& b : j.at("buses"))
    net.buses.push_back({b.at("id").get<int>(), b.at("v_min").get<double>(),
                         b.at("v_max").get<double>(),
                         b.at("v_base").get<double>(),
                         b.at("slack").get<bool>()});
  for (const json& br : j.at("branches"))
    net.branches.push_back({br.at("from").get<int>(), br.at("to").get<int>(),
                            br.at("g").get<double>(),
                            br.at("b").get<double>()});
}

inline json prosumer_to_json(const ProsumerSpec& s) {
  json j;
  j["bus_id"] = s.bus_id;
  j["tag"] = s.tag;
  if (s.cdg)
    j["cdg"] = {{"p_min", s.cdg->p_min},     {"p_max", s.cdg->p_max},
                {"ramp", s.cdg->ramp},       {"cost_quad", s.cdg->cost_quad},
                {"cost_lin", s.cdg->cost_lin}};
  if (s.rdg)
    j["rdg"] = {{"kind", s.rdg->kind == RdgParams::Kind::PV ? "PV" : "WT"},
                {"s_max", s.rdg->s_max}};
  if (s.bess)
    j["bess"] = {{"p_min", s.bess->p_min},       {"p_max", s.bess->p_max},
                 {"soc_min", s.bess->soc_min},   {"soc_max", s.bess->soc_max},
                 {"eta_ch", s.bess->eta_ch},     {"eta_dis", s.bess->eta_dis},
                 {"e_cap", s.bess->e_cap},       {"cost_coeff",
                                                 s.bess->cost_coeff}};
  if (s.cl) j["cl"] = {{"alpha", s.cl->alpha}, {"comp", s.cl->comp}};
  return j;
}

inline ProsumerSpec prosumer_from_json(const json& j) {
  ProsumerSpec s;
  s.bus_id = j.at("bus_id").get<int>();
  s.tag = j.at("tag").get<std::string>();
  if (j.contains("cdg")) {
    const json& c = j["cdg"];
    s.cdg = CdgParams{c.at("p_min"), c.at("p_max"), c.at("ramp"),
                      c.at("cost_quad"), c.at("cost_lin")};
  }
  if (j.contains("rdg")) {
    const json& r = j["rdg"];
    std::string kind = r.at("kind");
    if (kind != "PV" && kind != "WT") throw DataError("bad rdg kind " + kind);
    s.rdg = RdgParams{kind == "PV" ? RdgParams::Kind::PV : RdgParams::Kind::WT,
                      r.at("s_max")};
  }
  if (j.contains("bess")) {
    const json& b = j["bess"];
    s.bess = BessParams{b.at("p_min"),   b.at("p_max"),  b.at("soc_min"),
                        b.at("soc_max"), b.at("eta_ch"), b.at("eta_dis"),
                        b.at("e_cap"),   b.at("cost_coeff")};
  }
  if (j.contains("cl")) {
    const json& c = j["cl"];
    s.cl = ClParams{c.at("alpha"), c.at("comp")};
  }
  return s;
}

// --- scenario directory -------------------------------------------------

inline std::string agent_dir_name(const ProsumerSpec& s) {
  return "bus" + std::to_string(s.bus_id);
}

inline void save_scenario(const Scenario& sc, const fs::path& dir,
                          bool force = false) {
  if (fs::exists(dir) && !fs::is_empty(dir) && !force)
    throw DataError("output directory " + dir.string() +
                    " is not empty (use --force to overwrite)");
  fs::create_directories(dir);

  auto dump = [](const fs::path& p, const json& j) {
    std::ofstream f(p);
    if (!f) throw DataError("cannot write " + p.string());
    f << j.dump(2) << "\n";
  };
  dump(dir / "network.json",
       network_to_json(sc.net, sc.prices.dso_fee, sc.dt_hours));

  json roster;
  roster["version"] = kVersion;
  roster["prosumers"] = json::array();
  for (const ProsumerSpec& s : sc.prosumers)
    roster["prosumers"].push_back(prosumer_to_json(s));
  dump(dir / "prosumers.json", roster);

  {
    std::ofstream f(dir / "prices.csv");
    if (!f) throw DataError("cannot write prices.csv");
    f << "t,buy,sell,p2p\n";
    char b1[40], b2[40], b3[40];
    for (int t = 0; t < sc.data.steps_per_day; ++t) {
      std::snprintf(b1, sizeof b1, "%.17g", sc.prices.buy[t]);
      std::snprintf(b2, sizeof b2, "%.17g", sc.prices.sell[t]);
      std::snprintf(b3, sizeof b3, "%.17g", sc.prices.p2p[t]);
      f << t << "," << b1 << "," << b2 << "," << b3 << "\n";
    }
  }

  for (std::size_t i = 0; i < sc.prosumers.size(); ++i) {
    fs::path pdir = dir / "profiles" / agent_dir_name(sc.prosumers[i]);
    fs::create_directories(pdir);
    write_csv_series(pdir / "load_p.csv", "value", sc.data.agents[i].load_p);
    write_csv_series(pdir / "load_q.csv", "value", sc.data.agents[i].load_q);
    write_csv_series(pdir / "rdg.csv", "value", sc.data.agents[i].rdg);
  }
}

inline Scenario load_scenario(const fs::path& dir) {
  auto slurp = [](const fs::path& p) {
    std::ifstream f(p);
    if (!f) throw DataError("missing scenario file: " + p.string());
    json j;
    try {
      f >> j;
    } catch (const json::exception& e) {
      throw DataError("bad json in " + p.string() + ": " + e.what());
    }
    return j;
  };

  Scenario sc;
  double dso_fee = 0.0;
  network_from_json(slurp(dir / "network.json"), sc.net, dso_fee, sc.dt_hours);

  json roster = slurp(dir / "prosumers.json");
  for (const json& pj : roster.at("prosumers"))
    sc.prosumers.push_back(prosumer_from_json(pj));

  {
    std::ifstream f(dir / "prices.csv");
    if (!f) throw DataError("missing prices.csv");
    std::string line;
    std::getline(f, line);
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      std::istringstream ss(line);
      std::string c0, c1, c2, c3;
      std::getline(ss, c0, ',');
      std::getline(ss, c1, ',');
      std::getline(ss, c2, ',');
      std::getline(ss, c3, ',');
      sc.prices.buy.push_back(std::stod(c1));
      sc.prices.sell.push_back(std::stod(c2));
      sc.prices.p2p.push_back(std::stod(c3));
    }
    sc.prices.dso_fee = dso_fee;
  }
  sc.data.steps_per_day = static_cast<int>(sc.prices.buy.size());

  for (const ProsumerSpec& s : sc.prosumers) {
    fs::path pdir = dir / "profiles" / agent_dir_name(s);
    AgentSeries ser;
    ser.load_p = read_csv_series(pdir / "load_p.csv");
    ser.load_q = read_csv_series(pdir / "load_q.csv");
    ser.rdg = read_csv_series(pdir / "rdg.csv");
    sc.data.agents.push_back(std::move(ser));
  }
  if (!sc.data.agents.empty()) {
    std::size_t rows = sc.data.agents[0].load_p.size();
    if (sc.data.steps_per_day == 0 || rows % sc.data.steps_per_day != 0)
      throw DataError("profile rows are not a whole number of days");
    sc.data.n_days = static_cast<int>(rows) / sc.data.steps_per_day;
  }
  sc.build();
  return sc;
}

}  // namespace p2plab
