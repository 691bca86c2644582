#pragma once
// Command-line surface: gen-fixture / expert {solve,verify,metrics} / train /
// eval / metrics.  Thin argument plumbing over the library; every artifact
// embeds {seed, config hash, version} and exit codes separate configuration
// (2), data (3) and numerical (4) failures from everything else (1).

#include <p2plab/fixtures.hpp>
#include <p2plab/scenario_io.hpp>
#include <p2plab/trainer.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

namespace p2plab::cli {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr int kExitOk = 0;
inline constexpr int kExitError = 1;      // anything uncategorized
inline constexpr int kExitConfig = 2;     // bad flags, bad config file
inline constexpr int kExitData = 3;       // missing/corrupt artifacts
inline constexpr int kExitNumerical = 4;  // solver/training blow-ups

namespace detail {

inline void write_json(const std::string& path, const json& j) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path);
  f << j.dump(1) << "\n";
}

inline const char* status_name(QpStatus s) {
  switch (s) {
    case QpStatus::Optimal: return "optimal";
    case QpStatus::PrimalInfeasible: return "primal_infeasible";
    case QpStatus::DualInfeasible: return "dual_infeasible";
    default: return "max_iter";
  }
}

// Expert schedules for the listed days: reuse a cache file when given,
// otherwise plan from scratch (and persist next to the other artifacts so
// reruns skip the planning cost).
inline train::ExpertCache obtain_cache(const Scenario& sc,
                                       const std::vector<int>& days,
                                       const std::string& cache_file,
                                       const std::string& save_to) {
  if (!cache_file.empty()) {
    train::ExpertCache c = train::load_expert_cache(cache_file);
    for (int d : days)
      if (!c.has(d))
        throw DataError("expert cache " + cache_file + " lacks day " +
                        std::to_string(d));
    return c;
  }
  DeterministicBackend backend;
  logf(1, "planning expert schedules for %zu day(s)", days.size());
  train::ExpertCache c = train::compute_expert_cache(sc, days, backend);
  if (!save_to.empty()) train::save_expert_cache(save_to, c);
  return c;
}

inline json eval_record_json(const train::EvalRecord& r) {
  return json{{"day", r.day},
              {"episode", r.episode},
              {"cost", r.cost},
              {"expert_cost", r.expert_cost},
              {"reward", r.reward},
              {"violation_rate", r.violation_rate},
              {"w2", r.w2},
              {"deviation", r.deviation},
              {"gap", r.gap},
              {"accuracy", r.accuracy},
              {"ended_early", r.ended_early}};
}

}  // namespace detail

// --- gen-fixture ----------------------------------------------------------

inline int cmd_gen_fixture(const std::string& kind, const std::string& out,
                           std::uint64_t seed, int days, bool force) {
  FixtureOptions fo;
  fo.n_days = days;
  fo.seed = seed;
  Scenario sc = make_fixture(kind, fo);
  save_scenario(sc, out, force);
  const std::string stamp =
      kind + ":" + std::to_string(seed) + ":" + std::to_string(days);
  detail::write_json(out + "/fixture.json",
                     json{{"kind", kind},
                          {"seed", seed},
                          {"n_days", days},
                          {"version", kVersion},
                          {"config_hash", fnv1a(stamp)}});
  std::printf("wrote %s: %d buses, %d prosumers, %d day(s) x %d steps\n",
              out.c_str(), sc.net.n(), sc.n_agents(), sc.data.n_days,
              sc.data.steps_per_day);
  return kExitOk;
}

// --- expert solve ---------------------------------------------------------

inline int cmd_expert_solve(const std::string& scenario, int agent, int day,
                            int horizon, const std::string& out) {
  Scenario sc = load_scenario(scenario);
  if (agent < 0 || agent >= sc.n_agents())
    throw DataError("agent index out of range (scenario has " +
                    std::to_string(sc.n_agents()) + ")");
  const ProsumerSpec& spec = sc.prosumers[agent];
  DeterministicBackend backend;
  ModelIR ir = backend.generate(spec, horizon, sc.dt_hours);
  integrate_trading(ir, spec);
  DeviceState st{};
  IrData data = p2plab::detail::bind_window(sc, agent, day, 0, horizon, st,
                                            spec.cdg.has_value(),
                                            spec.bess.has_value());
  CorrectionReport rep = validate_and_correct(ir, data, 5);
  IrSolution sol = solve_convex(ir, data);
  json j{{"version", kVersion},
         {"agent", agent},
         {"tag", spec.tag},
         {"day", day},
         {"horizon", horizon},
         {"validated", rep.passed},
         {"correction_iters", rep.iterations},
         {"status", detail::status_name(sol.status)},
         {"objective", sol.objective},
         {"kkt", sol.kkt},
         {"iterations", sol.iters},
         {"model", ir.to_json()},
         {"variables", sol.values}};
  if (!out.empty()) detail::write_json(out, j);
  std::printf("agent %d (%s) day %d: %s, objective %.6f, kkt %.2e\n", agent,
              spec.tag.c_str(), day, detail::status_name(sol.status),
              sol.objective, sol.kkt);
  return sol.status == QpStatus::Optimal ? kExitOk : kExitNumerical;
}

// --- expert verify --------------------------------------------------------

inline int cmd_expert_verify(const std::string& scenario, int day,
                             const std::string& out) {
  Scenario sc = load_scenario(scenario);
  DeterministicBackend backend;
  DsoReport rep;
  std::vector<ExpertSchedule> schedules =
      plan_and_verify(sc, day, backend, {}, &rep);
  json agents = json::array();
  for (const ExpertSchedule& s : schedules) {
    json steps = json::array();
    for (const Action& a : s.actions) steps.push_back(a.as_array());
    agents.push_back(json{{"agent", s.agent},
                          {"objective", s.objective},
                          {"corrections", s.corrections},
                          {"actions", std::move(steps)}});
  }
  json j{{"version", kVersion},
         {"day", day},
         {"agents", std::move(agents)},
         {"dso",
          {{"steps_checked", rep.steps_checked},
           {"pre_violation_steps", rep.pre_violation_steps},
           {"post_violation_steps", rep.post_violation_steps},
           {"worst_pre", rep.worst_pre},
           {"worst_post", rep.worst_post},
           {"adjusted_steps", rep.adjusted_steps},
           {"rounds_used", rep.rounds_used},
           {"clean", rep.clean}}}};
  if (!out.empty()) detail::write_json(out, j);
  std::printf(
      "day %d: %d agents planned, dso %s (%d/%d steps adjusted, worst "
      "%.2e -> %.2e)\n",
      day, sc.n_agents(), rep.clean ? "clean" : "NOT CLEAN",
      rep.adjusted_steps, rep.steps_checked, rep.worst_pre, rep.worst_post);
  return rep.clean ? kExitOk : kExitNumerical;
}

// --- workflow metrics -----------------------------------------------------

inline int cmd_metrics(int trials, std::uint64_t seed,
                       const std::string& out) {
  DeterministicBackend backend;
  WorkflowMetrics m = workflow_metrics(backend, trials, 8, 0.25, seed);
  json j{{"version", kVersion},
         {"seed", seed},
         {"backend", backend.name()},
         {"trials", m.trials},
         {"pass_rate", m.pass_rate},
         {"avg_corrections", m.avg_corrections},
         {"mean_abs_deviation", m.mean_abs_deviation},
         {"accuracy", m.accuracy}};
  if (!out.empty()) detail::write_json(out, j);
  std::printf(
      "%d trials: pass rate %.3f, avg corrections %.3f, accuracy %.3f\n",
      m.trials, m.pass_rate, m.avg_corrections, m.accuracy);
  return kExitOk;
}

// --- train ----------------------------------------------------------------

inline int cmd_train(const std::string& scenario, const std::string& out,
                     const std::string& config, std::uint64_t seed,
                     int episodes, const std::string& expert_file,
                     bool ablation, int threads) {
  if (threads > 1)
    logf(1, "rollouts are sequential; --threads %d capped at 1", threads);
  Scenario sc = load_scenario(scenario);
  HyperParams hp = config.empty() ? HyperParams{} : load_config(config);
  if (episodes > 0) hp.episodes = episodes;
  validate(hp);
  fs::create_directories(out);
  train::ExpertCache cache = detail::obtain_cache(
      sc, train::schedule_days(sc), expert_file, out + "/expert_cache.json");
  train::TrainOptions opt;
  opt.seed = seed;
  opt.expert_constraint = !ablation;
  opt.out_dir = out;
  train::Trainer tr(sc, hp, cache, opt);
  train::TrainResult res = tr.run();
  json j{{"version", kVersion},
         {"seed", seed},
         {"config_hash", config_hash(hp)},
         {"episodes", hp.episodes},
         {"updates", res.updates},
         {"expert_constraint", !ablation},
         {"final_lambda", res.final_lambda},
         {"test", detail::eval_record_json(res.test)}};
  detail::write_json(out + "/result.json", j);
  std::printf(
      "trained %d episodes (%d updates); test day %d: cost %.4f vs expert "
      "%.4f, accuracy %.2f, violation rate %.4g\n",
      hp.episodes, res.updates, res.test.day, res.test.cost,
      res.test.expert_cost, res.test.accuracy, res.test.violation_rate);
  return kExitOk;
}

// --- eval -----------------------------------------------------------------

inline int cmd_eval(const std::string& scenario, const std::string& checkpoint,
                    const std::string& config, std::uint64_t seed, int day,
                    const std::string& expert_file, const std::string& policy,
                    const std::string& out) {
  Scenario sc = load_scenario(scenario);
  HyperParams hp = config.empty() ? HyperParams{} : load_config(config);
  const int d = day < 0 ? sc.test_day() : day;
  if (d < 0 || d >= sc.data.n_days)
    throw DataError("day out of range (scenario has " +
                    std::to_string(sc.data.n_days) + ")");
  train::ExpertCache cache =
      detail::obtain_cache(sc, {d}, expert_file, "");
  train::EvalRecord r;
  if (policy == "expert") {
    r = train::evaluate_expert(sc, cache, d, {}, seed);
  } else if (policy == "checkpoint") {
    if (checkpoint.empty())
      throw ConfigError("--checkpoint is required unless --policy expert");
    std::vector<std::unique_ptr<train::AgentLearner>> learners;
    Rng rng(seed);
    for (int i = 0; i < sc.n_agents(); ++i) {
      auto l = std::make_unique<train::AgentLearner>();
      l->init(sc, hp, hp.lambda_init, rng);
      nets::ParamSet ps = l->full_params();
      CheckpointMeta meta =
          load_checkpoint(fs::path(checkpoint) / ("agent" + std::to_string(i)),
                          ps);
      if (meta.config_hash != config_hash(hp))
        throw DataError("checkpoint agent" + std::to_string(i) +
                        " was trained under a different configuration");
      learners.push_back(std::move(l));
    }
    const std::uint64_t es = seed ^ (0x9e3779b97f4a7c15ull * (d + 1));
    r = train::evaluate_policy(sc, learners, cache, d, {}, es);
  } else {
    throw ConfigError("--policy must be checkpoint or expert");
  }
  json j = detail::eval_record_json(r);
  j["version"] = kVersion;
  j["seed"] = seed;
  j["config_hash"] = config_hash(hp);
  j["policy"] = policy;
  if (!out.empty()) detail::write_json(out, j);
  std::printf(
      "day %d (%s policy): cost %.4f vs expert %.4f, accuracy %.2f, "
      "violation rate %.4g\n",
      d, policy.c_str(), r.cost, r.expert_cost, r.accuracy,
      r.violation_rate);
  return kExitOk;
}

// --- dispatcher -----------------------------------------------------------

inline int run_cli(int argc, const char* const* argv) {
  CLI::App app{"desk-scale p2p energy trading lab"};
  app.set_version_flag("--version", std::string("p2plab ") + kVersion);
  app.require_subcommand(1);

  int rc = kExitOk;

  // gen-fixture
  std::string gf_kind = "six_bus", gf_out;
  std::uint64_t gf_seed = 0;
  int gf_days = 6;
  bool gf_force = false;
  CLI::App* gf = app.add_subcommand("gen-fixture", "emit a scenario directory");
  gf->add_option("--kind", gf_kind, "six_bus or ieee141_like");
  gf->add_option("--out", gf_out, "output directory")->required();
  gf->add_option("--seed", gf_seed, "profile jitter seed");
  gf->add_option("--days", gf_days, "number of simulated days");
  gf->add_flag("--force", gf_force, "overwrite a non-empty directory");
  gf->callback(
      [&] { rc = cmd_gen_fixture(gf_kind, gf_out, gf_seed, gf_days, gf_force); });

  // expert {solve, verify, metrics}
  CLI::App* ex = app.add_subcommand("expert", "model workflow tools");
  ex->require_subcommand(1);
  std::string es_scenario, es_out;
  int es_agent = 0, es_day = 0, es_horizon = 8;
  CLI::App* solve = ex->add_subcommand("solve", "plan one agent's window");
  solve->add_option("--scenario", es_scenario, "scenario directory")
      ->required();
  solve->add_option("--agent", es_agent, "agent index")->required();
  solve->add_option("--day", es_day, "day index");
  solve->add_option("--horizon", es_horizon, "lookahead steps");
  solve->add_option("--out", es_out, "solution JSON path");
  solve->callback([&] {
    rc = cmd_expert_solve(es_scenario, es_agent, es_day, es_horizon, es_out);
  });

  std::string ev_scenario, ev_out;
  int ev_day = 0;
  CLI::App* verify =
      ex->add_subcommand("verify", "plan all agents and run the grid check");
  verify->add_option("--scenario", ev_scenario, "scenario directory")
      ->required();
  verify->add_option("--day", ev_day, "day index");
  verify->add_option("--out", ev_out, "report JSON path");
  verify->callback(
      [&] { rc = cmd_expert_verify(ev_scenario, ev_day, ev_out); });

  int em_trials = 25;
  std::uint64_t em_seed = 1;
  std::string em_out;
  CLI::App* emet =
      ex->add_subcommand("metrics", "benchmark the generation backend");
  emet->add_option("--trials", em_trials, "number of synthetic windows");
  emet->add_option("--seed", em_seed, "window jitter seed");
  emet->add_option("--out", em_out, "metrics JSON path");
  emet->callback([&] { rc = cmd_metrics(em_trials, em_seed, em_out); });

  // train
  std::string tr_scenario, tr_out, tr_config, tr_expert;
  std::uint64_t tr_seed = 0;
  int tr_episodes = 0, tr_threads = 1;
  bool tr_ablation = false;
  CLI::App* tr = app.add_subcommand("train", "run the imitation trainer");
  tr->add_option("--scenario", tr_scenario, "scenario directory")->required();
  tr->add_option("--out", tr_out, "artifact directory")->required();
  tr->add_option("--config", tr_config, "hyperparameter file");
  tr->add_option("--seed", tr_seed, "training seed");
  tr->add_option("--episodes", tr_episodes, "override episode count");
  tr->add_option("--expert", tr_expert, "precomputed schedule cache");
  tr->add_option("--threads", tr_threads, "rollout worker cap");
  tr->add_flag("--ablation", tr_ablation,
               "disable the expert constraint (lambda pinned at 0)");
  tr->callback([&] {
    rc = cmd_train(tr_scenario, tr_out, tr_config, tr_seed, tr_episodes,
                   tr_expert, tr_ablation, tr_threads);
  });

  // eval
  std::string el_scenario, el_checkpoint, el_config, el_expert, el_out;
  std::string el_policy = "checkpoint";
  std::uint64_t el_seed = 0;
  int el_day = -1;
  CLI::App* el = app.add_subcommand("eval", "score a policy against the expert");
  el->add_option("--scenario", el_scenario, "scenario directory")->required();
  el->add_option("--checkpoint", el_checkpoint, "checkpoint directory");
  el->add_option("--config", el_config, "hyperparameter file");
  el->add_option("--seed", el_seed, "evaluation seed");
  el->add_option("--day", el_day, "day index (default: test day)");
  el->add_option("--expert", el_expert, "precomputed schedule cache");
  el->add_option("--policy", el_policy, "checkpoint or expert");
  el->add_option("--out", el_out, "report JSON path");
  el->callback([&] {
    rc = cmd_eval(el_scenario, el_checkpoint, el_config, el_seed, el_day,
                  el_expert, el_policy, el_out);
  });

  // top-level metrics alias
  int m_trials = 25;
  std::uint64_t m_seed = 1;
  std::string m_out;
  CLI::App* met =
      app.add_subcommand("metrics", "benchmark the generation backend");
  met->add_option("--trials", m_trials, "number of synthetic windows");
  met->add_option("--seed", m_seed, "window jitter seed");
  met->add_option("--out", m_out, "metrics JSON path");
  met->callback([&] { rc = cmd_metrics(m_trials, m_seed, m_out); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help / --version
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitConfig;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const DataError& e) {  // TopologyError lands here too
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kExitData;
  } catch (const NumericalError& e) {  // and DivergenceError here
    std::fprintf(stderr, "numerical error: %s\n", e.what());
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitError;
  }
  return rc;
}

}  // namespace p2plab::cli
