#pragma once
// Training hyperparameters and the key = value config file that carries them.
//
// File syntax: one `key = value` per line, `#` starts a comment, dotted keys
// for grouping (critic.heads = 4), comma lists for widths (policy.hidden =
// 64,64).  Unknown keys are rejected so typos fail loudly.

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "p2plab/common.hpp"

namespace p2plab {

struct HyperParams {
  // optimization
  double lr = 1e-4;
  double lr_lambda = 1e-3;  // dual ascent rate for the W2 multiplier
  int episodes = 200;
  double gamma = 0.99;
  std::size_t buffer_size = 100000;
  int batch = 128;
  double lambda_init = 0.02;
  double epsilon = 0.05;
  double k = 0.8;  // normal-buffer share of each batch
  double tau = 0.005;
  double per_alpha = 0.6;
  double per_floor = 1e-6;
  int eval_every = 10;    // episodes between validation passes
  int update_every = 1;   // env steps between gradient updates
  // epsilon schedule: constant for the first warm fraction of episodes, then
  // a linear ramp to end_mult * epsilon by the final episode
  double eps_warm_frac = 0.4;
  double eps_end_mult = 3.0;
  // networks
  int critic_heads = 4;
  int critic_d_model = 64;
  int critic_d_k = 8;
  double critic_xi_init = 0.2;
  std::string critic_kind = "differential";  // or "standard"
  std::vector<int> critic_hidden{64};        // embed + readout hidden widths
  std::vector<int> policy_hidden{64};
};

inline void validate(const HyperParams& hp) {
  if (!(hp.gamma > 0.0 && hp.gamma < 1.0))
    throw ConfigError("config: gamma must be in (0, 1)");
  if (!(hp.k > 0.0 && hp.k <= 1.0))
    throw ConfigError("config: k must be in (0, 1]");
  if (hp.epsilon <= 0.0) throw ConfigError("config: epsilon must be positive");
  if (hp.lambda_init < 0.0)
    throw ConfigError("config: lambda_init must be nonnegative");
  if (hp.batch <= 0 || hp.episodes <= 0 || hp.buffer_size == 0)
    throw ConfigError("config: batch, episodes, buffer_size must be positive");
  if (hp.update_every <= 0 || hp.eval_every <= 0)
    throw ConfigError("config: update_every and eval_every must be positive");
  if (!(hp.tau > 0.0 && hp.tau <= 1.0))
    throw ConfigError("config: tau must be in (0, 1]");
  if (hp.eps_warm_frac < 0.0 || hp.eps_warm_frac > 1.0)
    throw ConfigError("config: eps_warm_frac must be in [0, 1]");
  if (hp.critic_kind != "differential" && hp.critic_kind != "standard")
    throw ConfigError("config: critic.kind must be differential or standard");
  if (hp.critic_heads < 0) throw ConfigError("config: critic.heads must be >= 0");
}

// Constant epsilon during the warm phase, then a linear ramp reaching
// eps_end_mult * epsilon in the final episode.
inline double epsilon_at(const HyperParams& hp, int episode) {
  double frac = hp.episodes <= 1
                    ? 1.0
                    : static_cast<double>(episode) / (hp.episodes - 1.0);
  if (frac <= hp.eps_warm_frac) return hp.epsilon;
  double t = (frac - hp.eps_warm_frac) / (1.0 - hp.eps_warm_frac);
  return hp.epsilon * (1.0 + t * (hp.eps_end_mult - 1.0));
}

namespace detail {

inline std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    out.push_back(std::stoi(item));
  }
  if (out.empty()) throw ConfigError("config: empty width list");
  return out;
}

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace detail

inline std::map<std::string, std::string> parse_config_text(
    const std::string& text) {
  std::map<std::string, std::string> kv;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: missing '=' on line " +
                        std::to_string(lineno));
    std::string key = detail::trim(line.substr(0, eq));
    std::string val = detail::trim(line.substr(eq + 1));
    if (key.empty() || val.empty())
      throw ConfigError("config: empty key or value on line " +
                        std::to_string(lineno));
    kv[key] = val;
  }
  return kv;
}

inline void apply_config(HyperParams& hp,
                         const std::map<std::string, std::string>& kv) {
  for (const auto& [key, val] : kv) {
    try {
      if (key == "lr") hp.lr = std::stod(val);
      else if (key == "lr_lambda") hp.lr_lambda = std::stod(val);
      else if (key == "episodes") hp.episodes = std::stoi(val);
      else if (key == "gamma") hp.gamma = std::stod(val);
      else if (key == "buffer_size") hp.buffer_size = std::stoul(val);
      else if (key == "batch") hp.batch = std::stoi(val);
      else if (key == "lambda_init") hp.lambda_init = std::stod(val);
      else if (key == "epsilon") hp.epsilon = std::stod(val);
      else if (key == "k") hp.k = std::stod(val);
      else if (key == "tau") hp.tau = std::stod(val);
      else if (key == "per_alpha") hp.per_alpha = std::stod(val);
      else if (key == "per_floor") hp.per_floor = std::stod(val);
      else if (key == "eval_every") hp.eval_every = std::stoi(val);
      else if (key == "update_every") hp.update_every = std::stoi(val);
      else if (key == "eps_warm_frac") hp.eps_warm_frac = std::stod(val);
      else if (key == "eps_end_mult") hp.eps_end_mult = std::stod(val);
      else if (key == "critic.heads") hp.critic_heads = std::stoi(val);
      else if (key == "critic.d_model") hp.critic_d_model = std::stoi(val);
      else if (key == "critic.d_k") hp.critic_d_k = std::stoi(val);
      else if (key == "critic.xi_init") hp.critic_xi_init = std::stod(val);
      else if (key == "critic.kind") hp.critic_kind = val;
      else if (key == "critic.hidden")
        hp.critic_hidden = detail::parse_int_list(val);
      else if (key == "policy.hidden")
        hp.policy_hidden = detail::parse_int_list(val);
      else
        throw ConfigError("config: unknown key '" + key + "'");
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception&) {
      throw ConfigError("config: bad value for '" + key + "': " + val);
    }
  }
  validate(hp);
}

inline HyperParams load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("config: cannot read " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  HyperParams hp;
  apply_config(hp, parse_config_text(ss.str()));
  return hp;
}

// Canonical serialization (sorted keys, shortest-round-trip doubles) used for
// the config hash stamped into artifacts.
inline std::string canonical_config(const HyperParams& hp) {
  auto num = [](double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  auto list = [](const std::vector<int>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i)
      s += (i ? "," : "") + std::to_string(v[i]);
    return s;
  };
  std::map<std::string, std::string> kv{
      {"batch", std::to_string(hp.batch)},
      {"buffer_size", std::to_string(hp.buffer_size)},
      {"critic.d_k", std::to_string(hp.critic_d_k)},
      {"critic.d_model", std::to_string(hp.critic_d_model)},
      {"critic.heads", std::to_string(hp.critic_heads)},
      {"critic.hidden", list(hp.critic_hidden)},
      {"critic.kind", hp.critic_kind},
      {"critic.xi_init", num(hp.critic_xi_init)},
      {"eps_end_mult", num(hp.eps_end_mult)},
      {"eps_warm_frac", num(hp.eps_warm_frac)},
      {"epsilon", num(hp.epsilon)},
      {"episodes", std::to_string(hp.episodes)},
      {"eval_every", std::to_string(hp.eval_every)},
      {"gamma", num(hp.gamma)},
      {"k", num(hp.k)},
      {"lambda_init", num(hp.lambda_init)},
      {"lr", num(hp.lr)},
      {"lr_lambda", num(hp.lr_lambda)},
      {"per_alpha", num(hp.per_alpha)},
      {"per_floor", num(hp.per_floor)},
      {"policy.hidden", list(hp.policy_hidden)},
      {"tau", num(hp.tau)},
      {"update_every", std::to_string(hp.update_every)},
  };
  std::string out;
  for (const auto& [key, val] : kv) out += key + " = " + val + "\n";
  return out;
}

inline std::uint64_t config_hash(const HyperParams& hp) {
  return fnv1a(canonical_config(hp));
}

}  // namespace p2plab
