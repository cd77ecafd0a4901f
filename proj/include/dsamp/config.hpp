#pragma once

#include "dsamp/energies.hpp"
#include "dsamp/objectives.hpp"
#include "dsamp/policy_net.hpp"
#include "dsamp/schedule.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>

namespace dsamp {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct TrainConfig {
  std::string energy = "gmm25";
  std::uint64_t construction_seed = 42;
  int steps = 5;
  ScheduleKind schedule = ScheduleKind::harmonic;
  double sigma2 = 5.0;
  int batch = 512;
  int iterations = 25000;
  std::uint64_t seed = 0;
  std::string method = "tb-both";

  // Optimisation.
  double lr_theta = 1e-3;
  double lr_phi_ratio = 1.0;
  double lr_decay = 0.99988;
  double weight_decay = 1e-7;
  double grad_clip = 200.0;
  bool separate_optimizers = true;

  LossConfig loss;
  NetConfig net;

  // Off-policy machinery (TB generation loss only).
  int replay_ratio = 2;
  std::size_t per_capacity = 5000;
  double per_alpha = 1.0;
  double per_is_beta = 0.1;
  double explore = 0.3;
  int explore_anneal = 10000;
  bool local_search = true;
  std::size_t ls_capacity = 600000;
  double ls_step = 5e-3;
  int ls_steps = 5;
  int ls_every = 100;

  // Evaluation.
  int eval_every = 500;
  int eval_samples = 2048;
  int eval_average = 3;
  bool eval_w2 = true;
  double divergence_threshold = 0.1;
  double collapse_gap = 10.0;

  bool off_policy() const noexcept { return loss.gen == GenLoss::tb; }
  double lr_phi() const noexcept { return lr_theta * lr_phi_ratio; }

  void validate() const {
    try {
      parse_energy_kind(energy);
    } catch (const std::exception& e) {
      throw ConfigError(e.what());
    }
    if (steps < 1) throw ConfigError("T must be >= 1");
    if (!(sigma2 > 0.0)) throw ConfigError("sigma2 must be positive");
    if (batch < 2) throw ConfigError("batch must be >= 2");
    if (iterations < 0) throw ConfigError("iterations must be non-negative");
    if (!(lr_theta > 0.0)) throw ConfigError("lr_theta must be positive");
    if (!(lr_phi_ratio > 0.0 && lr_phi_ratio <= 1.0))
      throw ConfigError("lr_phi_ratio must lie in (0, 1]: lr_phi may not exceed lr_theta");
    if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw ConfigError("lr_decay must lie in (0, 1]");
    if (weight_decay < 0.0 || !(grad_clip > 0.0)) throw ConfigError("weight_decay/grad_clip out of range");
    if (replay_ratio < 0) throw ConfigError("replay_ratio must be non-negative");
    if (per_capacity == 0 || ls_capacity == 0) throw ConfigError("buffer capacities must be positive");
    if (per_alpha < 0.0 || per_is_beta < 0.0) throw ConfigError("PER exponents must be non-negative");
    if (explore < 0.0 || explore_anneal < 0) throw ConfigError("exploration settings must be non-negative");
    if (ls_step < 0.0 || ls_steps < 0 || ls_every < 1) throw ConfigError("local-search settings out of range");
    if (eval_every < 1 || eval_samples < 2 || eval_average < 1) throw ConfigError("evaluation settings out of range");
    if (!(divergence_threshold > 0.0 && divergence_threshold <= 1.0))
      throw ConfigError("divergence_threshold must lie in (0, 1]");
    try {
      loss.validate();
      net.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    if (loss.destr == DestrLoss::none && net.learn_bwd)
      throw ConfigError("destr_loss=none requires the fixed destruction process (learn_bwd=false)");
    if (loss.destr != DestrLoss::none && !net.learn_bwd)
      throw ConfigError("a destruction loss requires learn_bwd=true");
  }
};

/// Loss and kernel flags of one named method.
struct MethodSpec {
  std::string_view name;
  GenLoss gen;
  DestrLoss destr;
  bool learn_fwd_var;
  bool learn_bwd;
};

inline constexpr std::array<MethodSpec, 8> kMethods{{
    {"tb-fixed", GenLoss::tb, DestrLoss::none, false, false},
    {"tb-learnedvar", GenLoss::tb, DestrLoss::none, true, false},
    {"tb-tlm", GenLoss::tb, DestrLoss::tlm, true, true},
    {"tb-both", GenLoss::tb, DestrLoss::tb, true, true},
    {"pis-fixed", GenLoss::revkl, DestrLoss::none, false, false},
    {"pis-learnedvar", GenLoss::revkl, DestrLoss::none, true, false},
    {"pis-tlm", GenLoss::revkl, DestrLoss::tlm, true, true},
    {"pis-vargrad", GenLoss::revkl, DestrLoss::vargrad, true, true},
}};

inline const MethodSpec& find_method(std::string_view name) {
  for (const auto& m : kMethods)
    if (m.name == name) return m;
  std::string known;
  for (const auto& m : kMethods) known += (known.empty() ? "" : "|") + std::string(m.name);
  throw ConfigError("unknown method '" + std::string(name) + "' (expected " + known + ")");
}

inline void apply_method(TrainConfig& c, std::string_view name) {
  const MethodSpec& m = find_method(name);
  c.method = std::string(m.name);
  c.loss.gen = m.gen;
  c.loss.destr = m.destr;
  c.net.learn_fwd_var = m.learn_fwd_var;
  c.net.learn_bwd = m.learn_bwd;
}

/// Per-energy defaults: diffusion rate, schedule, lr_phi ratio, lr decay,
/// exploration and network widths.
inline TrainConfig preset(std::string_view energy_name_, int steps, std::string_view method) {
  EnergyKind kind;
  try {
    kind = parse_energy_kind(energy_name_);
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  TrainConfig c;
  c.energy = std::string(energy_name(kind));
  c.steps = steps;
  apply_method(c, method);
  const EnergySpec spec = build_energy(kind, c.construction_seed);
  c.net.dim = spec.dim;

  if (is_gmm(kind)) {
    c.sigma2 = 5.0;
    c.schedule = ScheduleKind::harmonic;
    c.explore = 0.3;
  } else if (is_funnel(kind)) {
    c.sigma2 = 1.0;
    c.schedule = ScheduleKind::uniform;
    c.explore = 0.2;
  } else if (is_manywell(kind)) {
    c.sigma2 = 1.0;
    c.schedule = ScheduleKind::uniform;
    c.explore = 0.1;
  } else {
    c.sigma2 = 1.0;
    c.schedule = ScheduleKind::uniform;
    c.explore = 0.0;
  }
  const bool gmm25_or_40 = kind == EnergyKind::Gmm25 || kind == EnergyKind::Gmm25SlightDistort ||
                           kind == EnergyKind::Gmm25Distort || kind == EnergyKind::Gmm40;
  c.lr_decay = gmm25_or_40 ? 0.99988 : 0.9999;

  if (kind == EnergyKind::FunnelHard) c.lr_phi_ratio = 1e-3;
  else if (is_manywell(kind)) c.lr_phi_ratio = steps <= 5 ? 1e-5 : 1e-4;
  else c.lr_phi_ratio = 1.0;

  if (is_manywell(kind)) {
    c.net.s_dim = c.net.t_dim = c.net.hidden = 256;
    c.net.depth = 4;
  } else {
    c.net.s_dim = c.net.t_dim = c.net.hidden = 64;
    c.net.depth = 2;
  }
  c.ls_step = 1e-3 * c.sigma2;
  if (!c.off_policy()) {
    c.replay_ratio = 0;
    c.explore = 0.0;
    c.local_search = false;
  }
  return c;
}

// ---------------------------------------------------------------------------
// key = value text form.

namespace detail {

inline bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw ConfigError("expected a boolean, got '" + v + "'");
}

inline double parse_double(const std::string& v) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size()) throw ConfigError("expected a number, got '" + v + "'");
  return out;
}

inline long long parse_int(const std::string& v) {
  const double d = parse_double(v);
  if (d != static_cast<double>(static_cast<long long>(d))) throw ConfigError("expected an integer, got '" + v + "'");
  return static_cast<long long>(d);
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

using Setter = std::function<void(TrainConfig&, const std::string&)>;

inline const std::map<std::string, Setter, std::less<>>& setters() {
  static const std::map<std::string, Setter, std::less<>> table = {
      {"energy", [](TrainConfig& c, const std::string& v) { c.energy = v; }},
      {"construction_seed", [](TrainConfig& c, const std::string& v) { c.construction_seed = static_cast<std::uint64_t>(parse_int(v)); }},
      {"T", [](TrainConfig& c, const std::string& v) { c.steps = static_cast<int>(parse_int(v)); }},
      {"schedule", [](TrainConfig& c, const std::string& v) {
         try {
           c.schedule = parse_schedule_kind(v);
         } catch (const std::exception& e) {
           throw ConfigError(e.what());
         }
       }},
      {"sigma2", [](TrainConfig& c, const std::string& v) { c.sigma2 = parse_double(v); }},
      {"batch", [](TrainConfig& c, const std::string& v) { c.batch = static_cast<int>(parse_int(v)); }},
      {"iterations", [](TrainConfig& c, const std::string& v) { c.iterations = static_cast<int>(parse_int(v)); }},
      {"seed", [](TrainConfig& c, const std::string& v) { c.seed = static_cast<std::uint64_t>(parse_int(v)); }},
      {"method", [](TrainConfig& c, const std::string& v) { apply_method(c, v); }},
      {"lr_theta", [](TrainConfig& c, const std::string& v) { c.lr_theta = parse_double(v); }},
      {"lr_phi_ratio", [](TrainConfig& c, const std::string& v) { c.lr_phi_ratio = parse_double(v); }},
      {"lr_decay", [](TrainConfig& c, const std::string& v) { c.lr_decay = parse_double(v); }},
      {"weight_decay", [](TrainConfig& c, const std::string& v) { c.weight_decay = parse_double(v); }},
      {"grad_clip", [](TrainConfig& c, const std::string& v) { c.grad_clip = parse_double(v); }},
      {"separate_optimizers", [](TrainConfig& c, const std::string& v) { c.separate_optimizers = parse_bool(v); }},
      {"gen_loss", [](TrainConfig& c, const std::string& v) {
         try {
           c.loss.gen = parse_gen_loss(v);
         } catch (const std::exception& e) {
           throw ConfigError(e.what());
         }
       }},
      {"destr_loss", [](TrainConfig& c, const std::string& v) {
         try {
           c.loss.destr = parse_destr_loss(v);
         } catch (const std::exception& e) {
           throw ConfigError(e.what());
         }
       }},
      {"use_target_nets", [](TrainConfig& c, const std::string& v) { c.loss.use_target_nets = parse_bool(v); }},
      {"target_tau", [](TrainConfig& c, const std::string& v) { c.loss.target_tau = parse_double(v); }},
      {"logz_lr", [](TrainConfig& c, const std::string& v) { c.loss.logz_lr = parse_double(v); }},
      {"s_dim", [](TrainConfig& c, const std::string& v) { c.net.s_dim = static_cast<int>(parse_int(v)); }},
      {"t_dim", [](TrainConfig& c, const std::string& v) { c.net.t_dim = static_cast<int>(parse_int(v)); }},
      {"hidden", [](TrainConfig& c, const std::string& v) { c.net.hidden = static_cast<int>(parse_int(v)); }},
      {"depth", [](TrainConfig& c, const std::string& v) { c.net.depth = static_cast<int>(parse_int(v)); }},
      {"c1", [](TrainConfig& c, const std::string& v) { c.net.c1 = parse_double(v); }},
      {"c2", [](TrainConfig& c, const std::string& v) { c.net.c2 = parse_double(v); }},
      {"out_clip", [](TrainConfig& c, const std::string& v) { c.net.out_clip = parse_double(v); }},
      {"learn_fwd_var", [](TrainConfig& c, const std::string& v) { c.net.learn_fwd_var = parse_bool(v); }},
      {"learn_bwd", [](TrainConfig& c, const std::string& v) { c.net.learn_bwd = parse_bool(v); }},
      {"shared_backbone", [](TrainConfig& c, const std::string& v) { c.net.shared_backbone = parse_bool(v); }},
      {"replay_ratio", [](TrainConfig& c, const std::string& v) { c.replay_ratio = static_cast<int>(parse_int(v)); }},
      {"per_capacity", [](TrainConfig& c, const std::string& v) { c.per_capacity = static_cast<std::size_t>(parse_int(v)); }},
      {"per_alpha", [](TrainConfig& c, const std::string& v) { c.per_alpha = parse_double(v); }},
      {"per_is_beta", [](TrainConfig& c, const std::string& v) { c.per_is_beta = parse_double(v); }},
      {"explore", [](TrainConfig& c, const std::string& v) { c.explore = parse_double(v); }},
      {"explore_anneal", [](TrainConfig& c, const std::string& v) { c.explore_anneal = static_cast<int>(parse_int(v)); }},
      {"ls_enabled", [](TrainConfig& c, const std::string& v) { c.local_search = parse_bool(v); }},
      {"ls_capacity", [](TrainConfig& c, const std::string& v) { c.ls_capacity = static_cast<std::size_t>(parse_int(v)); }},
      {"ls_step", [](TrainConfig& c, const std::string& v) { c.ls_step = parse_double(v); }},
      {"ls_steps", [](TrainConfig& c, const std::string& v) { c.ls_steps = static_cast<int>(parse_int(v)); }},
      {"ls_every", [](TrainConfig& c, const std::string& v) { c.ls_every = static_cast<int>(parse_int(v)); }},
      {"eval_every", [](TrainConfig& c, const std::string& v) { c.eval_every = static_cast<int>(parse_int(v)); }},
      {"eval_samples", [](TrainConfig& c, const std::string& v) { c.eval_samples = static_cast<int>(parse_int(v)); }},
      {"eval_average", [](TrainConfig& c, const std::string& v) { c.eval_average = static_cast<int>(parse_int(v)); }},
      {"eval_w2", [](TrainConfig& c, const std::string& v) { c.eval_w2 = parse_bool(v); }},
      {"divergence_threshold", [](TrainConfig& c, const std::string& v) { c.divergence_threshold = parse_double(v); }},
      {"collapse_gap", [](TrainConfig& c, const std::string& v) { c.collapse_gap = parse_double(v); }},
  };
  return table;
}

}  // namespace detail

inline void set_option(TrainConfig& c, std::string_view key, const std::string& value) {
  const auto& t = detail::setters();
  auto it = t.find(key);
  if (it == t.end()) throw ConfigError("unknown config key '" + std::string(key) + "'");
  it->second(c, value);
}

/// Parses `key = value` lines; '#' starts a comment. Keys `energy`, `T` and
/// `method` select a preset that the remaining keys override.
inline TrainConfig parse_config(std::string_view text) {
  std::vector<std::pair<std::string, std::string>> kv;
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    const std::string s = detail::trim(line);
    if (s.empty()) continue;
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    kv.emplace_back(detail::trim(s.substr(0, eq)), detail::trim(s.substr(eq + 1)));
  }
  std::string energy = "gmm25", method = "tb-both";
  int steps = 5;
  for (const auto& [k, v] : kv) {
    if (k == "energy") energy = v;
    if (k == "method") method = v;
    if (k == "T") steps = static_cast<int>(detail::parse_int(v));
  }
  TrainConfig c = preset(energy, steps, method);
  for (const auto& [k, v] : kv)
    if (k != "energy" && k != "method" && k != "T") set_option(c, k, v);
  return c;
}

inline TrainConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {
      {"energy", c.energy},
      {"construction_seed", c.construction_seed},
      {"T", c.steps},
      {"schedule", schedule_name(c.schedule)},
      {"sigma2", c.sigma2},
      {"batch", c.batch},
      {"iterations", c.iterations},
      {"seed", c.seed},
      {"method", c.method},
      {"lr_theta", c.lr_theta},
      {"lr_phi_ratio", c.lr_phi_ratio},
      {"lr_decay", c.lr_decay},
      {"weight_decay", c.weight_decay},
      {"grad_clip", c.grad_clip},
      {"separate_optimizers", c.separate_optimizers},
      {"gen_loss", gen_loss_name(c.loss.gen)},
      {"destr_loss", destr_loss_name(c.loss.destr)},
      {"use_target_nets", c.loss.use_target_nets},
      {"target_tau", c.loss.target_tau},
      {"logz_lr", c.loss.logz_lr},
      {"s_dim", c.net.s_dim},
      {"t_dim", c.net.t_dim},
      {"hidden", c.net.hidden},
      {"depth", c.net.depth},
      {"c1", c.net.c1},
      {"c2", c.net.c2},
      {"out_clip", c.net.out_clip},
      {"learn_fwd_var", c.net.learn_fwd_var},
      {"learn_bwd", c.net.learn_bwd},
      {"shared_backbone", c.net.shared_backbone},
      {"replay_ratio", c.replay_ratio},
      {"per_capacity", c.per_capacity},
      {"per_alpha", c.per_alpha},
      {"per_is_beta", c.per_is_beta},
      {"explore", c.explore},
      {"explore_anneal", c.explore_anneal},
      {"ls_enabled", c.local_search},
      {"ls_capacity", c.ls_capacity},
      {"ls_step", c.ls_step},
      {"ls_steps", c.ls_steps},
      {"ls_every", c.ls_every},
      {"eval_every", c.eval_every},
      {"eval_samples", c.eval_samples},
      {"eval_average", c.eval_average},
      {"eval_w2", c.eval_w2},
      {"divergence_threshold", c.divergence_threshold},
      {"collapse_gap", c.collapse_gap},
  };
}

/// Inverse of to_json: the preset named by energy/T/method, then every key.
inline TrainConfig config_from_json(const nlohmann::json& j) {
  TrainConfig c = preset(j.at("energy").get<std::string>(), j.at("T").get<int>(), j.at("method").get<std::string>());
  for (const auto& [k, v] : j.items()) {
    if (k == "energy" || k == "T" || k == "method") continue;
    std::string s;
    if (v.is_string()) s = v.get<std::string>();
    else if (v.is_boolean()) s = v.get<bool>() ? "true" : "false";
    else if (v.is_number_integer()) s = std::to_string(v.get<long long>());
    else if (v.is_number_unsigned()) s = std::to_string(v.get<unsigned long long>());
    else {
      std::ostringstream os;
      os.precision(17);
      os << v.get<double>();
      s = os.str();
    }
    set_option(c, k, s);
  }
  return c;
}

inline std::string config_text(const TrainConfig& c) {
  std::ostringstream os;
  const nlohmann::json j = to_json(c);
  for (const auto& [k, v] : j.items()) os << k << " = " << (v.is_string() ? v.get<std::string>() : v.dump()) << '\n';
  return os.str();
}

}  // namespace dsamp
