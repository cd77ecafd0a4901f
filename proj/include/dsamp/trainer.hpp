#pragma once

#include "dsamp/config.hpp"
#include "dsamp/grad/checkpoint.hpp"
#include "dsamp/kernels.hpp"
#include "dsamp/metrics.hpp"
#include "dsamp/objectives.hpp"
#include "dsamp/replay.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace dsamp {

enum class RunStatus { ok, diverged, collapsed };

inline std::string_view status_name(RunStatus s) {
  switch (s) {
    case RunStatus::ok: return "ok";
    case RunStatus::diverged: return "diverged";
    case RunStatus::collapsed: return "collapsed";
  }
  return "?";
}

/// Counters exposed for tests and logs.
struct RunCounters {
  std::uint64_t on_policy_updates = 0;
  std::uint64_t per_updates = 0;
  std::uint64_t backward_updates = 0;
  std::uint64_t refreshes = 0;
};

struct RunState {
  RunState(TrainConfig c, EnergySpec e, Process p, SamplerModel m)
      : cfg(std::move(c)),
        energy(std::move(e)),
        process(std::move(p)),
        model(std::move(m)),
        per(PerConfig{cfg.per_capacity, cfg.per_alpha, cfg.per_is_beta, 1e-6}),
        terminal(cfg.net.dim, cfg.ls_capacity) {}

  TrainConfig cfg;
  EnergySpec energy;
  Process process;
  SamplerModel model;
  grad::OptimState opt_gen;
  grad::OptimState opt_destr;  // empty when no destruction loss or single optimiser
  grad::OptimState opt_logz;   // empty for reverse-KL runs
  PerBuffer per;
  TerminalBuffer terminal;
  int iteration = 0;
  RunCounters counters;
  bool diverged = false;
  std::string divergence_reason;
  double last_loss_gen = std::numeric_limits<double>::quiet_NaN();
  double last_loss_destr = std::numeric_limits<double>::quiet_NaN();
  double last_diverged_frac = 0.0;
};

struct TrainResult {
  RunStatus status = RunStatus::ok;
  std::string reason;
  std::vector<nlohmann::json> history;
  /// Averages over the last `eval_average` evaluations.
  MetricsReport final_metrics;
  RunCounters counters;
  int iterations_done = 0;
};

inline Process make_process(const TrainConfig& c) { return {make_schedule(c.schedule, c.steps), c.sigma2}; }

inline RunState init_run(const TrainConfig& cfg) {
  cfg.validate();
  EnergySpec energy = build_energy(cfg.energy, cfg.construction_seed);
  if (energy.dim != cfg.net.dim)
    throw ConfigError("network dim " + std::to_string(cfg.net.dim) + " does not match energy dim " +
                      std::to_string(energy.dim));
  RunState s(cfg, std::move(energy), make_process(cfg), make_model(cfg.net, cfg.seed));
  grad::AdamConfig gen_cfg{cfg.lr_theta, 0.9, 0.999, 1e-8, cfg.weight_decay, cfg.lr_decay};
  grad::AdamConfig destr_cfg = gen_cfg;
  destr_cfg.lr = cfg.lr_phi();
  const bool has_destr = cfg.loss.destr != DestrLoss::none;
  if (cfg.separate_optimizers || !has_destr) {
    s.opt_gen = grad::make_optim(s.model.params, s.model.gen_slot_names(), gen_cfg);
    if (has_destr) s.opt_destr = grad::make_optim(s.model.params, s.model.destr_slot_names(), destr_cfg);
  } else {
    auto names = s.model.gen_slot_names();
    for (const auto& n : s.model.destr_slot_names())
      if (std::find(names.begin(), names.end(), n) == names.end()) names.push_back(n);
    s.opt_gen = grad::make_optim(s.model.params, names, gen_cfg);
  }
  if (cfg.loss.gen == GenLoss::tb) {
    grad::AdamConfig z{cfg.loss.logz_lr, 0.9, 0.999, 1e-8, 0.0, cfg.lr_decay};
    s.opt_logz = grad::make_optim(s.model.params, {"logZ"}, z);
  }
  return s;
}

namespace detail {

inline bool finite_root(const Tensor& t) { return t.valid() && std::isfinite(t.item()); }

/// Applies one graph: generation step (plus logZ), then destruction step.
/// Returns false on a non-finite loss.
inline bool apply_graph(RunState& s, LossGraph& g, grad::LrDecay decay) {
  if (!finite_root(g.gen) || (g.destr.valid() && !finite_root(g.destr))) return false;
  auto& params = s.model.params;
  const double clip = s.cfg.grad_clip;
  params.zero_grad();
  grad::forward_backward(g.gen, g.live, params);
  const bool single = !s.opt_destr.slots.size() && g.destr.valid();
  if (single) grad::forward_backward(g.destr, g.live, params);
  grad::adam_step(params, s.opt_gen, clip, decay);
  if (!s.opt_logz.slots.empty()) grad::adam_step(params, s.opt_logz, clip, decay);
  if (g.destr.valid() && !single) {
    params.zero_grad();
    grad::forward_backward(g.destr, g.live, params);
    grad::adam_step(params, s.opt_destr, clip, decay);
  } else if (!s.opt_destr.slots.empty() && decay == grad::LrDecay::apply) {
    s.opt_destr.lr *= s.opt_destr.cfg.lr_decay;
  }
  for (const auto& slot : params.slots())
    if (!slot.value.allFinite()) return false;
  return true;
}

inline Vector priorities(const Vector& residual) { return residual.array().square() + 1e-6; }

}  // namespace detail

/// One training iteration: an on-policy update, then the replay updates,
/// the target update and the periodic local search.
inline void train_iteration(RunState& s) {
  const auto& c = s.cfg;
  const int it = s.iteration;
  const std::uint64_t base = stream_id(c.seed, static_cast<std::uint64_t>(it));
  auto fail = [&](std::string why) {
    s.diverged = true;
    s.divergence_reason = std::move(why);
  };

  if (c.loss.gen == GenLoss::revkl) {
    LossGraph g = build_revkl_graph(s.model, s.energy, s.process, c.batch, stream_id(0x5a, base), c.loss);
    s.last_loss_gen = g.gen.item();
    s.last_loss_destr = g.destr.valid() ? g.destr.item() : std::numeric_limits<double>::quiet_NaN();
    int bad = 0;
    for (Index r = 0; r < g.residual.size(); ++r) bad += std::isfinite(g.residual(r)) ? 0 : 1;
    s.last_diverged_frac = static_cast<double>(bad) / c.batch;
    if (s.last_diverged_frac >= c.divergence_threshold) return fail("non-finite trajectories");
    if (!detail::apply_graph(s, g, grad::LrDecay::apply)) return fail("non-finite loss");
    ++s.counters.on_policy_updates;
  } else {
    const double anneal = c.explore_anneal > 0 ? std::max(0.0, 1.0 - static_cast<double>(it) / c.explore_anneal) : 0.0;
    SampleOptions so;
    so.explore = c.explore * anneal;
    so.forward_only = true;
    TrajectoryBatch b = sample_forward(s.model, s.model.params, s.energy, s.process, c.batch, stream_id(0x5b, base), so);
    s.last_diverged_frac = b.diverged_fraction();
    if (s.last_diverged_frac >= c.divergence_threshold || b.size() < 2) return fail("non-finite trajectories");
    b.energy = energy_rows(s.energy, b.states.back());
    LossGraph g = build_tb_graph(s.model, s.process, b, c.loss);
    s.last_loss_gen = g.gen.item();
    s.last_loss_destr = g.destr.valid() ? g.destr.item() : std::numeric_limits<double>::quiet_NaN();
    if (!detail::apply_graph(s, g, grad::LrDecay::apply)) return fail("non-finite loss");
    ++s.counters.on_policy_updates;
    if (c.replay_ratio > 0) {
      s.per.insert_batch(b, detail::priorities(g.residual));
      if (c.local_search) s.terminal.insert(b.states.back());
    }

    for (int k = 0; k < c.replay_ratio; ++k) {
      const std::uint64_t j = static_cast<std::uint64_t>(it) * c.replay_ratio + k;
      const std::uint64_t rs = stream_id(0x5c + k, base);
      const bool use_per = !c.local_search || j % 2 == 0 || s.terminal.empty();
      if (use_per) {
        if (s.per.empty()) continue;
        PerSample ps = s.per.sample(static_cast<std::size_t>(c.batch), rs);
        LossGraph rg = build_tb_graph(s.model, s.process, ps.batch, c.loss, true, &ps.weights);
        if (!detail::apply_graph(s, rg, grad::LrDecay::skip)) return fail("non-finite loss (replay)");
        s.per.update(ps.ids, detail::priorities(rg.residual));
        ++s.counters.per_updates;
      } else {
        const Matrix x1 = s.terminal.sample(static_cast<std::size_t>(c.batch), rs);
        TrajectoryBatch bb = sample_backward(s.model, s.model.params, s.energy, x1, s.process, stream_id(0x5d, rs));
        if (bb.size() < 2) continue;
        // Likelihood maximisation of the destruction process on its own
        // samples carries no signal, so TLM skips these batches.
        const bool destr_here = c.loss.destr != DestrLoss::tlm;
        LossGraph rg = build_tb_graph(s.model, s.process, bb, c.loss, destr_here);
        if (!detail::apply_graph(s, rg, grad::LrDecay::skip)) return fail("non-finite loss (backward)");
        ++s.counters.backward_updates;
      }
    }
    if (c.local_search && c.replay_ratio > 0 && (it + 1) % c.ls_every == 0 && !s.terminal.empty()) {
      s.terminal.langevin_refresh(s.energy, {c.ls_step, c.ls_steps}, stream_id(0x5e, base));
      ++s.counters.refreshes;
    }
  }
  snapshot_targets(s.model, c.loss.target_tau);
}

struct TrainHooks {
  /// Called with every metrics record as it is produced.
  std::function<void(const nlohmann::json&)> on_metrics;
  /// Called after every iteration; returning false stops training.
  std::function<bool(const RunState&)> on_iteration;
};

inline MetricsReport average_reports(const std::vector<MetricsReport>& rs) {
  MetricsReport out = rs.back();
  auto avg = [&](auto field) {
    double acc = 0.0;
    int n = 0;
    for (const auto& r : rs)
      if (std::isfinite(r.*field)) {
        acc += r.*field;
        ++n;
      }
    out.*field = n ? acc / n : std::numeric_limits<double>::quiet_NaN();
  };
  avg(&MetricsReport::elbo);
  avg(&MetricsReport::eubo);
  avg(&MetricsReport::elbo_gap);
  avg(&MetricsReport::eubo_gap);
  avg(&MetricsReport::w2);
  avg(&MetricsReport::diverged_frac);
  // Standard errors of an average of independent estimates.
  auto avg_se = [&](auto field) {
    double acc = 0.0;
    int n = 0;
    for (const auto& r : rs)
      if (std::isfinite(r.*field)) {
        acc += (r.*field) * (r.*field);
        ++n;
      }
    out.*field = n ? std::sqrt(acc) / n : std::numeric_limits<double>::quiet_NaN();
  };
  avg_se(&MetricsReport::elbo_se);
  avg_se(&MetricsReport::eubo_se);
  return out;
}

/// Runs `cfg.iterations` iterations from a fresh model (or the given state).
inline TrainResult train(RunState& s, const TrainHooks& hooks = {}) {
  const auto& c = s.cfg;
  TrainResult res;
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<MetricsReport> evals;
  // Evaluations at multiples of eval_every plus the final iteration; W2 only
  // for the last eval_average of them.
  std::vector<int> eval_points;
  for (int i = c.eval_every; i < c.iterations; i += c.eval_every) eval_points.push_back(i);
  eval_points.push_back(c.iterations);
  const std::size_t w2_from = eval_points.size() > static_cast<std::size_t>(c.eval_average)
                                  ? eval_points.size() - static_cast<std::size_t>(c.eval_average)
                                  : 0;
  std::size_t next_eval = 0;

  auto record = [&](int iter, bool with_w2) {
    EvalOptions eo;
    eo.n = c.eval_samples;
    eo.seed = stream_id(0xe7a1 + c.seed, static_cast<std::uint64_t>(iter));
    eo.with_w2 = with_w2 && c.eval_w2;
    MetricsReport m = evaluate(s.model, s.energy, s.process, eo);
    evals.push_back(m);
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    nlohmann::json j{{"iter", iter},
                     {"loss_gen", finite_or_null(s.last_loss_gen)},
                     {"loss_destr", finite_or_null(s.last_loss_destr)},
                     {"logz_hat", m.logz_hat},
                     {"elbo", finite_or_null(m.elbo)},
                     {"elbo_se", finite_or_null(m.elbo_se)},
                     {"eubo", finite_or_null(m.eubo)},
                     {"eubo_se", finite_or_null(m.eubo_se)},
                     {"w2", finite_or_null(m.w2)},
                     {"diverged_frac", std::max(m.diverged_frac, s.last_diverged_frac)},
                     {"wall_ms", std::round(ms)}};
    res.history.push_back(j);
    if (hooks.on_metrics) hooks.on_metrics(j);
  };

  while (s.iteration < c.iterations && !s.diverged) {
    try {
      train_iteration(s);
    } catch (const DivergenceError& e) {
      s.diverged = true;
      s.divergence_reason = e.what();
    } catch (const EnergyError& e) {
      s.diverged = true;
      s.divergence_reason = e.what();
    }
    if (s.diverged) break;
    ++s.iteration;
    if (next_eval < eval_points.size() && s.iteration == eval_points[next_eval]) {
      record(s.iteration, next_eval >= w2_from);
      ++next_eval;
    }
    if (hooks.on_iteration && !hooks.on_iteration(s)) break;
  }
  res.counters = s.counters;
  res.iterations_done = s.iteration;
  if (s.diverged) {
    res.status = RunStatus::diverged;
    res.reason = s.divergence_reason;
    nlohmann::json j{{"iter", s.iteration},
                     {"loss_gen", finite_or_null(s.last_loss_gen)},
                     {"loss_destr", finite_or_null(s.last_loss_destr)},
                     {"logz_hat", finite_or_null(s.model.params.at("logZ").value(0, 0))},
                     {"elbo", nullptr}, {"elbo_se", nullptr}, {"eubo", nullptr}, {"eubo_se", nullptr},
                     {"w2", nullptr},
                     {"diverged_frac", s.last_diverged_frac},
                     {"wall_ms", std::round(std::chrono::duration<double, std::milli>(
                                                std::chrono::steady_clock::now() - t0).count())}};
    res.history.push_back(j);
    if (hooks.on_metrics) hooks.on_metrics(j);
    if (!evals.empty()) res.final_metrics = evals.back();
    return res;
  }
  if (evals.empty()) {
    record(s.iteration, true);
  }
  const std::size_t k = std::min(evals.size(), static_cast<std::size_t>(c.eval_average));
  res.final_metrics = average_reports(std::vector<MetricsReport>(evals.end() - static_cast<std::ptrdiff_t>(k), evals.end()));
  if (!std::isfinite(res.final_metrics.elbo_gap) || res.final_metrics.elbo_gap < -c.collapse_gap) {
    res.status = RunStatus::collapsed;
    res.reason = "final ELBO more than " + std::to_string(c.collapse_gap) + " nats below log Z";
  }
  return res;
}

inline TrainResult train(const TrainConfig& cfg, const TrainHooks& hooks = {}) {
  RunState s = init_run(cfg);
  return train(s, hooks);
}

// ---------------------------------------------------------------------------
// Checkpoints: live parameters plus the target copy under "target/".

inline grad::Checkpoint make_checkpoint(const RunState& s, const nlohmann::json& extra = nlohmann::json::object()) {
  grad::Checkpoint ck;
  ck.meta = {{"config", to_json(s.cfg)}, {"iteration", s.iteration}, {"format", 1}};
  for (const auto& [k, v] : extra.items()) ck.meta[k] = v;
  for (const auto& slot : s.model.params.slots()) ck.params.add(slot.name, slot.value);
  for (const auto& slot : s.model.target.slots()) ck.params.add("target/" + slot.name, slot.value);
  return ck;
}

struct LoadedModel {
  TrainConfig cfg;
  SamplerModel model;
};

/// Rebuilds a model from a checkpoint. `net_override` allows loading into a
/// different head configuration with the same slot layout.
inline LoadedModel load_model(const grad::Checkpoint& ck, const NetConfig* net_override = nullptr) {
  LoadedModel out;
  out.cfg = config_from_json(ck.meta.at("config"));
  if (net_override) out.cfg.net = *net_override;
  ParamStore live, target;
  for (const auto& slot : ck.params.slots()) {
    if (slot.name.rfind("target/", 0) == 0) target.add(slot.name.substr(7), slot.value);
    else live.add(slot.name, slot.value);
  }
  out.model = model_from_params(out.cfg.net, live, target.size() ? &target : nullptr);
  return out;
}

}  // namespace dsamp
