#pragma once

#include "dsamp/kernels.hpp"

#include <memory>
#include <stdexcept>
#include <string>
#include <string_view>

namespace dsamp {

enum class GenLoss { tb, revkl };
enum class DestrLoss { none, tb, vargrad, tlm };

inline GenLoss parse_gen_loss(std::string_view s) {
  if (s == "tb") return GenLoss::tb;
  if (s == "revkl" || s == "pis") return GenLoss::revkl;
  throw std::invalid_argument("unknown gen_loss '" + std::string(s) + "' (expected tb|revkl)");
}

inline DestrLoss parse_destr_loss(std::string_view s) {
  if (s == "none") return DestrLoss::none;
  if (s == "tb") return DestrLoss::tb;
  if (s == "vargrad") return DestrLoss::vargrad;
  if (s == "tlm") return DestrLoss::tlm;
  throw std::invalid_argument("unknown destr_loss '" + std::string(s) + "' (expected none|tb|vargrad|tlm)");
}

inline std::string_view gen_loss_name(GenLoss g) { return g == GenLoss::tb ? "tb" : "revkl"; }

inline std::string_view destr_loss_name(DestrLoss d) {
  switch (d) {
    case DestrLoss::none: return "none";
    case DestrLoss::tb: return "tb";
    case DestrLoss::vargrad: return "vargrad";
    case DestrLoss::tlm: return "tlm";
  }
  return "?";
}

struct LossConfig {
  GenLoss gen = GenLoss::tb;
  DestrLoss destr = DestrLoss::none;
  bool use_target_nets = true;
  double target_tau = 0.05;
  double logz_lr = 0.1;

  void validate() const {
    if (gen == GenLoss::revkl && destr == DestrLoss::tb)
      throw std::invalid_argument(
          "gen_loss=revkl cannot be combined with destr_loss=tb: reverse KL does not learn logZ, "
          "so the destruction side must use vargrad (or tlm)");
    if (!(target_tau >= 0.0 && target_tau <= 1.0)) throw std::invalid_argument("target_tau must lie in [0, 1]");
    if (!(logz_lr > 0.0)) throw std::invalid_argument("logz_lr must be positive");
  }
};

// ---------------------------------------------------------------------------
// Scalar reductions over per-trajectory columns (n x 1).

/// mean_b w_b r_b^2; weights default to 1.
inline Tensor tb_loss(const Tensor& ratio, const Vector* weights = nullptr) {
  grad::require(ratio.rows() >= 1 && ratio.cols() == 1, "tb_loss: empty batch");
  Tensor sq = grad::square(ratio);
  if (weights) {
    grad::require(weights->size() == ratio.rows(), "tb_loss: weight count mismatch");
    sq = grad::mul(sq, ratio.tape().constant(Matrix(*weights)));
  }
  return grad::mean(sq);
}

/// Batch variance of the log-ratios (population form).
inline Tensor vargrad_loss(const Tensor& ratio) {
  grad::require(ratio.rows() >= 2 && ratio.cols() == 1, "vargrad_loss: batch must have at least 2 trajectories");
  Tensor m = grad::mean(ratio);
  Tensor centred = grad::add_scalar(ratio, grad::neg(m));
  return grad::mean(grad::square(centred));
}

/// Mean negative destruction log-likelihood.
inline Tensor tlm_loss(const Tensor& lb_sum, const Vector* weights = nullptr) {
  grad::require(lb_sum.rows() >= 1 && lb_sum.cols() == 1, "tlm_loss: empty batch");
  Tensor nl = grad::neg(lb_sum);
  if (weights) nl = grad::mul(nl, lb_sum.tape().constant(Matrix(*weights)));
  return grad::mean(nl);
}

// ---------------------------------------------------------------------------
// Full loss graphs.

/// Everything one update needs: a tape with the live parameters bound as
/// gradient leaves and the two loss roots. `destr` is invalid when the
/// configuration trains no destruction process.
struct LossGraph {
  std::unique_ptr<Tape> tape = std::make_unique<Tape>();
  std::vector<Tensor> live;
  Tensor gen;
  Tensor destr;
  /// Generation-side log-ratios including logZ (squared for priorities).
  Vector residual;
  /// Simulated batch, filled by the reverse-KL graph.
  TrajectoryBatch batch;
};

namespace detail {

inline Tensor energy_column(Tape& tape, const Vector& e) { return tape.constant(Matrix(e)); }

/// The parameters playing the frozen opposite side: the EMA copy, or the
/// live values with gradients blocked.
inline const ParamStore& opposite_store(const SamplerModel& model, const LossConfig& cfg) {
  return cfg.use_target_nets ? model.target : model.params;
}

}  // namespace detail

/// Second-moment graph on a stored batch (states carry no gradient). The
/// generation loss uses live theta with frozen phi; the destruction loss
/// uses live phi with frozen theta and a detached logZ.
inline LossGraph build_tb_graph(const SamplerModel& model, const Process& p, const TrajectoryBatch& batch,
                                const LossConfig& cfg, bool train_destr = true,
                                const Vector* weights = nullptr) {
  grad::require(batch.size() >= 1, "loss: empty batch");
  const int T = p.steps();
  const Index n = batch.size();
  LossGraph g;
  Tape& tape = *g.tape;
  NetEval live(model, tape, model.params, true);
  g.live = live.bound();
  NetEval frozen(model, tape, detail::opposite_store(model, cfg), false);

  Tensor S = tape.constant(batch.stacked());
  Tensor E = detail::energy_column(tape, batch.energy);
  const bool destr = train_destr && cfg.destr != DestrLoss::none && model.cfg.learn_bwd && T >= 2;
  const bool frozen_bwd = model.cfg.learn_bwd && T >= 2;

  PathHeads hl = path_heads(model, live, S, n, p, true, destr || !frozen_bwd);
  Tensor lf_live = grad::sum_blocks(path_log_pf(hl.fwd, S, n, p), T);
  Tensor lb_live = T >= 2 && (destr || !frozen_bwd) ? grad::sum_blocks(path_log_pb(hl.bwd, S, n, p), T - 1)
                                                     : zeros_column(tape, n);
  const bool need_frozen_fwd = destr && cfg.destr != DestrLoss::tlm;
  PathHeads hf = path_heads(model, frozen, S, n, p, need_frozen_fwd, frozen_bwd);
  Tensor lb_frozen = frozen_bwd ? grad::sum_blocks(path_log_pb(hf.bwd, S, n, p), T - 1) : lb_live;
  Tensor log_z = live.log_z();

  Tensor r_gen = grad::add_scalar(grad::sub(grad::add(lf_live, E), lb_frozen), log_z);
  g.gen = tb_loss(r_gen, weights);
  g.residual = r_gen.value().col(0);

  if (destr) {
    if (cfg.destr == DestrLoss::tlm) {
      g.destr = tlm_loss(lb_live, weights);
    } else {
      Tensor lf_frozen = grad::sum_blocks(path_log_pf(hf.fwd, S, n, p), T);
      Tensor r = grad::sub(grad::add(lf_frozen, E), lb_live);
      if (cfg.destr == DestrLoss::tb)
        g.destr = tb_loss(grad::add_scalar(r, grad::detach(log_z)), weights);
      else
        g.destr = vargrad_loss(r);
    }
  }
  return g;
}

/// Reverse-KL graph: simulates `n` reparametrised on-policy trajectories on
/// the tape so the loss differentiates through the states. A destruction
/// loss (vargrad or tlm) is attached on the detached states.
inline LossGraph build_revkl_graph(const SamplerModel& model, const EnergySpec& energy, const Process& p, int n,
                                   std::uint64_t seed, const LossConfig& cfg, bool train_destr = true) {
  grad::require(n >= 1, "revkl: batch must be positive");
  const int T = p.steps();
  const int d = model.cfg.dim;
  LossGraph g;
  Tape& tape = *g.tape;
  NetEval live(model, tape, model.params, true);
  g.live = live.bound();
  NetEval frozen(model, tape, detail::opposite_store(model, cfg), false);
  CounterRng rng(seed, stream_id(0xf0, 0));

  std::vector<Tensor> states{tape.constant(Matrix::Zero(n, d))};
  std::vector<Matrix> noise;
  Tensor lf_sum = zeros_column(tape, n);
  for (int i = 0; i < T; ++i) {
    const double dt = p.schedule.widths[i];
    const double t_i[1] = {p.schedule.times[i]};
    ForwardHead h = live.forward_head(states.back(), t_i);
    Tensor mean = grad::add(states.back(), grad::scale(h.drift, dt));
    Tensor var = grad::scale(h.gamma, p.sigma2 * dt);
    Matrix xi = detail::normal_matrix(rng, n, d);
    Tensor next = grad::add(mean, grad::mul(grad::sqrt(var), tape.constant(xi)));
    lf_sum = grad::add(lf_sum, grad::gaussian_logpdf(next, mean, var));
    noise.push_back(std::move(xi));
    states.push_back(next);
  }
  Tensor S = grad::concat_rows(states);
  Tensor lb_sum = zeros_column(tape, n);
  if (T >= 2) {
    PathHeads hb = path_heads(model, frozen, S, n, p, false, true);
    lb_sum = grad::sum_blocks(path_log_pb(hb.bwd, S, n, p), T - 1);
  }
  Tensor E = energy_op(energy, states.back());
  Tensor r = grad::sub(grad::add(lf_sum, E), lb_sum);
  g.gen = grad::mean(r);
  g.residual = r.value().col(0);

  TrajectoryBatch& b = g.batch;
  for (const auto& s : states) b.states.push_back(s.value());
  b.noise = std::move(noise);
  b.energy = E.value().col(0);
  b.log_pf = Matrix::Zero(n, T);
  b.log_pb = Matrix::Zero(n, T);

  const bool destr = train_destr && cfg.destr != DestrLoss::none && model.cfg.learn_bwd && T >= 2;
  if (destr) {
    Tensor Sd = grad::detach(S);
    Tensor Ed = grad::detach(E);
    PathHeads hl = path_heads(model, live, Sd, n, p, false, true);
    Tensor lb_live = grad::sum_blocks(path_log_pb(hl.bwd, Sd, n, p), T - 1);
    if (cfg.destr == DestrLoss::tlm) {
      g.destr = tlm_loss(lb_live);
    } else {
      PathHeads hf = path_heads(model, frozen, Sd, n, p, true, false);
      Tensor lf_frozen = grad::sum_blocks(path_log_pf(hf.fwd, Sd, n, p), T);
      g.destr = vargrad_loss(grad::sub(grad::add(lf_frozen, Ed), lb_live));
    }
  }
  return g;
}

}  // namespace dsamp
