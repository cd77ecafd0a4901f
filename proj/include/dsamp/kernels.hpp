#pragma once

#include "dsamp/energies.hpp"
#include "dsamp/policy_net.hpp"
#include "dsamp/schedule.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <limits>
#include <optional>
#include <numbers>
#include <ostream>
#include <string>
#include <vector>

namespace dsamp {

/// Time grid plus diffusion rate of the reference process.
struct Process {
  Schedule schedule;
  double sigma2 = 1.0;

  int steps() const noexcept { return schedule.steps(); }
};

struct KernelParams {
  Matrix mean;
  Matrix var;  // diagonal, same shape as mean
};

/// Generation kernel at (x_t, t): mean x + f dt, variance gamma sigma^2 dt.
inline KernelParams fwd_params(const SamplerModel& model, const ParamStore& store, const Matrix& x, double t,
                               double dt, double sigma2) {
  grad::require(dt > 0.0, "fwd_params: dt must be positive");
  const HeadValues h = eval_heads(model, store, x, t, true, false);
  if (!h.drift.allFinite() || !h.gamma.allFinite()) throw DivergenceError("fwd_params: non-finite head output");
  return {x + h.drift * dt, h.gamma * (sigma2 * dt)};
}

/// Destruction kernel from (x_next, t_next) to t = t_next - dt. With
/// r = t / t_next: mean alpha r x_next, variance beta r sigma^2 dt. At t = 0
/// the kernel is the Dirac at the origin (mean 0, variance 0).
inline KernelParams bwd_params(const SamplerModel& model, const ParamStore& store, const Matrix& x_next,
                               double t_next, double dt, double sigma2) {
  grad::require(t_next > 0.0, "bwd_params: t_next must be positive");
  grad::require(dt > 0.0 && dt <= t_next * (1.0 + 1e-12), "bwd_params: dt outside (0, t_next]");
  const double t = std::max(0.0, t_next - dt);
  if (t <= 1e-14 * t_next) return {Matrix::Zero(x_next.rows(), x_next.cols()), Matrix::Zero(x_next.rows(), x_next.cols())};
  const double r = t / t_next;
  const HeadValues h = eval_heads(model, store, x_next, t_next, false, true);
  if (!h.alpha.allFinite() || !h.beta.allFinite()) throw DivergenceError("bwd_params: non-finite head output");
  return {h.alpha.cwiseProduct(x_next) * r, h.beta * (r * sigma2 * dt)};
}

/// Row-wise diagonal Gaussian log-density on plain values.
inline Vector gaussian_logpdf_rows(const Matrix& x, const Matrix& mean, const Matrix& var) {
  const double log2pi = std::log(2.0 * std::numbers::pi);
  return (-0.5 * ((x - mean).array().square() / var.array() + var.array().log() + log2pi)).matrix().rowwise().sum();
}

enum class Provenance { on_policy, explore, backward_from_buffer, replayed };

inline std::string_view provenance_name(Provenance p) {
  switch (p) {
    case Provenance::on_policy: return "on-policy";
    case Provenance::explore: return "explore";
    case Provenance::backward_from_buffer: return "backward-from-buffer";
    case Provenance::replayed: return "replayed";
  }
  return "?";
}

/// One trajectory X_0 = 0, ..., X_1. log_pb[0] is the Dirac step into X_0
/// and is always 0.
struct Trajectory {
  Matrix states;  // (T+1) x d
  Vector log_pf;  // T
  Vector log_pb;  // T
  double energy = 0.0;
  Matrix noise;  // T x d, empty unless forward-sampled
  Provenance provenance = Provenance::on_policy;
};

/// A batch stored step-major: states[i] is the n x d matrix of X_{t_i}.
struct TrajectoryBatch {
  std::vector<Matrix> states;  // T+1 entries
  Matrix log_pf;               // n x T
  Matrix log_pb;               // n x T, column 0 is the Dirac step
  Vector energy;               // n
  std::vector<Matrix> noise;   // T entries or empty
  Provenance provenance = Provenance::on_policy;
  /// Trajectories dropped because a state or density was non-finite.
  int n_diverged = 0;

  int size() const noexcept { return states.empty() ? 0 : static_cast<int>(states[0].rows()); }
  int steps() const noexcept { return static_cast<int>(states.size()) - 1; }
  int dim() const noexcept { return states.empty() ? 0 : static_cast<int>(states[0].cols()); }
  double diverged_fraction() const {
    const int total = size() + n_diverged;
    return total ? static_cast<double>(n_diverged) / total : 0.0;
  }

  /// All T+1 steps stacked block-wise: ((T+1) n) x d.
  Matrix stacked() const {
    const Index n = size();
    Matrix out(n * static_cast<Index>(states.size()), dim());
    for (std::size_t i = 0; i < states.size(); ++i) out.middleRows(static_cast<Index>(i) * n, n) = states[i];
    return out;
  }

  Trajectory get(int r) const {
    Trajectory t;
    const int T = steps();
    t.states.resize(T + 1, dim());
    for (int i = 0; i <= T; ++i) t.states.row(i) = states[i].row(r);
    t.log_pf = log_pf.row(r).transpose();
    t.log_pb = log_pb.row(r).transpose();
    t.energy = energy(r);
    if (!noise.empty()) {
      t.noise.resize(T, dim());
      for (int i = 0; i < T; ++i) t.noise.row(i) = noise[i].row(r);
    }
    t.provenance = provenance;
    return t;
  }

  static TrajectoryBatch from(const std::vector<Trajectory>& ts) {
    grad::require(!ts.empty(), "TrajectoryBatch::from: empty list");
    const int n = static_cast<int>(ts.size());
    const int T = static_cast<int>(ts[0].states.rows()) - 1;
    const int d = static_cast<int>(ts[0].states.cols());
    TrajectoryBatch b;
    b.states.assign(T + 1, Matrix(n, d));
    b.log_pf.resize(n, T);
    b.log_pb.resize(n, T);
    b.energy.resize(n);
    b.provenance = ts[0].provenance;
    for (int r = 0; r < n; ++r) {
      grad::require(ts[r].states.rows() == T + 1 && ts[r].states.cols() == d, "TrajectoryBatch::from: ragged input");
      for (int i = 0; i <= T; ++i) b.states[i].row(r) = ts[r].states.row(i);
      b.log_pf.row(r) = ts[r].log_pf.transpose();
      b.log_pb.row(r) = ts[r].log_pb.transpose();
      b.energy(r) = ts[r].energy;
    }
    return b;
  }
};

/// log p_f + E(X_1) - log p_b + logZ for each trajectory, log p_0 = 0.
inline double log_ratio(const Trajectory& t, double log_z) { return t.log_pf.sum() + t.energy - t.log_pb.sum() + log_z; }

inline Vector log_ratio(const TrajectoryBatch& b, double log_z) {
  return (b.log_pf.rowwise().sum() + b.energy - b.log_pb.rowwise().sum()).array() + log_z;
}

// ---------------------------------------------------------------------------
// Tape-level path accounting over block-stacked states.

/// Per-step log-densities of a batch on a tape: lf is (T n) x 1 with block i
/// the step t_i -> t_{i+1}; lb is ((T-1) n) x 1 with block i-1 the step
/// t_{i+1} -> t_i for i >= 1. The Dirac step is omitted (it contributes 0).
struct PathLogs {
  Tensor lf;
  Tensor lb;  // invalid when T == 1
  Tensor lf_sum;  // n x 1
  Tensor lb_sum;  // n x 1
};

/// Heads over stacked states S = [X_0; ...; X_T]: the forward head on blocks
/// 0..T-1 and the backward head on blocks 2..T (each at its block's time).
struct PathHeads {
  ForwardHead fwd;
  BackwardHead bwd;  // invalid when T == 1
};

inline PathHeads path_heads(const SamplerModel& model, const NetEval& net, const Tensor& S, Index n,
                            const Process& p, bool want_fwd, bool want_bwd) {
  const int T = p.steps();
  const auto& times = p.schedule.times;
  PathHeads out;
  want_bwd = want_bwd && T >= 2;
  Tensor hf;
  if (want_fwd || (want_bwd && model.cfg.shared_backbone && model.cfg.learn_bwd)) hf = net.features(S, times, true);
  if (want_fwd) out.fwd = net.forward_from_features(grad::slice_rows(hf, 0, T * n));
  if (want_bwd) {
    const Index rows = static_cast<Index>(T - 1) * n;
    if (!model.cfg.learn_bwd) {
      out.bwd = net.backward_from_features(grad::slice_rows(S, 2 * n, rows));
    } else {
      Tensor hb = model.cfg.shared_backbone ? hf : net.features(S, times, false);
      out.bwd = net.backward_from_features(grad::slice_rows(hb, 2 * n, rows));
    }
  }
  return out;
}

inline Tensor path_log_pf(const ForwardHead& h, const Tensor& S, Index n, const Process& p) {
  const int T = p.steps();
  const auto& w = p.schedule.widths;
  Tensor x_prev = grad::slice_rows(S, 0, T * n);
  Tensor x_next = grad::slice_rows(S, n, T * n);
  std::vector<double> dts(w.begin(), w.end());
  std::vector<double> vs;
  for (double dt : w) vs.push_back(p.sigma2 * dt);
  Tensor mean = grad::add(x_prev, grad::scale_blocks(h.drift, dts));
  Tensor var = grad::scale_blocks(h.gamma, vs);
  return grad::gaussian_logpdf(x_next, mean, var);
}

inline Tensor path_log_pb(const BackwardHead& h, const Tensor& S, Index n, const Process& p) {
  const int T = p.steps();
  const auto& ts = p.schedule.times;
  const auto& w = p.schedule.widths;
  const Index rows = static_cast<Index>(T - 1) * n;
  Tensor x_cond = grad::slice_rows(S, 2 * n, rows);  // X_{t_{i+1}}, i = 1..T-1
  Tensor x_tgt = grad::slice_rows(S, n, rows);       // X_{t_i}
  std::vector<double> rs, vs;
  for (int i = 1; i < T; ++i) {
    const double r = ts[i] / ts[i + 1];
    rs.push_back(r);
    vs.push_back(r * p.sigma2 * w[i]);
  }
  Tensor mean = grad::mul(h.alpha, grad::scale_blocks(x_cond, rs));
  Tensor var = grad::scale_blocks(h.beta, vs);
  return grad::gaussian_logpdf(x_tgt, mean, var);
}

inline Tensor zeros_column(Tape& tape, Index n) { return tape.constant(Matrix::Zero(n, 1)); }

inline PathLogs path_logs(const SamplerModel& model, const NetEval& fnet, const NetEval* bnet, const Tensor& S,
                          Index n, const Process& p) {
  const int T = p.steps();
  PathLogs out;
  const bool same = bnet == nullptr || bnet == &fnet;
  PathHeads hf = path_heads(model, fnet, S, n, p, true, same);
  out.lf = path_log_pf(hf.fwd, S, n, p);
  out.lf_sum = grad::sum_blocks(out.lf, T);
  if (T == 1) {
    out.lb_sum = zeros_column(S.tape(), n);
    return out;
  }
  PathHeads hb = same ? hf : path_heads(model, *bnet, S, n, p, false, true);
  out.lb = path_log_pb(hb.bwd, S, n, p);
  out.lb_sum = grad::sum_blocks(out.lb, T - 1);
  return out;
}

/// Plain-value per-step log-densities of given states under (fwd_store,
/// bwd_store). Fills batch.log_pf, batch.log_pb and batch.energy.
inline void evaluate_path(const SamplerModel& model, const ParamStore& fwd_store, const ParamStore& bwd_store,
                          const EnergySpec& energy, const Process& p, TrajectoryBatch& b) {
  const int T = p.steps();
  const Index n = b.size();
  Tape tape;
  NetEval fnet(model, tape, fwd_store, false);
  std::optional<NetEval> bnet;
  if (&bwd_store != &fwd_store) bnet.emplace(model, tape, bwd_store, false);
  Tensor S = tape.constant(b.stacked());
  PathLogs logs = path_logs(model, fnet, bnet ? &*bnet : nullptr, S, n, p);
  b.log_pf.resize(n, T);
  b.log_pb = Matrix::Zero(n, T);
  for (int i = 0; i < T; ++i) b.log_pf.col(i) = logs.lf.value().middleRows(static_cast<Index>(i) * n, n);
  for (int i = 1; i < T; ++i) b.log_pb.col(i) = logs.lb.value().middleRows(static_cast<Index>(i - 1) * n, n);
  b.energy = energy_rows(energy, b.states.back());
}

namespace detail {

/// Keeps only trajectories whose states and densities are all finite.
inline void drop_diverged(TrajectoryBatch& b) {
  const int n = b.size();
  std::vector<Index> keep;
  for (int r = 0; r < n; ++r) {
    bool ok = std::isfinite(b.energy(r)) && b.log_pf.row(r).allFinite() && b.log_pb.row(r).allFinite();
    for (const auto& s : b.states) ok = ok && s.row(r).allFinite();
    if (ok) keep.push_back(r);
  }
  if (static_cast<int>(keep.size()) == n) return;
  b.n_diverged += n - static_cast<int>(keep.size());
  auto take = [&](Matrix& m) {
    Matrix out(static_cast<Index>(keep.size()), m.cols());
    for (std::size_t k = 0; k < keep.size(); ++k) out.row(static_cast<Index>(k)) = m.row(keep[k]);
    m = std::move(out);
  };
  for (auto& s : b.states) take(s);
  for (auto& s : b.noise) take(s);
  take(b.log_pf);
  take(b.log_pb);
  Vector e(static_cast<Index>(keep.size()));
  for (std::size_t k = 0; k < keep.size(); ++k) e(static_cast<Index>(k)) = b.energy(keep[k]);
  b.energy = std::move(e);
}

inline Matrix normal_matrix(CounterRng& rng, Index n, Index d) {
  Matrix m(n, d);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

}  // namespace detail

struct SampleOptions {
  /// Extra behaviour std as a multiple of the reference std sqrt(sigma^2 dt).
  double explore = 0.0;
  /// Store used for the backward densities; defaults to the sampling store.
  const ParamStore* bwd_store = nullptr;
  /// Skip the backward densities and the energy (log_pb, energy left zero).
  bool forward_only = false;
};

/// Ancestral simulation of the generation process from X_0 = 0. Behaviour
/// variance is the model variance plus explore^2 sigma^2 dt; the recorded
/// log p_f always uses the model variance.
inline TrajectoryBatch sample_forward(const SamplerModel& model, const ParamStore& store, const EnergySpec& energy,
                                      const Process& p, int batch, std::uint64_t seed, const SampleOptions& opt = {}) {
  grad::require(opt.explore >= 0.0, "sample_forward: exploration must be non-negative");
  grad::require(batch >= 1, "sample_forward: batch must be positive");
  const int T = p.steps();
  const int d = model.cfg.dim;
  CounterRng rng(seed, stream_id(0xf0, 0));
  TrajectoryBatch b;
  b.provenance = opt.explore > 0.0 ? Provenance::explore : Provenance::on_policy;
  b.states.push_back(Matrix::Zero(batch, d));
  b.log_pf.resize(batch, T);
  for (int i = 0; i < T; ++i) {
    const double dt = p.schedule.widths[i];
    const Matrix& x = b.states.back();
    const HeadValues h = eval_heads(model, store, x, p.schedule.times[i], true, false);
    const Matrix mean = x + h.drift * dt;
    const Matrix var = h.gamma * (p.sigma2 * dt);
    Matrix xi = detail::normal_matrix(rng, batch, d);
    const double extra = opt.explore * opt.explore * p.sigma2 * dt;
    Matrix next = mean + ((var.array() + extra).sqrt() * xi.array()).matrix();
    b.log_pf.col(i) = gaussian_logpdf_rows(next, mean, var);
    b.noise.push_back(std::move(xi));
    b.states.push_back(std::move(next));
  }
  b.log_pb = Matrix::Zero(batch, T);
  b.energy = Vector::Zero(batch);
  for (Index r = 0; r < batch; ++r)
    if (!b.states.back().row(r).allFinite()) b.energy(r) = std::numeric_limits<double>::quiet_NaN();
  detail::drop_diverged(b);
  if (!opt.forward_only && b.size() > 0) {
    const Index n = b.size();
    if (T >= 2) {
      Tape tape;
      NetEval bnet(model, tape, opt.bwd_store ? *opt.bwd_store : store, false);
      Tensor S = tape.constant(b.stacked());
      PathHeads hb = path_heads(model, bnet, S, n, p, false, true);
      Tensor lb = path_log_pb(hb.bwd, S, n, p);
      for (int i = 1; i < T; ++i) b.log_pb.col(i) = lb.value().middleRows(static_cast<Index>(i - 1) * n, n);
    }
    b.energy = energy_rows(energy, b.states.back());
  }
  detail::drop_diverged(b);
  return b;
}

/// Ancestral simulation of the destruction process from given terminal
/// states, recording both processes' densities along the path.
inline TrajectoryBatch sample_backward(const SamplerModel& model, const ParamStore& store, const EnergySpec& energy,
                                       const Matrix& x1, const Process& p, std::uint64_t seed,
                                       const ParamStore* fwd_store = nullptr) {
  grad::require(x1.rows() >= 1 && x1.cols() == model.cfg.dim, "sample_backward: bad terminal batch shape");
  grad::require(x1.allFinite(), "sample_backward: terminal states must be finite");
  const int T = p.steps();
  const Index n = x1.rows();
  const int d = model.cfg.dim;
  CounterRng rng(seed, stream_id(0xb0, 0));
  TrajectoryBatch b;
  b.provenance = Provenance::backward_from_buffer;
  b.states.assign(T + 1, Matrix());
  b.states[T] = x1;
  b.states[0] = Matrix::Zero(n, d);
  for (int i = T - 1; i >= 1; --i) {
    const KernelParams k = bwd_params(model, store, b.states[i + 1], p.schedule.times[i + 1], p.schedule.widths[i],
                                      p.sigma2);
    b.states[i] = k.mean + (k.var.array().sqrt() * detail::normal_matrix(rng, n, d).array()).matrix();
  }
  b.log_pf = Matrix::Zero(n, T);
  b.log_pb = Matrix::Zero(n, T);
  b.energy = Vector::Zero(n);
  bool finite = true;
  for (const auto& s : b.states) finite = finite && s.allFinite();
  if (!finite) {
    // Mark non-finite rows; finite rows are evaluated after dropping.
    for (Index r = 0; r < n; ++r) {
      bool ok = true;
      for (const auto& s : b.states) ok = ok && s.row(r).allFinite();
      if (!ok) b.energy(r) = std::numeric_limits<double>::quiet_NaN();
    }
    detail::drop_diverged(b);
    if (b.size() == 0) return b;
  }
  evaluate_path(model, fwd_store ? *fwd_store : store, store, energy, p, b);
  detail::drop_diverged(b);
  return b;
}

/// One JSON object per trajectory: states, log_pf, log_pb, energy.
inline void dump_trajectories(std::ostream& os, const TrajectoryBatch& b) {
  for (int r = 0; r < b.size(); ++r) {
    const Trajectory t = b.get(r);
    nlohmann::json j;
    j["provenance"] = provenance_name(t.provenance);
    j["states"] = nlohmann::json::array();
    for (Index i = 0; i < t.states.rows(); ++i)
      j["states"].push_back(std::vector<double>(t.states.row(i).data(), t.states.row(i).data() + t.states.cols()));
    j["log_pf"] = std::vector<double>(t.log_pf.data(), t.log_pf.data() + t.log_pf.size());
    j["log_pb"] = std::vector<double>(t.log_pb.data(), t.log_pb.data() + t.log_pb.size());
    j["energy"] = t.energy;
    os << j.dump() << '\n';
  }
}

}  // namespace dsamp
