#pragma once

#include "dsamp/grad/optim.hpp"
#include "dsamp/grad/param_store.hpp"
#include "dsamp/grad/tensor.hpp"
#include "dsamp/rng.hpp"

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dsamp {

using grad::Index;
using grad::Matrix;
using grad::ParamStore;
using grad::Tape;
using grad::Tensor;

struct NetConfig {
  int dim = 2;
  int s_dim = 64;
  int t_dim = 64;
  int hidden = 64;
  int depth = 2;
  double c1 = 4.0;
  double c2 = 0.9;
  /// Output clip: drift is bounded to |f| <= 1/out_clip and std multipliers
  /// are floored at out_clip.
  double out_clip = 1e-4;
  /// Forward variance correction gamma is learned (otherwise gamma = 1).
  bool learn_fwd_var = true;
  /// Backward corrections alpha, beta are learned (otherwise both are 1).
  bool learn_bwd = true;
  /// Forward and backward heads share the encoders and backbone.
  bool shared_backbone = true;

  void validate() const {
    if (dim < 1) throw std::invalid_argument("NetConfig: dim must be positive");
    if (s_dim < 1 || t_dim < 2 || hidden < 1 || depth < 1)
      throw std::invalid_argument("NetConfig: widths and depth must be positive");
    if (t_dim % 2) throw std::invalid_argument("NetConfig: t_dim must be even");
    if (!(c1 > 1.0)) throw std::invalid_argument("NetConfig: C1 must exceed 1");
    if (!(c2 > 0.0 && c2 < 1.0)) throw std::invalid_argument("NetConfig: C2 must lie in (0, 1)");
    if (!(out_clip > 0.0)) throw std::invalid_argument("NetConfig: out_clip must be positive");
  }
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Slot indices of one encoder+backbone trunk.
struct TrunkLayout {
  std::size_t state_w, state_b, time_w, time_b;
  std::size_t first_state_w, first_time_w, first_b;
  std::vector<std::size_t> layer_w, layer_b;  // layers after the first
};

/// Encoders, backbone(s), the two heads, and the learned log-partition.
/// `target` mirrors `params` and is only ever changed by ema updates.
struct SamplerModel {
  NetConfig cfg;
  ParamStore params;
  ParamStore target;
  TrunkLayout gen_trunk;
  TrunkLayout destr_trunk;  // equals gen_trunk when shared
  std::size_t fwd_w = 0, fwd_b = 0, bwd_w = 0, bwd_b = 0, logz = 0;

  std::vector<std::string> trunk_slot_names(bool gen) const;
  /// Slots updated by the generation loss: trunk + forward head.
  std::vector<std::string> gen_slot_names() const;
  /// Slots updated by the destruction loss: trunk + backward head.
  std::vector<std::string> destr_slot_names() const;

  void sync_target() { target = params; }
};

namespace detail {

inline Matrix uniform_init(CounterRng& rng, Index rows, Index cols, double bound) {
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-bound, bound);
  return m;
}

inline void add_linear(ParamStore& p, CounterRng& rng, const std::string& name, Index in, Index out,
                       std::size_t& w, std::size_t& b) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  w = p.add(name + ".W", uniform_init(rng, in, out, bound));
  b = p.add(name + ".b", uniform_init(rng, 1, out, bound));
}

inline TrunkLayout add_trunk(ParamStore& p, CounterRng& rng, const NetConfig& c, const std::string& prefix) {
  TrunkLayout t;
  add_linear(p, rng, prefix + "enc.state", c.dim, c.s_dim, t.state_w, t.state_b);
  add_linear(p, rng, prefix + "enc.time", c.t_dim, c.t_dim, t.time_w, t.time_b);
  // First backbone layer acts on concat(state, time); its weight is stored
  // as the two row blocks of that matrix.
  const double bound = 1.0 / std::sqrt(static_cast<double>(c.s_dim + c.t_dim));
  t.first_state_w = p.add(prefix + "backbone.0.Ws", uniform_init(rng, c.s_dim, c.hidden, bound));
  t.first_time_w = p.add(prefix + "backbone.0.Wt", uniform_init(rng, c.t_dim, c.hidden, bound));
  t.first_b = p.add(prefix + "backbone.0.b", uniform_init(rng, 1, c.hidden, bound));
  for (int l = 1; l < c.depth; ++l) {
    std::size_t w, b;
    add_linear(p, rng, prefix + "backbone." + std::to_string(l), c.hidden, c.hidden, w, b);
    t.layer_w.push_back(w);
    t.layer_b.push_back(b);
  }
  return t;
}

}  // namespace detail

inline std::vector<std::string> SamplerModel::trunk_slot_names(bool gen) const {
  const std::string prefix = cfg.shared_backbone ? "" : (gen ? "gen." : "destr.");
  std::vector<std::string> out;
  for (const auto& s : params.slots())
    if (s.name.rfind(prefix + "enc.", 0) == 0 || s.name.rfind(prefix + "backbone.", 0) == 0) out.push_back(s.name);
  return out;
}

inline std::vector<std::string> SamplerModel::gen_slot_names() const {
  auto out = trunk_slot_names(true);
  out.push_back("head.fwd.W");
  out.push_back("head.fwd.b");
  return out;
}

inline std::vector<std::string> SamplerModel::destr_slot_names() const {
  auto out = trunk_slot_names(false);
  out.push_back("head.bwd.W");
  out.push_back("head.bwd.b");
  return out;
}

/// Fresh model: PyTorch-style uniform fan-in init everywhere except the two
/// head output layers and logZ, which start at exactly zero. At init the
/// kernels therefore reduce to the fixed reference process.
inline SamplerModel make_model(const NetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  SamplerModel m;
  m.cfg = cfg;
  CounterRng rng(seed, stream_id(0x1a17, 0));
  if (cfg.shared_backbone) {
    m.gen_trunk = detail::add_trunk(m.params, rng, cfg, "");
    m.destr_trunk = m.gen_trunk;
  } else {
    m.gen_trunk = detail::add_trunk(m.params, rng, cfg, "gen.");
    m.destr_trunk = detail::add_trunk(m.params, rng, cfg, "destr.");
  }
  m.fwd_w = m.params.add("head.fwd.W", Matrix::Zero(cfg.hidden, 2 * cfg.dim));
  m.fwd_b = m.params.add("head.fwd.b", Matrix::Zero(1, 2 * cfg.dim));
  m.bwd_w = m.params.add("head.bwd.W", Matrix::Zero(cfg.hidden, 2 * cfg.dim));
  m.bwd_b = m.params.add("head.bwd.b", Matrix::Zero(1, 2 * cfg.dim));
  m.logz = m.params.add("logZ", Matrix::Zero(1, 1));
  m.sync_target();
  return m;
}

/// Rebuilds the slot layout for `cfg` and copies in stored values.
inline SamplerModel model_from_params(const NetConfig& cfg, const ParamStore& params, const ParamStore* target) {
  SamplerModel m = make_model(cfg, 0);
  if (!m.params.same_layout(params)) throw std::invalid_argument("checkpoint parameters do not match the network config");
  m.params = params;
  m.target = target ? *target : params;
  return m;
}

/// Sinusoidal time features: [sin(w_k t), cos(w_k t)], w_k geometric in [1, 1e4].
inline Matrix time_features(std::span<const double> times, int t_dim) {
  const int half = t_dim / 2;
  Matrix out(static_cast<Index>(times.size()), t_dim);
  for (std::size_t r = 0; r < times.size(); ++r) {
    for (int k = 0; k < half; ++k) {
      const double w = half > 1 ? std::pow(1e4, static_cast<double>(k) / (half - 1)) : 1.0;
      out(static_cast<Index>(r), k) = std::sin(w * times[r]);
      out(static_cast<Index>(r), half + k) = std::cos(w * times[r]);
    }
  }
  return out;
}

struct ForwardHead {
  Tensor drift;  // f_theta
  Tensor gamma;  // variance multiplier, in [e^-C1, e^C1]
};

struct BackwardHead {
  Tensor alpha;  // mean multiplier, in [1 - C2, 1 + C2]
  Tensor beta;   // variance multiplier, in [1 - C2, 1 + C2]
};

/// A parameter store bound onto a tape. `x` holds `times.size()` equal row
/// blocks; block i is evaluated at time times[i].
class NetEval {
 public:
  NetEval(const SamplerModel& model, Tape& tape, const ParamStore& store, bool requires_grad)
      : model_(model), tape_(tape), bound_(grad::bind(tape, store, requires_grad)) {}
  /// Uses parameters already bound on `tape`, in slot order.
  NetEval(const SamplerModel& model, Tape& tape, std::vector<Tensor> bound)
      : model_(model), tape_(tape), bound_(std::move(bound)) {
    grad::require(bound_.size() == model.params.size(), "NetEval: bound parameter count mismatch");
  }

  const std::vector<Tensor>& bound() const noexcept { return bound_; }

  Tensor features(const Tensor& x, std::span<const double> times, bool gen_trunk = true) const {
    const auto& c = model_.cfg;
    const auto& t = gen_trunk ? model_.gen_trunk : model_.destr_trunk;
    const Index nb = static_cast<Index>(times.size());
    grad::require(nb > 0 && x.rows() % nb == 0, "features: rows not divisible by time blocks");
    grad::require(x.cols() == c.dim, "features: state has wrong dimension");
    const Index rows_per_block = x.rows() / nb;

    Tensor s_enc = grad::add_row(grad::matmul(x, p(t.state_w)), p(t.state_b));
    Tensor emb = tape_.constant(time_features(times, c.t_dim));
    Tensor t_enc = grad::gelu(grad::add_row(grad::matmul(emb, p(t.time_w)), p(t.time_b)));
    Tensor t_part = grad::add_row(grad::matmul(t_enc, p(t.first_time_w)), p(t.first_b));
    Tensor h = grad::matmul(grad::gelu(s_enc), p(t.first_state_w));
    h = grad::gelu(grad::add(h, grad::repeat_rows(t_part, rows_per_block)));
    for (std::size_t l = 0; l < t.layer_w.size(); ++l)
      h = grad::gelu(grad::add_row(grad::matmul(h, p(t.layer_w[l])), p(t.layer_b[l])));
    return h;
  }

  ForwardHead forward_from_features(const Tensor& h) const {
    const auto& c = model_.cfg;
    Tensor raw = grad::add_row(grad::matmul(h, p(model_.fwd_w)), p(model_.fwd_b));
    ForwardHead out;
    const double bound = 1.0 / c.out_clip;
    out.drift = grad::clamp(grad::slice_cols(raw, 0, c.dim), -bound, bound);
    if (c.learn_fwd_var) {
      out.gamma = grad::exp(grad::scale(grad::tanh(grad::slice_cols(raw, c.dim, c.dim)), c.c1));
    } else {
      out.gamma = tape_.constant(Matrix::Ones(h.rows(), c.dim));
    }
    return out;
  }

  BackwardHead backward_from_features(const Tensor& h) const {
    const auto& c = model_.cfg;
    BackwardHead out;
    if (!c.learn_bwd) {
      out.alpha = tape_.constant(Matrix::Ones(h.rows(), c.dim));
      out.beta = out.alpha;
      return out;
    }
    Tensor raw = grad::add_row(grad::matmul(h, p(model_.bwd_w)), p(model_.bwd_b));
    out.alpha = grad::shift(grad::scale(grad::tanh(grad::slice_cols(raw, 0, c.dim)), c.c2), 1.0);
    out.beta = grad::shift(grad::scale(grad::tanh(grad::slice_cols(raw, c.dim, c.dim)), c.c2), 1.0);
    return out;
  }

  ForwardHead forward_head(const Tensor& x, std::span<const double> times) const {
    return forward_from_features(features(x, times, true));
  }

  BackwardHead backward_head(const Tensor& x, std::span<const double> times) const {
    if (!model_.cfg.learn_bwd) return backward_from_features(x);
    return backward_from_features(features(x, times, false));
  }

  /// Both heads; the trunk is evaluated once when shared.
  std::pair<ForwardHead, BackwardHead> heads(const Tensor& x, std::span<const double> times) const {
    const auto& c = model_.cfg;
    Tensor hf = features(x, times, true);
    if (!c.learn_bwd) return {forward_from_features(hf), backward_from_features(x)};
    Tensor hb = c.shared_backbone ? hf : features(x, times, false);
    return {forward_from_features(hf), backward_from_features(hb)};
  }

  Tensor log_z() const { return p(model_.logz); }

 private:
  const Tensor& p(std::size_t slot) const { return bound_[slot]; }

  const SamplerModel& model_;
  Tape& tape_;
  std::vector<Tensor> bound_;
};

/// Plain-value head evaluation for a single time (no gradients).
struct HeadValues {
  Matrix drift, gamma, alpha, beta;
};

inline HeadValues eval_heads(const SamplerModel& model, const ParamStore& store, const Matrix& x, double t,
                             bool want_fwd = true, bool want_bwd = true) {
  Tape tape;
  NetEval net(model, tape, store, false);
  Tensor xt = tape.constant(x);
  const double times[1] = {t};
  HeadValues out;
  if (want_fwd && want_bwd) {
    auto [f, b] = net.heads(xt, times);
    out.drift = f.drift.value();
    out.gamma = f.gamma.value();
    out.alpha = b.alpha.value();
    out.beta = b.beta.value();
  } else if (want_fwd) {
    auto f = net.forward_head(xt, times);
    out.drift = f.drift.value();
    out.gamma = f.gamma.value();
  } else if (want_bwd) {
    auto b = net.backward_head(xt, times);
    out.alpha = b.alpha.value();
    out.beta = b.beta.value();
  }
  return out;
}

/// EMA of the target copy toward the online parameters.
inline void snapshot_targets(SamplerModel& model, double tau) { grad::ema_update(model.target, model.params, tau); }

}  // namespace dsamp
