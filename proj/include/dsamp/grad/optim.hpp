#pragma once

#include "dsamp/grad/param_store.hpp"

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace dsamp::grad {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-7;
  /// Multiplier applied to lr after every on-policy step.
  double lr_decay = 1.0;
};

/// Adam moments for a subset of slots of one ParamStore.
struct OptimState {
  std::vector<std::size_t> slots;
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  std::uint64_t step = 0;
  AdamConfig cfg;
  double lr = 0.0;
};

inline OptimState make_optim(const ParamStore& store, const std::vector<std::string>& names,
                             const AdamConfig& cfg) {
  OptimState st;
  st.cfg = cfg;
  st.lr = cfg.lr;
  for (const auto& n : names) {
    const std::size_t i = store.index_of(n);
    st.slots.push_back(i);
    st.m.push_back(Matrix::Zero(store[i].value.rows(), store[i].value.cols()));
    st.v.push_back(Matrix::Zero(store[i].value.rows(), store[i].value.cols()));
  }
  return st;
}

inline double grad_norm(const ParamStore& store, const OptimState& opt) {
  double sq = 0.0;
  for (std::size_t i : opt.slots) sq += store[i].grad.squaredNorm();
  return std::sqrt(sq);
}

enum class LrDecay { apply, skip };

/// One Adam update on the optimizer's slots. Gradients are rescaled so their
/// global norm is at most `clip_norm`, then weight decay is added (L2 form),
/// then the moments are updated. Returns the pre-clip norm.
inline double adam_step(ParamStore& store, OptimState& opt, double clip_norm,
                        LrDecay decay = LrDecay::apply) {
  for (std::size_t i : opt.slots)
    if (!store[i].grad_populated)
      throw ContractViolation("adam_step: slot '" + store[i].name + "' has no gradient");
  const double norm = grad_norm(store, opt);
  const double clip = (clip_norm > 0.0 && norm > clip_norm) ? clip_norm / norm : 1.0;

  ++opt.step;
  const auto& c = opt.cfg;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(opt.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(opt.step));
  const double step_size = opt.lr / bc1;
  const double inv_sqrt_bc2 = 1.0 / std::sqrt(bc2);
  for (std::size_t k = 0; k < opt.slots.size(); ++k) {
    auto& slot = store[opt.slots[k]];
    Matrix g = slot.grad * clip;
    if (c.weight_decay != 0.0) g += c.weight_decay * slot.value;
    opt.m[k] = c.beta1 * opt.m[k] + (1.0 - c.beta1) * g;
    opt.v[k] = c.beta2 * opt.v[k] + (1.0 - c.beta2) * g.cwiseAbs2();
    slot.value.array() -=
        step_size * opt.m[k].array() / ((opt.v[k].array().sqrt() * inv_sqrt_bc2) + c.eps);
  }
  if (decay == LrDecay::apply) opt.lr *= c.lr_decay;
  store.bump_version();
  return norm;
}

/// target <- (1 - tau) * target + tau * online, element-wise.
inline void ema_update(ParamStore& target, const ParamStore& online, double tau) {
  require(target.same_layout(online), "ema_update: slot layouts differ");
  require(tau >= 0.0 && tau <= 1.0, "ema_update: tau outside [0, 1]");
  if (tau == 0.0) return;
  for (std::size_t i = 0; i < target.size(); ++i) {
    if (tau == 1.0)
      target[i].value = online[i].value;
    else
      target[i].value = (1.0 - tau) * target[i].value + tau * online[i].value;
  }
  target.bump_version();
}

}  // namespace dsamp::grad
