#pragma once

#include "dsamp/kernels.hpp"

#include <vector>

namespace dsamp {

/// Deterministic finite-horizon MDP whose soft value equals the negative
/// reverse KL between the generation and destruction path measures, up to
/// log Z. States and actions live in R^d, T_h(s, a) = a, horizon H = T,
/// r_h(s, a) = log p_b(s | a) for h < H and r_H(x) = -E(x). The policy is
/// the generation kernel.
class DiffusionMdp {
 public:
  DiffusionMdp(const SamplerModel& model, const ParamStore& store, const EnergySpec& energy, Process process)
      : model_(model), store_(store), energy_(energy), process_(std::move(process)) {}

  int horizon() const noexcept { return process_.steps(); }

  static Matrix transition(const Matrix& /*s*/, const Matrix& a) { return a; }

  /// r_h(s, a): the destruction log-density of returning to s from a. The
  /// step into the Dirac source contributes 0.
  double reward(int h, const Matrix& s, const Matrix& a) const {
    if (h == 0) return 0.0;
    const KernelParams k = bwd_params(model_, store_, a, process_.schedule.times[h + 1],
                                      process_.schedule.widths[h], process_.sigma2);
    return gaussian_logpdf_rows(s, k.mean, k.var)(0);
  }

  double terminal_reward(const Matrix& x) const { return -energy(energy_, x.row(0)); }

  double log_policy(int h, const Matrix& s, const Matrix& a) const {
    const KernelParams k =
        fwd_params(model_, store_, s, process_.schedule.times[h], process_.schedule.widths[h], process_.sigma2);
    return gaussian_logpdf_rows(a, k.mean, k.var)(0);
  }

  /// sum_h [r_h(S_h, A_h) - log pi_h(A_h | S_h)] + r_H(S_H) along one
  /// trajectory, with S_0 = 0 and S_{h+1} = A_h = X_{t_{h+1}}.
  double soft_return(const Matrix& states) const {
    const int H = horizon();
    grad::require(states.rows() == H + 1, "soft_return: need T+1 states");
    double ret = 0.0;
    Matrix s = states.row(0);
    for (int h = 0; h < H; ++h) {
      const Matrix a = states.row(h + 1);
      ret += reward(h, s, a) - log_policy(h, s, a);
      s = transition(s, a);
    }
    return ret + terminal_reward(s);
  }

 private:
  const SamplerModel& model_;
  const ParamStore& store_;
  const EnergySpec& energy_;
  Process process_;
};

}  // namespace dsamp
