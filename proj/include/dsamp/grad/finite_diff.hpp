#pragma once

#include "dsamp/grad/param_store.hpp"

#include <cmath>
#include <functional>
#include <string>

namespace dsamp::grad {

struct FiniteDiffReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  bool finite = true;
  std::string failure;

  bool passed(double tolerance) const { return finite && max_rel_error < tolerance; }
};

/// Builds a scalar from parameters bound on a fresh tape.
using ScalarFn = std::function<Tensor(Tape&, std::span<const Tensor>)>;

/// Compares reverse-mode gradients against central differences, slot by
/// slot: error = |g_analytic - g_numeric| / (|g_analytic| + 1e-8) using
/// Euclidean norms over the slot. Leaves `params` values unchanged.
inline FiniteDiffReport finite_diff_check(const ScalarFn& fn, ParamStore& params, double epsilon = 1e-5) {
  require(epsilon > 0.0 && epsilon <= 1e-3, "finite_diff_check: epsilon must lie in (0, 1e-3]");
  FiniteDiffReport rep;

  params.zero_grad();
  {
    Tape tape;
    auto bound = bind(tape, params, true);
    Tensor root = fn(tape, bound);
    if (!std::isfinite(root.item())) {
      rep.finite = false;
      rep.worst_param = params.size() ? params[0].name : std::string();
      rep.failure = "non-finite function value";
    } else {
      forward_backward(root, bound, params);
    }
  }
  auto eval = [&]() {
    Tape tape;
    auto bound = bind(tape, params, false);
    return fn(tape, bound).item();
  };

  for (std::size_t s = 0; s < params.size(); ++s) {
    auto& slot = params[s];
    if (rep.finite && !slot.grad.allFinite()) {
      rep.finite = false;
      rep.worst_param = slot.name;
      rep.failure = "non-finite analytic gradient";
    }
    if (!rep.finite) {
      if (rep.worst_param.empty()) rep.worst_param = slot.name;
      continue;
    }
    Matrix numeric(slot.value.rows(), slot.value.cols());
    for (Index k = 0; k < slot.value.size(); ++k) {
      double& w = slot.value.data()[k];
      const double w0 = w;
      w = w0 + epsilon;
      const double fp = eval();
      w = w0 - epsilon;
      const double fm = eval();
      w = w0;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        rep.finite = false;
        rep.worst_param = slot.name;
        rep.failure = "non-finite value under perturbation";
        break;
      }
      numeric.data()[k] = (fp - fm) / (2.0 * epsilon);
    }
    if (!rep.finite) continue;
    const double err = (slot.grad - numeric).norm() / (slot.grad.norm() + 1e-8);
    if (err > rep.max_rel_error || rep.worst_param.empty()) {
      rep.max_rel_error = std::max(rep.max_rel_error, err);
      rep.worst_param = slot.name;
    }
  }
  params.zero_grad();
  return rep;
}

}  // namespace dsamp::grad
