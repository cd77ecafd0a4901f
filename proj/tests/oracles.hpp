#pragma once

#include "dsamp/kernels.hpp"
#include "dsamp/objectives.hpp"

#include <set>
#include <string>
#include <utility>

namespace dsamp::testing {

inline NetConfig tiny_net(int dim, bool learn_bwd = true, bool shared = true) {
  NetConfig c;
  c.dim = dim;
  c.s_dim = 6;
  c.t_dim = 4;
  c.hidden = 6;
  c.depth = 2;
  c.learn_bwd = learn_bwd;
  c.shared_backbone = shared;
  return c;
}

/// Overwrites every parameter (heads included) with N(0, scale^2) draws.
inline void randomize(SamplerModel& m, std::uint64_t seed, double scale = 0.5) {
  CounterRng rng(seed, 99);
  for (std::size_t k = 0; k < m.params.size(); ++k) {
    auto& v = m.params[k].value;
    for (Index i = 0; i < v.size(); ++i) v.data()[i] = scale * rng.normal();
  }
  m.sync_target();
}

inline Process process(ScheduleKind k, int T, double sigma2) { return {make_schedule(k, T), sigma2}; }

inline Matrix random_matrix(std::uint64_t seed, Index r, Index c, double scale = 1.0) {
  CounterRng rng(seed, 5);
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

/// Per-slot relative error of a graph root's gradient against central
/// differences taken by rebuilding the graph with perturbed live values.
template <class Build>
inline std::pair<double, std::string> graph_fd_error(SamplerModel& m, Build build, bool destr,
                                              const std::set<std::string>& skip = {}) {
  m.params.zero_grad();
  {
    LossGraph g = build();
    grad::forward_backward(destr ? g.destr : g.gen, g.live, m.params);
  }
  double worst = 0.0;
  std::string where;
  const double eps = 1e-5;
  for (std::size_t s = 0; s < m.params.size(); ++s) {
    if (skip.count(m.params[s].name)) continue;
    Matrix numeric(m.params[s].value.rows(), m.params[s].value.cols());
    for (Index k = 0; k < numeric.size(); ++k) {
      double& w = m.params[s].value.data()[k];
      const double w0 = w;
      w = w0 + eps;
      const double fp = [&] { LossGraph g = build(); return (destr ? g.destr : g.gen).item(); }();
      w = w0 - eps;
      const double fm = [&] { LossGraph g = build(); return (destr ? g.destr : g.gen).item(); }();
      w = w0;
      numeric.data()[k] = (fp - fm) / (2.0 * eps);
    }
    const Matrix& ga = m.params[s].grad;
    const double err = (ga - numeric).norm() / (ga.norm() + 1e-8);
    if (err >= worst) {
      worst = err;
      where = m.params[s].name;
    }
  }
  m.params.zero_grad();
  return {worst, where};
}

}  // namespace dsamp::testing
