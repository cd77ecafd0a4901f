#pragma once

#include "dsamp/energies.hpp"
#include "dsamp/kernels.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

namespace dsamp {

struct Estimate {
  double mean = std::numeric_limits<double>::quiet_NaN();
  double se = std::numeric_limits<double>::quiet_NaN();
  int n = 0;
  int n_diverged = 0;
};

inline Estimate mean_se(const Vector& v) {
  Estimate e;
  e.n = static_cast<int>(v.size());
  if (e.n == 0) return e;
  e.mean = v.mean();
  if (e.n >= 2) e.se = std::sqrt((v.array() - e.mean).square().sum() / (e.n - 1) / e.n);
  else e.se = 0.0;
  return e;
}

/// Mean of -log_ratio over forward trajectories: a lower bound on log Z.
inline Estimate elbo(const SamplerModel& model, const EnergySpec& energy, const Process& p, int n, std::uint64_t seed,
                     TrajectoryBatch* out = nullptr) {
  if (n < 2) throw std::invalid_argument("elbo: need at least 2 samples");
  TrajectoryBatch b = sample_forward(model, model.params, energy, p, n, stream_id(0xe1b0, seed));
  Estimate e = mean_se(-log_ratio(b, 0.0));
  e.n_diverged = b.n_diverged;
  if (out) *out = std::move(b);
  return e;
}

/// Mean of -log_ratio over destruction trajectories started from target
/// samples: an upper bound on log Z.
inline Estimate eubo(const SamplerModel& model, const EnergySpec& energy, const Process& p, int n, std::uint64_t seed,
                     const Matrix* ground_truth = nullptr) {
  if (n < 2) throw std::invalid_argument("eubo: need at least 2 samples");
  const Matrix x1 = ground_truth ? *ground_truth : sample_ground_truth(energy, n, stream_id(0xe0b0, seed));
  TrajectoryBatch b = sample_backward(model, model.params, energy, x1, p, stream_id(0xeb, seed));
  Estimate e = mean_se(-log_ratio(b, 0.0));
  e.n_diverged = b.n_diverged;
  return e;
}

/// Minimum-cost perfect matching on a square cost matrix by shortest
/// augmenting paths with potentials. Returns assignment[row] = col.
inline std::vector<int> solve_assignment(const Matrix& cost) {
  const int n = static_cast<int>(cost.rows());
  if (cost.cols() != n) throw std::invalid_argument("assignment: cost matrix must be square");
  const double inf = std::numeric_limits<double>::infinity();
  // 1-based arrays; column 0 is a virtual source.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<int> match(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (int i = 1; i <= n; ++i) {
    match[0] = i;
    int j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const int i0 = match[j0];
      const double* crow = cost.data() + static_cast<std::ptrdiff_t>(i0 - 1) * n;
      const double ui = u[i0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = crow[j - 1] - ui - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do {
      const int j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> assignment(n);
  for (int j = 1; j <= n; ++j) assignment[match[j] - 1] = j - 1;
  return assignment;
}

/// Empirical 2-Wasserstein distance between equal-size point clouds: the
/// square root of the mean squared distance under the optimal matching.
inline double wasserstein2(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw std::invalid_argument("wasserstein2: sample sets differ in shape");
  if (a.rows() == 0) throw std::invalid_argument("wasserstein2: empty sample sets");
  const Index n = a.rows();
  const Vector an = a.rowwise().squaredNorm();
  const Vector bn = b.rowwise().squaredNorm();
  Matrix cost = -2.0 * a * b.transpose();
  cost.colwise() += an;
  cost.rowwise() += bn.transpose();
  cost = cost.cwiseMax(0.0);
  const auto assign = solve_assignment(cost);
  double total = 0.0;
  for (Index i = 0; i < n; ++i) total += (a.row(i) - b.row(assign[static_cast<std::size_t>(i)])).squaredNorm();
  return std::sqrt(total / static_cast<double>(n));
}

struct MetricsReport {
  double elbo = std::numeric_limits<double>::quiet_NaN();
  double elbo_se = std::numeric_limits<double>::quiet_NaN();
  double eubo = std::numeric_limits<double>::quiet_NaN();
  double eubo_se = std::numeric_limits<double>::quiet_NaN();
  double elbo_gap = std::numeric_limits<double>::quiet_NaN();
  double eubo_gap = std::numeric_limits<double>::quiet_NaN();
  double w2 = std::numeric_limits<double>::quiet_NaN();
  double logz_hat = 0.0;
  double log_partition = 0.0;
  double diverged_frac = 0.0;
  int n_samples = 0;
  std::uint64_t seed = 0;

  /// ELBO <= log Z <= EUBO within `k` combined standard errors.
  bool sandwich_holds(double k = 3.0) const {
    const double se = std::sqrt(elbo_se * elbo_se + eubo_se * eubo_se);
    const double slack = k * (std::isfinite(se) ? se : 0.0);
    return elbo <= log_partition + slack && log_partition <= eubo + slack && elbo <= eubo + slack;
  }
};

inline nlohmann::json finite_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(); }

inline nlohmann::json to_json(const MetricsReport& m) {
  return {{"elbo", finite_or_null(m.elbo)},         {"elbo_se", finite_or_null(m.elbo_se)},
          {"eubo", finite_or_null(m.eubo)},         {"eubo_se", finite_or_null(m.eubo_se)},
          {"elbo_gap", finite_or_null(m.elbo_gap)}, {"eubo_gap", finite_or_null(m.eubo_gap)},
          {"w2", finite_or_null(m.w2)},             {"logz_hat", finite_or_null(m.logz_hat)},
          {"log_partition", m.log_partition},       {"diverged_frac", m.diverged_frac},
          {"n_samples", m.n_samples},               {"seed", m.seed}};
}

struct EvalOptions {
  int n = 2048;
  std::uint64_t seed = 0;
  bool with_eubo = true;
  bool with_w2 = true;
  Matrix* samples_out = nullptr;
};

inline MetricsReport evaluate(const SamplerModel& model, const EnergySpec& energy, const Process& p,
                              const EvalOptions& opt) {
  MetricsReport r;
  r.n_samples = opt.n;
  r.seed = opt.seed;
  r.log_partition = log_partition(energy);
  r.logz_hat = model.params.at("logZ").value(0, 0);
  TrajectoryBatch fwd;
  const Estimate lo = elbo(model, energy, p, opt.n, opt.seed, &fwd);
  r.elbo = lo.mean;
  r.elbo_se = lo.se;
  r.diverged_frac = static_cast<double>(lo.n_diverged) / opt.n;
  r.elbo_gap = r.elbo - r.log_partition;
  if (opt.samples_out) *opt.samples_out = fwd.states.back();
  const Matrix gt = sample_ground_truth(energy, opt.n, stream_id(0xe0b0, opt.seed));
  if (opt.with_eubo) {
    const Estimate hi = eubo(model, energy, p, opt.n, opt.seed, &gt);
    r.eubo = hi.mean;
    r.eubo_se = hi.se;
    r.eubo_gap = r.eubo - r.log_partition;
  }
  if (opt.with_w2 && fwd.size() == opt.n) {
    const Matrix gt2 = sample_ground_truth(energy, opt.n, stream_id(0x3e2, opt.seed));
    r.w2 = wasserstein2(fwd.states.back(), gt2);
  }
  return r;
}

}  // namespace dsamp
