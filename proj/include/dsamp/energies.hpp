#pragma once

#include "dsamp/grad/tensor.hpp"
#include "dsamp/rng.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numbers>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace dsamp {

using grad::Matrix;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

enum class EnergyKind {
  Gmm25,
  Gmm25SlightDistort,
  Gmm25Distort,
  Gmm125,
  Gmm40,
  FunnelEasy,
  FunnelHard,
  Manywell,
  ManywellDistorted,
  /// Isotropic normal N(0, v I); used for analytic checks and smoke runs.
  Gaussian,
};

class EnergyError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct NamedKind {
  std::string_view name;
  EnergyKind kind;
};

inline constexpr std::array<NamedKind, 10> kEnergyNames{{
    {"gmm25", EnergyKind::Gmm25},
    {"gmm25-slight-distort", EnergyKind::Gmm25SlightDistort},
    {"gmm25-distort", EnergyKind::Gmm25Distort},
    {"gmm125", EnergyKind::Gmm125},
    {"gmm40", EnergyKind::Gmm40},
    {"funnel-easy", EnergyKind::FunnelEasy},
    {"funnel-hard", EnergyKind::FunnelHard},
    {"manywell", EnergyKind::Manywell},
    {"manywell-distorted", EnergyKind::ManywellDistorted},
    {"gaussian", EnergyKind::Gaussian},
}};

inline EnergyKind parse_energy_kind(std::string_view name) {
  for (const auto& nk : kEnergyNames)
    if (nk.name == name) return nk.kind;
  throw EnergyError("unknown energy '" + std::string(name) + "'");
}

inline std::string_view energy_name(EnergyKind kind) {
  for (const auto& nk : kEnergyNames)
    if (nk.kind == kind) return nk.name;
  return "unknown";
}

inline bool is_gmm(EnergyKind k) {
  return k == EnergyKind::Gmm25 || k == EnergyKind::Gmm25SlightDistort || k == EnergyKind::Gmm25Distort ||
         k == EnergyKind::Gmm125 || k == EnergyKind::Gmm40;
}
inline bool is_funnel(EnergyKind k) { return k == EnergyKind::FunnelEasy || k == EnergyKind::FunnelHard; }
inline bool is_manywell(EnergyKind k) { return k == EnergyKind::Manywell || k == EnergyKind::ManywellDistorted; }

struct GaussianComponent {
  Vector mean;
  Matrix cov;
  Matrix precision;
  Matrix chol;  // lower factor, cov = L L^T
  double log_norm = 0.0;  // -0.5 (d log 2pi + log det cov)
};

/// Inverse-CDF table for one double-well coordinate.
struct WellGrid {
  std::vector<double> x;
  std::vector<double> cdf;
  double log_mass = 0.0;  // log of the 1-d integral of the unnormalised density
};

/// Coefficients of one double well: exp(-a1 x^4 + 6 a2 x^2 + 0.5 a3 x - 0.5 a4 y^2).
struct WellCoeffs {
  double a1 = 1.0, a2 = 1.0, a3 = 1.0, a4 = 1.0;
};

struct EnergySpec {
  EnergyKind kind = EnergyKind::Gmm25;
  int dim = 2;
  std::uint64_t construction_seed = 42;
  std::vector<GaussianComponent> components;  // equal weights
  double funnel_var0 = 1.0;
  std::vector<WellCoeffs> wells;
  std::vector<WellGrid> well_grids;  // one per well
  double gaussian_var = 1.0;
};

namespace detail {

inline GaussianComponent make_component(Vector mean, Matrix cov) {
  GaussianComponent c;
  const int d = static_cast<int>(mean.size());
  Eigen::LLT<Matrix> llt(cov);
  if (llt.info() != Eigen::Success) throw EnergyError("covariance is not positive definite");
  c.chol = llt.matrixL();
  c.precision = llt.solve(Matrix::Identity(d, d));
  const double logdet = 2.0 * c.chol.diagonal().array().log().sum();
  c.log_norm = -0.5 * (d * std::log(2.0 * std::numbers::pi) + logdet);
  c.mean = std::move(mean);
  c.cov = std::move(cov);
  return c;
}

inline double well_log_density(const WellCoeffs& w, double x) {
  const double x2 = x * x;
  return -w.a1 * x2 * x2 + 6.0 * w.a2 * x2 + 0.5 * w.a3 * x;
}

/// Composite Simpson on [lo, hi] with n (even) intervals of the 1-d well
/// density, shifted by its maximum for stability. Returns log integral.
inline double well_log_mass(const WellCoeffs& w, double lo, double hi, int n) {
  const double h = (hi - lo) / n;
  double mx = -INFINITY;
  for (int i = 0; i <= n; ++i) mx = std::max(mx, well_log_density(w, lo + i * h));
  double acc = 0.0;
  for (int i = 0; i <= n; ++i) {
    const double wgt = (i == 0 || i == n) ? 1.0 : (i % 2 ? 4.0 : 2.0);
    acc += wgt * std::exp(well_log_density(w, lo + i * h) - mx);
  }
  return mx + std::log(acc * h / 3.0);
}

inline constexpr double kWellGridLo = -4.0;
inline constexpr double kWellGridHi = 4.0;
inline constexpr int kWellGridKnots = 8192;

inline WellGrid make_well_grid(const WellCoeffs& w) {
  WellGrid g;
  const int n = kWellGridKnots;
  g.x.resize(n);
  g.cdf.resize(n);
  const double h = (kWellGridHi - kWellGridLo) / (n - 1);
  std::vector<double> dens(n);
  double mx = -INFINITY;
  for (int i = 0; i < n; ++i) {
    g.x[i] = kWellGridLo + i * h;
    dens[i] = well_log_density(w, g.x[i]);
    mx = std::max(mx, dens[i]);
  }
  for (auto& v : dens) v = std::exp(v - mx);
  g.cdf[0] = 0.0;
  for (int i = 1; i < n; ++i) g.cdf[i] = g.cdf[i - 1] + 0.5 * (dens[i] + dens[i - 1]) * h;
  const double total = g.cdf[n - 1];
  for (auto& v : g.cdf) v /= total;
  g.log_mass = well_log_mass(w, -8.0, 8.0, 1 << 16);
  return g;
}

inline double inverse_cdf(const WellGrid& g, double u) {
  auto it = std::upper_bound(g.cdf.begin(), g.cdf.end(), u);
  if (it == g.cdf.begin()) return g.x.front();
  if (it == g.cdf.end()) return g.x.back();
  const std::size_t i = static_cast<std::size_t>(it - g.cdf.begin());
  const double c0 = g.cdf[i - 1], c1 = g.cdf[i];
  const double frac = c1 > c0 ? (u - c0) / (c1 - c0) : 0.0;
  return g.x[i - 1] + frac * (g.x[i] - g.x[i - 1]);
}

inline void grid_mixture(EnergySpec& s, int dim, double var) {
  const std::array<double, 5> axis{-10.0, -5.0, 0.0, 5.0, 10.0};
  const int n = static_cast<int>(std::pow(5, dim));
  for (int k = 0; k < n; ++k) {
    Vector mu(dim);
    int rem = k;
    for (int j = dim - 1; j >= 0; --j) {
      mu(j) = axis[rem % 5];
      rem /= 5;
    }
    s.components.push_back(make_component(mu, var * Matrix::Identity(dim, dim)));
  }
}

}  // namespace detail

/// Builds one of the benchmark targets. The construction seed drives every
/// random draw in the definition (distortions, 40-mode means, well
/// coefficients); the same seed always yields the same parameters.
inline EnergySpec build_energy(EnergyKind kind, std::uint64_t construction_seed = 42) {
  EnergySpec s;
  s.kind = kind;
  s.construction_seed = construction_seed;
  switch (kind) {
    case EnergyKind::Gmm25:
      s.dim = 2;
      detail::grid_mixture(s, 2, 0.3);
      break;
    case EnergyKind::Gmm25SlightDistort:
    case EnergyKind::Gmm25Distort: {
      s.dim = 2;
      const double d = kind == EnergyKind::Gmm25SlightDistort ? 0.05 : 0.1;
      detail::grid_mixture(s, 2, 0.3);
      CounterRng rng(construction_seed, stream_id(0xd157, 0));
      for (auto& c : s.components) {
        Matrix a(2, 2);
        a << std::sqrt(0.3) + d * rng.normal(), d * rng.normal(), d * rng.normal(), std::sqrt(0.3) + d * rng.normal();
        c = detail::make_component(c.mean, a.transpose() * a);
      }
      break;
    }
    case EnergyKind::Gmm125:
      s.dim = 3;
      detail::grid_mixture(s, 3, 0.3);
      break;
    case EnergyKind::Gmm40: {
      s.dim = 2;
      CounterRng rng(construction_seed, stream_id(0x40, 0));
      for (int k = 0; k < 40; ++k) {
        Vector mu(2);
        mu(0) = rng.uniform(-40.0, 40.0);
        mu(1) = rng.uniform(-40.0, 40.0);
        s.components.push_back(detail::make_component(mu, Matrix::Identity(2, 2)));
      }
      break;
    }
    case EnergyKind::FunnelEasy:
    case EnergyKind::FunnelHard:
      s.dim = 10;
      s.funnel_var0 = kind == EnergyKind::FunnelEasy ? 1.0 : 9.0;
      break;
    case EnergyKind::Manywell:
    case EnergyKind::ManywellDistorted: {
      s.dim = 32;
      CounterRng rng(construction_seed, stream_id(0x3e11, 0));
      for (int i = 0; i < 16; ++i) {
        WellCoeffs w;
        if (kind == EnergyKind::ManywellDistorted) {
          w.a1 = rng.uniform(0.75, 1.25);
          w.a2 = rng.uniform(0.75, 1.25);
          w.a3 = rng.uniform(0.75, 1.25);
          w.a4 = rng.uniform(0.75, 1.25);
        }
        s.wells.push_back(w);
      }
      if (kind == EnergyKind::Manywell) {
        s.well_grids.assign(16, detail::make_well_grid(s.wells[0]));
      } else {
        for (const auto& w : s.wells) s.well_grids.push_back(detail::make_well_grid(w));
      }
      break;
    }
    case EnergyKind::Gaussian:
      s.dim = 1;
      s.gaussian_var = 1.0;
      break;
  }
  return s;
}

inline EnergySpec build_energy(std::string_view name, std::uint64_t construction_seed = 42) {
  return build_energy(parse_energy_kind(name), construction_seed);
}

inline EnergySpec make_gaussian_energy(int dim, double var) {
  EnergySpec s;
  s.kind = EnergyKind::Gaussian;
  s.dim = dim;
  s.gaussian_var = var;
  return s;
}

namespace detail {
inline void check_point(const EnergySpec& s, const Eigen::Ref<const RowVector>& x) {
  if (x.size() != s.dim) throw EnergyError("energy: point has wrong dimension");
  if (!x.allFinite()) throw EnergyError("energy: non-finite input");
}

inline constexpr int kMaxMixtureDim = 3;
inline constexpr std::size_t kMaxComponents = 125;

// Allocation-free: mixtures here live in at most three dimensions.
inline double mixture_energy(const EnergySpec& s, const Eigen::Ref<const RowVector>& x, RowVector* grad) {
  const std::size_t n = s.components.size();
  const int d = s.dim;
  std::array<double, kMaxComponents> lp;
  std::array<std::array<double, kMaxMixtureDim>, kMaxComponents> pd;  // P (x - mu)
  double mx = -INFINITY;
  for (std::size_t k = 0; k < n; ++k) {
    const auto& c = s.components[k];
    std::array<double, kMaxMixtureDim> diff{};
    for (int j = 0; j < d; ++j) diff[j] = x(j) - c.mean(j);
    double q = 0.0;
    for (int i = 0; i < d; ++i) {
      double acc = 0.0;
      for (int j = 0; j < d; ++j) acc += c.precision(i, j) * diff[j];
      pd[k][i] = acc;
      q += diff[i] * acc;
    }
    lp[k] = c.log_norm - 0.5 * q;
    mx = std::max(mx, lp[k]);
  }
  double acc = 0.0;
  for (std::size_t k = 0; k < n; ++k) acc += std::exp(lp[k] - mx);
  const double log_mix = mx + std::log(acc) - std::log(static_cast<double>(n));
  if (grad) {
    grad->setZero(d);
    for (std::size_t k = 0; k < n; ++k) {
      const double resp = std::exp(lp[k] - mx) / acc;
      if (resp == 0.0) continue;
      for (int j = 0; j < d; ++j) (*grad)(j) += resp * pd[k][j];
    }
  }
  return -log_mix;
}
}  // namespace detail

/// Negative log unnormalised density at a single point.
inline double energy(const EnergySpec& s, const Eigen::Ref<const RowVector>& x, RowVector* grad = nullptr) {
  detail::check_point(s, x);
  const double log2pi = std::log(2.0 * std::numbers::pi);
  switch (s.kind) {
    case EnergyKind::Gaussian: {
      if (grad) *grad = x / s.gaussian_var;
      return 0.5 * x.squaredNorm() / s.gaussian_var + 0.5 * s.dim * (log2pi + std::log(s.gaussian_var));
    }
    case EnergyKind::FunnelEasy:
    case EnergyKind::FunnelHard: {
      const double x0 = x(0);
      const double v0 = s.funnel_var0;
      const double inv = std::exp(-x0);
      const double tail_sq = x.tail(s.dim - 1).squaredNorm();
      const int m = s.dim - 1;
      const double e = 0.5 * x0 * x0 / v0 + 0.5 * (log2pi + std::log(v0)) + 0.5 * tail_sq * inv +
                       0.5 * m * (x0 + log2pi);
      if (grad) {
        grad->resize(s.dim);
        (*grad)(0) = x0 / v0 - 0.5 * tail_sq * inv + 0.5 * m;
        grad->tail(m) = x.tail(m) * inv;
      }
      return e;
    }
    case EnergyKind::Manywell:
    case EnergyKind::ManywellDistorted: {
      double e = 0.0;
      if (grad) grad->resize(s.dim);
      for (int i = 0; i < 16; ++i) {
        const auto& w = s.wells[i];
        const double a = x(2 * i), b = x(2 * i + 1);
        e += w.a1 * a * a * a * a - 6.0 * w.a2 * a * a - 0.5 * w.a3 * a + 0.5 * w.a4 * b * b;
        if (grad) {
          (*grad)(2 * i) = 4.0 * w.a1 * a * a * a - 12.0 * w.a2 * a - 0.5 * w.a3;
          (*grad)(2 * i + 1) = w.a4 * b;
        }
      }
      return e;
    }
    default:
      return detail::mixture_energy(s, x, grad);
  }
}

inline RowVector grad_energy(const EnergySpec& s, const Eigen::Ref<const RowVector>& x) {
  RowVector g;
  energy(s, x, &g);
  return g;
}

/// Row-wise energies of an n x dim matrix.
inline Vector energy_rows(const EnergySpec& s, const Matrix& x) {
  Vector out(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) out(r) = energy(s, x.row(r));
  return out;
}

/// Energy as a tape op (n x dim -> n x 1) whose gradient is grad_energy.
inline grad::Tensor energy_op(const EnergySpec& s, const grad::Tensor& x) {
  const EnergySpec* sp = &s;
  return grad::rowwise_scalar(
      x, [sp](const auto& row) { return energy(*sp, row); },
      [sp](const auto& row, RowVector& out) { energy(*sp, row, &out); });
}

/// Reference log-partition: 0 for normalised targets, well quadrature for
/// the many-well family.
inline double log_partition(const EnergySpec& s) {
  if (!is_manywell(s.kind)) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < s.wells.size(); ++i)
    total += s.well_grids[i].log_mass + 0.5 * std::log(2.0 * std::numbers::pi / s.wells[i].a4);
  return total;
}

/// Exact (mixtures, funnels, gaussian) or grid inverse-CDF (many-well)
/// samples from the normalised target.
inline Matrix sample_ground_truth(const EnergySpec& s, int n, std::uint64_t seed) {
  if (n < 1) throw EnergyError("sample_ground_truth: n must be >= 1");
  CounterRng rng(seed, stream_id(0x67, static_cast<std::uint64_t>(s.kind)));
  Matrix out(n, s.dim);
  for (int r = 0; r < n; ++r) {
    switch (s.kind) {
      case EnergyKind::Gaussian:
        for (int j = 0; j < s.dim; ++j) out(r, j) = std::sqrt(s.gaussian_var) * rng.normal();
        break;
      case EnergyKind::FunnelEasy:
      case EnergyKind::FunnelHard: {
        const double x0 = std::sqrt(s.funnel_var0) * rng.normal();
        out(r, 0) = x0;
        const double sd = std::exp(0.5 * x0);
        for (int j = 1; j < s.dim; ++j) out(r, j) = sd * rng.normal();
        break;
      }
      case EnergyKind::Manywell:
      case EnergyKind::ManywellDistorted:
        for (int i = 0; i < 16; ++i) {
          out(r, 2 * i) = detail::inverse_cdf(s.well_grids[i], rng.uniform());
          out(r, 2 * i + 1) = rng.normal() / std::sqrt(s.wells[i].a4);
        }
        break;
      default: {
        const auto& c = s.components[rng.below(s.components.size())];
        Vector z(s.dim);
        for (int j = 0; j < s.dim; ++j) z(j) = rng.normal();
        out.row(r) = (c.mean + c.chol * z).transpose();
        break;
      }
    }
  }
  return out;
}

}  // namespace dsamp
