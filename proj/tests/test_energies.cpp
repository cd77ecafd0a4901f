#include "dsamp/energies.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

using namespace dsamp;

namespace {

const double kLog2Pi = std::log(2.0 * std::numbers::pi);

const std::vector<EnergyKind> kAllKinds = {
    EnergyKind::Gmm25,      EnergyKind::Gmm25SlightDistort, EnergyKind::Gmm25Distort,
    EnergyKind::Gmm125,     EnergyKind::Gmm40,              EnergyKind::FunnelEasy,
    EnergyKind::FunnelHard, EnergyKind::Manywell,           EnergyKind::ManywellDistorted};

// Plain mixture density, no stabilisation.
double naive_mixture_energy(const EnergySpec& s, const RowVector& x) {
  double acc = 0.0;
  for (const auto& c : s.components) {
    const Vector diff = x.transpose() - c.mean;
    const double q = diff.dot(c.cov.inverse() * diff);
    acc += std::exp(-0.5 * q) / std::sqrt(std::pow(2.0 * std::numbers::pi, s.dim) * c.cov.determinant());
  }
  return -std::log(acc / static_cast<double>(s.components.size()));
}

RowVector random_point(CounterRng& rng, const EnergySpec& s) {
  RowVector x(s.dim);
  const double scale = is_gmm(s.kind) ? (s.kind == EnergyKind::Gmm40 ? 30.0 : 8.0) : 1.5;
  for (int j = 0; j < s.dim; ++j) x(j) = scale * (2.0 * rng.uniform() - 1.0);
  return x;
}

double well_density(double x) { return std::exp(-x * x * x * x + 6.0 * x * x + 0.5 * x); }

}  // namespace

TEST(Energies, NamesRoundTrip) {
  for (auto k : kAllKinds) EXPECT_EQ(parse_energy_kind(energy_name(k)), k);
  EXPECT_EQ(parse_energy_kind("funnel-hard"), EnergyKind::FunnelHard);
  EXPECT_EQ(parse_energy_kind("manywell-distorted"), EnergyKind::ManywellDistorted);
  EXPECT_THROW(parse_energy_kind("banana"), EnergyError);
}

TEST(Energies, DimensionsMatchKind) {
  const std::map<EnergyKind, int> dims = {{EnergyKind::Gmm25, 2},      {EnergyKind::Gmm125, 3},
                                          {EnergyKind::Gmm40, 2},      {EnergyKind::FunnelHard, 10},
                                          {EnergyKind::Manywell, 32},  {EnergyKind::Gmm25Distort, 2}};
  for (auto [k, d] : dims) EXPECT_EQ(build_energy(k).dim, d);
}

TEST(Energies, Gmm25GridWithVariance03) {
  const auto s = build_energy(EnergyKind::Gmm25);
  ASSERT_EQ(s.components.size(), 25u);
  std::set<std::pair<double, double>> means;
  for (const auto& c : s.components) {
    EXPECT_LT((c.cov - 0.3 * Matrix::Identity(2, 2)).cwiseAbs().maxCoeff(), 1e-15);
    means.insert({c.mean(0), c.mean(1)});
  }
  for (double a : {-10.0, -5.0, 0.0, 5.0, 10.0})
    for (double b : {-10.0, -5.0, 0.0, 5.0, 10.0}) EXPECT_TRUE(means.count({a, b}));
  EXPECT_EQ(build_energy(EnergyKind::Gmm125).components.size(), 125u);
}

TEST(Energies, DistortedCovariancesArePositiveDefinite) {
  for (auto k : {EnergyKind::Gmm25SlightDistort, EnergyKind::Gmm25Distort}) {
    const auto s = build_energy(k, 42);
    bool any_distorted = false;
    for (const auto& c : s.components) {
      EXPECT_LT((c.cov - c.cov.transpose()).cwiseAbs().maxCoeff(), 1e-15);
      Eigen::SelfAdjointEigenSolver<Matrix> es(c.cov);
      EXPECT_GT(es.eigenvalues().minCoeff(), 0.0);
      any_distorted |= (c.cov - 0.3 * Matrix::Identity(2, 2)).norm() > 1e-3;
    }
    EXPECT_TRUE(any_distorted);
  }
}

TEST(Energies, ConstructionIsDeterministicInSeed) {
  for (auto k : {EnergyKind::Gmm25SlightDistort, EnergyKind::Gmm40, EnergyKind::ManywellDistorted}) {
    const auto a = build_energy(k, 42), b = build_energy(k, 42), c = build_energy(k, 7);
    RowVector x = RowVector::Constant(a.dim, 0.37);
    EXPECT_EQ(energy(a, x), energy(b, x));
    EXPECT_NE(energy(a, x), energy(c, x));
  }
}

TEST(Energies, Gmm40MeansInBox) {
  const auto s = build_energy(EnergyKind::Gmm40);
  ASSERT_EQ(s.components.size(), 40u);
  for (const auto& c : s.components) {
    EXPECT_LE(c.mean.cwiseAbs().maxCoeff(), 40.0);
    EXPECT_LT((c.cov - Matrix::Identity(2, 2)).norm(), 1e-15);
  }
}

TEST(Energies, ManywellDistortedCoefficientsInRange) {
  const auto s = build_energy(EnergyKind::ManywellDistorted);
  ASSERT_EQ(s.wells.size(), 16u);
  for (const auto& w : s.wells)
    for (double a : {w.a1, w.a2, w.a3, w.a4}) {
      EXPECT_GE(a, 0.75);
      EXPECT_LE(a, 1.25);
    }
}

TEST(Energies, FunnelEasyAtOrigin) {
  const auto s = build_energy(EnergyKind::FunnelEasy);
  EXPECT_NEAR(energy(s, RowVector::Zero(10)), 5.0 * kLog2Pi, 1e-12);
  EXPECT_NEAR(energy(s, RowVector::Zero(10)), 9.18939, 1e-5);
}

TEST(Energies, FunnelHardMatchesFactorisedDensity) {
  const auto s = build_energy(EnergyKind::FunnelHard);
  CounterRng rng(3, 0);
  for (int i = 0; i < 20; ++i) {
    RowVector x = random_point(rng, s);
    double lp = -0.5 * x(0) * x(0) / 9.0 - 0.5 * std::log(2.0 * std::numbers::pi * 9.0);
    for (int j = 1; j < 10; ++j) lp += -0.5 * x(j) * x(j) / std::exp(x(0)) - 0.5 * std::log(2.0 * std::numbers::pi * std::exp(x(0)));
    EXPECT_NEAR(energy(s, x), -lp, 1e-10);
  }
}

TEST(Energies, Gmm25AtOriginMatchesBruteForce) {
  const auto s = build_energy(EnergyKind::Gmm25);
  const RowVector zero = RowVector::Zero(2);
  EXPECT_NEAR(energy(s, zero), naive_mixture_energy(s, zero), 1e-12);
  // Only the central mode contributes at double precision.
  EXPECT_NEAR(energy(s, zero), std::log(25.0) + kLog2Pi + std::log(0.3), 1e-12);
}

TEST(Energies, MixturesMatchBruteForceAwayFromModes) {
  CounterRng rng(5, 0);
  for (auto k : {EnergyKind::Gmm25Distort, EnergyKind::Gmm125, EnergyKind::Gmm40}) {
    const auto s = build_energy(k);
    for (int i = 0; i < 20; ++i) {
      RowVector x = random_point(rng, s);
      const double ref = naive_mixture_energy(s, x);
      if (std::isfinite(ref)) {
        EXPECT_NEAR(energy(s, x), ref, 1e-9 * std::max(1.0, std::abs(ref)));
      }
    }
  }
}

TEST(Energies, MixtureIsStableFarFromModes) {
  const auto s = build_energy(EnergyKind::Gmm25);
  RowVector x(2);
  x << 300.0, -300.0;
  const double e = energy(s, x);
  EXPECT_TRUE(std::isfinite(e));
  EXPECT_GT(e, 1e5);
  EXPECT_TRUE(grad_energy(s, x).allFinite());
}

TEST(Energies, ManywellGradientAtOrigin) {
  const auto s = build_energy(EnergyKind::Manywell);
  const RowVector g = grad_energy(s, RowVector::Zero(32));
  EXPECT_DOUBLE_EQ(g(0), -0.5);
  EXPECT_DOUBLE_EQ(g(1), 0.0);
  EXPECT_DOUBLE_EQ(energy(s, RowVector::Zero(32)), 0.0);
}

TEST(Energies, GradientsMatchCentralDifferences) {
  CounterRng rng(9, 0);
  for (auto k : kAllKinds) {
    const auto s = build_energy(k);
    for (int i = 0; i < 100; ++i) {
      RowVector x = random_point(rng, s);
      const RowVector g = grad_energy(s, x);
      RowVector fd(s.dim);
      for (int j = 0; j < s.dim; ++j) {
        const double h = 1e-6 * std::max(1.0, std::abs(x(j)));
        RowVector xp = x, xm = x;
        xp(j) += h;
        xm(j) -= h;
        fd(j) = (energy(s, xp) - energy(s, xm)) / (2.0 * h);
      }
      const double rel = (g - fd).norm() / std::max(1.0, g.norm());
      EXPECT_LT(rel, 1e-5) << energy_name(k) << " at point " << i;
    }
  }
}

TEST(Energies, NonFiniteOrWrongSizeInputRejected) {
  const auto s = build_energy(EnergyKind::Gmm25);
  RowVector x(2);
  x << 0.0, std::nan("");
  EXPECT_THROW(energy(s, x), EnergyError);
  EXPECT_THROW(energy(s, RowVector::Zero(3)), EnergyError);
}

TEST(Energies, NormalisedTwoDimensionalPresetsIntegrateToOne) {
  for (auto k : {EnergyKind::Gmm25, EnergyKind::Gmm25Distort, EnergyKind::Gmm40}) {
    const auto s = build_energy(k);
    const double lim = k == EnergyKind::Gmm40 ? 48.0 : 15.0;
    const int n = k == EnergyKind::Gmm40 ? 800 : 400;
    const double h = 2.0 * lim / n;
    double acc = 0.0;
    RowVector x(2);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        x << -lim + (i + 0.5) * h, -lim + (j + 0.5) * h;
        acc += std::exp(-energy(s, x));
      }
    EXPECT_NEAR(acc * h * h, 1.0, 0.01) << energy_name(k);
  }
}

TEST(Energies, LogPartitionZeroForNormalisedPresets) {
  for (auto k : kAllKinds)
    if (!is_manywell(k)) {
      EXPECT_EQ(log_partition(build_energy(k)), 0.0);
    }
}

TEST(Energies, ManywellQuadratureRefines) {
  const WellCoeffs w;
  const double coarse = detail::well_log_mass(w, -8.0, 8.0, 1 << 12);
  const double fine = detail::well_log_mass(w, -8.0, 8.0, 1 << 14);
  EXPECT_NEAR(coarse, fine, 1e-6);
  const double lz = log_partition(build_energy(EnergyKind::Manywell));
  EXPECT_NEAR(lz, 16.0 * (fine + 0.5 * kLog2Pi), 1e-8);
}

TEST(GroundTruth, ShapesAndDeterminism) {
  for (auto k : kAllKinds) {
    const auto s = build_energy(k);
    const Matrix a = sample_ground_truth(s, 64, 11);
    EXPECT_EQ(a.rows(), 64);
    EXPECT_EQ(a.cols(), s.dim);
    EXPECT_TRUE(a.allFinite());
    EXPECT_EQ(a, sample_ground_truth(s, 64, 11));
    EXPECT_NE(a, sample_ground_truth(s, 64, 12));
  }
  EXPECT_THROW(sample_ground_truth(build_energy(EnergyKind::Gmm25), 0, 1), EnergyError);
}

TEST(GroundTruth, Gmm25MeanNearOrigin) {
  const Matrix x = sample_ground_truth(build_energy(EnergyKind::Gmm25), 100000, 1);
  for (int j = 0; j < 2; ++j) {
    const double m = x.col(j).mean();
    const double sd = std::sqrt((x.col(j).array() - m).square().mean());
    EXPECT_LT(std::abs(m), 3.0 * sd / std::sqrt(1e5));
  }
}

TEST(GroundTruth, FunnelEasyLeadingVariance) {
  const Matrix x = sample_ground_truth(build_energy(EnergyKind::FunnelEasy), 100000, 2);
  const double v = x.col(0).array().square().mean();
  // SE of a variance estimate of a unit normal is sqrt(2/n).
  EXPECT_NEAR(v, 1.0, 3.0 * std::sqrt(2.0 / 1e5));
}

TEST(GroundTruth, FunnelHardLeadingVariance) {
  const Matrix x = sample_ground_truth(build_energy(EnergyKind::FunnelHard), 100000, 3);
  EXPECT_NEAR(x.col(0).array().square().mean(), 9.0, 3.0 * 9.0 * std::sqrt(2.0 / 1e5));
}

TEST(GroundTruth, ManywellMarginalMatchesQuadrature) {
  const auto s = build_energy(EnergyKind::Manywell);
  const int n = 100000;
  const Matrix x = sample_ground_truth(s, n, 4);
  const int bins = 80;
  const double lo = -4.0, hi = 4.0, bw = (hi - lo) / bins;
  std::vector<double> counts(bins, 0.0);
  for (int r = 0; r < n; ++r) {
    const int b = std::clamp(static_cast<int>((x(r, 0) - lo) / bw), 0, bins - 1);
    counts[b] += 1.0;
  }
  // Bin masses by midpoint rule on a fine sub-grid.
  std::vector<double> mass(bins, 0.0);
  double total = 0.0;
  const int sub = 200;
  for (int b = 0; b < bins; ++b) {
    for (int k = 0; k < sub; ++k) mass[b] += well_density(lo + bw * (b + (k + 0.5) / sub));
    total += mass[b];
  }
  double tv = 0.0;
  for (int b = 0; b < bins; ++b) tv += std::abs(counts[b] / n - mass[b] / total);
  EXPECT_LT(0.5 * tv, 0.02);
  // Gaussian coordinate.
  EXPECT_NEAR(x.col(1).array().square().mean(), 1.0, 3.0 * std::sqrt(2.0 / n));
}
