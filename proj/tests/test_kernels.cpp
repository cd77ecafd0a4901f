#include "dsamp/grad/finite_diff.hpp"
#include "dsamp/kernels.hpp"
#include "dsamp/soft_rl.hpp"
#include "test_helpers.hpp"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <cmath>
#include <numbers>
#include <sstream>

using namespace dsamp;
using dsamp::testing::process;
using dsamp::testing::random_matrix;
using dsamp::testing::randomize;
using dsamp::testing::tiny_net;

namespace {

double normal_logpdf(double x, double mean, double var) {
  return -0.5 * (x - mean) * (x - mean) / var - 0.5 * std::log(2.0 * std::numbers::pi * var);
}

}  // namespace

// ---------------------------------------------------------------------------
// Policy network

TEST(PolicyNet, ZeroInitHeadsAreIdentity) {
  for (bool shared : {true, false}) {
    NetConfig c;
    c.dim = 3;
    c.shared_backbone = shared;
    const auto m = make_model(c, 1);
    const Matrix x = random_matrix(2, 7, 3, 4.0);
    for (double t : {0.0, 0.3, 1.0}) {
      const HeadValues h = eval_heads(m, m.params, x, t);
      EXPECT_EQ(h.drift, Matrix::Zero(7, 3));
      EXPECT_EQ(h.gamma, Matrix::Ones(7, 3));
      EXPECT_EQ(h.alpha, Matrix::Ones(7, 3));
      EXPECT_EQ(h.beta, Matrix::Ones(7, 3));
    }
    EXPECT_EQ(m.params.at("logZ").value(0, 0), 0.0);
  }
}

TEST(PolicyNet, OutputsStayInsideBoundsForAdversarialInputs) {
  NetConfig c = tiny_net(2);
  auto m = make_model(c, 3);
  randomize(m, 4, 1e3);
  const Matrix x = random_matrix(5, 50, 2, 1e6);
  const HeadValues h = eval_heads(m, m.params, x, 0.7);
  ASSERT_TRUE(h.drift.allFinite() && h.gamma.allFinite() && h.alpha.allFinite() && h.beta.allFinite());
  EXPECT_LE(h.drift.cwiseAbs().maxCoeff(), 1.0 / c.out_clip);
  EXPECT_GE(h.gamma.minCoeff(), std::exp(-c.c1));
  EXPECT_LE(h.gamma.maxCoeff(), std::exp(c.c1));
  for (const Matrix* v : {&h.alpha, &h.beta}) {
    EXPECT_GE(v->minCoeff(), 1.0 - c.c2);
    EXPECT_LE(v->maxCoeff(), 1.0 + c.c2);
  }
  EXPECT_GT(h.beta.minCoeff(), 0.0);
  EXPECT_GT(h.gamma.minCoeff(), 0.0);
}

TEST(PolicyNet, InvalidConfigRejected) {
  NetConfig c;
  c.c2 = 1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.c1 = 1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.t_dim = 5;
  EXPECT_THROW(make_model(c, 0), std::invalid_argument);
}

TEST(PolicyNet, SlotOwnership) {
  const auto shared = make_model(tiny_net(2, true, true), 0);
  auto has = [](const std::vector<std::string>& v, const std::string& s) {
    return std::find(v.begin(), v.end(), s) != v.end();
  };
  const auto g = shared.gen_slot_names(), d = shared.destr_slot_names();
  EXPECT_TRUE(has(g, "head.fwd.W") && !has(g, "head.bwd.W") && !has(g, "logZ"));
  EXPECT_TRUE(has(d, "head.bwd.W") && !has(d, "head.fwd.W") && !has(d, "logZ"));
  EXPECT_TRUE(has(g, "backbone.0.Ws") && has(d, "backbone.0.Ws"));

  const auto split = make_model(tiny_net(2, true, false), 0);
  const auto g2 = split.gen_slot_names(), d2 = split.destr_slot_names();
  EXPECT_TRUE(has(g2, "gen.backbone.0.Ws") && !has(g2, "destr.backbone.0.Ws"));
  EXPECT_TRUE(has(d2, "destr.backbone.0.Ws") && !has(d2, "gen.backbone.0.Ws"));
}

TEST(PolicyNet, TimeFeaturesAtZero) {
  const double t[2] = {0.0, 0.5};
  const Matrix f = time_features(t, 8);
  for (int k = 0; k < 4; ++k) {
    EXPECT_EQ(f(0, k), 0.0);
    EXPECT_EQ(f(0, 4 + k), 1.0);
  }
  EXPECT_DOUBLE_EQ(f(1, 0), std::sin(0.5));
  EXPECT_DOUBLE_EQ(f(1, 3), std::sin(1e4 * 0.5));
}

TEST(PolicyNet, InitIsDeterministicInSeed) {
  const auto a = make_model(tiny_net(2), 5), b = make_model(tiny_net(2), 5), c = make_model(tiny_net(2), 6);
  EXPECT_EQ(a.params.flatten(), b.params.flatten());
  EXPECT_NE(a.params.flatten(), c.params.flatten());
}

TEST(PolicyNet, HeadMapsPassFiniteDifferences) {
  for (bool shared : {true, false}) {
    auto m = make_model(tiny_net(2, true, shared), 7);
    randomize(m, 8, 0.4);
    const Matrix x = random_matrix(9, 6, 2);
    const double times[2] = {0.2, 0.9};
    const Matrix w = random_matrix(10, 6, 2);
    using Pick = std::function<Tensor(const ForwardHead&, const BackwardHead&)>;
    const std::vector<std::pair<std::string, Pick>> picks = {
        {"drift", [](const ForwardHead& f, const BackwardHead&) { return f.drift; }},
        {"gamma", [](const ForwardHead& f, const BackwardHead&) { return f.gamma; }},
        {"alpha", [](const ForwardHead&, const BackwardHead& b) { return b.alpha; }},
        {"beta", [](const ForwardHead&, const BackwardHead& b) { return b.beta; }},
    };
    for (const auto& [name, pick] : picks) {
      auto fn = [&](Tape& t, std::span<const Tensor> bound) {
        NetEval net(m, t, std::vector<Tensor>(bound.begin(), bound.end()));
        auto [f, b] = net.heads(t.constant(x), times);
        return grad::sum(grad::mul(pick(f, b), t.constant(w)));
      };
      const auto rep = grad::finite_diff_check(fn, m.params, 1e-5);
      EXPECT_TRUE(rep.passed(1e-4)) << name << " shared=" << shared << ": " << rep.max_rel_error << " at "
                                    << rep.worst_param;
    }
  }
}

// ---------------------------------------------------------------------------
// Kernels

TEST(Kernels, ForwardExample) {
  const auto m = make_model(tiny_net(1), 0);
  const auto k = fwd_params(m, m.params, Matrix::Constant(1, 1, 1.0), 0.0, 0.5, 2.0);
  EXPECT_EQ(k.mean(0, 0), 1.0);
  EXPECT_EQ(k.var(0, 0), 1.0);
  EXPECT_THROW(fwd_params(m, m.params, Matrix::Ones(1, 1), 0.0, 0.0, 2.0), grad::ContractViolation);
}

TEST(Kernels, BackwardExampleAndDirac) {
  const auto m = make_model(tiny_net(1), 0);
  const auto k = bwd_params(m, m.params, Matrix::Constant(1, 1, 2.0), 1.0, 0.5, 3.0);
  EXPECT_DOUBLE_EQ(k.mean(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(k.var(0, 0), 0.5 * 3.0 * 0.5);
  const auto d = bwd_params(m, m.params, Matrix::Constant(1, 1, 2.0), 0.25, 0.25, 3.0);
  EXPECT_EQ(d.mean(0, 0), 0.0);
  EXPECT_EQ(d.var(0, 0), 0.0);
  EXPECT_THROW(bwd_params(m, m.params, Matrix::Ones(1, 1), 0.5, 0.75, 3.0), grad::ContractViolation);
}

TEST(Kernels, ZeroInitReproducesFixedKernels) {
  for (auto kind : {ScheduleKind::uniform, ScheduleKind::harmonic}) {
    NetConfig c;
    c.dim = 2;
    const auto m = make_model(c, 11);
    const Process p = process(kind, 7, 5.0);
    const Matrix x = random_matrix(12, 9, 2, 3.0);
    for (int i = 0; i < p.steps(); ++i) {
      const double t = p.schedule.times[i], dt = p.schedule.widths[i];
      const auto f = fwd_params(m, m.params, x, t, dt, p.sigma2);
      EXPECT_LT((f.mean - x).cwiseAbs().maxCoeff(), 1e-12);
      EXPECT_LT((f.var.array() - p.sigma2 * dt).abs().maxCoeff(), 1e-12);
      if (i >= 1) {
        const double tn = p.schedule.times[i + 1];
        const auto b = bwd_params(m, m.params, x, tn, dt, p.sigma2);
        const double r = t / tn;
        EXPECT_LT((b.mean - r * x).cwiseAbs().maxCoeff(), 1e-12);
        EXPECT_LT((b.var.array() - r * p.sigma2 * dt).abs().maxCoeff(), 1e-12);
      }
    }
  }
}

TEST(Kernels, FixedBackwardModeIgnoresHeadWeights) {
  auto m = make_model(tiny_net(2, false), 0);
  randomize(m, 3, 2.0);
  const auto b = bwd_params(m, m.params, Matrix::Constant(2, 2, 1.5), 1.0, 0.5, 1.0);
  EXPECT_LT((b.mean.array() - 0.75).abs().maxCoeff(), 1e-15);
  EXPECT_LT((b.var.array() - 0.25).abs().maxCoeff(), 1e-15);
}

TEST(Kernels, NonFiniteParametersRaiseDivergence) {
  auto m = make_model(tiny_net(1), 0);
  m.params.at("head.fwd.b").value(0, 0) = std::nan("");
  EXPECT_THROW(fwd_params(m, m.params, Matrix::Ones(1, 1), 0.0, 0.5, 1.0), DivergenceError);
}

TEST(Sampling, ForwardShapesAndDeterminism) {
  const auto m = make_model(tiny_net(2), 0);
  const auto e = build_energy(EnergyKind::Gmm25);
  const Process p = process(ScheduleKind::uniform, 4, 1.0);
  const auto a = sample_forward(m, m.params, e, p, 16, 3);
  const auto b = sample_forward(m, m.params, e, p, 16, 3);
  ASSERT_EQ(a.size(), 16);
  ASSERT_EQ(a.steps(), 4);
  EXPECT_EQ(a.states[0], Matrix::Zero(16, 2));
  EXPECT_EQ(a.stacked(), b.stacked());
  EXPECT_EQ(a.log_pf, b.log_pf);
  EXPECT_EQ(a.log_pb.col(0), Vector::Zero(16));
  EXPECT_NE(a.stacked(), sample_forward(m, m.params, e, p, 16, 4).stacked());
  EXPECT_EQ(a.noise.size(), 4u);
}

TEST(Sampling, ExplorationKeepsModelLogDensities) {
  auto m = make_model(tiny_net(2), 0);
  randomize(m, 21, 0.3);
  const auto e = build_energy(EnergyKind::Gmm25);
  const Process p = process(ScheduleKind::harmonic, 3, 5.0);
  SampleOptions so;
  so.explore = 1.5;
  const auto b = sample_forward(m, m.params, e, p, 12, 5, so);
  EXPECT_EQ(b.provenance, Provenance::explore);
  const auto on = sample_forward(m, m.params, e, p, 12, 5);
  EXPECT_NE(on.states.back(), b.states.back());
  for (int i = 0; i < p.steps(); ++i) {
    const auto k = fwd_params(m, m.params, b.states[i], p.schedule.times[i], p.schedule.widths[i], p.sigma2);
    const Vector lp = gaussian_logpdf_rows(b.states[i + 1], k.mean, k.var);
    EXPECT_LT((lp - b.log_pf.col(i)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Sampling, RecordedDensitiesMatchSingleStepKernels) {
  for (bool shared : {true, false}) {
    auto m = make_model(tiny_net(3, true, shared), 0);
    randomize(m, 22, 0.3);
    const auto e = build_energy(EnergyKind::Gmm125);
    const Process p = process(ScheduleKind::uniform, 4, 2.0);
    const auto b = sample_forward(m, m.params, e, p, 5, 6);
    for (int i = 1; i < p.steps(); ++i) {
      const auto k = bwd_params(m, m.params, b.states[i + 1], p.schedule.times[i + 1], p.schedule.widths[i], p.sigma2);
      const Vector lb = gaussian_logpdf_rows(b.states[i], k.mean, k.var);
      EXPECT_LT((lb - b.log_pb.col(i)).cwiseAbs().maxCoeff(), 1e-10);
    }
    EXPECT_LT((b.energy - energy_rows(e, b.states.back())).cwiseAbs().maxCoeff(), 1e-15);
    TrajectoryBatch copy = b;
    evaluate_path(m, m.params, m.params, e, p, copy);
    EXPECT_LT((copy.log_pf - b.log_pf).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_LT((copy.log_pb - b.log_pb).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(Sampling, ZeroInitTerminalVarianceIsBrownian) {
  NetConfig c;
  c.dim = 2;
  const auto m = make_model(c, 0);
  const auto e = build_energy(EnergyKind::Gmm25);
  const double sigma2 = 5.0;
  const Process p = process(ScheduleKind::harmonic, 2, sigma2);
  const int n = 40000;
  SampleOptions so;
  so.forward_only = true;
  const auto b = sample_forward(m, m.params, e, p, n, 7, so);
  // Var(X_{t_1}) = sigma^2 t_1 and Var(X_1) = sigma^2.
  for (int i : {1, 2}) {
    const double want = sigma2 * p.schedule.times[i];
    const double v = b.states[i].array().square().mean();
    EXPECT_NEAR(v, want, 4.0 * want * std::sqrt(2.0 / (2.0 * n)));
  }
}

TEST(Sampling, ZeroInitBackwardIsBrownianBridge) {
  NetConfig c;
  c.dim = 1;
  const auto m = make_model(c, 0);
  const auto e = make_gaussian_energy(1, 1.0);
  const double sigma2 = 2.0;
  const Process p = process(ScheduleKind::uniform, 4, sigma2);
  const int n = 40000;
  const double x1 = 3.0;
  const auto b = sample_backward(m, m.params, e, Matrix::Constant(n, 1, x1), p, 8);
  ASSERT_EQ(b.size(), n);
  for (int i = 1; i < 4; ++i) {
    const double t = p.schedule.times[i];
    const double mean = b.states[i].mean();
    const double var = (b.states[i].array() - mean).square().mean();
    const double want_var = sigma2 * t * (1.0 - t);
    EXPECT_NEAR(mean, t * x1, 4.0 * std::sqrt(want_var / n));
    EXPECT_NEAR(var, want_var, 4.0 * want_var * std::sqrt(2.0 / n));
  }
}

TEST(Sampling, SingleStepBackwardTrajectory) {
  auto m = make_model(tiny_net(2), 0);
  randomize(m, 30, 0.3);
  const auto e = build_energy(EnergyKind::Gmm25);
  const Process p = process(ScheduleKind::uniform, 1, 3.0);
  const Matrix x1 = random_matrix(31, 4, 2);
  const auto b = sample_backward(m, m.params, e, x1, p, 1);
  ASSERT_EQ(b.steps(), 1);
  EXPECT_EQ(b.states[0], Matrix::Zero(4, 2));
  EXPECT_EQ(b.states[1], x1);
  EXPECT_EQ(b.log_pb, Matrix::Zero(4, 1));
  const auto k = fwd_params(m, m.params, Matrix::Zero(4, 2), 0.0, 1.0, 3.0);
  EXPECT_LT((gaussian_logpdf_rows(x1, k.mean, k.var) - b.log_pf.col(0)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Sampling, BackwardRejectsBadTerminalStates) {
  const auto m = make_model(tiny_net(2), 0);
  const auto e = build_energy(EnergyKind::Gmm25);
  const Process p = process(ScheduleKind::uniform, 2, 1.0);
  Matrix bad = Matrix::Zero(2, 2);
  bad(1, 1) = INFINITY;
  EXPECT_THROW(sample_backward(m, m.params, e, bad, p, 0), grad::ContractViolation);
  EXPECT_THROW(sample_backward(m, m.params, e, Matrix::Zero(2, 3), p, 0), grad::ContractViolation);
}

TEST(Sampling, DivergedRowsAreDroppedAndCounted) {
  TrajectoryBatch b;
  b.states = {Matrix::Zero(3, 1), Matrix::Ones(3, 1)};
  b.states[1](1, 0) = std::nan("");
  b.log_pf = Matrix::Zero(3, 1);
  b.log_pb = Matrix::Zero(3, 1);
  b.energy = Vector::Zero(3);
  detail::drop_diverged(b);
  EXPECT_EQ(b.size(), 2);
  EXPECT_EQ(b.n_diverged, 1);
  EXPECT_NEAR(b.diverged_fraction(), 1.0 / 3.0, 1e-15);
}

TEST(Trajectories, BatchRoundTripAndDump) {
  auto m = make_model(tiny_net(2), 0);
  const auto e = build_energy(EnergyKind::Gmm25);
  const Process p = process(ScheduleKind::uniform, 3, 1.0);
  const auto b = sample_forward(m, m.params, e, p, 4, 2);
  std::vector<Trajectory> ts;
  for (int r = 0; r < b.size(); ++r) ts.push_back(b.get(r));
  const auto back = TrajectoryBatch::from(ts);
  EXPECT_EQ(back.stacked(), b.stacked());
  EXPECT_EQ(back.log_pf, b.log_pf);
  EXPECT_EQ(log_ratio(back, 0.3), log_ratio(b, 0.3));
  EXPECT_DOUBLE_EQ(log_ratio(ts[1], 0.3), log_ratio(b, 0.3)(1));

  std::ostringstream os;
  dump_trajectories(os, b);
  std::istringstream is(os.str());
  std::string line;
  int count = 0;
  while (std::getline(is, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j["states"].size(), 4u);
    EXPECT_EQ(j["provenance"], "on-policy");
    ++count;
  }
  EXPECT_EQ(count, 4);
}

// Straightforward per-trajectory log-ratio of the fixed reference process in
// one dimension, without the network or batching.
TEST(Sampling, ZeroInitLogRatioMatchesDirectComputation) {
  NetConfig c;
  c.dim = 1;
  const auto m = make_model(c, 0);
  const auto e = make_gaussian_energy(1, 1.0);
  for (int T : {1, 2, 3}) {
    const double sigma2 = 1.7;
    const Process p = process(ScheduleKind::harmonic, T, sigma2);
    const auto b = sample_forward(m, m.params, e, p, 2000, 40 + T);
    const auto& ts = p.schedule.times;
    double mean_ratio = 0.0;
    for (int r = 0; r < b.size(); ++r) {
      double lr = 0.5 * b.states[T](r, 0) * b.states[T](r, 0) + 0.5 * std::log(2.0 * std::numbers::pi);
      for (int i = 0; i < T; ++i) lr += normal_logpdf(b.states[i + 1](r, 0), b.states[i](r, 0), sigma2 * (ts[i + 1] - ts[i]));
      for (int i = 1; i < T; ++i) {
        const double ratio = ts[i] / ts[i + 1];
        lr -= normal_logpdf(b.states[i](r, 0), ratio * b.states[i + 1](r, 0), ratio * sigma2 * (ts[i + 1] - ts[i]));
      }
      EXPECT_NEAR(log_ratio(b, 0.0)(r), lr, 1e-10);
      mean_ratio += lr / b.size();
    }
    // -E[log ratio] is an ELBO on log Z = 0.
    EXPECT_GE(mean_ratio, 0.0);
  }
}

// ---------------------------------------------------------------------------
// Soft-RL view

TEST(SoftRl, SoftReturnEqualsNegativeLogRatio) {
  for (int d : {1, 3})
    for (int T : {1, 2, 3})
      for (bool shared : {true, false}) {
        auto m = make_model(tiny_net(d, true, shared), static_cast<std::uint64_t>(d * 10 + T));
        randomize(m, static_cast<std::uint64_t>(d * 100 + T), 0.4);
        const auto e = d == 1 ? make_gaussian_energy(1, 1.0) : build_energy(EnergyKind::Gmm125);
        const Process p = process(ScheduleKind::harmonic, T, 2.0);
        const auto b = sample_forward(m, m.params, e, p, 6, 9);
        const DiffusionMdp mdp(m, m.params, e, p);
        ASSERT_EQ(mdp.horizon(), T);
        for (int r = 0; r < b.size(); ++r) {
          const Trajectory t = b.get(r);
          EXPECT_NEAR(mdp.soft_return(t.states), -log_ratio(t, 0.0), 1e-9) << "d=" << d << " T=" << T;
        }
      }
}
