#include "dsamp/trainer.hpp"
#include "test_helpers.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace dsamp;

namespace {

TrainConfig quick(std::string_view energy, std::string_view method, int T = 3) {
  TrainConfig c = preset(energy, T, method);
  c.net.s_dim = c.net.t_dim = c.net.hidden = 16;
  c.net.depth = 2;
  c.batch = 32;
  c.iterations = 20;
  c.eval_every = 10;
  c.eval_samples = 64;
  c.per_capacity = 500;
  c.ls_capacity = 2000;
  return c;
}

nlohmann::json strip_wall(std::vector<nlohmann::json> h) {
  for (auto& j : h) j.erase("wall_ms");
  return h;
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

TEST(Config, PresetValues) {
  const auto fh = preset("funnel-hard", 5, "tb-both");
  EXPECT_NEAR(fh.lr_phi(), 1e-6, 1e-18);
  EXPECT_EQ(fh.net.dim, 10);
  const auto g = preset("gmm25", 5, "tb-fixed");
  EXPECT_EQ(g.sigma2, 5.0);
  EXPECT_EQ(g.schedule, ScheduleKind::harmonic);
  EXPECT_EQ(g.lr_decay, 0.99988);
  EXPECT_FALSE(g.net.learn_fwd_var);
  EXPECT_FALSE(g.net.learn_bwd);
  EXPECT_EQ(g.loss.destr, DestrLoss::none);
  const auto mw = preset("manywell", 5, "tb-tlm");
  EXPECT_EQ(mw.net.hidden, 256);
  EXPECT_EQ(mw.net.s_dim, 256);
  EXPECT_EQ(mw.net.depth, 4);
  EXPECT_EQ(mw.net.dim, 32);
  EXPECT_NEAR(mw.lr_phi(), 1e-8, 1e-20);
  const auto pis = preset("gmm40", 10, "pis-vargrad");
  EXPECT_EQ(pis.loss.gen, GenLoss::revkl);
  EXPECT_EQ(pis.replay_ratio, 0);
  EXPECT_FALSE(pis.local_search);
  for (const auto& m : kMethods) EXPECT_NO_THROW(preset("gmm25", 5, m.name).validate()) << m.name;
}

TEST(Config, TextOverridesPreset) {
  const auto c = parse_config(
      "# comment\n"
      "energy = funnel-easy\n"
      "T = 10\n"
      "method = tb-tlm   # inline comment\n"
      "batch = 128\n"
      "replay_ratio = 0\n"
      "shared_backbone = false\n");
  EXPECT_EQ(c.energy, "funnel-easy");
  EXPECT_EQ(c.steps, 10);
  EXPECT_EQ(c.loss.destr, DestrLoss::tlm);
  EXPECT_EQ(c.batch, 128);
  EXPECT_EQ(c.replay_ratio, 0);
  EXPECT_FALSE(c.net.shared_backbone);
  EXPECT_EQ(c.sigma2, 1.0);
}

TEST(Config, InvalidInputsRejected) {
  EXPECT_THROW(parse_config("bogus = 1"), ConfigError);
  EXPECT_THROW(parse_config("batch = many"), ConfigError);
  EXPECT_THROW(parse_config("batch = 2.5"), ConfigError);
  EXPECT_THROW(parse_config("just text"), ConfigError);
  EXPECT_THROW(parse_config("method = nope"), ConfigError);
  EXPECT_THROW(parse_config("energy = banana"), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/path.cfg"), ConfigError);

  auto c = preset("gmm25", 5, "pis-vargrad");
  c.loss.destr = DestrLoss::tb;
  try {
    c.validate();
    FAIL() << "revkl + tb destruction must be rejected";
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("revkl"), std::string::npos);
    EXPECT_EQ(msg.find("Table"), std::string::npos);
  }
  c = preset("gmm25", 5, "tb-both");
  c.lr_phi_ratio = 2.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = preset("gmm25", 5, "tb-fixed");
  c.net.learn_bwd = true;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Config, JsonRoundTrip) {
  auto c = preset("gmm25-distort", 7, "tb-both");
  c.seed = 12;
  c.lr_theta = 3.3e-4;
  c.net.shared_backbone = false;
  c.loss.use_target_nets = false;
  const auto back = config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_EQ(to_json(parse_config(config_text(c))), to_json(c));
}

// ---------------------------------------------------------------------------
// Training loop

TEST(Trainer, GaussianSmokeRunLearnsLogZ) {
  TrainConfig c = quick("gaussian", "tb-both", 3);
  c.sigma2 = 2.0;  // reference process mismatched with the unit-variance target
  c.iterations = 600;
  c.eval_every = 200;
  c.eval_samples = 512;
  c.lr_theta = 3e-3;
  c.batch = 64;
  c.explore = 0.0;
  std::vector<nlohmann::json> seen;
  TrainHooks hooks;
  hooks.on_metrics = [&](const nlohmann::json& j) { seen.push_back(j); };
  RunState s = init_run(c);
  const auto res = train(s, hooks);
  EXPECT_EQ(res.status, RunStatus::ok) << res.reason;
  EXPECT_EQ(res.iterations_done, 600);
  EXPECT_NEAR(s.model.params.at("logZ").value(0, 0), 0.0, 0.05);
  ASSERT_EQ(seen.size(), 3u);
  for (const auto& j : seen) {
    for (const char* k : {"iter", "loss_gen", "loss_destr", "logz_hat", "elbo", "elbo_se", "eubo", "eubo_se", "w2",
                          "diverged_frac", "wall_ms"})
      EXPECT_TRUE(j.contains(k)) << k;
    // ELBO <= log Z = 0 <= EUBO within three combined standard errors.
    const double se = std::hypot(j["elbo_se"].get<double>(), j["eubo_se"].get<double>());
    EXPECT_LE(j["elbo"].get<double>(), 3.0 * se);
    EXPECT_GE(j["eubo"].get<double>(), -3.0 * se);
  }
  for (const auto& j : seen) EXPECT_FALSE(j["w2"].is_null());
  EXPECT_TRUE(res.final_metrics.sandwich_holds());
}

TEST(Trainer, ZeroReplayRatioNeverTouchesBuffer) {
  TrainConfig c = quick("gmm25", "tb-both");
  c.replay_ratio = 0;
  RunState s = init_run(c);
  const auto res = train(s);
  EXPECT_EQ(s.per.sample_calls(), 0u);
  EXPECT_EQ(s.per.size(), 0u);
  EXPECT_EQ(res.counters.per_updates, 0u);
  EXPECT_EQ(res.counters.on_policy_updates, 20u);
}

TEST(Trainer, ReplayScheduleAlternatesBufferAndBackwardBatches) {
  TrainConfig c = quick("gmm25", "tb-both");
  c.ls_every = 5;
  RunState s = init_run(c);
  const auto res = train(s);
  EXPECT_EQ(res.counters.on_policy_updates, 20u);
  EXPECT_EQ(res.counters.per_updates, 20u);
  EXPECT_EQ(res.counters.backward_updates, 20u);
  EXPECT_EQ(res.counters.refreshes, 4u);
  EXPECT_EQ(s.per.size(), 500u);
}

TEST(Trainer, LearningRateDecaysOnlyOnPolicy) {
  TrainConfig c = quick("gmm25", "tb-both");
  RunState s = init_run(c);
  train(s);
  EXPECT_NEAR(s.opt_gen.lr, c.lr_theta * std::pow(c.lr_decay, 20), 1e-15);
  EXPECT_NEAR(s.opt_destr.lr, c.lr_phi() * std::pow(c.lr_decay, 20), 1e-15);
  EXPECT_EQ(s.opt_gen.step, 60);
}

TEST(Trainer, DeterministicGivenSeed) {
  TrainConfig c = quick("gmm25", "tb-tlm");
  const auto a = train(c), b = train(c);
  EXPECT_EQ(strip_wall(a.history), strip_wall(b.history));
  c.seed = 1;
  EXPECT_NE(strip_wall(train(c).history), strip_wall(a.history));
}

TEST(Trainer, SeparateOptimisersKeepSeparateMoments) {
  TrainConfig c = quick("gmm25", "tb-both");
  c.iterations = 1;
  c.replay_ratio = 0;
  RunState s = init_run(c);
  train_iteration(s);
  const auto& g = s.opt_gen;
  const auto& d = s.opt_destr;
  auto pos = [](const grad::OptimState& o, const std::string& name, const ParamStore& p) {
    const std::size_t idx = p.index_of(name);
    for (std::size_t k = 0; k < o.slots.size(); ++k)
      if (o.slots[k] == idx) return static_cast<int>(k);
    return -1;
  };
  const auto& P = s.model.params;
  EXPECT_GE(pos(g, "head.fwd.W", P), 0);
  EXPECT_EQ(pos(g, "head.bwd.W", P), -1);
  EXPECT_EQ(pos(g, "logZ", P), -1);
  EXPECT_GE(pos(d, "head.bwd.W", P), 0);
  EXPECT_EQ(pos(d, "head.fwd.W", P), -1);
  EXPECT_GE(pos(s.opt_logz, "logZ", P), 0);
  const int gi = pos(g, "backbone.0.Ws", P), di = pos(d, "backbone.0.Ws", P);
  ASSERT_GE(gi, 0);
  ASSERT_GE(di, 0);
  EXPECT_GT(g.m[static_cast<std::size_t>(gi)].norm(), 0.0);
  EXPECT_GT(d.m[static_cast<std::size_t>(di)].norm(), 0.0);
  EXPECT_GT((g.m[static_cast<std::size_t>(gi)] - d.m[static_cast<std::size_t>(di)]).norm(), 0.0);
}

TEST(Trainer, SingleOptimiserMode) {
  TrainConfig c = quick("gmm25", "tb-both");
  c.separate_optimizers = false;
  RunState s = init_run(c);
  EXPECT_TRUE(s.opt_destr.slots.empty());
  const auto res = train(s);
  EXPECT_EQ(res.status, RunStatus::ok);
  EXPECT_FALSE(s.opt_logz.slots.empty());
}

TEST(Trainer, ReverseKlRuns) {
  for (const char* m : {"pis-fixed", "pis-learnedvar", "pis-tlm", "pis-vargrad"}) {
    TrainConfig c = quick("gmm25", m);
    RunState s = init_run(c);
    EXPECT_TRUE(s.opt_logz.slots.empty());
    const auto res = train(s);
    EXPECT_NE(res.status, RunStatus::diverged) << m << ": " << res.reason;
    EXPECT_EQ(res.counters.per_updates, 0u);
    EXPECT_EQ(s.model.params.at("logZ").value(0, 0), 0.0);
  }
}

TEST(Trainer, TargetNetworkTracksOnline) {
  TrainConfig c = quick("gmm25", "tb-both");
  c.iterations = 1;
  RunState s = init_run(c);
  const ParamStore before = s.model.target;
  train_iteration(s);
  // target <- 0.95 target + 0.05 online
  const auto& name = "head.fwd.W";
  const Matrix want = 0.95 * before.at(name).value + 0.05 * s.model.params.at(name).value;
  EXPECT_LT((s.model.target.at(name).value - want).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Trainer, NonFiniteParametersReportDivergence) {
  TrainConfig c = quick("funnel-easy", "tb-tlm");
  RunState s = init_run(c);
  s.model.params.at("head.fwd.b").value(0, 0) = std::nan("");
  const auto res = train(s);
  EXPECT_EQ(res.status, RunStatus::diverged);
  EXPECT_FALSE(res.reason.empty());
  ASSERT_FALSE(res.history.empty());
  EXPECT_TRUE(res.history.back()["elbo"].is_null());
}

TEST(Trainer, ElboFarBelowLogZIsReportedCollapsed) {
  TrainConfig c = quick("gmm40", "tb-fixed");
  c.iterations = 1;
  const auto ok = train(c);
  EXPECT_EQ(ok.status, RunStatus::ok);
  c.collapse_gap = -ok.final_metrics.elbo_gap / 2.0;
  const auto res = train(c);
  EXPECT_EQ(res.status, RunStatus::collapsed);
  EXPECT_LT(res.final_metrics.elbo_gap, -c.collapse_gap);
  EXPECT_FALSE(res.reason.empty());
}

TEST(Trainer, FinalMetricsAverageLastEvaluations) {
  TrainConfig c = quick("gmm25", "tb-learnedvar");
  c.iterations = 40;
  std::vector<nlohmann::json> seen;
  TrainHooks h;
  h.on_metrics = [&](const nlohmann::json& j) { seen.push_back(j); };
  const auto res = train(c, h);
  ASSERT_EQ(seen.size(), 4u);
  EXPECT_TRUE(seen[0]["w2"].is_null());
  for (int i = 1; i < 4; ++i) EXPECT_FALSE(seen[static_cast<std::size_t>(i)]["w2"].is_null());
  const double avg = (seen[1]["elbo"].get<double>() + seen[2]["elbo"].get<double>() + seen[3]["elbo"].get<double>()) / 3;
  EXPECT_NEAR(res.final_metrics.elbo, avg, 1e-12);
}

TEST(Checkpoints, RoundTripReproducesEvaluation) {
  TrainConfig c = quick("gmm25", "tb-both");
  c.iterations = 5;
  RunState s = init_run(c);
  train(s);
  const auto ck = grad::decode_checkpoint(grad::encode_checkpoint(make_checkpoint(s)));
  const auto loaded = load_model(ck);
  EXPECT_EQ(to_json(loaded.cfg), to_json(c));
  EXPECT_EQ(loaded.model.params.flatten(), s.model.params.flatten());
  EXPECT_EQ(loaded.model.target.flatten(), s.model.target.flatten());
  EvalOptions eo;
  eo.n = 128;
  eo.seed = 4;
  EXPECT_EQ(to_json(evaluate(loaded.model, s.energy, s.process, eo)), to_json(evaluate(s.model, s.energy, s.process, eo)));
}

// A fixed-destruction checkpoint loaded with trainable (zero-initialised)
// destruction heads is the same sampler.
TEST(Checkpoints, FixedDestructionLoadsIntoTrainableModel) {
  TrainConfig c = quick("gmm25", "tb-learnedvar");
  c.iterations = 30;
  RunState s = init_run(c);
  train(s);
  const auto ck = make_checkpoint(s);
  NetConfig trainable = c.net;
  trainable.learn_bwd = true;
  const auto loaded = load_model(ck, &trainable);
  EXPECT_TRUE(loaded.model.cfg.learn_bwd);
  EvalOptions eo;
  eo.n = 256;
  eo.seed = 8;
  eo.with_w2 = false;
  const auto a = evaluate(s.model, s.energy, s.process, eo);
  const auto b = evaluate(loaded.model, s.energy, s.process, eo);
  EXPECT_NEAR(a.elbo, b.elbo, 1e-12);
  EXPECT_NEAR(a.eubo, b.eubo, 1e-12);
}
