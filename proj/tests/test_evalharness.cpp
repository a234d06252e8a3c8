#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <map>
#include <random>
#include <tuple>

#include "rateconv/evalharness.hpp"
#include "test_support.hpp"

using namespace rateconv;
using rateconv::testing::random_dense_net;
using rateconv::testing::random_frame;

namespace {

EvalConfig greedy_config(std::size_t episodes = 1) {
  EvalConfig c;
  c.epsilon = 0.0;
  c.max_noop = 0;
  c.episodes = episodes;
  return c;
}

SimConfig sim_with(std::size_t T, Readout r = Readout::robust) {
  SimConfig s;
  s.timesteps = T;
  s.readout = r;
  return s;
}

std::vector<Tensor> linecatch_frames(const LineCatchConfig& cfg, std::size_t episodes) {
  std::vector<Tensor> frames;
  for (std::size_t e = 0; e < episodes; ++e) {
    LineCatch env(cfg, 100 + e);
    while (!env.done()) {
      frames.push_back(env.observation());
      env.step(env.optimal_action());
    }
  }
  return frames;
}

NetworkSpec normalized_reference(const LineCatchConfig& cfg) {
  const NetworkSpec net = linecatch_reference_network(cfg.grid);
  return apply_normalization(net, collect_stats(net, linecatch_frames(cfg, 5), {99.9, 15000}));
}

// Exact score distribution of the uniformly random policy, by forward
// enumeration of (paddle, object column, object row, score).
std::pair<double, double> random_policy_moments(const LineCatchConfig& cfg) {
  const std::size_t G = cfg.grid;
  using State = std::tuple<std::size_t, std::size_t, std::size_t, std::size_t>;
  std::map<State, double> dist;
  for (std::size_t c = 0; c < G; ++c) dist[{G / 2, c, 0, 0}] += 1.0 / G;
  const std::size_t steps = cfg.drops * (G - 1);
  for (std::size_t t = 0; t < steps; ++t) {
    std::map<State, double> next;
    for (const auto& [s, pr] : dist) {
      const auto [p, c, row, score] = s;
      for (int a = 0; a < 3; ++a) {
        std::size_t np = p;
        if (a == 0 && p > 0) --np;
        if (a == 2 && p + 1 < G) ++np;
        const double w = pr / 3.0;
        if (row + 1 == G - 1) {
          const std::size_t ns = score + (np == c ? 1 : 0);
          for (std::size_t c2 = 0; c2 < G; ++c2) next[{np, c2, 0, ns}] += w / G;
        } else {
          next[{np, c, row + 1, score}] += w;
        }
      }
    }
    dist = std::move(next);
  }
  double m1 = 0.0, m2 = 0.0;
  for (const auto& [s, pr] : dist) {
    const double sc = static_cast<double>(std::get<3>(s));
    m1 += pr * sc;
    m2 += pr * sc * sc;
  }
  return {m1, m2 - m1 * m1};
}

ConversionReport fake_report(double score, double cr) {
  EpisodeSummary e;
  e.snn_score = score;
  e.decisions = 100;
  e.agreements = static_cast<std::size_t>(std::lround(cr * 100));
  e.cr = cr;
  return aggregate({e});
}

}  // namespace

TEST(ConversionRate, Examples) {
  const std::vector<std::size_t> a{0, 1, 2, 3};
  EXPECT_EQ(conversion_rate(a, a).rate, 1.0);
  const std::vector<std::size_t> b{0, 1, 2, 0};
  const Agreement ab = conversion_rate(b, a);
  EXPECT_EQ(ab.agreements, 3u);
  EXPECT_EQ(ab.decisions, 4u);
  EXPECT_EQ(ab.rate, 0.75);
  const std::vector<std::size_t> c{1, 2, 3, 0};
  EXPECT_EQ(conversion_rate(c, a).rate, 0.0);
  EXPECT_THROW(conversion_rate(std::vector<std::size_t>{0}, a), DataError);
  EXPECT_THROW(conversion_rate(std::vector<std::size_t>{}, std::vector<std::size_t>{}),
               DataError);
}

TEST(Pearson, Definition) {
  const std::vector<double> x{1, 2, 3, 4}, y{3, 5, 7, 9}, z{9, 7, 5, 3};
  EXPECT_NEAR(pearson(x, y), 1.0, 1e-12);
  EXPECT_NEAR(pearson(x, z), -1.0, 1e-12);
  EXPECT_TRUE(std::isnan(pearson(std::vector<double>{1}, std::vector<double>{2})));
  EXPECT_TRUE(std::isnan(pearson(x, std::vector<double>{1, 1, 1, 1})));
}

TEST(LineCatch, DynamicsAndObservation) {
  LineCatchConfig cfg;
  LineCatch env(cfg, 7);
  EXPECT_EQ(env.paddle(), cfg.grid / 2);
  std::size_t steps = 0;
  while (!env.done()) {
    const Tensor obs = env.observation();
    ASSERT_EQ(obs.shape, (Shape{1, cfg.grid, cfg.grid}));
    for (float v : obs.data) EXPECT_TRUE(v == 0.0f || v == 1.0f);
    env.step(steps % 3);
    ++steps;
  }
  EXPECT_EQ(steps, env.episode_length());
  EXPECT_EQ(env.step(0).reward, 0.0);

  LineCatch a(cfg, 99), b(cfg, 99);
  for (std::size_t t = 0; t < a.episode_length(); ++t) {
    EXPECT_EQ(a.observation(), b.observation());
    a.step(t % 3), b.step(t % 3);
  }
}

TEST(LineCatch, ReferenceNetworkIsOptimal) {
  for (std::size_t grid : {3u, 5u, 8u, 12u}) {
    LineCatchConfig cfg{grid, 10};
    const NetworkSpec net = linecatch_reference_network(grid);
    ASSERT_TRUE(validate_network(net).ok());
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      LineCatch env(cfg, seed);
      AnalogAgent agent(net);
      Rng rng(seed);
      LineCatch probe(cfg, seed);
      const EpisodeRecord rec = play_episode(env, agent, greedy_config(), rng);
      EXPECT_EQ(rec.score, static_cast<double>(cfg.drops));
      for (std::size_t a : rec.actions) {
        EXPECT_EQ(a, probe.optimal_action());
        probe.step(a);
      }
    }
  }
}

TEST(PlayEpisode, RandomPolicyMatchesEnumeration) {
  const LineCatchConfig cfg{5, 4};
  const auto [mean, var] = random_policy_moments(cfg);
  EXPECT_NEAR(mean, 4.0 / 5.0, 1e-12);  // catches are independent of the object column
  const NetworkSpec net = linecatch_reference_network(cfg.grid);
  EvalConfig ec = greedy_config();
  ec.epsilon = 1.0;
  const int episodes = 1000;
  double sum = 0.0;
  for (int e = 0; e < episodes; ++e) {
    LineCatch env(cfg, derive_seed(42, e));
    Rng rng(derive_seed(43, e));
    AnalogAgent agent(net);
    sum += play_episode(env, agent, ec, rng).score;
  }
  EXPECT_NEAR(sum / episodes, mean, 3.0 * std::sqrt(var / episodes));
}

TEST(PlayEpisode, BudgetAndNoops) {
  const LineCatchConfig cfg;
  const NetworkSpec net = linecatch_reference_network(cfg.grid);
  AnalogAgent agent(net);
  EvalConfig ec = greedy_config();
  ec.frame_budget = 0;
  LineCatch env(cfg, 1);
  Rng rng(1);
  const EpisodeRecord empty = play_episode(env, agent, ec, rng);
  EXPECT_EQ(empty.score, 0.0);
  EXPECT_TRUE(empty.actions.empty());

  ec.frame_budget = 18000;
  ec.max_noop = 30;
  std::size_t max_seen = 0;
  for (std::uint64_t s = 0; s < 300; ++s) {
    LineCatch e(cfg, s);
    Rng r(s);
    const EpisodeRecord rec = play_episode(e, agent, ec, r);
    EXPECT_LE(rec.noops, 30u);
    EXPECT_EQ(rec.noops + rec.actions.size(), cfg.drops * (cfg.grid - 1));
    max_seen = std::max(max_seen, rec.noops);
  }
  EXPECT_EQ(max_seen, 30u);

  ec.frame_budget = 12;
  LineCatch e(cfg, 3);
  Rng r(3);
  const EpisodeRecord capped = play_episode(e, agent, ec, r);
  EXPECT_EQ(capped.frames_used, 12u);
}

TEST(Replay, QGapAboveErrorBoundGivesFullAgreement) {
  // q = input (two actions) through an identity ReLU layer; both layers
  // under-count by less than 1/T each, so a gap above 2/T is preserved.
  NetworkSpec net;
  net.input_shape = {2};
  net.layers.push_back(LayerSpec::dense(Tensor({2, 2}, {1, 0, 0, 1}), Tensor({2})));
  net.layers.push_back(
      LayerSpec::dense(Tensor({2, 2}, {1, 0, 0, 1}), Tensor({2}), Activation::none));
  Rng rng(1);
  const std::size_t T = 100;
  EpisodeTrace trace;
  trace.action_count = 2;
  trace.observation_shape = {2};
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  while (trace.steps.size() < 500) {
    Tensor f({2}, {u(rng), u(rng)});
    if (std::abs(f[0] - f[1]) <= 2.0 / T + 1e-6) continue;
    trace.steps.push_back({f, 0, 0.0});
  }
  for (Readout r : {Readout::robust, Readout::rate}) {
    const EpisodeSummary s = replay_trace(trace, net, sim_with(T, r), &net);
    EXPECT_EQ(s.agreements, 500u);
    EXPECT_EQ(s.cr, 1.0);
  }
}

TEST(Replay, SourceActionsFromTraceWhenNoSource) {
  EpisodeTrace trace;
  trace.action_count = 2;
  trace.observation_shape = {2};
  trace.steps.push_back({Tensor({2}, {0.9f, 0.1f}), 1, 2.0});
  trace.steps.push_back({Tensor({2}, {0.9f, 0.1f}), 0, 3.0});
  NetworkSpec net;
  net.input_shape = {2};
  net.layers.push_back(
      LayerSpec::dense(Tensor({2, 2}, {1, 0, 0, 1}), Tensor({2}), Activation::none));
  const EpisodeSummary s = replay_trace(trace, net, sim_with(50));
  EXPECT_EQ(s.agreements, 1u);
  EXPECT_EQ(s.snn_score, 5.0);
  EpisodeTrace bad = trace;
  bad.observation_shape = {3};
  EXPECT_THROW(replay_trace(bad, net, sim_with(50)), ShapeError);
  bad.steps.clear();
  EXPECT_THROW(replay_trace(bad, net, sim_with(50)), DataError);
}

TEST(Replay, SelfAgreementThroughAnalogForward) {
  const LineCatchConfig cfg;
  const NetworkSpec net = linecatch_reference_network(cfg.grid);
  for (std::uint64_t s = 0; s < 10; ++s) {
    LineCatch env(cfg, s);
    Rng rng(s);
    AnalogAgent actor(net), observer(net);
    EvalConfig ec;  // default epsilon: greedy intents still agree
    const EpisodeSummary sum = summarize(play_episode(env, actor, ec, rng, &observer),
                                         CrMode::greedy);
    EXPECT_EQ(sum.cr, 1.0);
  }
}

TEST(Replay, UnrelatedPoliciesAgreeAtOneOverK) {
  Rng rng(2);
  const std::size_t k = 4;
  const NetworkSpec net = random_dense_net(rng, {6, 12, k});
  EpisodeTrace trace;
  trace.action_count = k;
  trace.observation_shape = {6};
  for (int i = 0; i < 2000; ++i)
    trace.steps.push_back({random_frame(rng, {6}), static_cast<std::uint32_t>(rng() % k), 0.0});
  const EpisodeSummary s = replay_trace(trace, net, sim_with(50));
  EXPECT_NEAR(s.cr, 1.0 / k, 0.05);
}

TEST(Evaluate, IdenticalAgentsGiveZeroCrSpread) {
  const LineCatchConfig cfg;
  const NetworkSpec source = linecatch_reference_network(cfg.grid);
  const NetworkSpec snn = normalized_reference(cfg);
  const ConversionReport r = evaluate_env(cfg, source, snn, sim_with(500), greedy_config(50));
  EXPECT_EQ(r.episodes.size(), 50u);
  EXPECT_EQ(r.conversion_rate, 1.0);
  EXPECT_EQ(r.mean_cr, 1.0);
  EXPECT_EQ(r.std_cr, 0.0);
  EXPECT_EQ(r.mean_score, static_cast<double>(cfg.drops));
  EXPECT_EQ(r.mean_source_score, static_cast<double>(cfg.drops));
}

TEST(Evaluate, AggregationMatchesRecomputation) {
  const LineCatchConfig cfg;
  const NetworkSpec source = linecatch_reference_network(cfg.grid);
  const NetworkSpec snn = normalized_reference(cfg);
  EvalConfig ec;
  ec.episodes = 12;
  ec.seed = 5;
  ec.diagnose = true;
  const ConversionReport r = evaluate_env(cfg, source, snn, sim_with(20), ec);
  std::size_t E = 0, NA = 0;
  double score = 0.0, cr = 0.0;
  for (const auto& e : r.episodes) {
    E += e.agreements, NA += e.decisions;
    score += e.snn_score, cr += e.cr;
    EXPECT_EQ(e.cr, static_cast<double>(e.agreements) / e.decisions);
  }
  EXPECT_EQ(r.agreements, E);
  EXPECT_EQ(r.decisions, NA);
  EXPECT_DOUBLE_EQ(r.conversion_rate, static_cast<double>(E) / NA);
  EXPECT_NEAR(r.mean_score, score / 12, 1e-12);
  EXPECT_NEAR(r.mean_cr, cr / 12, 1e-12);
  double ss = 0.0;
  for (const auto& e : r.episodes) ss += (e.cr - r.mean_cr) * (e.cr - r.mean_cr);
  EXPECT_NEAR(r.std_cr, std::sqrt(ss / 11), 1e-12);
  EXPECT_EQ(r.diagnostics.runs, NA);
  EXPECT_LE(r.diagnostics.max_identity_residual, 1e-9);

  // shuffling episodes leaves the pooled rate unchanged
  auto shuffled = r.episodes;
  std::shuffle(shuffled.begin(), shuffled.end(), Rng(3));
  const ConversionReport again = aggregate(shuffled);
  EXPECT_EQ(again.conversion_rate, r.conversion_rate);
  EXPECT_NEAR(again.mean_cr, r.mean_cr, 1e-12);
}

TEST(Evaluate, DeterministicAcrossThreadCounts) {
  const LineCatchConfig cfg;
  const NetworkSpec source = linecatch_reference_network(cfg.grid);
  const NetworkSpec snn = normalized_reference(cfg);
  EvalConfig ec;
  ec.episodes = 8;
  ec.seed = 11;
  auto flat = [](const ConversionReport& r) {
    std::vector<double> v{r.conversion_rate, r.mean_score, r.std_score, r.mean_cr, r.std_cr};
    for (const auto& e : r.episodes) v.insert(v.end(), {e.snn_score, e.source_score, e.cr});
    return v;
  };
  ::setenv("RATECONV_THREADS", "1", 1);
  const auto serial = flat(evaluate_env(cfg, source, snn, sim_with(30), ec));
  ::setenv("RATECONV_THREADS", "4", 1);
  const auto parallel = flat(evaluate_env(cfg, source, snn, sim_with(30), ec));
  ::unsetenv("RATECONV_THREADS");
  EXPECT_EQ(serial, parallel);
}

TEST(Evaluate, CrModesDiffer) {
  const LineCatchConfig cfg;
  const NetworkSpec source = linecatch_reference_network(cfg.grid);
  EvalConfig ec;
  ec.episodes = 20;
  ec.epsilon = 0.5;
  const NetworkSpec snn = normalized_reference(cfg);
  const ConversionReport greedy = evaluate_env(cfg, source, snn, sim_with(200), ec);
  ec.cr_mode = CrMode::executed;
  const ConversionReport executed = evaluate_env(cfg, source, snn, sim_with(200), ec);
  EXPECT_EQ(greedy.conversion_rate, 1.0);
  EXPECT_LT(executed.conversion_rate, 0.9);
}

TEST(Evaluate, RobustReadoutAtLeastRateOnAverage) {
  Rng rng(8);
  double robust = 0.0, rate = 0.0;
  const int nets = 20;
  for (int n = 0; n < nets; ++n) {
    const NetworkSpec net = random_dense_net(rng, {12, 24, 24, 4});
    std::vector<Tensor> frames;
    for (int i = 0; i < 200; ++i) frames.push_back(random_frame(rng, {12}));
    const NetworkSpec norm = apply_normalization(net, collect_stats(net, frames, {99.9, 15000}));
    EpisodeTrace trace;
    trace.action_count = 4;
    trace.observation_shape = {12};
    for (const Tensor& f : frames) trace.steps.push_back({f, 0, 0.0});
    robust += replay_trace(trace, norm, sim_with(100, Readout::robust), &norm).cr;
    rate += replay_trace(trace, norm, sim_with(100, Readout::rate), &norm).cr;
  }
  EXPECT_GE(robust / nets, rate / nets);
}

TEST(Sweep, TimeRowsAndPearson) {
  const std::vector<std::size_t> Ts{10, 20, 30};
  const EvaluateFn linear = [](const NetworkSpec&, const SimConfig& s) {
    const double t = static_cast<double>(s.timesteps);
    return fake_report(2.0 * t + 1.0, t / 100.0);
  };
  NetworkSpec net = linecatch_reference_network(5);
  const auto points = sweep_time(net, Ts, SimConfig{}, linear);
  ASSERT_EQ(points.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(points[i].row.sweep_param, "timesteps");
    EXPECT_EQ(points[i].row.value, static_cast<double>(Ts[i]));
    EXPECT_NEAR(points[i].row.pearson_score_cr, 1.0, 1e-12);
  }
  const std::vector<std::size_t> one{50};
  EXPECT_TRUE(std::isnan(sweep_time(net, one, SimConfig{}, linear)[0].row.pearson_score_cr));
  EXPECT_THROW(sweep_time(net, std::span<const std::size_t>{}, SimConfig{}, linear),
               ConfigError);
  const std::vector<std::size_t> zero{0};
  EXPECT_THROW(sweep_time(net, zero, SimConfig{}, linear), ConfigError);
}

TEST(Sweep, PercentileRows) {
  // one hidden unit copies the single input; calibration frames carry one
  // outlier, so p = 100 and p = 99.9 disagree on the hidden scale
  NetworkSpec net;
  net.input_shape = {1};
  net.layers.push_back(LayerSpec::dense(Tensor({1, 1}, {1}), Tensor({1})));
  net.layers.push_back(LayerSpec::dense(Tensor({2, 1}, {1, -1}), Tensor({2}, {0, 0.5f}),
                                        Activation::none));
  std::vector<Tensor> frames(2000, Tensor({1}, {0.25f}));
  frames.back()[0] = 1.0f;
  const std::vector<double> ps{99.0, 99.9, 99.99, 100.0};
  std::vector<double> seen_weights;
  const EvaluateFn probe = [&](const NetworkSpec& snn, const SimConfig&) {
    seen_weights.push_back(snn.layers[0].weights[0]);
    return fake_report(1.0, 1.0);
  };
  const auto points = sweep_percentile(net, frames, ps, NormConfig{}, SimConfig{}, probe);
  ASSERT_EQ(points.size(), ps.size());
  for (std::size_t i = 0; i < ps.size(); ++i) {
    EXPECT_EQ(points[i].row.value, ps[i]);
    EXPECT_EQ(points[i].row.sweep_param, "percentile");
  }
  EXPECT_EQ(points[1].stats.lambda[1], 0.25);
  EXPECT_EQ(points[3].stats.lambda[1], 1.0);
  EXPECT_NE(seen_weights[1], seen_weights[3]);

  // constant activations: every percentile gives the same scales and rows
  const std::vector<Tensor> flat(100, Tensor({1}, {0.5f}));
  const EvaluateFn by_weight = [](const NetworkSpec& snn, const SimConfig&) {
    return fake_report(snn.layers[0].weights[0], 0.5);
  };
  const auto same = sweep_percentile(net, flat, ps, NormConfig{}, SimConfig{}, by_weight);
  for (const auto& p : same) {
    EXPECT_EQ(p.stats.lambda, same[0].stats.lambda);
    EXPECT_EQ(p.row.mean_score, same[0].row.mean_score);
    EXPECT_EQ(p.row.mean_cr, same[0].row.mean_cr);
  }
  const std::vector<double> bad{98.0};
  EXPECT_THROW(sweep_percentile(net, flat, bad, NormConfig{}, SimConfig{}, by_weight),
               ConfigError);
}

TEST(DeriveSeed, DistinctStreams) {
  std::vector<std::uint64_t> seeds;
  for (std::uint64_t m = 0; m < 4; ++m)
    for (std::uint64_t i = 0; i < 256; ++i) seeds.push_back(derive_seed(m, i));
  std::sort(seeds.begin(), seeds.end());
  EXPECT_EQ(std::adjacent_find(seeds.begin(), seeds.end()), seeds.end());
}
