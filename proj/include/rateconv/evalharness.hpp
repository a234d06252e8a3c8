#pragma once

// Decision-level evaluation of a spiking conversion against its source
// network: conversion rate (agreements / decisions), episode play with
// epsilon-greedy actions and no-op starts, trace replay, aggregation across
// episodes and parameter sweeps.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "rateconv/error.hpp"
#include "rateconv/linecatch.hpp"
#include "rateconv/modelio.hpp"
#include "rateconv/netcore.hpp"
#include "rateconv/normalize.hpp"
#include "rateconv/parallel.hpp"
#include "rateconv/snnsim.hpp"

namespace rateconv {

/// Which spiking-network action is compared with the source's greedy action.
enum class CrMode {
  greedy,    // the spiking network's greedy intent
  executed,  // the action actually taken, exploration included
};

inline const char* to_string(CrMode m) { return m == CrMode::greedy ? "greedy" : "executed"; }

struct EvalConfig {
  double epsilon = 0.05;
  std::size_t max_noop = 30;
  std::size_t episodes = 50;
  std::uint64_t seed = 0;
  std::size_t frame_budget = 18000;
  CrMode cr_mode = CrMode::greedy;
  bool diagnose = false;

  void validate() const {
    if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ConfigError("epsilon must lie in [0, 1]");
    if (episodes < 1) throw ConfigError("episodes must be positive");
  }
};

/// splitmix64 finalizer over (master, index).
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) {
  std::uint64_t z = master + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

struct Agreement {
  std::size_t agreements = 0;  // E
  std::size_t decisions = 0;   // NA
  double rate = 0.0;           // CR = E / NA
};

inline Agreement conversion_rate(std::span<const std::size_t> snn_actions,
                                 std::span<const std::size_t> source_actions) {
  if (snn_actions.size() != source_actions.size())
    throw DataError("conversion_rate: action sequences differ in length");
  if (snn_actions.empty()) throw DataError("conversion_rate: empty action sequences");
  Agreement a;
  a.decisions = snn_actions.size();
  for (std::size_t i = 0; i < a.decisions; ++i)
    a.agreements += snn_actions[i] == source_actions[i];
  a.rate = static_cast<double>(a.agreements) / static_cast<double>(a.decisions);
  return a;
}

/// Pearson correlation; NaN for fewer than two points or zero variance.
inline double pearson(std::span<const double> x, std::span<const double> y) {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  if (x.size() != y.size() || x.size() < 2) return nan;
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) mx += x[i], my += y[i];
  mx /= n, my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (!(sxx > 0.0) || !(syy > 0.0)) return nan;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

/// Accumulated spiking-run diagnostics over many decisions.
struct EvalDiagnostics {
  std::size_t runs = 0;
  double max_identity_residual = 0.0;
  double readout_error_sum = 0.0;  // sum of max_i |f_last_i - q^n_i|
  double settle_step_sum = 0.0;
  std::vector<CaseCounts> cases;

  double mean_readout_error() const { return runs ? readout_error_sum / runs : 0.0; }
  double mean_settle_step() const { return runs ? settle_step_sum / runs : 0.0; }

  void record(const SimResult& result, const NetworkSpec& net, const SimConfig& config,
              std::span<const double> analog_q) {
    ++runs;
    for (double r : layer_identity_residual(result, net, config))
      max_identity_residual = std::max(max_identity_residual, r);
    double err = 0.0;
    for (std::size_t i = 0; i < analog_q.size(); ++i)
      err = std::max(err, std::abs(result.f_last[i] - analog_q[i]));
    readout_error_sum += err;
    settle_step_sum += static_cast<double>(result.settle_step);
    const auto c = classify_residual_cases(result);
    if (cases.size() < c.size()) cases.resize(c.size());
    for (std::size_t p = 0; p < c.size(); ++p) cases[p] += c[p];
  }

  void merge(const EvalDiagnostics& o) {
    runs += o.runs;
    max_identity_residual = std::max(max_identity_residual, o.max_identity_residual);
    readout_error_sum += o.readout_error_sum;
    settle_step_sum += o.settle_step_sum;
    if (cases.size() < o.cases.size()) cases.resize(o.cases.size());
    for (std::size_t p = 0; p < o.cases.size(); ++p) cases[p] += o.cases[p];
  }
};

/// Produces per-action values for a frame.
class Agent {
 public:
  virtual ~Agent() = default;
  virtual std::vector<double> qvalues(const Tensor& frame) = 0;
};

class AnalogAgent final : public Agent {
 public:
  explicit AnalogAgent(const NetworkSpec& net) : net_(&net) {}
  std::vector<double> qvalues(const Tensor& frame) override {
    return forward(*net_, frame).qvalues();
  }

 private:
  const NetworkSpec* net_;
};

/// Simulates the converted network for one decision window per frame and
/// returns the configured readout.
class SpikingAgent final : public Agent {
 public:
  SpikingAgent(const NetworkSpec& net, const SimConfig& config,
               EvalDiagnostics* diagnostics = nullptr)
      : net_(&net), config_(config), sim_(net, config), diagnostics_(diagnostics) {}

  std::vector<double> qvalues(const Tensor& frame) override {
    last_ = sim_.run(frame);
    if (diagnostics_)
      diagnostics_->record(last_, *net_, config_, forward(*net_, frame).qvalues());
    return readout(last_, config_);
  }

  const SimResult& last_result() const noexcept { return last_; }

 private:
  const NetworkSpec* net_;
  SimConfig config_;
  Simulator sim_;
  EvalDiagnostics* diagnostics_;
  SimResult last_;
};

struct EpisodeRecord {
  double score = 0.0;
  std::size_t noops = 0;
  std::size_t frames_used = 0;               // environment steps, no-ops included
  std::vector<std::size_t> actions;          // executed
  std::vector<std::size_t> greedy_actions;   // actor's greedy intent
  std::vector<std::size_t> source_actions;   // observer's greedy action
  std::vector<double> rewards;               // per decision
  std::vector<Tensor> frames;                // decision frames, when recorded
};

/// Plays one episode: a uniform no-op prefix of length in [0, max_noop],
/// then epsilon-greedy actions from `actor` until the environment ends or
/// `frame_budget` environment steps are used. If `observer` is given its
/// greedy action is recorded for every decision frame.
inline EpisodeRecord play_episode(LineCatch& env, Agent& actor, const EvalConfig& config,
                                  Rng& rng, Agent* observer = nullptr,
                                  bool record_frames = false) {
  config.validate();
  EpisodeRecord rec;
  const std::size_t noops =
      std::uniform_int_distribution<std::size_t>(0, config.max_noop)(rng);
  while (rec.noops < noops && !env.done() && rec.frames_used < config.frame_budget) {
    rec.score += env.step(LineCatch::kNoop).reward;
    ++rec.noops;
    ++rec.frames_used;
  }
  while (!env.done() && rec.frames_used < config.frame_budget) {
    const Tensor frame = env.observation();
    const auto q = actor.qvalues(frame);
    const std::size_t greedy = greedy_action(q);
    const std::size_t action = epsilon_greedy_action(q, config.epsilon, rng);
    if (observer) rec.source_actions.push_back(greedy_action(observer->qvalues(frame)));
    if (record_frames) rec.frames.push_back(frame);
    const auto step = env.step(action);
    rec.score += step.reward;
    rec.actions.push_back(action);
    rec.greedy_actions.push_back(greedy);
    rec.rewards.push_back(step.reward);
    ++rec.frames_used;
  }
  return rec;
}

struct EpisodeSummary {
  double snn_score = 0.0;
  double source_score = 0.0;
  std::size_t agreements = 0;
  std::size_t decisions = 0;
  double cr = std::numeric_limits<double>::quiet_NaN();  // NaN with no decisions
};

struct ConversionReport {
  std::size_t agreements = 0;  // E, pooled over episodes
  std::size_t decisions = 0;   // NA
  double conversion_rate = std::numeric_limits<double>::quiet_NaN();
  std::vector<EpisodeSummary> episodes;
  double mean_score = 0.0, std_score = 0.0;
  double mean_source_score = 0.0, std_source_score = 0.0;
  double mean_cr = 0.0, std_cr = 0.0;
  double pearson_score_cr = std::numeric_limits<double>::quiet_NaN();
  EvalDiagnostics diagnostics;
};

namespace detail {

inline void mean_std(std::span<const double> v, double& mean, double& sd) {
  mean = 0.0, sd = 0.0;
  if (v.empty()) return;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  if (v.size() < 2) return;
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
}

}  // namespace detail

/// Means, sample standard deviations (n - 1) and pooled E / NA over the
/// episodes. Episodes without decisions count toward scores only.
inline ConversionReport aggregate(std::vector<EpisodeSummary> episodes,
                                  EvalDiagnostics diagnostics = {}) {
  ConversionReport r;
  std::vector<double> snn, src, cr, cr_score;
  for (const auto& e : episodes) {
    r.agreements += e.agreements;
    r.decisions += e.decisions;
    snn.push_back(e.snn_score);
    src.push_back(e.source_score);
    if (e.decisions > 0) {
      cr.push_back(e.cr);
      cr_score.push_back(e.snn_score);
    }
  }
  if (r.decisions > 0)
    r.conversion_rate = static_cast<double>(r.agreements) / static_cast<double>(r.decisions);
  detail::mean_std(snn, r.mean_score, r.std_score);
  detail::mean_std(src, r.mean_source_score, r.std_source_score);
  detail::mean_std(cr, r.mean_cr, r.std_cr);
  if (cr.empty()) r.mean_cr = std::numeric_limits<double>::quiet_NaN();
  r.pearson_score_cr = pearson(cr_score, cr);
  r.episodes = std::move(episodes);
  r.diagnostics = std::move(diagnostics);
  return r;
}

inline EpisodeSummary summarize(const EpisodeRecord& rec, CrMode mode) {
  EpisodeSummary s;
  s.snn_score = rec.score;
  if (!rec.source_actions.empty()) {
    const auto& mine = mode == CrMode::greedy ? rec.greedy_actions : rec.actions;
    const Agreement a = conversion_rate(mine, rec.source_actions);
    s.agreements = a.agreements;
    s.decisions = a.decisions;
    s.cr = a.rate;
  }
  return s;
}

/// Replays a recorded trace through the spiking network. Source actions
/// are recomputed from `source` when given, else taken from the trace. The
/// score of a replay is the recorded reward total.
inline EpisodeSummary replay_trace(const EpisodeTrace& trace, const NetworkSpec& snn,
                                   const SimConfig& sim, const NetworkSpec* source = nullptr,
                                   EvalDiagnostics* diagnostics = nullptr) {
  if (trace.steps.empty()) throw DataError("replay_trace: empty trace");
  const Shape in_shape = snn.input_shape;
  if (trace.observation_shape != in_shape)
    throw ShapeError("trace observations " + shape_to_string(trace.observation_shape) +
                     " do not match network input " + shape_to_string(in_shape));
  if (source && source->input_shape != in_shape)
    throw ShapeError("source network input does not match trace observations");

  SpikingAgent agent(snn, sim, diagnostics);
  std::vector<std::size_t> snn_actions, src_actions;
  snn_actions.reserve(trace.steps.size());
  src_actions.reserve(trace.steps.size());
  double score = 0.0;
  for (const TraceStep& step : trace.steps) {
    snn_actions.push_back(greedy_action(agent.qvalues(step.observation)));
    src_actions.push_back(source ? greedy_action(forward(*source, step.observation).qvalues())
                                 : step.source_action);
    score += step.reward;
  }
  const Agreement a = conversion_rate(snn_actions, src_actions);
  EpisodeSummary s;
  s.snn_score = score;
  s.source_score = score;
  s.agreements = a.agreements;
  s.decisions = a.decisions;
  s.cr = a.rate;
  return s;
}

/// Replays every trace (one "episode" each, run concurrently).
inline ConversionReport evaluate_traces(std::span<const EpisodeTrace> traces,
                                        const NetworkSpec& snn, const SimConfig& sim,
                                        const NetworkSpec* source, const EvalConfig& config) {
  config.validate();
  sim.validate();
  if (traces.empty()) throw DataError("evaluate_traces: no traces");
  std::vector<EpisodeSummary> out(traces.size());
  std::vector<EvalDiagnostics> diag(traces.size());
  parallel_for(traces.size(), [&](std::size_t i) {
    out[i] = replay_trace(traces[i], snn, sim, source, config.diagnose ? &diag[i] : nullptr);
  });
  EvalDiagnostics merged;
  for (const auto& d : diag) merged.merge(d);
  return aggregate(std::move(out), std::move(merged));
}

/// Plays `config.episodes` LineCatch episodes. Episode i uses seed
/// derive_seed(config.seed, i); the environment draws from
/// derive_seed(seed_i, 0) and the policy from derive_seed(seed_i, 1). The
/// spiking network acts while the source network observes every frame; the
/// source network then replays the same episode seed on its own to give the
/// source score.
inline ConversionReport evaluate_env(const LineCatchConfig& env_config,
                                     const NetworkSpec& source, const NetworkSpec& snn,
                                     const SimConfig& sim, const EvalConfig& config) {
  config.validate();
  sim.validate();
  env_config.validate();
  std::vector<EpisodeSummary> out(config.episodes);
  std::vector<EvalDiagnostics> diag(config.episodes);
  parallel_for(config.episodes, [&](std::size_t i) {
    const std::uint64_t seed = derive_seed(config.seed, i);

    LineCatch env(env_config, derive_seed(seed, 0));
    Rng rng(derive_seed(seed, 1));
    SpikingAgent actor(snn, sim, config.diagnose ? &diag[i] : nullptr);
    AnalogAgent observer(source);
    const EpisodeRecord rec = play_episode(env, actor, config, rng, &observer);
    out[i] = summarize(rec, config.cr_mode);

    LineCatch src_env(env_config, derive_seed(seed, 0));
    Rng src_rng(derive_seed(seed, 1));
    AnalogAgent src_actor(source);
    out[i].source_score = play_episode(src_env, src_actor, config, src_rng).score;
  });
  EvalDiagnostics merged;
  for (const auto& d : diag) merged.merge(d);
  return aggregate(std::move(out), std::move(merged));
}

/// Evaluates one spiking network under one simulation config.
using EvaluateFn =
    std::function<ConversionReport(const NetworkSpec& snn, const SimConfig& sim)>;

struct SweepPoint {
  ReportRow row;
  ConversionReport report;
  NormStats stats;  // percentile sweeps only
};

namespace detail {

inline void fill_pearson(std::vector<SweepPoint>& points) {
  std::vector<double> score, cr;
  for (const auto& p : points) score.push_back(p.row.mean_score), cr.push_back(p.row.mean_cr);
  const double r = pearson(score, cr);
  for (auto& p : points) p.row.pearson_score_cr = r;
}

inline ReportRow make_row(const char* param, double value, const ConversionReport& rep) {
  ReportRow row;
  row.sweep_param = param;
  row.value = value;
  row.episodes = rep.episodes.size();
  row.mean_score = rep.mean_score;
  row.std_score = rep.std_score;
  row.mean_cr = rep.mean_cr;
  row.std_cr = rep.std_cr;
  return row;
}

}  // namespace detail

/// One row per simulation length; every row carries the Pearson
/// correlation of mean score and mean CR across rows.
inline std::vector<SweepPoint> sweep_time(const NetworkSpec& snn,
                                          std::span<const std::size_t> timesteps,
                                          const SimConfig& base, const EvaluateFn& evaluate) {
  if (timesteps.empty()) throw ConfigError("sweep_time: no timestep values");
  std::vector<SweepPoint> points;
  for (std::size_t t : timesteps) {
    SimConfig sim = base;
    sim.timesteps = t;
    sim.validate();
    SweepPoint p;
    p.report = evaluate(snn, sim);
    p.row = detail::make_row("timesteps", static_cast<double>(t), p.report);
    points.push_back(std::move(p));
  }
  detail::fill_pearson(points);
  return points;
}

/// Re-normalizes `source` on `frames` at every percentile, then evaluates.
inline std::vector<SweepPoint> sweep_percentile(const NetworkSpec& source,
                                                std::span<const Tensor> frames,
                                                std::span<const double> percentiles,
                                                const NormConfig& base, const SimConfig& sim,
                                                const EvaluateFn& evaluate) {
  if (percentiles.empty()) throw ConfigError("sweep_percentile: no percentile values");
  std::vector<SweepPoint> points;
  for (double p : percentiles) {
    NormConfig nc = base;
    nc.percentile = p;
    SweepPoint pt;
    pt.stats = collect_stats(source, frames, nc);
    const NetworkSpec snn = apply_normalization(source, pt.stats);
    pt.report = evaluate(snn, sim);
    pt.row = detail::make_row("percentile", p, pt.report);
    points.push_back(std::move(pt));
  }
  detail::fill_pearson(points);
  return points;
}

inline std::vector<ReportRow> rows_of(std::span<const SweepPoint> points) {
  std::vector<ReportRow> rows;
  for (const auto& p : points) rows.push_back(p.row);
  return rows;
}

}  // namespace rateconv
