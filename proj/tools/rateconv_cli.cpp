// rateconv: command-line driver for the conversion pipeline.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 data error.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "rateconv/rateconv.hpp"

using namespace rateconv;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;

const std::vector<std::size_t> kDefaultTimesteps{50, 100, 200, 500, 1000};
const std::vector<double> kDefaultPercentiles{99.0, 99.9, 99.99, 100.0};

struct Common {
  std::string model;
  std::uint64_t seed = 0;
  std::size_t grid = 8;
  std::size_t drops = 10;
};

struct SimFlags {
  std::size_t timesteps = 500;
  double v_thr = 1.0;
  std::string readout = "robust";
  bool carry = false;

  SimConfig config() const {
    SimConfig c;
    c.timesteps = timesteps;
    c.v_thr = v_thr;
    c.readout = readout == "rate" ? Readout::rate : Readout::robust;
    c.carry_potential = carry;
    c.validate();
    return c;
  }
};

struct EvalFlags {
  std::size_t episodes = 50;
  double epsilon = 0.05;
  std::size_t max_noop = 30;
  std::size_t frame_budget = 18000;
  std::string cr_mode = "greedy";
  bool diagnose = false;

  EvalConfig config(std::uint64_t seed) const {
    EvalConfig c;
    c.episodes = episodes;
    c.epsilon = epsilon;
    c.max_noop = max_noop;
    c.frame_budget = frame_budget;
    c.seed = seed;
    c.cr_mode = cr_mode == "executed" ? CrMode::executed : CrMode::greedy;
    c.diagnose = diagnose;
    c.validate();
    return c;
  }
};

struct NormFlags {
  std::string frames;
  double percentile = 99.9;
  std::size_t max_frames = 15000;

  NormConfig config() const {
    NormConfig c{percentile, max_frames};
    c.validate();
    return c;
  }
};

void add_common(CLI::App* cmd, Common& c, bool with_env = true) {
  cmd->add_option("--model", c.model, "Model directory (default: built-in LineCatch network)");
  cmd->add_option("--seed", c.seed, "Master seed");
  if (with_env) {
    cmd->add_option("--grid", c.grid, "LineCatch grid size")->capture_default_str();
    cmd->add_option("--drops", c.drops, "LineCatch drops per episode")->capture_default_str();
  }
}

void add_sim(CLI::App* cmd, SimFlags& s) {
  cmd->add_option("--timesteps,-T", s.timesteps, "Simulation steps per decision")
      ->capture_default_str();
  cmd->add_option("--vthr", s.v_thr, "Firing threshold")->capture_default_str();
  cmd->add_option("--readout", s.readout, "Readout")
      ->check(CLI::IsMember({"rate", "robust"}))
      ->capture_default_str();
  cmd->add_flag("--carry-potential", s.carry, "Keep membrane potentials across decisions");
}

void add_eval(CLI::App* cmd, EvalFlags& e) {
  cmd->add_option("--episodes", e.episodes, "Episodes")->capture_default_str();
  cmd->add_option("--epsilon", e.epsilon, "Exploration rate")->capture_default_str();
  cmd->add_option("--max-noop", e.max_noop, "Longest random no-op prefix")->capture_default_str();
  cmd->add_option("--frame-budget", e.frame_budget, "Environment steps per episode")
      ->capture_default_str();
  cmd->add_option("--cr-mode", e.cr_mode, "Compare greedy intents or executed actions")
      ->check(CLI::IsMember({"greedy", "executed"}))
      ->capture_default_str();
  cmd->add_flag("--diagnose", e.diagnose, "Collect simulation diagnostics");
}

void add_norm(CLI::App* cmd, NormFlags& n) {
  cmd->add_option("--frames", n.frames,
                  "Calibration frames (default: frames from source play on LineCatch)");
  cmd->add_option("--percentile", n.percentile, "Normalization percentile")
      ->capture_default_str();
  cmd->add_option("--max-frames", n.max_frames, "Calibration frame cap")->capture_default_str();
}

LineCatchConfig env_config(const Common& c) {
  LineCatchConfig e{c.grid, c.drops};
  e.validate();
  return e;
}

NetworkSpec load_source(const Common& c) {
  if (c.model.empty()) return linecatch_reference_network(c.grid);
  return load_model(c.model);
}

struct Calibration {
  std::vector<Tensor> frames;
  std::string provenance;
};

// Frames the analog source sees while playing LineCatch with the default
// protocol, from episodes seeded independently of evaluation episodes.
Calibration calibration(const NetworkSpec& source, const Common& c, const NormFlags& n) {
  Calibration cal;
  if (!n.frames.empty()) {
    cal.frames = read_frames(n.frames, source.input_shape);
    cal.provenance = "file:" + n.frames;
    return cal;
  }
  const LineCatchConfig env = env_config(c);
  if (source.input_shape != Shape{1, env.grid, env.grid})
    throw ShapeError("model input " + shape_to_string(source.input_shape) +
                     " does not match LineCatch frames; pass --frames");
  const std::uint64_t cal_seed = derive_seed(c.seed, 0xca11b);
  AnalogAgent agent(source);
  EvalConfig ec;
  std::size_t episodes = 0;
  while (cal.frames.size() < n.max_frames && episodes < 20) {
    const std::uint64_t s = derive_seed(cal_seed, episodes++);
    LineCatch game(env, derive_seed(s, 0));
    Rng rng(derive_seed(s, 1));
    auto rec = play_episode(game, agent, ec, rng, nullptr, true);
    for (auto& f : rec.frames) cal.frames.push_back(std::move(f));
  }
  if (cal.frames.size() > n.max_frames) cal.frames.resize(n.max_frames);
  char buf[160];
  std::snprintf(buf, sizeof buf, "linecatch:grid=%zu,drops=%zu,episodes=%zu,seed=%llu",
                env.grid, env.drops, episodes, static_cast<unsigned long long>(cal_seed));
  cal.provenance = buf;
  return cal;
}

template <class T>
std::vector<T> parse_list(const std::string& text, const char* what) {
  std::vector<T> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t comma = std::min(text.find(',', pos), text.size());
    const std::string item = text.substr(pos, comma - pos);
    std::size_t used = 0;
    try {
      if constexpr (std::is_integral_v<T>) {
        if (item.empty() || item[0] == '-') throw std::invalid_argument(item);
        out.push_back(static_cast<T>(std::stoull(item, &used)));
      } else {
        out.push_back(static_cast<T>(std::stod(item, &used)));
      }
    } catch (const std::exception&) {
      used = std::string::npos;
    }
    if (item.empty() || used != item.size())
      throw ConfigError(std::string("malformed ") + what + " value '" + item + "' in '" + text +
                        "'");
    pos = comma + 1;
  }
  return out;
}

std::string real(double v) { return format_real(v); }

void print_report(const ConversionReport& r) {
  std::printf("decisions %zu  agreements %zu  CR %s\n", r.decisions, r.agreements,
              real(r.conversion_rate).c_str());
  std::printf("score %s +- %s  (source %s +- %s)\n", real(r.mean_score).c_str(),
              real(r.std_score).c_str(), real(r.mean_source_score).c_str(),
              real(r.std_source_score).c_str());
  if (r.diagnostics.runs)
    std::printf("diagnostics: runs %zu  max identity residual %.3e  mean readout error %s\n",
                r.diagnostics.runs, r.diagnostics.max_identity_residual,
                real(r.diagnostics.mean_readout_error()).c_str());
}

Json diagnostics_summary(const EvalDiagnostics& d) {
  Json j;
  j["runs"] = d.runs;
  j["max_identity_residual"] = d.max_identity_residual;
  j["mean_readout_error"] = d.mean_readout_error();
  j["mean_settle_step"] = d.mean_settle_step();
  Json cases = Json::array();
  for (const CaseCounts& c : d.cases)
    cases.push_back({{"charged", c.charged},
                     {"overdraft", c.overdraft},
                     {"suppressed", c.suppressed},
                     {"idle", c.idle},
                     {"impossible", c.impossible}});
  j["cases"] = std::move(cases);
  return j;
}

// ---------------------------------------------------------------------------

int cmd_stats(const Common& c, const NormFlags& n, const std::string& out) {
  const NormConfig cfg = n.config();
  const NetworkSpec net = load_source(c);
  const Calibration cal = calibration(net, c, n);
  const NormStats s = collect_stats(net, cal.frames, cfg, cal.provenance);
  for (const auto& w : s.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
  write_stats(s, out);
  std::printf("wrote %s (%zu scales from %zu frames)\n", out.c_str(), s.lambda.size(),
              std::min(cal.frames.size(), cfg.max_frames));
  return 0;
}

int cmd_normalize(const Common& c, const std::string& stats_path, const std::string& out) {
  const NetworkSpec net = load_source(c);
  const NormStats s = read_stats(stats_path);
  save_model(apply_normalization(net, s), out);
  std::printf("wrote %s\n", out.c_str());
  return 0;
}

int cmd_simulate(const Common& c, const SimFlags& sf, const std::string& frame_path,
                 bool diagnose, const std::string& diag_out) {
  const SimConfig cfg = sf.config();
  const NetworkSpec net = load_source(c);
  const auto frames = read_frames(frame_path, net.input_shape);
  Simulator sim(net, cfg);
  Json diag = Json::array();
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const SimResult r = sim.run(frames[i]);
    const auto q = readout(r, cfg);
    std::printf("frame %zu q [", i);
    for (std::size_t k = 0; k < q.size(); ++k)
      std::printf("%s%s", k ? ", " : "", real(q[k]).c_str());
    std::printf("] action %zu\n", greedy_action(q));
    if (diagnose) {
      Json d = diagnostics_json(r, net, cfg);
      double worst = 0.0;
      for (const auto& l : d["layers"]) worst = std::max(worst, l["identity_residual"].get<double>());
      std::printf("frame %zu max identity residual %.3e\n", i, worst);
      diag.push_back(std::move(d));
    }
  }
  if (diagnose && !diag_out.empty()) {
    detail::write_file(diag_out, diag.dump(2) + "\n");
    std::printf("wrote %s\n", diag_out.c_str());
  }
  return 0;
}

int cmd_replay(const Common& c, const SimFlags& sf, const EvalFlags& ef,
               const std::vector<std::string>& trace_paths, const std::string& source_dir,
               const std::string& out) {
  const SimConfig sim = sf.config();
  const EvalConfig ec = ef.config(c.seed);
  const NetworkSpec snn = load_source(c);
  std::optional<NetworkSpec> source;
  if (!source_dir.empty()) source = load_model(source_dir);
  std::vector<EpisodeTrace> traces;
  for (const auto& p : trace_paths) traces.push_back(read_trace(p));
  const ConversionReport r =
      evaluate_traces(traces, snn, sim, source ? &*source : nullptr, ec);
  print_report(r);
  const std::vector<ReportRow> rows{
      detail::make_row("timesteps", static_cast<double>(sim.timesteps), r)};
  write_report(rows, out);
  std::printf("wrote %s\n", out.c_str());
  return 0;
}

NetworkSpec spiking_network(const NetworkSpec& source, const std::string& snn_dir,
                            const Common& c, const NormFlags& n, std::string& provenance) {
  if (!snn_dir.empty()) {
    provenance = "model:" + snn_dir;
    return load_model(snn_dir);
  }
  const Calibration cal = calibration(source, c, n);
  provenance = cal.provenance;
  return apply_normalization(source, collect_stats(source, cal.frames, n.config(), cal.provenance));
}

int cmd_play(const Common& c, const SimFlags& sf, const EvalFlags& ef, const NormFlags& n,
             const std::string& snn_dir, const std::string& out) {
  const SimConfig sim = sf.config();
  const EvalConfig ec = ef.config(c.seed);
  const LineCatchConfig env = env_config(c);
  const NetworkSpec source = load_source(c);
  std::string provenance;
  const NetworkSpec snn = spiking_network(source, snn_dir, c, n, provenance);
  const ConversionReport r = evaluate_env(env, source, snn, sim, ec);
  print_report(r);
  const std::vector<ReportRow> rows{
      detail::make_row("timesteps", static_cast<double>(sim.timesteps), r)};
  write_report(rows, out);
  std::printf("wrote %s\n", out.c_str());
  return 0;
}

int cmd_sweep(const Common& c, const SimFlags& sf, const EvalFlags& ef, const NormFlags& n,
              const std::string& mode, const std::optional<std::string>& values,
              std::string out) {
  const SimConfig base = sf.config();
  const EvalConfig ec = ef.config(c.seed);
  const NormConfig nc = n.config();
  const LineCatchConfig env = env_config(c);
  if (out.empty()) out = "sweep_" + mode + ".csv";

  const NetworkSpec source = load_source(c);
  const Calibration cal = calibration(source, c, n);
  const EvaluateFn eval = [&](const NetworkSpec& snn, const SimConfig& sim) {
    return evaluate_env(env, source, snn, sim, ec);
  };

  Json meta;
  std::vector<SweepPoint> points;
  if (mode == "time") {
    const auto ts = values ? parse_list<std::size_t>(*values, "timesteps") : kDefaultTimesteps;
    if (ts.empty()) throw ConfigError("empty --values");
    const NormStats stats = collect_stats(source, cal.frames, nc, cal.provenance);
    const NetworkSpec snn = apply_normalization(source, stats);
    points = sweep_time(snn, ts, base, eval);
    meta["values"] = ts;
    meta["lambda"] = stats.lambda;
  } else {
    const auto ps = values ? parse_list<double>(*values, "percentile") : kDefaultPercentiles;
    if (ps.empty()) throw ConfigError("empty --values");
    for (double p : ps) NormConfig{p, nc.max_frames}.validate();
    points = sweep_percentile(source, cal.frames, ps, nc, base, eval);
    meta["values"] = ps;
  }

  const auto rows = rows_of(points);
  write_report(rows, out);

  meta["mode"] = mode;
  meta["episodes"] = ec.episodes;
  meta["epsilon"] = ec.epsilon;
  meta["max_noop"] = ec.max_noop;
  meta["frame_budget"] = ec.frame_budget;
  meta["cr_mode"] = to_string(ec.cr_mode);
  meta["seed"] = ec.seed;
  meta["percentile"] = nc.percentile;
  meta["max_frames"] = nc.max_frames;
  meta["timesteps"] = base.timesteps;
  meta["v_thr"] = base.v_thr;
  meta["readout"] = to_string(base.readout);
  meta["carry_potential"] = base.carry_potential;
  meta["environment"] = {{"name", "linecatch"}, {"grid", env.grid}, {"drops", env.drops}};
  meta["model"] = c.model.empty() ? "builtin:linecatch" : c.model;
  meta["calibration"] = {{"provenance", cal.provenance}, {"frames", cal.frames.size()}};
  Json pts = Json::array();
  for (const auto& p : points) {
    Json j;
    j["value"] = p.row.value;
    j["conversion_rate"] = p.report.conversion_rate;
    j["decisions"] = p.report.decisions;
    j["mean_source_score"] = p.report.mean_source_score;
    if (!p.stats.lambda.empty()) j["lambda"] = p.stats.lambda;
    if (ec.diagnose) j["diagnostics"] = diagnostics_summary(p.report.diagnostics);
    pts.push_back(std::move(j));
  }
  meta["points"] = std::move(pts);
  const std::string meta_path = out + ".meta.json";
  detail::write_file(meta_path, meta.dump(2) + "\n");

  for (const auto& r : rows)
    std::printf("%s=%s  score %s  CR %s\n", r.sweep_param.c_str(), real(r.value).c_str(),
                real(r.mean_score).c_str(), real(r.mean_cr).c_str());
  std::printf("pearson(score, CR) %s\nwrote %s and %s\n",
              real(rows.empty() ? 0.0 : rows[0].pearson_score_cr).c_str(), out.c_str(),
              meta_path.c_str());
  return 0;
}

int cmd_record(const Common& c, const EvalFlags& ef, const std::string& out_dir) {
  const EvalConfig ec = ef.config(c.seed);
  const LineCatchConfig env = env_config(c);
  const NetworkSpec source = load_source(c);
  std::error_code err;
  fs::create_directories(out_dir, err);
  if (err) throw IoError(out_dir + ": " + err.message());
  std::vector<Tensor> all;
  for (std::size_t i = 0; i < ec.episodes; ++i) {
    const std::uint64_t s = derive_seed(ec.seed, i);
    LineCatch game(env, derive_seed(s, 0));
    Rng rng(derive_seed(s, 1));
    AnalogAgent agent(source);
    const EpisodeRecord rec = play_episode(game, agent, ec, rng, nullptr, true);
    EpisodeTrace trace;
    trace.action_count = static_cast<std::uint32_t>(LineCatch::kActions);
    trace.observation_shape = game.observation_shape();
    for (std::size_t k = 0; k < rec.frames.size(); ++k) {
      trace.steps.push_back({rec.frames[k], static_cast<std::uint32_t>(rec.greedy_actions[k]),
                             rec.rewards[k]});
      all.push_back(rec.frames[k]);
    }
    char name[32];
    std::snprintf(name, sizeof name, "trace_%04zu.bin", i);
    write_trace(trace, fs::path(out_dir) / name);
  }
  if (!all.empty()) write_frames(fs::path(out_dir) / "frames.bin", all);
  std::printf("wrote %zu traces and %zu frames to %s\n", ec.episodes, all.size(),
              out_dir.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rateconv: convert ReLU Q-networks to integrate-and-fire networks and "
               "measure the conversion"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");

  Common common;
  SimFlags sim;
  EvalFlags eval;
  NormFlags norm;
  std::string stats_out = "stats.json", replay_out = "replay.csv", play_out = "play.csv";
  std::string out, stats_path, frame_path, diag_out, snn_dir, source_dir, mode;
  std::optional<std::string> values;
  std::vector<std::string> traces;
  bool diagnose = false;

  auto* stats = app.add_subcommand("stats", "Collect normalization scales");
  add_common(stats, common);
  add_norm(stats, norm);
  stats->add_option("--out", stats_out, "Stats JSON")->capture_default_str();

  auto* normalize = app.add_subcommand("normalize", "Apply normalization scales to a model");
  add_common(normalize, common, false);
  normalize->add_option("--stats", stats_path, "Stats JSON")->required();
  normalize->add_option("--out", out, "Output model directory")->required();

  auto* simulate = app.add_subcommand("simulate", "Simulate one or more frames");
  add_common(simulate, common, false);
  add_sim(simulate, sim);
  simulate->add_option("--frame", frame_path, "Frame blob")->required();
  simulate->add_flag("--diagnose", diagnose, "Report identity residuals and case counts");
  simulate->add_option("--diag-out", diag_out, "Diagnostics JSON path (with --diagnose)");

  auto* replay = app.add_subcommand("replay", "Replay recorded traces through the spiking model");
  add_common(replay, common, false);
  add_sim(replay, sim);
  add_eval(replay, eval);
  replay->add_option("--trace", traces, "Trace files")->required();
  replay->add_option("--source", source_dir, "Source model for recomputed source actions");
  replay->add_option("--out", replay_out, "Report CSV")->capture_default_str();

  auto* play = app.add_subcommand("play", "Play LineCatch with the spiking model");
  add_common(play, common);
  add_sim(play, sim);
  add_eval(play, eval);
  add_norm(play, norm);
  play->add_option("--snn", snn_dir, "Pre-normalized spiking model (default: normalize --model)");
  play->add_option("--out", play_out, "Report CSV")->capture_default_str();

  auto* sweep = app.add_subcommand("sweep", "Sweep simulation length or percentile");
  add_common(sweep, common);
  add_sim(sweep, sim);
  add_eval(sweep, eval);
  add_norm(sweep, norm);
  sweep->add_option("--mode", mode, "Sweep parameter")
      ->check(CLI::IsMember({"time", "percentile"}))
      ->required();
  sweep->add_option("--values", values, "Comma-separated values");
  sweep->add_option("--out", out, "Report CSV (default sweep_<mode>.csv)");

  auto* record = app.add_subcommand("record", "Record LineCatch traces played by the source");
  add_common(record, common);
  add_eval(record, eval);
  record->add_option("--out", out, "Output directory")->required();

  auto* lc_model = app.add_subcommand("linecatch-model", "Write the built-in LineCatch network");
  lc_model->add_option("--grid", common.grid, "Grid size")->capture_default_str();
  lc_model->add_option("--out", out, "Output model directory")->required();

  // Sweeps default to 10 episodes per point, evaluations to 50.
  sweep->preparse_callback([&](std::size_t) { eval.episodes = 10; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*stats) return cmd_stats(common, norm, stats_out);
    if (*normalize) return cmd_normalize(common, stats_path, out);
    if (*simulate) return cmd_simulate(common, sim, frame_path, diagnose, diag_out);
    if (*replay) return cmd_replay(common, sim, eval, traces, source_dir, replay_out);
    if (*play) return cmd_play(common, sim, eval, norm, snn_dir, play_out);
    if (*sweep) return cmd_sweep(common, sim, eval, norm, mode, values, out);
    if (*record) return cmd_record(common, eval, out);
    if (*lc_model) {
      if (common.grid < 3) throw ConfigError("grid must be at least 3");
      save_model(linecatch_reference_network(common.grid), out);
      std::printf("wrote %s\n", out.c_str());
      return 0;
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  } catch (const DataError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitData;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitData;
  }
  return kExitUsage;
}
