#pragma once

// Integrate-and-fire simulation of a converted network.
//
// Each population (the input plus every parameterized layer) is a set of
// non-leaky IF neurons with soft reset:
//
//   z_l(t)     = W_l theta_{l-1}(t) + b_l      (layer 0: z_0 = a_0)
//   theta_l(t) = [V_l(t-1) + z_l(t) >= v_thr]
//   V_l(t)     = V_l(t-1) + z_l(t) - v_thr theta_l(t)
//
// Within one step layers update in order, so layer l sees the spikes layer
// l-1 emitted in the same step. Summing the update over T steps gives the
// exact accounting  T v_thr r_l + V_l(T) - V_l(0) = sum_t z_l(t),  which the
// diagnostics below check.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "rateconv/error.hpp"
#include "rateconv/netcore.hpp"

namespace rateconv {

enum class Readout { rate, robust };

inline const char* to_string(Readout r) { return r == Readout::rate ? "rate" : "robust"; }

struct SimConfig {
  std::size_t timesteps = 500;
  double v_thr = 1.0;
  Readout readout = Readout::robust;
  // Keep membrane potentials across consecutive decisions instead of
  // starting every frame from zero.
  bool carry_potential = false;

  void validate() const {
    if (timesteps < 1) throw ConfigError("timesteps must be >= 1");
    if (!(v_thr > 0.0) || !std::isfinite(v_thr))
      throw ConfigError("v_thr must be positive and finite");
  }
};

/// One IF update with soft reset. Returns true on a spike.
inline bool integrate_and_fire(double& potential, double current, double v_thr) {
  potential += current;
  if (potential >= v_thr) {
    potential -= v_thr;
    return true;
  }
  return false;
}

/// A lone IF neuron driven by an arbitrary current sequence.
struct IfNeuron {
  double potential = 0.0;
  double current_sum = 0.0;
  std::uint32_t spikes = 0;
  std::uint32_t steps = 0;

  bool step(double current, double v_thr) {
    current_sum += current;
    ++steps;
    const bool fired = integrate_and_fire(potential, current, v_thr);
    spikes += fired;
    return fired;
  }

  double rate() const { return steps ? static_cast<double>(spikes) / steps : 0.0; }
  double residual() const { return steps ? potential / steps : 0.0; }
  double total_current(double v_thr) const {
    return steps ? current_sum / (steps * v_thr) : 0.0;
  }
};

/// Membrane state of every population. Index 0 is the input population.
struct SimState {
  std::vector<Shape> shapes;
  std::vector<std::vector<double>> potentials;
  std::vector<std::vector<double>> initial_potentials;
  std::vector<std::vector<std::uint8_t>> spikes;
  std::vector<std::vector<std::uint32_t>> counts;
  std::vector<std::vector<double>> current_sums;
  std::size_t t = 0;

  std::size_t population_count() const noexcept { return shapes.size(); }
  friend bool operator==(const SimState&, const SimState&) = default;
};

struct SimResult {
  std::size_t timesteps = 0;
  double v_thr = 1.0;
  std::vector<Shape> shapes;
  std::vector<double> input;                       // a_0
  std::vector<std::vector<std::uint32_t>> counts;
  std::vector<std::vector<double>> rates;          // counts / T
  std::vector<std::vector<double>> potentials;     // V_l(T)
  std::vector<std::vector<double>> residuals;      // (V_l(T) - V_l(0)) / T
  std::vector<std::vector<double>> total_current;  // sum_t z_l(t) / (T v_thr)
  std::vector<double> f_last;                      // robust last-layer readout
  // Step after which the last-layer argmax (under the configured readout)
  // never changed again.
  std::size_t settle_step = 0;
};

namespace detail {

struct CompiledLayer {
  LayerKind kind = LayerKind::dense;
  std::size_t in_size = 0, out_size = 0;
  std::vector<double> bias;
  // dense: [in][out] (transposed for scatter over input spikes).
  // conv2d: [in_ch][kh][kw][out_ch].
  std::vector<double> weights;
  std::size_t ic = 0, ih = 0, iw = 0, oc = 0, oh = 0, ow = 0;
  std::size_t kh = 0, kw = 0, sh = 1, sw = 1, ph = 0, pw = 0;
};

struct CompiledNetwork {
  std::vector<Shape> shapes;
  std::vector<CompiledLayer> layers;
};

inline CompiledNetwork compile(const NetworkSpec& net) {
  require_valid(net);
  CompiledNetwork c;
  c.shapes = population_shapes(net);
  Shape cur = net.input_shape;
  for (const LayerSpec& spec : net.layers) {
    std::string why;
    Shape next = *detail::layer_output_shape(spec, cur, &why);
    if (spec.parameterized()) {
      CompiledLayer cl;
      cl.kind = spec.kind;
      cl.in_size = shape_size(cur);
      cl.out_size = shape_size(next);
      cl.bias.assign(spec.bias.data.begin(), spec.bias.data.end());
      const auto& w = spec.weights.data;
      if (spec.kind == LayerKind::dense) {
        cl.weights.resize(w.size());
        for (std::size_t o = 0; o < cl.out_size; ++o)
          for (std::size_t i = 0; i < cl.in_size; ++i)
            cl.weights[i * cl.out_size + o] = w[o * cl.in_size + i];
      } else {
        const Shape& ws = spec.weights.shape;
        cl.oc = ws[0], cl.ic = ws[1], cl.kh = ws[2], cl.kw = ws[3];
        cl.ih = cur[1], cl.iw = cur[2], cl.oh = next[1], cl.ow = next[2];
        cl.sh = spec.stride[0], cl.sw = spec.stride[1];
        cl.ph = spec.padding[0], cl.pw = spec.padding[1];
        cl.weights.resize(w.size());
        for (std::size_t o = 0; o < cl.oc; ++o)
          for (std::size_t ci = 0; ci < cl.ic; ++ci)
            for (std::size_t ky = 0; ky < cl.kh; ++ky)
              for (std::size_t kx = 0; kx < cl.kw; ++kx)
                cl.weights[((ci * cl.kh + ky) * cl.kw + kx) * cl.oc + o] =
                    w[((o * cl.ic + ci) * cl.kh + ky) * cl.kw + kx];
        // one bias entry per output neuron
        cl.bias.resize(cl.out_size);
        for (std::size_t o = 0; o < cl.oc; ++o)
          std::fill_n(cl.bias.begin() + static_cast<std::ptrdiff_t>(o * cl.oh * cl.ow),
                      cl.oh * cl.ow, static_cast<double>(spec.bias.data[o]));
      }
      c.layers.push_back(std::move(cl));
    }
    cur = std::move(next);
  }
  return c;
}

/// z = b + sum over spiking inputs of their outgoing weights.
inline void accumulate_current(const CompiledLayer& layer,
                               std::span<const std::uint32_t> spiking,
                               std::span<double> z) {
  std::copy(layer.bias.begin(), layer.bias.end(), z.begin());
  const std::size_t plane = layer.oh * layer.ow;
  if (layer.kind == LayerKind::dense) {
    const std::size_t out = layer.out_size;
    for (std::uint32_t i : spiking) {
      const double* row = layer.weights.data() + static_cast<std::size_t>(i) * out;
      for (std::size_t o = 0; o < out; ++o) z[o] += row[o];
    }
    return;
  }
  for (std::uint32_t s : spiking) {
    const std::size_t c = s / (layer.ih * layer.iw);
    const std::size_t y = (s / layer.iw) % layer.ih;
    const std::size_t x = s % layer.iw;
    for (std::size_t ky = 0; ky < layer.kh; ++ky) {
      const std::ptrdiff_t ny = static_cast<std::ptrdiff_t>(y + layer.ph) -
                                static_cast<std::ptrdiff_t>(ky);
      if (ny < 0 || ny % static_cast<std::ptrdiff_t>(layer.sh) != 0) continue;
      const std::size_t oy = static_cast<std::size_t>(ny) / layer.sh;
      if (oy >= layer.oh) continue;
      for (std::size_t kx = 0; kx < layer.kw; ++kx) {
        const std::ptrdiff_t nx = static_cast<std::ptrdiff_t>(x + layer.pw) -
                                  static_cast<std::ptrdiff_t>(kx);
        if (nx < 0 || nx % static_cast<std::ptrdiff_t>(layer.sw) != 0) continue;
        const std::size_t ox = static_cast<std::size_t>(nx) / layer.sw;
        if (ox >= layer.ow) continue;
        const double* w =
            layer.weights.data() + ((c * layer.kh + ky) * layer.kw + kx) * layer.oc;
        double* dst = z.data() + oy * layer.ow + ox;
        for (std::size_t o = 0; o < layer.oc; ++o) dst[o * plane] += w[o];
      }
    }
  }
}

}  // namespace detail

/// Owns a compiled network and one simulation state. Not thread-safe; run
/// independent simulators for parallel work.
class Simulator {
 public:
  Simulator(const NetworkSpec& net, SimConfig config)
      : net_(std::make_shared<const detail::CompiledNetwork>(detail::compile(net))),
        config_(config) {
    config_.validate();
    reset();
  }

  const SimConfig& config() const noexcept { return config_; }
  const SimState& state() const noexcept { return state_; }
  const std::vector<Shape>& shapes() const noexcept { return net_->shapes; }

  /// Zeroes every potential, indicator, count and accumulator.
  void reset() {
    const std::size_t pops = net_->shapes.size();
    state_.shapes = net_->shapes;
    state_.potentials.assign(pops, {});
    state_.initial_potentials.assign(pops, {});
    state_.spikes.assign(pops, {});
    state_.counts.assign(pops, {});
    state_.current_sums.assign(pops, {});
    spiking_.assign(pops, {});
    z_.assign(pops, {});
    for (std::size_t p = 0; p < pops; ++p) {
      const std::size_t n = shape_size(net_->shapes[p]);
      state_.potentials[p].assign(n, 0.0);
      state_.initial_potentials[p].assign(n, 0.0);
      state_.spikes[p].assign(n, 0);
      state_.counts[p].assign(n, 0);
      state_.current_sums[p].assign(n, 0.0);
      spiking_[p].reserve(n);
      z_[p].assign(n, 0.0);
    }
    state_.t = 0;
    last_argmax_ = 0;
    settle_step_ = 0;
  }

  /// Starts a new decision window: counts and accumulators restart at zero;
  /// potentials restart at zero unless carry_potential is set.
  void begin_decision() {
    if (!config_.carry_potential) {
      reset();
      return;
    }
    for (std::size_t p = 0; p < state_.potentials.size(); ++p) {
      state_.initial_potentials[p] = state_.potentials[p];
      std::fill(state_.spikes[p].begin(), state_.spikes[p].end(), 0);
      std::fill(state_.counts[p].begin(), state_.counts[p].end(), 0u);
      std::fill(state_.current_sums[p].begin(), state_.current_sums[p].end(), 0.0);
    }
    state_.t = 0;
    last_argmax_ = 0;
    settle_step_ = 0;
  }

  /// Continues from an externally held state of matching shape.
  void adopt(SimState state) {
    if (state.shapes != net_->shapes)
      throw ShapeError("simulation state does not match the network");
    state_ = std::move(state);
  }

  /// Advances one time step with constant input `frame`.
  const SimState& step(const Tensor& frame) {
    check_frame(frame, net_->shapes[0]);
    step_unchecked(frame);
    return state_;
  }

  /// Runs one full decision window of `timesteps` steps on `frame`.
  SimResult run(const Tensor& frame) {
    check_frame(frame, net_->shapes[0]);
    begin_decision();
    for (std::size_t t = 0; t < config_.timesteps; ++t) step_unchecked(frame);
    return result(frame);
  }

  /// Snapshot of the readouts at the current step.
  SimResult result(const Tensor& frame) const {
    SimResult r;
    const std::size_t T = state_.t;
    r.timesteps = T;
    r.v_thr = config_.v_thr;
    r.shapes = state_.shapes;
    r.input.assign(frame.data.begin(), frame.data.end());
    r.counts = state_.counts;
    r.potentials = state_.potentials;
    const std::size_t pops = state_.shapes.size();
    r.rates.resize(pops);
    r.residuals.resize(pops);
    r.total_current.resize(pops);
    const double tt = T ? static_cast<double>(T) : 1.0;
    for (std::size_t p = 0; p < pops; ++p) {
      const std::size_t n = state_.counts[p].size();
      r.rates[p].resize(n);
      r.residuals[p].resize(n);
      r.total_current[p].resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        r.rates[p][i] = T ? state_.counts[p][i] / tt : 0.0;
        r.residuals[p][i] =
            T ? (state_.potentials[p][i] - state_.initial_potentials[p][i]) / tt : 0.0;
        r.total_current[p][i] = T ? state_.current_sums[p][i] / (tt * config_.v_thr) : 0.0;
      }
    }
    const auto& rl = r.rates.back();
    const auto& dv = r.residuals.back();
    r.f_last.resize(rl.size());
    for (std::size_t i = 0; i < rl.size(); ++i) r.f_last[i] = rl[i] + dv[i] / config_.v_thr;
    r.settle_step = settle_step_;
    return r;
  }

 private:
  void step_unchecked(const Tensor& frame) {
    const double v_thr = config_.v_thr;
    {
      auto& v = state_.potentials[0];
      auto& theta = state_.spikes[0];
      auto& cnt = state_.counts[0];
      auto& sum = state_.current_sums[0];
      auto& spk = spiking_[0];
      spk.clear();
      for (std::size_t i = 0; i < v.size(); ++i) {
        const double z = frame.data[i];
        sum[i] += z;
        const bool fired = integrate_and_fire(v[i], z, v_thr);
        theta[i] = fired;
        if (fired) {
          ++cnt[i];
          spk.push_back(static_cast<std::uint32_t>(i));
        }
      }
    }
    for (std::size_t l = 1; l < state_.shapes.size(); ++l) {
      auto& z = z_[l];
      detail::accumulate_current(net_->layers[l - 1], spiking_[l - 1], z);
      auto& v = state_.potentials[l];
      auto& theta = state_.spikes[l];
      auto& cnt = state_.counts[l];
      auto& sum = state_.current_sums[l];
      auto& spk = spiking_[l];
      spk.clear();
      for (std::size_t i = 0; i < v.size(); ++i) {
        sum[i] += z[i];
        const bool fired = integrate_and_fire(v[i], z[i], v_thr);
        theta[i] = fired;
        if (fired) {
          ++cnt[i];
          spk.push_back(static_cast<std::uint32_t>(i));
        }
      }
    }
    ++state_.t;
    track_argmax();
  }

  void track_argmax() {
    const std::size_t last = state_.shapes.size() - 1;
    const auto& cnt = state_.counts[last];
    const auto& v = state_.potentials[last];
    const auto& v0 = state_.initial_potentials[last];
    const bool robust = config_.readout == Readout::robust;
    auto score = [&](std::size_t i) {
      return robust ? cnt[i] * config_.v_thr + (v[i] - v0[i]) : static_cast<double>(cnt[i]);
    };
    std::size_t best = 0;
    double best_score = score(0);
    for (std::size_t i = 1; i < cnt.size(); ++i) {
      const double s = score(i);
      if (s > best_score) best = i, best_score = s;
    }
    if (state_.t == 1 || best != last_argmax_) settle_step_ = state_.t;
    last_argmax_ = best;
  }

  std::shared_ptr<const detail::CompiledNetwork> net_;
  SimConfig config_;
  SimState state_;
  std::vector<std::vector<std::uint32_t>> spiking_;
  std::vector<std::vector<double>> z_;
  std::size_t last_argmax_ = 0;
  std::size_t settle_step_ = 0;
};

/// Fresh all-zero state sized to the network's populations.
inline SimState init_sim(const NetworkSpec& net, const SimConfig& config) {
  return Simulator(net, config).state();
}

/// Advances `state` by one step. Compiles `net` on every call; use
/// Simulator for repeated stepping.
inline const SimState& step(SimState& state, const NetworkSpec& net, const Tensor& frame,
                            const SimConfig& config) {
  Simulator sim(net, config);
  sim.adopt(std::move(state));
  state = sim.step(frame);
  return state;
}

/// Deterministic T-step simulation of `net` on a constant frame.
inline SimResult run(const NetworkSpec& net, const Tensor& frame, const SimConfig& config) {
  Simulator sim(net, config);
  return sim.run(frame);
}

inline std::vector<double> rate_readout(const SimResult& result) { return result.rates.back(); }

/// f_last = r_last + V_last(T) / (T v_thr).
inline std::vector<double> robust_readout(const SimResult& result, const SimConfig& config) {
  const auto& r = result.rates.back();
  const auto& dv = result.residuals.back();
  std::vector<double> f(r.size());
  for (std::size_t i = 0; i < r.size(); ++i) f[i] = r[i] + dv[i] / config.v_thr;
  return f;
}

inline std::vector<double> readout(const SimResult& result, const SimConfig& config) {
  return config.readout == Readout::rate ? rate_readout(result)
                                         : robust_readout(result, config);
}

/// Per population, the max-norm of r_l - (W_l r_{l-1} + b_l - dV_l) / v_thr
/// (input layer: r_0 - (a_0 - dV_0) / v_thr). The affine map is recomputed
/// from `net`, independently of the simulator's current accumulation.
inline std::vector<double> layer_identity_residual(const SimResult& result,
                                                   const NetworkSpec& net,
                                                   const SimConfig& config) {
  const double v_thr = config.v_thr;
  std::vector<double> out(result.rates.size(), 0.0);
  for (std::size_t i = 0; i < result.input.size(); ++i) {
    const double expect = (result.input[i] - result.residuals[0][i]) / v_thr;
    out[0] = std::max(out[0], std::abs(result.rates[0][i] - expect));
  }
  Shape cur = net.input_shape;
  std::size_t pop = 0;
  for (const LayerSpec& layer : net.layers) {
    std::string why;
    auto next = detail::layer_output_shape(layer, cur, &why);
    if (!next) throw ShapeError(why);
    if (layer.parameterized()) {
      const auto pre = apply_affine(layer, cur, result.rates[pop]);
      ++pop;
      if (pop >= result.rates.size() || pre.size() != result.rates[pop].size())
        throw ShapeError("simulation result does not match the network");
      for (std::size_t i = 0; i < pre.size(); ++i) {
        const double expect = (pre[i] - result.residuals[pop][i]) / v_thr;
        out[pop] = std::max(out[pop], std::abs(result.rates[pop][i] - expect));
      }
    }
    cur = std::move(*next);
  }
  return out;
}

/// Sign pattern of the total input R and the residual dV = dV_l / v_thr.
enum class ResidualCase {
  charged,     // R > 0, dV >= 0: r lies in (R - 1/T, R]
  overdraft,   // R > 0, dV < 0: late negative input, r > R
  suppressed,  // R <= 0, dV < 0
  idle,        // R <= 0, dV == 0
  impossible,  // R <= 0, dV > 0
};

inline ResidualCase classify_neuron(double total_current, double scaled_residual) {
  if (total_current > 0.0)
    return scaled_residual >= 0.0 ? ResidualCase::charged : ResidualCase::overdraft;
  if (scaled_residual < 0.0) return ResidualCase::suppressed;
  return scaled_residual > 0.0 ? ResidualCase::impossible : ResidualCase::idle;
}

struct CaseCounts {
  std::size_t charged = 0;
  std::size_t overdraft = 0;
  std::size_t suppressed = 0;
  std::size_t idle = 0;
  std::size_t impossible = 0;

  void add(ResidualCase c) {
    switch (c) {
      case ResidualCase::charged: ++charged; break;
      case ResidualCase::overdraft: ++overdraft; break;
      case ResidualCase::suppressed: ++suppressed; break;
      case ResidualCase::idle: ++idle; break;
      case ResidualCase::impossible: ++impossible; break;
    }
  }
  CaseCounts& operator+=(const CaseCounts& o) {
    charged += o.charged, overdraft += o.overdraft, suppressed += o.suppressed;
    idle += o.idle, impossible += o.impossible;
    return *this;
  }
  std::size_t total() const { return charged + overdraft + suppressed + idle + impossible; }
  friend bool operator==(const CaseCounts&, const CaseCounts&) = default;
};

/// Case counts per population.
inline std::vector<CaseCounts> classify_residual_cases(const SimResult& result) {
  std::vector<CaseCounts> out(result.rates.size());
  for (std::size_t p = 0; p < result.rates.size(); ++p)
    for (std::size_t i = 0; i < result.rates[p].size(); ++i)
      out[p].add(classify_neuron(result.total_current[p][i],
                                 result.residuals[p][i] / result.v_thr));
  return out;
}

}  // namespace rateconv
