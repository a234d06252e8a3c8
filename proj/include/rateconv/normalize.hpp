#pragma once

// Data-based parameter normalization: per-layer percentile scale factors
// collected over a calibration frame set, then w_l <- (lambda_{l-1} /
// lambda_l) w_l and b_l <- b_l / lambda_l.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "rateconv/error.hpp"
#include "rateconv/netcore.hpp"

namespace rateconv {

struct NormConfig {
  double percentile = 99.9;
  std::size_t max_frames = 15000;

  void validate() const {
    if (!(percentile >= 99.0 && percentile <= 100.0))
      throw ConfigError("percentile must lie in [99, 100], got " +
                        std::to_string(percentile));
    if (max_frames == 0) throw ConfigError("max_frames must be positive");
  }

  friend bool operator==(const NormConfig&, const NormConfig&) = default;
};

/// Scale factors indexed by population: lambda[0] = 1 for the input,
/// lambda[k] for the k-th parameterized layer.
struct NormStats {
  std::vector<double> lambda;
  std::vector<std::size_t> sample_counts;
  NormConfig config;
  std::string provenance;
  std::vector<std::string> warnings;

  friend bool operator==(const NormStats&, const NormStats&) = default;
};

/// Nearest-rank percentile: the k-th smallest sample, k = ceil(p/100 * n).
inline double percentile(std::vector<double> samples, double p) {
  if (samples.empty()) throw DataError("percentile: empty sample set");
  if (!(p > 0.0 && p <= 100.0))
    throw ConfigError("percentile: p must lie in (0, 100]");
  const double n = static_cast<double>(samples.size());
  const double rank = p * n / 100.0;
  // p * n / 100 lands a few ulps off an integer for decimal p (99.9 * 1000);
  // snap those to the integer so k is the exact rank.
  const double nearest = std::round(rank);
  double k = std::abs(rank - nearest) <= 1e-9 * std::max(1.0, rank)
                 ? nearest
                 : std::ceil(rank);
  k = std::clamp(k, 1.0, n);
  const auto idx = static_cast<std::size_t>(k) - 1;
  std::nth_element(samples.begin(), samples.begin() + static_cast<std::ptrdiff_t>(idx),
                   samples.end());
  return samples[idx];
}

/// Collects per-layer activation percentiles over at most
/// `config.max_frames` frames. Every scalar post-activation value of a
/// layer across all frames enters its sample set; the final layer
/// contributes the positive part of its outputs.
inline NormStats collect_stats(const NetworkSpec& net, std::span<const Tensor> frames,
                               const NormConfig& config,
                               std::string provenance = {}) {
  config.validate();
  require_valid(net);
  if (frames.empty()) throw DataError("collect_stats: no calibration frames");

  const std::size_t used = std::min(frames.size(), config.max_frames);
  const std::size_t layers = net.parameterized_layers().size();
  std::vector<std::vector<double>> samples(layers + 1);

  for (std::size_t f = 0; f < used; ++f) {
    const ActivationTrace trace = forward(net, frames[f]);
    for (std::size_t l = 1; l <= layers; ++l) {
      auto& dst = samples[l];
      for (double v : trace.values[l]) dst.push_back(std::max(v, 0.0));
    }
  }

  NormStats stats;
  stats.config = config;
  stats.provenance = std::move(provenance);
  stats.lambda.assign(layers + 1, 1.0);
  stats.sample_counts.assign(layers + 1, 0);
  stats.sample_counts[0] = used * shape_size(net.input_shape);
  for (std::size_t l = 1; l <= layers; ++l) {
    stats.sample_counts[l] = samples[l].size();
    const double lam = percentile(std::move(samples[l]), config.percentile);
    if (lam > 0.0) {
      stats.lambda[l] = lam;
    } else {
      stats.warnings.push_back("layer " + std::to_string(l) +
                               ": percentile activation is zero, lambda set to 1");
    }
  }
  return stats;
}

/// Returns the rescaled network; `net` is not modified.
inline NetworkSpec apply_normalization(const NetworkSpec& net, const NormStats& stats) {
  const auto params = net.parameterized_layers();
  if (stats.lambda.size() != params.size() + 1)
    throw DataError("normalization stats have " + std::to_string(stats.lambda.size()) +
                    " scale factors, network needs " +
                    std::to_string(params.size() + 1));
  for (std::size_t l = 0; l < stats.lambda.size(); ++l) {
    if (!(stats.lambda[l] > 0.0) || !std::isfinite(stats.lambda[l]))
      throw DataError("scale factor lambda[" + std::to_string(l) +
                      "] must be positive and finite");
  }

  NetworkSpec out = net;
  for (std::size_t k = 0; k < params.size(); ++k) {
    LayerSpec& layer = out.layers[params[k]];
    const double w_scale = stats.lambda[k] / stats.lambda[k + 1];
    for (float& w : layer.weights.data)
      w = static_cast<float>(static_cast<double>(w) * w_scale);
    for (float& b : layer.bias.data)
      b = static_cast<float>(static_cast<double>(b) / stats.lambda[k + 1]);
  }
  return out;
}

}  // namespace rateconv
