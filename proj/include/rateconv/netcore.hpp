#pragma once

// Feedforward analog reference network: dense, conv2d, flatten and ReLU,
// with per-layer activation capture and greedy / epsilon-greedy policies.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "rateconv/error.hpp"
#include "rateconv/tensor.hpp"

namespace rateconv {

enum class LayerKind { dense, conv2d, flatten };
enum class Activation { relu, none };

using Rng = std::mt19937_64;

inline const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::dense: return "dense";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::flatten: return "flatten";
  }
  return "?";
}

inline const char* to_string(Activation act) {
  return act == Activation::relu ? "relu" : "none";
}

/// One layer of the network. Dense weights are [out, in]; conv2d weights are
/// [out_ch, in_ch, kh, kw] applied as zero-padded cross-correlation. Flatten
/// carries no parameters.
struct LayerSpec {
  LayerKind kind = LayerKind::dense;
  Tensor weights;
  Tensor bias;
  std::array<std::size_t, 2> stride{1, 1};
  std::array<std::size_t, 2> padding{0, 0};
  Activation activation = Activation::relu;

  bool parameterized() const noexcept { return kind != LayerKind::flatten; }

  static LayerSpec dense(Tensor w, Tensor b, Activation act = Activation::relu) {
    LayerSpec l;
    l.kind = LayerKind::dense;
    l.weights = std::move(w);
    l.bias = std::move(b);
    l.activation = act;
    return l;
  }

  static LayerSpec conv2d(Tensor w, Tensor b, std::array<std::size_t, 2> stride,
                          std::array<std::size_t, 2> padding,
                          Activation act = Activation::relu) {
    LayerSpec l;
    l.kind = LayerKind::conv2d;
    l.weights = std::move(w);
    l.bias = std::move(b);
    l.stride = stride;
    l.padding = padding;
    l.activation = act;
    return l;
  }

  static LayerSpec flatten() {
    LayerSpec l;
    l.kind = LayerKind::flatten;
    l.activation = Activation::none;
    return l;
  }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct NetworkSpec {
  Shape input_shape;  // [channels, height, width] or [features]
  std::vector<LayerSpec> layers;

  /// Indices into `layers` of the dense/conv2d layers, in order.
  std::vector<std::size_t> parameterized_layers() const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < layers.size(); ++i)
      if (layers[i].parameterized()) idx.push_back(i);
    return idx;
  }

  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

struct Violation {
  int layer = -1;  // -1: network-level
  std::string message;
};

struct ValidationResult {
  std::vector<Violation> violations;

  bool ok() const noexcept { return violations.empty(); }
  std::string describe() const {
    std::string out;
    for (const auto& v : violations) {
      if (!out.empty()) out += "; ";
      if (v.layer >= 0) out += "layer " + std::to_string(v.layer) + ": ";
      out += v.message;
    }
    return out;
  }
};

namespace detail {

inline std::optional<Shape> conv_output_shape(const LayerSpec& layer,
                                              const Shape& in,
                                              std::string* why) {
  const Shape& w = layer.weights.shape;
  if (w.size() != 4) {
    if (why) *why = "conv2d weights must be rank 4, got " + shape_to_string(w);
    return std::nullopt;
  }
  if (in.size() != 3) {
    if (why) *why = "conv2d expects [c,h,w] input, got " + shape_to_string(in);
    return std::nullopt;
  }
  if (w[1] != in[0]) {
    if (why)
      *why = "conv2d expects " + std::to_string(w[1]) + " input channels, got " +
             std::to_string(in[0]);
    return std::nullopt;
  }
  if (layer.stride[0] < 1 || layer.stride[1] < 1) {
    if (why) *why = "conv2d stride must be >= 1";
    return std::nullopt;
  }
  const std::size_t ph = in[1] + 2 * layer.padding[0];
  const std::size_t pw = in[2] + 2 * layer.padding[1];
  if (w[2] == 0 || w[3] == 0 || w[2] > ph || w[3] > pw) {
    if (why) *why = "conv2d kernel " + shape_to_string(w) + " does not fit input " +
                    shape_to_string(in);
    return std::nullopt;
  }
  return Shape{w[0], (ph - w[2]) / layer.stride[0] + 1,
               (pw - w[3]) / layer.stride[1] + 1};
}

/// Output shape of `layer` given input shape `in`, or nullopt with a reason.
inline std::optional<Shape> layer_output_shape(const LayerSpec& layer,
                                               const Shape& in,
                                               std::string* why) {
  switch (layer.kind) {
    case LayerKind::flatten:
      if (in.size() != 3) {
        if (why) *why = "flatten expects [c,h,w] input, got " + shape_to_string(in);
        return std::nullopt;
      }
      return Shape{shape_size(in)};
    case LayerKind::dense: {
      const Shape& w = layer.weights.shape;
      if (w.size() != 2) {
        if (why) *why = "dense weights must be rank 2, got " + shape_to_string(w);
        return std::nullopt;
      }
      if (in.size() != 1 || in[0] != w[1]) {
        if (why)
          *why = "dense expects input [" + std::to_string(w[1]) + "], got " +
                 shape_to_string(in);
        return std::nullopt;
      }
      return Shape{w[0]};
    }
    case LayerKind::conv2d:
      return conv_output_shape(layer, in, why);
  }
  return std::nullopt;
}

}  // namespace detail

/// Checks shape chaining and the structural invariants. Never throws;
/// every problem is reported as a violation naming its layer.
inline ValidationResult validate_network(const NetworkSpec& net) {
  ValidationResult result;
  auto add = [&](int layer, std::string msg) {
    result.violations.push_back({layer, std::move(msg)});
  };

  const Shape& in = net.input_shape;
  if (in.size() != 1 && in.size() != 3) {
    add(-1, "input shape must be [features] or [c,h,w], got " + shape_to_string(in));
    return result;
  }
  if (std::find(in.begin(), in.end(), std::size_t{0}) != in.end()) {
    add(-1, "input shape has a zero dimension");
    return result;
  }

  const auto params = net.parameterized_layers();
  if (params.empty()) add(-1, "network has no parameterized layer");

  std::size_t flattens = 0;
  bool seen_dense = false;
  std::optional<Shape> shape = in;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const LayerSpec& layer = net.layers[i];
    const int li = static_cast<int>(i);

    if (layer.kind == LayerKind::flatten) {
      if (++flattens > 1) add(li, "flatten may appear at most once");
      if (seen_dense) add(li, "flatten must precede the dense section");
      if (!layer.weights.empty() || !layer.bias.empty())
        add(li, "flatten carries no parameters");
      if (layer.activation != Activation::none)
        add(li, "flatten cannot have an activation");
    } else {
      if (layer.kind == LayerKind::dense) seen_dense = true;
      const std::size_t out = layer.weights.rank() ? layer.weights.shape[0] : 0;
      if (layer.bias.rank() != 1 || layer.bias.shape[0] != out) {
        add(li, "bias shape " + shape_to_string(layer.bias.shape) +
                    " does not match " + std::to_string(out) + " outputs");
      }
      if (layer.weights.size() != shape_size(layer.weights.shape) ||
          layer.bias.size() != shape_size(layer.bias.shape))
        add(li, "tensor data size does not match its shape");
      auto finite = [](const Tensor& t) {
        return std::all_of(t.data.begin(), t.data.end(),
                           [](float v) { return std::isfinite(v); });
      };
      if (!finite(layer.weights) || !finite(layer.bias))
        add(li, "parameters must be finite");
      const bool last = !params.empty() && i == params.back();
      if (!last && layer.activation != Activation::relu)
        add(li, "hidden layers must use relu");
    }

    if (!shape) continue;
    std::string why;
    shape = detail::layer_output_shape(layer, *shape, &why);
    if (!shape) add(li, why);
  }
  return result;
}

/// Throws ShapeError unless the network validates.
inline void require_valid(const NetworkSpec& net) {
  auto v = validate_network(net);
  if (!v.ok()) throw ShapeError("invalid network: " + v.describe());
}

/// Shapes of the input and of each parameterized layer's output. Requires a
/// chain-consistent network.
inline std::vector<Shape> population_shapes(const NetworkSpec& net) {
  std::vector<Shape> shapes{net.input_shape};
  Shape cur = net.input_shape;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    std::string why;
    auto next = detail::layer_output_shape(net.layers[i], cur, &why);
    if (!next) throw ShapeError("layer " + std::to_string(i) + ": " + why);
    cur = *next;
    if (net.layers[i].parameterized()) shapes.push_back(cur);
  }
  return shapes;
}

/// Pre-activation output W*x + b of a parameterized layer, in double
/// precision. `in_shape` is the shape the layer sees (flatten is a no-op on
/// the row-major buffer, so a dense layer after flatten sees [features]).
inline std::vector<double> apply_affine(const LayerSpec& layer,
                                        const Shape& in_shape,
                                        std::span<const double> x) {
  const auto& w = layer.weights.data;
  const auto& b = layer.bias.data;
  if (layer.kind == LayerKind::dense) {
    const std::size_t out = layer.weights.shape[0], in = layer.weights.shape[1];
    std::vector<double> y(out);
    for (std::size_t o = 0; o < out; ++o) {
      double acc = b[o];
      const float* row = w.data() + o * in;
      for (std::size_t i = 0; i < in; ++i) acc += static_cast<double>(row[i]) * x[i];
      y[o] = acc;
    }
    return y;
  }
  if (layer.kind != LayerKind::conv2d)
    throw ShapeError("apply_affine: layer is not parameterized");

  const Shape& ws = layer.weights.shape;
  const std::size_t oc = ws[0], ic = ws[1], kh = ws[2], kw = ws[3];
  const std::size_t ih = in_shape[1], iw = in_shape[2];
  const std::size_t sh = layer.stride[0], sw = layer.stride[1];
  const std::size_t ph = layer.padding[0], pw = layer.padding[1];
  const std::size_t oh = (ih + 2 * ph - kh) / sh + 1;
  const std::size_t ow = (iw + 2 * pw - kw) / sw + 1;

  std::vector<double> y(oc * oh * ow);
  for (std::size_t o = 0; o < oc; ++o) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double acc = b[o];
        for (std::size_t c = 0; c < ic; ++c) {
          for (std::size_t ky = 0; ky < kh; ++ky) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * sh + ky) -
                                      static_cast<std::ptrdiff_t>(ph);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(ih)) continue;
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * sw + kx) -
                                        static_cast<std::ptrdiff_t>(pw);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(iw)) continue;
              acc += static_cast<double>(w[((o * ic + c) * kh + ky) * kw + kx]) *
                     x[(c * ih + static_cast<std::size_t>(iy)) * iw +
                       static_cast<std::size_t>(ix)];
            }
          }
        }
        y[(o * oh + oy) * ow + ox] = acc;
      }
    }
  }
  return y;
}

/// Post-activation values of one forward pass. Index 0 is the input a_0,
/// index k the output of the k-th parameterized layer; the last entry holds
/// the q-values.
struct ActivationTrace {
  std::vector<Shape> shapes;
  std::vector<std::vector<double>> values;

  const std::vector<double>& qvalues() const { return values.back(); }
  std::size_t layer_count() const noexcept { return values.size() - 1; }
};

/// Throws ShapeError unless `frame` matches `shape` with every value in [0, 1].
inline void check_frame(const Tensor& frame, const Shape& shape) {
  if (frame.shape != shape || frame.size() != shape_size(shape)) {
    throw ShapeError("input shape " + shape_to_string(frame.shape) +
                     " does not match network input " + shape_to_string(shape));
  }
  for (std::size_t i = 0; i < frame.size(); ++i) {
    const float v = frame.data[i];
    if (!(v >= 0.0f && v <= 1.0f))
      throw ShapeError("input value " + std::to_string(v) + " at index " +
                       std::to_string(i) + " is outside [0, 1]");
  }
}

inline ActivationTrace forward(const NetworkSpec& net, const Tensor& input) {
  check_frame(input, net.input_shape);
  ActivationTrace trace;
  trace.shapes.push_back(net.input_shape);
  trace.values.emplace_back(input.data.begin(), input.data.end());

  Shape cur = net.input_shape;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const LayerSpec& layer = net.layers[i];
    std::string why;
    auto next = detail::layer_output_shape(layer, cur, &why);
    if (!next) throw ShapeError("layer " + std::to_string(i) + ": " + why);
    if (layer.parameterized()) {
      auto y = apply_affine(layer, cur, trace.values.back());
      if (layer.activation == Activation::relu)
        for (double& v : y) v = std::max(v, 0.0);
      trace.values.push_back(std::move(y));
      trace.shapes.push_back(*next);
    }
    cur = std::move(*next);
  }
  return trace;
}

/// Index of the largest q-value; ties go to the lowest index.
inline std::size_t greedy_action(std::span<const double> qvalues) {
  if (qvalues.empty()) throw DataError("greedy_action: empty q-value vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < qvalues.size(); ++i)
    if (qvalues[i] > qvalues[best]) best = i;
  return best;
}

inline double uniform01(Rng& rng) {
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

/// With probability `epsilon` a uniformly random action, else greedy.
inline std::size_t epsilon_greedy_action(std::span<const double> qvalues,
                                         double epsilon, Rng& rng) {
  if (!(epsilon >= 0.0 && epsilon <= 1.0))
    throw ConfigError("epsilon must lie in [0, 1]");
  const std::size_t greedy = greedy_action(qvalues);
  if (epsilon > 0.0 && uniform01(rng) < epsilon) {
    return std::uniform_int_distribution<std::size_t>(0, qvalues.size() - 1)(rng);
  }
  return greedy;
}

}  // namespace rateconv
