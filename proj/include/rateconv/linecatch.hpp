#pragma once

// LineCatch: a deterministic pixel-observation catching game.
//
// A G x G grid holds one falling object (rows 0..G-2) and a paddle on the
// bottom row. Each step the paddle moves one column (left / stay / right,
// clamped at the walls) and the object falls one row. When the object
// reaches the bottom row the drop is scored (+1 if the paddle is under it)
// and a new object appears in row 0 at a uniformly random column. An
// episode lasts a fixed number of drops, each taking G - 1 steps, which is
// exactly enough for the paddle to cross the grid: moving toward the object
// column catches every drop.

#include <cstddef>
#include <cstdint>
#include <random>

#include "rateconv/error.hpp"
#include "rateconv/netcore.hpp"
#include "rateconv/tensor.hpp"

namespace rateconv {

struct LineCatchConfig {
  std::size_t grid = 8;
  std::size_t drops = 10;

  void validate() const {
    if (grid < 3) throw ConfigError("LineCatch grid must be at least 3");
    if (drops < 1) throw ConfigError("LineCatch needs at least one drop");
  }
};

class LineCatch {
 public:
  static constexpr std::size_t kLeft = 0;
  static constexpr std::size_t kStay = 1;
  static constexpr std::size_t kRight = 2;
  static constexpr std::size_t kActions = 3;
  static constexpr std::size_t kNoop = kStay;

  struct StepResult {
    double reward = 0.0;
    bool done = false;
  };

  LineCatch(LineCatchConfig config, std::uint64_t seed) : config_(config), rng_(seed) {
    config_.validate();
    reset();
  }

  void reset() {
    paddle_ = config_.grid / 2;
    drops_done_ = 0;
    score_ = 0.0;
    spawn();
  }

  const LineCatchConfig& config() const noexcept { return config_; }
  Shape observation_shape() const { return {1, config_.grid, config_.grid}; }
  std::size_t action_count() const noexcept { return kActions; }
  std::size_t episode_length() const noexcept { return config_.drops * (config_.grid - 1); }

  std::size_t paddle() const noexcept { return paddle_; }
  std::size_t object_row() const noexcept { return row_; }
  std::size_t object_col() const noexcept { return col_; }
  std::size_t drops_done() const noexcept { return drops_done_; }
  double score() const noexcept { return score_; }
  bool done() const noexcept { return drops_done_ >= config_.drops; }

  /// [1, G, G] frame: 1.0 at the object cell and the paddle cell.
  Tensor observation() const {
    const std::size_t g = config_.grid;
    Tensor obs(observation_shape());
    obs[row_ * g + col_] = 1.0f;
    obs[(g - 1) * g + paddle_] = 1.0f;
    return obs;
  }

  StepResult step(std::size_t action) {
    if (done()) return {0.0, true};
    if (action >= kActions) throw ConfigError("LineCatch action out of range");
    if (action == kLeft && paddle_ > 0) --paddle_;
    if (action == kRight && paddle_ + 1 < config_.grid) ++paddle_;
    StepResult r;
    if (++row_ == config_.grid - 1) {
      r.reward = paddle_ == col_ ? 1.0 : 0.0;
      score_ += r.reward;
      ++drops_done_;
      spawn();
    }
    r.done = done();
    return r;
  }

  /// Optimal action: move toward the object column.
  std::size_t optimal_action() const noexcept {
    if (col_ < paddle_) return kLeft;
    if (col_ > paddle_) return kRight;
    return kStay;
  }

 private:
  void spawn() {
    row_ = 0;
    col_ = std::uniform_int_distribution<std::size_t>(0, config_.grid - 1)(rng_);
  }

  LineCatchConfig config_;
  Rng rng_;
  std::size_t paddle_ = 0, row_ = 0, col_ = 0;
  std::size_t drops_done_ = 0;
  double score_ = 0.0;
};

/// Hand-built ReLU network that plays LineCatch optimally.
///
/// The hidden layer measures the signed column offset d = object - paddle as
/// relu(d) and relu(-d); the outputs are q_left = relu(-d), q_right =
/// relu(d) and q_stay = 0.5 - relu(d) - relu(-d), so the argmax is the
/// optimal move with a q-gap of at least 0.5.
inline NetworkSpec linecatch_reference_network(std::size_t grid) {
  if (grid < 3) throw ConfigError("LineCatch grid must be at least 3");
  const std::size_t n = grid * grid;
  Tensor w1({2, n});
  for (std::size_t r = 0; r < grid; ++r) {
    for (std::size_t c = 0; c < grid; ++c) {
      const float col = static_cast<float>(c);
      const float sign = r + 1 == grid ? -1.0f : 1.0f;
      w1[0 * n + r * grid + c] = sign * col;
      w1[1 * n + r * grid + c] = -sign * col;
    }
  }
  Tensor b1({2}, {0.0f, 0.0f});
  Tensor w2({3, 2}, {0.0f, 1.0f,  //
                     -1.0f, -1.0f,  //
                     1.0f, 0.0f});
  Tensor b2({3}, {0.0f, 0.5f, 0.0f});

  NetworkSpec net;
  net.input_shape = {1, grid, grid};
  net.layers.push_back(LayerSpec::flatten());
  net.layers.push_back(LayerSpec::dense(std::move(w1), std::move(b1), Activation::relu));
  net.layers.push_back(LayerSpec::dense(std::move(w2), std::move(b2), Activation::none));
  return net;
}

}  // namespace rateconv
