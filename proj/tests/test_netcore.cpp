#include <gtest/gtest.h>

#include <cstring>
#include <random>
#include <vector>

#include "rateconv/netcore.hpp"
#include "test_support.hpp"

using namespace rateconv;
using rateconv::testing::random_dense_net;
using rateconv::testing::random_frame;
using rateconv::testing::random_mixed_net;
using rateconv::testing::reference_forward;

namespace {

NetworkSpec two_layer_dense() {
  NetworkSpec net;
  net.input_shape = {3};
  net.layers.push_back(LayerSpec::dense(Tensor({4, 3}), Tensor({4})));
  net.layers.push_back(LayerSpec::dense(Tensor({2, 4}), Tensor({2}), Activation::none));
  return net;
}

}  // namespace

TEST(ValidateNetwork, ChainedDenseIsOk) {
  EXPECT_TRUE(validate_network(two_layer_dense()).ok());
}

TEST(ValidateNetwork, DimensionMismatchNamesLayer) {
  NetworkSpec net;
  net.input_shape = {3};
  net.layers.push_back(LayerSpec::dense(Tensor({4, 3}), Tensor({4})));
  net.layers.push_back(LayerSpec::dense(Tensor({2, 5}), Tensor({2}), Activation::none));
  const auto v = validate_network(net);
  ASSERT_FALSE(v.ok());
  EXPECT_EQ(v.violations.front().layer, 1);
}

TEST(ValidateNetwork, ZeroStrideRejected) {
  NetworkSpec net;
  net.input_shape = {1, 4, 4};
  net.layers.push_back(LayerSpec::conv2d(Tensor({2, 1, 2, 2}), Tensor({2}), {0, 1}, {0, 0}));
  net.layers.push_back(LayerSpec::flatten());
  const auto v = validate_network(net);
  ASSERT_FALSE(v.ok());
  EXPECT_EQ(v.violations.front().layer, 0);
}

TEST(ValidateNetwork, StructuralRules) {
  NetworkSpec empty;
  empty.input_shape = {3};
  EXPECT_FALSE(validate_network(empty).ok());

  NetworkSpec hidden_none = two_layer_dense();
  hidden_none.layers[0].activation = Activation::none;
  EXPECT_FALSE(validate_network(hidden_none).ok());

  NetworkSpec two_flattens;
  two_flattens.input_shape = {1, 2, 2};
  two_flattens.layers = {LayerSpec::flatten(), LayerSpec::flatten(),
                         LayerSpec::dense(Tensor({1, 4}), Tensor({1}), Activation::none)};
  EXPECT_FALSE(validate_network(two_flattens).ok());

  NetworkSpec dense_on_image;
  dense_on_image.input_shape = {1, 2, 2};
  dense_on_image.layers = {LayerSpec::dense(Tensor({1, 4}), Tensor({1}), Activation::none)};
  EXPECT_FALSE(validate_network(dense_on_image).ok());

  NetworkSpec bad_bias = two_layer_dense();
  bad_bias.layers[0].bias = Tensor({3});
  EXPECT_FALSE(validate_network(bad_bias).ok());
}

TEST(Forward, IdentityDense) {
  NetworkSpec net;
  net.input_shape = {2};
  net.layers.push_back(LayerSpec::dense(Tensor({2, 2}, {1, 0, 0, 1}), Tensor({2})));
  const auto trace = forward(net, Tensor({2}, {0.3f, 0.7f}));
  EXPECT_DOUBLE_EQ(trace.qvalues()[0], 0.3f);
  EXPECT_DOUBLE_EQ(trace.qvalues()[1], 0.7f);
}

TEST(Forward, ReluClampsNegative) {
  NetworkSpec net;
  net.input_shape = {2};
  net.layers.push_back(LayerSpec::dense(Tensor({1, 2}, {1, -1}), Tensor({1})));
  EXPECT_EQ(forward(net, Tensor({2}, {0.2f, 0.5f})).qvalues()[0], 0.0);
}

TEST(Forward, RejectsBadInput) {
  const NetworkSpec net = two_layer_dense();
  EXPECT_THROW(forward(net, Tensor({4})), ShapeError);
  EXPECT_THROW(forward(net, Tensor({3}, {0.1f, 1.5f, 0.0f})), ShapeError);
}

TEST(Forward, MatchesReferenceOracle) {
  Rng rng(7);
  for (int trial = 0; trial < 150; ++trial) {
    const NetworkSpec net = random_mixed_net(rng);
    ASSERT_TRUE(validate_network(net).ok()) << validate_network(net).describe();
    const Tensor x = random_frame(rng, net.input_shape);
    const auto trace = forward(net, x);
    const auto ref = reference_forward(net, x);
    ASSERT_EQ(trace.values.size(), ref.size());
    for (std::size_t l = 0; l < ref.size(); ++l) {
      ASSERT_EQ(trace.values[l].size(), ref[l].size());
      ASSERT_EQ(shape_size(trace.shapes[l]), ref[l].size());
      for (std::size_t i = 0; i < ref[l].size(); ++i)
        EXPECT_NEAR(trace.values[l][i], ref[l][i], 1e-6) << "trial " << trial;
    }
  }
}

TEST(Forward, DeterministicAndHiddenNonNegative) {
  Rng rng(11);
  for (int trial = 0; trial < 30; ++trial) {
    const NetworkSpec net = random_mixed_net(rng);
    const Tensor x = random_frame(rng, net.input_shape);
    const auto a = forward(net, x);
    const auto b = forward(net, x);
    for (std::size_t l = 0; l < a.values.size(); ++l) {
      ASSERT_EQ(a.values[l].size(), b.values[l].size());
      EXPECT_EQ(0, std::memcmp(a.values[l].data(), b.values[l].data(),
                               a.values[l].size() * sizeof(double)));
      if (l + 1 < a.values.size())
        for (double v : a.values[l]) EXPECT_GE(v, 0.0);
    }
  }
}

TEST(Forward, PositiveScalingOfOutputKeepsArgmax) {
  Rng rng(12);
  std::uniform_real_distribution<double> cdist(0.01, 100.0);
  for (int trial = 0; trial < 100; ++trial) {
    NetworkSpec net = random_dense_net(rng, {8, 12, 5});
    const Tensor x = random_frame(rng, net.input_shape);
    const std::size_t before = greedy_action(forward(net, x).qvalues());
    const double c = cdist(rng);
    for (float& w : net.layers.back().weights.data) w = static_cast<float>(w * c);
    for (float& b : net.layers.back().bias.data) b = static_cast<float>(b * c);
    EXPECT_EQ(greedy_action(forward(net, x).qvalues()), before);
  }
}

TEST(GreedyAction, Basics) {
  EXPECT_EQ(greedy_action(std::vector<double>{0.1, 0.9, 0.3}), 1u);
  EXPECT_EQ(greedy_action(std::vector<double>{0.5, 0.5, 0.1}), 0u);
  EXPECT_THROW(greedy_action(std::vector<double>{}), DataError);
}

TEST(GreedyAction, MatchesLinearScan) {
  Rng rng(3);
  std::uniform_int_distribution<int> small(0, 4);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> q(1 + trial % 9);
    for (double& v : q) v = small(rng);  // plenty of ties
    std::size_t best = 0;
    double best_v = q[0];
    for (std::size_t i = 0; i < q.size(); ++i)
      if (q[i] > best_v) best_v = q[i], best = i;
    EXPECT_EQ(greedy_action(q), best);
  }
}

TEST(EpsilonGreedy, ZeroEpsilonIsGreedy) {
  Rng rng(1);
  const std::vector<double> q{0.2, 0.1, 0.7, 0.3};
  for (int i = 0; i < 1000; ++i) EXPECT_EQ(epsilon_greedy_action(q, 0.0, rng), 2u);
}

TEST(EpsilonGreedy, FullyRandomIsUniform) {
  Rng rng(2);
  const std::vector<double> q{0.2, 0.1, 0.7, 0.3};
  std::vector<int> hist(4);
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) ++hist[epsilon_greedy_action(q, 1.0, rng)];
  for (int h : hist) EXPECT_NEAR(h / static_cast<double>(draws), 0.25, 0.01);
}

TEST(EpsilonGreedy, ExplorationRate) {
  Rng rng(3);
  const std::vector<double> q{1.0, 0.0};
  int zeros = 0;
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) zeros += epsilon_greedy_action(q, 0.05, rng) == 0;
  EXPECT_NEAR(zeros / static_cast<double>(draws), 1.0 - 0.05 / 2, 0.005);
  EXPECT_THROW(epsilon_greedy_action(q, 1.5, rng), ConfigError);
}
