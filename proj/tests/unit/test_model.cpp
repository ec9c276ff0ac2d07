#include <cmath>

#include <gtest/gtest.h>

#include "generators.hpp"
#include "mad/errors.hpp"
#include "mad/model.hpp"
#include "oracles.hpp"

namespace {

using namespace mad;

// 200 two-class 4x4 images: class 0 lights the left half, class 1 the right.
LabeledImages separable_toy(std::uint64_t seed) {
  mad::testing::Gen g(seed);
  LabeledImages d;
  d.shape = {1, 4, 4};
  for (int i = 0; i < 200; ++i) {
    const int y = i % 2;
    std::vector<float> img(16);
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t c = 0; c < 4; ++c) {
        const bool lit = (c < 2) == (y == 0);
        img[r * 4 + c] = static_cast<float>(std::clamp((lit ? 0.8 : 0.2) + g.normal(0.1), 0.0, 1.0));
      }
    d.push_back(img, y);
  }
  return d;
}

TEST(ParameterLayout, SmallCnnCountMatchesHandCount) {
  ModelSpec s;
  s.input_shape = {1, 8, 8};
  s.num_classes = 3;
  s.width = 1;
  // conv1 1*1*9+1, conv2 2*1*9+2, fc1 (2*2*2)*8+8, fc2 8*3+3
  EXPECT_EQ(build_model(s, 0).num_parameters(), 10u + 20u + 72u + 27u);
  const auto layout = parameter_layout(s);
  ASSERT_EQ(layout.size(), 8u);
  EXPECT_EQ(layout.front().name, "conv1.weight");
  EXPECT_EQ(layout.back().offset + layout.back().size, 129u);
}

TEST(BuildModel, SeedDeterminesParameters) {
  ModelSpec s;
  for (auto arch : {Architecture::kSmallCnn, Architecture::kResnet18Like, Architecture::kAlexnetLike}) {
    s.architecture = arch;
    EXPECT_EQ(build_model(s, 3).params, build_model(s, 3).params);
    EXPECT_NE(build_model(s, 3).params, build_model(s, 4).params);
  }
}

TEST(ModelSpec, RejectsBadGeometry) {
  ModelSpec s;
  s.num_classes = 1;
  EXPECT_THROW(s.validate(), ConfigError);
  s.num_classes = 10;
  s.input_shape = {0, 28, 28};
  EXPECT_THROW(s.validate(), ConfigError);
  EXPECT_THROW(parse_architecture("vgg"), ConfigError);
  EXPECT_EQ(parse_architecture("resnet18_like"), Architecture::kResnet18Like);
}

TEST(TrainClean, SeparableToyReachesOracleAccuracy) {
  const auto data = separable_toy(1);
  // Oracle: plain gradient descent on a logistic model must separate the data.
  const mad::testing::SoftmaxRegression oracle(16, 2);
  std::vector<double> theta(oracle.num_parameters(), 0.0);
  for (int it = 0; it < 300; ++it) {
    const auto lg = oracle.loss_and_grad(theta, data);
    for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= 1.0 * lg.grad[i];
  }
  ASSERT_GE(oracle.accuracy(theta, data), 95.0);

  ModelSpec s;
  s.input_shape = data.shape;
  s.num_classes = 2;
  s.width = 4;
  TrainConfig cfg;
  cfg.epochs = 20;
  cfg.learning_rate = 0.05;
  cfg.optimizer = Optimizer::kSgdMomentum;
  cfg.seed = 2;
  const auto trained = train_clean(build_model(s, 2), data, cfg);
  EXPECT_GE(evaluate_accuracy(trained, data), 95.0);
  EXPECT_EQ(trained.training_meta.at("epoch_loss").size(), 20u);
}

TEST(TrainClean, ZeroEpochsLeavesParametersAlone) {
  const auto data = separable_toy(2);
  ModelSpec s;
  s.input_shape = data.shape;
  s.num_classes = 2;
  const auto m = build_model(s, 1);
  TrainConfig cfg;
  cfg.epochs = 0;
  EXPECT_EQ(train_clean(m, data, cfg).params, m.params);
}

TEST(TrainClean, SameSeedSameResult) {
  const auto data = separable_toy(3);
  ModelSpec s;
  s.input_shape = data.shape;
  s.num_classes = 2;
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.seed = 9;
  EXPECT_EQ(train_clean(build_model(s, 1), data, cfg).params, train_clean(build_model(s, 1), data, cfg).params);
}

TEST(TrainClean, RejectsBadLabelsAndDivergence) {
  auto data = separable_toy(4);
  ModelSpec s;
  s.input_shape = data.shape;
  s.num_classes = 2;
  TrainConfig cfg;
  cfg.epochs = 1;
  auto bad = data;
  bad.labels[0] = 7;
  EXPECT_THROW(train_clean(build_model(s, 1), bad, cfg), DataError);
  cfg.learning_rate = 1e300;
  cfg.epochs = 3;
  EXPECT_THROW(train_clean(build_model(s, 1), data, cfg), NumericError);
}

TEST(EvaluateAccuracy, EmptySetIsAnError) {
  ModelSpec s;
  LabeledImages empty;
  empty.shape = s.input_shape;
  EXPECT_THROW(evaluate_accuracy(build_model(s, 0), empty), DataError);
}

TEST(Losses, CrossEntropyMatchesHandValue) {
  // logits [0, ln 3] for label 1: p = 3/4, loss = ln(4/3)
  const std::vector<double> z{0.0, std::log(3.0)};
  const std::vector<int> y{1};
  std::vector<double> dz;
  EXPECT_NEAR(softmax_cross_entropy(z, y, 2, &dz), std::log(4.0 / 3.0), 1e-12);
  EXPECT_NEAR(dz[0], 0.25, 1e-12);
  EXPECT_NEAR(dz[1], -0.25, 1e-12);
}

TEST(Losses, KlToSelfIsZero) {
  const std::vector<double> z{0.3, -1.0, 2.0};
  std::vector<double> dz;
  EXPECT_NEAR(kl_to_reference(z, z, 3, &dz), 0.0, 1e-12);
  for (double v : dz) EXPECT_NEAR(v, 0.0, 1e-12);
}

}  // namespace
