#include <cmath>
#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "criteria.hpp"
#include "generators.hpp"
#include "mad/attacks.hpp"
#include "mad/errors.hpp"

namespace {

using namespace mad;

// Two-class linear classifier: logit_1 - logit_0 = w.x + b.
class Linear2 final : public Classifier {
 public:
  Linear2(ImageShape s, std::vector<double> w, double b) : s_(s), w_(std::move(w)), b_(b) {}
  ImageShape input_shape() const override { return s_; }
  int num_classes() const override { return 2; }
  std::vector<double> logits(const Tensor<double>& x) const override {
    const std::size_t N = x.shape[0], d = s_.size();
    std::vector<double> z(2 * N, 0.0);
    for (std::size_t i = 0; i < N; ++i) {
      double f = b_;
      for (std::size_t j = 0; j < d; ++j) f += w_[j] * x.data[i * d + j];
      z[2 * i + 1] = f;
    }
    return z;
  }
  Tensor<double> logits_vjp(const Tensor<double>& x, std::span<const double> dz) const override {
    Tensor<double> g(x.shape, 0.0);
    const std::size_t d = s_.size();
    for (std::size_t i = 0; i < x.shape[0]; ++i)
      for (std::size_t j = 0; j < d; ++j) g.data[i * d + j] = dz[2 * i + 1] * w_[j];
    return g;
  }

 private:
  ImageShape s_;
  std::vector<double> w_;
  double b_;
};

class Constant final : public Classifier {
 public:
  explicit Constant(ImageShape s) : s_(s) {}
  ImageShape input_shape() const override { return s_; }
  int num_classes() const override { return 3; }
  std::vector<double> logits(const Tensor<double>& x) const override {
    std::vector<double> z;
    for (std::size_t i = 0; i < x.shape[0]; ++i) z.insert(z.end(), {2.0, 0.0, 0.0});
    return z;
  }
  Tensor<double> logits_vjp(const Tensor<double>& x, std::span<const double>) const override {
    return Tensor<double>(x.shape, 0.0);
  }

 private:
  ImageShape s_;
};

LabeledImages mid_gray(const ImageShape& s, std::size_t count, int label) {
  LabeledImages d;
  d.shape = s;
  d.pixels.assign(count * s.size(), 0.5f);
  d.labels.assign(count, label);
  return d;
}

double l2(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (double(a[i]) - b[i]) * (double(a[i]) - b[i]);
  return std::sqrt(s);
}

TEST(AttackProperties, ReducedSuitePasses) {
  mad::testing::AttackSuiteOptions o;
  o.instances_per_attack = 12;
  o.seed = 5;
  const auto r = mad::testing::attack_property_suite(o);
  for (const auto& f : r.failures) ADD_FAILURE() << f;
  EXPECT_TRUE(r.pass) << r.summary;
}

TEST(ProjectBall, LinfClipsPerCoordinate) {
  const Tensor<double> x0({1, 1, 1, 3}, {0.5, 0.95, 0.0});
  const Tensor<double> xa({1, 1, 1, 3}, {0.9, 1.2, -0.3});
  const auto p = project_ball(xa, x0, 0.1, Norm::kLinf);
  EXPECT_DOUBLE_EQ(p.data[0], 0.6);
  EXPECT_DOUBLE_EQ(p.data[1], 1.0);
  EXPECT_DOUBLE_EQ(p.data[2], 0.0);
}

TEST(ProjectBall, L2ScalesInsideTheBox) {
  // delta (0.3, 0.4) has norm 0.5; radius 0.25 halves it.
  const Tensor<double> x0({1, 1, 1, 2}, {0.5, 0.5});
  const Tensor<double> xa({1, 1, 1, 2}, {0.8, 0.9});
  const auto p = project_ball(xa, x0, 0.25, Norm::kL2);
  EXPECT_NEAR(p.data[0], 0.65, 1e-9);
  EXPECT_NEAR(p.data[1], 0.7, 1e-9);
  EXPECT_THROW(project_ball(xa, x0, 0.25, Norm::kL0), ConfigError);
}

TEST(ProjectBall, L2WithActiveBoxSolvesKkt) {
  // One coordinate pinned at 1, the rest of the radius goes to the free one.
  const Tensor<double> x0({1, 1, 1, 2}, {0.9, 0.5});
  const Tensor<double> xa({1, 1, 1, 2}, {1.9, 1.5});
  const auto p = project_ball(xa, x0, 0.5, Norm::kL2);
  const double r = std::hypot(p.data[0] - 0.9, p.data[1] - 0.5);
  EXPECT_LE(r, 0.5 + 1e-9);
  EXPECT_NEAR(r, 0.5, 1e-6);
  EXPECT_NEAR(p.data[0], 1.0, 1e-6);
  EXPECT_NEAR(p.data[1], 0.5 + std::sqrt(0.25 - 0.01), 1e-6);
}

TEST(DeepFool, LinearModelLandsPastTheHyperplane) {
  const ImageShape s{1, 2, 2};
  const std::vector<double> w{1.0, -2.0, 0.5, 1.0};
  const double b = -0.6;  // f(x) = 0.5 * 0.5 - 0.6 = -0.35 at mid gray: class 0
  const Linear2 model(s, w, b);
  auto spec = default_attack_spec(1);
  spec.epsilon = 10.0;
  const auto batch = mid_gray(s, 1, 0);
  const auto out = deepfool(model, batch, spec);
  ASSERT_TRUE(out.success_mask[0]);
  const double wn = std::sqrt(1.0 + 4.0 + 0.25 + 1.0);
  const double expected = (1.0 + spec.extra_number_or("overshoot", 0.02)) * (0.35 + 1e-4) / wn;
  EXPECT_NEAR(l2(out.x_adv.image(0), batch.image(0)), expected, 1e-6);
}

TEST(DeepFool, EpsilonCapsTheStep) {
  const ImageShape s{1, 2, 2};
  const Linear2 model(s, {1.0, -2.0, 0.5, 1.0}, -0.6);
  auto spec = default_attack_spec(1);
  spec.epsilon = 0.05;
  const auto batch = mid_gray(s, 1, 0);
  const auto out = deepfool(model, batch, spec);
  EXPECT_LE(l2(out.x_adv.image(0), batch.image(0)), 0.05 + 1e-6);
  EXPECT_FALSE(out.success_mask[0]);
}

TEST(CarliniWagner, ConstantModelNeverSucceedsAndBarelyMoves) {
  const ImageShape s{1, 3, 3};
  const Constant model(s);
  mad::testing::Gen g(3);
  auto batch = g.images(s, 4, 1);
  for (auto& l : batch.labels) l = 0;
  auto spec = default_attack_spec(15);
  spec.iterations = 20;
  const auto out = cw_l2(model, batch, spec);
  EXPECT_EQ(out.success_count(), 0u);
  for (std::size_t i = 0; i < batch.pixels.size(); ++i) EXPECT_NEAR(out.x_adv.pixels[i], batch.pixels[i], 1e-5);
}

TEST(Square, StaysInBudgetAndAcceptsOnlyImprovements) {
  mad::testing::Gen g(8);
  const ImageShape s{1, 6, 6};
  const auto model = g.tiny_model(s, 3);
  const auto batch = g.images(s, 6, 3);
  auto spec = default_attack_spec(25);
  spec.iterations = 200;
  spec.extra["query_budget"] = 200;
  const auto out = square_attack(ModelClassifier(model), batch, spec, 4);
  EXPECT_LE(out.queries_or_steps, 200 * 6);
  for (std::size_t i = 0; i < out.x_adv.pixels.size(); ++i)
    EXPECT_LE(std::abs(out.x_adv.pixels[i] - batch.pixels[i]), spec.epsilon + 1e-6);
  for (const auto& seq : out.accepted_losses)
    for (std::size_t k = 1; k < seq.size(); ++k) EXPECT_LT(seq[k], seq[k - 1]);
}

TEST(OnePixel, ChangesAtMostThePixelBudget) {
  mad::testing::Gen g(9);
  const ImageShape s{3, 5, 5};
  const auto model = g.tiny_model(s, 3);
  const auto batch = g.images(s, 4, 3);
  auto spec = default_attack_spec(28);
  spec.extra["pixels"] = 2;
  spec.extra["generations"] = 5;
  const auto out = one_pixel(ModelClassifier(model), batch, spec, 2);
  for (std::size_t i = 0; i < batch.count(); ++i) {
    int changed = 0;
    for (std::size_t r = 0; r < 5; ++r)
      for (std::size_t c = 0; c < 5; ++c) {
        bool any = false;
        for (std::size_t ch = 0; ch < 3; ++ch) {
          const std::size_t k = i * 75 + (ch * 5 + r) * 5 + c;
          any |= out.x_adv.pixels[k] != batch.pixels[k];
        }
        changed += any;
      }
    EXPECT_LE(changed, 2);
  }
}

TEST(LabelSwap, SucceedsWheneverAnotherClassIsPredicted) {
  const ImageShape s{1, 4, 4};
  // Search for a random model that predicts both classes on its batch.
  for (std::uint64_t seed = 10;; ++seed) {
    mad::testing::Gen g(seed);
    const auto model = g.tiny_model(s, 2);
    auto batch = g.images(s, 30, 2);
    batch.labels = predict(model, batch);
    if (std::count(batch.labels.begin(), batch.labels.end(), 0) % 30 == 0) continue;
    const auto out = run_attack(default_attack_spec(100), ModelClassifier(model), batch);
    EXPECT_EQ(out.success_count(), batch.count());
    break;
  }
}

TEST(Dispatch, UnknownAndPlaceholderIds) {
  mad::testing::Gen g(1);
  const ImageShape s{1, 4, 4};
  const auto model = g.tiny_model(s, 2);
  const auto batch = g.images(s, 2, 2);
  AttackSpec spec;
  spec.attack_id = 99;
  EXPECT_THROW(run_attack(spec, ModelClassifier(model), batch), ConfigError);
  spec.attack_id = 0;
  spec.name = "JSMA";
  spec.norm = Norm::kL2;
  try {
    run_attack(spec, ModelClassifier(model), batch);
    FAIL();
  } catch (const NotImplementedError& e) {
    EXPECT_NE(std::string(e.what()).find('0'), std::string::npos);
  }
}

TEST(Registry, ThirtyRowsPlusDiagnostic) {
  int listed = 0;
  for (int id = 0; id < 30; ++id) listed += find_attack(id) != nullptr;
  EXPECT_EQ(listed, 30);
  EXPECT_EQ(find_attack(30), nullptr);
  EXPECT_EQ(find_attack(13)->knowledge, Knowledge::kWhiteBox);
  EXPECT_EQ(find_attack(25)->knowledge, Knowledge::kBlackBox);
}

TEST(Spec, ValidationRejectsBadBudgets) {
  auto spec = default_attack_spec(18);
  spec.epsilon = -0.1;
  EXPECT_THROW(spec.validate(), ConfigError);
  spec = default_attack_spec(18);
  spec.norm = Norm::kL2;
  EXPECT_THROW(spec.validate(), ConfigError);
  spec = default_attack_spec(18);
  spec.iterations = -1;
  EXPECT_THROW(spec.validate(), ConfigError);
  EXPECT_EQ(attack_spec_from_json(to_json(default_attack_spec(16))), default_attack_spec(16));
}

TEST(Spec, CifarScaleDefaults) {
  const auto s = default_attack_spec(18, BudgetScale::kCifar);
  EXPECT_DOUBLE_EQ(s.epsilon, 8.0 / 255.0);
  EXPECT_DOUBLE_EQ(s.step_size, 2.0 / 255.0);
}

TEST(Suite, PartialEntriesAndScale) {
  const auto p = std::filesystem::temp_directory_path() / "mad_suite_partial.json";
  {
    std::ofstream(p) << R"({"scale":"cifar","attacks":[{"attack_id":18},{"attack_id":13,"epsilon":0.1}]})";
  }
  const auto suite = load_suite(p);
  ASSERT_EQ(suite.size(), 2u);
  EXPECT_EQ(suite[0], default_attack_spec(18, BudgetScale::kCifar));
  EXPECT_DOUBLE_EQ(suite[1].epsilon, 0.1);
  { std::ofstream(p) << R"([{"epsilon":0.1}])"; }
  EXPECT_THROW(load_suite(p), ConfigError);
  save_suite(suite, p);
  EXPECT_EQ(load_suite(p), suite);
}

TEST(Suite, ShippedSuitesLoad) {
  for (const char* f : {"mad_m_suite.json", "mad_c_suite.json", "smoke_suite.json", "label_swap_suite.json"}) {
    EXPECT_NO_THROW(load_suite(mad::testing::source_dir() / "suites" / f)) << f;
  }
}

}  // namespace
