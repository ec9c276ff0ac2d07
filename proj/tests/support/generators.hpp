#pragma once

// Hand-rolled random generators for property tests. Everything is driven by
// one std::mt19937_64 so a failing case is reproduced from its seed.

#include <algorithm>
#include <cstdint>
#include <random>
#include <vector>

#include "mad/model.hpp"
#include "mad/tensor.hpp"

namespace mad::testing {

class Gen {
 public:
  explicit Gen(std::uint64_t seed) : rng_(seed) {}

  std::mt19937_64& rng() { return rng_; }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
  double normal(double sd = 1.0) { return std::normal_distribution<double>(0.0, sd)(rng_); }
  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng_); }
  bool coin(double p = 0.5) { return std::bernoulli_distribution(p)(rng_); }

  /// Images with pixels in [0,1]; a share of pixels sits exactly on 0 or 1 so
  /// clipping paths get exercised.
  LabeledImages images(const ImageShape& shape, std::size_t count, int classes) {
    LabeledImages out;
    out.shape = shape;
    out.pixels.resize(count * shape.size());
    for (auto& p : out.pixels) {
      const double r = uniform(0.0, 1.0);
      p = r < 0.1 ? 0.0f : r < 0.2 ? 1.0f : static_cast<float>(uniform(0.0, 1.0));
    }
    out.labels.resize(count);
    for (auto& l : out.labels) l = integer(0, classes - 1);
    return out;
  }

  /// A small random small_cnn (width 1 or 2, a handful of classes).
  ModelState tiny_model(const ImageShape& shape, int classes) {
    ModelSpec spec;
    spec.architecture = Architecture::kSmallCnn;
    spec.input_shape = shape;
    spec.num_classes = classes;
    spec.width = integer(1, 2);
    auto m = build_model(spec, rng_());
    // Spread the weights so logits are not all tied.
    for (auto& p : m.params) p *= uniform(1.0, 3.0);
    return m;
  }

  std::vector<double> loss_sequence_with_unique_min(std::size_t length) {
    std::vector<double> v(length);
    for (auto& x : v) x = uniform(1.0, 2.0);
    const auto at = static_cast<std::size_t>(integer(0, static_cast<int>(length) - 1));
    v[at] = 0.5;
    return v;
  }

 private:
  std::mt19937_64 rng_;
};

}  // namespace mad::testing
