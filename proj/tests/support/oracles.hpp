#pragma once

// Test-side reference implementations. They share no code with the library
// beyond plain data types.

#include <cmath>
#include <span>
#include <vector>

#include "mad/meta.hpp"

namespace mad::testing {

/// Multinomial logistic regression over flattened pixels: logits = W x + b,
/// W row-major [classes, d]. Closed-form gradient and Hessian-vector product.
class SoftmaxRegression final : public Objective {
 public:
  SoftmaxRegression(std::size_t features, std::size_t classes) : d_(features), n_(classes) {}
  std::size_t num_parameters() const { return n_ * d_ + n_; }

  LossAndGrad loss_and_grad(std::span<const double> theta, const LabeledImages& data) const override;
  std::vector<double> hessian_vector(std::span<const double> theta, const LabeledImages& data,
                                     std::span<const double> v) const override;
  double accuracy(std::span<const double> theta, const LabeledImages& data) const override;

  std::vector<double> probabilities(std::span<const double> theta, std::span<const float> x) const;

 private:
  std::size_t d_, n_;
};

/// L(theta) = 0.5 * a * ||theta - c||^2, independent of the data.
class Quadratic final : public Objective {
 public:
  Quadratic(double a, std::vector<double> c) : a_(a), c_(std::move(c)) {}
  LossAndGrad loss_and_grad(std::span<const double> theta, const LabeledImages&) const override;
  std::vector<double> hessian_vector(std::span<const double>, const LabeledImages&,
                                     std::span<const double> v) const override;
  double accuracy(std::span<const double>, const LabeledImages&) const override { return 0.0; }

 private:
  double a_;
  std::vector<double> c_;
};

/// Straight-line reference of one meta-epoch: every episode adapts a copy of
/// the frozen theta, the query gradients are summed, one outer step follows.
std::vector<double> brute_force_meta_epoch(const Objective& obj, const std::vector<double>& theta,
                                           const std::vector<Episode>& episodes, double beta, double lambda,
                                           int inner_steps, bool second_order);

/// (ca_d - ca_a) / (cca - ca_a), written independently of the library.
inline double dsr_oracle(double ca_d, double ca_a, double cca) { return (ca_d - ca_a) / (cca - ca_a); }
inline double edsr_oracle(double dsr, double ot_hours) { return dsr * std::exp(-ot_hours); }

/// Stop position under "stop after p non-improving checks": the 1-based check
/// count at which a patience-p controller halts, or -1 if it never does.
int reference_stop_check(const std::vector<double>& losses, int patience);

}  // namespace mad::testing
