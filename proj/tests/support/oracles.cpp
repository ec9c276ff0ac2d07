#include "oracles.hpp"

#include <algorithm>
#include <limits>

namespace mad::testing {

std::vector<double> SoftmaxRegression::probabilities(std::span<const double> theta, std::span<const float> x) const {
  std::vector<double> z(n_);
  for (std::size_t k = 0; k < n_; ++k) {
    double s = theta[n_ * d_ + k];
    for (std::size_t j = 0; j < d_; ++j) s += theta[k * d_ + j] * x[j];
    z[k] = s;
  }
  const double m = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (auto& v : z) sum += (v = std::exp(v - m));
  for (auto& v : z) v /= sum;
  return z;
}

LossAndGrad SoftmaxRegression::loss_and_grad(std::span<const double> theta, const LabeledImages& data) const {
  LossAndGrad out;
  out.grad.assign(num_parameters(), 0.0);
  const double inv = 1.0 / static_cast<double>(data.count());
  for (std::size_t i = 0; i < data.count(); ++i) {
    const auto x = data.image(i);
    const auto p = probabilities(theta, x);
    const auto y = static_cast<std::size_t>(data.labels[i]);
    out.loss -= std::log(p[y]) * inv;
    for (std::size_t k = 0; k < n_; ++k) {
      const double r = (p[k] - (k == y ? 1.0 : 0.0)) * inv;
      for (std::size_t j = 0; j < d_; ++j) out.grad[k * d_ + j] += r * x[j];
      out.grad[n_ * d_ + k] += r;
    }
  }
  return out;
}

std::vector<double> SoftmaxRegression::hessian_vector(std::span<const double> theta, const LabeledImages& data,
                                                      std::span<const double> v) const {
  // H = mean_i (diag(p) - p p^T) (x) [x;1][x;1]^T
  std::vector<double> out(num_parameters(), 0.0);
  const double inv = 1.0 / static_cast<double>(data.count());
  for (std::size_t i = 0; i < data.count(); ++i) {
    const auto x = data.image(i);
    const auto p = probabilities(theta, x);
    std::vector<double> u(n_);  // u_k = <V_k, [x;1]>
    for (std::size_t k = 0; k < n_; ++k) {
      double s = v[n_ * d_ + k];
      for (std::size_t j = 0; j < d_; ++j) s += v[k * d_ + j] * x[j];
      u[k] = s;
    }
    double pu = 0.0;
    for (std::size_t k = 0; k < n_; ++k) pu += p[k] * u[k];
    for (std::size_t k = 0; k < n_; ++k) {
      const double r = p[k] * (u[k] - pu) * inv;
      for (std::size_t j = 0; j < d_; ++j) out[k * d_ + j] += r * x[j];
      out[n_ * d_ + k] += r;
    }
  }
  return out;
}

double SoftmaxRegression::accuracy(std::span<const double> theta, const LabeledImages& data) const {
  std::size_t hit = 0;
  for (std::size_t i = 0; i < data.count(); ++i) {
    const auto p = probabilities(theta, data.image(i));
    if (static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin()) == data.labels[i]) ++hit;
  }
  return 100.0 * static_cast<double>(hit) / static_cast<double>(data.count());
}

LossAndGrad Quadratic::loss_and_grad(std::span<const double> theta, const LabeledImages&) const {
  LossAndGrad out;
  out.grad.resize(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double r = theta[i] - c_[i];
    out.loss += 0.5 * a_ * r * r;
    out.grad[i] = a_ * r;
  }
  return out;
}

std::vector<double> Quadratic::hessian_vector(std::span<const double>, const LabeledImages&,
                                              std::span<const double> v) const {
  std::vector<double> out(v.begin(), v.end());
  for (auto& x : out) x *= a_;
  return out;
}

std::vector<double> brute_force_meta_epoch(const Objective& obj, const std::vector<double>& theta,
                                           const std::vector<Episode>& episodes, double beta, double lambda,
                                           int inner_steps, bool second_order) {
  std::vector<double> sum(theta.size(), 0.0);
  for (const auto& ep : episodes) {
    std::vector<std::vector<double>> path{theta};
    for (int s = 0; s < inner_steps; ++s) {
      const auto g = obj.loss_and_grad(path.back(), ep.support.images).grad;
      auto next = path.back();
      for (std::size_t i = 0; i < next.size(); ++i) next[i] -= beta * g[i];
      path.push_back(next);
    }
    auto g = obj.loss_and_grad(path.back(), ep.query.images).grad;
    if (second_order) {
      // d theta_{t+1} / d theta_t = I - beta H(theta_t), applied last step first.
      for (int s = inner_steps - 1; s >= 0; --s) {
        const auto hv = obj.hessian_vector(path[static_cast<std::size_t>(s)], ep.support.images, g);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= beta * hv[i];
      }
    }
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += g[i];
  }
  auto out = theta;
  const double scale = lambda / static_cast<double>(episodes.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= scale * sum[i];
  return out;
}

int reference_stop_check(const std::vector<double>& losses, int patience) {
  double best = std::numeric_limits<double>::infinity();
  int since = 0;
  for (std::size_t i = 0; i < losses.size(); ++i) {
    if (losses[i] < best) {
      best = losses[i];
      since = 0;
    } else if (++since >= patience) {
      return static_cast<int>(i) + 1;
    }
  }
  return -1;
}

}  // namespace mad::testing
