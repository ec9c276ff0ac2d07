#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mad/tensor.hpp"

namespace mad {

enum class Architecture { kSmallCnn, kResnet18Like, kAlexnetLike };

std::string to_string(Architecture a);
/// Throws ConfigError for unknown ids.
Architecture parse_architecture(const std::string& id);

struct ModelSpec {
  Architecture architecture = Architecture::kSmallCnn;
  ImageShape input_shape{1, 28, 28};
  int num_classes = 10;
  /// Base channel width. 0 selects the architecture default.
  int width = 0;

  int effective_width() const;
  /// Throws ConfigError on violated invariants.
  void validate() const;
  bool operator==(const ModelSpec&) const = default;
};

struct ParamInfo {
  std::string name;
  Shape shape;
  std::size_t offset = 0;
  std::size_t size = 0;
};

/// Parameter names and shapes, in storage order. Fully determined by the spec.
std::vector<ParamInfo> parameter_layout(const ModelSpec& spec);

struct ModelState {
  ModelSpec spec;
  std::vector<double> params;  // flat, laid out per parameter_layout(spec)
  std::uint64_t seed = 0;
  nlohmann::json training_meta = nlohmann::json::object();

  std::size_t num_parameters() const { return params.size(); }
  bool all_finite() const;
};

ModelState build_model(const ModelSpec& spec, std::uint64_t seed);

enum class Optimizer { kSgd, kSgdMomentum };

struct TrainConfig {
  int epochs = 10;
  int batch_size = 32;
  double learning_rate = 0.05;
  Optimizer optimizer = Optimizer::kSgd;
  double momentum = 0.9;
  std::uint64_t seed = 0;

  void validate() const;
};

enum class LossKind { kCrossEntropy, kKlToReference };

/// Loss selection. `reference_logits` ([N, n] row-major) is required iff kind is
/// kKlToReference; the KL is KL(softmax(reference) || softmax(logits)).
struct LossSpec {
  LossKind kind = LossKind::kCrossEntropy;
  const std::vector<double>* reference_logits = nullptr;
};

struct LossAndGrad {
  double loss = 0.0;
  std::vector<double> grad;
};

/// Row-major [N, n] logits for a batch.
std::vector<double> compute_logits(const ModelState& model, const LabeledImages& batch);
std::vector<double> compute_logits(const ModelSpec& spec, std::span<const double> params,
                                   const Tensor<double>& x);
std::vector<int> predict(const ModelState& model, const LabeledImages& batch);

/// Mean loss over the batch and its gradient w.r.t. the parameters.
LossAndGrad loss_and_grad(const ModelState& model, const LabeledImages& batch,
                          const LossSpec& loss = {});
LossAndGrad loss_and_grad(const ModelSpec& spec, std::span<const double> params,
                          const LabeledImages& batch, const LossSpec& loss = {});
double loss_value(const ModelSpec& spec, std::span<const double> params,
                  const LabeledImages& batch, const LossSpec& loss = {});

/// Hessian of the mean loss times v, exact (forward-over-reverse).
std::vector<double> hessian_vector_product(const ModelSpec& spec, std::span<const double> params,
                                           const LabeledImages& batch,
                                           std::span<const double> v,
                                           const LossSpec& loss = {});

/// Gradient of the mean loss w.r.t. the input images, shaped like x.
Tensor<double> input_grad(const ModelState& model, const Tensor<double>& x,
                          std::span<const int> labels, const LossSpec& loss = {});

/// Vector-Jacobian product of the logits w.r.t. the input: sum_ik dlogits[i,k] * dlogit_ik/dx.
Tensor<double> logits_vjp(const ModelSpec& spec, std::span<const double> params,
                          const Tensor<double>& x, std::span<const double> dlogits);

/// Classification accuracy in percent. Throws DataError on an empty set.
double evaluate_accuracy(const ModelState& model, const LabeledImages& examples);

/// Plain minibatch SGD on softmax cross-entropy. Records the per-epoch mean loss
/// in training_meta["epoch_loss"]. Throws DataError on bad labels and
/// NumericError when the loss stops being finite.
ModelState train_clean(const ModelState& model, const LabeledImages& train, const TrainConfig& cfg);

/// Hook that may rewrite each minibatch before the gradient step (used by
/// adversarial training). Receives the state the step will differentiate.
using BatchHook = std::function<void(LabeledImages& batch, const ModelState& current,
                                     std::size_t epoch, std::size_t step)>;

/// The SGD loop behind train_clean. With an empty hook it is train_clean.
ModelState train_sgd(const ModelState& model, const LabeledImages& train, const TrainConfig& cfg,
                     const BatchHook& hook);

/// Checks labels and pixel geometry against the spec.
void validate_examples(const ModelSpec& spec, const LabeledImages& examples);

// Loss helpers shared with the attack code. They work on row-major [N, n] logits.
double softmax_cross_entropy(std::span<const double> logits, std::span<const int> labels,
                             std::size_t num_classes, std::vector<double>* dlogits);
double kl_to_reference(std::span<const double> logits, std::span<const double> reference,
                       std::size_t num_classes, std::vector<double>* dlogits);

}  // namespace mad
