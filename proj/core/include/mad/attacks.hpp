#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "mad/model.hpp"
#include "mad/tensor.hpp"

namespace mad {

/// What an attack may ask of its target. White-box attacks use logits_vjp;
/// black-box attacks are restricted to logits.
class Classifier {
 public:
  virtual ~Classifier() = default;
  virtual ImageShape input_shape() const = 0;
  virtual int num_classes() const = 0;
  /// Row-major [N, n].
  virtual std::vector<double> logits(const Tensor<double>& x) const = 0;
  virtual Tensor<double> logits_vjp(const Tensor<double>& x, std::span<const double> dlogits) const = 0;
};

class ModelClassifier final : public Classifier {
 public:
  explicit ModelClassifier(const ModelState& model) : model_(model) {}
  ImageShape input_shape() const override { return model_.spec.input_shape; }
  int num_classes() const override { return model_.spec.num_classes; }
  std::vector<double> logits(const Tensor<double>& x) const override;
  Tensor<double> logits_vjp(const Tensor<double>& x, std::span<const double> dlogits) const override;

 private:
  const ModelState& model_;
};

enum class Norm { kLinf, kL2, kL1, kL0, kOther };
enum class Knowledge { kWhiteBox, kBlackBox };

std::string to_string(Norm n);
std::string to_string(Knowledge k);
Norm parse_norm(const std::string& s);
Knowledge parse_knowledge(const std::string& s);

struct AttackSpec {
  int attack_id = 13;
  std::string name = "FGSM";
  Norm norm = Norm::kLinf;
  Knowledge knowledge = Knowledge::kWhiteBox;
  double epsilon = 0.3;
  double step_size = 0.075;
  int iterations = 10;
  /// Variant parameters: decay, eot_samples, eot_noise, random_start, c,
  /// confidence, lr, overshoot, p_init, query_budget, pixels, population,
  /// generations, differential_weight.
  nlohmann::json extra = nlohmann::json::object();

  /// Throws ConfigError on bad budgets or a norm/knowledge pair that does not
  /// match the registry row for attack_id.
  void validate() const;
  double extra_number(const std::string& key) const;  // ConfigError if absent
  double extra_number_or(const std::string& key, double fallback) const;
  bool operator==(const AttackSpec&) const = default;
};

nlohmann::json to_json(const AttackSpec& spec);
AttackSpec attack_spec_from_json(const nlohmann::json& j);

struct AttackOutcome {
  LabeledImages x_adv;  // labels are the true labels of the inputs
  std::vector<bool> success_mask;
  std::int64_t queries_or_steps = 0;
  /// Square attack only: per-example margin loss of every accepted proposal.
  std::vector<std::vector<double>> accepted_losses;

  std::size_t success_count() const;
};

/// Registry row. `norms` lists the measurements the toolkit accepts for the ID.
struct AttackInfo {
  int attack_id;
  std::string_view name;
  std::vector<Norm> norms;
  Knowledge knowledge;
  bool implemented;
};

const std::vector<AttackInfo>& attack_registry();
/// nullptr for unknown IDs.
const AttackInfo* find_attack(int attack_id);

enum class BudgetScale { kMnist, kCifar };
/// Registry defaults: eps 0.3 (MNIST) or 8/255 (CIFAR), alpha = eps/4, 10 iterations,
/// plus every variant extra the attack needs.
AttackSpec default_attack_spec(int attack_id, BudgetScale scale = BudgetScale::kMnist);

/// Private stream seed for one attack invocation.
std::uint64_t attack_stream_seed(std::uint64_t global_seed, int attack_id, std::uint64_t batch_index);

/// Projection onto {z : ||z - x0|| <= eps} intersected with [0,1]^d, per example.
/// Exact for both norms (the l2 case solves the box-constrained problem by
/// bisection on the multiplier). Throws ConfigError for other norms.
Tensor<double> project_ball(const Tensor<double>& x_adv, const Tensor<double>& x0, double epsilon, Norm norm);

enum class IterativeVariant { kBim, kPgdLinf, kPgdL2, kMifgsm, kRfgsm, kFfgsm, kTpgd, kEotpgd };

AttackOutcome fgsm(const Classifier& model, const LabeledImages& batch, const AttackSpec& spec);
AttackOutcome iterative_fgsm_family(const Classifier& model, const LabeledImages& batch,
                                    const AttackSpec& spec, IterativeVariant variant,
                                    std::uint64_t seed);
AttackOutcome deepfool(const Classifier& model, const LabeledImages& batch, const AttackSpec& spec);
AttackOutcome cw_l2(const Classifier& model, const LabeledImages& batch, const AttackSpec& spec);
AttackOutcome square_attack(const Classifier& model, const LabeledImages& batch, const AttackSpec& spec,
                            std::uint64_t seed);
AttackOutcome one_pixel(const Classifier& model, const LabeledImages& batch, const AttackSpec& spec,
                        std::uint64_t seed);
/// Diagnostic black-box attack (registry ID 100): replaces each image with the
/// first batch member the model assigns a different class. Used to exercise
/// the dataset pipeline with a known-successful attack.
AttackOutcome label_swap(const Classifier& model, const LabeledImages& batch, const AttackSpec& spec);

/// Dispatch by attack_id. Unknown IDs raise ConfigError; registry placeholders
/// raise NotImplementedError naming the ID.
AttackOutcome run_attack(const AttackSpec& spec, const Classifier& model, const LabeledImages& batch,
                         std::uint64_t seed = 0);

/// argmax(model(x_adv)) != y, recomputed from the stored float images.
std::vector<bool> misclassified(const Classifier& model, const LabeledImages& images);

/// A suite is a list of specs or {"scale": "mnist"|"cifar", "attacks": [...]}.
/// Entries may give only attack_id; other fields default per registry entry.
std::vector<AttackSpec> load_suite(const std::filesystem::path& path);
void save_suite(const std::vector<AttackSpec>& suite, const std::filesystem::path& path);

}  // namespace mad
