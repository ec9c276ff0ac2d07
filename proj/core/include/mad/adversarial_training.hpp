#pragma once

#include <cstdint>
#include <vector>

#include <nlohmann/json.hpp>

#include "mad/attacks.hpp"
#include "mad/dataset.hpp"
#include "mad/model.hpp"

namespace mad {

struct ATConfig {
  AttackSpec inner_attack = default_attack_spec(18);
  /// Half of every minibatch stays clean (the other half is adversarial).
  bool mix_clean = true;
  int epochs = 10;
  int batch_size = 32;
  double learning_rate = 0.05;
  Optimizer optimizer = Optimizer::kSgd;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  /// Share of the adversarial slots filled with pre-generated examples from
  /// the dataset's AT groups instead of fresh inner-attack output.
  double pregenerated_ratio = 0.25;
  /// Attack groups whose train-split examples feed the pre-generated share.
  std::vector<int> train_groups{1, 4};

  /// ConfigError unless the inner attack is an implemented white-box attack
  /// with a valid spec.
  void validate() const;
  TrainConfig train_config() const;
};

nlohmann::json to_json(const ATConfig& c);
ATConfig at_config_from_json(const nlohmann::json& j, ATConfig base = {});

/// Adversarial training from `model`. Clean minibatches come from
/// `clean_train` when given, otherwise from the dataset's clean train split.
/// Every adversarial slot is re-checked against the attack budget.
ModelState at_train(const ModelState& model, const MadDataset& dataset, const ATConfig& cfg,
                    const LabeledImages* clean_train = nullptr);

/// Accuracy (percent) on `attack(data)`.
double robust_accuracy(const ModelState& model, const LabeledImages& data, const AttackSpec& attack,
                       std::uint64_t seed, std::size_t batch = 256);

}  // namespace mad
