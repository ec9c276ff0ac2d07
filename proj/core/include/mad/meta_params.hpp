#pragma once

#include <nlohmann/json.hpp>

namespace mad {

/// Episodic training hyperparameters. Field defaults follow the reference
/// protocol for MNIST-scale runs.
struct MetaParams {
  double beta = 0.01;     // inner learning rate
  double lambda_ = 0.001; // outer learning rate
  int epochs = 50;
  int episodes_per_epoch = 100;
  int batch_size = 32;
  int patience = 25;
  int ways = 5;        // attacks per support set
  int query_ways = 1;  // attacks per query set
  int shot_k = 15;     // support examples per class per attack
  int query_m = 6;     // query examples per class per attack
  int test_shot_K = 1;
  int test_query_M = 15;
  int inner_steps = 1;
  bool second_order = false;
  /// Test-time fine-tuning. finetune_lr <= 0 means "use beta".
  double finetune_lr = 0.0;
  int finetune_steps = 100;
  /// Validation panel size (meta_val tasks checked once per epoch).
  int val_tasks = 4;

  double effective_finetune_lr() const { return finetune_lr > 0.0 ? finetune_lr : beta; }
  /// Throws ConfigError on violated invariants.
  void validate() const;
  bool operator==(const MetaParams&) const = default;
};

nlohmann::json to_json(const MetaParams& p);
/// Missing keys keep their defaults; unknown keys raise ConfigError.
MetaParams meta_params_from_json(const nlohmann::json& j, MetaParams base = {});

}  // namespace mad
