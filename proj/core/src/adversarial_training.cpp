#include "mad/adversarial_training.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "mad/errors.hpp"

namespace mad {

void ATConfig::validate() const {
  const AttackInfo* info = find_attack(inner_attack.attack_id);
  if (!info || !info->implemented) {
    throw ConfigError("AT inner attack " + std::to_string(inner_attack.attack_id) + " is not implemented");
  }
  if (info->knowledge != Knowledge::kWhiteBox) throw ConfigError("AT inner attack must be white-box");
  inner_attack.validate();
  if (!(pregenerated_ratio >= 0.0 && pregenerated_ratio <= 1.0)) {
    throw ConfigError("AT pregenerated_ratio must be in [0,1]");
  }
  train_config().validate();
}

TrainConfig ATConfig::train_config() const {
  TrainConfig t;
  t.epochs = epochs;
  t.batch_size = batch_size;
  t.learning_rate = learning_rate;
  t.optimizer = optimizer;
  t.momentum = momentum;
  t.seed = seed;
  return t;
}

nlohmann::json to_json(const ATConfig& c) {
  return {{"inner_attack", to_json(c.inner_attack)},
          {"mix_clean", c.mix_clean},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"optimizer", c.optimizer == Optimizer::kSgd ? "sgd" : "sgd_momentum"},
          {"momentum", c.momentum},
          {"seed", c.seed},
          {"pregenerated_ratio", c.pregenerated_ratio},
          {"train_groups", c.train_groups}};
}

ATConfig at_config_from_json(const nlohmann::json& j, ATConfig c) {
  if (!j.is_object()) throw ConfigError("AT config must be a JSON object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "inner_attack") c.inner_attack = attack_spec_from_json(v);
      else if (key == "mix_clean") c.mix_clean = v.get<bool>();
      else if (key == "epochs") c.epochs = v.get<int>();
      else if (key == "batch_size") c.batch_size = v.get<int>();
      else if (key == "learning_rate") c.learning_rate = v.get<double>();
      else if (key == "optimizer") {
        const auto s = v.get<std::string>();
        if (s == "sgd") c.optimizer = Optimizer::kSgd;
        else if (s == "sgd_momentum") c.optimizer = Optimizer::kSgdMomentum;
        else throw ConfigError("AT config: unknown optimizer '" + s + "'");
      } else if (key == "momentum") c.momentum = v.get<double>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "pregenerated_ratio") c.pregenerated_ratio = v.get<double>();
      else if (key == "train_groups") c.train_groups = v.get<std::vector<int>>();
      else throw ConfigError("AT config: unknown key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("AT config: ") + e.what());
  }
  return c;
}

namespace {

double perturbation_norm(std::span<const float> a, std::span<const float> b, Norm norm) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    if (norm == Norm::kLinf) acc = std::max(acc, std::abs(d));
    else acc += d * d;
  }
  return norm == Norm::kLinf ? acc : std::sqrt(acc);
}

}  // namespace

ModelState at_train(const ModelState& model, const MadDataset& dataset, const ATConfig& cfg,
                    const LabeledImages* clean_train) {
  cfg.validate();
  const LabeledImages train = clean_train ? *clean_train : dataset.clean_examples(Split::kTrain);
  if (train.empty()) throw DataError("at_train: no clean training data");

  // Pre-generated pool from the AT groups.
  LabeledImages pool;
  pool.shape = train.shape;
  if (cfg.pregenerated_ratio > 0.0) {
    for (int id : dataset.retained_attack_ids()) {
      const AttackRecord* rec = dataset.find(id);
      if (std::find(cfg.train_groups.begin(), cfg.train_groups.end(), rec->group) == cfg.train_groups.end()) continue;
      const auto part = dataset.attack_examples(id, dataset.is_split ? std::optional(Split::kTrain) : std::nullopt);
      pool.pixels.insert(pool.pixels.end(), part.pixels.begin(), part.pixels.end());
      pool.labels.insert(pool.labels.end(), part.labels.begin(), part.labels.end());
    }
    if (pool.empty()) throw ConfigError("at_train: the AT groups hold no pre-generated examples");
  }

  const AttackSpec& attack = cfg.inner_attack;
  const double budget = attack.norm == Norm::kLinf || attack.norm == Norm::kL2 ? attack.epsilon : -1.0;
  const BatchHook hook = [&](LabeledImages& batch, const ModelState& current, std::size_t epoch, std::size_t step) {
    const std::size_t B = batch.count();
    const std::size_t first_adv = cfg.mix_clean ? B - B / 2 : 0;
    const std::size_t slots = B - first_adv;
    if (slots == 0) return;
    const auto pre = static_cast<std::size_t>(std::floor(cfg.pregenerated_ratio * static_cast<double>(slots) + 0.5));
    const std::uint64_t stream = attack_stream_seed(cfg.seed, attack.attack_id, (epoch << 32) | step);

    // Fresh adversarial examples for the first slots - pre slots.
    const std::size_t fresh = slots - std::min(pre, slots);
    if (fresh > 0) {
      const auto clean = batch.slice(first_adv, first_adv + fresh);
      const ModelClassifier clf(current);
      const auto out = run_attack(attack, clf, clean, stream);
      for (std::size_t i = 0; i < fresh; ++i) {
        const auto adv = out.x_adv.image(i);
        if (budget >= 0.0 && perturbation_norm(adv, clean.image(i), attack.norm) > budget + 1e-6) {
          throw IntegrityError("at_train: inner attack exceeded its budget");
        }
        std::copy(adv.begin(), adv.end(), batch.image(first_adv + i).begin());
      }
    }
    if (pre > 0 && !pool.empty()) {
      std::mt19937_64 rng(stream ^ 0x707265ULL);
      std::uniform_int_distribution<std::size_t> pick(0, pool.count() - 1);
      for (std::size_t i = first_adv + fresh; i < B; ++i) {
        const std::size_t k = pick(rng);
        const auto src = pool.image(k);
        std::copy(src.begin(), src.end(), batch.image(i).begin());
        batch.labels[i] = pool.labels[k];
      }
    }
  };
  ModelState out = train_sgd(model, train, cfg.train_config(), hook);
  out.training_meta["adversarial_training"] = to_json(cfg);
  return out;
}

double robust_accuracy(const ModelState& model, const LabeledImages& data, const AttackSpec& attack,
                       std::uint64_t seed, std::size_t batch) {
  if (data.empty()) throw DataError("robust_accuracy: empty data");
  const ModelClassifier clf(model);
  std::size_t correct = 0;
  for (std::size_t b = 0, bi = 0; b < data.count(); b += batch, ++bi) {
    const auto part = data.slice(b, std::min(data.count(), b + batch));
    const auto out = run_attack(attack, clf, part, attack_stream_seed(seed, attack.attack_id, bi));
    correct += part.count() - out.success_count();
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(data.count());
}

}  // namespace mad
