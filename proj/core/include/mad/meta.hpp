#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mad/dataset.hpp"
#include "mad/meta_params.hpp"
#include "mad/model.hpp"

namespace mad {

/// A differentiable training objective over a flat parameter vector. The
/// model-backed implementation is the normal case; tests plug in closed-form
/// objectives.
class Objective {
 public:
  virtual ~Objective() = default;
  virtual LossAndGrad loss_and_grad(std::span<const double> theta, const LabeledImages& data) const = 0;
  virtual std::vector<double> hessian_vector(std::span<const double> theta, const LabeledImages& data,
                                             std::span<const double> v) const = 0;
  /// Percent.
  virtual double accuracy(std::span<const double> theta, const LabeledImages& data) const = 0;
};

class ModelObjective final : public Objective {
 public:
  explicit ModelObjective(ModelSpec spec) : spec_(std::move(spec)) {}
  LossAndGrad loss_and_grad(std::span<const double> theta, const LabeledImages& data) const override;
  std::vector<double> hessian_vector(std::span<const double> theta, const LabeledImages& data,
                                     std::span<const double> v) const override;
  double accuracy(std::span<const double> theta, const LabeledImages& data) const override;

 private:
  ModelSpec spec_;
};

/// inner_steps sequential steps theta <- theta - beta * grad L(theta; S).
/// beta = 0 returns theta unchanged. NumericError on a non-finite gradient.
std::vector<double> inner_update(const Objective& obj, std::span<const double> theta, const LabeledImages& support,
                                 double beta, int inner_steps);
ModelState inner_update(const ModelState& theta, const LabeledImages& support, double beta, int inner_steps);

/// Gradient of the query loss at theta_prime. First order: grad L_Q(theta')
/// w.r.t. theta'. Second order: the same vector pulled back through the inner
/// steps, v <- (I - beta H_S(theta_t)) v from the last step to the first.
std::vector<double> query_gradient(const Objective& obj, std::span<const double> theta_prime,
                                   const LabeledImages& query, bool second_order, std::span<const double> theta,
                                   const LabeledImages& support, double beta, int inner_steps);

class EarlyStopper {
 public:
  explicit EarlyStopper(int patience);

  /// Returns true when training should stop after this observation.
  bool observe(double loss);
  /// Index of the first observation equal to the best loss (-1 before any).
  int best_index() const { return best_index_; }
  double best_loss() const { return best_; }
  int observations() const { return count_; }
  bool stopped() const { return stopped_; }

  nlohmann::json state() const;
  static EarlyStopper from_state(const nlohmann::json& j);

 private:
  int patience_;
  double best_;
  int best_index_ = -1;
  int count_ = 0;
  int bad_ = 0;
  bool stopped_ = false;
};

struct EpisodeLog {
  int epoch = 0;
  int episode = 0;
  std::vector<int> attacks_support;
  std::vector<int> attacks_query;
  double inner_loss = 0.0;  // L_S at theta
  double query_loss = 0.0;  // L_Q at theta'
  double query_ca = 0.0;    // percent, at theta'
  double elapsed_s = 0.0;   // since the start of the run (excluded from content hashes)
};

struct MetaTrainLog {
  std::vector<EpisodeLog> episodes;
  std::vector<double> validation;  // one entry per epoch
  int best_index = -1;             // into validation
  std::string best_checkpoint;     // file name, empty without an output directory
  std::string stop_reason;         // "patience" or "epochs_exhausted"
  std::string validation_source;   // "meta_val" or "query_loss" when no meta_val attack exists

  nlohmann::json summary() const;
};

nlohmann::json to_json(const EpisodeLog& e);
EpisodeLog episode_log_from_json(const nlohmann::json& j);

/// Episode provider for one epoch sweep: (epoch, episode index) -> episode.
using EpisodeSource = std::function<Episode(int epoch, int episode)>;

struct EpochResult {
  std::vector<double> theta;
  std::vector<EpisodeLog> episodes;
  std::vector<double> gradient_sum;
};

/// One sweep of e episodes against a frozen theta followed by the single
/// outer update theta <- theta - (lambda / e) * sum_j g_j.
EpochResult meta_epoch(const Objective& obj, std::span<const double> theta, const MetaParams& params, int epoch,
                       const EpisodeSource& source);

/// Per-episode RNG seed; independent of how many episodes ran before, which
/// keeps resumed runs identical to uninterrupted ones.
std::uint64_t episode_seed(std::uint64_t seed, int epoch, int episode);

struct MetaTrainOptions {
  /// When set: writes last.ckpt, best_val.ckpt, log.jsonl, summary.json and
  /// trainer_state.json there after every epoch.
  std::optional<std::filesystem::path> out_dir;
  /// Continue from trainer_state.json in out_dir if present.
  bool resume = false;
  /// Called after each epoch (epoch index, validation loss).
  std::function<void(int, double)> on_epoch;
};

struct MetaTrainResult {
  ModelState best;
  ModelState last;
  MetaTrainLog log;
};

MetaTrainResult meta_train(const ModelState& model, const MadDataset& dataset, const MetaParams& params,
                           std::uint64_t seed, const MetaTrainOptions& options = {});

struct FinetuneRecord {
  double ca_before = 0.0;        // on all of Q', percent
  double ca_after = 0.0;
  double ca_adv_before = 0.0;    // adversarial part of Q'
  double ca_adv_after = 0.0;
  double ca_clean_before = 0.0;  // clean part of Q'
  double ca_clean_after = 0.0;
  double ot_hours = 0.0;         // fine-tuning wall clock only
  int steps = 0;
};

nlohmann::json to_json(const FinetuneRecord& r);

struct FinetuneResult {
  FinetuneRecord record;
  ModelState model;
};

/// Minibatch gradient steps on S' (batch_size examples per step, lr =
/// effective_finetune_lr, at most finetune_steps) with patience-based early
/// stopping on the S' loss; keeps the best-loss parameters.
FinetuneResult finetune_and_eval(const ModelState& best, const Episode& task, const MetaParams& params);

}  // namespace mad
