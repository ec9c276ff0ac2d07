#include "mad/meta.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>

#include "mad/checkpoint.hpp"
#include "mad/errors.hpp"
#include "mad/io.hpp"

namespace mad {

// ---------------------------------------------------------------- MetaParams

void MetaParams::validate() const {
  auto positive = [](int v, const char* name) {
    if (v < 1) throw ConfigError(std::string("meta params: ") + name + " must be >= 1");
  };
  if (!(beta > 0.0) || !std::isfinite(beta)) throw ConfigError("meta params: beta must be > 0");
  if (!(lambda_ > 0.0) || !std::isfinite(lambda_)) throw ConfigError("meta params: lambda must be > 0");
  positive(epochs, "epochs");
  positive(episodes_per_epoch, "episodes_per_epoch");
  positive(batch_size, "batch_size");
  positive(patience, "patience");
  positive(ways, "ways");
  positive(query_ways, "query_ways");
  positive(shot_k, "shot_k");
  positive(query_m, "query_m");
  positive(test_shot_K, "test_shot_K");
  positive(test_query_M, "test_query_M");
  positive(inner_steps, "inner_steps");
  positive(val_tasks, "val_tasks");
  if (query_ways > ways) throw ConfigError("meta params: query_ways must not exceed ways");
  if (finetune_steps < 0) throw ConfigError("meta params: finetune_steps must be >= 0");
  if (finetune_lr < 0.0 || !std::isfinite(finetune_lr)) throw ConfigError("meta params: finetune_lr must be >= 0");
}

nlohmann::json to_json(const MetaParams& p) {
  return {{"beta", p.beta},
          {"lambda", p.lambda_},
          {"epochs", p.epochs},
          {"episodes_per_epoch", p.episodes_per_epoch},
          {"batch_size", p.batch_size},
          {"patience", p.patience},
          {"ways", p.ways},
          {"query_ways", p.query_ways},
          {"shot_k", p.shot_k},
          {"query_m", p.query_m},
          {"test_shot_K", p.test_shot_K},
          {"test_query_M", p.test_query_M},
          {"inner_steps", p.inner_steps},
          {"second_order", p.second_order},
          {"finetune_lr", p.finetune_lr},
          {"finetune_steps", p.finetune_steps},
          {"val_tasks", p.val_tasks}};
}

MetaParams meta_params_from_json(const nlohmann::json& j, MetaParams p) {
  if (!j.is_object()) throw ConfigError("meta params must be a JSON object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "beta") p.beta = v.get<double>();
      else if (key == "lambda" || key == "lambda_") p.lambda_ = v.get<double>();
      else if (key == "epochs") p.epochs = v.get<int>();
      else if (key == "episodes_per_epoch") p.episodes_per_epoch = v.get<int>();
      else if (key == "batch_size") p.batch_size = v.get<int>();
      else if (key == "patience") p.patience = v.get<int>();
      else if (key == "ways") p.ways = v.get<int>();
      else if (key == "query_ways") p.query_ways = v.get<int>();
      else if (key == "shot_k") p.shot_k = v.get<int>();
      else if (key == "query_m") p.query_m = v.get<int>();
      else if (key == "test_shot_K") p.test_shot_K = v.get<int>();
      else if (key == "test_query_M") p.test_query_M = v.get<int>();
      else if (key == "inner_steps") p.inner_steps = v.get<int>();
      else if (key == "second_order") p.second_order = v.get<bool>();
      else if (key == "finetune_lr") p.finetune_lr = v.get<double>();
      else if (key == "finetune_steps") p.finetune_steps = v.get<int>();
      else if (key == "val_tasks") p.val_tasks = v.get<int>();
      else throw ConfigError("meta params: unknown key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("meta params: ") + e.what());
  }
  return p;
}

// ---------------------------------------------------------------- objectives

LossAndGrad ModelObjective::loss_and_grad(std::span<const double> theta, const LabeledImages& data) const {
  return mad::loss_and_grad(spec_, theta, data);
}

std::vector<double> ModelObjective::hessian_vector(std::span<const double> theta, const LabeledImages& data,
                                                   std::span<const double> v) const {
  return hessian_vector_product(spec_, theta, data, v);
}

double ModelObjective::accuracy(std::span<const double> theta, const LabeledImages& data) const {
  if (data.empty()) throw DataError("accuracy of an empty set");
  const auto z = compute_logits(spec_, theta, to_tensor(data));
  const auto n = static_cast<std::size_t>(spec_.num_classes);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.count(); ++i) {
    const auto row = z.begin() + static_cast<std::ptrdiff_t>(i * n);
    if (std::max_element(row, row + static_cast<std::ptrdiff_t>(n)) - row == data.labels[i]) ++correct;
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(data.count());
}

namespace {

void require_finite(std::span<const double> v, const char* what) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string(what) + ": non-finite value");
  }
}

}  // namespace

std::vector<double> inner_update(const Objective& obj, std::span<const double> theta, const LabeledImages& support,
                                 double beta, int inner_steps) {
  if (support.empty()) throw DataError("inner_update: empty support set");
  if (!(beta >= 0.0)) throw ConfigError("inner_update: beta must be >= 0");
  if (inner_steps < 1) throw ConfigError("inner_update: inner_steps must be >= 1");
  std::vector<double> out(theta.begin(), theta.end());
  if (beta == 0.0) return out;
  for (int s = 0; s < inner_steps; ++s) {
    const auto lg = obj.loss_and_grad(out, support);
    require_finite(lg.grad, "inner_update gradient");
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= beta * lg.grad[i];
  }
  return out;
}

ModelState inner_update(const ModelState& theta, const LabeledImages& support, double beta, int inner_steps) {
  ModelState out = theta;
  out.params = inner_update(ModelObjective(theta.spec), theta.params, support, beta, inner_steps);
  return out;
}

std::vector<double> query_gradient(const Objective& obj, std::span<const double> theta_prime,
                                   const LabeledImages& query, bool second_order, std::span<const double> theta,
                                   const LabeledImages& support, double beta, int inner_steps) {
  if (query.empty()) throw DataError("query_gradient: empty query set");
  if (theta_prime.size() != theta.size()) throw DataError("query_gradient: parameter size mismatch");
  auto v = obj.loss_and_grad(theta_prime, query).grad;
  require_finite(v, "query gradient");
  if (!second_order || beta == 0.0) return v;

  // Replay the inner trajectory, then pull v back through each step.
  std::vector<std::vector<double>> trajectory{std::vector<double>(theta.begin(), theta.end())};
  for (int s = 1; s < inner_steps; ++s) {
    trajectory.push_back(inner_update(obj, trajectory.back(), support, beta, 1));
  }
  for (auto it = trajectory.rbegin(); it != trajectory.rend(); ++it) {
    const auto hv = obj.hessian_vector(*it, support, v);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= beta * hv[i];
  }
  require_finite(v, "second-order query gradient");
  return v;
}

// ---------------------------------------------------------------- early stopping

EarlyStopper::EarlyStopper(int patience) : patience_(patience), best_(std::numeric_limits<double>::infinity()) {
  if (patience < 1) throw ConfigError("early stopper: patience must be >= 1");
}

bool EarlyStopper::observe(double loss) {
  if (loss < best_ || best_index_ < 0) {
    best_ = loss;
    best_index_ = count_;
    bad_ = 0;
  } else {
    ++bad_;
  }
  ++count_;
  if (bad_ >= patience_) stopped_ = true;
  return stopped_;
}

nlohmann::json EarlyStopper::state() const {
  return {{"patience", patience_},
          {"best", best_index_ < 0 ? nlohmann::json(nullptr) : nlohmann::json(best_)},
          {"best_index", best_index_},
          {"count", count_},
          {"bad", bad_},
          {"stopped", stopped_}};
}

EarlyStopper EarlyStopper::from_state(const nlohmann::json& j) {
  EarlyStopper s(j.at("patience").get<int>());
  if (!j.at("best").is_null()) s.best_ = j.at("best").get<double>();
  s.best_index_ = j.at("best_index").get<int>();
  s.count_ = j.at("count").get<int>();
  s.bad_ = j.at("bad").get<int>();
  s.stopped_ = j.at("stopped").get<bool>();
  return s;
}

// ---------------------------------------------------------------- logs

nlohmann::json to_json(const EpisodeLog& e) {
  return {{"epoch", e.epoch},           {"episode", e.episode},       {"attacks_support", e.attacks_support},
          {"attacks_query", e.attacks_query}, {"inner_loss", e.inner_loss}, {"query_loss", e.query_loss},
          {"query_ca", e.query_ca},     {"elapsed_s", e.elapsed_s}};
}

EpisodeLog episode_log_from_json(const nlohmann::json& j) {
  EpisodeLog e;
  e.epoch = j.at("epoch").get<int>();
  e.episode = j.at("episode").get<int>();
  e.attacks_support = j.at("attacks_support").get<std::vector<int>>();
  e.attacks_query = j.at("attacks_query").get<std::vector<int>>();
  e.inner_loss = j.at("inner_loss").get<double>();
  e.query_loss = j.at("query_loss").get<double>();
  e.query_ca = j.at("query_ca").get<double>();
  e.elapsed_s = j.value("elapsed_s", 0.0);
  return e;
}

nlohmann::json MetaTrainLog::summary() const {
  return {{"episodes", episodes.size()},
          {"validation", validation},
          {"best_index", best_index},
          {"best_validation_loss", best_index >= 0 ? nlohmann::json(validation[best_index]) : nlohmann::json(nullptr)},
          {"best_checkpoint", best_checkpoint},
          {"stop_reason", stop_reason},
          {"validation_source", validation_source}};
}

// ---------------------------------------------------------------- training

std::uint64_t episode_seed(std::uint64_t seed, int epoch, int episode) {
  return attack_stream_seed(seed, epoch, static_cast<std::uint64_t>(episode));
}

EpochResult meta_epoch(const Objective& obj, std::span<const double> theta, const MetaParams& params, int epoch,
                       const EpisodeSource& source) {
  params.validate();
  EpochResult r;
  r.gradient_sum.assign(theta.size(), 0.0);
  for (int j = 0; j < params.episodes_per_epoch; ++j) {
    const Episode ep = source(epoch, j);
    const auto& S = ep.support.images;
    const auto& Q = ep.query.images;
    EpisodeLog log;
    log.epoch = epoch;
    log.episode = j;
    log.attacks_support = ep.attacks_support;
    log.attacks_query = ep.attacks_query;
    log.inner_loss = obj.loss_and_grad(theta, S).loss;
    const auto theta_prime = inner_update(obj, theta, S, params.beta, params.inner_steps);
    const auto g = query_gradient(obj, theta_prime, Q, params.second_order, theta, S, params.beta, params.inner_steps);
    log.query_loss = obj.loss_and_grad(theta_prime, Q).loss;
    log.query_ca = obj.accuracy(theta_prime, Q);
    for (std::size_t i = 0; i < g.size(); ++i) r.gradient_sum[i] += g[i];
    r.episodes.push_back(std::move(log));
  }
  const double scale = params.lambda_ / static_cast<double>(params.episodes_per_epoch);
  r.theta.assign(theta.begin(), theta.end());
  for (std::size_t i = 0; i < r.theta.size(); ++i) r.theta[i] -= scale * r.gradient_sum[i];
  require_finite(r.theta, "meta_epoch outer update");
  return r;
}

namespace {

constexpr std::uint64_t kValidationStream = 0x76616c6964ULL;

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace

MetaTrainResult meta_train(const ModelState& model, const MadDataset& dataset, const MetaParams& params,
                           std::uint64_t seed, const MetaTrainOptions& options) {
  params.validate();
  if (dataset.attacks_in_role(Role::kMetaTrain).empty()) {
    throw ConfigError("meta_train: dataset " + dataset.name + " has no meta_train attack");
  }
  if (dataset.num_classes != model.spec.num_classes || !(dataset.shape == model.spec.input_shape)) {
    throw DataError("meta_train: dataset geometry does not match the model");
  }
  const ModelObjective obj(model.spec);
  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };

  // Fixed validation panel, cycling over the meta_val attacks.
  std::vector<Episode> panel;
  const auto val_ids = dataset.attacks_in_role(Role::kMetaVal);
  if (!val_ids.empty()) {
    std::mt19937_64 vrng(seed ^ kValidationStream);
    for (int t = 0; t < params.val_tasks; ++t) {
      panel.push_back(sample_eval_task(dataset, val_ids[static_cast<std::size_t>(t) % val_ids.size()], params, vrng));
    }
  }

  MetaTrainResult res;
  res.log.validation_source = panel.empty() ? "query_loss" : "meta_val";
  std::vector<double> theta = model.params;
  std::vector<double> best = theta;
  EarlyStopper stopper(params.patience);
  int start_epoch = 0;

  const auto state_path = options.out_dir ? *options.out_dir / "trainer_state.json" : std::filesystem::path{};
  if (options.resume && options.out_dir && std::filesystem::exists(state_path)) {
    const auto bytes = read_file(state_path);
    const auto st = nlohmann::json::parse(bytes.begin(), bytes.end());
    if (st.at("seed").get<std::uint64_t>() != seed || meta_params_from_json(st.at("params")) != params) {
      throw ConfigError("meta_train: resume state was written with a different seed or parameters");
    }
    start_epoch = st.at("next_epoch").get<int>();
    stopper = EarlyStopper::from_state(st.at("stopper"));
    res.log.validation = st.at("validation").get<std::vector<double>>();
    theta = load_checkpoint(*options.out_dir / "last.ckpt").params;
    best = load_checkpoint(*options.out_dir / "best_val.ckpt").params;
    std::ifstream in(*options.out_dir / "log.jsonl");
    for (std::string line; std::getline(in, line);) {
      if (!line.empty()) res.log.episodes.push_back(episode_log_from_json(nlohmann::json::parse(line)));
    }
  }

  auto make_state = [&](const std::vector<double>& p, int epochs_done) {
    ModelState s = model;
    s.params = p;
    s.training_meta["meta_epochs_run"] = epochs_done;
    s.training_meta["meta_seed"] = seed;
    return s;
  };

  const EpisodeSource source = [&](int epoch, int episode) {
    std::mt19937_64 rng(episode_seed(seed, epoch, episode));
    return sample_train_episode(dataset, params, rng);
  };

  int epoch = start_epoch;
  for (; epoch < params.epochs && !stopper.stopped(); ++epoch) {
    auto r = meta_epoch(obj, theta, params, epoch, source);
    for (auto& e : r.episodes) e.elapsed_s = elapsed();
    theta = std::move(r.theta);

    double val = 0.0;
    if (!panel.empty()) {
      for (const auto& task : panel) {
        const auto adapted = inner_update(obj, theta, task.support.images, params.beta, params.inner_steps);
        val += obj.loss_and_grad(adapted, task.query.images).loss;
      }
      val /= static_cast<double>(panel.size());
    } else {
      for (const auto& e : r.episodes) val += e.query_loss;
      val /= static_cast<double>(r.episodes.size());
    }
    if (!std::isfinite(val)) throw NumericError("meta_train: validation loss is not finite");
    res.log.validation.push_back(val);
    const int before = stopper.best_index();
    stopper.observe(val);
    if (stopper.best_index() != before) best = theta;
    res.log.episodes.insert(res.log.episodes.end(), r.episodes.begin(), r.episodes.end());

    if (options.out_dir) {
      const auto& dir = *options.out_dir;
      save_checkpoint(make_state(theta, epoch + 1), dir / "last.ckpt");
      save_checkpoint(make_state(best, stopper.best_index() + 1), dir / "best_val.ckpt");
      std::string lines;
      for (const auto& e : res.log.episodes) lines += to_json(e).dump() + "\n";
      write_text(dir / "log.jsonl", lines);
      const nlohmann::json st = {{"seed", seed},
                                 {"params", to_json(params)},
                                 {"next_epoch", epoch + 1},
                                 {"stopper", stopper.state()},
                                 {"validation", res.log.validation}};
      write_text(state_path, st.dump(2) + "\n");
    }
    if (options.on_epoch) options.on_epoch(epoch, val);
  }

  res.log.best_index = stopper.best_index();
  res.log.stop_reason = stopper.stopped() ? "patience" : "epochs_exhausted";
  if (options.out_dir) {
    res.log.best_checkpoint = "best_val.ckpt";
    write_text(*options.out_dir / "summary.json", res.log.summary().dump(2) + "\n");
  }
  res.best = make_state(best, stopper.best_index() + 1);
  res.last = make_state(theta, epoch);
  return res;
}

// ---------------------------------------------------------------- test protocol

nlohmann::json to_json(const FinetuneRecord& r) {
  return {{"ca_before", r.ca_before},         {"ca_after", r.ca_after},
          {"ca_adv_before", r.ca_adv_before}, {"ca_adv_after", r.ca_adv_after},
          {"ca_clean_before", r.ca_clean_before}, {"ca_clean_after", r.ca_clean_after},
          {"ot_hours", r.ot_hours},           {"steps", r.steps}};
}

FinetuneResult finetune_and_eval(const ModelState& best, const Episode& task, const MetaParams& params) {
  params.validate();
  if (task.support.size() == 0 || task.query.size() == 0) throw DataError("finetune_and_eval: empty task");
  const ModelObjective obj(best.spec);
  const auto& S = task.support.images;
  const auto& Q = task.query.images;
  const auto Qadv = task.query.adversarial();
  const auto Qclean = task.query.clean();
  auto score = [&](std::span<const double> theta, double& all, double& adv, double& clean) {
    all = obj.accuracy(theta, Q);
    adv = Qadv.empty() ? 0.0 : obj.accuracy(theta, Qadv);
    clean = Qclean.empty() ? 0.0 : obj.accuracy(theta, Qclean);
  };

  FinetuneResult out;
  auto& rec = out.record;
  score(best.params, rec.ca_before, rec.ca_adv_before, rec.ca_clean_before);

  const auto t0 = std::chrono::steady_clock::now();
  std::vector<double> theta = best.params;
  std::vector<double> keep = theta;
  const double lr = params.effective_finetune_lr();
  const auto bs = static_cast<std::size_t>(params.batch_size);
  EarlyStopper stopper(params.patience);
  int steps = 0;
  for (int s = 0; s < params.finetune_steps; ++s) {
    // Consecutive minibatches of S', wrapping around.
    const std::size_t n = S.count();
    LabeledImages batch;
    if (bs >= n) {
      batch = S;
    } else {
      batch.shape = S.shape;
      for (std::size_t i = 0; i < bs; ++i) {
        const std::size_t k = (static_cast<std::size_t>(s) * bs + i) % n;
        batch.push_back(S.image(k), S.labels[k]);
      }
    }
    const auto lg = obj.loss_and_grad(theta, batch);
    require_finite(lg.grad, "finetune gradient");
    for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= lr * lg.grad[i];
    ++steps;
    const int before = stopper.best_index();
    const bool stop = stopper.observe(obj.loss_and_grad(theta, S).loss);
    if (stopper.best_index() != before) keep = theta;
    if (stop) break;
  }
  rec.ot_hours = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 3600.0;
  rec.steps = steps;
  score(keep, rec.ca_after, rec.ca_adv_after, rec.ca_clean_after);
  out.model = best;
  out.model.params = std::move(keep);
  out.model.training_meta["finetune_steps"] = steps;
  return out;
}

}  // namespace mad
