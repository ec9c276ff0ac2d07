#include "mad/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>

#include "mad/errors.hpp"

namespace mad {

std::vector<double> ModelClassifier::logits(const Tensor<double>& x) const {
  return compute_logits(model_.spec, model_.params, x);
}

Tensor<double> ModelClassifier::logits_vjp(const Tensor<double>& x, std::span<const double> dlogits) const {
  return mad::logits_vjp(model_.spec, model_.params, x, dlogits);
}

std::string to_string(Norm n) {
  switch (n) {
    case Norm::kLinf: return "linf";
    case Norm::kL2: return "l2";
    case Norm::kL1: return "l1";
    case Norm::kL0: return "l0";
    case Norm::kOther: return "other";
  }
  return "other";
}

std::string to_string(Knowledge k) { return k == Knowledge::kWhiteBox ? "white_box" : "black_box"; }

Norm parse_norm(const std::string& s) {
  if (s == "linf") return Norm::kLinf;
  if (s == "l2") return Norm::kL2;
  if (s == "l1") return Norm::kL1;
  if (s == "l0") return Norm::kL0;
  if (s == "other") return Norm::kOther;
  throw ConfigError("unknown norm '" + s + "'");
}

Knowledge parse_knowledge(const std::string& s) {
  if (s == "white_box") return Knowledge::kWhiteBox;
  if (s == "black_box") return Knowledge::kBlackBox;
  throw ConfigError("unknown knowledge '" + s + "'");
}

std::size_t AttackOutcome::success_count() const {
  return static_cast<std::size_t>(std::count(success_mask.begin(), success_mask.end(), true));
}

// ---------------------------------------------------------------- registry

const std::vector<AttackInfo>& attack_registry() {
  using N = Norm;
  constexpr auto W = Knowledge::kWhiteBox;
  constexpr auto B = Knowledge::kBlackBox;
  static const std::vector<AttackInfo> table = {
      {0, "JSMA", {N::kL2}, W, false},
      {1, "DeepFool", {N::kL2}, W, true},
      {2, "UniversalPerturbation", {N::kLinf}, W, false},
      {3, "NewtonFool", {N::kL2, N::kL0}, W, false},
      {4, "BoundaryAttack", {N::kL2}, B, false},
      {5, "ElasticNet", {N::kL1}, W, false},
      {6, "ZooAttack", {N::kL0}, B, false},
      {7, "SpatialTransformation", {N::kOther}, B, false},
      {8, "HopSkipJump", {N::kLinf, N::kL2}, B, false},
      {9, "SimBA", {N::kL2}, B, false},
      {10, "ShadowAttack", {N::kOther}, W, false},
      {11, "GeoDA", {N::kLinf}, B, false},
      {12, "Wasserstein", {N::kOther}, W, false},
      {13, "FGSM", {N::kLinf}, W, true},
      {14, "BIM", {N::kLinf}, W, true},
      // Sometimes catalogued as L-inf; the implemented construction is CW-L2.
      {15, "CW", {N::kL2}, W, true},
      {16, "MIFGSM", {N::kLinf}, W, true},
      {17, "TIFGSM", {N::kLinf}, W, false},
      {18, "PGD", {N::kLinf}, W, true},
      {19, "PGDL2", {N::kL2}, W, true},
      {20, "TPGD", {N::kLinf}, W, true},
      {21, "RFGSM", {N::kLinf}, W, true},
      {22, "APGD", {N::kLinf, N::kL2}, W, false},
      {23, "APGD2", {N::kLinf, N::kL2}, W, false},
      {24, "FFGSM", {N::kLinf}, W, true},
      // Only the L-inf variant of Square is implemented.
      {25, "Square", {N::kLinf}, B, true},
      {26, "TIFGSM2", {N::kLinf}, W, false},
      {27, "EOTPGD", {N::kLinf}, W, true},
      {28, "OnePixel", {N::kL0}, B, true},
      {29, "FAB", {N::kLinf, N::kL2, N::kL1}, W, false},
      {100, "LabelSwap", {N::kOther}, B, true},
  };
  return table;
}

const AttackInfo* find_attack(int attack_id) {
  const auto& t = attack_registry();
  auto it = std::find_if(t.begin(), t.end(), [&](const AttackInfo& a) { return a.attack_id == attack_id; });
  return it == t.end() ? nullptr : &*it;
}

void AttackSpec::validate() const {
  if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw ConfigError(name + ": epsilon must be >= 0");
  if (iterations < 1) throw ConfigError(name + ": iterations must be >= 1");
  if (!(step_size > 0.0)) throw ConfigError(name + ": step_size must be > 0");
  if (!extra.is_object()) throw ConfigError(name + ": extra must be an object");
  const AttackInfo* info = find_attack(attack_id);
  if (!info) throw ConfigError("unknown attack_id " + std::to_string(attack_id));
  if (std::find(info->norms.begin(), info->norms.end(), norm) == info->norms.end()) {
    throw ConfigError("attack " + std::to_string(attack_id) + " (" + std::string(info->name) +
                      ") does not support norm " + to_string(norm));
  }
  if (knowledge != info->knowledge) {
    throw ConfigError("attack " + std::to_string(attack_id) + " is " + to_string(info->knowledge));
  }
}

double AttackSpec::extra_number(const std::string& key) const {
  auto it = extra.find(key);
  if (it == extra.end() || !it->is_number()) {
    throw ConfigError(name + ": missing numeric extra '" + key + "'");
  }
  return it->get<double>();
}

double AttackSpec::extra_number_or(const std::string& key, double fallback) const {
  auto it = extra.find(key);
  if (it == extra.end()) return fallback;
  if (!it->is_number()) throw ConfigError(name + ": extra '" + key + "' must be numeric");
  return it->get<double>();
}

nlohmann::json to_json(const AttackSpec& s) {
  return {{"attack_id", s.attack_id}, {"name", s.name},           {"norm", to_string(s.norm)},
          {"knowledge", to_string(s.knowledge)}, {"epsilon", s.epsilon}, {"step_size", s.step_size},
          {"iterations", s.iterations}, {"extra", s.extra}};
}

AttackSpec attack_spec_from_json(const nlohmann::json& j) {
  try {
    AttackSpec s;
    s.attack_id = j.at("attack_id").get<int>();
    const AttackInfo* info = find_attack(s.attack_id);
    s.name = j.contains("name") ? j.at("name").get<std::string>()
                                : (info ? std::string(info->name) : std::to_string(s.attack_id));
    s.norm = parse_norm(j.at("norm").get<std::string>());
    s.knowledge = parse_knowledge(j.at("knowledge").get<std::string>());
    s.epsilon = j.at("epsilon").get<double>();
    s.step_size = j.at("step_size").get<double>();
    s.iterations = j.at("iterations").get<int>();
    s.extra = j.value("extra", nlohmann::json::object());
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid attack spec: ") + e.what());
  }
}

AttackSpec default_attack_spec(int attack_id, BudgetScale scale) {
  const AttackInfo* info = find_attack(attack_id);
  if (!info) throw ConfigError("unknown attack_id " + std::to_string(attack_id));
  AttackSpec s;
  s.attack_id = attack_id;
  s.name = std::string(info->name);
  s.norm = info->norms.front();
  s.knowledge = info->knowledge;
  s.epsilon = scale == BudgetScale::kMnist ? 0.3 : 8.0 / 255.0;
  s.step_size = s.epsilon / 4.0;
  s.iterations = 10;
  switch (attack_id) {
    // Minimum-norm attacks: epsilon only caps the returned l2 perturbation.
    case 1:
      s.epsilon = scale == BudgetScale::kMnist ? 4.0 : 1.0;
      s.step_size = s.epsilon / 4.0;
      s.iterations = 50;
      s.extra = {{"overshoot", 0.02}};
      break;
    case 15:
      s.epsilon = scale == BudgetScale::kMnist ? 4.0 : 1.0;
      s.step_size = s.epsilon / 4.0;
      s.iterations = 100;
      s.extra = {{"c", 1.0}, {"confidence", 0.0}, {"lr", 0.01}};
      break;
    case 16: s.extra = {{"decay", 1.0}}; break;
    case 18: s.extra = {{"random_start", s.epsilon}}; break;
    case 19:
      s.epsilon = scale == BudgetScale::kMnist ? 2.0 : 0.5;
      s.step_size = s.epsilon / 4.0;
      s.extra = {{"random_start", 0.0}};
      break;
    case 20: s.extra = {{"init_std", 0.001}}; break;
    case 21: s.step_size = s.epsilon / 2.0; s.extra = {{"random_start", s.epsilon / 2.0}}; break;
    case 24: s.step_size = 1.25 * s.epsilon; s.extra = {{"random_start", s.epsilon}}; break;
    case 25: s.iterations = 100; s.extra = {{"p_init", 0.1}, {"query_budget", 100}}; break;
    case 27: s.extra = {{"random_start", s.epsilon}, {"eot_samples", 4}, {"eot_noise", s.epsilon / 8.0}}; break;
    case 28:
      s.epsilon = 1.0;
      s.step_size = 0.5;
      s.extra = {{"pixels", 1}, {"population", 40}, {"generations", 10}, {"differential_weight", 0.5}};
      break;
    default: break;
  }
  return s;
}

std::uint64_t attack_stream_seed(std::uint64_t global_seed, int attack_id, std::uint64_t batch_index) {
  // splitmix64 finalizer over a simple combination
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(global_seed) ^ static_cast<std::uint64_t>(attack_id + 1)) ^ batch_index);
}

// ---------------------------------------------------------------- helpers

namespace {

using Rng = std::mt19937_64;

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

std::size_t per_example(const Tensor<double>& x) { return x.size() / x.shape[0]; }

void check_batch(const Classifier& model, const LabeledImages& batch) {
  if (batch.empty()) throw DataError("attack: empty batch");
  if (!(batch.shape == model.input_shape())) throw DataError("attack: batch shape does not match model");
  for (int y : batch.labels) {
    if (y < 0 || y >= model.num_classes()) throw DataError("attack: label out of range");
  }
}

std::vector<int> argmax_rows(const std::vector<double>& z, std::size_t n) {
  std::vector<int> out(z.size() / n);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<int>(std::max_element(z.begin() + i * n, z.begin() + (i + 1) * n) - (z.begin() + i * n));
  }
  return out;
}

// Gradient of the mean loss w.r.t. the input.
Tensor<double> loss_grad(const Classifier& model, const Tensor<double>& x, std::span<const int> y,
                         const LossSpec& loss) {
  const auto z = model.logits(x);
  const auto n = static_cast<std::size_t>(model.num_classes());
  std::vector<double> dz;
  if (loss.kind == LossKind::kCrossEntropy) {
    softmax_cross_entropy(z, y, n, &dz);
  } else {
    kl_to_reference(z, *loss.reference_logits, n, &dz);
  }
  return model.logits_vjp(x, dz);
}

std::vector<float> round_to_float(const Tensor<double>& x) {
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<float>(std::clamp(x.data[i], 0.0, 1.0));
  return out;
}

// Converts to float32 while keeping the stored perturbation inside the budget.
std::vector<float> finalize(const Tensor<double>& x_adv, const Tensor<double>& x0, double eps, Norm norm) {
  std::vector<float> out = round_to_float(x_adv);
  if (norm != Norm::kL2) return out;
  const std::size_t d = per_example(x0);
  for (std::size_t i = 0; i < x0.shape[0]; ++i) {
    double radius = eps;
    for (int attempt = 0; attempt < 8; ++attempt) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = static_cast<double>(out[i * d + j]) - x0.data[i * d + j];
        s += diff * diff;
      }
      const double excess = std::sqrt(s) - eps;
      if (excess <= 1e-9) break;
      radius -= excess + 1e-9;
      Tensor<double> one({1, x0.shape[1], x0.shape[2], x0.shape[3]});
      Tensor<double> base = one;
      for (std::size_t j = 0; j < d; ++j) {
        one.data[j] = out[i * d + j];
        base.data[j] = x0.data[i * d + j];
      }
      const auto p = project_ball(one, base, std::max(radius, 0.0), Norm::kL2);
      for (std::size_t j = 0; j < d; ++j) out[i * d + j] = static_cast<float>(p.data[j]);
    }
  }
  return out;
}

AttackOutcome make_outcome(const Classifier& model, const LabeledImages& batch, std::vector<float> pixels,
                           std::int64_t steps) {
  AttackOutcome out;
  out.x_adv.shape = batch.shape;
  out.x_adv.pixels = std::move(pixels);
  out.x_adv.labels = batch.labels;
  out.success_mask = misclassified(model, out.x_adv);
  out.queries_or_steps = steps;
  return out;
}

void require_linf_or_l2(const AttackSpec& spec) {
  if (spec.norm != Norm::kLinf && spec.norm != Norm::kL2) {
    throw ConfigError(spec.name + ": unsupported norm " + to_string(spec.norm));
  }
}

void random_start(Tensor<double>& x, const Tensor<double>& x0, double magnitude, Norm norm, double eps,
                  Rng& rng) {
  if (magnitude <= 0.0) return;
  const std::size_t d = per_example(x);
  if (norm == Norm::kLinf) {
    std::uniform_real_distribution<double> u(-magnitude, magnitude);
    for (auto& v : x.data) v += u(rng);
  } else {
    std::normal_distribution<double> g(0.0, 1.0);
    std::uniform_real_distribution<double> r(0.0, magnitude);
    for (std::size_t i = 0; i < x.shape[0]; ++i) {
      std::vector<double> dir(d);
      double nrm = 0.0;
      for (auto& v : dir) {
        v = g(rng);
        nrm += v * v;
      }
      nrm = std::sqrt(nrm);
      const double radius = r(rng);
      for (std::size_t j = 0; j < d; ++j) x.data[i * d + j] += nrm > 0 ? dir[j] / nrm * radius : 0.0;
    }
  }
  x = project_ball(x, x0, eps, norm);
}

}  // namespace

std::vector<bool> misclassified(const Classifier& model, const LabeledImages& images) {
  const auto z = model.logits(to_tensor(images));
  const auto pred = argmax_rows(z, static_cast<std::size_t>(model.num_classes()));
  std::vector<bool> out(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) out[i] = pred[i] != images.labels[i];
  return out;
}

// ---------------------------------------------------------------- projection

Tensor<double> project_ball(const Tensor<double>& x_adv, const Tensor<double>& x0, double epsilon, Norm norm) {
  if (x_adv.shape != x0.shape) throw DataError("project_ball: shape mismatch");
  if (!(epsilon >= 0.0)) throw ConfigError("project_ball: epsilon must be >= 0");
  Tensor<double> out = x_adv;
  if (norm == Norm::kLinf) {
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double lo = std::max(0.0, x0.data[i] - epsilon);
      const double hi = std::min(1.0, x0.data[i] + epsilon);
      out.data[i] = std::clamp(out.data[i], lo, hi);
    }
    return out;
  }
  if (norm != Norm::kL2) throw ConfigError("project_ball: unsupported norm " + to_string(norm));

  const std::size_t N = x0.shape.empty() ? 0 : x0.shape[0];
  const std::size_t d = N ? x0.size() / N : 0;
  for (std::size_t i = 0; i < N; ++i) {
    const double* a = &x_adv.data[i * d];
    const double* o = &x0.data[i * d];
    double* z = &out.data[i * d];
    // z(t) = clip(x0 + t (y - x0)); ||z(t) - x0|| is nondecreasing in t.
    auto dist_at = [&](double t) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double v = std::clamp(o[j] + t * (a[j] - o[j]), 0.0, 1.0) - o[j];
        s += v * v;
      }
      return std::sqrt(s);
    };
    double t = 1.0;
    if (dist_at(1.0) > epsilon) {
      double lo = 0.0, hi = 1.0;
      for (int it = 0; it < 100 && hi - lo > 1e-16; ++it) {
        const double mid = 0.5 * (lo + hi);
        (dist_at(mid) <= epsilon ? lo : hi) = mid;
      }
      t = lo;
    }
    for (std::size_t j = 0; j < d; ++j) {
      z[j] = t == 1.0 ? std::clamp(a[j], 0.0, 1.0) : std::clamp(o[j] + t * (a[j] - o[j]), 0.0, 1.0);
    }
  }
  return out;
}

// ---------------------------------------------------------------- white box

AttackOutcome fgsm(const Classifier& model, const LabeledImages& batch, const AttackSpec& spec) {
  if (!(spec.epsilon >= 0.0)) throw ConfigError("fgsm: epsilon must be >= 0");
  check_batch(model, batch);
  const auto x0 = to_tensor(batch);
  const auto g = loss_grad(model, x0, batch.labels, {});
  Tensor<double> x = x0;
  for (std::size_t i = 0; i < x.size(); ++i) x.data[i] = std::clamp(x0.data[i] + spec.epsilon * sign(g.data[i]), 0.0, 1.0);
  return make_outcome(model, batch, round_to_float(x), 1);
}

AttackOutcome iterative_fgsm_family(const Classifier& model, const LabeledImages& batch, const AttackSpec& spec,
                                    IterativeVariant variant, std::uint64_t seed) {
  spec.validate();
  check_batch(model, batch);
  const Norm norm = variant == IterativeVariant::kPgdL2 ? Norm::kL2 : Norm::kLinf;
  if (spec.norm != norm) throw ConfigError(spec.name + ": variant requires norm " + to_string(norm));
  require_linf_or_l2(spec);

  // Variant extras are read up front so a missing key fails before any work.
  double decay = 0.0, start = 0.0, eot_noise = 0.0, init_std = 0.0;
  int eot_samples = 1;
  switch (variant) {
    case IterativeVariant::kMifgsm: decay = spec.extra_number("decay"); break;
    case IterativeVariant::kPgdLinf:
    case IterativeVariant::kPgdL2:
    case IterativeVariant::kRfgsm:
    case IterativeVariant::kFfgsm: start = spec.extra_number("random_start"); break;
    case IterativeVariant::kEotpgd:
      eot_samples = static_cast<int>(spec.extra_number("eot_samples"));
      if (eot_samples < 1) throw ConfigError(spec.name + ": eot_samples must be >= 1");
      eot_noise = spec.extra_number_or("eot_noise", spec.step_size / 2.0);
      start = spec.extra_number_or("random_start", 0.0);
      break;
    case IterativeVariant::kTpgd: init_std = spec.extra_number_or("init_std", 0.001); break;
    case IterativeVariant::kBim: break;
  }
  if (start < 0.0) throw ConfigError(spec.name + ": random_start must be >= 0");

  Rng rng(seed);
  const double eps = spec.epsilon;
  const auto x0 = to_tensor(batch);
  const std::size_t d = per_example(x0);
  Tensor<double> x = x0;

  std::vector<double> clean_logits;
  LossSpec loss;
  if (variant == IterativeVariant::kTpgd) {
    clean_logits = model.logits(x0);
    loss = {LossKind::kKlToReference, &clean_logits};
    std::normal_distribution<double> g(0.0, init_std);
    for (auto& v : x.data) v += g(rng);
    x = project_ball(x, x0, eps, norm);
  } else if (variant == IterativeVariant::kRfgsm) {
    std::normal_distribution<double> g(0.0, 1.0);
    for (auto& v : x.data) v += start * sign(g(rng));
    x = project_ball(x, x0, eps, norm);
  } else {
    random_start(x, x0, start, norm, eps, rng);
  }

  const bool single_step = variant == IterativeVariant::kRfgsm || variant == IterativeVariant::kFfgsm;
  const int steps = single_step ? 1 : spec.iterations;
  std::vector<double> momentum(variant == IterativeVariant::kMifgsm ? x.size() : 0, 0.0);

  for (int it = 0; it < steps; ++it) {
    Tensor<double> g;
    if (variant == IterativeVariant::kEotpgd) {
      g = Tensor<double>(x.shape, 0.0);
      std::uniform_real_distribution<double> u(-eot_noise, eot_noise);
      for (int s = 0; s < eot_samples; ++s) {
        Tensor<double> xs = x;
        for (auto& v : xs.data) v = std::clamp(v + u(rng), 0.0, 1.0);
        const auto gs = loss_grad(model, xs, batch.labels, loss);
        for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += gs.data[i] / eot_samples;
      }
    } else {
      g = loss_grad(model, x, batch.labels, loss);
    }

    if (variant == IterativeVariant::kMifgsm) {
      for (std::size_t i = 0; i < x.shape[0]; ++i) {
        double l1 = 0.0;
        for (std::size_t j = 0; j < d; ++j) l1 += std::abs(g.data[i * d + j]);
        for (std::size_t j = 0; j < d; ++j) {
          const std::size_t k = i * d + j;
          momentum[k] = decay * momentum[k] + (l1 > 0.0 ? g.data[k] / l1 : 0.0);
          g.data[k] = momentum[k];
        }
      }
    }

    if (norm == Norm::kLinf) {
      for (std::size_t i = 0; i < x.size(); ++i) x.data[i] += spec.step_size * sign(g.data[i]);
    } else {
      for (std::size_t i = 0; i < x.shape[0]; ++i) {
        double l2 = 0.0;
        for (std::size_t j = 0; j < d; ++j) l2 += g.data[i * d + j] * g.data[i * d + j];
        l2 = std::sqrt(l2);
        if (l2 == 0.0) continue;
        for (std::size_t j = 0; j < d; ++j) x.data[i * d + j] += spec.step_size * g.data[i * d + j] / l2;
      }
    }
    x = project_ball(x, x0, eps, norm);
  }
  return make_outcome(model, batch, finalize(x, x0, eps, norm), steps);
}

AttackOutcome deepfool(const Classifier& model, const LabeledImages& batch, const AttackSpec& spec) {
  spec.validate();
  check_batch(model, batch);
  const double overshoot = spec.extra_number_or("overshoot", 0.02);
  if (overshoot < 0.0) throw ConfigError("deepfool: overshoot must be >= 0");
  const auto n = static_cast<std::size_t>(model.num_classes());
  const auto x0 = to_tensor(batch);
  const std::size_t N = x0.shape[0], d = per_example(x0);

  Tensor<double> x = x0;
  std::vector<double> r_tot(x.size(), 0.0);
  std::vector<bool> active(N, true);
  std::int64_t steps = 0;

  for (int it = 0; it <= spec.iterations; ++it) {
    // Check current float images; drop examples that already flipped.
    LabeledImages cur;
    cur.shape = batch.shape;
    cur.pixels = round_to_float(x);
    cur.labels = batch.labels;
    const auto z = model.logits(to_tensor(cur));
    for (std::size_t i = 0; i < N; ++i) {
      const auto pred = std::max_element(z.begin() + i * n, z.begin() + (i + 1) * n) - (z.begin() + i * n);
      if (pred != batch.labels[i]) active[i] = false;
    }
    for (double v : z) {
      if (!std::isfinite(v)) throw NumericError("deepfool: non-finite logits");
    }
    if (it == spec.iterations || std::none_of(active.begin(), active.end(), [](bool a) { return a; })) break;
    ++steps;

    // Per-class input gradients at the current point.
    const auto xc = to_tensor(cur);
    std::vector<Tensor<double>> grads(n);
    for (std::size_t k = 0; k < n; ++k) {
      std::vector<double> dz(N * n, 0.0);
      for (std::size_t i = 0; i < N; ++i) dz[i * n + k] = active[i] ? 1.0 : 0.0;
      grads[k] = model.logits_vjp(xc, dz);
    }
    for (std::size_t i = 0; i < N; ++i) {
      if (!active[i]) continue;
      const auto y = static_cast<std::size_t>(batch.labels[i]);
      double best = std::numeric_limits<double>::infinity();
      std::size_t best_k = n;
      double best_f = 0.0, best_w2 = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        if (k == y) continue;
        double w2 = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          const double w = grads[k].data[i * d + j] - grads[y].data[i * d + j];
          w2 += w * w;
        }
        if (w2 == 0.0) continue;
        const double f = z[i * n + k] - z[i * n + y];
        const double dist = std::abs(f) / std::sqrt(w2);
        if (dist < best) {
          best = dist;
          best_k = k;
          best_f = f;
          best_w2 = w2;
        }
      }
      if (best_k == n) {
        active[i] = false;  // flat logits: no boundary direction
        continue;
      }
      const double scale = (std::abs(best_f) + 1e-4) / best_w2;
      for (std::size_t j = 0; j < d; ++j) {
        const double w = grads[best_k].data[i * d + j] - grads[y].data[i * d + j];
        r_tot[i * d + j] += scale * w;
        x.data[i * d + j] = std::clamp(x0.data[i * d + j] + (1.0 + overshoot) * r_tot[i * d + j], 0.0, 1.0);
      }
    }
  }
  return make_outcome(model, batch, finalize(x, x0, spec.epsilon, Norm::kL2), steps);
}

AttackOutcome cw_l2(const Classifier& model, const LabeledImages& batch, const AttackSpec& spec) {
  spec.validate();
  check_batch(model, batch);
  const double c = spec.extra_number_or("c", 1.0);
  const double kappa = spec.extra_number_or("confidence", 0.0);
  const double lr = spec.extra_number_or("lr", 0.01);
  if (!(c > 0.0)) throw ConfigError("cw_l2: trade-off constant c must be > 0");
  if (kappa < 0.0) throw ConfigError("cw_l2: confidence must be >= 0");
  if (!(lr > 0.0)) throw ConfigError("cw_l2: lr must be > 0");

  const auto n = static_cast<std::size_t>(model.num_classes());
  const auto x0 = to_tensor(batch);
  const std::size_t N = x0.shape[0], d = per_example(x0);
  constexpr double kLimit = 1.0 - 1e-6;

  std::vector<double> w(x0.size()), m(x0.size(), 0.0), v(x0.size(), 0.0);
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::atanh(std::clamp(2.0 * x0.data[i] - 1.0, -kLimit, kLimit));

  std::vector<float> best_success(x0.size());
  std::vector<double> best_success_dist(N, std::numeric_limits<double>::infinity());
  std::vector<float> best_any(x0.size());
  std::vector<double> best_any_obj(N, std::numeric_limits<double>::infinity());

  Tensor<double> xa(x0.shape);
  const double b1 = 0.9, b2 = 0.999, adam_eps = 1e-8;
  for (int it = 0; it <= spec.iterations; ++it) {
    for (std::size_t i = 0; i < w.size(); ++i) {
      xa.data[i] = static_cast<double>(static_cast<float>(0.5 * (std::tanh(w[i]) + 1.0)));
    }
    const auto z = model.logits(xa);
    std::vector<double> dz(N * n, 0.0);
    for (std::size_t i = 0; i < N; ++i) {
      const auto y = static_cast<std::size_t>(batch.labels[i]);
      std::size_t other = y == 0 ? 1 : 0;
      for (std::size_t k = 0; k < n; ++k) {
        if (k != y && z[i * n + k] > z[i * n + other]) other = k;
      }
      const double margin = z[i * n + y] - z[i * n + other];
      double dist2 = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = xa.data[i * d + j] - x0.data[i * d + j];
        dist2 += diff * diff;
      }
      const double obj = dist2 + c * std::max(margin + kappa, 0.0);
      if (margin + kappa <= 0.0 && dist2 < best_success_dist[i]) {
        best_success_dist[i] = dist2;
        for (std::size_t j = 0; j < d; ++j) best_success[i * d + j] = static_cast<float>(xa.data[i * d + j]);
      }
      if (obj < best_any_obj[i]) {
        best_any_obj[i] = obj;
        for (std::size_t j = 0; j < d; ++j) best_any[i * d + j] = static_cast<float>(xa.data[i * d + j]);
      }
      if (margin + kappa > 0.0) {
        dz[i * n + y] = c;
        dz[i * n + other] = -c;
      }
    }
    if (it == spec.iterations) break;
    const auto gz = model.logits_vjp(xa, dz);
    const double t = it + 1;
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double dx = 2.0 * (xa.data[k] - x0.data[k]) + gz.data[k];
      const double th = std::tanh(w[k]);
      const double g = dx * 0.5 * (1.0 - th * th);
      m[k] = b1 * m[k] + (1 - b1) * g;
      v[k] = b2 * v[k] + (1 - b2) * g * g;
      const double mh = m[k] / (1 - std::pow(b1, t));
      const double vh = v[k] / (1 - std::pow(b2, t));
      w[k] -= lr * mh / (std::sqrt(vh) + adam_eps);
    }
  }

  std::vector<float> out(x0.size());
  for (std::size_t i = 0; i < N; ++i) {
    const auto& src = std::isfinite(best_success_dist[i]) ? best_success : best_any;
    std::copy(src.begin() + i * d, src.begin() + (i + 1) * d, out.begin() + i * d);
  }
  return make_outcome(model, batch, finalize(to_tensor(out, N, batch.shape), x0, spec.epsilon, Norm::kL2),
                      spec.iterations);
}

// ---------------------------------------------------------------- black box

AttackOutcome square_attack(const Classifier& model, const LabeledImages& batch, const AttackSpec& spec,
                            std::uint64_t seed) {
  spec.validate();
  check_batch(model, batch);
  if (spec.norm != Norm::kLinf) throw ConfigError("square_attack: only the linf variant is implemented");
  const double budget_raw = spec.extra_number_or("query_budget", spec.iterations);
  if (!(budget_raw > 0.0)) throw ConfigError("square_attack: query budget must be > 0");
  const double p_init = spec.extra_number_or("p_init", 0.1);
  if (!(p_init > 0.0 && p_init <= 1.0)) throw ConfigError("square_attack: p_init must be in (0,1]");
  const auto budget = static_cast<std::int64_t>(budget_raw);

  Rng rng(seed);
  const auto n = static_cast<std::size_t>(model.num_classes());
  const ImageShape s = batch.shape;
  const std::size_t d = s.size();
  const double eps = spec.epsilon;

  auto margin_of = [&](const std::vector<double>& z, std::size_t y) {
    double other = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < n; ++k)
      if (k != y) other = std::max(other, z[k]);
    return z[y] - other;
  };
  auto p_at = [&](std::int64_t it) {
    // Halving schedule of the reference implementation, rescaled to the budget.
    const double r = static_cast<double>(it) * 10000.0 / static_cast<double>(budget);
    const double marks[] = {10, 50, 200, 500, 1000, 2000, 4000, 6000, 8000};
    double p = p_init;
    for (double mk : marks)
      if (r > mk) p /= 2.0;
    return p;
  };

  AttackOutcome out;
  out.accepted_losses.resize(batch.count());
  std::vector<float> pixels(batch.pixels);
  std::int64_t queries = 0;
  for (std::size_t i = 0; i < batch.count(); ++i) {
    const auto y = static_cast<std::size_t>(batch.labels[i]);
    const auto img0 = batch.image(i);
    std::vector<double> cur(img0.begin(), img0.end());
    double best = margin_of(model.logits(to_tensor(img0, 1, s)), y);
    for (std::int64_t it = 0; it < budget && best >= 0.0; ++it) {
      const double p = p_at(it);
      const auto side = std::clamp<std::size_t>(
          static_cast<std::size_t>(std::lround(std::sqrt(p * static_cast<double>(s.height * s.width)))), 1,
          std::min(s.height, s.width));
      std::uniform_int_distribution<std::size_t> rh(0, s.height - side), rw(0, s.width - side);
      const std::size_t r0 = rh(rng), c0 = rw(rng);
      std::vector<double> cand = cur;
      std::bernoulli_distribution coin(0.5);
      for (std::size_t ch = 0; ch < s.channels; ++ch) {
        const double delta = coin(rng) ? eps : -eps;
        for (std::size_t r = r0; r < r0 + side; ++r) {
          for (std::size_t c = c0; c < c0 + side; ++c) {
            const std::size_t k = (ch * s.height + r) * s.width + c;
            cand[k] = std::clamp(static_cast<double>(img0[k]) + delta, 0.0, 1.0);
          }
        }
      }
      std::vector<float> cand_f(cand.begin(), cand.end());
      const double loss = margin_of(model.logits(to_tensor(cand_f, 1, s)), y);
      ++queries;
      if (loss < best) {
        best = loss;
        cur.assign(cand_f.begin(), cand_f.end());
        out.accepted_losses[i].push_back(loss);
      }
    }
    std::copy(cur.begin(), cur.end(), pixels.begin() + i * d);
  }
  auto result = make_outcome(model, batch, std::move(pixels), queries);
  result.accepted_losses = std::move(out.accepted_losses);
  return result;
}

AttackOutcome one_pixel(const Classifier& model, const LabeledImages& batch, const AttackSpec& spec,
                        std::uint64_t seed) {
  spec.validate();
  check_batch(model, batch);
  const int pixels = static_cast<int>(spec.extra_number_or("pixels", 1));
  const int population = static_cast<int>(spec.extra_number_or("population", 40));
  const int generations = static_cast<int>(spec.extra_number_or("generations", spec.iterations));
  const double F = spec.extra_number_or("differential_weight", 0.5);
  if (pixels < 1) throw ConfigError("one_pixel: pixels must be >= 1");
  if (population < 4) throw ConfigError("one_pixel: differential evolution needs population >= 4");
  if (generations < 0) throw ConfigError("one_pixel: generations must be >= 0");

  Rng rng(seed);
  const ImageShape s = batch.shape;
  const std::size_t d = s.size();
  const auto n = static_cast<std::size_t>(model.num_classes());
  const std::size_t gene = 2 + s.channels;  // row, col, channel values
  const std::size_t dim = gene * static_cast<std::size_t>(pixels);
  const auto P = static_cast<std::size_t>(population);

  auto clamp_candidate = [&](std::vector<double>& v) {
    for (int p = 0; p < pixels; ++p) {
      double* g = &v[p * gene];
      g[0] = std::clamp(g[0], 0.0, static_cast<double>(s.height - 1));
      g[1] = std::clamp(g[1], 0.0, static_cast<double>(s.width - 1));
      for (std::size_t ch = 0; ch < s.channels; ++ch) g[2 + ch] = std::clamp(g[2 + ch], 0.0, 1.0);
    }
  };
  auto apply = [&](std::span<const float> img, const std::vector<double>& v, float* dst) {
    std::copy(img.begin(), img.end(), dst);
    for (int p = 0; p < pixels; ++p) {
      const double* g = &v[p * gene];
      const auto r = static_cast<std::size_t>(std::lround(g[0]));
      const auto c = static_cast<std::size_t>(std::lround(g[1]));
      for (std::size_t ch = 0; ch < s.channels; ++ch) {
        dst[(ch * s.height + r) * s.width + c] = static_cast<float>(g[2 + ch]);
      }
    }
  };

  std::vector<float> out_pixels(batch.pixels);
  std::int64_t queries = 0;
  for (std::size_t i = 0; i < batch.count(); ++i) {
    const auto img = batch.image(i);
    const auto y = static_cast<std::size_t>(batch.labels[i]);
    // Fitness: softmax probability of the true class (lower is better).
    auto evaluate = [&](const std::vector<std::vector<double>>& cands, std::vector<double>& fit,
                        std::vector<bool>& fooled) {
      std::vector<float> buf(cands.size() * d);
      for (std::size_t k = 0; k < cands.size(); ++k) apply(img, cands[k], &buf[k * d]);
      const auto z = model.logits(to_tensor(buf, cands.size(), s));
      queries += static_cast<std::int64_t>(cands.size());
      fit.resize(cands.size());
      fooled.resize(cands.size());
      for (std::size_t k = 0; k < cands.size(); ++k) {
        const double* row = &z[k * n];
        const double mx = *std::max_element(row, row + n);
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) sum += std::exp(row[j] - mx);
        fit[k] = std::exp(row[y] - mx) / sum;
        fooled[k] = static_cast<std::size_t>(std::max_element(row, row + n) - row) != y;
      }
    };

    std::uniform_real_distribution<double> ur(0.0, static_cast<double>(s.height - 1));
    std::uniform_real_distribution<double> uc(0.0, static_cast<double>(s.width - 1));
    std::uniform_real_distribution<double> uv(0.0, 1.0);
    std::vector<std::vector<double>> pop(P, std::vector<double>(dim));
    for (auto& cand : pop) {
      for (int p = 0; p < pixels; ++p) {
        cand[p * gene] = ur(rng);
        cand[p * gene + 1] = uc(rng);
        for (std::size_t ch = 0; ch < s.channels; ++ch) cand[p * gene + 2 + ch] = uv(rng);
      }
    }
    std::vector<double> fit;
    std::vector<bool> fooled;
    evaluate(pop, fit, fooled);

    std::uniform_int_distribution<std::size_t> pick(0, P - 1);
    for (int gen = 0; gen < generations; ++gen) {
      if (std::any_of(fooled.begin(), fooled.end(), [](bool f) { return f; })) break;
      std::vector<std::vector<double>> trials(P);
      for (std::size_t k = 0; k < P; ++k) {
        std::size_t a, b, c;
        do a = pick(rng); while (a == k);
        do b = pick(rng); while (b == k || b == a);
        do c = pick(rng); while (c == k || c == a || c == b);
        trials[k].resize(dim);
        for (std::size_t j = 0; j < dim; ++j) trials[k][j] = pop[a][j] + F * (pop[b][j] - pop[c][j]);
        clamp_candidate(trials[k]);
      }
      std::vector<double> tfit;
      std::vector<bool> tfooled;
      evaluate(trials, tfit, tfooled);
      for (std::size_t k = 0; k < P; ++k) {
        if (tfit[k] <= fit[k]) {
          pop[k] = std::move(trials[k]);
          fit[k] = tfit[k];
          fooled[k] = tfooled[k];
        }
      }
    }
    const std::size_t best = static_cast<std::size_t>(std::min_element(fit.begin(), fit.end()) - fit.begin());
    apply(img, pop[best], &out_pixels[i * d]);
  }
  return make_outcome(model, batch, std::move(out_pixels), queries);
}

AttackOutcome label_swap(const Classifier& model, const LabeledImages& batch, const AttackSpec& spec) {
  spec.validate();
  check_batch(model, batch);
  const auto z = model.logits(to_tensor(batch));
  const auto pred = argmax_rows(z, static_cast<std::size_t>(model.num_classes()));
  std::vector<float> pixels(batch.pixels);
  const std::size_t d = batch.shape.size();
  for (std::size_t i = 0; i < batch.count(); ++i) {
    for (std::size_t j = 0; j < batch.count(); ++j) {
      if (pred[j] != batch.labels[i]) {
        const auto src = batch.image(j);
        std::copy(src.begin(), src.end(), pixels.begin() + i * d);
        break;
      }
    }
  }
  return make_outcome(model, batch, std::move(pixels), 1);
}

// ---------------------------------------------------------------- dispatch

AttackOutcome run_attack(const AttackSpec& spec, const Classifier& model, const LabeledImages& batch,
                         std::uint64_t seed) {
  const AttackInfo* info = find_attack(spec.attack_id);
  if (!info) throw ConfigError("unknown attack_id " + std::to_string(spec.attack_id));
  if (!info->implemented) {
    throw NotImplementedError("attack " + std::to_string(spec.attack_id) + " (" + std::string(info->name) +
                              ") is not implemented");
  }
  spec.validate();
  switch (spec.attack_id) {
    case 1: return deepfool(model, batch, spec);
    case 13: return fgsm(model, batch, spec);
    case 14: return iterative_fgsm_family(model, batch, spec, IterativeVariant::kBim, seed);
    case 15: return cw_l2(model, batch, spec);
    case 16: return iterative_fgsm_family(model, batch, spec, IterativeVariant::kMifgsm, seed);
    case 18: return iterative_fgsm_family(model, batch, spec, IterativeVariant::kPgdLinf, seed);
    case 19: return iterative_fgsm_family(model, batch, spec, IterativeVariant::kPgdL2, seed);
    case 20: return iterative_fgsm_family(model, batch, spec, IterativeVariant::kTpgd, seed);
    case 21: return iterative_fgsm_family(model, batch, spec, IterativeVariant::kRfgsm, seed);
    case 24: return iterative_fgsm_family(model, batch, spec, IterativeVariant::kFfgsm, seed);
    case 25: return square_attack(model, batch, spec, seed);
    case 27: return iterative_fgsm_family(model, batch, spec, IterativeVariant::kEotpgd, seed);
    case 28: return one_pixel(model, batch, spec, seed);
    case 100: return label_swap(model, batch, spec);
    default: break;
  }
  throw NotImplementedError("attack " + std::to_string(spec.attack_id) + " has no dispatch entry");
}

std::vector<AttackSpec> load_suite(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open attack suite " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  const auto& list = j.is_object() && j.contains("attacks") ? j.at("attacks") : j;
  if (!list.is_array()) throw ConfigError(path.string() + ": suite must be a JSON list of attack specs");
  BudgetScale scale = BudgetScale::kMnist;
  if (j.is_object() && j.contains("scale")) {
    const auto s = j.at("scale").get<std::string>();
    if (s == "cifar") scale = BudgetScale::kCifar;
    else if (s != "mnist") throw ConfigError(path.string() + ": scale must be \"mnist\" or \"cifar\"");
  }
  std::vector<AttackSpec> suite;
  for (const auto& item : list) {
    if (!item.is_object() || !item.contains("attack_id")) {
      throw ConfigError(path.string() + ": every suite entry needs an attack_id");
    }
    // Entries may be partial; missing fields come from the registry defaults.
    const int id = item.at("attack_id").get<int>();
    nlohmann::json full = find_attack(id) ? to_json(default_attack_spec(id, scale)) : nlohmann::json::object();
    for (const auto& [k, v] : item.items()) {
      if (k == "extra" && full.contains("extra") && v.is_object()) full["extra"].update(v);
      else full[k] = v;
    }
    suite.push_back(attack_spec_from_json(full));
  }
  return suite;
}

void save_suite(const std::vector<AttackSpec>& suite, const std::filesystem::path& path) {
  auto j = nlohmann::json::array();
  for (const auto& s : suite) j.push_back(to_json(s));
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

}  // namespace mad
