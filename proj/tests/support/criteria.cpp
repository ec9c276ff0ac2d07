#include "criteria.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "app.hpp"
#include "generators.hpp"
#include "mad/attacks.hpp"
#include "mad/checkpoint.hpp"
#include "mad/dataset.hpp"
#include "mad/errors.hpp"
#include "mad/io.hpp"
#include "mad/meta.hpp"
#include "mad/metrics.hpp"
#include "mad/model.hpp"
#include "oracles.hpp"
#include "registry.hpp"

namespace fs = std::filesystem;

namespace mad::testing {
namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string num(double v) {
  std::ostringstream os;
  os.precision(12);
  os << v;
  return os.str();
}

bool near(double a, double b, double tol) { return std::abs(a - b) <= tol; }

template <class E, class F>
bool throws(F&& f) {
  try {
    f();
  } catch (const E&) {
    return true;
  } catch (...) {
    return false;
  }
  return false;
}

}  // namespace

fs::path source_dir() { return fs::path(MAD_SOURCE_DIR); }

// ------------------------------------------------------------------ metrics

CriterionResult metric_oracle_suite(double tol) {
  const auto t0 = Clock::now();
  CriterionResult r;
  struct DsrCase {
    double ca_d, ca_a, cca, expected;
  };
  // Frozen from a 30-digit evaluation of the formula.
  const DsrCase dsr_cases[] = {
      {90.0, 10.0, 95.0, 0.941176470588235294},
      {97.4, 0.0, 96.06, 1.01394961482406829},  // defended CA above the clean CCA
      {50.0, 20.0, 90.0, 0.428571428571428571},
      {20.0, 20.0, 90.0, 0.0},
  };
  for (const auto& c : dsr_cases) {
    const double got = compute_dsr(c.ca_d, c.ca_a, c.cca);
    r.check(near(got, c.expected, tol), "dsr(" + num(c.ca_d) + "," + num(c.ca_a) + "," + num(c.cca) + ") = " +
                                            num(got) + ", expected " + num(c.expected));
  }
  r.check(compute_dsr(97.4, 0.0, 96.06) > 1.0, "DSR must exceed 1 when CA_D > CCA");

  struct EdsrCase {
    double dsr, ot, expected;
  };
  const EdsrCase edsr_cases[] = {
      {0.941176470588235294, 0.5, 0.570852385611890281},
      {1.0, 0.0055, 0.994515097308919036},  // small OT
      {1.014, 0.0055, 1.00843830867124390},
      {0.428571428571428571, 2.0, 0.0580008356728340108},
  };
  for (const auto& c : edsr_cases) {
    const double got = compute_edsr(c.dsr, c.ot);
    r.check(near(got, c.expected, tol),
            "edsr(" + num(c.dsr) + "," + num(c.ot) + ") = " + num(got) + ", expected " + num(c.expected));
  }
  for (double d : {0.0, 0.5, 1.0, 1.014, 2.5}) {
    r.check(compute_edsr(d, 0.0) == d, "EDSR at OT=0 must equal DSR (" + num(d) + ")");
  }

  Gen g(99);
  for (int i = 0; i < 200; ++i) {
    const double cca = g.uniform(50.0, 100.0), ca_a = g.uniform(0.0, cca - 1.0), ca_d = g.uniform(0.0, 100.0);
    const double ot = g.uniform(0.0, 3.0);
    const double d = compute_dsr(ca_d, ca_a, cca);
    r.check(near(d, dsr_oracle(ca_d, ca_a, cca), tol), "random dsr case " + std::to_string(i));
    r.check(near(compute_edsr(d, ot), edsr_oracle(d, ot), tol), "random edsr case " + std::to_string(i));
    r.check(compute_edsr(d, ot) <= d + tol || d < 0, "EDSR must not exceed DSR for non-negative DSR");
  }

  r.check(throws<UndefinedMetricError>([] { compute_dsr(50, 90, 90); }), "cca == ca_attacked must be undefined");
  r.check(throws<UndefinedMetricError>([] { compute_dsr(50, 95, 90); }), "cca < ca_attacked must be undefined");
  r.check(throws<DomainError>([] { compute_edsr(0.5, -1e-3); }), "negative OT must be rejected");
  r.check(throws<DomainError>([] { compute_edsr(0.5, std::nan("")); }), "NaN OT must be rejected");

  const auto rec_a = make_record(1, "learned", 95.0, 10.0, 90.0, 0.5);
  const auto rec_b = make_record(2, "new", 95.0, 0.0, 96.0, 0.0);
  r.check(near(rec_a.dsr, 0.941176470588235294, tol) && near(rec_a.edsr, 0.570852385611890281, tol),
          "make_record must fill dsr and edsr");
  const auto report = build_report("toy", "meta_at", {rec_a, rec_b}, 94.0);
  r.check(near(report.by_role.at("all").dsr, (rec_a.dsr + rec_b.dsr) / 2.0, tol), "report mean DSR");
  r.check(near(report.by_role.at("learned").dsr, rec_a.dsr, tol), "report per-role DSR");
  auto tampered = rec_a;
  tampered.dsr += 1e-6;
  r.check(throws<IntegrityError>([&] { build_report("toy", "m", {tampered}, 94.0); }),
          "build_report must reject inconsistent records");

  r.seconds = since(t0);
  r.summary = "DSR/EDSR oracles within " + num(tol);
  return r;
}

// ------------------------------------------------------------------ attacks

namespace {

// Counts gradient requests so black-box attacks can be held to logits only.
class CountingClassifier final : public Classifier {
 public:
  explicit CountingClassifier(const Classifier& inner) : inner_(inner) {}
  ImageShape input_shape() const override { return inner_.input_shape(); }
  int num_classes() const override { return inner_.num_classes(); }
  std::vector<double> logits(const Tensor<double>& x) const override {
    ++logit_calls;
    return inner_.logits(x);
  }
  Tensor<double> logits_vjp(const Tensor<double>& x, std::span<const double> dlogits) const override {
    ++vjp_calls;
    return inner_.logits_vjp(x, dlogits);
  }
  mutable long logit_calls = 0;
  mutable long vjp_calls = 0;

 private:
  const Classifier& inner_;
};

// Two-class logistic model: logits = [0, <w, x> + b].
class LogisticClassifier final : public Classifier {
 public:
  LogisticClassifier(ImageShape s, std::vector<double> w, double b) : s_(s), w_(std::move(w)), b_(b) {}
  ImageShape input_shape() const override { return s_; }
  int num_classes() const override { return 2; }
  double z(const Tensor<double>& x, std::size_t i) const {
    double acc = b_;
    for (std::size_t j = 0; j < w_.size(); ++j) acc += w_[j] * x.data[i * w_.size() + j];
    return acc;
  }
  std::vector<double> logits(const Tensor<double>& x) const override {
    std::vector<double> out;
    for (std::size_t i = 0; i < x.shape[0]; ++i) {
      out.push_back(0.0);
      out.push_back(z(x, i));
    }
    return out;
  }
  Tensor<double> logits_vjp(const Tensor<double>& x, std::span<const double> dl) const override {
    Tensor<double> g(x.shape);
    for (std::size_t i = 0; i < x.shape[0]; ++i) {
      for (std::size_t j = 0; j < w_.size(); ++j) g.data[i * w_.size() + j] = dl[2 * i + 1] * w_[j];
    }
    return g;
  }
  const std::vector<double>& w() const { return w_; }

 private:
  ImageShape s_;
  std::vector<double> w_;
  double b_;
};

std::vector<int> argmax_rows(const std::vector<double>& z, std::size_t n) {
  std::vector<int> out(z.size() / n);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < n; ++k) {
      if (z[i * n + k] > z[i * n + best]) best = k;
    }
    out[i] = static_cast<int>(best);
  }
  return out;
}

// Rescales an attack's defaults to a new budget, keeping step and noise ratios.
AttackSpec with_budget(AttackSpec s, double eps) {
  const double ratio = s.epsilon > 0 ? eps / s.epsilon : 0.0;
  s.step_size = eps > 0 ? s.step_size * ratio : 0.01;
  for (const char* key : {"random_start", "eot_noise"}) {
    if (s.extra.contains(key)) s.extra[key] = s.extra[key].get<double>() * ratio;
  }
  s.epsilon = eps;
  return s;
}

}  // namespace

CriterionResult attack_property_suite(const AttackSuiteOptions& opts) {
  const auto t0 = Clock::now();
  CriterionResult r;
  long total = 0;
  for (const auto& info : attack_registry()) {
    if (!info.implemented || info.attack_id >= 100) continue;
    const int id = info.attack_id;
    for (int k = 0; k < opts.instances_per_attack; ++k) {
      Gen g(opts.seed * 1000003ULL + static_cast<std::uint64_t>(id) * 10007ULL + static_cast<std::uint64_t>(k));
      const auto side = static_cast<std::size_t>(g.integer(4, 7));
      const ImageShape sq{static_cast<std::size_t>(g.coin(0.7) ? 1 : 3), side, side};
      const int classes = g.integer(2, 4);
      const auto model = g.tiny_model(sq, classes);
      const auto batch = g.images(sq, static_cast<std::size_t>(g.integer(1, 3)), classes);
      auto spec = default_attack_spec(id);
      const bool zero = k % 10 == 0 && spec.norm != Norm::kL0;
      double eps = spec.norm == Norm::kL2 ? g.uniform(0.1, 2.5) : g.uniform(0.02, 0.5);
      if (zero) eps = 0.0;
      if (spec.norm != Norm::kL0) spec = with_budget(spec, eps);
      if (id == 15) spec.iterations = 30;
      const std::string tag = info.name.data() + std::string(" #") + std::to_string(k);

      const ModelClassifier base(model);
      const CountingClassifier counted(base);
      const std::uint64_t seed = g.rng()();
      AttackOutcome out;
      try {
        out = run_attack(spec, counted, batch, seed);
      } catch (const std::exception& e) {
        r.check(false, tag + ": threw " + e.what());
        continue;
      }
      ++total;
      const std::size_t d = sq.size();
      r.check(out.x_adv.count() == batch.count() && out.x_adv.pixels.size() == batch.pixels.size() &&
                  out.x_adv.labels == batch.labels && out.success_mask.size() == batch.count(),
              tag + ": output shape");
      if (out.x_adv.pixels.size() != batch.pixels.size()) continue;
      bool in_box = true;
      for (float p : out.x_adv.pixels) in_box = in_box && p >= 0.0f && p <= 1.0f;
      r.check(in_box, tag + ": pixels outside [0,1]");

      for (std::size_t i = 0; i < batch.count(); ++i) {
        double linf = 0.0, l2 = 0.0;
        std::set<std::size_t> positions;
        for (std::size_t j = 0; j < d; ++j) {
          const double diff = static_cast<double>(out.x_adv.pixels[i * d + j]) - batch.pixels[i * d + j];
          linf = std::max(linf, std::abs(diff));
          l2 += diff * diff;
          if (diff != 0.0) positions.insert(j % (sq.height * sq.width));
        }
        l2 = std::sqrt(l2);
        if (spec.norm == Norm::kLinf) {
          r.check(linf <= spec.epsilon + opts.budget_tolerance, tag + ": linf " + num(linf) + " > eps " + num(eps));
        } else if (spec.norm == Norm::kL2) {
          r.check(l2 <= spec.epsilon + opts.budget_tolerance, tag + ": l2 " + num(l2) + " > eps " + num(eps));
        } else {
          const auto pixels = static_cast<std::size_t>(spec.extra_number_or("pixels", 1));
          r.check(positions.size() <= pixels, tag + ": " + std::to_string(positions.size()) + " positions changed");
        }
      }
      if (zero) {
        r.check(std::memcmp(out.x_adv.pixels.data(), batch.pixels.data(), batch.pixels.size() * sizeof(float)) == 0,
                tag + ": eps=0 must return the input bitwise");
      }
      // Success mask, recomputed from the stored float images.
      const auto pred = argmax_rows(compute_logits(model.spec, model.params, to_tensor(out.x_adv)),
                                    static_cast<std::size_t>(classes));
      for (std::size_t i = 0; i < batch.count(); ++i) {
        r.check(out.success_mask[i] == (pred[i] != batch.labels[i]), tag + ": success_mask disagrees");
      }
      if (info.knowledge == Knowledge::kBlackBox) {
        r.check(counted.vjp_calls == 0, tag + ": black-box attack requested gradients");
      } else if (!zero && id != 1) {  // DeepFool may exit before its first step
        r.check(counted.vjp_calls > 0, tag + ": white-box attack never used gradients");
      }
      const auto again = run_attack(spec, base, batch, seed);
      r.check(again.x_adv.pixels == out.x_adv.pixels, tag + ": not deterministic under a fixed seed");
    }
  }

  // Closed-form directions on a logistic model.
  for (int k = 0; k < opts.instances_per_attack; ++k) {
    Gen g(opts.seed * 7919ULL + static_cast<std::uint64_t>(k));
    const ImageShape s{1, 3, 3};
    std::vector<double> w(s.size());
    for (auto& v : w) v = (g.coin() ? 1.0 : -1.0) * g.uniform(0.05, 2.0);
    const LogisticClassifier clf(s, w, g.uniform(-1.0, 1.0));
    LabeledImages x;
    x.shape = s;
    for (std::size_t j = 0; j < s.size(); ++j) x.pixels.push_back(static_cast<float>(g.uniform(0.2, 0.8)));
    x.labels.push_back(g.integer(0, 1));
    const double eps = g.uniform(0.01, 0.15);
    const auto x0 = to_tensor(x);
    const double sigma = 1.0 / (1.0 + std::exp(-clf.z(x0, 0)));
    const double c = sigma - x.labels[0];  // d CE / d z
    double wn = 0.0;
    for (double v : w) wn += v * v;
    wn = std::sqrt(wn);

    auto fg = default_attack_spec(13);
    fg.epsilon = eps;
    const auto o_fgsm = run_attack(fg, clf, x);
    auto pgd1 = default_attack_spec(18);
    pgd1.epsilon = eps;
    pgd1.step_size = eps;
    pgd1.iterations = 1;
    pgd1.extra["random_start"] = 0.0;
    const auto o_pgd1 = run_attack(pgd1, clf, x, 5);
    auto pgd = default_attack_spec(18);
    pgd.epsilon = eps;
    pgd.step_size = eps / 4.0;
    pgd.iterations = 10;
    pgd.extra["random_start"] = 0.0;
    const auto o_pgd = run_attack(pgd, clf, x, 5);
    auto l2 = default_attack_spec(19);
    l2.epsilon = 0.2;
    l2.step_size = 0.05;
    l2.iterations = 1;
    const auto o_l2 = run_attack(l2, clf, x, 5);
    for (std::size_t j = 0; j < s.size(); ++j) {
      const double sgn = c * w[j] > 0 ? 1.0 : -1.0;
      const double expect_sign = x0.data[j] + eps * sgn;
      const std::string tag = "logistic #" + std::to_string(k) + " coord " + std::to_string(j);
      r.check(near(o_fgsm.x_adv.pixels[j], expect_sign, opts.closed_form_tolerance), tag + ": FGSM direction");
      r.check(near(o_pgd1.x_adv.pixels[j], expect_sign, opts.closed_form_tolerance), tag + ": PGD(1) direction");
      r.check(near(o_pgd.x_adv.pixels[j], expect_sign, opts.closed_form_tolerance), tag + ": PGD(10) endpoint");
      const double expect_l2 = x0.data[j] + 0.05 * (c > 0 ? 1.0 : -1.0) * w[j] / wn;
      r.check(near(o_l2.x_adv.pixels[j], expect_l2, opts.closed_form_tolerance), tag + ": PGD-L2 direction");
    }
  }
  r.seconds = since(t0);
  r.summary = std::to_string(total) + " attack instances, " + std::to_string(opts.instances_per_attack) +
              " logistic closed-form cases";
  return r;
}

// ------------------------------------------------------------------ gradients

namespace {

double rel_error(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), 1e-12});
}

double input_loss(const ModelSpec& spec, std::span<const double> params, const Tensor<double>& x,
                  const std::vector<int>& y) {
  const auto z = compute_logits(spec, params, x);
  return softmax_cross_entropy(z, y, static_cast<std::size_t>(spec.num_classes), nullptr);
}

}  // namespace

CriterionResult gradient_check_suite(double max_rel, std::uint64_t seed) {
  const auto t0 = Clock::now();
  CriterionResult r;
  constexpr double h = 1e-5;
  const ImageShape shape{1, 8, 8};
  double worst = 0.0;
  int checks = 0;
  for (auto arch : {Architecture::kSmallCnn, Architecture::kAlexnetLike, Architecture::kResnet18Like}) {
    for (int rep = 0; rep < 3; ++rep) {
      Gen g(seed + static_cast<std::uint64_t>(rep) * 31 + static_cast<std::uint64_t>(arch));
      ModelSpec spec;
      spec.architecture = arch;
      spec.input_shape = shape;
      spec.num_classes = 3;
      spec.width = 1;
      auto model = build_model(spec, g.rng()());
      for (auto& p : model.params) p += g.normal(0.05);
      const auto batch = g.images(shape, 4, 3);
      const std::string tag = to_string(arch) + " #" + std::to_string(rep);
      const bool full = model.num_parameters() <= 500;

      // Parameter gradient. Models above 500 parameters are checked on a
      // random sample of coordinates.
      const auto analytic = loss_and_grad(spec, model.params, batch).grad;
      std::vector<std::size_t> coords;
      if (full) {
        for (std::size_t i = 0; i < model.num_parameters(); ++i) coords.push_back(i);
      } else {
        for (int i = 0; i < 150; ++i) {
          coords.push_back(static_cast<std::size_t>(g.integer(0, static_cast<int>(model.num_parameters()) - 1)));
        }
      }
      std::vector<double> a, fd;
      for (auto i : coords) {
        auto p = model.params;
        p[i] += h;
        const double up = loss_value(spec, p, batch);
        p[i] -= 2 * h;
        const double down = loss_value(spec, p, batch);
        a.push_back(analytic[i]);
        fd.push_back((up - down) / (2 * h));
      }
      const double e1 = rel_error(a, fd);
      worst = std::max(worst, e1);
      ++checks;
      r.check(e1 <= max_rel, tag + ": parameter gradient rel error " + num(e1));

      // Input gradient.
      const auto x = to_tensor(batch);
      const auto gi = input_grad(model, x, batch.labels);
      std::vector<double> fdx(x.size());
      for (std::size_t i = 0; i < x.size(); ++i) {
        auto xp = x;
        xp.data[i] += h;
        const double up = input_loss(spec, model.params, xp, batch.labels);
        xp.data[i] -= 2 * h;
        const double down = input_loss(spec, model.params, xp, batch.labels);
        fdx[i] = (up - down) / (2 * h);
      }
      const double e2 = rel_error(gi.data, fdx);
      worst = std::max(worst, e2);
      ++checks;
      r.check(e2 <= max_rel, tag + ": input gradient rel error " + num(e2));

      // Hessian-vector product against differenced gradients.
      if (full) {
        std::vector<double> v(model.num_parameters());
        for (auto& e : v) e = g.normal();
        const auto hv = hessian_vector_product(spec, model.params, batch, v);
        auto pp = model.params, pm = model.params;
        for (std::size_t i = 0; i < v.size(); ++i) {
          pp[i] += h * v[i];
          pm[i] -= h * v[i];
        }
        const auto gp = loss_and_grad(spec, pp, batch).grad, gm = loss_and_grad(spec, pm, batch).grad;
        std::vector<double> fdh(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) fdh[i] = (gp[i] - gm[i]) / (2 * h);
        const double e3 = rel_error(hv, fdh);
        worst = std::max(worst, e3);
        ++checks;
        r.check(e3 <= max_rel, tag + ": Hessian-vector rel error " + num(e3));
      }
    }
  }
  r.seconds = since(t0);
  r.summary = std::to_string(checks) + " gradient checks, worst relative error " + num(worst);
  return r;
}

// ------------------------------------------------------------------ meta-epoch equivalence

namespace {

ExampleSet example_set(Gen& g, std::size_t count) {
  ExampleSet s;
  s.images = g.images({1, 2, 2}, count, 3);
  s.origin.assign(count, 13);
  for (std::size_t i = 0; i < count; ++i) s.source_index.push_back(static_cast<std::int64_t>(i));
  return s;
}

}  // namespace

CriterionResult meta_epoch_suite(double brute_tol, double quad_tol) {
  const auto t0 = Clock::now();
  CriterionResult r;
  const SoftmaxRegression obj(4, 3);  // 15 parameters
  double worst = 0.0;
  for (int trial = 0; trial < 8; ++trial) {
    Gen g(500 + static_cast<std::uint64_t>(trial));
    std::vector<Episode> episodes(3);
    for (auto& e : episodes) {
      e.support = example_set(g, 6);
      e.query = example_set(g, 4);
    }
    std::vector<double> theta(obj.num_parameters());
    for (auto& v : theta) v = g.normal(0.5);
    MetaParams p;
    p.episodes_per_epoch = 3;
    p.beta = g.uniform(0.01, 0.5);
    p.lambda_ = g.uniform(0.01, 1.0);
    p.inner_steps = 1 + trial % 3;
    p.second_order = trial % 2 == 1;
    const auto res = meta_epoch(obj, theta, p, 0, [&](int, int j) { return episodes[static_cast<std::size_t>(j)]; });
    const auto ref = brute_force_meta_epoch(obj, theta, episodes, p.beta, p.lambda_, p.inner_steps, p.second_order);
    double err = 0.0;
    for (std::size_t i = 0; i < ref.size(); ++i) err = std::max(err, std::abs(res.theta[i] - ref[i]));
    worst = std::max(worst, err);
    r.check(err <= brute_tol, "trial " + std::to_string(trial) + " (steps " + std::to_string(p.inner_steps) +
                                  (p.second_order ? ", second order" : ", first order") + "): max diff " + num(err));
  }

  // L = theta^2 / 2 for both S and Q.
  const Quadratic quad(1.0, {0.0});
  LabeledImages dummy;
  dummy.shape = {1, 1, 1};
  dummy.push_back(std::vector<float>{0.0f}, 0);
  const std::vector<double> theta{1.0};
  const auto tp = inner_update(quad, theta, dummy, 0.01, 1);
  r.check(near(tp[0], 0.99, quad_tol), "theta' = " + num(tp[0]) + ", expected 0.99");
  const auto tp2 = inner_update(quad, theta, dummy, 0.1, 1);
  const auto g2 = query_gradient(quad, tp2, dummy, true, theta, dummy, 0.1, 1);
  r.check(near(g2[0], 0.81, quad_tol), "second-order g = " + num(g2[0]) + ", expected 0.81");
  const auto g1 = query_gradient(quad, tp2, dummy, false, theta, dummy, 0.1, 1);
  r.check(near(g1[0], 0.9, quad_tol), "first-order g = " + num(g1[0]) + ", expected 0.9");

  r.seconds = since(t0);
  r.summary = "8 scripted epochs, worst diff " + num(worst) + "; quadratic theta'=" + num(tp[0]) + " g=" + num(g2[0]);
  return r;
}

// ------------------------------------------------------------------ early stopping

CriterionResult early_stopping_suite(int sequences, std::uint64_t seed) {
  const auto t0 = Clock::now();
  CriterionResult r;
  Gen g(seed);
  for (int s = 0; s < sequences; ++s) {
    const int p = g.integer(1, 30);
    const int best = g.integer(0, 40);
    // Strictly decreasing up to the unique minimum, then values above it.
    std::vector<double> seq;
    double v = 10.0;
    for (int i = 0; i < best; ++i) seq.push_back(v -= g.uniform(0.01, 0.5));
    seq.push_back(v - g.uniform(0.01, 0.5));
    const double minimum = seq.back();
    for (int i = 0; i < p + g.integer(0, 10); ++i) seq.push_back(minimum + g.uniform(1e-6, 2.0));

    EarlyStopper st(p);
    int stopped_at = -1;
    for (std::size_t i = 0; i < seq.size(); ++i) {
      if (st.observe(seq[i])) {
        stopped_at = static_cast<int>(i) + 1;
        break;
      }
    }
    const std::string tag = "sequence " + std::to_string(s) + " (p=" + std::to_string(p) + ")";
    r.check(stopped_at == best + p + 1, tag + ": stopped at check " + std::to_string(stopped_at) + ", expected " +
                                            std::to_string(best + p + 1));
    r.check(st.best_index() == best, tag + ": best_index " + std::to_string(st.best_index()));
    r.check(stopped_at == reference_stop_check(seq, p), tag + ": disagrees with the reference controller");

    // Arbitrary sequences (ties, early plateaus) against the reference.
    std::vector<double> noisy(static_cast<std::size_t>(g.integer(1, 60)));
    for (auto& x : noisy) x = std::round(g.uniform(0.0, 5.0));
    EarlyStopper st2(p);
    int at2 = -1;
    for (std::size_t i = 0; i < noisy.size(); ++i) {
      if (st2.observe(noisy[i])) {
        at2 = static_cast<int>(i) + 1;
        break;
      }
    }
    r.check(at2 == reference_stop_check(noisy, p), tag + ": random sequence disagrees with the reference");
  }

  EarlyStopper tie(10);
  for (double x : {5.0, 4.0, 6.0, 4.0}) tie.observe(x);
  r.check(tie.best_index() == 1, "tie must keep the earliest minimum, got " + std::to_string(tie.best_index()));
  EarlyStopper ex(2);
  int at = -1;
  const double ex_seq[] = {1.0, 0.9, 0.95, 0.96, 0.97};
  for (int i = 0; i < 5 && at < 0; ++i) {
    if (ex.observe(ex_seq[i])) at = i + 1;
  }
  r.check(at == 4 && ex.best_index() == 1 && ex.best_loss() == 0.9, "patience 2 example must stop at check 4");

  r.seconds = since(t0);
  r.summary = std::to_string(sequences) + " sequences";
  return r;
}

// ------------------------------------------------------------------ smoke pipeline

namespace {

int cli(const std::vector<std::string>& args, std::string* log) {
  std::ostringstream out, err;
  const int code = cli::run_cli(args, out, err, {});
  if (log) {
    *log += "$ mad";
    for (const auto& a : args) *log += " " + a;
    *log += "\n" + out.str() + err.str();
  }
  return code;
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  return nlohmann::json::parse(in);
}

}  // namespace

SmokeRun run_smoke_pipeline(const fs::path& workspace, std::string* log) {
  const auto t0 = Clock::now();
  const auto src = source_dir();
  const auto data = src / "data" / "mnist_subset";
  fs::remove_all(workspace);
  fs::create_directories(workspace);
  SmokeRun run;
  run.workspace = workspace;
  run.clean_checkpoint = workspace / "clean" / "model.ckpt";
  run.mad_dir = workspace / "mad";
  run.meta_dir = workspace / "meta";
  run.eval_dir = workspace / "eval";
  const std::vector<std::string> common = {
      "--config",    (src / "configs" / "smoke.json").string(),
      "--workspace", workspace.string(),
      "--set",       "data.train_images=" + (data / "train-images.idx3-ubyte").string(),
      "--set",       "data.train_labels=" + (data / "train-labels.idx1-ubyte").string(),
      "--set",       "data.test_images=" + (data / "test-images.idx3-ubyte").string(),
      "--set",       "data.test_labels=" + (data / "test-labels.idx1-ubyte").string()};
  auto with = [&](std::vector<std::string> head, const std::vector<std::string>& tail) {
    head.insert(head.end(), common.begin(), common.end());
    head.insert(head.end(), tail.begin(), tail.end());
    return head;
  };
  auto must = [&](const std::vector<std::string>& args) {
    const int code = cli(args, log);
    if (code != 0) throw std::runtime_error("mad " + args.front() + " exited with " + std::to_string(code));
  };
  must(with({"train-clean"}, {"--out", (workspace / "clean").string()}));
  must(with({"gen-mad"}, {"--checkpoint", run.clean_checkpoint.string(), "--suite",
                          (src / "suites" / "smoke_suite.json").string(), "--out", run.mad_dir.string()}));
  must(with({"meta-train"}, {"--checkpoint", run.clean_checkpoint.string(), "--mad", run.mad_dir.string(), "--out",
                             run.meta_dir.string()}));
  must(with({"evaluate"}, {"--checkpoint", (run.meta_dir / "best_val.ckpt").string(), "--reference",
                           run.clean_checkpoint.string(), "--mad", run.mad_dir.string(), "--out",
                           run.eval_dir.string()}));
  run.seconds = since(t0);

  const auto eval = read_json(run.eval_dir / "evaluation.json");
  run.cca = read_json(workspace / "clean" / "metrics.json").at("cca").get<double>();
  run.defended_cca = eval.at("ccadefended").get<double>();
  for (const auto& a : eval.at("attacks")) {
    if (a.at("attack_id").get<int>() == SmokeThresholds{}.held_out_attack) {
      run.ca_before = a.at("ca_before").get<double>();
      run.ca_after = a.at("ca_after").get<double>();
    }
  }
  const auto ds = load_mad(run.mad_dir);
  const auto ref = load_checkpoint(run.clean_checkpoint);
  for (int id : ds.retained_attack_ids()) run.store_ca.emplace_back(id, evaluate_accuracy(ref, ds.attack_examples(id)));
  return run;
}

CriterionResult judge_smoke(const SmokeRun& run, const SmokeThresholds& t) {
  CriterionResult r;
  r.seconds = run.seconds;
  r.check(run.cca >= t.min_cca, "clean test accuracy " + num(run.cca) + "% < " + num(t.min_cca) + "%");
  r.check(run.store_ca.size() == 5, std::to_string(run.store_ca.size()) + " attack stores retained, expected 5");
  for (const auto& [id, ca] : run.store_ca) {
    r.check(ca == 0.0, "attack " + std::to_string(id) + " store has clean-model CA " + num(ca) + "%");
  }
  const double gain = run.ca_after - run.ca_before;
  r.check(gain >= t.min_gain, "held-out gain " + num(gain) + " points < " + num(t.min_gain));
  const double drop = std::abs(run.cca - run.defended_cca);
  r.check(drop <= t.max_clean_drop, "defended clean accuracy differs by " + num(drop) + " points");
  r.check(run.seconds <= t.max_seconds, "pipeline took " + num(run.seconds) + " s");
  std::ostringstream os;
  os.precision(4);
  os << "CCA " << run.cca << "%, BIM CA " << run.ca_before << "% -> " << run.ca_after << "% (+" << gain
     << "), defended CCA " << run.defended_cca << "%, " << static_cast<int>(run.seconds) << " s";
  r.summary = os.str();
  return r;
}

CriterionResult dataset_invariant_suite(const SmokeRun& run) {
  const auto t0 = Clock::now();
  CriterionResult r;
  const auto ds = load_mad(run.mad_dir);
  const auto ref = load_checkpoint(run.clean_checkpoint);
  try {
    check_dataset_invariants(ds, &ref);
  } catch (const IntegrityError& e) {
    r.check(false, std::string("check_dataset_invariants: ") + e.what());
  }
  // Independent restatement of each invariant.
  std::map<int, Role> group_role;
  for (const auto& [role, groups] : ds.roles.role_groups) {
    for (int gid : groups) {
      r.check(!group_role.count(gid), "group " + std::to_string(gid) + " serves two roles");
      group_role[gid] = role;
    }
  }
  for (const auto& a : ds.attacks) {
    if (a.removed) continue;
    const std::string tag = "attack " + std::to_string(a.attack_id());
    r.check(evaluate_accuracy(ref, ds.attack_examples(a.attack_id())) == 0.0, tag + ": nonzero clean-model CA");
    r.check(ds.role_of(a.attack_id()).has_value(), tag + ": no role");
    const auto n = a.classes.front().count();
    for (const auto& cell : a.classes) {
      r.check(cell.count() == n, tag + ": unbalanced classes");
      const auto c = cell.count();
      const auto tr = cell.split_counts[0], va = cell.split_counts[1], te = cell.split_counts[2];
      r.check(tr + va + te == c, tag + ": split counts do not add up");
      const double unit = static_cast<double>(c) / 5.0;
      r.check(std::abs(static_cast<double>(va) - unit) <= 1.0 && std::abs(static_cast<double>(te) - unit) <= 1.0 &&
                  std::abs(static_cast<double>(tr) - 3.0 * unit) <= 2.0,
              tag + ": split is not 3:1:1");
      std::set<std::int64_t> seen;
      for (auto s : cell.source_index) r.check(seen.insert(s).second, tag + ": source image in two splits");
    }
  }
  const auto copy = run.workspace / "mad_roundtrip";
  fs::remove_all(copy);
  save_mad(ds, copy);
  r.check(load_mad(copy) == ds, "reloaded dataset differs");
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(copy)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), copy);
    r.check(read_file(e.path()) == read_file(run.mad_dir / rel), rel.string() + " differs after round trip");
    ++files;
  }
  r.seconds = since(t0);
  r.summary = std::to_string(ds.retained_attack_ids().size()) + " stores, " + std::to_string(ds.total_examples()) +
              " examples, " + std::to_string(files) + " files round-tripped";
  return r;
}

CriterionResult determinism_suite(const SmokeRun& a, const SmokeRun& b) {
  const auto t0 = Clock::now();
  CriterionResult r;
  const std::pair<fs::path, fs::path> ckpts[] = {
      {a.clean_checkpoint, b.clean_checkpoint},
      {a.meta_dir / "best_val.ckpt", b.meta_dir / "best_val.ckpt"},
      {a.meta_dir / "last.ckpt", b.meta_dir / "last.ckpt"},
  };
  for (const auto& [x, y] : ckpts) {
    r.check(read_file(x) == read_file(y), x.filename().string() + " differs between runs");
  }
  r.check(cli::content_hash(a.mad_dir) == cli::content_hash(b.mad_dir), "datasets differ between runs");
  const auto ra = import_json(a.eval_dir / "report.json"), rb = import_json(b.eval_dir / "report.json");
  r.check(ra.records.size() == rb.records.size(), "record counts differ");
  for (std::size_t i = 0; i < std::min(ra.records.size(), rb.records.size()); ++i) {
    auto x = ra.records[i], y = rb.records[i];
    for (auto* rec : {&x, &y}) rec->ot_hours = rec->ot_end_to_end_hours = rec->edsr = 0.0;
    r.check(x == y, "defense record " + std::to_string(i) + " differs outside OT");
  }
  r.check(cli::content_hash(a.eval_dir / "evaluation.json") == cli::content_hash(b.eval_dir / "evaluation.json"),
          "evaluation details differ outside OT");
  r.seconds = since(t0);
  r.summary = "3 checkpoints, dataset and " + std::to_string(ra.records.size()) + " records compared";
  return r;
}

}  // namespace mad::testing
