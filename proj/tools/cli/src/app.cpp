#include "app.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "config.hpp"
#include "mad/adversarial_training.hpp"
#include "mad/attacks.hpp"
#include "mad/checkpoint.hpp"
#include "mad/dataset.hpp"
#include "mad/errors.hpp"
#include "mad/io.hpp"
#include "mad/meta.hpp"
#include "mad/metrics.hpp"
#include "mad/model.hpp"
#include "registry.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace mad::cli {
namespace {

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfig:
    case ErrorKind::kNotImplemented:
      return kExitConfig;
    case ErrorKind::kData:
    case ErrorKind::kSampling:
      return kExitData;
    case ErrorKind::kNumeric:
    case ErrorKind::kUndefinedMetric:
      return kExitNumeric;
    case ErrorKind::kIo:
      return kExitIo;
    case ErrorKind::kIntegrity:
      return kExitIntegrity;
    case ErrorKind::kGeneration:
      return kExitGeneration;
  }
  return kExitOther;
}

struct Common {
  std::optional<std::string> config_file;
  std::vector<std::string> sets;
  std::string workspace;
  std::string run_id;
};

// One registry entry: created on start, rewritten on completion or failure.
class Run {
 public:
  Run(const std::string& command, const json& config, const std::string& requested_id, bool reuse = false)
      : registry_(config.at("workspace").get<std::string>()) {
    if (!requested_id.empty() && !reuse && registry_.exists(requested_id)) {
      throw ConfigError("run id '" + requested_id + "' already exists in " + registry_.root().string());
    }
    const std::string id = requested_id.empty() ? registry_.allocate_id(command, config) : requested_id;
    manifest_ = {{"run_id", id},
                 {"command", command},
                 {"config", config},
                 {"inputs", json::object()},
                 {"outputs", json::object()},
                 {"started_at", utc_timestamp()},
                 {"status", "running"}};
  }

  std::string id() const { return manifest_.at("run_id").get<std::string>(); }
  fs::path default_out() const { return registry_.run_dir(id()) / "out"; }
  const RunRegistry& registry() const { return registry_; }

  void input(const std::string& name, const fs::path& path, const std::string& artifact_id) {
    manifest_["inputs"][name] = {{"path", fs::absolute(path).string()}, {"id", artifact_id}};
  }
  void output(const std::string& name, const fs::path& path) {
    manifest_["outputs"][name] = {{"path", fs::absolute(path).string()}};
  }
  void begin() { registry_.save(manifest_); }

  void finish() {
    std::string acc;
    for (auto& [name, o] : manifest_["outputs"].items()) {
      o["content_hash"] = content_hash(o.at("path").get<std::string>());
      acc += name + " " + o["content_hash"].get<std::string>() + "\n";
    }
    manifest_["content_hash"] = sha256_hex(acc);
    manifest_["finished_at"] = utc_timestamp();
    manifest_["status"] = "completed";
    registry_.save(manifest_);
  }

  void fail(const std::string& what) {
    manifest_["finished_at"] = utc_timestamp();
    manifest_["status"] = "failed";
    manifest_["error"] = what;
    try {
      registry_.save(manifest_);
    } catch (const std::exception&) {
      // The original error is the one worth reporting.
    }
  }

 private:
  RunRegistry registry_;
  json manifest_;
};

json load_resolved(const Common& c, const std::map<std::string, std::string>& env) {
  auto config = resolve_config(c.config_file, env, c.sets);
  if (!c.workspace.empty()) config["workspace"] = c.workspace;
  if (!config.at("workspace").is_string()) throw ConfigError("field 'workspace': expected a path string");
  return config;
}

std::optional<LabeledImages> load_data(const json& config, const std::string& which) {
  const auto images = get_field<std::string>(config, "data", which + "_images");
  const auto labels = get_field<std::string>(config, "data", which + "_labels");
  if (images.empty() && labels.empty()) return std::nullopt;
  if (images.empty() || labels.empty()) {
    throw ConfigError("data." + which + "_images and data." + which + "_labels must be set together");
  }
  return load_idx(images, labels);
}

LabeledImages require_data(const json& config, const std::string& which) {
  auto d = load_data(config, which);
  if (!d) throw ConfigError("data." + which + "_images / data." + which + "_labels are required by this command");
  return std::move(*d);
}

std::string fmt(double v, int prec = 2) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

void write_json(const fs::path& p, const json& j) {
  const auto text = j.dump(2) + "\n";
  write_file(p, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw IoError("cannot create " + p.string() + ": " + ec.message());
}

std::string role_tag(const MadDataset& ds, int attack_id) {
  const auto r = ds.role_of(attack_id);
  if (!r) return "new";
  switch (*r) {
    case Role::kMetaTrain:
    case Role::kMetaVal:
    case Role::kTestLearned:
      return "learned";
    default:
      return "new";
  }
}

// ------------------------------------------------------------------ commands

int cmd_train_clean(const json& config, const std::string& run_id, const std::string& out_flag, std::ostream& out) {
  const auto spec = model_spec(config);
  const auto tc = train_config(config);
  Run run("train-clean", config, run_id);
  const auto train = require_data(config, "train");
  const auto test = load_data(config, "test");
  const fs::path dir = out_flag.empty() ? run.default_out() : fs::path(out_flag);
  ensure_dir(dir);
  run.input("train_images", get_field<std::string>(config, "data", "train_images"),
            sha256_file(get_field<std::string>(config, "data", "train_images")));
  run.output("checkpoint", dir / "model.ckpt");
  run.output("metrics", dir / "metrics.json");
  run.begin();
  try {
    auto model = train_clean(build_model(spec, model_seed(config)), train, tc);
    save_checkpoint(model, dir / "model.ckpt");
    json metrics = {{"checkpoint_id", model_fingerprint(model)},
                    {"train_accuracy", evaluate_accuracy(model, train)},
                    {"epoch_loss", model.training_meta.at("epoch_loss")}};
    out << "train accuracy: " << fmt(metrics["train_accuracy"].get<double>()) << "%\n";
    if (test) {
      metrics["cca"] = evaluate_accuracy(model, *test);
      out << "clean test accuracy: " << fmt(metrics["cca"].get<double>()) << "%\n";
    }
    write_json(dir / "metrics.json", metrics);
    run.finish();
    out << "checkpoint: " << (dir / "model.ckpt").string() << "\nrun: " << run.id() << "\n";
  } catch (const std::exception& e) {
    run.fail(e.what());
    throw;
  }
  return kExitOk;
}

void print_success_table(const MadDataset& generated, const MadDataset& final_ds, std::ostream& out) {
  out << std::left << std::setw(5) << "id" << std::setw(12) << "attack" << std::setw(6) << "norm";
  for (int c = 0; c < generated.num_classes; ++c) out << std::right << std::setw(6) << ("c" + std::to_string(c));
  out << std::right << std::setw(8) << "total" << "  status\n";
  for (const auto& a : generated.attacks) {
    std::size_t total = 0;
    out << std::left << std::setw(5) << a.attack_id() << std::setw(12) << a.spec.name << std::setw(6)
        << to_string(a.spec.norm);
    for (auto n : a.success_counts) {
      out << std::right << std::setw(6) << n;
      total += n;
    }
    const auto* f = final_ds.find(a.attack_id());
    out << std::right << std::setw(8) << total << "  ";
    if (f && f->removed) out << "removed (" << f->removed_reason << ")";
    else if (f) out << "kept " << f->classes.front().count() << "/class, group " << f->group;
    out << "\n";
  }
}

void write_success_csv(const MadDataset& generated, const MadDataset& final_ds, const fs::path& path) {
  std::ofstream csv(path);
  if (!csv) throw IoError("cannot write " + path.string());
  csv << "attack_id,name,norm";
  for (int c = 0; c < generated.num_classes; ++c) csv << ",class_" << c;
  csv << ",total,retained_per_class,removed\n";
  for (const auto& a : generated.attacks) {
    std::size_t total = 0;
    csv << a.attack_id() << "," << a.spec.name << "," << to_string(a.spec.norm);
    for (auto n : a.success_counts) {
      csv << "," << n;
      total += n;
    }
    const auto* f = final_ds.find(a.attack_id());
    const bool removed = !f || f->removed;
    csv << "," << total << "," << (removed ? 0 : f->classes.front().count()) << "," << (removed ? 1 : 0) << "\n";
  }
}

int cmd_gen_mad(const json& config, const std::string& run_id, const std::string& ckpt, const std::string& suite_path,
                const std::string& out_flag, std::ostream& out, std::ostream& err) {
  const auto settings = mad_settings(config);
  const auto suite = load_suite(suite_path);
  Run run("gen-mad", config, run_id);
  const auto reference = load_checkpoint(ckpt);
  auto test = require_data(config, "test");
  if (settings.limit > 0 && settings.limit < test.count()) test = test.slice(0, settings.limit);
  const fs::path dir = out_flag.empty() ? run.default_out() : fs::path(out_flag);
  run.input("checkpoint", ckpt, model_fingerprint(reference));
  run.input("suite", suite_path, sha256_file(suite_path));
  run.output("dataset", dir);
  run.begin();
  try {
    GenerateOptions opts;
    opts.name = settings.name;
    opts.batch = settings.batch;
    opts.seed = settings.seed;
    opts.jobs = settings.jobs;
    const auto generated = generate_mad(reference, test, suite, opts);
    for (const auto& w : generated.warnings) err << "warning: " << w << "\n";
    auto ds = filter_and_balance(generated, settings.min_per_class, settings.seed);
    ds = split_3_1_1(ds, settings.seed);
    const auto grouping = settings.grouping ? *settings.grouping : default_grouping(ds.retained_attack_ids());
    ds = assign_groups(ds, grouping, settings.roles ? *settings.roles : default_roles());
    check_dataset_invariants(ds, &reference);
    save_mad(ds, dir);
    print_success_table(generated, ds, out);
    write_success_csv(generated, ds, dir / "success_counts.csv");
    out << "examples: " << ds.total_examples() << "\ndataset: " << dir.string() << "\nrun: " << run.id() << "\n";
    run.finish();
  } catch (const std::exception& e) {
    run.fail(e.what());
    throw;
  }
  return kExitOk;
}

int cmd_validate_mad(const std::string& mad_dir, const std::string& ckpt, std::ostream& out) {
  const auto ds = load_mad(mad_dir);
  std::optional<ModelState> reference;
  if (!ckpt.empty()) {
    reference = load_checkpoint(ckpt);
    if (model_fingerprint(*reference) != ds.reference_checkpoint_id) {
      throw IntegrityError("checkpoint " + ckpt + " is not the dataset's reference model");
    }
  }
  check_dataset_invariants(ds, reference ? &*reference : nullptr);
  out << "ok: " << ds.name << ", " << ds.retained_attack_ids().size() << " attacks, " << ds.total_examples()
      << " examples\n";
  return kExitOk;
}

int cmd_meta_train(json config, std::string run_id, std::string ckpt, std::string mad_dir, std::string out_flag,
                   bool resume, std::ostream& out) {
  // An existing run id resumes that run with its recorded snapshot and paths.
  std::optional<json> previous;
  if (!run_id.empty()) {
    previous = RunRegistry(config.at("workspace").get<std::string>()).load(run_id);
  }
  if (previous) {
    if (previous->at("command") != "meta-train") {
      throw ConfigError("run " + run_id + " is a " + previous->at("command").get<std::string>() + " run");
    }
    config = previous->at("config");
    ckpt = previous->at("inputs").at("checkpoint").at("path").get<std::string>();
    mad_dir = previous->at("inputs").at("dataset").at("path").get<std::string>();
    out_flag = previous->at("outputs").at("model_dir").at("path").get<std::string>();
    resume = true;
  }
  const auto params = meta_params(config);
  const auto seed = meta_seed(config);
  Run run("meta-train", config, run_id, previous.has_value());
  if (ckpt.empty() || mad_dir.empty()) throw ConfigError("meta-train needs --checkpoint and --mad");
  const auto model = load_checkpoint(ckpt);
  const auto ds = load_mad(mad_dir);
  const fs::path dir = out_flag.empty() ? run.default_out() : fs::path(out_flag);
  ensure_dir(dir);
  run.input("checkpoint", ckpt, model_fingerprint(model));
  run.input("dataset", mad_dir, sha256_file(fs::path(mad_dir) / "manifest.json"));
  run.output("model_dir", dir);
  run.begin();
  try {
    MetaTrainOptions opts;
    opts.out_dir = dir;
    opts.resume = resume;
    opts.on_epoch = [&out](int epoch, double val) {
      out << "epoch " << epoch << " validation loss " << fmt(val, 6) << "\n";
    };
    const auto res = meta_train(model, ds, params, seed, opts);
    out << "best epoch: " << res.log.best_index << " (" << res.log.stop_reason << ")\n"
        << "best checkpoint: " << (dir / "best_val.ckpt").string() << "\nrun: " << run.id() << "\n";
    run.finish();
  } catch (const std::exception& e) {
    run.fail(e.what());
    throw;
  }
  return kExitOk;
}

int cmd_at_train(const json& config, const std::string& run_id, const std::string& ckpt, const std::string& mad_dir,
                 const std::string& out_flag, std::ostream& out) {
  const auto cfg = at_config(config);
  Run run("at-train", config, run_id);
  const auto model = load_checkpoint(ckpt);
  const auto ds = load_mad(mad_dir);
  const auto clean = load_data(config, "train");
  const fs::path dir = out_flag.empty() ? run.default_out() : fs::path(out_flag);
  ensure_dir(dir);
  run.input("checkpoint", ckpt, model_fingerprint(model));
  run.input("dataset", mad_dir, sha256_file(fs::path(mad_dir) / "manifest.json"));
  run.output("checkpoint", dir / "model.ckpt");
  run.begin();
  try {
    const auto t0 = std::chrono::steady_clock::now();
    const auto trained = at_train(model, ds, cfg, clean ? &*clean : nullptr);
    const double hours = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 3600.0;
    save_checkpoint(trained, dir / "model.ckpt");
    write_json(dir / "timing.json", {{"ot_hours", hours}});
    out << "training time: " << fmt(hours, 6) << " h\ncheckpoint: " << (dir / "model.ckpt").string()
        << "\nrun: " << run.id() << "\n";
    run.finish();
  } catch (const std::exception& e) {
    run.fail(e.what());
    throw;
  }
  return kExitOk;
}

struct EvaluateFlags {
  std::string checkpoint;
  std::string reference;
  std::string mad;
  std::string out;
  std::vector<int> attacks;
  double ot_hours = -1.0;
};

int cmd_evaluate(const json& config, const std::string& run_id, const EvaluateFlags& f, std::ostream& out) {
  const auto params = meta_params(config);
  const auto es = evaluate_settings(config);
  Run run("evaluate", config, run_id);
  const auto defended = load_checkpoint(f.checkpoint);
  const auto reference = load_checkpoint(f.reference);
  const auto ds = load_mad(f.mad);
  if (model_fingerprint(reference) != ds.reference_checkpoint_id) {
    throw ConfigError("--reference is not the model dataset " + ds.name + " was generated against");
  }
  const auto test = load_data(config, "test");
  const LabeledImages clean_test = test ? *test : ds.clean_examples(Split::kTest);

  std::vector<int> ids = f.attacks;
  if (ids.empty()) {
    for (auto r : {Role::kTestLearned, Role::kTestNew}) {
      const auto in_role = ds.attacks_in_role(r);
      ids.insert(ids.end(), in_role.begin(), in_role.end());
    }
  }
  if (ids.empty()) throw ConfigError("evaluate: the dataset has no test_learned or test_new attack; pass --attacks");
  for (int id : ids) {
    const auto* a = ds.find(id);
    if (!a || a->removed) throw ConfigError("evaluate: attack " + std::to_string(id) + " is not in the dataset");
  }

  const fs::path dir = f.out.empty() ? run.default_out() : fs::path(f.out);
  ensure_dir(dir);
  run.input("checkpoint", f.checkpoint, model_fingerprint(defended));
  run.input("reference", f.reference, model_fingerprint(reference));
  run.input("dataset", f.mad, sha256_file(fs::path(f.mad) / "manifest.json"));
  run.output("report", dir / "report.json");
  run.output("evaluation", dir / "evaluation.json");
  run.begin();
  try {
    const double cca = evaluate_accuracy(reference, clean_test);
    const double ccadefended = evaluate_accuracy(defended, clean_test);
    std::vector<DefenseRecord> records;
    json details = json::array();
    for (int id : ids) {
      const auto t0 = std::chrono::steady_clock::now();
      LabeledImages attacked;
      attacked.shape = ds.shape;
      json tasks = json::array();
      double adv_after = 0, ot = 0, all_before = 0, all_after = 0, clean_after = 0;
      for (int t = 0; t < es.tasks; ++t) {
        std::mt19937_64 rng(episode_seed(es.seed, id, t));
        const auto task = sample_eval_task(ds, id, params, rng);
        const auto qadv = task.query.adversarial();
        for (std::size_t i = 0; i < qadv.count(); ++i) attacked.push_back(qadv.image(i), qadv.labels[i]);
        FinetuneRecord rec;
        if (es.finetune) {
          rec = finetune_and_eval(defended, task, params).record;
        } else {
          rec.ca_before = rec.ca_after = evaluate_accuracy(defended, task.query.images);
          rec.ca_adv_before = rec.ca_adv_after = evaluate_accuracy(defended, qadv);
          const auto qc = task.query.clean();
          rec.ca_clean_before = rec.ca_clean_after = qc.empty() ? 0.0 : evaluate_accuracy(defended, qc);
        }
        adv_after += rec.ca_adv_after;
        all_before += rec.ca_before;
        all_after += rec.ca_after;
        clean_after += rec.ca_clean_after;
        ot += rec.ot_hours;
        tasks.push_back(to_json(rec));
      }
      const double n = es.tasks;
      const double ca_attacked = evaluate_accuracy(reference, attacked);
      const double ot_e2e =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 3600.0 / n;
      const double ot_hours = f.ot_hours >= 0.0 ? f.ot_hours : ot / n;
      const auto role = role_tag(ds, id);
      records.push_back(make_record(id, role, cca, ca_attacked, adv_after / n, ot_hours,
                                    f.ot_hours >= 0.0 ? f.ot_hours : ot_e2e));
      details.push_back({{"attack_id", id},
                         {"role", role},
                         {"ca_before", all_before / n},
                         {"ca_after", all_after / n},
                         {"ca_adv_after", adv_after / n},
                         {"ca_clean_after", clean_after / n},
                         {"ca_attacked", ca_attacked},
                         {"tasks", tasks}});
      out << "attack " << id << " (" << role << "): CA " << fmt(all_before / n) << "% -> " << fmt(all_after / n)
          << "%, attacked-only " << fmt(adv_after / n) << "%, DSR " << fmt(records.back().dsr, 4) << "\n";
    }
    const auto report = build_report(ds.name, es.method, records, ccadefended);
    export_json(report, dir / "report.json");
    write_json(dir / "evaluation.json", {{"dataset", ds.name},
                                         {"method", es.method},
                                         {"tasks_per_attack", es.tasks},
                                         {"cca", cca},
                                         {"ccadefended", ccadefended},
                                         {"attacks", details}});
    out << "CCA " << fmt(cca) << "%, defended CCA " << fmt(ccadefended) << "%\nreport: "
        << (dir / "report.json").string() << "\nrun: " << run.id() << "\n";
    run.finish();
  } catch (const std::exception& e) {
    run.fail(e.what());
    throw;
  }
  return kExitOk;
}

int cmd_report(const json& config, const std::string& run_id, const std::vector<std::string>& inputs,
               const std::string& out_flag, double max_ot, std::ostream& out) {
  Run run("report", config, run_id);
  std::vector<DefenseReport> reports;
  for (const auto& p : inputs) {
    reports.push_back(import_json(p));
    run.input("report_" + std::to_string(reports.size()), p, sha256_file(p));
  }
  const fs::path dir = out_flag.empty() ? run.default_out() : fs::path(out_flag);
  ensure_dir(dir);
  run.output("csv", dir / "report.csv");
  run.output("plot", dir / "edsr.png");
  run.begin();
  try {
    export_csv(reports, dir / "report.csv");
    plot_edsr_curves(reports, dir / "edsr.png", max_ot);
    out << std::left << std::setw(16) << "method" << std::setw(10) << "role" << std::right << std::setw(6) << "n"
        << std::setw(10) << "DSR" << std::setw(10) << "EDSR" << std::setw(12) << "OT(h)\n";
    for (const auto& r : reports) {
      for (const auto& [role, s] : r.by_role) {
        out << std::left << std::setw(16) << r.method << std::setw(10) << role << std::right << std::setw(6)
            << s.count << std::setw(10) << fmt(s.dsr, 4) << std::setw(10) << fmt(s.edsr, 4) << std::setw(12)
            << fmt(s.ot_hours, 6) << "\n";
      }
    }
    out << "csv: " << (dir / "report.csv").string() << "\nrun: " << run.id() << "\n";
    run.finish();
  } catch (const std::exception& e) {
    run.fail(e.what());
    throw;
  }
  return kExitOk;
}

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config_file, "JSON config file");
  sub->add_option("--set", c.sets, "Override one field, section.key=value (repeatable)");
  sub->add_option("--workspace", c.workspace, "Workspace holding runs/ (overrides config 'workspace')");
  sub->add_option("--run-id", c.run_id, "Run id in the registry (default: derived from command and config)");
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err,
            const std::map<std::string, std::string>& env) {
  CLI::App app{"Meta adversarial training toolkit", "mad"};
  app.require_subcommand(1);
  Common common;
  std::string ckpt, suite, mad_dir, out_dir, reference;
  std::vector<std::string> inputs;
  std::vector<int> attacks;
  bool resume = false;
  std::optional<std::size_t> jobs;
  double ot_hours = -1.0, max_ot = 1.0;

  auto* train = app.add_subcommand("train-clean", "Train the clean reference model");
  add_common(train, common);
  train->add_option("--out", out_dir, "Output directory (model.ckpt, metrics.json)");

  auto* gen = app.add_subcommand("gen-mad", "Generate, balance, split and group an attacked dataset");
  add_common(gen, common);
  gen->add_option("--checkpoint", ckpt, "Reference model")->required();
  gen->add_option("--suite", suite, "Attack suite JSON")->required();
  gen->add_option("--out", out_dir, "Dataset directory");
  gen->add_option("--jobs", jobs, "Concurrent attacks (default: available cores)");

  auto* val = app.add_subcommand("validate-mad", "Check a dataset directory against its invariants");
  val->add_option("--mad", mad_dir, "Dataset directory")->required();
  val->add_option("--checkpoint", ckpt, "Reference model, enables the zero-accuracy check");

  auto* meta = app.add_subcommand("meta-train", "Episodic meta adversarial training");
  add_common(meta, common);
  meta->add_option("--checkpoint", ckpt, "Initial model");
  meta->add_option("--mad", mad_dir, "Dataset directory");
  meta->add_option("--out", out_dir, "Output directory");
  meta->add_flag("--resume", resume, "Continue from trainer_state.json in the output directory");

  auto* at = app.add_subcommand("at-train", "Adversarial training baseline");
  add_common(at, common);
  at->add_option("--checkpoint", ckpt, "Initial model")->required();
  at->add_option("--mad", mad_dir, "Dataset directory")->required();
  at->add_option("--out", out_dir, "Output directory");

  auto* ev = app.add_subcommand("evaluate", "Few-shot evaluation on test-role attacks");
  add_common(ev, common);
  ev->add_option("--checkpoint", ckpt, "Defended model")->required();
  ev->add_option("--reference", reference, "Clean reference model of the dataset")->required();
  ev->add_option("--mad", mad_dir, "Dataset directory")->required();
  ev->add_option("--out", out_dir, "Output directory (report.json, evaluation.json)");
  ev->add_option("--attacks", attacks, "Attack ids (default: every test_learned and test_new attack)")
      ->delimiter(',');
  ev->add_option("--ot-hours", ot_hours, "Fixed OT for every record, e.g. a baseline's training time");

  auto* rep = app.add_subcommand("report", "Merge evaluation reports into CSV and an EDSR plot");
  add_common(rep, common);
  rep->add_option("--inputs", inputs, "report.json files")->required();
  rep->add_option("--out", out_dir, "Output directory");
  rep->add_option("--max-ot", max_ot, "Plot range in hours");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    for (auto* sub : app.get_subcommands()) out << sub->help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }

  try {
    if (val->parsed()) return cmd_validate_mad(mad_dir, ckpt, out);
    auto config = load_resolved(common, env);
    if (jobs) config["mad"]["jobs"] = *jobs;
    if (train->parsed()) return cmd_train_clean(config, common.run_id, out_dir, out);
    if (gen->parsed()) return cmd_gen_mad(config, common.run_id, ckpt, suite, out_dir, out, err);
    if (meta->parsed()) return cmd_meta_train(config, common.run_id, ckpt, mad_dir, out_dir, resume, out);
    if (at->parsed()) return cmd_at_train(config, common.run_id, ckpt, mad_dir, out_dir, out);
    if (ev->parsed()) {
      return cmd_evaluate(config, common.run_id, {ckpt, reference, mad_dir, out_dir, attacks, ot_hours}, out);
    }
    if (rep->parsed()) return cmd_report(config, common.run_id, inputs, out_dir, max_ot, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitOther;
  }
  return kExitOther;
}

}  // namespace mad::cli
