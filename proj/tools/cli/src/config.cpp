#include "config.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <thread>

#include "mad/errors.hpp"

extern char** environ;

namespace mad::cli {

nlohmann::json default_config() {
  return nlohmann::json::parse(R"({
    "workspace": ".",
    "data": {
      "train_images": "",
      "train_labels": "",
      "test_images": "",
      "test_labels": ""
    },
    "model": {
      "architecture": "small_cnn",
      "input_shape": [1, 28, 28],
      "num_classes": 10,
      "width": 0,
      "seed": 0
    },
    "train": {
      "epochs": 10,
      "batch_size": 32,
      "learning_rate": 0.05,
      "optimizer": "sgd",
      "momentum": 0.9,
      "seed": 0
    },
    "mad": {
      "name": "mad",
      "batch": 256,
      "seed": 0,
      "min_per_class": 5,
      "jobs": 0,
      "limit": 0,
      "grouping": null,
      "roles": null
    },
    "meta": {
      "beta": 0.01,
      "lambda": 0.001,
      "epochs": 50,
      "episodes_per_epoch": 100,
      "batch_size": 32,
      "patience": 25,
      "ways": 5,
      "query_ways": 1,
      "shot_k": 15,
      "query_m": 6,
      "test_shot_K": 1,
      "test_query_M": 15,
      "inner_steps": 1,
      "second_order": false,
      "finetune_lr": 0.0,
      "finetune_steps": 100,
      "val_tasks": 4,
      "seed": 0
    },
    "at": {
      "inner_attack": null,
      "mix_clean": true,
      "epochs": 10,
      "batch_size": 32,
      "learning_rate": 0.05,
      "optimizer": "sgd",
      "momentum": 0.9,
      "seed": 0,
      "pregenerated_ratio": 0.25,
      "train_groups": [1, 4]
    },
    "evaluate": {
      "tasks": 10,
      "seed": 0,
      "finetune": true,
      "method": "meta_at"
    }
  })");
}

namespace {

std::pair<std::size_t, std::size_t> line_col(const std::string& text, std::size_t byte) {
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i < byte && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return {line, col};
}

// Merges `layer` into `base`, rejecting unknown sections and keys.
void merge(nlohmann::json& base, const nlohmann::json& layer, const std::string& origin) {
  if (!layer.is_object()) throw ConfigError(origin + ": top level must be a JSON object");
  for (const auto& [section, value] : layer.items()) {
    if (!base.contains(section)) throw ConfigError(origin + ": unknown field '" + section + "'");
    if (base[section].is_object()) {
      if (!value.is_object()) throw ConfigError(origin + ": field '" + section + "' must be an object");
      for (const auto& [key, v] : value.items()) {
        if (!base[section].contains(key)) {
          throw ConfigError(origin + ": unknown field '" + section + "." + key + "'");
        }
        base[section][key] = v;
      }
    } else {
      base[section] = value;
    }
  }
}

nlohmann::json parse_scalar(const std::string& text) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error&) {
    return text;
  }
}

}  // namespace

nlohmann::json read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    const auto [line, col] = line_col(text, e.byte == 0 ? 0 : e.byte - 1);
    throw ConfigError(path + ":" + std::to_string(line) + ":" + std::to_string(col) + ": malformed JSON (" +
                      e.what() + ")");
  }
}

std::map<std::string, std::string> process_env() {
  std::map<std::string, std::string> env;
  for (char** e = environ; e && *e; ++e) {
    const std::string kv(*e);
    const auto eq = kv.find('=');
    if (eq != std::string::npos && kv.rfind("MAD_", 0) == 0) env[kv.substr(0, eq)] = kv.substr(eq + 1);
  }
  return env;
}

void apply_env(nlohmann::json& config, const std::map<std::string, std::string>& env) {
  for (const auto& [name, value] : env) {
    if (name.rfind("MAD_", 0) != 0) continue;
    std::string rest = name.substr(4);
    std::transform(rest.begin(), rest.end(), rest.begin(), [](unsigned char c) { return std::tolower(c); });
    const auto us = rest.find('_');
    const std::string section = rest.substr(0, us);
    if (!config.contains(section)) continue;  // not one of ours
    if (us == std::string::npos) {
      if (config[section].is_object()) throw ConfigError("environment " + name + ": section needs a key");
      config[section] = parse_scalar(value);
      continue;
    }
    // Keys are matched case-insensitively (test_shot_K comes in as TEST_SHOT_K).
    std::string key = rest.substr(us + 1);
    if (config[section].is_object()) {
      for (const auto& [k, v] : config[section].items()) {
        std::string lower = k;
        std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
        if (lower == key) key = k;
      }
    }
    if (!config[section].is_object() || !config[section].contains(key)) {
      throw ConfigError("environment " + name + ": unknown field '" + section + "." + key + "'");
    }
    config[section][key] = parse_scalar(value);
  }
}

void apply_override(nlohmann::json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' must look like section.key=value");
  const std::string path = assignment.substr(0, eq);
  const auto value = parse_scalar(assignment.substr(eq + 1));
  const auto dot = path.find('.');
  const std::string section = path.substr(0, dot);
  if (!config.contains(section)) throw ConfigError("override: unknown field '" + section + "'");
  if (dot == std::string::npos) {
    config[section] = value;
    return;
  }
  const std::string key = path.substr(dot + 1);
  if (!config[section].is_object() || !config[section].contains(key)) {
    throw ConfigError("override: unknown field '" + path + "'");
  }
  config[section][key] = value;
}

nlohmann::json resolve_config(const std::optional<std::string>& file, const std::map<std::string, std::string>& env,
                              const std::vector<std::string>& overrides) {
  auto config = default_config();
  if (file) merge(config, read_config_file(*file), *file);
  apply_env(config, env);
  for (const auto& o : overrides) apply_override(config, o);
  return config;
}

template <class T>
T get_field(const nlohmann::json& config, const std::string& section, const std::string& key) {
  try {
    return config.at(section).at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("field '" + section + "." + key + "': " + e.what());
  }
}

template int get_field<int>(const nlohmann::json&, const std::string&, const std::string&);
template double get_field<double>(const nlohmann::json&, const std::string&, const std::string&);
template bool get_field<bool>(const nlohmann::json&, const std::string&, const std::string&);
template std::string get_field<std::string>(const nlohmann::json&, const std::string&, const std::string&);
template std::uint64_t get_field<std::uint64_t>(const nlohmann::json&, const std::string&, const std::string&);

namespace {

Optimizer parse_optimizer(const std::string& s, const std::string& field) {
  if (s == "sgd") return Optimizer::kSgd;
  if (s == "sgd_momentum") return Optimizer::kSgdMomentum;
  throw ConfigError("field '" + field + "': unknown optimizer '" + s + "' (sgd, sgd_momentum)");
}

}  // namespace

ModelSpec model_spec(const nlohmann::json& c) {
  ModelSpec s;
  s.architecture = parse_architecture(get_field<std::string>(c, "model", "architecture"));
  const auto shape = get_field<std::vector<std::size_t>>(c, "model", "input_shape");
  if (shape.size() != 3) throw ConfigError("field 'model.input_shape': expected [channels, height, width]");
  s.input_shape = {shape[0], shape[1], shape[2]};
  s.num_classes = get_field<int>(c, "model", "num_classes");
  s.width = get_field<int>(c, "model", "width");
  s.validate();
  return s;
}

std::uint64_t model_seed(const nlohmann::json& c) { return get_field<std::uint64_t>(c, "model", "seed"); }

TrainConfig train_config(const nlohmann::json& c) {
  TrainConfig t;
  t.epochs = get_field<int>(c, "train", "epochs");
  t.batch_size = get_field<int>(c, "train", "batch_size");
  t.learning_rate = get_field<double>(c, "train", "learning_rate");
  t.optimizer = parse_optimizer(get_field<std::string>(c, "train", "optimizer"), "train.optimizer");
  t.momentum = get_field<double>(c, "train", "momentum");
  t.seed = get_field<std::uint64_t>(c, "train", "seed");
  t.validate();
  return t;
}

MetaParams meta_params(const nlohmann::json& c) {
  auto section = c.at("meta");
  section.erase("seed");
  auto p = meta_params_from_json(section);
  p.validate();
  return p;
}

std::uint64_t meta_seed(const nlohmann::json& c) { return get_field<std::uint64_t>(c, "meta", "seed"); }

ATConfig at_config(const nlohmann::json& c) {
  auto section = c.at("at");
  if (section.at("inner_attack").is_null()) section.erase("inner_attack");
  auto cfg = at_config_from_json(section);
  cfg.validate();
  return cfg;
}

MadSettings mad_settings(const nlohmann::json& c) {
  MadSettings s;
  s.name = get_field<std::string>(c, "mad", "name");
  s.batch = get_field<std::uint64_t>(c, "mad", "batch");
  s.seed = get_field<std::uint64_t>(c, "mad", "seed");
  s.min_per_class = get_field<std::uint64_t>(c, "mad", "min_per_class");
  s.jobs = get_field<std::uint64_t>(c, "mad", "jobs");
  if (s.jobs == 0) s.jobs = std::max(1u, std::thread::hardware_concurrency());
  s.limit = get_field<std::uint64_t>(c, "mad", "limit");
  const auto& g = c.at("mad").at("grouping");
  if (!g.is_null()) {
    if (!g.is_object()) throw ConfigError("field 'mad.grouping': expected an object of attack_id -> group");
    std::map<int, int> grouping;
    for (const auto& [k, v] : g.items()) {
      try {
        grouping[std::stoi(k)] = v.get<int>();
      } catch (const std::exception&) {
        throw ConfigError("field 'mad.grouping." + k + "': expected integer attack id -> integer group");
      }
    }
    s.grouping = grouping;
  }
  const auto& r = c.at("mad").at("roles");
  if (!r.is_null()) {
    if (!r.is_object()) throw ConfigError("field 'mad.roles': expected an object of role -> [groups]");
    SplitAssignment a;
    for (const auto& [k, v] : r.items()) {
      try {
        a.role_groups[parse_role(k)] = v.get<std::vector<int>>();
      } catch (const nlohmann::json::exception&) {
        throw ConfigError("field 'mad.roles." + k + "': expected a list of group numbers");
      }
    }
    s.roles = a;
  }
  return s;
}

EvaluateSettings evaluate_settings(const nlohmann::json& c) {
  EvaluateSettings s;
  s.tasks = get_field<int>(c, "evaluate", "tasks");
  if (s.tasks < 1) throw ConfigError("field 'evaluate.tasks': must be >= 1");
  s.seed = get_field<std::uint64_t>(c, "evaluate", "seed");
  s.finetune = get_field<bool>(c, "evaluate", "finetune");
  s.method = get_field<std::string>(c, "evaluate", "method");
  return s;
}

}  // namespace mad::cli
