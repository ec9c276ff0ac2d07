#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mad/adversarial_training.hpp"
#include "mad/dataset.hpp"
#include "mad/meta_params.hpp"
#include "mad/model.hpp"

namespace mad::cli {

/// Built-in defaults for every section.
nlohmann::json default_config();

/// Parses a config file. Syntax errors become ConfigError with line and column.
nlohmann::json read_config_file(const std::string& path);

/// Applies MAD_<SECTION>_<KEY> variables from `env` (name -> value). Values are
/// parsed as JSON when possible, otherwise taken as strings.
void apply_env(nlohmann::json& config, const std::map<std::string, std::string>& env);
std::map<std::string, std::string> process_env();

/// Applies one "section.key=value" override.
void apply_override(nlohmann::json& config, const std::string& assignment);

/// defaults < file < env < overrides. Unknown sections or keys in any layer are
/// rejected with a ConfigError naming the field.
nlohmann::json resolve_config(const std::optional<std::string>& file, const std::map<std::string, std::string>& env,
                              const std::vector<std::string>& overrides);

// Typed views. Each raises ConfigError naming the offending field.
ModelSpec model_spec(const nlohmann::json& config);
std::uint64_t model_seed(const nlohmann::json& config);
TrainConfig train_config(const nlohmann::json& config);
MetaParams meta_params(const nlohmann::json& config);
std::uint64_t meta_seed(const nlohmann::json& config);
ATConfig at_config(const nlohmann::json& config);

struct MadSettings {
  std::string name;
  std::size_t batch = 256;
  std::uint64_t seed = 0;
  std::size_t min_per_class = 5;
  std::size_t jobs = 1;
  std::size_t limit = 0;  // use only the first `limit` clean test images (0 = all)
  std::optional<std::map<int, int>> grouping;
  std::optional<SplitAssignment> roles;
};
MadSettings mad_settings(const nlohmann::json& config);

struct EvaluateSettings {
  int tasks = 10;
  std::uint64_t seed = 0;
  bool finetune = true;
  std::string method = "meta_at";
};
EvaluateSettings evaluate_settings(const nlohmann::json& config);

/// Typed access with the field path in error messages.
template <class T>
T get_field(const nlohmann::json& config, const std::string& section, const std::string& key);

}  // namespace mad::cli
