#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

namespace mad::cli {

/// True for keys that carry wall-clock values (OT, elapsed time, timestamps)
/// and everything derived from them. These never enter content hashes.
bool is_volatile_key(const std::string& key);

/// Recursively drops volatile keys.
nlohmann::json strip_volatile(const nlohmann::json& j);

/// Hash of one file or a directory tree. JSON and JSONL are hashed after
/// strip_volatile, CSV without volatile columns, PNG files are skipped (the
/// plotted curves depend on OT), anything else by raw bytes. Directory entries
/// are visited in sorted relative-path order.
std::string content_hash(const std::filesystem::path& path);

class RunRegistry {
 public:
  explicit RunRegistry(std::filesystem::path workspace) : root_(std::move(workspace) / "runs") {}

  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path run_dir(const std::string& run_id) const { return root_ / run_id; }
  bool exists(const std::string& run_id) const;
  std::optional<nlohmann::json> load(const std::string& run_id) const;
  /// `<command>-<config digest prefix>`, suffixed -2, -3, ... until unused.
  std::string allocate_id(const std::string& command, const nlohmann::json& config) const;
  /// Atomic replace of runs/<run_id>/manifest.json.
  void save(const nlohmann::json& manifest) const;

 private:
  std::filesystem::path root_;
};

std::string utc_timestamp();

}  // namespace mad::cli
