#include "registry.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>
#include <fstream>
#include <sstream>
#include <vector>

#include "mad/errors.hpp"
#include "mad/io.hpp"

namespace fs = std::filesystem;

namespace mad::cli {

bool is_volatile_key(const std::string& key) {
  return key.rfind("ot_", 0) == 0 || key == "ot" || key.find("_ot_") != std::string::npos || key == "edsr" ||
         key.find("elapsed") != std::string::npos || key.find("timestamp") != std::string::npos ||
         key == "started_at" || key == "finished_at";
}

nlohmann::json strip_volatile(const nlohmann::json& j) {
  if (j.is_object()) {
    nlohmann::json out = nlohmann::json::object();
    for (const auto& [k, v] : j.items()) {
      if (!is_volatile_key(k)) out[k] = strip_volatile(v);
    }
    return out;
  }
  if (j.is_array()) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& v : j) out.push_back(strip_volatile(v));
    return out;
  }
  return j;
}

namespace {

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, sep)) out.push_back(cell);
  return out;
}

std::string normalized_csv(const std::string& text) {
  std::stringstream in(text);
  std::string line;
  std::vector<bool> keep;
  std::string out;
  bool header = true;
  while (std::getline(in, line)) {
    const auto cells = split(line, ',');
    if (header) {
      for (const auto& c : cells) keep.push_back(!is_volatile_key(c));
      header = false;
    }
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i >= keep.size() || keep[i]) out += cells[i] + ",";
    }
    out += "\n";
  }
  return out;
}

std::string file_digest(const fs::path& p) {
  const auto ext = p.extension().string();
  if (ext == ".json") {
    try {
      return sha256_hex(strip_volatile(nlohmann::json::parse(read_text(p))).dump());
    } catch (const nlohmann::json::parse_error&) {
      return sha256_file(p);
    }
  }
  if (ext == ".jsonl") {
    std::stringstream in(read_text(p));
    std::string line, acc;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      acc += strip_volatile(nlohmann::json::parse(line)).dump() + "\n";
    }
    return sha256_hex(acc);
  }
  if (ext == ".csv") return sha256_hex(normalized_csv(read_text(p)));
  return sha256_file(p);
}

}  // namespace

std::string content_hash(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("content_hash: " + path.string() + " does not exist");
  if (!fs::is_directory(path)) return file_digest(path);
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(path)) {
    if (e.is_regular_file() && e.path().extension() != ".png") files.push_back(fs::relative(e.path(), path));
  }
  std::sort(files.begin(), files.end());
  std::string acc;
  for (const auto& f : files) acc += f.generic_string() + " " + file_digest(path / f) + "\n";
  return sha256_hex(acc);
}

bool RunRegistry::exists(const std::string& run_id) const { return fs::exists(run_dir(run_id) / "manifest.json"); }

std::optional<nlohmann::json> RunRegistry::load(const std::string& run_id) const {
  const auto p = run_dir(run_id) / "manifest.json";
  if (!fs::exists(p)) return std::nullopt;
  try {
    return nlohmann::json::parse(read_text(p));
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError("run manifest " + p.string() + " is not valid JSON: " + e.what());
  }
}

std::string RunRegistry::allocate_id(const std::string& command, const nlohmann::json& config) const {
  const std::string base = command + "-" + sha256_hex(config.dump()).substr(0, 8);
  std::string id = base;
  for (int n = 2; fs::exists(run_dir(id)); ++n) id = base + "-" + std::to_string(n);
  return id;
}

void RunRegistry::save(const nlohmann::json& manifest) const {
  const auto id = manifest.at("run_id").get<std::string>();
  const auto dir = run_dir(id);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  const auto tmp = dir / "manifest.json.tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << manifest.dump(2) << "\n";
  }
  fs::rename(tmp, dir / "manifest.json", ec);
  if (ec) throw IoError("cannot write run manifest: " + ec.message());
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace mad::cli
