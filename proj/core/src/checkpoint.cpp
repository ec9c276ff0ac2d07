#include "mad/checkpoint.hpp"

#include <cstring>

#include "mad/errors.hpp"
#include "mad/io.hpp"

namespace mad {

namespace {

constexpr char kMagic[8] = {'M', 'A', 'D', 'C', 'K', 'P', 'T', '\0'};

struct RawCheckpoint {
  nlohmann::json header;
  std::vector<std::uint8_t> bytes;
  std::size_t blob_start = 0;
};

RawCheckpoint read_raw(const std::filesystem::path& path) {
  RawCheckpoint raw;
  raw.bytes = read_file(path);
  const auto& b = raw.bytes;
  if (b.size() < 16 || std::memcmp(b.data(), kMagic, 8) != 0) {
    throw CorruptFileError(path.string() + ": not a checkpoint (bad magic or truncated)");
  }
  const std::uint64_t len = decode_u64_le(std::span(b).subspan(8, 8));
  if (len > b.size() - 16) throw CorruptFileError(path.string() + ": truncated header");
  try {
    raw.header = nlohmann::json::parse(b.begin() + 16, b.begin() + 16 + static_cast<std::ptrdiff_t>(len));
  } catch (const nlohmann::json::exception& e) {
    throw CorruptFileError(path.string() + ": unreadable header: " + e.what());
  }
  raw.blob_start = 16 + len;
  if (!raw.header.is_object() || !raw.header.contains("format_version")) {
    throw CorruptFileError(path.string() + ": header lacks format_version");
  }
  const auto version = raw.header.at("format_version");
  if (!version.is_number_integer() || version.get<int>() != kCheckpointFormatVersion) {
    throw VersionError(path.string() + ": checkpoint format_version " + version.dump() +
                       " is not supported (expected " + std::to_string(kCheckpointFormatVersion) + ")");
  }
  return raw;
}

}  // namespace

nlohmann::json spec_to_json(const ModelSpec& spec) {
  return {{"architecture_id", to_string(spec.architecture)},
          {"input_shape", {spec.input_shape.channels, spec.input_shape.height, spec.input_shape.width}},
          {"num_classes", spec.num_classes},
          {"width", spec.width}};
}

std::string model_fingerprint(const ModelState& state) {
  std::vector<std::uint8_t> bytes;
  const std::string head = spec_to_json(state.spec).dump();
  bytes.insert(bytes.end(), head.begin(), head.end());
  append_f64_le(bytes, state.params);
  return sha256_hex(bytes);
}

ModelSpec spec_from_json(const nlohmann::json& j) {
  try {
    ModelSpec spec;
    spec.architecture = parse_architecture(j.at("architecture_id").get<std::string>());
    const auto shape = j.at("input_shape").get<std::vector<std::size_t>>();
    if (shape.size() != 3) throw ConfigError("input_shape must have 3 entries (channels, height, width)");
    spec.input_shape = {shape[0], shape[1], shape[2]};
    spec.num_classes = j.at("num_classes").get<int>();
    spec.width = j.value("width", 0);
    spec.validate();
    return spec;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid model spec: ") + e.what());
  }
}

void save_checkpoint(const ModelState& state, const std::filesystem::path& path) {
  if (!state.all_finite()) throw NumericError("refusing to save a checkpoint with non-finite parameters");
  const auto layout = parameter_layout(state.spec);
  std::vector<std::uint8_t> blob;
  append_f64_le(blob, state.params);

  nlohmann::json header = spec_to_json(state.spec);
  header["format_version"] = kCheckpointFormatVersion;
  header["seed"] = state.seed;
  header["training_meta"] = state.training_meta;
  header["dtype"] = "float64";
  header["blob_bytes"] = blob.size();
  header["blob_sha256"] = sha256_hex(blob);
  auto tensors = nlohmann::json::array();
  for (const auto& p : layout) {
    tensors.push_back({{"name", p.name}, {"shape", p.shape}, {"offset", p.offset * 8}, {"nbytes", p.size * 8}});
  }
  header["tensors"] = tensors;

  const std::string text = header.dump();
  std::vector<std::uint8_t> out(kMagic, kMagic + 8);
  append_u64_le(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), blob.begin(), blob.end());
  write_file(path, out);
}

nlohmann::json read_checkpoint_header(const std::filesystem::path& path) { return read_raw(path).header; }

ModelState load_checkpoint(const std::filesystem::path& path) {
  auto raw = read_raw(path);
  const auto& h = raw.header;
  ModelState state;
  try {
    state.spec = spec_from_json(h);
    state.seed = h.at("seed").get<std::uint64_t>();
    state.training_meta = h.at("training_meta");
    if (h.at("dtype").get<std::string>() != "float64") throw CorruptFileError("unsupported dtype");
    const auto blob_bytes = h.at("blob_bytes").get<std::size_t>();
    if (raw.bytes.size() - raw.blob_start != blob_bytes) {
      throw CorruptFileError(path.string() + ": payload is " +
                             std::to_string(raw.bytes.size() - raw.blob_start) + " bytes, header says " +
                             std::to_string(blob_bytes));
    }
    const auto blob = std::span<const std::uint8_t>(raw.bytes).subspan(raw.blob_start);
    if (sha256_hex(blob) != h.at("blob_sha256").get<std::string>()) {
      throw CorruptFileError(path.string() + ": tensor payload checksum mismatch");
    }
    const auto layout = parameter_layout(state.spec);
    const auto& tensors = h.at("tensors");
    if (tensors.size() != layout.size()) throw CorruptFileError(path.string() + ": tensor index does not match spec");
    for (std::size_t i = 0; i < layout.size(); ++i) {
      if (tensors[i].at("name").get<std::string>() != layout[i].name ||
          tensors[i].at("shape").get<Shape>() != layout[i].shape ||
          tensors[i].at("offset").get<std::size_t>() != layout[i].offset * 8) {
        throw CorruptFileError(path.string() + ": tensor '" + layout[i].name + "' does not match spec");
      }
    }
    state.params = decode_f64_le(blob);
    const std::size_t expected = layout.empty() ? 0 : layout.back().offset + layout.back().size;
    if (state.params.size() != expected) throw CorruptFileError(path.string() + ": parameter count mismatch");
  } catch (const nlohmann::json::exception& e) {
    throw CorruptFileError(path.string() + ": malformed header: " + e.what());
  } catch (const ConfigError& e) {
    throw CorruptFileError(path.string() + ": " + e.what());
  }
  if (!state.all_finite()) throw CorruptFileError(path.string() + ": non-finite parameters");
  return state;
}

}  // namespace mad
