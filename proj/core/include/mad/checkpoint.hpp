#pragma once

#include <filesystem>

#include <nlohmann/json.hpp>

#include "mad/model.hpp"

namespace mad {

inline constexpr int kCheckpointFormatVersion = 1;

// Layout (all integers little-endian):
//   [0, 8)      magic "MADCKPT\0"
//   [8, 16)     u64 header length L
//   [16, 16+L)  UTF-8 JSON header
//   [16+L, ..)  tensor blobs, concatenated in layout order
// Header keys: format_version, architecture_id, input_shape [c,h,w],
// num_classes, width, seed, training_meta, dtype ("float64"), blob_bytes,
// blob_sha256 and tensors [{name, shape, offset, nbytes}] where offset is
// relative to the start of the blob region.

void save_checkpoint(const ModelState& state, const std::filesystem::path& path);
/// Throws VersionError on a format_version mismatch, CorruptFileError on
/// truncation or a damaged payload, IoError when unreadable.
ModelState load_checkpoint(const std::filesystem::path& path);

/// Header without the tensors; cheap metadata access.
nlohmann::json read_checkpoint_header(const std::filesystem::path& path);

/// Content id of a model: SHA-256 over the architecture header and the raw
/// float64 parameters. Independent of training_meta.
std::string model_fingerprint(const ModelState& state);

nlohmann::json spec_to_json(const ModelSpec& spec);
ModelSpec spec_from_json(const nlohmann::json& j);

}  // namespace mad
