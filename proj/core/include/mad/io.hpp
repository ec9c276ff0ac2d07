#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mad/tensor.hpp"

namespace mad {

/// Lowercase hex SHA-256.
std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(const std::string& text);
std::string sha256_file(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

// Little-endian encoding regardless of host order.
void append_f32_le(std::vector<std::uint8_t>& out, std::span<const float> values);
void append_f64_le(std::vector<std::uint8_t>& out, std::span<const double> values);
void append_u64_le(std::vector<std::uint8_t>& out, std::uint64_t v);
std::vector<float> decode_f32_le(std::span<const std::uint8_t> bytes);
std::vector<double> decode_f64_le(std::span<const std::uint8_t> bytes);
std::uint64_t decode_u64_le(std::span<const std::uint8_t> bytes);

/// Reads an IDX3 image file and IDX1 label file (the MNIST distribution
/// format). uint8 pixels are scaled to [0,1]. Missing or malformed files raise
/// DataError.
LabeledImages load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);
/// Writes uint8 IDX files; pixel values are rounded to the nearest 1/255.
void save_idx(const LabeledImages& data, const std::filesystem::path& images,
              const std::filesystem::path& labels);

}  // namespace mad
