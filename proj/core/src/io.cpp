#include "mad/io.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>

#include "mad/errors.hpp"

namespace mad {

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 ||
      EVP_DigestFinal_ex(ctx.get(), digest, &len) != 1) {
    throw IoError("sha256 computation failed");
  }
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) {
    os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  }
  return os.str();
}

std::string sha256_hex(const std::string& text) {
  return sha256_hex(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()),
                                                  text.size()));
}

std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(read_file(path)); }

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

namespace {

template <class U>
void append_le(std::vector<std::uint8_t>& out, U bits) {
  for (std::size_t b = 0; b < sizeof(U); ++b) out.push_back(static_cast<std::uint8_t>(bits >> (8 * b)));
}

template <class U>
U read_le(const std::uint8_t* p) {
  U v = 0;
  for (std::size_t b = 0; b < sizeof(U); ++b) v |= static_cast<U>(p[b]) << (8 * b);
  return v;
}

std::uint32_t read_be32(const std::vector<std::uint8_t>& bytes, std::size_t off) {
  return (static_cast<std::uint32_t>(bytes[off]) << 24) | (static_cast<std::uint32_t>(bytes[off + 1]) << 16) |
         (static_cast<std::uint32_t>(bytes[off + 2]) << 8) | bytes[off + 3];
}

void append_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

}  // namespace

void append_f32_le(std::vector<std::uint8_t>& out, std::span<const float> values) {
  out.reserve(out.size() + values.size() * 4);
  for (float v : values) append_le(out, std::bit_cast<std::uint32_t>(v));
}

void append_f64_le(std::vector<std::uint8_t>& out, std::span<const double> values) {
  out.reserve(out.size() + values.size() * 8);
  for (double v : values) append_le(out, std::bit_cast<std::uint64_t>(v));
}

void append_u64_le(std::vector<std::uint8_t>& out, std::uint64_t v) { append_le(out, v); }

std::vector<float> decode_f32_le(std::span<const std::uint8_t> bytes) {
  if (bytes.size() % 4) throw CorruptFileError("float32 blob size is not a multiple of 4");
  std::vector<float> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::bit_cast<float>(read_le<std::uint32_t>(bytes.data() + 4 * i));
  }
  return out;
}

std::vector<double> decode_f64_le(std::span<const std::uint8_t> bytes) {
  if (bytes.size() % 8) throw CorruptFileError("float64 blob size is not a multiple of 8");
  std::vector<double> out(bytes.size() / 8);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::bit_cast<double>(read_le<std::uint64_t>(bytes.data() + 8 * i));
  }
  return out;
}

std::uint64_t decode_u64_le(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8) throw CorruptFileError("truncated integer field");
  return read_le<std::uint64_t>(bytes.data());
}

LabeledImages load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  for (const auto& p : {images, labels}) {
    if (!std::filesystem::exists(p)) throw DataError("dataset file not found: " + p.string());
  }
  const auto ib = read_file(images);
  const auto lb = read_file(labels);
  if (ib.size() < 16 || read_be32(ib, 0) != 0x00000803) {
    throw DataError(images.string() + " is not an IDX3 ubyte image file");
  }
  if (lb.size() < 8 || read_be32(lb, 0) != 0x00000801) {
    throw DataError(labels.string() + " is not an IDX1 ubyte label file");
  }
  const std::size_t n = read_be32(ib, 4), h = read_be32(ib, 8), w = read_be32(ib, 12);
  if (read_be32(lb, 4) != n) throw DataError("image and label counts differ");
  if (ib.size() != 16 + n * h * w || lb.size() != 8 + n) throw DataError("IDX payload size mismatch");
  LabeledImages out;
  out.shape = {1, h, w};
  out.pixels.resize(n * h * w);
  for (std::size_t i = 0; i < out.pixels.size(); ++i) out.pixels[i] = static_cast<float>(ib[16 + i]) / 255.0f;
  out.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) out.labels[i] = lb[8 + i];
  return out;
}

void save_idx(const LabeledImages& data, const std::filesystem::path& images,
              const std::filesystem::path& labels) {
  if (data.shape.channels != 1) throw DataError("IDX export supports single-channel images only");
  std::vector<std::uint8_t> ib, lb;
  append_be32(ib, 0x00000803);
  append_be32(ib, static_cast<std::uint32_t>(data.count()));
  append_be32(ib, static_cast<std::uint32_t>(data.shape.height));
  append_be32(ib, static_cast<std::uint32_t>(data.shape.width));
  for (float v : data.pixels) {
    ib.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
  }
  append_be32(lb, 0x00000801);
  append_be32(lb, static_cast<std::uint32_t>(data.count()));
  for (int y : data.labels) lb.push_back(static_cast<std::uint8_t>(y));
  write_file(images, ib);
  write_file(labels, lb);
}

}  // namespace mad
