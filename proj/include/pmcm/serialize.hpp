#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "pmcm/tensor.hpp"

namespace pmcm {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace bytes {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline void put_f64(std::vector<std::uint8_t>& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

inline std::uint32_t get_u32(std::span<const std::uint8_t> in, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in[at + i]) << (8 * i);
  return v;
}
inline std::uint64_t get_u64(std::span<const std::uint8_t> in, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in[at + i]) << (8 * i);
  return v;
}
inline double get_f64(std::span<const std::uint8_t> in, std::size_t at) {
  return std::bit_cast<double>(get_u64(in, at));
}

inline std::uint64_t fnv1a(std::span<const std::uint8_t> data) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto b : data) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void ensure_parent(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
}

// Both writers create missing parent directories.
inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> data) {
  ensure_parent(path);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  ensure_parent(path);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

inline std::string read_text(const std::filesystem::path& path) {
  auto raw = read_file(path);
  return {raw.begin(), raw.end()};
}

}  // namespace bytes

// A named parameter list, the flat unit of checkpointing and aggregation.
struct TensorEntry {
  std::string name;
  Shape shape;
};

// Little-endian f64 blob of the concatenated tensor data.
inline std::vector<std::uint8_t> encode_blob(std::span<const double> flat) {
  std::vector<std::uint8_t> out;
  out.reserve(flat.size() * 8);
  for (double v : flat) bytes::put_f64(out, v);
  return out;
}

inline std::vector<double> decode_blob(std::span<const std::uint8_t> raw) {
  if (raw.size() % 8 != 0) throw FormatError("parameter blob length is not a multiple of 8");
  std::vector<double> out(raw.size() / 8);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = bytes::get_f64(raw, i * 8);
  return out;
}

inline nlohmann::json manifest_json(const std::vector<TensorEntry>& entries) {
  nlohmann::json tensors = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& e : entries) {
    const std::size_t n = shape_size(e.shape);
    tensors.push_back({{"name", e.name}, {"shape", e.shape}, {"offset", offset}, {"size", n}});
    offset += n;
  }
  return {{"format", "pmcm-params"}, {"version", 1}, {"total", offset}, {"tensors", tensors}};
}

inline std::vector<TensorEntry> parse_manifest(const nlohmann::json& j) {
  if (!j.is_object() || j.value("format", "") != "pmcm-params") throw FormatError("not a pmcm-params manifest");
  if (j.value("version", 0) != 1) throw FormatError("unsupported manifest version");
  std::vector<TensorEntry> entries;
  std::size_t offset = 0;
  for (const auto& t : j.at("tensors")) {
    TensorEntry e{t.at("name").get<std::string>(), t.at("shape").get<Shape>()};
    if (t.at("offset").get<std::size_t>() != offset) throw FormatError("manifest offsets are not contiguous");
    offset += shape_size(e.shape);
    entries.push_back(std::move(e));
  }
  if (j.at("total").get<std::size_t>() != offset) throw FormatError("manifest total does not match shapes");
  return entries;
}

}  // namespace pmcm
