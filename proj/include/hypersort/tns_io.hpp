#pragma once

// ".tns" tensor files: "TNS1", u8 rank, rank x u32 LE dims, f32 LE payload.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "hypersort/error.hpp"
#include "hypersort/tensor.hpp"

namespace hypersort {

inline constexpr std::string_view kTnsMagic = "TNS1";

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint32_t get_u32(std::string_view in, std::size_t pos) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return v;
}

inline std::uint64_t get_u64(std::string_view in, std::size_t pos) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i)
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return v;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

}  // namespace detail

inline std::string encode_tns(const Shape& shape, std::span<const float> values) {
  if (shape.size() > 255) throw ContractError("tns: rank above 255");
  std::string out(kTnsMagic);
  out.push_back(static_cast<char>(shape.size()));
  for (std::size_t d : shape) detail::put_u32(out, static_cast<std::uint32_t>(d));
  out.reserve(out.size() + 4 * values.size());
  for (float v : values) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

inline std::string encode_tns(const Tensor& t) { return encode_tns(t.shape(), t.data()); }

// `origin` names the source in error messages.
inline Tensor decode_tns(std::string_view bytes, const std::string& origin) {
  if (bytes.size() < 5 || bytes.substr(0, 4) != kTnsMagic) {
    throw FormatError(origin + ": bad magic, not a TNS1 tensor");
  }
  const std::size_t rank = static_cast<unsigned char>(bytes[4]);
  std::size_t pos = 5;
  if (bytes.size() < pos + 4 * rank) throw FormatError(origin + ": truncated header");
  Shape shape(rank);
  for (std::size_t i = 0; i < rank; ++i, pos += 4) {
    shape[i] = detail::get_u32(bytes, pos);
    if (shape[i] == 0) throw FormatError(origin + ": zero-sized dimension");
  }
  const std::size_t n = shape_numel(shape);
  if (bytes.size() != pos + 4 * n) {
    throw FormatError(origin + ": payload holds " + std::to_string((bytes.size() - pos) / 4) +
                      " values, header declares " + std::to_string(n));
  }
  std::vector<float> data(n);
  for (std::size_t i = 0; i < n; ++i, pos += 4)
    data[i] = std::bit_cast<float>(detail::get_u32(bytes, pos));
  return Tensor::from_data(std::move(shape), std::move(data));
}

inline void write_tns(const std::filesystem::path& path, const Tensor& t) {
  detail::write_file(path, encode_tns(t));
}

inline Tensor read_tns(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("missing file " + path.string());
  return decode_tns(detail::read_file(path), path.string());
}

}  // namespace hypersort
