#pragma once

// 8-bit PNG encoding (grayscale or RGB) for browser display, plus base64 for
// JSON transport.

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "hypersort/error.hpp"
#include "hypersort/tensor.hpp"

namespace hypersort {

namespace detail {

inline void put_be32(std::string& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<char>((v >> s) & 0xFF));
}

inline void png_chunk(std::string& out, std::string_view type, std::string_view data) {
  put_be32(out, static_cast<std::uint32_t>(data.size()));
  std::string body(type);
  body += data;
  out += body;
  put_be32(out, static_cast<std::uint32_t>(
                    crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size()))));
}

}  // namespace detail

// pixels: row-major, `channels` bytes per pixel (1 = gray, 3 = RGB).
// text: optional tEXt key/value pairs.
inline std::string encode_png(std::size_t width, std::size_t height, int channels,
                              const std::vector<std::uint8_t>& pixels,
                              const std::vector<std::pair<std::string, std::string>>& text = {}) {
  if (channels != 1 && channels != 3) throw ContractError("png: channels must be 1 or 3");
  if (pixels.size() != width * height * static_cast<std::size_t>(channels)) {
    throw DimensionError("png: pixel buffer does not match " + std::to_string(width) + "x" +
                         std::to_string(height));
  }
  std::string raw;
  const std::size_t stride = width * static_cast<std::size_t>(channels);
  raw.reserve(height * (stride + 1));
  for (std::size_t r = 0; r < height; ++r) {
    raw.push_back('\0');  // filter: none
    raw.append(reinterpret_cast<const char*>(pixels.data() + r * stride), stride);
  }
  uLongf zlen = compressBound(static_cast<uLong>(raw.size()));
  std::string z(zlen, '\0');
  if (compress2(reinterpret_cast<Bytef*>(z.data()), &zlen, reinterpret_cast<const Bytef*>(raw.data()),
                static_cast<uLong>(raw.size()), 9) != Z_OK) {
    throw IoError("png: compression failed");
  }
  z.resize(zlen);

  std::string out("\x89PNG\r\n\x1a\n", 8);
  std::string ihdr;
  detail::put_be32(ihdr, static_cast<std::uint32_t>(width));
  detail::put_be32(ihdr, static_cast<std::uint32_t>(height));
  ihdr += {8, static_cast<char>(channels == 1 ? 0 : 2), 0, 0, 0};
  detail::png_chunk(out, "IHDR", ihdr);
  for (const auto& [k, v] : text) detail::png_chunk(out, "tEXt", k + std::string(1, '\0') + v);
  detail::png_chunk(out, "IDAT", z);
  detail::png_chunk(out, "IEND", "");
  return out;
}

namespace detail {

inline std::pair<std::size_t, std::size_t> plane_dims(const Tensor& t) {
  if (t.rank() == 2) return {t.dim(0), t.dim(1)};
  if (t.rank() == 3 && t.dim(0) == 1) return {t.dim(1), t.dim(2)};
  throw DimensionError("png: expected HxW or 1xHxW, got " + shape_str(t.shape()));
}

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace detail

using PngText = std::vector<std::pair<std::string, std::string>>;

// Intensities are clamped to [0, 1].
inline std::string image_png(const Tensor& image, const PngText& text = {}) {
  const auto [h, w] = detail::plane_dims(image);
  std::vector<std::uint8_t> px(h * w);
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = detail::to_byte(image[i]);
  return encode_png(w, h, 1, px, text);
}

// Nonzero pixels white.
inline std::string mask_png(const Tensor& mask, const PngText& text = {}) {
  const auto [h, w] = detail::plane_dims(mask);
  std::vector<std::uint8_t> px(h * w);
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = mask[i] != 0.0f ? 255 : 0;
  return encode_png(w, h, 1, px, text);
}

// Grayscale image with the mask blended in red.
inline std::string overlay_png(const Tensor& image, const Tensor& mask, const PngText& text = {}) {
  const auto [h, w] = detail::plane_dims(image);
  if (detail::plane_dims(mask) != std::pair{h, w}) throw DimensionError("overlay: image and mask differ in size");
  std::vector<std::uint8_t> px(h * w * 3);
  for (std::size_t i = 0; i < h * w; ++i) {
    const double g = std::clamp(static_cast<double>(image[i]), 0.0, 1.0);
    const bool on = mask[i] != 0.0f;
    px[3 * i] = detail::to_byte(on ? 0.5 * g + 0.5 : g);
    px[3 * i + 1] = detail::to_byte(on ? 0.5 * g : g);
    px[3 * i + 2] = detail::to_byte(on ? 0.5 * g : g);
  }
  return encode_png(w, h, 3, px, text);
}

inline std::string base64_encode(std::string_view in) {
  static constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((in.size() + 2) / 3 * 4);
  for (std::size_t i = 0; i < in.size(); i += 3) {
    std::uint32_t v = static_cast<std::uint8_t>(in[i]) << 16;
    if (i + 1 < in.size()) v |= static_cast<std::uint8_t>(in[i + 1]) << 8;
    if (i + 2 < in.size()) v |= static_cast<std::uint8_t>(in[i + 2]);
    out.push_back(kAlphabet[(v >> 18) & 63]);
    out.push_back(kAlphabet[(v >> 12) & 63]);
    out.push_back(i + 1 < in.size() ? kAlphabet[(v >> 6) & 63] : '=');
    out.push_back(i + 2 < in.size() ? kAlphabet[v & 63] : '=');
  }
  return out;
}

inline std::string base64_decode(std::string_view in) {
  auto value = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
  };
  std::string out;
  std::uint32_t acc = 0;
  int bits = 0;
  for (char c : in) {
    if (c == '=') break;
    const int v = value(c);
    if (v < 0) throw FormatError("base64: invalid character");
    acc = (acc << 6) | static_cast<std::uint32_t>(v);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back(static_cast<char>((acc >> bits) & 0xFF));
    }
  }
  return out;
}

}  // namespace hypersort
