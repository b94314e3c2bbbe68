#pragma once

// Binary morphology on H x W masks with the 4-connected cross structuring
// element. Pixels outside the image count as background.

#include <cstddef>
#include <string>
#include <vector>

#include "hypersort/error.hpp"
#include "hypersort/tensor.hpp"

namespace hypersort {

enum class StyleKind { kClean, kErode, kDilate };

inline const char* style_name(StyleKind k) {
  switch (k) {
    case StyleKind::kClean: return "clean";
    case StyleKind::kErode: return "erode";
    case StyleKind::kDilate: return "dilate";
  }
  return "?";
}

inline StyleKind parse_style(const std::string& s) {
  if (s == "clean") return StyleKind::kClean;
  if (s == "erode") return StyleKind::kErode;
  if (s == "dilate") return StyleKind::kDilate;
  throw FormatError("unknown annotation style '" + s + "'");
}

// Labeling behaviour of the synthetic annotator.
struct OracleStyle {
  StyleKind kind = StyleKind::kClean;
  int iterations = 0;  // 3..5 when kind != clean, 0 otherwise

  static OracleStyle clean() { return {}; }
  static OracleStyle erode(int n) { return {StyleKind::kErode, n}; }
  static OracleStyle dilate(int n) { return {StyleKind::kDilate, n}; }

  // -iterations for erosion, +iterations for dilation, 0 when clean.
  int signed_magnitude() const {
    return kind == StyleKind::kErode ? -iterations : kind == StyleKind::kDilate ? iterations : 0;
  }

  void validate() const {
    if (kind == StyleKind::kClean ? iterations != 0 : iterations < 1) {
      throw DataError(std::string("inconsistent style: ") + style_name(kind) + " with " +
                      std::to_string(iterations) + " iterations");
    }
  }

  bool operator==(const OracleStyle&) const = default;
};

inline void require_binary(const Tensor& mask, const std::string& origin) {
  if (mask.rank() != 2) throw DimensionError(origin + ": mask must be HxW, got " + shape_str(mask.shape()));
  for (std::size_t i = 0; i < mask.numel(); ++i) {
    if (mask[i] != 0.0f && mask[i] != 1.0f) {
      throw DataError(origin + ": mask is not binary (value " + std::to_string(mask[i]) +
                      " at pixel " + std::to_string(i) + ")");
    }
  }
}

namespace detail {

// One cross-SE pass. erode: pixel survives iff it and its 4 neighbours are set.
// dilate: pixel is set iff it or any 4-neighbour is set.
inline std::vector<float> morph_pass(const std::vector<float>& in, std::size_t h, std::size_t w,
                                     bool erode) {
  std::vector<float> out(in.size());
  auto at = [&](long r, long c) -> float {
    if (r < 0 || c < 0 || r >= static_cast<long>(h) || c >= static_cast<long>(w)) return 0.0f;
    return in[static_cast<std::size_t>(r) * w + static_cast<std::size_t>(c)];
  };
  for (long r = 0; r < static_cast<long>(h); ++r)
    for (long c = 0; c < static_cast<long>(w); ++c) {
      const float n[5] = {at(r, c), at(r - 1, c), at(r + 1, c), at(r, c - 1), at(r, c + 1)};
      bool v = erode;
      for (float x : n) v = erode ? (v && x > 0.5f) : (v || x > 0.5f);
      out[static_cast<std::size_t>(r) * w + static_cast<std::size_t>(c)] = v ? 1.0f : 0.0f;
    }
  return out;
}

}  // namespace detail

inline Tensor erode(const Tensor& mask, int iterations) {
  require_binary(mask, "erode");
  auto v = mask.to_vector();
  for (int i = 0; i < iterations; ++i) v = detail::morph_pass(v, mask.dim(0), mask.dim(1), true);
  return Tensor::from_data(mask.shape(), std::move(v));
}

inline Tensor dilate(const Tensor& mask, int iterations) {
  require_binary(mask, "dilate");
  auto v = mask.to_vector();
  for (int i = 0; i < iterations; ++i) v = detail::morph_pass(v, mask.dim(0), mask.dim(1), false);
  return Tensor::from_data(mask.shape(), std::move(v));
}

inline Tensor perturb_mask(const Tensor& mask, const OracleStyle& style) {
  style.validate();
  switch (style.kind) {
    case StyleKind::kErode: return erode(mask, style.iterations);
    case StyleKind::kDilate: return dilate(mask, style.iterations);
    case StyleKind::kClean: break;
  }
  require_binary(mask, "perturb_mask");
  return mask.detach();
}

}  // namespace hypersort
