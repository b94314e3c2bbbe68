#pragma once

// Hard-mask evaluation helpers.

#include <cstddef>
#include <vector>

#include "hypersort/error.hpp"
#include "hypersort/tensor.hpp"

namespace hypersort {

// 2|A n B| / (|A| + |B|) over foreground (nonzero) pixels; two empty masks
// agree perfectly.
inline double dice_coefficient(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("dice: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  std::size_t inter = 0, sa = 0, sb = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const bool pa = a[i] != 0.0f, pb = b[i] != 0.0f;
    sa += pa;
    sb += pb;
    inter += pa && pb;
  }
  if (sa + sb == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(sa + sb);
}

inline std::size_t foreground_count(const Tensor& mask) {
  std::size_t n = 0;
  for (float v : mask.data()) n += v != 0.0f;
  return n;
}

// Class-id mask [H x W] from logits or probabilities [K x H x W]. Ties go to
// the lower class id.
template <class T>
Tensor argmax_channels(const BasicTensor<T>& scores) {
  if (scores.rank() != 3) throw DimensionError("argmax: needs KxHxW, got " + shape_str(scores.shape()));
  const std::size_t k = scores.dim(0), plane = scores.dim(1) * scores.dim(2);
  std::vector<float> out(plane);
  for (std::size_t i = 0; i < plane; ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < k; ++c)
      if (scores[c * plane + i] > scores[best * plane + i]) best = c;
    out[i] = static_cast<float>(best);
  }
  return Tensor::from_data({scores.dim(1), scores.dim(2)}, std::move(out));
}

}  // namespace hypersort
