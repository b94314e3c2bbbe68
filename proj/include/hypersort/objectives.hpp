#pragma once

// Training objective: soft Dice + cross-entropy on the segmentation, plus an
// L1 penalty on the sample's latent vector.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "hypersort/error.hpp"
#include "hypersort/ops.hpp"
#include "hypersort/tensor.hpp"

namespace hypersort {

inline constexpr double kDiceSmooth = 1e-5;

struct LossBreakdown {
  double dice = 0;
  double cross_entropy = 0;
  double seg_total = 0;
  double latent_l1 = 0;
  double total = 0;
};

template <class T>
struct SegLoss {
  BasicTensor<T> dice;
  BasicTensor<T> cross_entropy;
  BasicTensor<T> total;  // dice + cross_entropy
};

// One-hot [K x H x W] encoding of a class-id mask [H x W]; validates ids.
template <class T>
BasicTensor<T> one_hot(const Tensor& mask, std::size_t num_classes) {
  if (mask.rank() != 2) throw DimensionError("mask must be HxW, got " + shape_str(mask.shape()));
  const std::size_t n = mask.numel();
  std::vector<T> g(num_classes * n, T{0});
  for (std::size_t i = 0; i < n; ++i) {
    const float v = mask[i];
    const auto id = static_cast<long long>(v);
    if (v != static_cast<float>(id) || id < 0 || id >= static_cast<long long>(num_classes)) {
      throw DataError("mask value " + std::to_string(v) + " at pixel " + std::to_string(i) +
                      " is not a class id in [0, " + std::to_string(num_classes) + ")");
    }
    g[static_cast<std::size_t>(id) * n + i] = T{1};
  }
  return BasicTensor<T>::from_data({num_classes, mask.dim(0), mask.dim(1)}, std::move(g));
}

// Soft Dice averaged over foreground classes (background excluded) plus mean
// pixelwise cross-entropy, both differentiable w.r.t. the logits.
template <class T>
SegLoss<T> dice_ce_loss(const BasicTensor<T>& logits, const Tensor& mask) {
  if (logits.rank() != 3 || mask.rank() != 2 || logits.dim(1) != mask.dim(0) ||
      logits.dim(2) != mask.dim(1)) {
    throw DimensionError("dice_ce_loss: logits " + shape_str(logits.shape()) +
                         " do not match mask " + shape_str(mask.shape()));
  }
  const std::size_t k = logits.dim(0);
  const std::size_t pixels = mask.numel();
  const auto target = one_hot<T>(mask, k);
  const T eps = static_cast<T>(kDiceSmooth);

  const auto probs = softmax(logits);
  const auto inter = sum_per_channel(mul(probs, target));
  const auto pred_area = sum_per_channel(probs);
  std::vector<T> ref(k);
  const auto target_area = sum_per_channel(target);
  for (std::size_t c = 0; c < k; ++c) ref[c] = target_area[c];
  const auto denom = add_scalar(add(pred_area, BasicTensor<T>::from_data({k}, std::move(ref))), eps);
  const auto ratio = div(add_scalar(mul_scalar(inter, T{2}), eps), denom);
  const auto dice = add_scalar(mul_scalar(mean(slice(ratio, 1, {k - 1})), T{-1}), T{1});

  const auto ce = mul_scalar(sum(mul(target, log_softmax(logits))),
                             static_cast<T>(-1.0 / static_cast<double>(pixels)));
  return {dice, ce, add(dice, ce)};
}

// alpha * sum |lam_i|, with subgradient 0 at exactly 0.
template <class T>
BasicTensor<T> l1_reg(const BasicTensor<T>& lam, T alpha) {
  if (!(alpha >= T{0})) throw ContractError("l1_reg: alpha must be nonnegative");
  return mul_scalar(sum(abs(lam)), alpha);
}

template <class T>
LossBreakdown breakdown(const SegLoss<T>& seg, const BasicTensor<T>& latent_l1) {
  LossBreakdown b;
  b.dice = seg.dice.item();
  b.cross_entropy = seg.cross_entropy.item();
  b.seg_total = b.dice + b.cross_entropy;
  b.latent_l1 = latent_l1.item();
  b.total = b.seg_total + b.latent_l1;
  return b;
}

}  // namespace hypersort
