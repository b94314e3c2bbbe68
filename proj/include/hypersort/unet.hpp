#pragma once

// A 2D UNet evaluated functionally from a flat parameter vector.
//
// Topology for num_stages = S, base channels B:
//   encoder stage s (s < S): convs_per_stage blocks at width B*2^s, then 2x2 max pool
//   bottleneck: convs_per_stage blocks at width B*2^S
//   decoder stage s (s = S-1 .. 0): nearest upsample, concat skip s, blocks at width B*2^s
//   head: one 3x3 conv to num_classes logits
// Each block is conv3x3 -> relu -> instance_norm.

#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "hypersort/error.hpp"
#include "hypersort/ops.hpp"
#include "hypersort/tensor.hpp"

namespace hypersort {

struct UNetConfig {
  std::size_t in_channels = 1;
  std::size_t num_classes = 2;
  std::size_t num_stages = 2;
  std::size_t base_channels = 4;
  std::size_t convs_per_stage = 2;

  void validate() const {
    if (num_stages < 1 || base_channels < 1 || convs_per_stage < 1 || in_channels < 1 ||
        num_classes < 2) {
      throw ContractError(
          "UNetConfig: num_stages, base_channels, convs_per_stage, in_channels must be >= 1 "
          "and num_classes >= 2");
    }
  }

  std::size_t spatial_multiple() const { return std::size_t{1} << num_stages; }
  std::size_t width(std::size_t stage) const { return base_channels << stage; }

  bool operator==(const UNetConfig&) const = default;
};

enum class ParamRole { kConvKernel, kConvBias, kNormGamma, kNormBeta };

inline const char* role_name(ParamRole r) {
  switch (r) {
    case ParamRole::kConvKernel: return "conv-kernel";
    case ParamRole::kConvBias: return "conv-bias";
    case ParamRole::kNormGamma: return "norm-gamma";
    case ParamRole::kNormBeta: return "norm-beta";
  }
  return "?";
}

struct LayoutEntry {
  std::string layer;
  ParamRole role;
  Shape shape;
  std::size_t offset;

  std::size_t size() const { return shape_numel(shape); }
};

struct LayoutDescriptor {
  UNetConfig config;
  std::vector<LayoutEntry> entries;
  std::size_t total = 0;
};

namespace detail {

class LayoutBuilder {
 public:
  explicit LayoutBuilder(LayoutDescriptor& out) : out_(out) {}

  void conv(const std::string& layer, std::size_t cin, std::size_t cout, bool with_norm) {
    add(layer, ParamRole::kConvKernel, {cout, cin, 3, 3});
    add(layer, ParamRole::kConvBias, {cout});
    if (with_norm) {
      add(layer, ParamRole::kNormGamma, {cout});
      add(layer, ParamRole::kNormBeta, {cout});
    }
  }

 private:
  void add(const std::string& layer, ParamRole role, Shape shape) {
    LayoutEntry e{layer, role, std::move(shape), out_.total};
    out_.total += e.size();
    out_.entries.push_back(std::move(e));
  }
  LayoutDescriptor& out_;
};

// Walks the unet topology once, calling visit(layer, cin, cout, with_norm) per conv.
template <class Visit>
void for_each_conv(const UNetConfig& cfg, Visit&& visit) {
  std::size_t ch = cfg.in_channels;
  for (std::size_t s = 0; s < cfg.num_stages; ++s) {
    for (std::size_t i = 0; i < cfg.convs_per_stage; ++i) {
      visit("enc" + std::to_string(s) + ".conv" + std::to_string(i), ch, cfg.width(s), true);
      ch = cfg.width(s);
    }
  }
  for (std::size_t i = 0; i < cfg.convs_per_stage; ++i) {
    visit("bottleneck.conv" + std::to_string(i), ch, cfg.width(cfg.num_stages), true);
    ch = cfg.width(cfg.num_stages);
  }
  for (std::size_t s = cfg.num_stages; s-- > 0;) {
    ch += cfg.width(s);
    for (std::size_t i = 0; i < cfg.convs_per_stage; ++i) {
      visit("dec" + std::to_string(s) + ".conv" + std::to_string(i), ch, cfg.width(s), true);
      ch = cfg.width(s);
    }
  }
  visit("head", ch, cfg.num_classes, false);
}

}  // namespace detail

inline LayoutDescriptor param_layout(const UNetConfig& cfg) {
  cfg.validate();
  LayoutDescriptor layout;
  layout.config = cfg;
  detail::LayoutBuilder builder(layout);
  detail::for_each_conv(cfg, [&](const std::string& layer, std::size_t cin, std::size_t cout,
                                 bool norm) { builder.conv(layer, cin, cout, norm); });
  return layout;
}

inline std::size_t param_count(const UNetConfig& cfg) { return param_layout(cfg).total; }

// A flat parameter vector together with the layout that gives it meaning.
template <class T>
struct BasicParamVector {
  BasicTensor<T> theta;
  const LayoutDescriptor* layout = nullptr;
};

using ParamVector = BasicParamVector<float>;

namespace detail {

template <class T>
class ParamCursor {
 public:
  ParamCursor(const LayoutDescriptor& layout, const BasicTensor<T>& theta)
      : layout_(layout), theta_(theta) {}

  BasicTensor<T> next(ParamRole role) {
    const LayoutEntry& e = layout_.entries.at(pos_++);
    if (e.role != role) {
      throw ContractError("unet layout out of sync at " + e.layer + ": expected " +
                          role_name(role) + ", found " + role_name(e.role));
    }
    return slice(theta_, e.offset, e.shape);
  }

 private:
  const LayoutDescriptor& layout_;
  const BasicTensor<T>& theta_;
  std::size_t pos_ = 0;
};

template <class T>
BasicTensor<T> conv_block(ParamCursor<T>& params, const BasicTensor<T>& x) {
  auto kernel = params.next(ParamRole::kConvKernel);
  auto bias = params.next(ParamRole::kConvBias);
  auto gamma = params.next(ParamRole::kNormGamma);
  auto beta = params.next(ParamRole::kNormBeta);
  return instance_norm(relu(conv2d(x, kernel, bias)), gamma, beta);
}

}  // namespace detail

inline void check_unet_input(const UNetConfig& cfg, const Shape& image) {
  if (image.size() != 3 || image[0] != cfg.in_channels) {
    throw DimensionError("unet: image must be " + std::to_string(cfg.in_channels) +
                         "xHxW, got " + shape_str(image));
  }
  const std::size_t m = cfg.spatial_multiple();
  if (image[1] % m || image[2] % m) {
    throw ContractError("unet: spatial dims " + std::to_string(image[1]) + "x" +
                        std::to_string(image[2]) + " must be multiples of " + std::to_string(m));
  }
}

// Logits [num_classes x H x W] for image [in_channels x H x W].
template <class T>
BasicTensor<T> unet_forward(const LayoutDescriptor& layout, const BasicTensor<T>& theta,
                            const BasicTensor<T>& image) {
  const UNetConfig& cfg = layout.config;
  if (theta.numel() != layout.total) {
    throw DimensionError("unet: theta has " + std::to_string(theta.numel()) +
                         " values, layout needs " + std::to_string(layout.total));
  }
  check_unet_input(cfg, image.shape());

  detail::ParamCursor<T> params(layout, theta);
  std::vector<BasicTensor<T>> skips;
  BasicTensor<T> x = image;
  for (std::size_t s = 0; s < cfg.num_stages; ++s) {
    for (std::size_t i = 0; i < cfg.convs_per_stage; ++i) x = detail::conv_block(params, x);
    skips.push_back(x);
    x = max_pool2d(x);
  }
  for (std::size_t i = 0; i < cfg.convs_per_stage; ++i) x = detail::conv_block(params, x);
  for (std::size_t s = cfg.num_stages; s-- > 0;) {
    x = concat(upsample_nearest2d(x), skips[s]);
    for (std::size_t i = 0; i < cfg.convs_per_stage; ++i) x = detail::conv_block(params, x);
  }
  auto kernel = params.next(ParamRole::kConvKernel);
  auto bias = params.next(ParamRole::kConvBias);
  return conv2d(x, kernel, bias);
}

template <class T>
BasicTensor<T> unet_forward(const BasicParamVector<T>& params, const BasicTensor<T>& image) {
  if (!params.layout) throw ContractError("unet: parameter vector has no layout");
  return unet_forward(*params.layout, params.theta, image);
}

// Standard UNet initialization: He-normal kernels, zero biases, unit gamma,
// zero beta.
inline std::vector<float> init_unet_params(const LayoutDescriptor& layout, std::mt19937_64& rng) {
  std::vector<float> theta(layout.total, 0.0f);
  for (const LayoutEntry& e : layout.entries) {
    float* dst = theta.data() + e.offset;
    switch (e.role) {
      case ParamRole::kConvKernel: {
        const double fan_in = static_cast<double>(e.shape[1] * 9);
        std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
        for (std::size_t i = 0; i < e.size(); ++i) dst[i] = static_cast<float>(dist(rng));
        break;
      }
      case ParamRole::kNormGamma:
        std::fill(dst, dst + e.size(), 1.0f);
        break;
      case ParamRole::kConvBias:
      case ParamRole::kNormBeta:
        break;
    }
  }
  return theta;
}

}  // namespace hypersort
