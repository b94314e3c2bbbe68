#pragma once

// Hyper-network: a relu MLP from a latent vector to the full UNet parameter
// vector, squashed by scale * tanh so every emitted parameter stays inside
// (-scale, scale).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstddef>
#include <random>
#include <vector>

#include "hypersort/error.hpp"
#include "hypersort/ops.hpp"
#include "hypersort/tensor.hpp"
#include "hypersort/unet.hpp"

namespace hypersort {

inline constexpr double kParamCap = 5.0;
inline constexpr double kInitClamp = 4.9;

struct HyperConfig {
  std::size_t latent_dim = 2;
  std::vector<std::size_t> hidden = {50, 50, 50};
};

template <class T>
struct BasicHyperParams {
  std::size_t latent_dim = 0;
  T cap = static_cast<T>(kParamCap);
  // Layer i maps weights[i].dim(0) -> weights[i].dim(1).
  std::vector<BasicTensor<T>> weights;
  std::vector<BasicTensor<T>> biases;

  std::size_t output_dim() const { return weights.back().dim(1); }

  std::vector<BasicTensor<T>> parameters() const {
    std::vector<BasicTensor<T>> out;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      out.push_back(weights[i]);
      out.push_back(biases[i]);
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.numel();
    return n;
  }

  // Deep copy with a different scalar type; leaves keep requires_grad.
  template <class U>
  BasicHyperParams<U> cast() const {
    BasicHyperParams<U> out;
    out.latent_dim = latent_dim;
    out.cap = static_cast<U>(cap);
    auto conv = [](const BasicTensor<T>& t) {
      std::vector<U> v(t.data().begin(), t.data().end());
      return BasicTensor<U>::from_data(t.shape(), std::move(v), t.requires_grad());
    };
    for (std::size_t i = 0; i < weights.size(); ++i) {
      out.weights.push_back(conv(weights[i]));
      out.biases.push_back(conv(biases[i]));
    }
    return out;
  }
};

using HyperParams = BasicHyperParams<float>;

// Latents [B x d] -> parameters [B x P]. Rows are independent.
template <class T>
BasicTensor<T> hyper_forward_batch(const BasicHyperParams<T>& h, const BasicTensor<T>& latents) {
  if (latents.rank() != 2 || latents.dim(1) != h.latent_dim) {
    throw DimensionError("hyper_forward: latents must be B x " + std::to_string(h.latent_dim) +
                         ", got " + shape_str(latents.shape()));
  }
  BasicTensor<T> x = latents;
  const std::size_t last = h.weights.size() - 1;
  for (std::size_t i = 0; i < h.weights.size(); ++i) {
    x = add_row_bias(matmul(x, h.weights[i]), h.biases[i]);
    x = i == last ? tanh_scaled(x, h.cap) : relu(x);
  }
  return x;
}

template <class T>
BasicParamVector<T> hyper_forward(const BasicHyperParams<T>& h, const BasicTensor<T>& lam,
                                  const LayoutDescriptor& layout) {
  if (lam.numel() != h.latent_dim) {
    throw DimensionError("hyper_forward: latent has " + std::to_string(lam.numel()) +
                         " components, expected " + std::to_string(h.latent_dim));
  }
  if (h.output_dim() != layout.total) {
    throw DimensionError("hyper_forward: network emits " + std::to_string(h.output_dim()) +
                         " parameters, layout needs " + std::to_string(layout.total));
  }
  auto out = hyper_forward_batch(h, reshape(lam, {1, h.latent_dim}));
  return {reshape(out, {layout.total}), &layout};
}

struct HyperInit {
  HyperParams params;
  // The shared UNet every latent maps to at initialization, clamped to
  // [-4.9, 4.9] so that atanh(theta0 / cap) is finite.
  std::vector<float> theta0;
};

// Hidden layers: uniform(+-1/sqrt(fan_in)) weights and biases. Final layer:
// zero weights and bias atanh(clamp(theta0) / cap), so every latent initially
// maps onto the same freshly initialized UNet theta0.
inline HyperInit init_hyper_with_theta(const LayoutDescriptor& layout, const HyperConfig& cfg,
                                       std::uint64_t seed) {
  if (cfg.latent_dim < 1) throw ContractError("init_hyper: latent_dim must be >= 1");
  std::mt19937_64 rng(seed);
  HyperInit init;
  HyperParams& h = init.params;
  h.latent_dim = cfg.latent_dim;
  std::size_t fan_in = cfg.latent_dim;
  for (std::size_t width : cfg.hidden) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<float> w(fan_in * width), b(width);
    for (auto& v : w) v = static_cast<float>(dist(rng));
    for (auto& v : b) v = static_cast<float>(dist(rng));
    h.weights.push_back(Tensor::from_data({fan_in, width}, std::move(w), true));
    h.biases.push_back(Tensor::from_data({width}, std::move(b), true));
    fan_in = width;
  }
  init.theta0 = init_unet_params(layout, rng);
  std::vector<float> bias(layout.total);
  for (std::size_t i = 0; i < bias.size(); ++i) {
    const double t = std::clamp(static_cast<double>(init.theta0[i]), -kInitClamp, kInitClamp);
    init.theta0[i] = static_cast<float>(t);
    bias[i] = static_cast<float>(std::atanh(t / kParamCap));
  }
  h.weights.push_back(Tensor::zeros({fan_in, layout.total}, true));
  h.biases.push_back(Tensor::from_data({layout.total}, std::move(bias), true));
  return init;
}

inline HyperParams init_hyper(const LayoutDescriptor& layout, const HyperConfig& cfg,
                              std::uint64_t seed) {
  return init_hyper_with_theta(layout, cfg, seed).params;
}

}  // namespace hypersort
