#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "hypersort/error.hpp"

namespace hypersort {

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// First/second moment estimates for one parameter buffer. `t` counts the
// updates this buffer has received.
struct AdamState {
  std::vector<float> m;
  std::vector<float> v;
  std::uint64_t t = 0;

  explicit AdamState(std::size_t n = 0) : m(n, 0.0f), v(n, 0.0f) {}
  bool operator==(const AdamState&) const = default;
};

// Bias-corrected Adam: p -= lr * m_hat / (sqrt(v_hat) + eps).
inline void adam_step(std::span<float> params, std::span<const float> grads, AdamState& state,
                      const AdamOptions& opt, double grad_scale = 1.0) {
  if (params.size() != grads.size() || state.m.size() != params.size() ||
      state.v.size() != params.size()) {
    throw DimensionError("adam_step: " + std::to_string(params.size()) + " params, " +
                         std::to_string(grads.size()) + " grads, " + std::to_string(state.m.size()) +
                         " moments");
  }
  ++state.t;
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.t));
  const float b1 = static_cast<float>(opt.beta1), b2 = static_cast<float>(opt.beta2);
  const float step = static_cast<float>(opt.lr / bc1);
  const float inv_sqrt_bc2 = static_cast<float>(1.0 / std::sqrt(bc2));
  const float eps = static_cast<float>(opt.eps);
  const float scale = static_cast<float>(grad_scale);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const float g = grads[i] * scale;
    state.m[i] = b1 * state.m[i] + (1.0f - b1) * g;
    state.v[i] = b2 * state.v[i] + (1.0f - b2) * g * g;
    params[i] -= step * state.m[i] / (std::sqrt(state.v[i]) * inv_sqrt_bc2 + eps);
  }
}

}  // namespace hypersort
