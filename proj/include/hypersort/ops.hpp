#pragma once

// Taped primitives. Every function here records a TapeNode when any input
// requires gradients; backward closures only ever add into input gradients.
// Reductions and normalization statistics accumulate in double.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "hypersort/error.hpp"
#include "hypersort/tensor.hpp"

namespace hypersort {

namespace detail {

using Acc = double;

inline void require(bool ok, const std::string& what) {
  if (!ok) throw DimensionError(what);
}

inline void require_same(const Shape& a, const Shape& b, std::string_view op) {
  if (a != b) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) +
                         " vs " + shape_str(b));
  }
}

template <class T>
std::span<T> grad_of(const std::shared_ptr<Storage<T>>& s) {
  return s->requires_grad ? s->grad_buffer() : std::span<T>{};
}

// Elementwise unary op: f gives the value, df(x, y) the local derivative.
template <class T, class F, class DF>
BasicTensor<T> unary(std::string_view op, const BasicTensor<T>& x, F f, DF df) {
  const auto& in = x.storage();
  std::vector<T> out(in->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in->data[i]);
  return make_result<T>(op, in->shape, std::move(out), {in},
                        [in, df](const Storage<T>& o) {
                          auto g = grad_of(in);
                          if (g.empty()) return;
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            g[i] += o.grad[i] * df(in->data[i], o.data[i]);
                          }
                        });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same(a.shape(), b.shape(), "add");
  const auto &sa = a.storage(), &sb = b.storage();
  std::vector<T> out(sa->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sa->data[i] + sb->data[i];
  return detail::make_result<T>("add", a.shape(), std::move(out), {sa, sb},
                                [sa, sb](const detail::Storage<T>& o) {
                                  for (const auto& s : {sa, sb}) {
                                    auto g = detail::grad_of(s);
                                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                                  }
                                });
}

template <class T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same(a.shape(), b.shape(), "sub");
  const auto &sa = a.storage(), &sb = b.storage();
  std::vector<T> out(sa->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sa->data[i] - sb->data[i];
  return detail::make_result<T>("sub", a.shape(), std::move(out), {sa, sb},
                                [sa, sb](const detail::Storage<T>& o) {
                                  auto ga = detail::grad_of(sa);
                                  for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += o.grad[i];
                                  auto gb = detail::grad_of(sb);
                                  for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= o.grad[i];
                                });
}

template <class T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same(a.shape(), b.shape(), "mul");
  const auto &sa = a.storage(), &sb = b.storage();
  std::vector<T> out(sa->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sa->data[i] * sb->data[i];
  return detail::make_result<T>("mul", a.shape(), std::move(out), {sa, sb},
                                [sa, sb](const detail::Storage<T>& o) {
                                  auto ga = detail::grad_of(sa);
                                  for (std::size_t i = 0; i < ga.size(); ++i)
                                    ga[i] += o.grad[i] * sb->data[i];
                                  auto gb = detail::grad_of(sb);
                                  for (std::size_t i = 0; i < gb.size(); ++i)
                                    gb[i] += o.grad[i] * sa->data[i];
                                });
}

template <class T>
BasicTensor<T> div(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same(a.shape(), b.shape(), "div");
  const auto &sa = a.storage(), &sb = b.storage();
  std::vector<T> out(sa->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sa->data[i] / sb->data[i];
  return detail::make_result<T>("div", a.shape(), std::move(out), {sa, sb},
                                [sa, sb](const detail::Storage<T>& o) {
                                  auto ga = detail::grad_of(sa);
                                  for (std::size_t i = 0; i < ga.size(); ++i)
                                    ga[i] += o.grad[i] / sb->data[i];
                                  auto gb = detail::grad_of(sb);
                                  for (std::size_t i = 0; i < gb.size(); ++i)
                                    gb[i] -= o.grad[i] * o.data[i] / sb->data[i];
                                });
}

template <class T>
BasicTensor<T> add_scalar(const BasicTensor<T>& x, T c) {
  return detail::unary<T>(
      "add_scalar", x, [c](T v) { return v + c; }, [](T, T) { return T{1}; });
}

template <class T>
BasicTensor<T> mul_scalar(const BasicTensor<T>& x, T c) {
  return detail::unary<T>(
      "mul_scalar", x, [c](T v) { return v * c; }, [c](T, T) { return c; });
}

// ---------------------------------------------------------------------------
// Activations and pointwise maps

template <class T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  return detail::unary<T>(
      "relu", x, [](T v) { return v < T{0} ? T{0} : v; },  // NaN passes through
      [](T v, T) { return v > T{0} ? T{1} : T{0}; });
}

// scale * tanh(x), held strictly inside (-scale, scale) even where tanh
// rounds to +-1 in storage precision.
template <class T>
BasicTensor<T> tanh_scaled(const BasicTensor<T>& x, T scale) {
  const T edge = std::nextafter(scale, T{0});
  return detail::unary<T>(
      "tanh_scaled", x, [scale, edge](T v) { return std::clamp(scale * std::tanh(v), -edge, edge); },
      [scale](T, T y) {
        T t = y / scale;
        return scale * (T{1} - t * t);
      });
}

template <class T>
BasicTensor<T> log(const BasicTensor<T>& x) {
  return detail::unary<T>(
      "log", x, [](T v) { return std::log(v); }, [](T v, T) { return T{1} / v; });
}

// Subgradient 0 at exactly 0.
template <class T>
BasicTensor<T> abs(const BasicTensor<T>& x) {
  return detail::unary<T>(
      "abs", x, [](T v) { return std::abs(v); },
      [](T v, T) { return v > T{0} ? T{1} : (v < T{0} ? T{-1} : T{0}); });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <class T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
  }
  const auto& in = x.storage();
  return detail::make_result<T>("reshape", std::move(shape), in->data, {in},
                                [in](const detail::Storage<T>& o) {
                                  auto g = detail::grad_of(in);
                                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                                });
}

// Contiguous flat window [offset, offset + prod(shape)) viewed as `shape`.
template <class T>
BasicTensor<T> slice(const BasicTensor<T>& x, std::size_t offset, Shape shape) {
  std::size_t n = shape_numel(shape);
  if (offset + n > x.numel()) {
    throw DimensionError("slice: window [" + std::to_string(offset) + ", " +
                         std::to_string(offset + n) + ") exceeds " +
                         std::to_string(x.numel()) + " elements");
  }
  const auto& in = x.storage();
  std::vector<T> out(in->data.begin() + offset, in->data.begin() + offset + n);
  return detail::make_result<T>("slice", std::move(shape), std::move(out), {in},
                                [in, offset](const detail::Storage<T>& o) {
                                  auto g = detail::grad_of(in);
                                  if (g.empty()) return;
                                  for (std::size_t i = 0; i < o.grad.size(); ++i)
                                    g[offset + i] += o.grad[i];
                                });
}

// Concatenation along axis 0 (the channel axis of C x H x W tensors).
template <class T>
BasicTensor<T> concat(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() != b.rank() || a.rank() == 0 ||
      !std::equal(a.shape().begin() + 1, a.shape().end(), b.shape().begin() + 1)) {
    throw DimensionError("concat: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const auto &sa = a.storage(), &sb = b.storage();
  Shape shape = a.shape();
  shape[0] += b.dim(0);
  std::vector<T> out;
  out.reserve(sa->data.size() + sb->data.size());
  out.insert(out.end(), sa->data.begin(), sa->data.end());
  out.insert(out.end(), sb->data.begin(), sb->data.end());
  return detail::make_result<T>("concat", std::move(shape), std::move(out), {sa, sb},
                                [sa, sb](const detail::Storage<T>& o) {
                                  std::size_t na = sa->data.size();
                                  auto ga = detail::grad_of(sa);
                                  for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += o.grad[i];
                                  auto gb = detail::grad_of(sb);
                                  for (std::size_t i = 0; i < gb.size(); ++i)
                                    gb[i] += o.grad[na + i];
                                });
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  const auto& in = x.storage();
  detail::Acc acc = 0;
  for (T v : in->data) acc += v;
  return detail::make_result<T>("sum", {1}, {static_cast<T>(acc)}, {in},
                                [in](const detail::Storage<T>& o) {
                                  auto g = detail::grad_of(in);
                                  for (auto& v : g) v += o.grad[0];
                                });
}

template <class T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
  const auto& in = x.storage();
  detail::Acc acc = 0;
  for (T v : in->data) acc += v;
  const detail::Acc n = static_cast<detail::Acc>(in->data.size());
  return detail::make_result<T>("mean", {1}, {static_cast<T>(acc / n)}, {in},
                                [in, n](const detail::Storage<T>& o) {
                                  auto g = detail::grad_of(in);
                                  T share = static_cast<T>(o.grad[0] / n);
                                  for (auto& v : g) v += share;
                                });
}

// Sums over every axis but the first: [C x ...] -> [C].
template <class T>
BasicTensor<T> sum_per_channel(const BasicTensor<T>& x) {
  if (x.rank() < 2) throw DimensionError("sum_per_channel: needs rank >= 2, got " + shape_str(x.shape()));
  const auto& in = x.storage();
  const std::size_t channels = x.dim(0), inner = x.numel() / channels;
  std::vector<T> out(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    detail::Acc acc = 0;
    for (std::size_t i = 0; i < inner; ++i) acc += in->data[c * inner + i];
    out[c] = static_cast<T>(acc);
  }
  return detail::make_result<T>("sum_per_channel", {channels}, std::move(out), {in},
                                [in, channels, inner](const detail::Storage<T>& o) {
                                  auto g = detail::grad_of(in);
                                  if (g.empty()) return;
                                  for (std::size_t c = 0; c < channels; ++c)
                                    for (std::size_t i = 0; i < inner; ++i)
                                      g[c * inner + i] += o.grad[c];
                                });
}

// ---------------------------------------------------------------------------
// Dense layers

template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: shape mismatch " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  const auto &sa = a.storage(), &sb = b.storage();
  std::vector<T> out(m * n);
  std::vector<detail::Acc> row(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(row.begin(), row.end(), 0.0);
    for (std::size_t p = 0; p < k; ++p) {
      const detail::Acc av = sa->data[i * k + p];
      const T* brow = sb->data.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = static_cast<T>(row[j]);
  }
  return detail::make_result<T>(
      "matmul", {m, n}, std::move(out), {sa, sb}, [sa, sb, m, k, n](const detail::Storage<T>& o) {
        auto ga = detail::grad_of(sa);
        if (!ga.empty()) {
          // dA = dY * B^T
          for (std::size_t i = 0; i < m; ++i) {
            const T* gy = o.grad.data() + i * n;
            for (std::size_t p = 0; p < k; ++p) {
              const T* brow = sb->data.data() + p * n;
              detail::Acc acc = 0;
              for (std::size_t j = 0; j < n; ++j) acc += static_cast<detail::Acc>(gy[j]) * brow[j];
              ga[i * k + p] += static_cast<T>(acc);
            }
          }
        }
        auto gb = detail::grad_of(sb);
        if (!gb.empty()) {
          // dB = A^T * dY
          for (std::size_t p = 0; p < k; ++p) {
            T* gbrow = gb.data() + p * n;
            if (m == 1) {
              const T av = sa->data[p];
              for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * o.grad[j];
              continue;
            }
            for (std::size_t j = 0; j < n; ++j) {
              detail::Acc acc = 0;
              for (std::size_t i = 0; i < m; ++i)
                acc += static_cast<detail::Acc>(sa->data[i * k + p]) * o.grad[i * n + j];
              gbrow[j] += static_cast<T>(acc);
            }
          }
        }
      });
}

// x[M x N] + bias[N] broadcast over rows.
template <class T>
BasicTensor<T> add_row_bias(const BasicTensor<T>& x, const BasicTensor<T>& bias) {
  if (x.rank() != 2 || bias.rank() != 1 || bias.dim(0) != x.dim(1)) {
    throw DimensionError("add_row_bias: shape mismatch " + shape_str(x.shape()) + " + " +
                         shape_str(bias.shape()));
  }
  const std::size_t m = x.dim(0), n = x.dim(1);
  const auto &sx = x.storage(), &sbias = bias.storage();
  std::vector<T> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = sx->data[i * n + j] + sbias->data[j];
  return detail::make_result<T>("add_row_bias", x.shape(), std::move(out), {sx, sbias},
                                [sx, sbias, m, n](const detail::Storage<T>& o) {
                                  auto gx = detail::grad_of(sx);
                                  for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += o.grad[i];
                                  auto gb = detail::grad_of(sbias);
                                  if (gb.empty()) return;
                                  for (std::size_t j = 0; j < n; ++j) {
                                    detail::Acc acc = 0;
                                    for (std::size_t i = 0; i < m; ++i) acc += o.grad[i * n + j];
                                    gb[j] += static_cast<T>(acc);
                                  }
                                });
}

// ---------------------------------------------------------------------------
// Image ops over C x H x W tensors

// 3x3 cross-correlation, stride 1, zero padding 1, plus per-channel bias.
template <class T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& kernel,
                      const BasicTensor<T>& bias) {
  if (x.rank() != 3) throw DimensionError("conv2d: input must be CxHxW, got " + shape_str(x.shape()));
  if (kernel.rank() != 4 || kernel.dim(2) != 3 || kernel.dim(3) != 3) {
    throw DimensionError("conv2d: kernel must be Cout x Cin x 3 x 3, got " +
                         shape_str(kernel.shape()));
  }
  if (kernel.dim(1) != x.dim(0)) {
    throw DimensionError("conv2d: channel mismatch, input " + shape_str(x.shape()) +
                         " kernel " + shape_str(kernel.shape()));
  }
  if (bias.rank() != 1 || bias.dim(0) != kernel.dim(0)) {
    throw DimensionError("conv2d: bias " + shape_str(bias.shape()) + " does not match kernel " +
                         shape_str(kernel.shape()));
  }
  const std::size_t cin = x.dim(0), h = x.dim(1), w = x.dim(2), cout = kernel.dim(0);
  const std::size_t plane = h * w;
  const auto &sx = x.storage(), &sk = kernel.storage(), &sbias = bias.storage();

  std::vector<T> out(cout * plane);
  for (std::size_t co = 0; co < cout; ++co) {
    T* y = out.data() + co * plane;
    std::fill(y, y + plane, sbias->data[co]);
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const T* xin = sx->data.data() + ci * plane;
      const T* kk = sk->data.data() + (co * cin + ci) * 9;
      for (int ky = 0; ky < 3; ++ky) {
        const int dy = ky - 1;
        const std::size_t r0 = dy < 0 ? 1 : 0, r1 = dy > 0 ? h - 1 : h;
        for (int kx = 0; kx < 3; ++kx) {
          const int dx = kx - 1;
          const T wv = kk[ky * 3 + kx];
          const std::size_t c0 = dx < 0 ? 1 : 0, c1 = dx > 0 ? w - 1 : w;
          for (std::size_t r = r0; r < r1; ++r) {
            T* yrow = y + r * w;
            const T* xrow = xin + (r + dy) * w + dx;
            for (std::size_t c = c0; c < c1; ++c) yrow[c] += wv * xrow[c];
          }
        }
      }
    }
  }

  return detail::make_result<T>(
      "conv2d", {cout, h, w}, std::move(out), {sx, sk, sbias},
      [sx, sk, sbias, cin, cout, h, w, plane](const detail::Storage<T>& o) {
        auto gx = detail::grad_of(sx);
        auto gk = detail::grad_of(sk);
        auto gbias = detail::grad_of(sbias);
        for (std::size_t co = 0; co < cout; ++co) {
          const T* gy = o.grad.data() + co * plane;
          if (!gbias.empty()) {
            detail::Acc acc = 0;
            for (std::size_t i = 0; i < plane; ++i) acc += gy[i];
            gbias[co] += static_cast<T>(acc);
          }
          for (std::size_t ci = 0; ci < cin; ++ci) {
            const T* xin = sx->data.data() + ci * plane;
            const T* kk = sk->data.data() + (co * cin + ci) * 9;
            T* gxin = gx.empty() ? nullptr : gx.data() + ci * plane;
            T* gkk = gk.empty() ? nullptr : gk.data() + (co * cin + ci) * 9;
            for (int ky = 0; ky < 3; ++ky) {
              const int dy = ky - 1;
              const std::size_t r0 = dy < 0 ? 1 : 0, r1 = dy > 0 ? h - 1 : h;
              for (int kx = 0; kx < 3; ++kx) {
                const int dx = kx - 1;
                const std::size_t c0 = dx < 0 ? 1 : 0, c1 = dx > 0 ? w - 1 : w;
                const T wv = kk[ky * 3 + kx];
                detail::Acc acc = 0;
                for (std::size_t r = r0; r < r1; ++r) {
                  const T* gyrow = gy + r * w;
                  const std::size_t xoff = (r + dy) * w + dx;
                  if (gkk) {
                    const T* xrow = xin + xoff;
                    T racc = 0;
                    for (std::size_t c = c0; c < c1; ++c) racc += gyrow[c] * xrow[c];
                    acc += racc;
                  }
                  if (gxin) {
                    T* gxrow = gxin + xoff;
                    for (std::size_t c = c0; c < c1; ++c) gxrow[c] += wv * gyrow[c];
                  }
                }
                if (gkk) gkk[ky * 3 + kx] += static_cast<T>(acc);
              }
            }
          }
        }
      });
}

// Per-channel normalization over the spatial axes followed by an affine map.
template <class T>
BasicTensor<T> instance_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                             const BasicTensor<T>& beta, T eps = T(1e-5)) {
  if (x.rank() != 3) throw DimensionError("instance_norm: input must be CxHxW, got " + shape_str(x.shape()));
  const std::size_t channels = x.dim(0), plane = x.dim(1) * x.dim(2);
  if (gamma.shape() != Shape{channels} || beta.shape() != Shape{channels}) {
    throw DimensionError("instance_norm: affine shapes " + shape_str(gamma.shape()) + ", " +
                         shape_str(beta.shape()) + " do not match " + std::to_string(channels) +
                         " channels");
  }
  if (!(eps > T{0})) throw ContractError("instance_norm: eps must be positive");
  const auto &sx = x.storage(), &sg = gamma.storage(), &sb = beta.storage();
  std::vector<T> out(sx->data.size());
  std::vector<T> xhat(sx->data.size());
  std::vector<detail::Acc> inv_std(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    const T* xc = sx->data.data() + c * plane;
    detail::Acc mu = 0;
    for (std::size_t i = 0; i < plane; ++i) mu += xc[i];
    mu /= static_cast<detail::Acc>(plane);
    detail::Acc var = 0;
    for (std::size_t i = 0; i < plane; ++i) {
      const detail::Acc d = xc[i] - mu;
      var += d * d;
    }
    var /= static_cast<detail::Acc>(plane);
    const detail::Acc inv = 1.0 / std::sqrt(var + static_cast<detail::Acc>(eps));
    inv_std[c] = inv;
    const T gc = sg->data[c], bc = sb->data[c];
    for (std::size_t i = 0; i < plane; ++i) {
      const T xh = static_cast<T>((xc[i] - mu) * inv);
      xhat[c * plane + i] = xh;
      out[c * plane + i] = gc * xh + bc;
    }
  }
  return detail::make_result<T>(
      "instance_norm", x.shape(), std::move(out), {sx, sg, sb},
      [sx, sg, sb, channels, plane, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](const detail::Storage<T>& o) {
        auto gx = detail::grad_of(sx);
        auto gg = detail::grad_of(sg);
        auto gb = detail::grad_of(sb);
        for (std::size_t c = 0; c < channels; ++c) {
          const T* gy = o.grad.data() + c * plane;
          const T* xh = xhat.data() + c * plane;
          detail::Acc sum_gy = 0, sum_gy_xh = 0;
          for (std::size_t i = 0; i < plane; ++i) {
            sum_gy += gy[i];
            sum_gy_xh += static_cast<detail::Acc>(gy[i]) * xh[i];
          }
          if (!gg.empty()) gg[c] += static_cast<T>(sum_gy_xh);
          if (!gb.empty()) gb[c] += static_cast<T>(sum_gy);
          if (gx.empty()) continue;
          const detail::Acc gc = sg->data[c];
          const detail::Acc n = static_cast<detail::Acc>(plane);
          const detail::Acc mean_g = gc * sum_gy / n, mean_gxh = gc * sum_gy_xh / n;
          const detail::Acc inv = inv_std[c];
          for (std::size_t i = 0; i < plane; ++i) {
            gx[c * plane + i] +=
                static_cast<T>(inv * (gc * gy[i] - mean_g - xh[i] * mean_gxh));
          }
        }
      });
}

// 2x2 max pooling with stride 2. Ties go to the first element in scan order.
template <class T>
BasicTensor<T> max_pool2d(const BasicTensor<T>& x) {
  if (x.rank() != 3 || x.dim(1) % 2 || x.dim(2) % 2) {
    throw DimensionError("max_pool2d: needs CxHxW with even H, W, got " + shape_str(x.shape()));
  }
  const std::size_t channels = x.dim(0), h = x.dim(1), w = x.dim(2), ho = h / 2, wo = w / 2;
  const auto& sx = x.storage();
  std::vector<T> out(channels * ho * wo);
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t r = 0; r < ho; ++r)
      for (std::size_t q = 0; q < wo; ++q) {
        std::size_t best = c * h * w + 2 * r * w + 2 * q;
        for (std::size_t dr = 0; dr < 2; ++dr)
          for (std::size_t dq = 0; dq < 2; ++dq) {
            std::size_t idx = c * h * w + (2 * r + dr) * w + 2 * q + dq;
            if (sx->data[idx] > sx->data[best]) best = idx;
          }
        const std::size_t o = (c * ho + r) * wo + q;
        out[o] = sx->data[best];
        argmax[o] = best;
      }
  return detail::make_result<T>("max_pool2d", {channels, ho, wo}, std::move(out), {sx},
                                [sx, argmax = std::move(argmax)](const detail::Storage<T>& o) {
                                  auto g = detail::grad_of(sx);
                                  if (g.empty()) return;
                                  for (std::size_t i = 0; i < argmax.size(); ++i)
                                    g[argmax[i]] += o.grad[i];
                                });
}

// Nearest-neighbour x2 upsampling.
template <class T>
BasicTensor<T> upsample_nearest2d(const BasicTensor<T>& x) {
  if (x.rank() != 3) throw DimensionError("upsample_nearest2d: needs CxHxW, got " + shape_str(x.shape()));
  const std::size_t channels = x.dim(0), h = x.dim(1), w = x.dim(2), ho = 2 * h, wo = 2 * w;
  const auto& sx = x.storage();
  std::vector<T> out(channels * ho * wo);
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t r = 0; r < ho; ++r)
      for (std::size_t q = 0; q < wo; ++q)
        out[(c * ho + r) * wo + q] = sx->data[(c * h + r / 2) * w + q / 2];
  return detail::make_result<T>("upsample_nearest2d", {channels, ho, wo}, std::move(out), {sx},
                                [sx, channels, h, w, ho, wo](const detail::Storage<T>& o) {
                                  auto g = detail::grad_of(sx);
                                  if (g.empty()) return;
                                  for (std::size_t c = 0; c < channels; ++c)
                                    for (std::size_t r = 0; r < ho; ++r)
                                      for (std::size_t q = 0; q < wo; ++q)
                                        g[(c * h + r / 2) * w + q / 2] += o.grad[(c * ho + r) * wo + q];
                                });
}

namespace detail {

// Softmax / log-softmax over axis 0 of a [K x ...] tensor.
template <class T>
BasicTensor<T> channel_softmax(const BasicTensor<T>& x, bool take_log) {
  if (x.rank() < 2) throw DimensionError("softmax: needs rank >= 2, got " + shape_str(x.shape()));
  const std::size_t k = x.dim(0), inner = x.numel() / k;
  const auto& sx = x.storage();
  std::vector<T> out(sx->data.size());
  std::vector<T> prob(take_log ? sx->data.size() : 0);
  for (std::size_t i = 0; i < inner; ++i) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t c = 0; c < k; ++c) mx = std::max(mx, sx->data[c * inner + i]);
    Acc z = 0;
    for (std::size_t c = 0; c < k; ++c) z += std::exp(static_cast<Acc>(sx->data[c * inner + i] - mx));
    const Acc logz = std::log(z);
    for (std::size_t c = 0; c < k; ++c) {
      const Acc shifted = static_cast<Acc>(sx->data[c * inner + i] - mx);
      if (take_log) {
        out[c * inner + i] = static_cast<T>(shifted - logz);
        prob[c * inner + i] = static_cast<T>(std::exp(shifted - logz));
      } else {
        out[c * inner + i] = static_cast<T>(std::exp(shifted - logz));
      }
    }
  }
  auto bw = [sx, k, inner, take_log, prob = std::move(prob)](const Storage<T>& o) {
    auto g = grad_of(sx);
    if (g.empty()) return;
    for (std::size_t i = 0; i < inner; ++i) {
      Acc dot = 0;
      if (take_log) {
        for (std::size_t c = 0; c < k; ++c) dot += o.grad[c * inner + i];
        for (std::size_t c = 0; c < k; ++c)
          g[c * inner + i] += static_cast<T>(o.grad[c * inner + i] - prob[c * inner + i] * dot);
      } else {
        for (std::size_t c = 0; c < k; ++c)
          dot += static_cast<Acc>(o.grad[c * inner + i]) * o.data[c * inner + i];
        for (std::size_t c = 0; c < k; ++c)
          g[c * inner + i] += static_cast<T>(o.data[c * inner + i] * (o.grad[c * inner + i] - dot));
      }
    }
  };
  return make_result<T>(take_log ? "log_softmax" : "softmax", x.shape(), std::move(out), {sx},
                        std::move(bw));
}

}  // namespace detail

template <class T>
BasicTensor<T> softmax(const BasicTensor<T>& x) {
  return detail::channel_softmax(x, false);
}

template <class T>
BasicTensor<T> log_softmax(const BasicTensor<T>& x) {
  return detail::channel_softmax(x, true);
}

}  // namespace hypersort
