// Differentiable operations over NCHW tensors.
#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "lgsa/tensor.hpp"

namespace lgsa {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

inline void require_rank4(const Shape& s, const char* op) {
  if (s.size() != 4) {
    throw ShapeError(std::string(op) + ": expected a [B,C,H,W] tensor, got " + shape_str(s));
  }
}

inline void require_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
}

// Writes one sample into columns [col0, col0 + H*W) of a row-major matrix
// with `ld` columns: row (c*k + ky)*k + kx holds in[c, y+ky-pad, x+kx-pad].
template <typename T>
void im2col(const T* in, std::size_t C, std::size_t H, std::size_t W, std::size_t k,
            std::size_t pad, T* cols, std::size_t ld, std::size_t col0) {
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* row = cols + ((c * k + ky) * k + kx) * ld + col0;
        const long dy = static_cast<long>(ky) - static_cast<long>(pad);
        const long dx = static_cast<long>(kx) - static_cast<long>(pad);
        const std::size_t x0 = dx < 0 ? static_cast<std::size_t>(-dx) : 0;
        const std::size_t x1 = dx > 0 ? W - static_cast<std::size_t>(dx) : W;
        for (std::size_t y = 0; y < H; ++y) {
          const long sy = static_cast<long>(y) + dy;
          T* dst = row + y * W;
          if (sy < 0 || sy >= static_cast<long>(H)) {
            std::fill(dst, dst + W, T(0));
            continue;
          }
          const T* src = in + (c * H + static_cast<std::size_t>(sy)) * W + dx;
          std::fill(dst, dst + x0, T(0));
          std::copy(src + x0, src + x1, dst + x0);
          std::fill(dst + x1, dst + W, T(0));
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, std::size_t C, std::size_t H, std::size_t W, std::size_t k,
                std::size_t pad, T* out, std::size_t ld, std::size_t col0) {
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* row = cols + ((c * k + ky) * k + kx) * ld + col0;
        const long dy = static_cast<long>(ky) - static_cast<long>(pad);
        const long dx = static_cast<long>(kx) - static_cast<long>(pad);
        const std::size_t x0 = dx < 0 ? static_cast<std::size_t>(-dx) : 0;
        const std::size_t x1 = dx > 0 ? W - static_cast<std::size_t>(dx) : W;
        for (std::size_t y = 0; y < H; ++y) {
          const long sy = static_cast<long>(y) + dy;
          if (sy < 0 || sy >= static_cast<long>(H)) continue;
          T* dst = out + (c * H + static_cast<std::size_t>(sy)) * W + dx;
          const T* src = row + y * W;
          for (std::size_t x = x0; x < x1; ++x) dst[x] += src[x];
        }
      }
    }
  }
}

// Column matrix [K, B*HW] for a whole batch.
template <typename T>
std::vector<T> batch_columns(const T* in, std::size_t B, std::size_t C, std::size_t H,
                             std::size_t W, std::size_t k, std::size_t pad) {
  const std::size_t HW = H * W, ld = B * HW;
  std::vector<T> cols(C * k * k * ld);
  if (k == 1) {
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c)
        std::copy_n(in + (b * C + c) * HW, HW, cols.data() + c * ld + b * HW);
    return cols;
  }
  for (std::size_t b = 0; b < B; ++b) im2col(in + b * C * HW, C, H, W, k, pad, cols.data(), ld, b * HW);
  return cols;
}

}  // namespace detail

/// Cross-correlation with square kernels. k=3 requires pad=1, k=1 requires
/// pad=0, so spatial size is preserved.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::size_t k, std::size_t pad) {
  detail::require_rank4(input.shape(), "conv2d");
  if (!((k == 3 && pad == 1) || (k == 1 && pad == 0))) {
    throw ShapeError("conv2d: unsupported kernel/pad combination k=" + std::to_string(k) +
                     " pad=" + std::to_string(pad));
  }
  const auto B = input.dim(0), Cin = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (weight.rank() != 4 || weight.dim(2) != k || weight.dim(3) != k) {
    throw ShapeError("conv2d: weight shape " + shape_str(weight.shape()) +
                     " does not match kernel size " + std::to_string(k));
  }
  const auto Cout = weight.dim(0);
  if (weight.dim(1) != Cin) {
    throw ShapeError("conv2d: input channels " + std::to_string(Cin) +
                     " do not match weight input channels " + std::to_string(weight.dim(1)));
  }
  if (bias.numel() != Cout) {
    throw ShapeError("conv2d: bias length " + std::to_string(bias.numel()) +
                     " does not match output channels " + std::to_string(Cout));
  }
  const std::size_t HW = H * W, K = Cin * k * k, N = B * HW;
  std::vector<T> out(B * Cout * HW);
  {
    const auto cols = detail::batch_columns(input.data().data(), B, Cin, H, W, k, pad);
    detail::RowMat<T> O = detail::ConstMatMap<T>(weight.data().data(), Cout, K) *
                          detail::ConstMatMap<T>(cols.data(), K, N);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t co = 0; co < Cout; ++co) {
        const T bv = bias.data()[co];
        const T* src = O.data() + co * N + b * HW;
        T* dst = out.data() + (b * Cout + co) * HW;
        for (std::size_t i = 0; i < HW; ++i) dst[i] = src[i] + bv;
      }
  }
  return Tensor<T>::make_result(
      {B, Cout, H, W}, std::move(out), {input, weight, bias},
      [B, Cin, Cout, H, W, HW, K, N, k, pad](detail::Node<T>& self) {
        auto& in = *self.parents[0];
        auto& wt = *self.parents[1];
        auto& bs = *self.parents[2];
        // Gradient rearranged to [Cout, B*HW].
        detail::RowMat<T> G(Cout, N);
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t co = 0; co < Cout; ++co)
            std::copy_n(self.grad.data() + (b * Cout + co) * HW, HW, G.data() + co * N + b * HW);
        if (bs.requires_grad) {
          bs.ensure_grad();
          for (std::size_t co = 0; co < Cout; ++co) bs.grad[co] += G.row(co).sum();
        }
        if (wt.requires_grad) {
          wt.ensure_grad();
          const auto cols = detail::batch_columns(in.value.data(), B, Cin, H, W, k, pad);
          detail::MatMap<T>(wt.grad.data(), Cout, K).noalias() +=
              G * detail::ConstMatMap<T>(cols.data(), K, N).transpose();
        }
        if (in.requires_grad) {
          in.ensure_grad();
          detail::RowMat<T> dcols = detail::ConstMatMap<T>(wt.value.data(), Cout, K).transpose() * G;
          for (std::size_t b = 0; b < B; ++b) {
            T* dst = in.grad.data() + b * Cin * HW;
            if (k == 1) {
              for (std::size_t c = 0; c < Cin; ++c) {
                const T* src = dcols.data() + c * N + b * HW;
                for (std::size_t i = 0; i < HW; ++i) dst[c * HW + i] += src[i];
              }
            } else {
              detail::col2im_add(dcols.data(), Cin, H, W, k, pad, dst, N, b * HW);
            }
          }
        }
      },
      "conv2d");
}

enum class PoolKind { Max, Avg };

/// 2x2 windows, stride 2. Max ties go to the first element in row-major order.
template <typename T>
Tensor<T> pool2(const Tensor<T>& input, PoolKind kind) {
  detail::require_rank4(input.shape(), "pool2");
  const auto B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (H % 2 || W % 2) {
    throw ShapeError("pool2: spatial dims must be even, got " + shape_str(input.shape()));
  }
  const std::size_t Ho = H / 2, Wo = W / 2, planes = B * C;
  std::vector<T> out(planes * Ho * Wo);
  std::vector<std::uint32_t> arg(kind == PoolKind::Max ? out.size() : 0);
  const T* in = input.data().data();
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t y = 0; y < Ho; ++y) {
      for (std::size_t x = 0; x < Wo; ++x) {
        const std::size_t base = p * H * W + 2 * y * W + 2 * x;
        const std::size_t idx[4] = {base, base + 1, base + W, base + W + 1};
        const std::size_t o = (p * Ho + y) * Wo + x;
        if (kind == PoolKind::Max) {
          std::size_t best = idx[0];
          for (int j = 1; j < 4; ++j)
            if (in[idx[j]] > in[best]) best = idx[j];
          out[o] = in[best];
          arg[o] = static_cast<std::uint32_t>(best);
        } else {
          out[o] = (in[idx[0]] + in[idx[1]] + in[idx[2]] + in[idx[3]]) * T(0.25);
        }
      }
    }
  }
  return Tensor<T>::make_result(
      {B, C, Ho, Wo}, std::move(out), {input},
      [kind, arg = std::move(arg), H, W, Ho, Wo, planes](detail::Node<T>& self) {
        auto& in = *self.parents[0];
        in.ensure_grad();
        if (kind == PoolKind::Max) {
          for (std::size_t o = 0; o < self.grad.size(); ++o) in.grad[arg[o]] += self.grad[o];
          return;
        }
        for (std::size_t p = 0; p < planes; ++p)
          for (std::size_t y = 0; y < Ho; ++y)
            for (std::size_t x = 0; x < Wo; ++x) {
              const T g = self.grad[(p * Ho + y) * Wo + x] * T(0.25);
              const std::size_t base = p * H * W + 2 * y * W + 2 * x;
              in.grad[base] += g;
              in.grad[base + 1] += g;
              in.grad[base + W] += g;
              in.grad[base + W + 1] += g;
            }
      },
      kind == PoolKind::Max ? "maxpool2" : "avgpool2");
}

namespace detail {

struct LerpTap {
  std::size_t lo, hi;
  double w_hi;  // weight on `hi`; `lo` gets 1 - w_hi
};

// Half-pixel (align-corners=false) source taps for 2x upsampling.
inline std::vector<LerpTap> upsample_taps(std::size_t n) {
  std::vector<LerpTap> taps(2 * n);
  for (std::size_t o = 0; o < 2 * n; ++o) {
    double src = (static_cast<double>(o) + 0.5) * 0.5 - 0.5;
    if (src < 0) src = 0;
    auto lo = static_cast<std::size_t>(src);
    if (lo > n - 1) lo = n - 1;
    const std::size_t hi = std::min(lo + 1, n - 1);
    taps[o] = {lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace detail

template <typename T>
Tensor<T> upsample_bilinear2(const Tensor<T>& input) {
  detail::require_rank4(input.shape(), "upsample_bilinear2");
  const auto B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t Ho = 2 * H, Wo = 2 * W, planes = B * C;
  const auto ty = detail::upsample_taps(H), tx = detail::upsample_taps(W);
  std::vector<T> out(planes * Ho * Wo);
  const T* in = input.data().data();
  for (std::size_t p = 0; p < planes; ++p) {
    const T* ip = in + p * H * W;
    T* op = out.data() + p * Ho * Wo;
    for (std::size_t y = 0; y < Ho; ++y) {
      const T wy = static_cast<T>(ty[y].w_hi);
      const T* r0 = ip + ty[y].lo * W;
      const T* r1 = ip + ty[y].hi * W;
      for (std::size_t x = 0; x < Wo; ++x) {
        const T wx = static_cast<T>(tx[x].w_hi);
        const T top = r0[tx[x].lo] * (T(1) - wx) + r0[tx[x].hi] * wx;
        const T bot = r1[tx[x].lo] * (T(1) - wx) + r1[tx[x].hi] * wx;
        op[y * Wo + x] = top * (T(1) - wy) + bot * wy;
      }
    }
  }
  return Tensor<T>::make_result(
      {B, C, Ho, Wo}, std::move(out), {input},
      [H, W, Ho, Wo, planes, ty, tx](detail::Node<T>& self) {
        auto& in = *self.parents[0];
        in.ensure_grad();
        for (std::size_t p = 0; p < planes; ++p) {
          T* gp = in.grad.data() + p * H * W;
          const T* go = self.grad.data() + p * Ho * Wo;
          for (std::size_t y = 0; y < Ho; ++y) {
            const T wy = static_cast<T>(ty[y].w_hi);
            T* r0 = gp + ty[y].lo * W;
            T* r1 = gp + ty[y].hi * W;
            for (std::size_t x = 0; x < Wo; ++x) {
              const T wx = static_cast<T>(tx[x].w_hi);
              const T g = go[y * Wo + x];
              r0[tx[x].lo] += g * (T(1) - wy) * (T(1) - wx);
              r0[tx[x].hi] += g * (T(1) - wy) * wx;
              r1[tx[x].lo] += g * wy * (T(1) - wx);
              r1[tx[x].hi] += g * wy * wx;
            }
          }
        }
      },
      "upsample_bilinear2");
}

enum class Mode { Train, Eval };

struct BatchNormOptions {
  double eps = 1e-5;
  double momentum = 0.1;
};

/// Per-channel batch normalization. In train mode, normalizes with batch
/// statistics and updates the running buffers in place; eval mode uses the
/// running buffers.
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                      Tensor<T>& running_mean, Tensor<T>& running_var, Mode mode,
                      BatchNormOptions opt = {}) {
  detail::require_rank4(input.shape(), "batchnorm2d");
  const auto B = input.dim(0), C = input.dim(1), HW = input.dim(2) * input.dim(3);
  if (gamma.numel() != C || beta.numel() != C || running_mean.numel() != C ||
      running_var.numel() != C) {
    throw ShapeError("batchnorm2d: parameter length does not match channel count " +
                     std::to_string(C));
  }
  const std::size_t count = B * HW;
  if (mode == Mode::Train && count < 2) {
    throw ShapeError(
        "batchnorm2d: train mode needs at least 2 values per channel; use a larger batch or "
        "spatial size");
  }
  const T* x = input.data().data();
  std::vector<T> xhat(input.numel()), out(input.numel()), inv_std(C);
  for (std::size_t c = 0; c < C; ++c) {
    double mean, var;
    if (mode == Mode::Train) {
      double s = 0;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < HW; ++i) s += x[(b * C + c) * HW + i];
      mean = s / static_cast<double>(count);
      double ss = 0;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < HW; ++i) {
          const double d = x[(b * C + c) * HW + i] - mean;
          ss += d * d;
        }
      var = ss / static_cast<double>(count);
      const double unbiased = ss / static_cast<double>(count - 1);
      auto& rm = running_mean.values()[c];
      auto& rv = running_var.values()[c];
      rm = static_cast<T>((1 - opt.momentum) * rm + opt.momentum * mean);
      rv = static_cast<T>((1 - opt.momentum) * rv + opt.momentum * unbiased);
    } else {
      mean = running_mean.data()[c];
      var = running_var.data()[c];
    }
    const double istd = 1.0 / std::sqrt(var + opt.eps);
    inv_std[c] = static_cast<T>(istd);
    const T g = gamma.data()[c], bt = beta.data()[c];
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < HW; ++i) {
        const std::size_t j = (b * C + c) * HW + i;
        xhat[j] = static_cast<T>((x[j] - mean) * istd);
        out[j] = g * xhat[j] + bt;
      }
  }
  return Tensor<T>::make_result(
      input.shape(), std::move(out), {input, gamma, beta},
      [B, C, HW, count, mode, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          detail::Node<T>& self) {
        auto& in = *self.parents[0];
        auto& gm = *self.parents[1];
        auto& bt = *self.parents[2];
        if (in.requires_grad) in.ensure_grad();
        if (gm.requires_grad) gm.ensure_grad();
        if (bt.requires_grad) bt.ensure_grad();
        const T* dy = self.grad.data();
        for (std::size_t c = 0; c < C; ++c) {
          T sum_dy = 0, sum_dy_xhat = 0;
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t i = 0; i < HW; ++i) {
              const std::size_t j = (b * C + c) * HW + i;
              sum_dy += dy[j];
              sum_dy_xhat += dy[j] * xhat[j];
            }
          if (gm.requires_grad) gm.grad[c] += sum_dy_xhat;
          if (bt.requires_grad) bt.grad[c] += sum_dy;
          if (!in.requires_grad) continue;
          const T g = gm.value[c];
          if (mode == Mode::Eval) {
            for (std::size_t b = 0; b < B; ++b)
              for (std::size_t i = 0; i < HW; ++i) {
                const std::size_t j = (b * C + c) * HW + i;
                in.grad[j] += dy[j] * g * inv_std[c];
              }
            continue;
          }
          const T n = static_cast<T>(count);
          const T scale = g * inv_std[c] / n;
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t i = 0; i < HW; ++i) {
              const std::size_t j = (b * C + c) * HW + i;
              in.grad[j] += scale * (n * dy[j] - sum_dy - xhat[j] * sum_dy_xhat);
            }
        }
      },
      "batchnorm2d");
}

template <typename T>
Tensor<T> relu(const Tensor<T>& input) {
  std::vector<T> out(input.numel());
  const T* x = input.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] < T(0) ? T(0) : x[i];
  return Tensor<T>::make_result(
      input.shape(), std::move(out), {input},
      [](detail::Node<T>& self) {
        auto& in = *self.parents[0];
        in.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          in.grad[i] += in.value[i] > T(0) ? self.grad[i] : T(0);
      },
      "relu");
}

template <typename T>
T stable_sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& input) {
  std::vector<T> out(input.numel());
  const T* x = input.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = stable_sigmoid(x[i]);
  auto y = out;
  return Tensor<T>::make_result(
      input.shape(), std::move(out), {input},
      [y = std::move(y)](detail::Node<T>& self) {
        auto& in = *self.parents[0];
        in.ensure_grad();
        for (std::size_t i = 0; i < y.size(); ++i) in.grad[i] += self.grad[i] * y[i] * (T(1) - y[i]);
      },
      "sigmoid");
}

enum class Activation { Relu, Sigmoid };

template <typename T>
Tensor<T> activation(const Tensor<T>& input, Activation kind) {
  return kind == Activation::Relu ? relu(input) : sigmoid(input);
}

/// Softmax over all H*W positions of each sample. Input must have one channel.
template <typename T>
Tensor<T> spatial_softmax(const Tensor<T>& input) {
  detail::require_rank4(input.shape(), "spatial_softmax");
  if (input.dim(1) != 1) {
    throw ShapeError("spatial_softmax: expected a single channel, got " +
                     std::to_string(input.dim(1)) + "; reduce channels first");
  }
  const auto B = input.dim(0), HW = input.dim(2) * input.dim(3);
  std::vector<T> out(input.numel());
  const T* x = input.data().data();
  for (std::size_t b = 0; b < B; ++b) {
    const T* xb = x + b * HW;
    T* yb = out.data() + b * HW;
    const T mx = *std::max_element(xb, xb + HW);
    double s = 0;
    for (std::size_t i = 0; i < HW; ++i) {
      yb[i] = std::exp(xb[i] - mx);
      s += yb[i];
    }
    for (std::size_t i = 0; i < HW; ++i) yb[i] = static_cast<T>(yb[i] / s);
  }
  auto y = out;
  return Tensor<T>::make_result(
      input.shape(), std::move(out), {input},
      [B, HW, y = std::move(y)](detail::Node<T>& self) {
        auto& in = *self.parents[0];
        in.ensure_grad();
        for (std::size_t b = 0; b < B; ++b) {
          T dot = 0;
          for (std::size_t i = 0; i < HW; ++i) dot += self.grad[b * HW + i] * y[b * HW + i];
          for (std::size_t i = 0; i < HW; ++i) {
            const std::size_t j = b * HW + i;
            in.grad[j] += y[j] * (self.grad[j] - dot);
          }
        }
      },
      "spatial_softmax");
}

/// Per-position max or mean across channels: [B,C,H,W] -> [B,1,H,W].
template <typename T>
Tensor<T> channel_reduce(const Tensor<T>& input, PoolKind kind) {
  detail::require_rank4(input.shape(), "channel_reduce");
  const auto B = input.dim(0), C = input.dim(1), HW = input.dim(2) * input.dim(3);
  std::vector<T> out(B * HW);
  std::vector<std::uint32_t> arg(kind == PoolKind::Max ? out.size() : 0);
  const T* x = input.data().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < HW; ++i) {
      if (kind == PoolKind::Max) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < C; ++c)
          if (x[(b * C + c) * HW + i] > x[(b * C + best) * HW + i]) best = c;
        out[b * HW + i] = x[(b * C + best) * HW + i];
        arg[b * HW + i] = static_cast<std::uint32_t>(best);
      } else {
        T s = 0;
        for (std::size_t c = 0; c < C; ++c) s += x[(b * C + c) * HW + i];
        out[b * HW + i] = s / static_cast<T>(C);
      }
    }
  return Tensor<T>::make_result(
      {B, 1, input.dim(2), input.dim(3)}, std::move(out), {input},
      [B, C, HW, kind, arg = std::move(arg)](detail::Node<T>& self) {
        auto& in = *self.parents[0];
        in.ensure_grad();
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t i = 0; i < HW; ++i) {
            const T g = self.grad[b * HW + i];
            if (kind == PoolKind::Max) {
              in.grad[(b * C + arg[b * HW + i]) * HW + i] += g;
            } else {
              for (std::size_t c = 0; c < C; ++c) in.grad[(b * C + c) * HW + i] += g / static_cast<T>(C);
            }
          }
      },
      kind == PoolKind::Max ? "channel_max" : "channel_avg");
}

enum class Elementwise { Add, Sub, Mul };

template <typename T>
Tensor<T> elementwise(const Tensor<T>& a, const Tensor<T>& b, Elementwise kind) {
  detail::require_same(a.shape(), b.shape(), "elementwise");
  std::vector<T> out(a.numel());
  const T* x = a.data().data();
  const T* y = b.data().data();
  switch (kind) {
    case Elementwise::Add:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
      break;
    case Elementwise::Sub:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
      break;
    case Elementwise::Mul:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
      break;
  }
  return Tensor<T>::make_result(
      a.shape(), std::move(out), {a, b},
      [kind](detail::Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        const auto n = self.grad.size();
        if (pa.requires_grad) {
          pa.ensure_grad();
          if (kind == Elementwise::Mul) {
            for (std::size_t i = 0; i < n; ++i) pa.grad[i] += self.grad[i] * pb.value[i];
          } else {
            for (std::size_t i = 0; i < n; ++i) pa.grad[i] += self.grad[i];
          }
        }
        if (pb.requires_grad) {
          pb.ensure_grad();
          if (kind == Elementwise::Mul) {
            for (std::size_t i = 0; i < n; ++i) pb.grad[i] += self.grad[i] * pa.value[i];
          } else if (kind == Elementwise::Sub) {
            for (std::size_t i = 0; i < n; ++i) pb.grad[i] -= self.grad[i];
          } else {
            for (std::size_t i = 0; i < n; ++i) pb.grad[i] += self.grad[i];
          }
        }
      },
      kind == Elementwise::Add ? "add" : kind == Elementwise::Sub ? "sub" : "mul");
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise(a, b, Elementwise::Add);
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise(a, b, Elementwise::Sub);
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise(a, b, Elementwise::Mul);
}

/// x[B,C,H,W] * gate[B,1,H,W], the gate broadcast across channels.
template <typename T>
Tensor<T> mul_channel_broadcast(const Tensor<T>& x, const Tensor<T>& gate) {
  detail::require_rank4(x.shape(), "mul_channel_broadcast");
  detail::require_rank4(gate.shape(), "mul_channel_broadcast");
  const auto B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (gate.dim(0) != B || gate.dim(1) != 1 || gate.dim(2) != x.dim(2) || gate.dim(3) != x.dim(3)) {
    throw ShapeError("mul_channel_broadcast: gate " + shape_str(gate.shape()) +
                     " does not broadcast over " + shape_str(x.shape()));
  }
  std::vector<T> out(x.numel());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < HW; ++i)
        out[(b * C + c) * HW + i] = x.data()[(b * C + c) * HW + i] * gate.data()[b * HW + i];
  return Tensor<T>::make_result(
      x.shape(), std::move(out), {x, gate},
      [B, C, HW](detail::Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        if (px.requires_grad) px.ensure_grad();
        if (pg.requires_grad) pg.ensure_grad();
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < HW; ++i) {
              const std::size_t j = (b * C + c) * HW + i;
              if (px.requires_grad) px.grad[j] += self.grad[j] * pg.value[b * HW + i];
              if (pg.requires_grad) pg.grad[b * HW + i] += self.grad[j] * px.value[j];
            }
      },
      "mul_channel_broadcast");
}

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  for (const auto& p : parts) detail::require_rank4(p.shape(), "concat_channels");
  const auto B = parts[0].dim(0), H = parts[0].dim(2), W = parts[0].dim(3), HW = H * W;
  std::size_t C = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    if (p.dim(0) != B || p.dim(2) != H || p.dim(3) != W) {
      throw ShapeError("concat_channels: " + shape_str(p.shape()) + " is not aligned with " +
                       shape_str(parts[0].shape()));
    }
    widths.push_back(p.dim(1));
    C += p.dim(1);
  }
  std::vector<T> out(B * C * HW);
  for (std::size_t b = 0; b < B; ++b) {
    std::size_t off = 0;
    for (const auto& p : parts) {
      const std::size_t n = p.dim(1) * HW;
      std::copy_n(p.data().data() + b * n, n, out.data() + (b * C + off) * HW);
      off += p.dim(1);
    }
  }
  return Tensor<T>::make_result(
      {B, C, H, W}, std::move(out), parts,
      [B, C, HW, widths](detail::Node<T>& self) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
          auto& p = *self.parents[k];
          if (p.requires_grad) {
            p.ensure_grad();
            const std::size_t n = widths[k] * HW;
            for (std::size_t b = 0; b < B; ++b) {
              const T* src = self.grad.data() + (b * C + off) * HW;
              T* dst = p.grad.data() + b * n;
              for (std::size_t i = 0; i < n; ++i) dst[i] += src[i];
            }
          }
          off += widths[k];
        }
      },
      "concat_channels");
}

/// Stacks tensors along the batch axis.
template <typename T>
Tensor<T> concat_batch(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_batch: no inputs");
  Shape s = parts[0].shape();
  std::size_t B = 0;
  std::vector<std::size_t> sizes;
  for (const auto& p : parts) {
    Shape q = p.shape();
    if (q.size() != s.size()) throw ShapeError("concat_batch: rank mismatch");
    for (std::size_t i = 1; i < s.size(); ++i)
      if (q[i] != s[i]) {
        throw ShapeError("concat_batch: " + shape_str(q) + " is not aligned with " + shape_str(s));
      }
    B += q[0];
    sizes.push_back(p.numel());
  }
  s[0] = B;
  std::vector<T> out;
  out.reserve(shape_numel(s));
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return Tensor<T>::make_result(
      s, std::move(out), parts,
      [sizes](detail::Node<T>& self) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < sizes.size(); ++k) {
          auto& p = *self.parents[k];
          if (p.requires_grad) {
            p.ensure_grad();
            for (std::size_t i = 0; i < sizes[k]; ++i) p.grad[i] += self.grad[off + i];
          }
          off += sizes[k];
        }
      },
      "concat_batch");
}

/// Rows [begin, begin+count) of the batch axis.
template <typename T>
Tensor<T> slice_batch(const Tensor<T>& input, std::size_t begin, std::size_t count) {
  if (begin + count > input.dim(0)) {
    throw ShapeError("slice_batch: range [" + std::to_string(begin) + "," +
                     std::to_string(begin + count) + ") exceeds batch " +
                     std::to_string(input.dim(0)));
  }
  Shape s = input.shape();
  const std::size_t per = input.numel() / s[0];
  s[0] = count;
  std::vector<T> out(input.data().begin() + begin * per,
                     input.data().begin() + (begin + count) * per);
  return Tensor<T>::make_result(
      s, std::move(out), {input},
      [off = begin * per](detail::Node<T>& self) {
        auto& in = *self.parents[0];
        in.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) in.grad[off + i] += self.grad[i];
      },
      "slice_batch");
}

template <typename T>
Tensor<T> sum(const Tensor<T>& input) {
  double s = 0;
  for (T v : input.data()) s += v;
  return Tensor<T>::make_result(
      {1}, {static_cast<T>(s)}, {input},
      [](detail::Node<T>& self) {
        auto& in = *self.parents[0];
        in.ensure_grad();
        for (auto& g : in.grad) g += self.grad[0];
      },
      "sum");
}

template <typename T>
Tensor<T> scale(const Tensor<T>& input, T factor) {
  std::vector<T> out(input.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = input.data()[i] * factor;
  return Tensor<T>::make_result(
      input.shape(), std::move(out), {input},
      [factor](detail::Node<T>& self) {
        auto& in = *self.parents[0];
        in.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) in.grad[i] += self.grad[i] * factor;
      },
      "scale");
}

/// sum_k weights[k] * terms[k] over scalar terms.
template <typename T>
Tensor<T> weighted_sum(const std::vector<Tensor<T>>& terms, const std::vector<double>& weights) {
  if (terms.size() != weights.size() || terms.empty()) {
    throw ShapeError("weighted_sum: need one weight per term");
  }
  double s = 0;
  for (std::size_t k = 0; k < terms.size(); ++k) s += weights[k] * static_cast<double>(terms[k].item());
  return Tensor<T>::make_result(
      {1}, {static_cast<T>(s)}, terms,
      [weights](detail::Node<T>& self) {
        for (std::size_t k = 0; k < weights.size(); ++k) {
          auto& p = *self.parents[k];
          if (!p.requires_grad) continue;
          p.ensure_grad();
          p.grad[0] += self.grad[0] * static_cast<T>(weights[k]);
        }
      },
      "weighted_sum");
}

/// Mean binary cross-entropy evaluated from logits:
/// max(x,0) - x*y + log(1 + exp(-|x|)).
template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const Tensor<T>& target) {
  detail::require_same(logits.shape(), target.shape(), "bce_with_logits");
  const std::size_t n = logits.numel();
  double s = 0;
  const T* x = logits.data().data();
  const T* y = target.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    const double xi = x[i];
    s += std::max(xi, 0.0) - xi * y[i] + std::log1p(std::exp(-std::abs(xi)));
  }
  return Tensor<T>::make_result(
      {1}, {static_cast<T>(s / static_cast<double>(n))}, {logits, target},
      [n](detail::Node<T>& self) {
        auto& lg = *self.parents[0];
        auto& tg = *self.parents[1];
        const T g = self.grad[0] / static_cast<T>(n);
        if (lg.requires_grad) {
          lg.ensure_grad();
          for (std::size_t i = 0; i < n; ++i)
            lg.grad[i] += g * (stable_sigmoid(lg.value[i]) - tg.value[i]);
        }
        if (tg.requires_grad) {
          tg.ensure_grad();
          for (std::size_t i = 0; i < n; ++i) tg.grad[i] -= g * lg.value[i];
        }
      },
      "bce_with_logits");
}

/// Soft Dice loss 1 - (2*sum(p*y) + eps) / (sum(p) + sum(y) + eps), computed
/// per (sample, channel) map and averaged.
template <typename T>
Tensor<T> soft_dice_loss(const Tensor<T>& prob, const Tensor<T>& target, double eps = 1.0) {
  detail::require_same(prob.shape(), target.shape(), "soft_dice_loss");
  detail::require_rank4(prob.shape(), "soft_dice_loss");
  const auto maps = prob.dim(0) * prob.dim(1), HW = prob.dim(2) * prob.dim(3);
  std::vector<double> inter(maps), denom(maps);
  double loss = 0;
  for (std::size_t m = 0; m < maps; ++m) {
    double i = 0, d = 0;
    for (std::size_t k = 0; k < HW; ++k) {
      const double p = prob.data()[m * HW + k], y = target.data()[m * HW + k];
      i += p * y;
      d += p + y;
    }
    inter[m] = i;
    denom[m] = d;
    loss += 1.0 - (2.0 * i + eps) / (d + eps);
  }
  return Tensor<T>::make_result(
      {1}, {static_cast<T>(loss / static_cast<double>(maps))}, {prob, target},
      [maps, HW, eps, inter = std::move(inter), denom = std::move(denom)](detail::Node<T>& self) {
        auto& pp = *self.parents[0];
        auto& tg = *self.parents[1];
        const double g = static_cast<double>(self.grad[0]) / static_cast<double>(maps);
        for (std::size_t m = 0; m < maps; ++m) {
          const double num = 2.0 * inter[m] + eps, den = denom[m] + eps;
          // d/dp_k [-(num/den)] = -(2 y_k den - num) / den^2
          for (std::size_t k = 0; k < HW; ++k) {
            const std::size_t j = m * HW + k;
            if (pp.requires_grad) {
              pp.ensure_grad();
              pp.grad[j] += static_cast<T>(-g * (2.0 * tg.value[j] * den - num) / (den * den));
            }
            if (tg.requires_grad) {
              tg.ensure_grad();
              tg.grad[j] += static_cast<T>(-g * (2.0 * pp.value[j] * den - num) / (den * den));
            }
          }
        }
      },
      "soft_dice_loss");
}

}  // namespace lgsa
