#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "serpent/detail/gemm.hpp"
#include "serpent/tensor.hpp"

// Differentiable primitives shared by every layer. Each op computes its
// forward eagerly and records a closure that accumulates input gradients.

namespace serpent {

enum class PoolKind { kAvg, kMax };
enum class Activation { kRelu, kSigmoid, kTanh, kGelu };
enum class PadMode { kZero, kReplicate };

namespace detail {

inline int conv_out_size(int in, int k, int stride, int pad) { return (in + 2 * pad - k) / stride + 1; }

template <typename T>
void im2col(const T* x, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo, T* col) {
  const std::size_t S = static_cast<std::size_t>(Ho) * Wo;
  for (int c = 0; c < C; ++c)
    for (int ki = 0; ki < k; ++ki)
      for (int kj = 0; kj < k; ++kj) {
        T* row = col + (static_cast<std::size_t>(c * k + ki) * k + kj) * S;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + ki;
          T* dst = row + static_cast<std::size_t>(oy) * Wo;
          if (iy < 0 || iy >= H) {
            std::fill(dst, dst + Wo, T(0));
            continue;
          }
          const T* src = x + (static_cast<std::size_t>(c) * H + iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride - pad + kj;
            dst[ox] = (ix >= 0 && ix < W) ? src[ix] : T(0);
          }
        }
      }
}

template <typename T>
void col2im(const T* col, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo, T* dx) {
  const std::size_t S = static_cast<std::size_t>(Ho) * Wo;
  for (int c = 0; c < C; ++c)
    for (int ki = 0; ki < k; ++ki)
      for (int kj = 0; kj < k; ++kj) {
        const T* row = col + (static_cast<std::size_t>(c * k + ki) * k + kj) * S;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + ki;
          if (iy < 0 || iy >= H) continue;
          T* dst = dx + (static_cast<std::size_t>(c) * H + iy) * W;
          const T* src = row + static_cast<std::size_t>(oy) * Wo;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride - pad + kj;
            if (ix >= 0 && ix < W) dst[ix] += src[ox];
          }
        }
      }
}

template <typename T>
T sigmoid_scalar(T v) {
  return v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
}

}  // namespace detail

/// 2-D cross-correlation with zero padding. `bias` may be undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, int stride, int padding) {
  detail::require_rank(input.shape(), 4, "conv2d input");
  detail::require_rank(weight.shape(), 4, "conv2d weight");
  const int N = input.dim(0), Cin = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int Cout = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != Cin || weight.dim(3) != k)
    detail::contract_fail("conv2d: shape mismatch input " + input.shape().str() + " weight " + weight.shape().str());
  if (bias.defined() && !(bias.shape() == Shape{Cout}))
    detail::contract_fail("conv2d: bias shape " + bias.shape().str() + " for weight " + weight.shape().str());
  detail::require(stride >= 1 && padding >= 0, "conv2d: stride must be >= 1 and padding >= 0");
  const int Ho = detail::conv_out_size(H, k, stride, padding);
  const int Wo = detail::conv_out_size(W, k, stride, padding);
  detail::require(Ho >= 1 && Wo >= 1, "conv2d: kernel larger than padded input " + input.shape().str());

  const int P = Cin * k * k;
  const int S = Ho * Wo;
  const bool direct = (k == 1 && stride == 1 && padding == 0);
  std::vector<T> out(static_cast<std::size_t>(N) * Cout * S);
  std::vector<T> col(direct ? 0 : static_cast<std::size_t>(P) * S);
  const T* xd = input.data().data();
  const T* wd = weight.data().data();
  for (int n = 0; n < N; ++n) {
    const T* xn = xd + static_cast<std::size_t>(n) * Cin * H * W;
    T* yn = out.data() + static_cast<std::size_t>(n) * Cout * S;
    if (bias.defined())
      for (int o = 0; o < Cout; ++o) std::fill(yn + static_cast<std::size_t>(o) * S, yn + static_cast<std::size_t>(o + 1) * S, bias.data()[o]);
    else
      std::fill(yn, yn + static_cast<std::size_t>(Cout) * S, T(0));
    const T* cn = xn;
    if (!direct) {
      detail::im2col(xn, Cin, H, W, k, stride, padding, Ho, Wo, col.data());
      cn = col.data();
    }
    detail::gemm_nn(Cout, S, P, wd, cn, yn);
  }

  return Tensor<T>::make_result(
      Shape{N, Cout, Ho, Wo}, std::move(out), {input, weight, bias},
      [=](detail::Node<T>& self) {
        const T* gy = self.grad.data();
        const T* xv = input.data().data();
        std::vector<T> colbuf(static_cast<std::size_t>(P) * S);
        std::vector<T> colT(static_cast<std::size_t>(S) * P);
        const std::vector<T> wT = weight.requires_grad() || input.requires_grad()
                                      ? detail::transposed(Cout, P, weight.data().data())
                                      : std::vector<T>{};
        T* gw = weight.requires_grad() ? weight.node()->grad_buffer() : nullptr;
        T* gb = (bias.defined() && bias.requires_grad()) ? bias.node()->grad_buffer() : nullptr;
        T* gx = input.requires_grad() ? input.node()->grad_buffer() : nullptr;
        for (int n = 0; n < N; ++n) {
          const T* gyn = gy + static_cast<std::size_t>(n) * Cout * S;
          if (gb)
            for (int o = 0; o < Cout; ++o) {
              T acc = 0;
              const T* row = gyn + static_cast<std::size_t>(o) * S;
              for (int s = 0; s < S; ++s) acc += row[s];
              gb[o] += acc;
            }
          if (gw) {
            const T* xn = xv + static_cast<std::size_t>(n) * Cin * H * W;
            const T* cn = xn;
            if (!direct) {
              detail::im2col(xn, Cin, H, W, k, stride, padding, Ho, Wo, colbuf.data());
              cn = colbuf.data();
            }
            detail::transpose(P, S, cn, colT.data());
            detail::gemm_nn(Cout, P, S, gyn, colT.data(), gw);
          }
          if (gx) {
            T* gxn = gx + static_cast<std::size_t>(n) * Cin * H * W;
            if (direct) {
              detail::gemm_nn(P, S, Cout, wT.data(), gyn, gxn);
            } else {
              std::fill(colbuf.begin(), colbuf.end(), T(0));
              detail::gemm_nn(P, S, Cout, wT.data(), gyn, colbuf.data());
              detail::col2im(colbuf.data(), Cin, H, W, k, stride, padding, Ho, Wo, gxn);
            }
          }
        }
      });
}

/// Per-channel (groups = C) convolution, stride 1. weight is (C, 1, k, k).
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, int padding) {
  detail::require_rank(input.shape(), 4, "depthwise_conv2d input");
  const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (weight.rank() != 4 || weight.dim(0) != C || weight.dim(1) != 1 || weight.dim(2) != weight.dim(3))
    detail::contract_fail("depthwise_conv2d: shape mismatch input " + input.shape().str() + " weight " +
                          weight.shape().str());
  if (bias.defined()) detail::require_shape(bias.shape(), Shape{C}, "depthwise_conv2d bias");
  const int k = weight.dim(2);
  const int Ho = detail::conv_out_size(H, k, 1, padding), Wo = detail::conv_out_size(W, k, 1, padding);
  detail::require(Ho >= 1 && Wo >= 1, "depthwise_conv2d: kernel larger than padded input");
  std::vector<T> out(static_cast<std::size_t>(N) * C * Ho * Wo);
  const T* x = input.data().data();
  const T* w = weight.data().data();
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const T* xc = x + (static_cast<std::size_t>(n) * C + c) * H * W;
      const T* wc = w + static_cast<std::size_t>(c) * k * k;
      T* yc = out.data() + (static_cast<std::size_t>(n) * C + c) * Ho * Wo;
      const T b0 = bias.defined() ? bias.data()[c] : T(0);
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox) {
          T acc = b0;
          for (int ki = 0; ki < k; ++ki) {
            const int iy = oy - padding + ki;
            if (iy < 0 || iy >= H) continue;
            for (int kj = 0; kj < k; ++kj) {
              const int ix = ox - padding + kj;
              if (ix < 0 || ix >= W) continue;
              acc += wc[ki * k + kj] * xc[iy * W + ix];
            }
          }
          yc[oy * Wo + ox] = acc;
        }
    }
  return Tensor<T>::make_result(
      Shape{N, C, Ho, Wo}, std::move(out), {input, weight, bias}, [=](detail::Node<T>& self) {
        const T* gy = self.grad.data();
        const T* xv = input.data().data();
        const T* wv = weight.data().data();
        T* gx = input.requires_grad() ? input.node()->grad_buffer() : nullptr;
        T* gw = weight.requires_grad() ? weight.node()->grad_buffer() : nullptr;
        T* gb = (bias.defined() && bias.requires_grad()) ? bias.node()->grad_buffer() : nullptr;
        for (int n = 0; n < N; ++n)
          for (int c = 0; c < C; ++c) {
            const std::size_t xoff = (static_cast<std::size_t>(n) * C + c) * H * W;
            const T* gyc = gy + (static_cast<std::size_t>(n) * C + c) * Ho * Wo;
            for (int oy = 0; oy < Ho; ++oy)
              for (int ox = 0; ox < Wo; ++ox) {
                const T g = gyc[oy * Wo + ox];
                if (gb) gb[c] += g;
                for (int ki = 0; ki < k; ++ki) {
                  const int iy = oy - padding + ki;
                  if (iy < 0 || iy >= H) continue;
                  for (int kj = 0; kj < k; ++kj) {
                    const int ix = ox - padding + kj;
                    if (ix < 0 || ix >= W) continue;
                    if (gw) gw[static_cast<std::size_t>(c) * k * k + ki * k + kj] += g * xv[xoff + iy * W + ix];
                    if (gx) gx[xoff + iy * W + ix] += g * wv[static_cast<std::size_t>(c) * k * k + ki * k + kj];
                  }
                }
              }
          }
      });
}

/// Affine map over the last dimension: y = x W^T + b, weight (Cout, Cin).
template <typename T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
  detail::require_rank(weight.shape(), 2, "linear weight");
  const int Cout = weight.dim(0), Cin = weight.dim(1);
  const int r = input.rank();
  if (input.dim(r - 1) != Cin)
    detail::contract_fail("linear: shape mismatch input " + input.shape().str() + " weight " + weight.shape().str());
  if (bias.defined() && !(bias.shape() == Shape{Cout}))
    detail::contract_fail("linear: bias shape " + bias.shape().str() + " for weight " + weight.shape().str());
  const int R = static_cast<int>(input.numel() / static_cast<std::size_t>(std::max(Cin, 1)));
  std::vector<T> out(static_cast<std::size_t>(R) * Cout, T(0));
  if (bias.defined())
    for (int i = 0; i < R; ++i) std::copy(bias.data().begin(), bias.data().end(), out.begin() + static_cast<std::size_t>(i) * Cout);
  const std::vector<T> wT = detail::transposed(Cout, Cin, weight.data().data());
  detail::gemm_nn(R, Cout, Cin, input.data().data(), wT.data(), out.data());

  std::vector<int> dims;
  for (int i = 0; i < r - 1; ++i) dims.push_back(input.dim(i));
  dims.push_back(Cout);
  return Tensor<T>::make_result(Shape(dims.begin(), dims.end()), std::move(out), {input, weight, bias},
                                [=](detail::Node<T>& self) {
                                  const T* gy = self.grad.data();
                                  if (input.requires_grad())
                                    detail::gemm_nn(R, Cin, Cout, gy, weight.data().data(), input.node()->grad_buffer());
                                  if (weight.requires_grad()) {
                                    const std::vector<T> gyT = detail::transposed(R, Cout, gy);
                                    detail::gemm_nn(Cout, Cin, R, gyT.data(), input.data().data(),
                                                    weight.node()->grad_buffer());
                                  }
                                  if (bias.defined() && bias.requires_grad()) {
                                    T* gb = bias.node()->grad_buffer();
                                    for (int i = 0; i < R; ++i)
                                      for (int o = 0; o < Cout; ++o) gb[o] += gy[static_cast<std::size_t>(i) * Cout + o];
                                  }
                                });
}

/// 2x2 max pooling, stride 2; ties resolve to the first element in row-major order.
template <typename T>
Tensor<T> max_pool2(const Tensor<T>& input) {
  detail::require_rank(input.shape(), 4, "max_pool2");
  const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (H % 2 != 0 || W % 2 != 0) detail::contract_fail("max_pool2: odd spatial dims in " + input.shape().str());
  const int Ho = H / 2, Wo = W / 2;
  std::vector<T> out(static_cast<std::size_t>(N) * C * Ho * Wo);
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  const T* x = input.data().data();
  std::size_t o = 0;
  for (int nc = 0; nc < N * C; ++nc) {
    const std::size_t base = static_cast<std::size_t>(nc) * H * W;
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox, ++o) {
        std::size_t best = base + static_cast<std::size_t>(2 * oy) * W + 2 * ox;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const std::size_t idx = base + static_cast<std::size_t>(2 * oy + dy) * W + 2 * ox + dx;
            if (x[idx] > x[best]) best = idx;
          }
        out[o] = x[best];
        (*argmax)[o] = best;
      }
  }
  return Tensor<T>::make_result(Shape{N, C, Ho, Wo}, std::move(out), {input}, [=](detail::Node<T>& self) {
    T* gx = input.node()->grad_buffer();
    for (std::size_t i = 0; i < argmax->size(); ++i) gx[(*argmax)[i]] += self.grad[i];
  });
}

/// Per-channel spatial reduction to (N, C, 1, 1).
template <typename T>
Tensor<T> global_pool(const Tensor<T>& input, PoolKind kind) {
  detail::require_rank(input.shape(), 4, "global_pool");
  const int N = input.dim(0), C = input.dim(1);
  const std::size_t HW = static_cast<std::size_t>(input.dim(2)) * input.dim(3);
  detail::require(HW >= 1, "global_pool: empty spatial extent");
  std::vector<T> out(static_cast<std::size_t>(N) * C);
  auto argmax = std::make_shared<std::vector<std::size_t>>(kind == PoolKind::kMax ? out.size() : 0);
  const T* x = input.data().data();
  for (std::size_t nc = 0; nc < out.size(); ++nc) {
    const T* row = x + nc * HW;
    if (kind == PoolKind::kAvg) {
      T acc = 0;
      for (std::size_t i = 0; i < HW; ++i) acc += row[i];
      out[nc] = acc / static_cast<T>(HW);
    } else {
      std::size_t best = 0;
      for (std::size_t i = 1; i < HW; ++i)
        if (row[i] > row[best]) best = i;
      out[nc] = row[best];
      (*argmax)[nc] = nc * HW + best;
    }
  }
  return Tensor<T>::make_result(Shape{N, C, 1, 1}, std::move(out), {input}, [=](detail::Node<T>& self) {
    T* gx = input.node()->grad_buffer();
    for (std::size_t nc = 0; nc < self.grad.size(); ++nc) {
      if (kind == PoolKind::kAvg) {
        const T g = self.grad[nc] / static_cast<T>(HW);
        for (std::size_t i = 0; i < HW; ++i) gx[nc * HW + i] += g;
      } else {
        gx[(*argmax)[nc]] += self.grad[nc];
      }
    }
  });
}

namespace detail {

struct LerpTap {
  int lo, hi;
  double frac;
};

/// Half-pixel source taps for upsampling an axis of length `in` by `factor`.
inline std::vector<LerpTap> upsample_taps(int in, int factor) {
  std::vector<LerpTap> taps(static_cast<std::size_t>(in) * factor);
  for (int d = 0; d < in * factor; ++d) {
    double src = (d + 0.5) / factor - 0.5;
    if (src < 0) src = 0;
    int lo = static_cast<int>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    const int hi = std::min(lo + 1, in - 1);
    taps[d] = {lo, hi, src - lo};
  }
  return taps;
}

}  // namespace detail

/// Bilinear upsampling by an integer factor with half-pixel centers.
template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& input, int factor) {
  detail::require_rank(input.shape(), 4, "upsample_bilinear");
  if (factor < 2) detail::contract_fail("upsample_bilinear: factor must be >= 2, got " + std::to_string(factor));
  const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int Ho = H * factor, Wo = W * factor;
  const auto ty = detail::upsample_taps(H, factor);
  const auto tx = detail::upsample_taps(W, factor);
  std::vector<T> out(static_cast<std::size_t>(N) * C * Ho * Wo);
  const T* x = input.data().data();
  for (int nc = 0; nc < N * C; ++nc) {
    const T* src = x + static_cast<std::size_t>(nc) * H * W;
    T* dst = out.data() + static_cast<std::size_t>(nc) * Ho * Wo;
    for (int oy = 0; oy < Ho; ++oy) {
      const auto& a = ty[oy];
      const T fy = static_cast<T>(a.frac);
      for (int ox = 0; ox < Wo; ++ox) {
        const auto& b = tx[ox];
        const T fx = static_cast<T>(b.frac);
        const T top = (T(1) - fx) * src[a.lo * W + b.lo] + fx * src[a.lo * W + b.hi];
        const T bot = (T(1) - fx) * src[a.hi * W + b.lo] + fx * src[a.hi * W + b.hi];
        dst[oy * Wo + ox] = (T(1) - fy) * top + fy * bot;
      }
    }
  }
  return Tensor<T>::make_result(Shape{N, C, Ho, Wo}, std::move(out), {input}, [=](detail::Node<T>& self) {
    T* gx = input.node()->grad_buffer();
    for (int nc = 0; nc < N * C; ++nc) {
      T* g = gx + static_cast<std::size_t>(nc) * H * W;
      const T* gy = self.grad.data() + static_cast<std::size_t>(nc) * Ho * Wo;
      for (int oy = 0; oy < Ho; ++oy) {
        const auto& a = ty[oy];
        const T fy = static_cast<T>(a.frac);
        for (int ox = 0; ox < Wo; ++ox) {
          const auto& b = tx[ox];
          const T fx = static_cast<T>(b.frac);
          const T v = gy[oy * Wo + ox];
          g[a.lo * W + b.lo] += v * (T(1) - fy) * (T(1) - fx);
          g[a.lo * W + b.hi] += v * (T(1) - fy) * fx;
          g[a.hi * W + b.lo] += v * fy * (T(1) - fx);
          g[a.hi * W + b.hi] += v * fy * fx;
        }
      }
    }
  });
}

template <typename T>
Tensor<T> activation(const Tensor<T>& input, Activation kind) {
  const auto& x = input.values();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T v = x[i];
    switch (kind) {
      case Activation::kRelu: out[i] = v > T(0) ? v : T(0); break;
      case Activation::kSigmoid: out[i] = detail::sigmoid_scalar(v); break;
      case Activation::kTanh: out[i] = std::tanh(v); break;
      case Activation::kGelu: out[i] = T(0.5) * v * (T(1) + std::erf(v / std::numbers::sqrt2_v<T>)); break;
    }
  }
  return Tensor<T>::make_result(input.shape(), std::move(out), {input}, [=](detail::Node<T>& self) {
    T* gx = input.node()->grad_buffer();
    const auto& xv = input.values();
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const T g = self.grad[i];
      const T y = self.value[i];
      switch (kind) {
        case Activation::kRelu: gx[i] += xv[i] > T(0) ? g : T(0); break;
        case Activation::kSigmoid: gx[i] += g * y * (T(1) - y); break;
        case Activation::kTanh: gx[i] += g * (T(1) - y * y); break;
        case Activation::kGelu: {
          const T v = xv[i];
          const T cdf = T(0.5) * (T(1) + std::erf(v / std::numbers::sqrt2_v<T>));
          const T pdf = std::exp(T(-0.5) * v * v) / std::sqrt(T(2) * std::numbers::pi_v<T>);
          gx[i] += g * (cdf + v * pdf);
          break;
        }
      }
    }
  });
}

template <typename T> Tensor<T> relu(const Tensor<T>& x) { return activation(x, Activation::kRelu); }
template <typename T> Tensor<T> sigmoid(const Tensor<T>& x) { return activation(x, Activation::kSigmoid); }
template <typename T> Tensor<T> tanh(const Tensor<T>& x) { return activation(x, Activation::kTanh); }
template <typename T> Tensor<T> gelu(const Tensor<T>& x) { return activation(x, Activation::kGelu); }

inline constexpr double kLayerNormEps = 1e-5;

/// Normalizes each row over the last dimension, then applies gain and shift.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& input, const Tensor<T>& gain, const Tensor<T>& shift) {
  const int C = input.dim(input.rank() - 1);
  detail::require(C >= 1, "layer_norm: empty feature dimension");
  detail::require_shape(gain.shape(), Shape{C}, "layer_norm gain");
  detail::require_shape(shift.shape(), Shape{C}, "layer_norm shift");
  const std::size_t R = input.numel() / static_cast<std::size_t>(C);
  std::vector<T> out(input.numel());
  auto xhat = std::make_shared<std::vector<T>>(input.numel());
  auto inv_std = std::make_shared<std::vector<T>>(R);
  const T* x = input.data().data();
  const T* g = gain.data().data();
  const T* b = shift.data().data();
  for (std::size_t r = 0; r < R; ++r) {
    const T* row = x + r * C;
    T mean = 0;
    for (int c = 0; c < C; ++c) mean += row[c];
    mean /= static_cast<T>(C);
    T var = 0;
    for (int c = 0; c < C; ++c) var += (row[c] - mean) * (row[c] - mean);
    var /= static_cast<T>(C);
    const T is = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
    (*inv_std)[r] = is;
    for (int c = 0; c < C; ++c) {
      const T h = (row[c] - mean) * is;
      (*xhat)[r * C + c] = h;
      out[r * C + c] = h * g[c] + b[c];
    }
  }
  return Tensor<T>::make_result(input.shape(), std::move(out), {input, gain, shift}, [=](detail::Node<T>& self) {
    const T* gy = self.grad.data();
    T* gg = gain.requires_grad() ? gain.node()->grad_buffer() : nullptr;
    T* gs = shift.requires_grad() ? shift.node()->grad_buffer() : nullptr;
    T* gx = input.requires_grad() ? input.node()->grad_buffer() : nullptr;
    const T* gv = gain.data().data();
    std::vector<T> dh(C);
    for (std::size_t r = 0; r < R; ++r) {
      const T* h = xhat->data() + r * C;
      T sum_dh = 0, sum_dh_h = 0;
      for (int c = 0; c < C; ++c) {
        const T gyc = gy[r * C + c];
        if (gg) gg[c] += gyc * h[c];
        if (gs) gs[c] += gyc;
        dh[c] = gyc * gv[c];
        sum_dh += dh[c];
        sum_dh_h += dh[c] * h[c];
      }
      if (gx) {
        const T is = (*inv_std)[r];
        for (int c = 0; c < C; ++c)
          gx[r * C + c] += is * (dh[c] - sum_dh / static_cast<T>(C) - h[c] * sum_dh_h / static_cast<T>(C));
      }
    }
  });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_shape(a.shape(), b.shape(), "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, [=](detail::Node<T>& self) {
    for (const Tensor<T>* t : {&a, &b}) {
      if (!t->requires_grad()) continue;
      T* g = t->node()->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_shape(a.shape(), b.shape(), "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, [=](detail::Node<T>& self) {
    if (a.requires_grad()) {
      T* g = a.node()->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * b.values()[i];
    }
    if (b.requires_grad()) {
      T* g = b.node()->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * a.values()[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * factor;
  return Tensor<T>::make_result(a.shape(), std::move(out), {a}, [=](detail::Node<T>& self) {
    T* g = a.node()->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

/// Copy with a new shape of equal element count.
template <typename T>
Tensor<T> reshape(const Tensor<T>& a, const Shape& shape) {
  if (shape.numel() != a.numel())
    detail::contract_fail("reshape: cannot view " + a.shape().str() + " as " + shape.str());
  return Tensor<T>::make_result(shape, a.values(), {a}, [=](detail::Node<T>& self) {
    T* g = a.node()->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

/// Border-replicating spatial padding by `pad` on every side.
template <typename T>
Tensor<T> replicate_pad(const Tensor<T>& x, int pad) {
  detail::require_rank(x.shape(), 4, "replicate_pad");
  if (pad == 0) return x;
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  detail::require(H > 0 && W > 0 && pad > 0, "replicate_pad: empty input or negative pad");
  const int Hp = H + 2 * pad, Wp = W + 2 * pad;
  std::vector<T> out(static_cast<std::size_t>(N) * C * Hp * Wp);
  auto src = [=](int i, int size) { return std::clamp(i - pad, 0, size - 1); };
  for (int nc = 0; nc < N * C; ++nc) {
    const T* in = x.data().data() + static_cast<std::size_t>(nc) * H * W;
    T* o = out.data() + static_cast<std::size_t>(nc) * Hp * Wp;
    for (int y = 0; y < Hp; ++y)
      for (int xx = 0; xx < Wp; ++xx) o[y * Wp + xx] = in[src(y, H) * W + src(xx, W)];
  }
  return Tensor<T>::make_result(Shape{N, C, Hp, Wp}, std::move(out), {x}, [=](detail::Node<T>& self) {
    T* g = x.node()->grad_buffer();
    for (int nc = 0; nc < N * C; ++nc) {
      const T* go = self.grad.data() + static_cast<std::size_t>(nc) * Hp * Wp;
      T* gi = g + static_cast<std::size_t>(nc) * H * W;
      for (int y = 0; y < Hp; ++y)
        for (int xx = 0; xx < Wp; ++xx) gi[src(y, H) * W + src(xx, W)] += go[y * Wp + xx];
    }
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = 0;
  for (T v : a.values()) acc += v;
  return Tensor<T>::make_result(Shape{1}, {acc}, {a}, [=](detail::Node<T>& self) {
    T* g = a.node()->grad_buffer();
    for (std::size_t i = 0; i < a.numel(); ++i) g[i] += self.grad[0];
  });
}

/// Scalar sum(a * weights) with constant weights; used to build generic
/// test losses whose gradient is not symmetric across elements.
template <typename T>
Tensor<T> weighted_sum(const Tensor<T>& a, std::vector<T> weights) {
  detail::require(weights.size() == a.numel(), "weighted_sum: weight count does not match " + a.shape().str());
  T acc = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) acc += a.values()[i] * weights[i];
  auto w = std::make_shared<std::vector<T>>(std::move(weights));
  return Tensor<T>::make_result(Shape{1}, {acc}, {a}, [=](detail::Node<T>& self) {
    T* g = a.node()->grad_buffer();
    for (std::size_t i = 0; i < w->size(); ++i) g[i] += self.grad[0] * (*w)[i];
  });
}

/// x (N,C,H,W) scaled by s (N,C,1,1) broadcast over space.
template <typename T>
Tensor<T> mul_channel(const Tensor<T>& x, const Tensor<T>& s) {
  detail::require_rank(x.shape(), 4, "mul_channel");
  const int N = x.dim(0), C = x.dim(1);
  const std::size_t HW = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  if (!(s.shape() == Shape{N, C, 1, 1}))
    detail::contract_fail("mul_channel: shape mismatch " + x.shape().str() + " vs " + s.shape().str());
  std::vector<T> out(x.numel());
  for (std::size_t nc = 0; nc < static_cast<std::size_t>(N) * C; ++nc)
    for (std::size_t i = 0; i < HW; ++i) out[nc * HW + i] = x.values()[nc * HW + i] * s.values()[nc];
  return Tensor<T>::make_result(x.shape(), std::move(out), {x, s}, [=](detail::Node<T>& self) {
    T* gx = x.requires_grad() ? x.node()->grad_buffer() : nullptr;
    T* gs = s.requires_grad() ? s.node()->grad_buffer() : nullptr;
    for (std::size_t nc = 0; nc < static_cast<std::size_t>(N) * C; ++nc) {
      T acc = 0;
      for (std::size_t i = 0; i < HW; ++i) {
        const T g = self.grad[nc * HW + i];
        if (gx) gx[nc * HW + i] += g * s.values()[nc];
        acc += g * x.values()[nc * HW + i];
      }
      if (gs) gs[nc] += acc;
    }
  });
}

/// x (N,C,H,W) scaled by s (N,1,H,W) broadcast over channels.
template <typename T>
Tensor<T> mul_spatial(const Tensor<T>& x, const Tensor<T>& s) {
  detail::require_rank(x.shape(), 4, "mul_spatial");
  const int N = x.dim(0), C = x.dim(1);
  const std::size_t HW = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  if (!(s.shape() == Shape{N, 1, x.dim(2), x.dim(3)}))
    detail::contract_fail("mul_spatial: shape mismatch " + x.shape().str() + " vs " + s.shape().str());
  std::vector<T> out(x.numel());
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (std::size_t i = 0; i < HW; ++i)
        out[(static_cast<std::size_t>(n) * C + c) * HW + i] =
            x.values()[(static_cast<std::size_t>(n) * C + c) * HW + i] * s.values()[n * HW + i];
  return Tensor<T>::make_result(x.shape(), std::move(out), {x, s}, [=](detail::Node<T>& self) {
    T* gx = x.requires_grad() ? x.node()->grad_buffer() : nullptr;
    T* gs = s.requires_grad() ? s.node()->grad_buffer() : nullptr;
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        for (std::size_t i = 0; i < HW; ++i) {
          const std::size_t idx = (static_cast<std::size_t>(n) * C + c) * HW + i;
          const T g = self.grad[idx];
          if (gx) gx[idx] += g * s.values()[n * HW + i];
          if (gs) gs[n * HW + i] += g * x.values()[idx];
        }
  });
}

/// x (..., C) scaled elementwise by a per-channel vector v (C).
template <typename T>
Tensor<T> mul_lastdim(const Tensor<T>& x, const Tensor<T>& v) {
  const int C = x.dim(x.rank() - 1);
  if (!(v.shape() == Shape{C}))
    detail::contract_fail("mul_lastdim: shape mismatch " + x.shape().str() + " vs " + v.shape().str());
  const std::size_t R = x.numel() / static_cast<std::size_t>(std::max(C, 1));
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c) out[r * C + c] = x.values()[r * C + c] * v.values()[c];
  return Tensor<T>::make_result(x.shape(), std::move(out), {x, v}, [=](detail::Node<T>& self) {
    T* gx = x.requires_grad() ? x.node()->grad_buffer() : nullptr;
    T* gv = v.requires_grad() ? v.node()->grad_buffer() : nullptr;
    for (std::size_t r = 0; r < R; ++r)
      for (int c = 0; c < C; ++c) {
        const T g = self.grad[r * C + c];
        if (gx) gx[r * C + c] += g * v.values()[c];
        if (gv) gv[c] += g * x.values()[r * C + c];
      }
  });
}

/// Concatenates rank-4 tensors along the channel axis.
template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  detail::require(!parts.empty(), "concat_channels: no inputs");
  const int N = parts[0].dim(0), H = parts[0].dim(2), W = parts[0].dim(3);
  int C = 0;
  for (const auto& p : parts) {
    detail::require_rank(p.shape(), 4, "concat_channels");
    if (p.dim(0) != N || p.dim(2) != H || p.dim(3) != W)
      detail::contract_fail("concat_channels: shape mismatch " + parts[0].shape().str() + " vs " + p.shape().str());
    C += p.dim(1);
  }
  const std::size_t HW = static_cast<std::size_t>(H) * W;
  std::vector<T> out(static_cast<std::size_t>(N) * C * HW);
  for (int n = 0; n < N; ++n) {
    std::size_t off = static_cast<std::size_t>(n) * C * HW;
    for (const auto& p : parts) {
      const std::size_t len = static_cast<std::size_t>(p.dim(1)) * HW;
      std::copy_n(p.data().data() + n * len, len, out.data() + off);
      off += len;
    }
  }
  return Tensor<T>::make_result(Shape{N, C, H, W}, std::move(out), parts, [=](detail::Node<T>& self) {
    for (int n = 0; n < N; ++n) {
      std::size_t off = static_cast<std::size_t>(n) * C * HW;
      for (const auto& p : parts) {
        const std::size_t len = static_cast<std::size_t>(p.dim(1)) * HW;
        if (p.requires_grad()) {
          T* g = p.node()->grad_buffer() + n * len;
          for (std::size_t i = 0; i < len; ++i) g[i] += self.grad[off + i];
        }
        off += len;
      }
    }
  });
}

/// Channel-wise mean or max map, (N,C,H,W) -> (N,1,H,W).
template <typename T>
Tensor<T> channel_reduce(const Tensor<T>& x, PoolKind kind) {
  detail::require_rank(x.shape(), 4, "channel_reduce");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  detail::require(C >= 1, "channel_reduce: no channels");
  const std::size_t HW = static_cast<std::size_t>(H) * W;
  std::vector<T> out(static_cast<std::size_t>(N) * HW);
  auto argmax = std::make_shared<std::vector<int>>(kind == PoolKind::kMax ? out.size() : 0);
  for (int n = 0; n < N; ++n)
    for (std::size_t i = 0; i < HW; ++i) {
      const T* base = x.data().data() + static_cast<std::size_t>(n) * C * HW + i;
      if (kind == PoolKind::kAvg) {
        T acc = 0;
        for (int c = 0; c < C; ++c) acc += base[c * HW];
        out[n * HW + i] = acc / static_cast<T>(C);
      } else {
        int best = 0;
        for (int c = 1; c < C; ++c)
          if (base[c * HW] > base[best * HW]) best = c;
        out[n * HW + i] = base[best * HW];
        (*argmax)[n * HW + i] = best;
      }
    }
  return Tensor<T>::make_result(Shape{N, 1, H, W}, std::move(out), {x}, [=](detail::Node<T>& self) {
    T* gx = x.node()->grad_buffer();
    for (int n = 0; n < N; ++n)
      for (std::size_t i = 0; i < HW; ++i) {
        const T g = self.grad[n * HW + i];
        T* base = gx + static_cast<std::size_t>(n) * C * HW + i;
        if (kind == PoolKind::kAvg) {
          for (int c = 0; c < C; ++c) base[c * HW] += g / static_cast<T>(C);
        } else {
          base[(*argmax)[n * HW + i] * HW] += g;
        }
      }
  });
}

/// (N,C,H,W) -> (N, H*W, C) token sequence.
template <typename T>
Tensor<T> to_tokens(const Tensor<T>& x) {
  detail::require_rank(x.shape(), 4, "to_tokens");
  const int N = x.dim(0), C = x.dim(1), L = x.dim(2) * x.dim(3);
  std::vector<T> out(x.numel());
  for (int n = 0; n < N; ++n)
    detail::transpose(C, L, x.data().data() + static_cast<std::size_t>(n) * C * L, out.data() + static_cast<std::size_t>(n) * C * L);
  return Tensor<T>::make_result(Shape{N, L, C}, std::move(out), {x}, [=](detail::Node<T>& self) {
    T* gx = x.node()->grad_buffer();
    std::vector<T> tmp(static_cast<std::size_t>(C) * L);
    for (int n = 0; n < N; ++n) {
      detail::transpose(L, C, self.grad.data() + static_cast<std::size_t>(n) * C * L, tmp.data());
      T* g = gx + static_cast<std::size_t>(n) * C * L;
      for (std::size_t i = 0; i < tmp.size(); ++i) g[i] += tmp[i];
    }
  });
}

/// (N, L, C) token sequence -> (N,C,H,W) with L = H*W.
template <typename T>
Tensor<T> from_tokens(const Tensor<T>& x, int H, int W) {
  detail::require_rank(x.shape(), 3, "from_tokens");
  const int N = x.dim(0), L = x.dim(1), C = x.dim(2);
  if (L != H * W)
    detail::contract_fail("from_tokens: token count " + std::to_string(L) + " != " + std::to_string(H) + "x" +
                          std::to_string(W));
  std::vector<T> out(x.numel());
  for (int n = 0; n < N; ++n)
    detail::transpose(L, C, x.data().data() + static_cast<std::size_t>(n) * C * L, out.data() + static_cast<std::size_t>(n) * C * L);
  return Tensor<T>::make_result(Shape{N, C, H, W}, std::move(out), {x}, [=](detail::Node<T>& self) {
    T* gx = x.node()->grad_buffer();
    std::vector<T> tmp(static_cast<std::size_t>(C) * L);
    for (int n = 0; n < N; ++n) {
      detail::transpose(C, L, self.grad.data() + static_cast<std::size_t>(n) * C * L, tmp.data());
      T* g = gx + static_cast<std::size_t>(n) * C * L;
      for (std::size_t i = 0; i < tmp.size(); ++i) g[i] += tmp[i];
    }
  });
}

/// Row-stochastic attention probabilities softmax(q k^T / sqrt(d)) for one
/// (batch, head); q is (Lq x d), k is (Lk x d), both with row stride `ld`.
template <typename T>
void attention_probs(const T* q, const T* k, int Lq, int Lk, int d, int ld, T* probs) {
  const T inv = T(1) / std::sqrt(static_cast<T>(d));
  for (int i = 0; i < Lq; ++i) {
    T* row = probs + static_cast<std::size_t>(i) * Lk;
    T mx = -std::numeric_limits<T>::infinity();
    for (int j = 0; j < Lk; ++j) {
      T acc = 0;
      for (int e = 0; e < d; ++e) acc += q[static_cast<std::size_t>(i) * ld + e] * k[static_cast<std::size_t>(j) * ld + e];
      row[j] = acc * inv;
      mx = std::max(mx, row[j]);
    }
    T z = 0;
    for (int j = 0; j < Lk; ++j) {
      row[j] = std::exp(row[j] - mx);
      z += row[j];
    }
    for (int j = 0; j < Lk; ++j) row[j] /= z;
  }
}

/// Multi-head scaled dot-product attention over token sequences.
/// q: (N, Lq, C); k, v: (N, Lk, C); heads split C evenly.
template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, int heads) {
  detail::require_rank(q.shape(), 3, "attention q");
  detail::require_rank(k.shape(), 3, "attention k");
  detail::require_shape(v.shape(), k.shape(), "attention k/v");
  const int N = q.dim(0), Lq = q.dim(1), C = q.dim(2), Lk = k.dim(1);
  if (k.dim(0) != N || k.dim(2) != C)
    detail::contract_fail("attention: shape mismatch q " + q.shape().str() + " k " + k.shape().str());
  if (heads < 1 || C % heads != 0)
    detail::contract_fail("attention: channels " + std::to_string(C) + " not divisible by heads " + std::to_string(heads));
  const int d = C / heads;
  auto probs = std::make_shared<std::vector<T>>(static_cast<std::size_t>(N) * heads * Lq * Lk);
  std::vector<T> out(static_cast<std::size_t>(N) * Lq * C, T(0));
  for (int n = 0; n < N; ++n)
    for (int h = 0; h < heads; ++h) {
      const T* qh = q.data().data() + static_cast<std::size_t>(n) * Lq * C + h * d;
      const T* kh = k.data().data() + static_cast<std::size_t>(n) * Lk * C + h * d;
      const T* vh = v.data().data() + static_cast<std::size_t>(n) * Lk * C + h * d;
      T* p = probs->data() + (static_cast<std::size_t>(n) * heads + h) * Lq * Lk;
      attention_probs(qh, kh, Lq, Lk, d, C, p);
      for (int i = 0; i < Lq; ++i) {
        T* o = out.data() + (static_cast<std::size_t>(n) * Lq + i) * C + h * d;
        for (int j = 0; j < Lk; ++j) {
          const T pij = p[static_cast<std::size_t>(i) * Lk + j];
          for (int e = 0; e < d; ++e) o[e] += pij * vh[static_cast<std::size_t>(j) * C + e];
        }
      }
    }
  return Tensor<T>::make_result(Shape{N, Lq, C}, std::move(out), {q, k, v}, [=](detail::Node<T>& self) {
    const T inv = T(1) / std::sqrt(static_cast<T>(d));
    T* gq = q.requires_grad() ? q.node()->grad_buffer() : nullptr;
    T* gk = k.requires_grad() ? k.node()->grad_buffer() : nullptr;
    T* gv = v.requires_grad() ? v.node()->grad_buffer() : nullptr;
    std::vector<T> dp(Lk);
    for (int n = 0; n < N; ++n)
      for (int h = 0; h < heads; ++h) {
        const std::size_t qoff = static_cast<std::size_t>(n) * Lq * C + h * d;
        const std::size_t koff = static_cast<std::size_t>(n) * Lk * C + h * d;
        const T* p = probs->data() + (static_cast<std::size_t>(n) * heads + h) * Lq * Lk;
        for (int i = 0; i < Lq; ++i) {
          const T* go = self.grad.data() + qoff + static_cast<std::size_t>(i) * C;
          T dot = 0;
          for (int j = 0; j < Lk; ++j) {
            const T pij = p[static_cast<std::size_t>(i) * Lk + j];
            T acc = 0;
            for (int e = 0; e < d; ++e) {
              acc += go[e] * v.values()[koff + static_cast<std::size_t>(j) * C + e];
              if (gv) gv[koff + static_cast<std::size_t>(j) * C + e] += pij * go[e];
            }
            dp[j] = acc;
            dot += acc * pij;
          }
          for (int j = 0; j < Lk; ++j) {
            const T ds = p[static_cast<std::size_t>(i) * Lk + j] * (dp[j] - dot) * inv;
            if (ds == T(0)) continue;
            for (int e = 0; e < d; ++e) {
              if (gq) gq[qoff + static_cast<std::size_t>(i) * C + e] += ds * k.values()[koff + static_cast<std::size_t>(j) * C + e];
              if (gk) gk[koff + static_cast<std::size_t>(j) * C + e] += ds * q.values()[qoff + static_cast<std::size_t>(i) * C + e];
            }
          }
        }
      }
  });
}

}  // namespace serpent
