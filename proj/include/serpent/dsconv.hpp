#pragma once

#include <array>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "serpent/ops.hpp"
#include "serpent/params.hpp"

// Dynamic snake convolution with a pyramid offset predictor.
//
// Every output pixel samples a chain of 9 points K[t-4] .. K[t+4]. The
// center K[t] is the pixel itself; each further point is one squashed
// step (|dx|, |dy| < 1) away from its neighbour toward the center, so the
// chain is continuous and stays inside the 9x9 box around the pixel.

namespace serpent {

inline constexpr int kChainLength = 9;
inline constexpr int kChainReach = 4;
inline constexpr int kOffsetChannels = 16;
inline constexpr int kPyramidLevels = 4;

enum class SnakeAxis { kHorizontal, kVertical };

/// kFixedStraight freezes the chain to unit steps along the axis (the
/// fixed-axis baseline used in ablations); no offset parameters exist then.
enum class ChainMode { kLearned, kFixedStraight };

/// Offset channel layout: for c in 1..4, channels 4(c-1) .. 4(c-1)+3 hold
/// (dx[t+c], dy[t+c], dx[t-c], dy[t-c]).
inline constexpr int offset_channel(int c, bool forward, bool y_component) {
  return 4 * (c - 1) + (forward ? 0 : 2) + (y_component ? 1 : 0);
}

/// Coordinate channel layout for chain index j (0 = K[t-4], 4 = K[t], 8 = K[t+4]).
inline constexpr int coord_channel(int j, bool y_component) { return 2 * j + (y_component ? 1 : 0); }

template <typename T>
struct OffsetField {
  Tensor<T> raw;       ///< (N, 16, H, W) pre-squash displacements
  Tensor<T> squashed;  ///< tanh(raw), every component in (-1, 1)
};

struct ChainPoint {
  double x = 0;
  double y = 0;
};

/// Realized snake chain at one pixel, ordered K[t-4] .. K[t+4].
struct ChainCoordinates {
  std::array<ChainPoint, kChainLength> points{};
};

/// Rounding in the prefix sums can leave a point one ulp past the unit-step
/// or 9x9-box bound although every step is within [-1, 1]. Clamps `v` back,
/// then nudges it toward `prev` until both bounds hold exactly; gradients
/// ignore the correction.
template <typename T>
T snap_to_bounds(T v, T prev, T center) {
  auto outside = [&](T u) {
    const double d = static_cast<double>(u);
    return std::abs(d - static_cast<double>(prev)) > 1.0 || std::abs(d - static_cast<double>(center)) > kChainReach;
  };
  v = std::clamp(v, prev - T(1), prev + T(1));
  v = std::clamp(v, center - T(kChainReach), center + T(kChainReach));
  while (outside(v)) v = std::nextafter(v, prev);
  return v;
}

/// Prefix-sums the 8 per-step displacements outward from the center pixel
/// in both chain directions. `steps` follows the offset channel layout.
template <typename T>
ChainCoordinates iterate_chain(int h, int w, std::span<const T, kOffsetChannels> steps) {
  ChainCoordinates chain;
  chain.points[kChainReach] = {static_cast<double>(w), static_cast<double>(h)};
  double fx = 0, fy = 0, bx = 0, by = 0;
  for (int c = 1; c <= kChainReach; ++c) {
    fx += steps[offset_channel(c, true, false)];
    fy += steps[offset_channel(c, true, true)];
    bx += steps[offset_channel(c, false, false)];
    by += steps[offset_channel(c, false, true)];
    const auto& f = chain.points[kChainReach + c - 1];
    const auto& b = chain.points[kChainReach - c + 1];
    chain.points[kChainReach + c] = {snap_to_bounds<double>(w + fx, f.x, w), snap_to_bounds<double>(h + fy, f.y, h)};
    chain.points[kChainReach - c] = {snap_to_bounds<double>(w - bx, b.x, w), snap_to_bounds<double>(h - by, b.y, h)};
  }
  return chain;
}

/// Differentiable chain iteration over a whole offset field.
/// squashed (N,16,H,W) -> absolute coordinates (N,18,H,W).
template <typename T>
Tensor<T> chain_coordinates(const Tensor<T>& squashed) {
  detail::require_rank(squashed.shape(), 4, "chain_coordinates");
  const int N = squashed.dim(0), H = squashed.dim(2), W = squashed.dim(3);
  if (squashed.dim(1) != kOffsetChannels)
    detail::contract_fail("chain_coordinates: expected 16 offset channels, got " + squashed.shape().str());
  const std::size_t HW = static_cast<std::size_t>(H) * W;
  std::vector<T> out(static_cast<std::size_t>(N) * 2 * kChainLength * HW);
  const T* s = squashed.data().data();
  for (int n = 0; n < N; ++n) {
    const T* sn = s + static_cast<std::size_t>(n) * kOffsetChannels * HW;
    T* on = out.data() + static_cast<std::size_t>(n) * 2 * kChainLength * HW;
    for (int h = 0; h < H; ++h)
      for (int w = 0; w < W; ++w) {
        const std::size_t p = static_cast<std::size_t>(h) * W + w;
        T fx = 0, fy = 0, bx = 0, by = 0;
        on[coord_channel(kChainReach, false) * HW + p] = static_cast<T>(w);
        on[coord_channel(kChainReach, true) * HW + p] = static_cast<T>(h);
        for (int c = 1; c <= kChainReach; ++c) {
          fx += sn[offset_channel(c, true, false) * HW + p];
          fy += sn[offset_channel(c, true, true) * HW + p];
          bx += sn[offset_channel(c, false, false) * HW + p];
          by += sn[offset_channel(c, false, true) * HW + p];
          const T cw = static_cast<T>(w), ch = static_cast<T>(h);
          auto at = [&](int j, bool y) -> T& { return on[coord_channel(j, y) * HW + p]; };
          at(kChainReach + c, false) = snap_to_bounds<T>(cw + fx, at(kChainReach + c - 1, false), cw);
          at(kChainReach + c, true) = snap_to_bounds<T>(ch + fy, at(kChainReach + c - 1, true), ch);
          at(kChainReach - c, false) = snap_to_bounds<T>(cw - bx, at(kChainReach - c + 1, false), cw);
          at(kChainReach - c, true) = snap_to_bounds<T>(ch - by, at(kChainReach - c + 1, true), ch);
        }
      }
  }
  return Tensor<T>::make_result(
      Shape{N, 2 * kChainLength, H, W}, std::move(out), {squashed}, [=](detail::Node<T>& self) {
        T* gs = squashed.node()->grad_buffer();
        for (int n = 0; n < N; ++n) {
          const T* gc = self.grad.data() + static_cast<std::size_t>(n) * 2 * kChainLength * HW;
          T* gn = gs + static_cast<std::size_t>(n) * kOffsetChannels * HW;
          for (std::size_t p = 0; p < HW; ++p) {
            // Step c moves every point at distance >= c, so its gradient is
            // the suffix sum of coordinate gradients along that direction.
            T fx = 0, fy = 0, bx = 0, by = 0;
            for (int c = kChainReach; c >= 1; --c) {
              fx += gc[coord_channel(kChainReach + c, false) * HW + p];
              fy += gc[coord_channel(kChainReach + c, true) * HW + p];
              bx += gc[coord_channel(kChainReach - c, false) * HW + p];
              by += gc[coord_channel(kChainReach - c, true) * HW + p];
              gn[offset_channel(c, true, false) * HW + p] += fx;
              gn[offset_channel(c, true, true) * HW + p] += fy;
              gn[offset_channel(c, false, false) * HW + p] -= bx;
              gn[offset_channel(c, false, true) * HW + p] -= by;
            }
          }
        }
      });
}

namespace detail {

/// Separable bilinear taps for one fractional coordinate, clamped to the
/// grid. `live` is false when the coordinate was clamped (zero gradient).
struct BilinearAxis {
  int lo = 0, hi = 0;
  double frac = 0;
  bool live = true;
};

inline BilinearAxis bilinear_axis(double v, int size) {
  BilinearAxis a;
  const double max = static_cast<double>(size - 1);
  if (v < 0) {
    v = 0;
    a.live = false;
  } else if (v > max) {
    v = max;
    a.live = false;
  }
  a.lo = static_cast<int>(std::floor(v));
  if (a.lo > size - 1) a.lo = size - 1;
  a.hi = std::min(a.lo + 1, size - 1);
  a.frac = v - a.lo;
  return a;
}

}  // namespace detail

/// Bilinear interpolation of every channel of `feature` (batch item n) at a
/// fractional point, with border clamping. Value = sum over the 4 enclosing
/// grid points of g(x, x') g(y, y') f(x', y'), g the 1-D triangular kernel.
template <typename T>
std::vector<T> bilinear_sample(const Tensor<T>& feature, int n, ChainPoint point) {
  detail::require_rank(feature.shape(), 4, "bilinear_sample");
  if (!std::isfinite(point.x) || !std::isfinite(point.y)) detail::contract_fail("bilinear_sample: non-finite coordinate");
  const int C = feature.dim(1), H = feature.dim(2), W = feature.dim(3);
  detail::require(n >= 0 && n < feature.dim(0), "bilinear_sample: batch index out of range");
  const auto ax = detail::bilinear_axis(point.x, W);
  const auto ay = detail::bilinear_axis(point.y, H);
  std::vector<T> out(C);
  for (int c = 0; c < C; ++c) {
    const T* f = feature.data().data() + (static_cast<std::size_t>(n) * C + c) * H * W;
    const T fx = static_cast<T>(ax.frac), fy = static_cast<T>(ay.frac);
    const T top = (T(1) - fx) * f[ay.lo * W + ax.lo] + fx * f[ay.lo * W + ax.hi];
    const T bot = (T(1) - fx) * f[ay.hi * W + ax.lo] + fx * f[ay.hi * W + ax.hi];
    out[c] = (T(1) - fy) * top + fy * bot;
  }
  return out;
}

/// Samples `input` at K points per pixel. coords is (N, 2K, H, W) holding
/// absolute (x, y) pairs; output is (N, Cin*K, H, W) with channel c*K + j.
/// Differentiable with respect to both the input and the coordinates.
template <typename T>
Tensor<T> deform_sample(const Tensor<T>& input, const Tensor<T>& coords) {
  detail::require_rank(input.shape(), 4, "deform_sample input");
  detail::require_rank(coords.shape(), 4, "deform_sample coords");
  const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (coords.dim(0) != N || coords.dim(2) != H || coords.dim(3) != W || coords.dim(1) % 2 != 0)
    detail::contract_fail("deform_sample: shape mismatch input " + input.shape().str() + " coords " + coords.shape().str());
  const int K = coords.dim(1) / 2;
  const std::size_t HW = static_cast<std::size_t>(H) * W;
  for (T v : coords.values())
    if (!std::isfinite(v)) detail::contract_fail("deform_sample: non-finite coordinate");

  std::vector<T> out(static_cast<std::size_t>(N) * C * K * HW);
  const T* x = input.data().data();
  const T* cd = coords.data().data();
  for (int n = 0; n < N; ++n)
    for (int j = 0; j < K; ++j) {
      const T* px = cd + (static_cast<std::size_t>(n) * 2 * K + 2 * j) * HW;
      const T* py = px + HW;
      for (std::size_t p = 0; p < HW; ++p) {
        const auto ax = detail::bilinear_axis(px[p], W);
        const auto ay = detail::bilinear_axis(py[p], H);
        const T fx = static_cast<T>(ax.frac), fy = static_cast<T>(ay.frac);
        const T w00 = (T(1) - fy) * (T(1) - fx), w01 = (T(1) - fy) * fx;
        const T w10 = fy * (T(1) - fx), w11 = fy * fx;
        const std::size_t i00 = static_cast<std::size_t>(ay.lo) * W + ax.lo, i01 = static_cast<std::size_t>(ay.lo) * W + ax.hi;
        const std::size_t i10 = static_cast<std::size_t>(ay.hi) * W + ax.lo, i11 = static_cast<std::size_t>(ay.hi) * W + ax.hi;
        for (int c = 0; c < C; ++c) {
          const T* f = x + (static_cast<std::size_t>(n) * C + c) * HW;
          out[((static_cast<std::size_t>(n) * C + c) * K + j) * HW + p] = w00 * f[i00] + w01 * f[i01] + w10 * f[i10] + w11 * f[i11];
        }
      }
    }

  return Tensor<T>::make_result(
      Shape{N, C * K, H, W}, std::move(out), {input, coords}, [=](detail::Node<T>& self) {
        T* gx = input.requires_grad() ? input.node()->grad_buffer() : nullptr;
        T* gc = coords.requires_grad() ? coords.node()->grad_buffer() : nullptr;
        const T* xv = input.data().data();
        const T* cv = coords.data().data();
        for (int n = 0; n < N; ++n)
          for (int j = 0; j < K; ++j) {
            const std::size_t cx_off = (static_cast<std::size_t>(n) * 2 * K + 2 * j) * HW;
            for (std::size_t p = 0; p < HW; ++p) {
              const auto ax = detail::bilinear_axis(cv[cx_off + p], W);
              const auto ay = detail::bilinear_axis(cv[cx_off + HW + p], H);
              const T fx = static_cast<T>(ax.frac), fy = static_cast<T>(ay.frac);
              const std::size_t i00 = static_cast<std::size_t>(ay.lo) * W + ax.lo, i01 = static_cast<std::size_t>(ay.lo) * W + ax.hi;
              const std::size_t i10 = static_cast<std::size_t>(ay.hi) * W + ax.lo, i11 = static_cast<std::size_t>(ay.hi) * W + ax.hi;
              T dx = 0, dy = 0;
              for (int c = 0; c < C; ++c) {
                const T g = self.grad[((static_cast<std::size_t>(n) * C + c) * K + j) * HW + p];
                if (g == T(0)) continue;
                const std::size_t base = (static_cast<std::size_t>(n) * C + c) * HW;
                if (gx) {
                  gx[base + i00] += g * (T(1) - fy) * (T(1) - fx);
                  gx[base + i01] += g * (T(1) - fy) * fx;
                  gx[base + i10] += g * fy * (T(1) - fx);
                  gx[base + i11] += g * fy * fx;
                }
                if (gc) {
                  const T* f = xv + base;
                  dx += g * ((T(1) - fy) * (f[i01] - f[i00]) + fy * (f[i11] - f[i10]));
                  dy += g * ((T(1) - fx) * (f[i10] - f[i00]) + fx * (f[i11] - f[i01]));
                }
              }
              if (gc) {
                if (ax.live) gc[cx_off + p] += dx;
                if (ay.live) gc[cx_off + HW + p] += dy;
              }
            }
          }
      });
}

/// Parameters and forward pass of one enhanced DSConv layer.
template <typename T>
class DSConv {
 public:
  /// Steps at initialization reach tanh(kInitStepLogit) = 0.95 along the axis.
  static constexpr double kInitStepLogit = 1.8317808230648225;  // atanh(0.95)

  DSConv(int in_channels, int out_channels, SnakeAxis axis, std::uint64_t seed, std::string name,
         ChainMode mode = ChainMode::kLearned)
      : in_(in_channels), out_(out_channels), axis_(axis), mode_(mode), name_(std::move(name)) {
    detail::require(in_channels >= 1 && out_channels >= 1, "DSConv: channel counts must be positive");
    if (mode_ == ChainMode::kLearned) {
      for (int c = 1; c <= kPyramidLevels; ++c) {
        const int k = 2 * c + 1;
        pyramid_weight_[c - 1] = Tensor<T>::zeros(Shape{4, in_, k, k}, true);
        std::vector<T> bias(4, T(0));
        const bool y_axis = axis_ == SnakeAxis::kVertical;
        bias[y_axis ? 1 : 0] = static_cast<T>(kInitStepLogit);  // forward step
        bias[y_axis ? 3 : 2] = static_cast<T>(kInitStepLogit);  // backward step
        pyramid_bias_[c - 1] = Tensor<T>::from(Shape{4}, std::move(bias), true);
      }
    }
    chain_weight_ = uniform_param<T>(Shape{out_, in_, kChainLength}, he_bound(in_ * kChainLength), seed,
                                     join_name(name_, "chain.weight"));
    chain_bias_ = Tensor<T>::zeros(Shape{out_}, true);
  }

  int in_channels() const { return in_; }
  int out_channels() const { return out_; }
  SnakeAxis axis() const { return axis_; }
  ChainMode mode() const { return mode_; }

  /// Pyramid level c (1..4) uses a (2c+1) x (2c+1) kernel with padding c.
  Tensor<T>& pyramid_weight(int level) { return pyramid_weight_.at(level - 1); }
  Tensor<T>& pyramid_bias(int level) { return pyramid_bias_.at(level - 1); }
  const Tensor<T>& pyramid_weight(int level) const { return pyramid_weight_.at(level - 1); }
  const Tensor<T>& pyramid_bias(int level) const { return pyramid_bias_.at(level - 1); }
  Tensor<T>& chain_weight() { return chain_weight_; }
  Tensor<T>& chain_bias() { return chain_bias_; }
  const Tensor<T>& chain_weight() const { return chain_weight_; }
  const Tensor<T>& chain_bias() const { return chain_bias_; }

  void collect(ParamList<T>& out) const {
    if (mode_ == ChainMode::kLearned)
      for (int c = 1; c <= kPyramidLevels; ++c) {
        const std::string level = "pyramid." + std::to_string(2 * c + 1);
        out.push_back({join_name(name_, level + ".weight"), pyramid_weight_[c - 1]});
        out.push_back({join_name(name_, level + ".bias"), pyramid_bias_[c - 1]});
      }
    out.push_back({join_name(name_, "chain.weight"), chain_weight_});
    out.push_back({join_name(name_, "chain.bias"), chain_bias_});
  }

  OffsetField<T> offsets(const Tensor<T>& input) const {
    detail::require_rank(input.shape(), 4, "DSConv input");
    if (input.dim(1) != in_)
      detail::contract_fail("DSConv: input channels " + input.shape().str() + " do not match pyramid kernel Cin " +
                            std::to_string(in_));
    if (mode_ == ChainMode::kFixedStraight) {
      const int N = input.dim(0), H = input.dim(2), W = input.dim(3);
      const std::size_t HW = static_cast<std::size_t>(H) * W;
      std::vector<T> steps(static_cast<std::size_t>(N) * kOffsetChannels * HW, T(0));
      const bool y_axis = axis_ == SnakeAxis::kVertical;
      for (int n = 0; n < N; ++n)
        for (int c = 1; c <= kChainReach; ++c)
          for (bool fwd : {true, false}) {
            T* ch = steps.data() + (static_cast<std::size_t>(n) * kOffsetChannels + offset_channel(c, fwd, y_axis)) * HW;
            std::fill(ch, ch + HW, T(1));
          }
      auto field = Tensor<T>::from(Shape{N, kOffsetChannels, H, W}, std::move(steps));
      return {field, field};
    }
    std::vector<Tensor<T>> levels;
    for (int c = 1; c <= kPyramidLevels; ++c)
      levels.push_back(conv2d(input, pyramid_weight_[c - 1], pyramid_bias_[c - 1], 1, c));
    Tensor<T> raw = concat_channels(levels);
    return {raw, tanh(raw)};
  }

  struct Trace {
    OffsetField<T> offsets;
    Tensor<T> coords;   ///< (N, 18, H, W)
    Tensor<T> samples;  ///< (N, Cin*9, H, W)
    Tensor<T> output;   ///< (N, Cout, H, W)
  };

  Trace trace(const Tensor<T>& input) const {
    Trace t;
    t.offsets = offsets(input);
    t.coords = chain_coordinates(t.offsets.squashed);
    t.samples = deform_sample(input, t.coords);
    const Tensor<T> w = reshape(chain_weight_, Shape{out_, in_ * kChainLength, 1, 1});
    t.output = conv2d(t.samples, w, chain_bias_, 1, 0);
    return t;
  }

  Tensor<T> forward(const Tensor<T>& input) const { return trace(input).output; }

 private:
  int in_, out_;
  SnakeAxis axis_;
  ChainMode mode_;
  std::string name_;
  std::array<Tensor<T>, kPyramidLevels> pyramid_weight_;
  std::array<Tensor<T>, kPyramidLevels> pyramid_bias_;
  Tensor<T> chain_weight_;
  Tensor<T> chain_bias_;
};

template <typename T>
OffsetField<T> compute_pyramid_offsets(const Tensor<T>& input, const DSConv<T>& params) {
  return params.offsets(input);
}

template <typename T>
Tensor<T> dsconv_forward(const Tensor<T>& input, const DSConv<T>& params) {
  return params.forward(input);
}

}  // namespace serpent
