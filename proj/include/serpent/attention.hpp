#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>

#include "serpent/ops.hpp"
#include "serpent/params.hpp"

namespace serpent {

enum class ChannelAttentionKind { kNone, kCam, kWcam };

/// First bottleneck layer, drawn from U(0, bound). Pooled descriptors of
/// rectified features are non-negative, so a zero-mean draw can leave every
/// hidden unit dead at initialization.
template <typename T>
Tensor<T> bottleneck_param(int hidden, int channels, std::uint64_t seed, const std::string& name) {
  Tensor<T> w = uniform_param<T>(Shape{hidden, channels}, he_bound(channels), seed, name);
  for (auto& v : w.mutable_data()) v = std::abs(v);
  return w;
}

/// Weighted channel attention: independent bottleneck MLPs for the average-
/// and max-pooled descriptors, mixed by learnable per-channel weights
/// before the sigmoid.
template <typename T>
class WCAM {
 public:
  WCAM(int channels, int ratio, std::uint64_t seed, std::string name) : channels_(channels), name_(std::move(name)) {
    if (ratio < 1 || channels % ratio != 0)
      throw ConfigError("WCAM: reduction ratio " + std::to_string(ratio) + " does not divide " + std::to_string(channels) +
                        " channels (" + name_ + ")");
    hidden_ = channels / ratio;
    for (const char* branch : {"avg", "max"}) {
      auto& mlp = std::string(branch) == "avg" ? avg_ : max_;
      mlp.w0 = bottleneck_param<T>(hidden_, channels_, seed, join_name(name_, std::string(branch) + ".w0"));
      mlp.w1 = uniform_param<T>(Shape{channels_, hidden_}, fan_in_bound(hidden_), seed, join_name(name_, std::string(branch) + ".w1"));
    }
    w_avg_ = constant_param<T>(Shape{channels_}, 1.0);
    w_max_ = constant_param<T>(Shape{channels_}, 1.0);
  }

  struct Mlp {
    Tensor<T> w0;  ///< (C/r, C), followed by ReLU
    Tensor<T> w1;  ///< (C, C/r)
  };

  Mlp& avg_mlp() { return avg_; }
  Mlp& max_mlp() { return max_; }
  Tensor<T>& w_avg() { return w_avg_; }
  Tensor<T>& w_max() { return w_max_; }
  int channels() const { return channels_; }
  int hidden() const { return hidden_; }

  void collect(ParamList<T>& out) const {
    out.push_back({join_name(name_, "avg.w0"), avg_.w0});
    out.push_back({join_name(name_, "avg.w1"), avg_.w1});
    out.push_back({join_name(name_, "max.w0"), max_.w0});
    out.push_back({join_name(name_, "max.w1"), max_.w1});
    out.push_back({join_name(name_, "wavg"), w_avg_});
    out.push_back({join_name(name_, "wmax"), w_max_});
  }

  /// (N,C,H,W) -> channel attention (N,C,1,1), each entry in (0,1).
  Tensor<T> forward(const Tensor<T>& input) const {
    detail::require_rank(input.shape(), 4, "wcam");
    if (input.dim(1) != channels_)
      detail::contract_fail("wcam: input " + input.shape().str() + " for " + std::to_string(channels_) + " channels");
    const int N = input.dim(0);
    const Tensor<T> none;
    auto branch = [&](PoolKind kind, const Mlp& mlp) {
      Tensor<T> d = reshape(global_pool(input, kind), Shape{N, channels_});
      return linear(relu(linear(d, mlp.w0, none)), mlp.w1, none);
    };
    const Tensor<T> mixed = add(mul_lastdim(branch(PoolKind::kAvg, avg_), w_avg_), mul_lastdim(branch(PoolKind::kMax, max_), w_max_));
    return reshape(sigmoid(mixed), Shape{N, channels_, 1, 1});
  }

 private:
  int channels_;
  int hidden_ = 0;
  std::string name_;
  Mlp avg_, max_;
  Tensor<T> w_avg_, w_max_;
};

/// Channel attention with one MLP shared by both pooled descriptors.
template <typename T>
class CAM {
 public:
  CAM(int channels, int ratio, std::uint64_t seed, std::string name) : channels_(channels), name_(std::move(name)) {
    if (ratio < 1 || channels % ratio != 0)
      throw ConfigError("CAM: reduction ratio " + std::to_string(ratio) + " does not divide " + std::to_string(channels) +
                        " channels (" + name_ + ")");
    const int hidden = channels / ratio;
    w0_ = bottleneck_param<T>(hidden, channels, seed, join_name(name_, "w0"));
    w1_ = uniform_param<T>(Shape{channels, hidden}, fan_in_bound(hidden), seed, join_name(name_, "w1"));
  }

  Tensor<T>& w0() { return w0_; }
  Tensor<T>& w1() { return w1_; }

  void collect(ParamList<T>& out) const {
    out.push_back({join_name(name_, "w0"), w0_});
    out.push_back({join_name(name_, "w1"), w1_});
  }

  Tensor<T> forward(const Tensor<T>& input) const {
    detail::require_rank(input.shape(), 4, "cam");
    if (input.dim(1) != channels_)
      detail::contract_fail("cam: input " + input.shape().str() + " for " + std::to_string(channels_) + " channels");
    const int N = input.dim(0);
    const Tensor<T> none;
    auto mlp = [&](PoolKind kind) {
      Tensor<T> d = reshape(global_pool(input, kind), Shape{N, channels_});
      return linear(relu(linear(d, w0_, none)), w1_, none);
    };
    return reshape(sigmoid(add(mlp(PoolKind::kAvg), mlp(PoolKind::kMax))), Shape{N, channels_, 1, 1});
  }

 private:
  int channels_;
  std::string name_;
  Tensor<T> w0_, w1_;
};

/// Spatial attention: sigmoid(conv7x7([mean_c(x), max_c(x)])).
template <typename T>
class SAM {
 public:
  SAM(std::uint64_t seed, std::string name, PadMode pad = PadMode::kZero) : pad_(pad), name_(std::move(name)) {
    kernel_ = uniform_param<T>(Shape{1, 2, 7, 7}, fan_in_bound(2 * 49), seed, join_name(name_, "kernel"));
    bias_ = Tensor<T>::zeros(Shape{1}, true);
  }

  Tensor<T>& kernel() { return kernel_; }
  Tensor<T>& bias() { return bias_; }

  void collect(ParamList<T>& out) const {
    out.push_back({join_name(name_, "kernel"), kernel_});
    out.push_back({join_name(name_, "bias"), bias_});
  }

  Tensor<T> forward(const Tensor<T>& input) const {
    const Tensor<T> stacked = concat_channels<T>({channel_reduce(input, PoolKind::kAvg), channel_reduce(input, PoolKind::kMax)});
    if (pad_ == PadMode::kReplicate) return sigmoid(conv2d(replicate_pad(stacked, 3), kernel_, bias_, 1, 0));
    return sigmoid(conv2d(stacked, kernel_, bias_, 1, 3));
  }

 private:
  PadMode pad_;
  std::string name_;
  Tensor<T> kernel_, bias_;
};

/// input * channel_att (broadcast over space), then * spatial_att
/// (broadcast over channels). An undefined channel_att is skipped.
template <typename T>
Tensor<T> apply_attention(const Tensor<T>& input, const Tensor<T>& channel_att, const Tensor<T>& spatial_att) {
  Tensor<T> x = channel_att.defined() ? mul_channel(input, channel_att) : input;
  return mul_spatial(x, spatial_att);
}

/// Channel attention (WCAM, CAM, or none) followed by SAM, applied in
/// CBAM's sequential order: SAM sees the channel-refined features.
template <typename T>
class AttentionGate {
 public:
  AttentionGate(int channels, int ratio, ChannelAttentionKind kind, std::uint64_t seed, const std::string& prefix,
                PadMode sam_pad = PadMode::kZero)
      : sam_(seed, join_name(prefix, "sam"), sam_pad) {
    if (kind == ChannelAttentionKind::kWcam) wcam_.emplace(channels, ratio, seed, join_name(prefix, "wcam"));
    if (kind == ChannelAttentionKind::kCam) cam_.emplace(channels, ratio, seed, join_name(prefix, "cam"));
  }

  void collect(ParamList<T>& out) const {
    if (wcam_) wcam_->collect(out);
    if (cam_) cam_->collect(out);
    sam_.collect(out);
  }

  Tensor<T> channel_attention(const Tensor<T>& x) const {
    if (wcam_) return wcam_->forward(x);
    if (cam_) return cam_->forward(x);
    return {};
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    const Tensor<T> ca = channel_attention(x);
    const Tensor<T> refined = ca.defined() ? mul_channel(x, ca) : x;
    return mul_spatial(refined, sam_.forward(refined));
  }

  std::optional<WCAM<T>>& wcam() { return wcam_; }
  std::optional<CAM<T>>& cam() { return cam_; }
  SAM<T>& sam() { return sam_; }

 private:
  std::optional<WCAM<T>> wcam_;
  std::optional<CAM<T>> cam_;
  SAM<T> sam_;
};

}  // namespace serpent
