#pragma once

#include <cstdint>
#include <string>

#include "serpent/ops.hpp"
#include "serpent/params.hpp"

// Small parameter-owning wrappers around the functional ops.

namespace serpent {

enum class InitKind { kRelu, kLinear };

template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(int cin, int cout, int kernel, int stride, int pad, std::uint64_t seed, std::string name,
         InitKind init = InitKind::kRelu, PadMode pad_mode = PadMode::kZero)
      : stride_(stride), pad_(pad), pad_mode_(pad_mode), name_(std::move(name)) {
    const int fan_in = cin * kernel * kernel;
    const double bound = init == InitKind::kRelu ? he_bound(fan_in) : fan_in_bound(fan_in);
    weight_ = uniform_param<T>(Shape{cout, cin, kernel, kernel}, bound, seed, join_name(name_, "weight"));
    bias_ = Tensor<T>::zeros(Shape{cout}, true);
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    if (pad_mode_ == PadMode::kReplicate) return conv2d(replicate_pad(x, pad_), weight_, bias_, stride_, 0);
    return conv2d(x, weight_, bias_, stride_, pad_);
  }

  void collect(ParamList<T>& out) const {
    out.push_back({join_name(name_, "weight"), weight_});
    out.push_back({join_name(name_, "bias"), bias_});
  }

  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }
  const Tensor<T>& weight() const { return weight_; }
  const Tensor<T>& bias() const { return bias_; }
  int out_channels() const { return weight_.dim(0); }

 private:
  int stride_ = 1, pad_ = 0;
  PadMode pad_mode_ = PadMode::kZero;
  std::string name_;
  Tensor<T> weight_, bias_;
};

template <typename T>
class DepthwiseConv2d {
 public:
  DepthwiseConv2d() = default;
  DepthwiseConv2d(int channels, int kernel, std::uint64_t seed, std::string name)
      : pad_(kernel / 2), name_(std::move(name)) {
    weight_ = uniform_param<T>(Shape{channels, 1, kernel, kernel}, fan_in_bound(kernel * kernel), seed,
                               join_name(name_, "weight"));
    bias_ = Tensor<T>::zeros(Shape{channels}, true);
  }

  Tensor<T> forward(const Tensor<T>& x) const { return depthwise_conv2d(x, weight_, bias_, pad_); }

  void collect(ParamList<T>& out) const {
    out.push_back({join_name(name_, "weight"), weight_});
    out.push_back({join_name(name_, "bias"), bias_});
  }

  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }

 private:
  int pad_ = 1;
  std::string name_;
  Tensor<T> weight_, bias_;
};

template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(int cin, int cout, std::uint64_t seed, std::string name) : name_(std::move(name)) {
    weight_ = uniform_param<T>(Shape{cout, cin}, fan_in_bound(cin), seed, join_name(name_, "weight"));
    bias_ = Tensor<T>::zeros(Shape{cout}, true);
  }

  Tensor<T> forward(const Tensor<T>& x) const { return linear(x, weight_, bias_); }

  void collect(ParamList<T>& out) const {
    out.push_back({join_name(name_, "weight"), weight_});
    out.push_back({join_name(name_, "bias"), bias_});
  }

  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }
  const Tensor<T>& weight() const { return weight_; }
  const Tensor<T>& bias() const { return bias_; }

 private:
  std::string name_;
  Tensor<T> weight_, bias_;
};

template <typename T>
class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(int channels, std::string name) : name_(std::move(name)) {
    gain_ = constant_param<T>(Shape{channels}, 1.0);
    shift_ = constant_param<T>(Shape{channels}, 0.0);
  }

  Tensor<T> forward(const Tensor<T>& x) const { return layer_norm(x, gain_, shift_); }

  void collect(ParamList<T>& out) const {
    out.push_back({join_name(name_, "gain"), gain_});
    out.push_back({join_name(name_, "shift"), shift_});
  }

 private:
  std::string name_;
  Tensor<T> gain_, shift_;
};

}  // namespace serpent
