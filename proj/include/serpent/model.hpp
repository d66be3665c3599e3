#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "serpent/encoders.hpp"

namespace serpent {

inline constexpr int kNumClasses = 2;
inline constexpr double kDiceEpsilon = 1.0;

struct ModelConfig {
  int image_channels = 1;
  std::vector<int> dsc_widths = {8, 16, 32, 64, 128};
  std::vector<TransformerStageConfig> mit = {{16, 1, 1, 8}, {32, 1, 2, 4}, {64, 1, 4, 2}, {128, 1, 8, 1}};
  /// Fusion widths at 1/16, 1/8, 1/4, 1/2, 1/1. The 1/32 stage keeps the
  /// deepest transformer width.
  std::vector<int> decoder_widths = {64, 32, 16, 16, 8};
  int ratio = 8;
  SnakeKind snake = SnakeKind::kEnhanced;
  ChannelAttentionKind attention = ChannelAttentionKind::kWcam;
  std::uint64_t seed = 0;
};

/// Reduced widths for CPU training runs.
inline ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.dsc_widths = {8, 8, 16, 16, 32};
  cfg.mit = {{8, 1, 1, 8}, {16, 1, 1, 4}, {32, 1, 2, 2}, {64, 1, 4, 1}};
  cfg.decoder_widths = {32, 16, 16, 8, 8};
  return cfg;
}

/// Channel count entering each decoder stage, deepest (1/32) first.
inline std::vector<int> decoder_input_channels(const ModelConfig& cfg) {
  const int deep = cfg.mit[3].width;
  return {deep,
          cfg.dsc_widths[4] + cfg.mit[2].width + deep,
          cfg.dsc_widths[3] + cfg.mit[1].width + cfg.decoder_widths[0],
          cfg.dsc_widths[2] + cfg.mit[0].width + cfg.decoder_widths[1],
          cfg.dsc_widths[1] + cfg.decoder_widths[2],
          cfg.dsc_widths[0] + cfg.decoder_widths[3]};
}

inline void validate(const ModelConfig& cfg) {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (cfg.image_channels < 1) fail("image_channels must be positive");
  if (cfg.dsc_widths.size() != 5) fail("dsc_widths needs 5 entries");
  if (cfg.mit.size() != 4) fail("transformer needs 4 stages");
  if (cfg.decoder_widths.size() != 5) fail("decoder_widths needs 5 entries");
  if (cfg.ratio < 1) fail("ratio must be positive");
  for (int w : cfg.dsc_widths)
    if (w < 1) fail("dsc widths must be positive");
  for (int w : cfg.decoder_widths)
    if (w < 1) fail("decoder widths must be positive");
  for (const auto& s : cfg.mit) {
    if (s.width < 1 || s.depth < 1 || s.heads < 1 || s.reduction < 1) fail("transformer stage values must be positive");
    if (s.width % s.heads != 0) fail("heads must divide transformer width " + std::to_string(s.width));
  }
  if (cfg.attention != ChannelAttentionKind::kNone) {
    for (int w : cfg.dsc_widths)
      if ((3 * w) % cfg.ratio != 0) fail("ratio " + std::to_string(cfg.ratio) + " must divide 3 x dsc width " + std::to_string(w));
    for (int c : decoder_input_channels(cfg))
      if (c % cfg.ratio != 0) fail("ratio " + std::to_string(cfg.ratio) + " must divide decoder input width " + std::to_string(c));
  }
}

/// One decoder step: concat [dsc, transformer, upsampled below] -> gate ->
/// conv3x3 -> relu -> conv3x3, plus a 1x1 projection of the concatenation,
/// then relu.
template <typename T>
class FuseStage {
 public:
  FuseStage(int cin, int cout, int ratio, ChannelAttentionKind attention, std::uint64_t seed, const std::string& name)
      : gate_(cin, ratio, attention, seed, name),
        conv1_(cin, cout, 3, 1, 1, seed, join_name(name, "conv1")),
        conv2_(cout, cout, 3, 1, 1, seed, join_name(name, "conv2"), InitKind::kLinear),
        proj_(cin, cout, 1, 1, 0, seed, join_name(name, "proj"), InitKind::kLinear),
        cin_(cin) {}

  void collect(ParamList<T>& out) const {
    gate_.collect(out);
    conv1_.collect(out);
    conv2_.collect(out);
    proj_.collect(out);
  }

  /// Concatenates the present inputs; `below` is upsampled 2x first.
  Tensor<T> concat_inputs(const Tensor<T>& dsc, const Tensor<T>& transformer, const Tensor<T>& below) const {
    std::vector<Tensor<T>> parts;
    for (const Tensor<T>* t : {&dsc, &transformer})
      if (t->defined()) parts.push_back(*t);
    if (below.defined()) parts.push_back(upsample_bilinear(below, 2));
    detail::require(!parts.empty(), "fuse_stage: no inputs");
    for (const auto& p : parts) {
      detail::require_rank(p.shape(), 4, "fuse_stage");
      if (p.dim(2) != parts[0].dim(2) || p.dim(3) != parts[0].dim(3))
        detail::contract_fail("fuse_stage: spatial mismatch " + p.shape().str() + " vs " + parts[0].shape().str());
    }
    return parts.size() == 1 ? parts[0] : concat_channels(parts);
  }

  Tensor<T> forward(const Tensor<T>& dsc, const Tensor<T>& transformer, const Tensor<T>& below) const {
    const Tensor<T> cat = concat_inputs(dsc, transformer, below);
    if (cat.dim(1) != cin_)
      detail::contract_fail("fuse_stage: concatenated " + cat.shape().str() + " for " + std::to_string(cin_) + " channels");
    const Tensor<T> gated = gate_.forward(cat);
    const Tensor<T> y = conv2_.forward(relu(conv1_.forward(gated)));
    return relu(add(y, proj_.forward(cat)));
  }

  AttentionGate<T>& gate() { return gate_; }
  Conv2d<T>& conv1() { return conv1_; }
  Conv2d<T>& conv2() { return conv2_; }
  Conv2d<T>& proj() { return proj_; }

 private:
  AttentionGate<T> gate_;
  Conv2d<T> conv1_, conv2_, proj_;
  int cin_;
};

template <typename T>
struct EncoderFeatures {
  std::vector<Tensor<T>> dsc;          ///< 1/1 .. 1/16
  std::vector<Tensor<T>> transformer;  ///< 1/4 .. 1/32
};

template <typename T>
class DSCformer {
 public:
  explicit DSCformer(const ModelConfig& cfg)
      : cfg_((validate(cfg), cfg)),
        dsc_(cfg.image_channels, cfg.dsc_widths, cfg.snake, cfg.attention, cfg.ratio, cfg.seed),
        mit_(cfg.image_channels, cfg.mit, cfg.seed),
        head_(cfg.decoder_widths[4], kNumClasses, 1, 1, 0, cfg.seed, "head", InitKind::kLinear) {
    const auto cins = decoder_input_channels(cfg);
    std::vector<int> couts = {cfg.mit[3].width};
    couts.insert(couts.end(), cfg.decoder_widths.begin(), cfg.decoder_widths.end());
    for (int s = 0; s < 6; ++s)
      stages_.emplace_back(cins[s], couts[s], cfg.ratio, cfg.attention, cfg.seed, "dec." + std::to_string(s));
  }

  const ModelConfig& config() const { return cfg_; }

  void collect(ParamList<T>& out) const {
    dsc_.collect(out);
    mit_.collect(out);
    for (const auto& s : stages_) s.collect(out);
    head_.collect(out);
  }

  ParamList<T> parameters() const {
    ParamList<T> out;
    collect(out);
    return out;
  }

  EncoderFeatures<T> encode(const Tensor<T>& image) const {
    check_input(image);
    return {dsc_.forward(image), mit_.forward(image)};
  }

  /// Logits (N, 2, H, W); channel 1 is the crack class.
  Tensor<T> forward(const Tensor<T>& image) const {
    const auto f = encode(image);
    const Tensor<T> none;
    Tensor<T> x = stages_[0].forward(none, f.transformer[3], none);  // 1/32
    x = stages_[1].forward(f.dsc[4], f.transformer[2], x);           // 1/16
    x = stages_[2].forward(f.dsc[3], f.transformer[1], x);           // 1/8
    x = stages_[3].forward(f.dsc[2], f.transformer[0], x);           // 1/4
    x = stages_[4].forward(f.dsc[1], none, x);                       // 1/2
    x = stages_[5].forward(f.dsc[0], none, x);                       // 1/1
    return head_.forward(x);
  }

  FuseStage<T>& stage(int i) { return stages_.at(i); }
  DSConvEncoder<T>& dsc_encoder() { return dsc_; }
  TransformerEncoder<T>& transformer_encoder() { return mit_; }

 private:
  void check_input(const Tensor<T>& image) const {
    detail::require_rank(image.shape(), 4, "dscformer");
    if (image.dim(1) != cfg_.image_channels)
      detail::contract_fail("dscformer: image " + image.shape().str() + " for " + std::to_string(cfg_.image_channels) +
                            " channels");
    if (image.dim(2) % 32 != 0 || image.dim(3) % 32 != 0)
      detail::contract_fail("dscformer: spatial dims " + image.shape().str() + " not divisible by 32");
  }

  ModelConfig cfg_;
  DSConvEncoder<T> dsc_;
  TransformerEncoder<T> mit_;
  std::vector<FuseStage<T>> stages_;
  Conv2d<T> head_;
};

namespace detail {

/// log(1 + e^v) without overflow.
template <typename T>
T softplus(T v) {
  return v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
}

}  // namespace detail

/// Mean pixel cross-entropy plus soft Dice on the crack probability.
/// logits (N,2,H,W); target (N,1,H,W) with values in {0,1}. Dice sums run
/// over the whole batch.
template <typename T>
Tensor<T> combined_loss(const Tensor<T>& logits, const Tensor<T>& target) {
  detail::require_rank(logits.shape(), 4, "combined_loss");
  const int N = logits.dim(0), H = logits.dim(2), W = logits.dim(3);
  if (logits.dim(1) != kNumClasses) detail::contract_fail("combined_loss: logits must have 2 channels, got " + logits.shape().str());
  detail::require_shape(target.shape(), Shape{N, 1, H, W}, "combined_loss target");
  const std::size_t HW = static_cast<std::size_t>(H) * W, M = static_cast<std::size_t>(N) * HW;
  std::vector<T> prob(M), gt(M);
  T ce = 0, inter = 0, psum = 0, gsum = 0;
  for (int n = 0; n < N; ++n)
    for (std::size_t p = 0; p < HW; ++p) {
      const std::size_t i = n * HW + p;
      const T z0 = logits.data()[(n * 2) * HW + p], z1 = logits.data()[(n * 2 + 1) * HW + p];
      const T g = target.data()[i];
      if (g != T(0) && g != T(1)) detail::contract_fail("combined_loss: target values must be 0 or 1");
      const T margin = z1 - z0;
      prob[i] = T(1) / (T(1) + std::exp(-margin));
      gt[i] = g;
      ce += detail::softplus(g == T(1) ? -margin : margin);
      inter += prob[i] * g;
      psum += prob[i];
      gsum += g;
    }
  const T eps = static_cast<T>(kDiceEpsilon);
  const T denom = psum + gsum + eps;
  const T dice = T(1) - (T(2) * inter + eps) / denom;
  const T loss = ce / static_cast<T>(M) + dice;
  return Tensor<T>::make_result(Shape{1}, {loss}, {logits}, [=](detail::Node<T>& self) {
    T* g = logits.node()->grad_buffer();
    const T up = self.grad[0];
    for (int n = 0; n < N; ++n)
      for (std::size_t p = 0; p < HW; ++p) {
        const std::size_t i = n * HW + p;
        const T dce = (prob[i] - gt[i]) / static_cast<T>(M);
        const T ddice_dp = -(T(2) * gt[i] * denom - (T(2) * inter + eps)) / (denom * denom);
        const T dmargin = up * (dce + ddice_dp * prob[i] * (T(1) - prob[i]));
        g[(n * 2 + 1) * HW + p] += dmargin;
        g[(n * 2) * HW + p] -= dmargin;
      }
  });
}

/// Crack iff softmax crack probability > 0.5, i.e. z1 > z0. Returns
/// (N * H * W) values in {0,1}.
template <typename T>
std::vector<std::uint8_t> predict_classes(const Tensor<T>& logits) {
  const int N = logits.dim(0);
  const std::size_t HW = static_cast<std::size_t>(logits.dim(2)) * logits.dim(3);
  std::vector<std::uint8_t> out(N * HW);
  for (int n = 0; n < N; ++n)
    for (std::size_t p = 0; p < HW; ++p)
      out[n * HW + p] = logits.data()[(n * 2 + 1) * HW + p] > logits.data()[(n * 2) * HW + p] ? 1 : 0;
  return out;
}

}  // namespace serpent
