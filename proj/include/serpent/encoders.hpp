#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "serpent/attention.hpp"
#include "serpent/dsconv.hpp"
#include "serpent/layers.hpp"

namespace serpent {

/// Which operator fills the two snake branches of a DSC block.
/// kVanilla: plain 3x3 convolutions; kFixedSnake: DSConv with straight
/// unit-step chains; kEnhanced: pyramid-offset DSConv.
enum class SnakeKind { kVanilla, kFixedSnake, kEnhanced };

/// Three parallel branches [snake-horizontal, snake-vertical, 3x3 conv],
/// concatenated, gated by channel + spatial attention, fused by a 3x3 conv
/// and added to a residual projection of the input. Every convolution in
/// the block replicates the border, matching the clamped snake sampling.
template <typename T>
class DSCBlock {
 public:
  DSCBlock(int cin, int cout, int branch_width, SnakeKind snake, ChannelAttentionKind attention, int ratio,
           std::uint64_t seed, const std::string& name)
      : cin_(cin),
        cout_(cout),
        snake_(snake),
        conv_(cin, branch_width, 3, 1, 1, seed, join_name(name, "conv"), InitKind::kRelu, PadMode::kReplicate),
        gate_(3 * branch_width, ratio, attention, seed, name, PadMode::kReplicate),
        fuse_(3 * branch_width, cout, 3, 1, 1, seed, join_name(name, "fuse"), InitKind::kRelu, PadMode::kReplicate) {
    if (snake == SnakeKind::kVanilla) {
      plain_h_.emplace(cin, branch_width, 3, 1, 1, seed, join_name(name, "snake_h"), InitKind::kRelu, PadMode::kReplicate);
      plain_v_.emplace(cin, branch_width, 3, 1, 1, seed, join_name(name, "snake_v"), InitKind::kRelu, PadMode::kReplicate);
    } else {
      const ChainMode mode = snake == SnakeKind::kEnhanced ? ChainMode::kLearned : ChainMode::kFixedStraight;
      snake_h_.emplace(cin, branch_width, SnakeAxis::kHorizontal, seed, join_name(name, "snake_h"), mode);
      snake_v_.emplace(cin, branch_width, SnakeAxis::kVertical, seed, join_name(name, "snake_v"), mode);
    }
    if (cin != cout) proj_.emplace(cin, cout, 1, 1, 0, seed, join_name(name, "proj"), InitKind::kLinear);
  }

  void collect(ParamList<T>& out) const {
    if (snake_h_) {
      snake_h_->collect(out);
      snake_v_->collect(out);
    } else {
      plain_h_->collect(out);
      plain_v_->collect(out);
    }
    conv_.collect(out);
    gate_.collect(out);
    fuse_.collect(out);
    if (proj_) proj_->collect(out);
  }

  /// The three raw branch outputs in concatenation order.
  std::vector<Tensor<T>> branches(const Tensor<T>& x) const {
    if (snake_h_) return {snake_h_->forward(x), snake_v_->forward(x), conv_.forward(x)};
    return {plain_h_->forward(x), plain_v_->forward(x), conv_.forward(x)};
  }

  Tensor<T> residual(const Tensor<T>& x) const { return proj_ ? proj_->forward(x) : x; }

  /// Forward pass with the attention gate and residual path switchable,
  /// used to isolate the convolution paths.
  Tensor<T> forward(const Tensor<T>& x, bool use_attention, bool use_residual) const {
    detail::require_rank(x.shape(), 4, "dsc_block");
    if (x.dim(1) != cin_)
      detail::contract_fail("dsc_block: input " + x.shape().str() + " for " + std::to_string(cin_) + " channels");
    Tensor<T> cat = relu(concat_channels(branches(x)));
    if (use_attention) cat = gate_.forward(cat);
    Tensor<T> out = relu(fuse_.forward(cat));
    return use_residual ? add(out, residual(x)) : out;
  }

  Tensor<T> forward(const Tensor<T>& x) const { return forward(x, true, true); }

  int in_channels() const { return cin_; }
  int out_channels() const { return cout_; }
  std::optional<DSConv<T>>& snake_h() { return snake_h_; }
  std::optional<DSConv<T>>& snake_v() { return snake_v_; }
  std::optional<Conv2d<T>>& plain_h() { return plain_h_; }
  std::optional<Conv2d<T>>& plain_v() { return plain_v_; }
  Conv2d<T>& conv() { return conv_; }
  AttentionGate<T>& gate() { return gate_; }
  Conv2d<T>& fuse() { return fuse_; }
  std::optional<Conv2d<T>>& proj() { return proj_; }

 private:
  int cin_, cout_;
  SnakeKind snake_;
  std::optional<DSConv<T>> snake_h_, snake_v_;
  std::optional<Conv2d<T>> plain_h_, plain_v_;
  Conv2d<T> conv_;
  AttentionGate<T> gate_;
  Conv2d<T> fuse_;
  std::optional<Conv2d<T>> proj_;
};

inline constexpr int kDscStages = 5;
inline constexpr int kMitStages = 4;

/// Five DSC blocks with 2x max pooling between them; stage i runs at 1/2^i.
template <typename T>
class DSConvEncoder {
 public:
  DSConvEncoder(int image_channels, const std::vector<int>& widths, SnakeKind snake, ChannelAttentionKind attention,
                int ratio, std::uint64_t seed, const std::string& name = "enc.dsc") {
    if (widths.size() != kDscStages) throw ConfigError("DSConv encoder needs 5 stage widths");
    int cin = image_channels;
    for (int s = 0; s < kDscStages; ++s) {
      blocks_.emplace_back(cin, widths[s], widths[s], snake, attention, ratio, seed, join_name(name, std::to_string(s)));
      cin = widths[s];
    }
  }

  void collect(ParamList<T>& out) const {
    for (const auto& b : blocks_) b.collect(out);
  }

  std::vector<Tensor<T>> forward(const Tensor<T>& image) const {
    detail::require_rank(image.shape(), 4, "dsconv_encoder");
    if (image.dim(2) % 16 != 0 || image.dim(3) % 16 != 0)
      detail::contract_fail("dsconv_encoder: spatial dims " + image.shape().str() + " not divisible by 16");
    std::vector<Tensor<T>> feats;
    Tensor<T> x = image;
    for (int s = 0; s < kDscStages; ++s) {
      if (s > 0) x = max_pool2(x);
      x = blocks_[s].forward(x);
      feats.push_back(x);
    }
    return feats;
  }

  DSCBlock<T>& block(int stage) { return blocks_.at(stage); }

 private:
  std::vector<DSCBlock<T>> blocks_;
};

/// Attention with keys/values computed from a spatially reduced copy of
/// the tokens (strided R x R conv + layer norm when R > 1).
template <typename T>
class EfficientSelfAttention {
 public:
  EfficientSelfAttention(int channels, int heads, int reduction, std::uint64_t seed, const std::string& name)
      : channels_(channels),
        heads_(heads),
        reduction_(reduction),
        q_(channels, channels, seed, join_name(name, "q")),
        k_(channels, channels, seed, join_name(name, "k")),
        v_(channels, channels, seed, join_name(name, "v")),
        proj_(channels, channels, seed, join_name(name, "proj")) {
    if (heads < 1 || channels % heads != 0)
      throw ConfigError("attention heads " + std::to_string(heads) + " do not divide " + std::to_string(channels) +
                        " channels (" + name + ")");
    if (reduction < 1) throw ConfigError("attention reduction must be positive (" + name + ")");
    if (reduction > 1) {
      sr_.emplace(channels, channels, reduction, reduction, 0, seed, join_name(name, "sr"), InitKind::kLinear);
      sr_norm_.emplace(channels, join_name(name, "sr_norm"));
    }
  }

  void collect(ParamList<T>& out) const {
    q_.collect(out);
    k_.collect(out);
    v_.collect(out);
    if (sr_) {
      sr_->collect(out);
      sr_norm_->collect(out);
    }
    proj_.collect(out);
  }

  /// Tokens (N, L, C) for the reduced key/value source.
  Tensor<T> reduced_tokens(const Tensor<T>& x, int H, int W) const {
    if (!sr_) return x;
    if (H % reduction_ != 0 || W % reduction_ != 0)
      detail::contract_fail("efficient_self_attention: " + std::to_string(H) + "x" + std::to_string(W) +
                            " not divisible by reduction " + std::to_string(reduction_));
    return sr_norm_->forward(to_tokens(sr_->forward(from_tokens(x, H, W))));
  }

  Tensor<T> forward(const Tensor<T>& x, int H, int W) const {
    detail::require_rank(x.shape(), 3, "efficient_self_attention");
    if (x.dim(1) != H * W || x.dim(2) != channels_)
      detail::contract_fail("efficient_self_attention: tokens " + x.shape().str() + " for " + std::to_string(H) + "x" +
                            std::to_string(W) + "x" + std::to_string(channels_));
    const Tensor<T> kv = reduced_tokens(x, H, W);
    return proj_.forward(multi_head_attention(q_.forward(x), k_.forward(kv), v_.forward(kv), heads_));
  }

  int heads() const { return heads_; }
  Linear<T>& q() { return q_; }
  Linear<T>& k() { return k_; }
  Linear<T>& v() { return v_; }
  Linear<T>& proj() { return proj_; }

 private:
  int channels_, heads_, reduction_;
  Linear<T> q_, k_, v_, proj_;
  std::optional<Conv2d<T>> sr_;
  std::optional<LayerNorm<T>> sr_norm_;
};

/// linear 4x expand -> 3x3 depthwise conv on the token grid -> gelu -> linear.
template <typename T>
class MixFFN {
 public:
  static constexpr int kExpansion = 4;

  MixFFN(int channels, std::uint64_t seed, const std::string& name)
      : fc1_(channels, kExpansion * channels, seed, join_name(name, "fc1")),
        dw_(kExpansion * channels, 3, seed, join_name(name, "dw")),
        fc2_(kExpansion * channels, channels, seed, join_name(name, "fc2")) {}

  void collect(ParamList<T>& out) const {
    fc1_.collect(out);
    dw_.collect(out);
    fc2_.collect(out);
  }

  Tensor<T> forward(const Tensor<T>& x, int H, int W) const {
    detail::require_rank(x.shape(), 3, "mix_ffn");
    if (x.dim(1) != H * W)
      detail::contract_fail("mix_ffn: " + std::to_string(x.dim(1)) + " tokens for a " + std::to_string(H) + "x" +
                            std::to_string(W) + " grid");
    const Tensor<T> grid = dw_.forward(from_tokens(fc1_.forward(x), H, W));
    return fc2_.forward(gelu(to_tokens(grid)));
  }

  Linear<T>& fc1() { return fc1_; }
  DepthwiseConv2d<T>& dw() { return dw_; }
  Linear<T>& fc2() { return fc2_; }

 private:
  Linear<T> fc1_;
  DepthwiseConv2d<T> dw_;
  Linear<T> fc2_;
};

/// Pre-norm transformer block: x + attn(norm(x)), then x + ffn(norm(x)).
template <typename T>
class TransformerBlock {
 public:
  TransformerBlock(int channels, int heads, int reduction, std::uint64_t seed, const std::string& name)
      : norm1_(channels, join_name(name, "norm1")),
        attn_(channels, heads, reduction, seed, join_name(name, "attn")),
        norm2_(channels, join_name(name, "norm2")),
        ffn_(channels, seed, join_name(name, "ffn")) {}

  void collect(ParamList<T>& out) const {
    norm1_.collect(out);
    attn_.collect(out);
    norm2_.collect(out);
    ffn_.collect(out);
  }

  Tensor<T> forward(const Tensor<T>& x, int H, int W) const {
    const Tensor<T> y = add(x, attn_.forward(norm1_.forward(x), H, W));
    return add(y, ffn_.forward(norm2_.forward(y), H, W));
  }

  EfficientSelfAttention<T>& attention() { return attn_; }
  MixFFN<T>& ffn() { return ffn_; }

 private:
  LayerNorm<T> norm1_;
  EfficientSelfAttention<T> attn_;
  LayerNorm<T> norm2_;
  MixFFN<T> ffn_;
};

struct TransformerStageConfig {
  int width = 16;
  int depth = 1;
  int heads = 1;
  int reduction = 1;
};

/// Overlapping patch embedding (conv + layer norm), blocks, final norm.
template <typename T>
class TransformerStage {
 public:
  TransformerStage(int cin, const TransformerStageConfig& cfg, bool first, std::uint64_t seed, const std::string& name)
      : embed_(cin, cfg.width, first ? 7 : 3, first ? 4 : 2, first ? 3 : 1, seed, join_name(name, "embed"),
               InitKind::kLinear),
        embed_norm_(cfg.width, join_name(name, "embed_norm")),
        norm_(cfg.width, join_name(name, "norm")) {
    if (cfg.depth < 1) throw ConfigError("transformer depth must be positive (" + name + ")");
    for (int b = 0; b < cfg.depth; ++b)
      blocks_.emplace_back(cfg.width, cfg.heads, cfg.reduction, seed, join_name(name, std::to_string(b)));
  }

  void collect(ParamList<T>& out) const {
    embed_.collect(out);
    embed_norm_.collect(out);
    for (const auto& b : blocks_) b.collect(out);
    norm_.collect(out);
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    const Tensor<T> grid = embed_.forward(x);
    const int H = grid.dim(2), W = grid.dim(3);
    Tensor<T> tokens = embed_norm_.forward(to_tokens(grid));
    for (const auto& b : blocks_) tokens = b.forward(tokens, H, W);
    return from_tokens(norm_.forward(tokens), H, W);
  }

  TransformerBlock<T>& block(int i) { return blocks_.at(i); }

 private:
  Conv2d<T> embed_;
  LayerNorm<T> embed_norm_;
  std::vector<TransformerBlock<T>> blocks_;
  LayerNorm<T> norm_;
};

/// Four-stage hierarchical transformer; outputs at 1/4, 1/8, 1/16, 1/32.
/// No positional encodings.
template <typename T>
class TransformerEncoder {
 public:
  TransformerEncoder(int image_channels, const std::vector<TransformerStageConfig>& stages, std::uint64_t seed,
                     const std::string& name = "enc.mit") {
    if (stages.size() != kMitStages) throw ConfigError("transformer encoder needs 4 stage configs");
    int cin = image_channels;
    for (int s = 0; s < kMitStages; ++s) {
      stages_.emplace_back(cin, stages[s], s == 0, seed, join_name(name, std::to_string(s)));
      cin = stages[s].width;
    }
  }

  void collect(ParamList<T>& out) const {
    for (const auto& s : stages_) s.collect(out);
  }

  std::vector<Tensor<T>> forward(const Tensor<T>& image) const {
    detail::require_rank(image.shape(), 4, "transformer_encoder");
    if (image.dim(2) % 32 != 0 || image.dim(3) % 32 != 0)
      detail::contract_fail("transformer_encoder: spatial dims " + image.shape().str() + " not divisible by 32");
    std::vector<Tensor<T>> feats;
    Tensor<T> x = image;
    for (const auto& s : stages_) {
      x = s.forward(x);
      feats.push_back(x);
    }
    return feats;
  }

  TransformerStage<T>& stage(int i) { return stages_.at(i); }

 private:
  std::vector<TransformerStage<T>> stages_;
};

}  // namespace serpent
