#pragma once

#include <algorithm>
#include <functional>
#include <string>
#include <vector>

#include "serpent/gradcheck.hpp"
#include "serpent/model.hpp"

namespace serpent {

enum class GradCheckScope { kPrimitive, kDsconv, kAttention, kBlock, kModel };

inline GradCheckScope parse_gradcheck_scope(const std::string& s) {
  if (s == "primitive") return GradCheckScope::kPrimitive;
  if (s == "dsconv") return GradCheckScope::kDsconv;
  if (s == "attention") return GradCheckScope::kAttention;
  if (s == "block") return GradCheckScope::kBlock;
  if (s == "model") return GradCheckScope::kModel;
  throw ConfigError("unknown gradcheck scope '" + s + "' (primitive|dsconv|attention|block|model)");
}

struct GradCheckUnit {
  std::string name;
  GradCheckReport report;
};

namespace detail {

inline Tensor<double> gc_tensor(const Shape& shape, std::uint64_t seed, double lo = -1, double hi = 1, bool grad = true) {
  CounterRng rng(seed);
  std::vector<double> v(shape.numel());
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor<double>::from(shape, std::move(v), grad);
}

inline std::vector<double> gc_weights(std::size_t n, std::uint64_t seed) {
  CounterRng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(-1, 1);
  return v;
}

/// Moves a DSConv away from its straight initial chain so the offset path
/// carries gradient.
inline void gc_bend(DSConv<double>& layer, std::uint64_t seed) {
  CounterRng rng(seed);
  for (int c = 1; c <= kPyramidLevels; ++c) {
    for (auto& v : layer.pyramid_weight(c).mutable_data()) v = rng.uniform(-0.3, 0.3);
    for (auto& v : layer.pyramid_bias(c).mutable_data()) v = rng.uniform(-1, 1);
  }
  for (auto& v : layer.chain_bias().mutable_data()) v = rng.uniform(-0.5, 0.5);
}

/// Random non-unit branch weights so both WCAM branches are exercised.
inline void gc_unbalance(WCAM<double>& wcam, std::uint64_t seed) {
  CounterRng rng(seed);
  for (auto& v : wcam.w_avg().mutable_data()) v = rng.uniform(0.5, 1.5);
  for (auto& v : wcam.w_max().mutable_data()) v = rng.uniform(-1.5, -0.5);
}

/// Scalar probe of a unit: fixed random projection of its output.
template <typename Fn>
GradCheckReport gc_probe(Fn fn, ParamList<double> leaves, std::uint64_t seed, const GradCheckOptions& opts) {
  const auto w = gc_weights(fn().numel(), seed);
  return grad_check([&] { return weighted_sum(fn(), w); }, std::move(leaves), opts);
}

inline void gc_primitives(std::vector<GradCheckUnit>& out, const GradCheckOptions& opts) {
  const Shape s{2, 4, 8, 8};
  auto w = gc_tensor(Shape{3, 4, 3, 3}, 30), b = gc_tensor(Shape{3}, 31);
  auto dw = gc_tensor(Shape{4, 1, 3, 3}, 32), lw = gc_tensor(Shape{5, 8}, 33);
  auto gain = gc_tensor(Shape{8}, 34, 0.5, 1.5), shift = gc_tensor(Shape{8}, 35);
  auto other = gc_tensor(Shape{2, 4, 8, 8}, 36, -1, 1, false);
  auto chan = gc_tensor(Shape{2, 4, 1, 1}, 37, 0.1, 1), spat = gc_tensor(Shape{2, 1, 8, 8}, 38, 0.1, 1);
  auto srw = gc_tensor(Shape{3, 4, 2, 2}, 39), kk = gc_tensor(Shape{2, 3, 8}, 41), vv = gc_tensor(Shape{2, 3, 8}, 42);
  auto coords = gc_tensor(Shape{2, 6, 8, 8}, 43, 0.1, 6.9);

  struct Case {
    const char* name;
    std::function<Tensor<double>(const Tensor<double>&)> fn;
    ParamList<double> extra;
    Shape shape;
  };
  const std::vector<Case> cases = {
      {"conv2d", [&](auto& x) { return conv2d(x, w, b, 1, 1); }, {{"w", w}, {"b", b}}, s},
      {"conv2d_strided", [&](auto& x) { return conv2d(x, srw, b, 2, 0); }, {{"w", srw}, {"b", b}}, s},
      {"depthwise_conv2d", [&](auto& x) { return depthwise_conv2d(x, dw, Tensor<double>{}, 1); }, {{"w", dw}}, s},
      {"linear", [&](auto& x) { return linear(x, lw, Tensor<double>{}); }, {{"w", lw}}, Shape{2, 6, 8}},
      {"max_pool2", [&](auto& x) { return max_pool2(x); }, {}, s},
      {"global_avg_pool", [&](auto& x) { return global_pool(x, PoolKind::kAvg); }, {}, s},
      {"global_max_pool", [&](auto& x) { return global_pool(x, PoolKind::kMax); }, {}, s},
      {"channel_mean", [&](auto& x) { return channel_reduce(x, PoolKind::kAvg); }, {}, s},
      {"channel_max", [&](auto& x) { return channel_reduce(x, PoolKind::kMax); }, {}, s},
      {"upsample_bilinear", [&](auto& x) { return upsample_bilinear(x, 2); }, {}, Shape{2, 4, 4, 4}},
      {"relu", [&](auto& x) { return relu(x); }, {}, s},
      {"sigmoid", [&](auto& x) { return sigmoid(x); }, {}, s},
      {"tanh", [&](auto& x) { return tanh(x); }, {}, s},
      {"gelu", [&](auto& x) { return gelu(x); }, {}, s},
      {"layer_norm", [&](auto& x) { return layer_norm(x, gain, shift); }, {{"gain", gain}, {"shift", shift}}, Shape{2, 6, 8}},
      {"add", [&](auto& x) { return add(x, mul(x, other)); }, {}, s},
      {"mul", [&](auto& x) { return mul(x, other); }, {}, s},
      {"mul_channel", [&](auto& x) { return mul_channel(x, chan); }, {{"chan", chan}}, s},
      {"mul_spatial", [&](auto& x) { return mul_spatial(x, spat); }, {{"spat", spat}}, s},
      {"concat_channels", [&](auto& x) { return concat_channels<double>({x, relu(x), x}); }, {}, s},
      {"tokens", [&](auto& x) { return from_tokens(scale(to_tokens(x), 2.0), 8, 8); }, {}, s},
      {"replicate_pad", [&](auto& x) { return replicate_pad(x, 2); }, {}, Shape{2, 4, 3, 5}},
      {"multi_head_attention", [&](auto& x) { return multi_head_attention(x, kk, vv, 2); }, {{"k", kk}, {"v", vv}}, Shape{2, 5, 8}},
      {"deform_sample", [&](auto& x) { return deform_sample(x, coords); }, {{"coords", coords}}, Shape{2, 2, 8, 8}},
  };
  std::uint64_t seed = 100;
  for (const auto& c : cases) {
    auto x = gc_tensor(c.shape, seed++);
    ParamList<double> leaves{{"input", x}};
    for (const auto& p : c.extra) leaves.push_back(p);
    out.push_back({c.name, gc_probe([&] { return c.fn(x); }, leaves, seed++, opts)});
  }
}

inline void gc_dsconv(std::vector<GradCheckUnit>& out, const GradCheckOptions& opts) {
  for (auto axis : {SnakeAxis::kHorizontal, SnakeAxis::kVertical}) {
    const bool h = axis == SnakeAxis::kHorizontal;
    DSConv<double> layer(2, 3, axis, h ? 23 : 24, h ? "dsconv.h" : "dsconv.v");
    gc_bend(layer, h ? 25 : 26);
    auto x = gc_tensor(Shape{1, 2, 6, 6}, h ? 27 : 28);
    ParamList<double> leaves{{"input", x}};
    layer.collect(leaves);
    out.push_back({h ? "dsconv_horizontal" : "dsconv_vertical", gc_probe([&] { return layer.forward(x); }, leaves, 29, opts)});
  }
}

inline void gc_attention(std::vector<GradCheckUnit>& out, const GradCheckOptions& opts) {
  auto x = gc_tensor(Shape{2, 4, 5, 5}, 40);
  {
    WCAM<double> wcam(4, 2, 41, "wcam");
    gc_unbalance(wcam, 42);
    ParamList<double> leaves{{"input", x}};
    wcam.collect(leaves);
    out.push_back({"wcam", gc_probe([&] { return mul_channel(x, wcam.forward(x)); }, leaves, 43, opts)});
  }
  {
    CAM<double> cam(4, 2, 44, "cam");
    ParamList<double> leaves{{"input", x}};
    cam.collect(leaves);
    out.push_back({"cam", gc_probe([&] { return mul_channel(x, cam.forward(x)); }, leaves, 45, opts)});
  }
  for (auto pad : {PadMode::kZero, PadMode::kReplicate}) {
    SAM<double> sam(46, "sam", pad);
    ParamList<double> leaves{{"input", x}};
    sam.collect(leaves);
    out.push_back({pad == PadMode::kZero ? "sam" : "sam_replicate",
                   gc_probe([&] { return mul_spatial(x, sam.forward(x)); }, leaves, 47, opts)});
  }
  {
    AttentionGate<double> gate(4, 2, ChannelAttentionKind::kWcam, 48, "gate");
    gc_unbalance(*gate.wcam(), 49);
    ParamList<double> leaves{{"input", x}};
    gate.collect(leaves);
    out.push_back({"attention_gate", gc_probe([&] { return gate.forward(x); }, leaves, 50, opts)});
  }
}

inline void gc_blocks(std::vector<GradCheckUnit>& out, const GradCheckOptions& opts) {
  {
    DSCBlock<double> block(2, 3, 3, SnakeKind::kEnhanced, ChannelAttentionKind::kWcam, 3, 160, "blk");
    gc_bend(*block.snake_h(), 161);
    gc_bend(*block.snake_v(), 162);
    gc_unbalance(*block.gate().wcam(), 163);
    auto x = gc_tensor(Shape{1, 2, 6, 6}, 164);
    ParamList<double> leaves{{"input", x}};
    block.collect(leaves);
    out.push_back({"dsc_block", gc_probe([&] { return block.forward(x); }, leaves, 165, opts)});
  }
  {
    TransformerBlock<double> block(8, 2, 2, 66, "tb");
    auto x = gc_tensor(Shape{1, 16, 8}, 67);
    ParamList<double> leaves{{"input", x}};
    block.collect(leaves);
    out.push_back({"transformer_block", gc_probe([&] { return block.forward(x, 4, 4); }, leaves, 68, opts)});
  }
  {
    FuseStage<double> stage(12, 4, 4, ChannelAttentionKind::kWcam, 69, "dec");
    gc_unbalance(*stage.gate().wcam(), 70);
    auto dsc = gc_tensor(Shape{1, 4, 4, 4}, 71), tr = gc_tensor(Shape{1, 4, 4, 4}, 72), below = gc_tensor(Shape{1, 4, 2, 2}, 73);
    ParamList<double> leaves{{"dsc", dsc}, {"transformer", tr}, {"below", below}};
    stage.collect(leaves);
    out.push_back({"decoder_stage", gc_probe([&] { return stage.forward(dsc, tr, below); }, leaves, 74, opts)});
  }
  {
    auto logits = gc_tensor(Shape{2, 2, 4, 4}, 75, -2, 2);
    auto bits = gc_tensor(Shape{2, 1, 4, 4}, 76, 0, 1, false);
    std::vector<double> g(bits.data().begin(), bits.data().end());
    for (auto& v : g) v = v < 0.3 ? 1.0 : 0.0;
    auto target = Tensor<double>::from(bits.shape(), g);
    out.push_back({"combined_loss", grad_check([&] { return combined_loss(logits, target); }, {{"logits", logits}}, opts)});
  }
}

/// Full tiny DSCformer on 1x1x32x32. Entries are sampled per tensor to keep
/// the finite-difference pass short. Bilinear snake sampling has a kink at
/// every integer coordinate and a full-size model has thousands of samples,
/// so the step shrinks to 1e-6 to stay inside the smooth pieces.
inline void gc_model(std::vector<GradCheckUnit>& out, GradCheckOptions opts, std::uint64_t seed = 80) {
  auto cfg = tiny_config();
  cfg.seed = seed;
  DSCformer<double> model(cfg);
  for (int s = 0; s < kDscStages; ++s) {
    gc_bend(*model.dsc_encoder().block(s).snake_h(), seed + 1 + 2 * s);
    gc_bend(*model.dsc_encoder().block(s).snake_v(), seed + 2 + 2 * s);
  }
  auto x = gc_tensor(Shape{1, 1, 32, 32}, seed + 15, 0, 1);
  auto params = model.parameters();
  ParamList<double> leaves{{"input", x}};
  for (const auto& p : params) leaves.push_back(p);
  if (opts.max_entries_per_tensor == 0) opts.max_entries_per_tensor = 3;
  opts.step = std::min(opts.step, 1e-6);
  out.push_back({"dscformer", gc_probe([&] { return model.forward(x); }, leaves, seed + 16, opts)});
}

}  // namespace detail

/// Runs every unit in `scope` on fixed-seed minimal instances.
inline std::vector<GradCheckUnit> run_gradcheck_suite(GradCheckScope scope, const GradCheckOptions& opts = {}) {
  std::vector<GradCheckUnit> out;
  switch (scope) {
    case GradCheckScope::kPrimitive: detail::gc_primitives(out, opts); break;
    case GradCheckScope::kDsconv: detail::gc_dsconv(out, opts); break;
    case GradCheckScope::kAttention: detail::gc_attention(out, opts); break;
    case GradCheckScope::kBlock: detail::gc_blocks(out, opts); break;
    case GradCheckScope::kModel: detail::gc_model(out, opts); break;
  }
  return out;
}

}  // namespace serpent
