#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "serpent/checkpoint.hpp"
#include "serpent/gradcheck.hpp"
#include "serpent/ops.hpp"
#include "test_util.hpp"

namespace serpent {
namespace {

using testing::max_abs_diff;
using testing::random_tensor;
using testing::random_values;

const Tensor<double> kNoBias;

TEST(Conv2d, AllOnesCenterIsNine) {
  auto x = Tensor<float>::full(Shape{1, 1, 3, 3}, 1.f);
  auto w = Tensor<float>::full(Shape{1, 1, 3, 3}, 1.f);
  auto b = Tensor<float>::zeros(Shape{1});
  auto y = conv2d(x, w, b, 1, 1);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
  EXPECT_FLOAT_EQ(y.data()[4], 9.f);
  EXPECT_FLOAT_EQ(y.data()[0], 4.f);
}

TEST(Conv2d, DeltaKernelIsIdentity) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const int C = 1 + static_cast<int>(seed % 3), H = 3 + static_cast<int>(seed % 5), W = 4 + static_cast<int>(seed % 4);
    auto x = random_tensor<float>(Shape{2, C, H, W}, seed);
    auto w = Tensor<float>::zeros(Shape{C, C, 3, 3});
    for (int c = 0; c < C; ++c) w.mutable_data()[((c * C + c) * 3 + 1) * 3 + 1] = 1.f;
    auto y = conv2d(x, w, Tensor<float>{}, 1, 1);
    EXPECT_EQ(max_abs_diff(y.values(), x.values()), 0.0);
  }
}

TEST(Conv2d, MatchesNestedLoopOracle) {
  auto x = random_tensor<float>(Shape{2, 3, 8, 8}, 1);
  auto w = random_tensor<float>(Shape{4, 3, 3, 3}, 2);
  auto b = random_tensor<float>(Shape{4}, 3);
  for (int stride : {1, 2}) {
    auto y = conv2d(x, w, b, stride, 1);
    auto ref = testing::naive_conv2d(x, w, b.values(), stride, 1);
    EXPECT_LT(max_abs_diff(y.values(), ref), 1e-5) << "stride " << stride;
  }
  auto w1 = random_tensor<float>(Shape{5, 3, 1, 1}, 4);
  EXPECT_LT(max_abs_diff(conv2d(x, w1, Tensor<float>{}, 1, 0).values(), testing::naive_conv2d(x, w1, {}, 1, 0)), 1e-5);
}

TEST(Conv2d, OutputSizeFormula) {
  auto x = Tensor<float>::zeros(Shape{1, 2, 64, 64});
  EXPECT_EQ(conv2d(x, Tensor<float>::zeros(Shape{3, 2, 7, 7}), Tensor<float>{}, 4, 3).shape(), (Shape{1, 3, 16, 16}));
  EXPECT_EQ(conv2d(x, Tensor<float>::zeros(Shape{3, 2, 3, 3}), Tensor<float>{}, 2, 1).shape(), (Shape{1, 3, 32, 32}));
}

TEST(Conv2d, ShapeMismatchNamesBothShapes) {
  auto x = Tensor<float>::zeros(Shape{1, 2, 4, 4});
  auto w = Tensor<float>::zeros(Shape{1, 3, 3, 3});
  try {
    conv2d(x, w, Tensor<float>{}, 1, 1);
    FAIL() << "expected ContractError";
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("(1,2,4,4)"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("(1,3,3,3)"), std::string::npos);
  }
}

TEST(Linear, IdentityAndBiasOnly) {
  auto x = random_tensor<float>(Shape{3, 4}, 5);
  auto eye = Tensor<float>::zeros(Shape{4, 4});
  for (int i = 0; i < 4; ++i) eye.mutable_data()[i * 5] = 1.f;
  EXPECT_EQ(max_abs_diff(linear(x, eye, Tensor<float>::zeros(Shape{4})).values(), x.values()), 0.0);

  auto b = Tensor<float>::from(Shape{2}, {0.5f, -2.f});
  auto y = linear(x, Tensor<float>::zeros(Shape{2, 4}), b);
  for (int r = 0; r < 3; ++r) {
    EXPECT_EQ(y.data()[r * 2], 0.5f);
    EXPECT_EQ(y.data()[r * 2 + 1], -2.f);
  }
}

TEST(Linear, MatchesDotProductOracle) {
  auto x = random_tensor<float>(Shape{2, 4}, 6);
  auto w = random_tensor<float>(Shape{3, 4}, 7);
  auto b = random_tensor<float>(Shape{3}, 8);
  auto y = linear(x, w, b);
  for (int i = 0; i < 2; ++i)
    for (int o = 0; o < 3; ++o) {
      double acc = b.data()[o];
      for (int k = 0; k < 4; ++k) acc += static_cast<double>(x.data()[i * 4 + k]) * w.data()[o * 4 + k];
      EXPECT_NEAR(y.data()[i * 3 + o], acc, 1e-6);
    }
}

TEST(Linear, ShapeMismatch) {
  EXPECT_THROW(linear(Tensor<float>::zeros(Shape{2, 4}), Tensor<float>::zeros(Shape{3, 5}), Tensor<float>{}), ContractError);
}

TEST(MaxPool2, SingleWindowAndConstant) {
  auto x = Tensor<float>::from(Shape{1, 1, 2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(max_pool2(x).item(), 4.f);
  auto c = Tensor<float>::full(Shape{1, 2, 6, 4}, 3.5f);
  auto y = max_pool2(c);
  EXPECT_EQ(y.shape(), (Shape{1, 2, 3, 2}));
  for (float v : y.data()) EXPECT_EQ(v, 3.5f);
}

TEST(MaxPool2, MatchesWindowOracle) {
  auto x = random_tensor<float>(Shape{1, 1, 8, 8}, 9);
  auto y = max_pool2(x);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      float m = -INFINITY;
      for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b) m = std::max(m, x.data()[(2 * i + a) * 8 + 2 * j + b]);
      EXPECT_EQ(y.data()[i * 4 + j], m);
    }
}

TEST(MaxPool2, TieRoutesGradientToFirstOccurrence) {
  auto x = Tensor<double>::from(Shape{1, 1, 2, 2}, {1, 1, 1, 1}, true);
  sum(max_pool2(x)).backward();
  EXPECT_EQ(x.grad()[0], 1.0);
  EXPECT_EQ(x.grad()[1] + x.grad()[2] + x.grad()[3], 0.0);
}

TEST(MaxPool2, OddDimsRejected) {
  EXPECT_THROW(max_pool2(Tensor<float>::zeros(Shape{1, 1, 3, 4})), ContractError);
  EXPECT_THROW(max_pool2(Tensor<float>::zeros(Shape{1, 1, 4, 5})), ContractError);
}

TEST(GlobalPool, ConstantAndKnownChannel) {
  auto c = Tensor<float>::full(Shape{1, 3, 4, 4}, -1.25f);
  for (auto kind : {PoolKind::kAvg, PoolKind::kMax}) {
    const auto pooled = global_pool(c, kind);
    for (float v : pooled.data()) EXPECT_EQ(v, -1.25f);
  }
  auto x = Tensor<float>::from(Shape{1, 1, 2, 2}, {1, 2, 3, 4});
  EXPECT_FLOAT_EQ(global_pool(x, PoolKind::kAvg).item(), 2.5f);
  EXPECT_FLOAT_EQ(global_pool(x, PoolKind::kMax).item(), 4.f);
}

TEST(GlobalPool, MatchesReductionOracle) {
  auto x = random_tensor<float>(Shape{2, 5, 7, 7}, 10);
  auto avg = global_pool(x, PoolKind::kAvg);
  auto mx = global_pool(x, PoolKind::kMax);
  ASSERT_EQ(avg.shape(), (Shape{2, 5, 1, 1}));
  for (int nc = 0; nc < 10; ++nc) {
    double s = 0, m = -INFINITY;
    for (int i = 0; i < 49; ++i) {
      s += x.data()[nc * 49 + i];
      m = std::max(m, static_cast<double>(x.data()[nc * 49 + i]));
    }
    EXPECT_NEAR(avg.data()[nc], s / 49, 1e-6);
    EXPECT_EQ(mx.data()[nc], m);
  }
}

TEST(UpsampleBilinear, ConstantAndSinglePixel) {
  auto c = Tensor<float>::full(Shape{2, 2, 3, 5}, 0.75f);
  auto y = upsample_bilinear(c, 2);
  EXPECT_EQ(y.shape(), (Shape{2, 2, 6, 10}));
  for (float v : y.data()) EXPECT_FLOAT_EQ(v, 0.75f);
  auto one = Tensor<float>::from(Shape{1, 1, 1, 1}, {3.f});
  const auto up = upsample_bilinear(one, 2);
  for (float v : up.data()) EXPECT_EQ(v, 3.f);
}

TEST(UpsampleBilinear, RampMatchesHalfPixelFormula) {
  const int H = 4, W = 5, f = 2;
  std::vector<double> v;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) v.push_back(0.5 * x + 2.0 * y + 1.0);
  auto out = upsample_bilinear(Tensor<double>::from(Shape{1, 1, H, W}, v), f);
  // Interior outputs sample an affine field, so the value is the field at
  // the half-pixel source coordinate ((o + 0.5) / f - 0.5).
  for (int oy = 1; oy < H * f - 1; ++oy)
    for (int ox = 1; ox < W * f - 1; ++ox) {
      const double sy = (oy + 0.5) / f - 0.5, sx = (ox + 0.5) / f - 0.5;
      EXPECT_NEAR(out.data()[oy * W * f + ox], 0.5 * sx + 2.0 * sy + 1.0, 1e-6);
    }
}

TEST(UpsampleBilinear, FactorBelowTwoRejected) {
  EXPECT_THROW(upsample_bilinear(Tensor<float>::zeros(Shape{1, 1, 2, 2}), 1), ContractError);
}

TEST(Activation, KnownValues) {
  auto x = Tensor<double>::from(Shape{2}, {-1.0, 2.0});
  auto r = relu(x);
  EXPECT_EQ(r.data()[0], 0.0);
  EXPECT_EQ(r.data()[1], 2.0);
  auto z = Tensor<double>::zeros(Shape{1});
  EXPECT_EQ(sigmoid(z).item(), 0.5);
  EXPECT_EQ(tanh(z).item(), 0.0);
  EXPECT_EQ(gelu(z).item(), 0.0);
}

TEST(Activation, SigmoidGradientAtZero) {
  auto z = Tensor<double>::zeros(Shape{1}, true);
  sigmoid(z).backward();
  EXPECT_NEAR(z.grad()[0], 0.25, 1e-12);
  const double h = 1e-4;
  const double fd = (detail::sigmoid_scalar(h) - detail::sigmoid_scalar(-h)) / (2 * h);
  EXPECT_NEAR(z.grad()[0], fd, 1e-8);
}

TEST(LayerNorm, ConstantRowAndSignedPair) {
  auto g = Tensor<double>::full(Shape{3}, 1.0);
  auto s = Tensor<double>::zeros(Shape{3});
  const auto flat = layer_norm(Tensor<double>::full(Shape{1, 2, 3}, 4.0), g, s);
  for (double v : flat.data()) EXPECT_EQ(v, 0.0);
  auto y = layer_norm(Tensor<double>::from(Shape{1, 1, 2}, {1.0, -1.0}), Tensor<double>::full(Shape{2}, 1.0),
                      Tensor<double>::zeros(Shape{2}));
  EXPECT_NEAR(y.data()[0], 1.0, 1e-5);
  EXPECT_NEAR(y.data()[1], -1.0, 1e-5);
}

TEST(LayerNorm, ZeroMeanUnitVariance) {
  const int C = 16;
  auto x = random_tensor<double>(Shape{2, 3, C}, 11, -3, 5);
  auto y = layer_norm(x, Tensor<double>::full(Shape{C}, 1.0), Tensor<double>::zeros(Shape{C}));
  for (int r = 0; r < 6; ++r) {
    double m = 0, var = 0;
    for (int c = 0; c < C; ++c) m += y.data()[r * C + c];
    m /= C;
    for (int c = 0; c < C; ++c) var += (y.data()[r * C + c] - m) * (y.data()[r * C + c] - m);
    EXPECT_LT(std::abs(m), 1e-6);
    EXPECT_NEAR(var / C, 1.0, 1e-3);
  }
}

// --- gradient checks -------------------------------------------------------

template <typename Fn>
GradCheckReport check_unary(Fn fn, const Shape& shape, std::uint64_t seed, ParamList<double> extra = {},
                            GradCheckOptions opts = {}) {
  auto x = random_tensor<double>(shape, seed, -1, 1, true);
  ParamList<double> leaves{{"input", x}};
  for (auto& p : extra) leaves.push_back(p);
  auto probe_shape = fn(x).shape();
  auto weights = random_values<double>(probe_shape.numel(), seed + 1000);
  return grad_check([&] { return weighted_sum(fn(x), weights); }, leaves, opts);
}

TEST(GradCheck, LinearPasses) {
  auto w = random_tensor<double>(Shape{3, 4}, 20, -1, 1, true);
  auto b = random_tensor<double>(Shape{3}, 21, -1, 1, true);
  auto r = check_unary([&](const Tensor<double>& x) { return linear(x, w, b); }, Shape{2, 4}, 22, {{"w", w}, {"b", b}});
  EXPECT_TRUE(r.passed) << r.failure;
}

TEST(GradCheck, Conv2dPasses) {
  auto w = random_tensor<double>(Shape{4, 3, 3, 3}, 23, -1, 1, true);
  auto b = random_tensor<double>(Shape{4}, 24, -1, 1, true);
  for (int stride : {1, 2}) {
    auto r = check_unary([&](const Tensor<double>& x) { return conv2d(x, w, b, stride, 1); }, Shape{2, 3, 8, 8}, 25,
                         {{"w", w}, {"b", b}});
    EXPECT_TRUE(r.passed) << r.failure;
  }
}

TEST(GradCheck, DetectsSignFlippedBackward) {
  auto w = random_tensor<double>(Shape{3, 4}, 26, -1, 1, true);
  // A linear op whose recorded backward negates the input gradient.
  auto broken = [&](const Tensor<double>& x) {
    auto y = linear(x.detach(), w, kNoBias);
    return Tensor<double>::make_result(y.shape(), y.values(), {x, w}, [x, w](detail::Node<double>& self) {
      const int R = x.dim(0), Cin = x.dim(1), Cout = w.dim(0);
      double* gx = x.node()->grad_buffer();
      for (int r = 0; r < R; ++r)
        for (int c = 0; c < Cin; ++c)
          for (int o = 0; o < Cout; ++o) gx[r * Cin + c] -= self.grad[r * Cout + o] * w.data()[o * Cin + c];
    });
  };
  auto r = check_unary(broken, Shape{2, 4}, 27);
  EXPECT_FALSE(r.passed);
  EXPECT_GT(r.max_rel_error, 1.0);

  GradCheckOptions flipped;
  flipped.analytic_scale = -1.0;
  auto r2 = check_unary([&](const Tensor<double>& x) { return linear(x, w, kNoBias); }, Shape{2, 4}, 28, {}, flipped);
  EXPECT_FALSE(r2.passed);
}

TEST(GradCheck, NonFiniteGradientNamesTensor) {
  auto x = Tensor<double>::from(Shape{1}, {1.0}, true);
  auto bad = [&] {
    return Tensor<double>::make_result(Shape{1}, {x.item()}, {x}, [x](detail::Node<double>&) {
      x.node()->grad_buffer()[0] = NAN;
    });
  };
  auto r = grad_check(bad, {{"culprit", x}});
  EXPECT_FALSE(r.passed);
  EXPECT_NE(r.failure.find("culprit"), std::string::npos);
}

TEST(GradCheck, EveryPrimitivePasses) {
  const double tol = 1e-3;
  auto w = random_tensor<double>(Shape{3, 4, 3, 3}, 30, -1, 1, true);
  auto b = random_tensor<double>(Shape{3}, 31, -1, 1, true);
  auto dw = random_tensor<double>(Shape{4, 1, 3, 3}, 32, -1, 1, true);
  auto lw = random_tensor<double>(Shape{5, 8}, 33, -1, 1, true);
  auto gain = random_tensor<double>(Shape{8}, 34, 0.5, 1.5, true);
  auto shift = random_tensor<double>(Shape{8}, 35, -1, 1, true);
  auto other = random_tensor<double>(Shape{2, 4, 8, 8}, 36);
  auto chan = random_tensor<double>(Shape{2, 4, 1, 1}, 37, 0.1, 1, true);
  auto spat = random_tensor<double>(Shape{2, 1, 8, 8}, 38, 0.1, 1, true);
  auto srw = random_tensor<double>(Shape{3, 4, 2, 2}, 39, -1, 1, true);
  auto kk = random_tensor<double>(Shape{2, 3, 8}, 41, -1, 1, true);
  auto vv = random_tensor<double>(Shape{2, 3, 8}, 42, -1, 1, true);
  const Shape s{2, 4, 8, 8};

  struct Case {
    const char* name;
    std::function<Tensor<double>(const Tensor<double>&)> fn;
    ParamList<double> extra;
    Shape shape;
  };
  std::vector<Case> cases = {
      {"conv2d", [&](auto& x) { return conv2d(x, w, b, 1, 1); }, {{"w", w}, {"b", b}}, s},
      {"depthwise", [&](auto& x) { return depthwise_conv2d(x, dw, Tensor<double>{}, 1); }, {{"dw", dw}}, s},
      {"linear", [&](auto& x) { return linear(x, lw, Tensor<double>{}); }, {{"lw", lw}}, Shape{2, 6, 8}},
      {"max_pool2", [&](auto& x) { return max_pool2(x); }, {}, s},
      {"global_avg", [&](auto& x) { return global_pool(x, PoolKind::kAvg); }, {}, s},
      {"global_max", [&](auto& x) { return global_pool(x, PoolKind::kMax); }, {}, s},
      {"upsample", [&](auto& x) { return upsample_bilinear(x, 2); }, {}, Shape{2, 4, 4, 4}},
      {"relu", [&](auto& x) { return relu(x); }, {}, s},
      {"sigmoid", [&](auto& x) { return sigmoid(x); }, {}, s},
      {"tanh", [&](auto& x) { return tanh(x); }, {}, s},
      {"gelu", [&](auto& x) { return gelu(x); }, {}, s},
      {"layer_norm", [&](auto& x) { return layer_norm(x, gain, shift); }, {{"gain", gain}, {"shift", shift}}, Shape{2, 6, 8}},
      {"mul", [&](auto& x) { return mul(x, other); }, {}, s},
      {"mul_channel", [&](auto& x) { return mul_channel(x, chan); }, {{"chan", chan}}, s},
      {"mul_spatial", [&](auto& x) { return mul_spatial(x, spat); }, {{"spat", spat}}, s},
      {"concat", [&](auto& x) { return concat_channels<double>({x, relu(x), x}); }, {}, s},
      {"channel_mean", [&](auto& x) { return channel_reduce(x, PoolKind::kAvg); }, {}, s},
      {"channel_max", [&](auto& x) { return channel_reduce(x, PoolKind::kMax); }, {}, s},
      {"tokens", [&](auto& x) { return from_tokens(scale(to_tokens(x), 2.0), 8, 8); }, {}, s},
      {"strided_conv", [&](auto& x) { return conv2d(x, srw, b, 2, 0); }, {{"srw", srw}, {"b", b}}, s},
      {"replicate_pad", [&](auto& x) { return replicate_pad(x, 2); }, {}, Shape{2, 4, 3, 5}},
      {"add", [&](auto& x) { return add(x, mul(x, other)); }, {}, s},
      {"attention", [&](auto& x) { return multi_head_attention(x, kk, vv, 2); }, {{"k", kk}, {"v", vv}}, Shape{2, 5, 8}},
  };
  for (auto& c : cases) {
    auto r = check_unary(c.fn, c.shape, 40, c.extra);
    EXPECT_TRUE(r.passed) << c.name << ": " << r.failure;
    EXPECT_LE(r.max_rel_error, tol) << c.name;
  }
}

TEST(Backward, GradientShapesMatchForwardShapes) {
  auto x = random_tensor<double>(Shape{2, 3, 6, 6}, 50, -1, 1, true);
  auto w = random_tensor<double>(Shape{4, 3, 3, 3}, 51, -1, 1, true);
  auto b = random_tensor<double>(Shape{4}, 52, -1, 1, true);
  sum(max_pool2(relu(conv2d(x, w, b, 1, 1)))).backward();
  EXPECT_EQ(x.grad().size(), x.numel());
  EXPECT_EQ(w.grad().size(), w.numel());
  EXPECT_EQ(b.grad().size(), b.numel());
}

TEST(Forward, DeterministicBitIdentical) {
  auto x = random_tensor<float>(Shape{2, 3, 16, 16}, 60);
  auto w = random_tensor<float>(Shape{8, 3, 5, 5}, 61);
  auto a = conv2d(x, w, Tensor<float>{}, 1, 2);
  auto b = conv2d(x, w, Tensor<float>{}, 1, 2);
  EXPECT_EQ(std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(float)), 0);
}

// --- checkpoint -------------------------------------------------------------

TEST(Checkpoint, BitExactLayout) {
  ParamList<float> params{{"b", Tensor<float>::from(Shape{2}, {1.0f, -2.0f})},
                          {"a", Tensor<float>::from(Shape{1, 1}, {0.5f})}};
  const auto bytes = encode_checkpoint(to_checkpoint(params));
  const std::vector<unsigned char> expected = {
      'S', 'P', 'T', '1', 2, 0, 0, 0,
      1, 0, 0, 0, 'a', 2, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 0x00, 0x00, 0x00, 0x3F,
      1, 0, 0, 0, 'b', 1, 0, 0, 0, 2, 0, 0, 0, 0x00, 0x00, 0x80, 0x3F, 0x00, 0x00, 0x00, 0xC0};
  EXPECT_EQ(bytes, expected);
}

TEST(Checkpoint, RoundTripPreservesNamesAndValues) {
  ParamList<float> params{{"layer.weight", random_tensor<float>(Shape{3, 2, 3, 3}, 70)},
                          {"layer.bias", random_tensor<float>(Shape{3}, 71)}};
  const auto decoded = decode_checkpoint(encode_checkpoint(to_checkpoint(params)));
  ParamList<float> target{{"layer.weight", Tensor<float>::zeros(Shape{3, 2, 3, 3})}, {"layer.bias", Tensor<float>::zeros(Shape{3})}};
  apply_checkpoint(decoded, target);
  for (int i = 0; i < 2; ++i) EXPECT_EQ(target[i].tensor.values(), params[i].tensor.values());
}

TEST(Checkpoint, RejectsTruncationAndMismatch) {
  ParamList<float> params{{"w", random_tensor<float>(Shape{4}, 72)}};
  auto bytes = encode_checkpoint(to_checkpoint(params));
  auto cut = bytes;
  cut.resize(cut.size() - 3);
  EXPECT_THROW(decode_checkpoint(cut), DataError);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad_magic), DataError);
  ParamList<float> wrong{{"w", Tensor<float>::zeros(Shape{5})}};
  try {
    apply_checkpoint(decode_checkpoint(bytes), wrong);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("w"), std::string::npos);
  }
}

TEST(Checkpoint, DuplicateNamesRejected) {
  ParamList<float> params{{"x", Tensor<float>::zeros(Shape{1})}, {"x", Tensor<float>::zeros(Shape{1})}};
  EXPECT_THROW(to_checkpoint(params), ConfigError);
}

}  // namespace
}  // namespace serpent
