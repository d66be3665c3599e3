#include <gtest/gtest.h>

#include <cmath>

#include "naive_reference.hpp"
#include "serpent/attention.hpp"
#include "serpent/gradcheck.hpp"
#include "test_util.hpp"

namespace serpent {
namespace {

using testing::max_abs_diff;
using testing::random_tensor;

double sigmoid_d(double v) { return 1.0 / (1.0 + std::exp(-v)); }

TEST(Wcam, RatioMustDivideChannels) {
  EXPECT_THROW(WCAM<float>(12, 8, 1, "wcam.0"), ConfigError);
  EXPECT_THROW(CAM<float>(12, 5, 1, "cam.0"), ConfigError);
  EXPECT_NO_THROW(WCAM<float>(16, 8, 1, "wcam.0"));
}

TEST(Wcam, TiedBranchesMatchCbamReference) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    WCAM<double> wcam(16, 4, seed, "wcam.0");
    testing::tie_wcam(wcam);
    auto x = random_tensor<double>(Shape{2, 16, 5, 6}, 1000 + seed, -2, 2);
    auto ref = testing::cbam_channel_reference(x, wcam.avg_mlp().w0, wcam.avg_mlp().w1);
    EXPECT_LT(max_abs_diff(wcam.forward(x).values(), ref), 1e-6);
  }
}

TEST(Wcam, CamMatchesCbamReference) {
  CAM<double> cam(8, 2, 3, "cam.0");
  auto x = random_tensor<double>(Shape{3, 8, 4, 4}, 4);
  EXPECT_LT(max_abs_diff(cam.forward(x).values(), testing::cbam_channel_reference(x, cam.w0(), cam.w1())), 1e-12);
}

TEST(Wcam, ZeroMaxWeightIgnoresMaxPath) {
  WCAM<double> wcam(8, 2, 5, "wcam.0");
  for (auto& v : wcam.w_max().mutable_data()) v = 0.0;
  auto x = random_tensor<double>(Shape{1, 8, 4, 4}, 6);
  auto before = wcam.forward(x).values();
  for (auto& v : wcam.max_mlp().w0.mutable_data()) v *= -3.0;
  EXPECT_EQ(wcam.forward(x).values(), before);
}

TEST(Wcam, ConstantInputUsesValueForBothDescriptors) {
  WCAM<double> wcam(4, 2, 7, "wcam.0");
  CounterRng rng(8);
  for (auto& v : wcam.w_avg().mutable_data()) v = rng.uniform(-2, 2);
  for (auto& v : wcam.w_max().mutable_data()) v = rng.uniform(-2, 2);
  std::vector<double> vals;
  const std::vector<double> level = {0.3, -0.7, 1.1, 0.0};
  for (double v : level)
    for (int p = 0; p < 9; ++p) vals.push_back(v);
  auto out = wcam.forward(Tensor<double>::from(Shape{1, 4, 3, 3}, vals));
  auto mlp = [&](const WCAM<double>::Mlp& m) {
    std::vector<double> hidden(2, 0.0), o(4, 0.0);
    for (int r = 0; r < 2; ++r) {
      for (int c = 0; c < 4; ++c) hidden[r] += m.w0.data()[r * 4 + c] * level[c];
      hidden[r] = std::max(0.0, hidden[r]);
    }
    for (int c = 0; c < 4; ++c)
      for (int r = 0; r < 2; ++r) o[c] += m.w1.data()[c * 2 + r] * hidden[r];
    return o;
  };
  const auto a = mlp(wcam.avg_mlp()), m = mlp(wcam.max_mlp());
  for (int c = 0; c < 4; ++c)
    EXPECT_NEAR(out.data()[c], sigmoid_d(wcam.w_avg().data()[c] * a[c] + wcam.w_max().data()[c] * m[c]), 1e-12);
}

TEST(Wcam, OutputStrictlyInsideUnitInterval) {
  WCAM<float> wcam(8, 4, 9, "wcam.0");
  auto out = wcam.forward(random_tensor<float>(Shape{4, 8, 6, 6}, 10, -3, 3));
  EXPECT_EQ(out.shape(), (Shape{4, 8, 1, 1}));
  for (float v : out.data()) {
    EXPECT_GT(v, 0.f);
    EXPECT_LT(v, 1.f);
  }
}

TEST(Wcam, PermutationEquivariant) {
  const int C = 6;
  WCAM<double> wcam(C, 3, 11, "wcam.0");
  CounterRng rng(12);
  for (auto& v : wcam.w_avg().mutable_data()) v = rng.uniform(-1, 2);
  for (auto& v : wcam.w_max().mutable_data()) v = rng.uniform(-1, 2);
  const std::vector<int> perm = {3, 0, 5, 1, 4, 2};
  auto x = random_tensor<double>(Shape{1, C, 3, 4}, 13);

  WCAM<double> permuted(C, 3, 11, "wcam.0");
  const int R = wcam.hidden();
  auto permute_params = [&](const WCAM<double>::Mlp& src, WCAM<double>::Mlp& dst) {
    for (int r = 0; r < R; ++r)
      for (int c = 0; c < C; ++c) dst.w0.mutable_data()[r * C + c] = src.w0.data()[r * C + perm[c]];
    for (int c = 0; c < C; ++c)
      for (int r = 0; r < R; ++r) dst.w1.mutable_data()[c * R + r] = src.w1.data()[perm[c] * R + r];
  };
  permute_params(wcam.avg_mlp(), permuted.avg_mlp());
  permute_params(wcam.max_mlp(), permuted.max_mlp());
  std::vector<double> px(x.numel());
  for (int c = 0; c < C; ++c) {
    permuted.w_avg().mutable_data()[c] = wcam.w_avg().data()[perm[c]];
    permuted.w_max().mutable_data()[c] = wcam.w_max().data()[perm[c]];
    for (int p = 0; p < 12; ++p) px[c * 12 + p] = x.data()[perm[c] * 12 + p];
  }
  auto out = wcam.forward(x);
  auto pout = permuted.forward(Tensor<double>::from(x.shape(), px));
  for (int c = 0; c < C; ++c) EXPECT_NEAR(pout.data()[c], out.data()[perm[c]], 1e-14);
}

TEST(Sam, ZeroKernelGivesOneHalf) {
  SAM<float> sam(1, "sam.0");
  for (auto& v : sam.kernel().mutable_data()) v = 0;
  auto out = sam.forward(random_tensor<float>(Shape{2, 3, 5, 5}, 14));
  EXPECT_EQ(out.shape(), (Shape{2, 1, 5, 5}));
  for (float v : out.data()) EXPECT_EQ(v, 0.5f);
}

TEST(Sam, ConstantInputAwayFromBorderIsConstant) {
  SAM<double> sam(15, "sam.0");
  auto out = sam.forward(Tensor<double>::full(Shape{1, 2, 11, 11}, 0.4));
  // Zero padding changes the border; the interior with a full 7x7 window is constant.
  for (int y = 3; y < 8; ++y)
    for (int x = 3; x < 8; ++x) EXPECT_NEAR(out.data()[y * 11 + x], out.data()[5 * 11 + 5], 1e-14);
}

TEST(Sam, MatchesNaiveOracle) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    SAM<double> sam(seed, "sam.0");
    sam.bias().mutable_data()[0] = 0.1 * static_cast<double>(seed);
    auto x = random_tensor<double>(Shape{2, 3, 6, 9}, 16 + seed);
    auto ref = testing::sam_reference(x, sam.kernel(), sam.bias().item());
    EXPECT_LT(max_abs_diff(sam.forward(x).values(), ref), 1e-6);
  }
}

TEST(ApplyAttention, OnesAreIdentityAndZeroChannelKills) {
  auto x = random_tensor<float>(Shape{2, 3, 4, 4}, 17);
  auto ones_c = Tensor<float>::full(Shape{2, 3, 1, 1}, 1.f);
  auto ones_s = Tensor<float>::full(Shape{2, 1, 4, 4}, 1.f);
  EXPECT_EQ(apply_attention(x, ones_c, ones_s).values(), x.values());
  auto zero = apply_attention(x, Tensor<float>::zeros(Shape{2, 3, 1, 1}), ones_s);
  for (float v : zero.data()) EXPECT_EQ(v, 0.f);
}

TEST(ApplyAttention, MatchesElementwiseOracle) {
  auto x = random_tensor<double>(Shape{2, 3, 4, 5}, 18);
  auto ca = random_tensor<double>(Shape{2, 3, 1, 1}, 19, 0, 1);
  auto sa = random_tensor<double>(Shape{2, 1, 4, 5}, 20, 0, 1);
  auto out = apply_attention(x, ca, sa);
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 3; ++c)
      for (int p = 0; p < 20; ++p) {
        const std::size_t i = (n * 3 + c) * 20 + p;
        EXPECT_EQ(out.data()[i], x.data()[i] * ca.data()[n * 3 + c] * sa.data()[n * 20 + p]);
      }
}

TEST(ApplyAttention, ShapeMismatchRejected) {
  auto x = Tensor<float>::zeros(Shape{1, 3, 4, 4});
  EXPECT_THROW(apply_attention(x, Tensor<float>::zeros(Shape{1, 2, 1, 1}), Tensor<float>::zeros(Shape{1, 1, 4, 4})),
               ContractError);
  EXPECT_THROW(apply_attention(x, Tensor<float>::zeros(Shape{1, 3, 1, 1}), Tensor<float>::zeros(Shape{1, 1, 3, 4})),
               ContractError);
}

TEST(AttentionGate, SpatialSeesChannelRefinedFeatures) {
  AttentionGate<double> gate(8, 4, ChannelAttentionKind::kWcam, 21, "gate");
  auto x = random_tensor<double>(Shape{1, 8, 5, 5}, 22);
  auto ca = gate.channel_attention(x);
  auto refined = mul_channel(x, ca);
  auto want = apply_attention(x, ca, gate.sam().forward(refined));
  EXPECT_LT(max_abs_diff(gate.forward(x).values(), want.values()), 1e-15);
}

TEST(AttentionGate, ParameterNamesPerKind) {
  auto names = [](ChannelAttentionKind kind) {
    AttentionGate<float> gate(8, 4, kind, 1, "blk");
    ParamList<float> params;
    gate.collect(params);
    std::vector<std::string> out;
    for (auto& p : params) out.push_back(p.name);
    return out;
  };
  EXPECT_EQ(names(ChannelAttentionKind::kNone), (std::vector<std::string>{"blk.sam.kernel", "blk.sam.bias"}));
  EXPECT_EQ(names(ChannelAttentionKind::kCam),
            (std::vector<std::string>{"blk.cam.w0", "blk.cam.w1", "blk.sam.kernel", "blk.sam.bias"}));
  EXPECT_EQ(names(ChannelAttentionKind::kWcam),
            (std::vector<std::string>{"blk.wcam.avg.w0", "blk.wcam.avg.w1", "blk.wcam.max.w0", "blk.wcam.max.w1",
                                      "blk.wcam.wavg", "blk.wcam.wmax", "blk.sam.kernel", "blk.sam.bias"}));
}

TEST(AttentionGradient, WcamSamAndGatePass) {
  auto x = random_tensor<double>(Shape{2, 4, 5, 5}, 23, -1, 1, true);
  WCAM<double> wcam(4, 2, 24, "wcam.0");
  SAM<double> sam(25, "sam.0");
  CounterRng rng(26);
  for (auto& v : wcam.w_avg().mutable_data()) v = rng.uniform(0.5, 1.5);
  for (auto& v : wcam.w_max().mutable_data()) v = rng.uniform(-1.5, -0.5);
  ParamList<double> leaves{{"input", x}};
  wcam.collect(leaves);
  sam.collect(leaves);
  auto w = testing::random_values<double>(x.numel(), 27);
  auto r = grad_check([&] { return weighted_sum(apply_attention(x, wcam.forward(x), sam.forward(x)), w); }, leaves);
  EXPECT_TRUE(r.passed) << r.failure;

  AttentionGate<double> gate(4, 2, ChannelAttentionKind::kCam, 28, "gate");
  ParamList<double> gate_leaves{{"input", x}};
  gate.collect(gate_leaves);
  auto r2 = grad_check([&] { return weighted_sum(gate.forward(x), w); }, gate_leaves);
  EXPECT_TRUE(r2.passed) << r2.failure;
}

}  // namespace
}  // namespace serpent
