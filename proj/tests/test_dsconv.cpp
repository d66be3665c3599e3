#include <gtest/gtest.h>

#include <cmath>

#include "naive_reference.hpp"
#include "serpent/dsconv.hpp"
#include "serpent/gradcheck.hpp"
#include "test_util.hpp"

namespace serpent {
namespace {

using testing::max_abs_diff;
using testing::random_tensor;

std::array<double, kOffsetChannels> steps_from(std::initializer_list<double> per_distance_fwd_bwd) {
  std::array<double, kOffsetChannels> s{};
  std::size_t i = 0;
  for (double v : per_distance_fwd_bwd) s[i++] = v;
  return s;
}

TEST(PyramidOffsets, ZeroParametersGiveZeroOffsets) {
  DSConv<float> layer(3, 2, SnakeAxis::kHorizontal, 1, "dsconv.t");
  for (int c = 1; c <= kPyramidLevels; ++c)
    for (auto& v : layer.pyramid_bias(c).mutable_data()) v = 0;
  auto field = compute_pyramid_offsets(random_tensor<float>(Shape{2, 3, 5, 7}, 1), layer);
  ASSERT_EQ(field.squashed.shape(), (Shape{2, kOffsetChannels, 5, 7}));
  for (float v : field.squashed.data()) EXPECT_EQ(v, 0.f);
}

TEST(PyramidOffsets, AxisBiasIsSpatiallyInvariant) {
  DSConv<double> layer(2, 2, SnakeAxis::kVertical, 1, "dsconv.t");
  const double b = 0.7;
  for (int c = 1; c <= kPyramidLevels; ++c) {
    auto bias = layer.pyramid_bias(c).mutable_data();
    std::fill(bias.begin(), bias.end(), 0.0);
    bias[1] = b;  // forward dy
  }
  auto field = compute_pyramid_offsets(random_tensor<double>(Shape{1, 2, 6, 6}, 2), layer);
  const std::size_t HW = 36;
  for (int ch = 0; ch < kOffsetChannels; ++ch)
    for (std::size_t p = 0; p < HW; ++p) {
      const bool fwd_dy = ch % 4 == 1;
      EXPECT_DOUBLE_EQ(field.squashed.data()[ch * HW + p], fwd_dy ? std::tanh(b) : 0.0);
    }
}

TEST(PyramidOffsets, EachLevelIsItsConvolutionThenTanh) {
  DSConv<double> layer(3, 2, SnakeAxis::kHorizontal, 1, "dsconv.t");
  testing::randomize_pyramid(layer, 3);
  auto x = random_tensor<double>(Shape{2, 3, 7, 6}, 4);
  auto field = compute_pyramid_offsets(x, layer);
  const std::size_t HW = 42;
  for (int c = 1; c <= kPyramidLevels; ++c) {
    const auto ref = testing::naive_conv2d(x, layer.pyramid_weight(c), layer.pyramid_bias(c).values(), 1, c);
    for (int n = 0; n < 2; ++n)
      for (int o = 0; o < 4; ++o)
        for (std::size_t p = 0; p < HW; ++p) {
          const double want = ref[(n * 4 + o) * HW + p];
          const std::size_t idx = (n * kOffsetChannels + 4 * (c - 1) + o) * HW + p;
          EXPECT_NEAR(field.raw.data()[idx], want, 1e-12);
          EXPECT_NEAR(field.squashed.data()[idx], std::tanh(want), 1e-12);
        }
  }
}

TEST(PyramidOffsets, ChannelMismatchRejected) {
  DSConv<float> layer(3, 2, SnakeAxis::kHorizontal, 1, "dsconv.t");
  EXPECT_THROW(compute_pyramid_offsets(Tensor<float>::zeros(Shape{1, 2, 4, 4}), layer), ContractError);
}

TEST(IterateChain, ZeroStepsCollapseToCenter) {
  const std::array<double, kOffsetChannels> zero{};
  auto chain = iterate_chain<double>(3, 5, zero);
  for (const auto& p : chain.points) {
    EXPECT_EQ(p.x, 5.0);
    EXPECT_EQ(p.y, 3.0);
  }
}

TEST(IterateChain, SaturatedHorizontalStepsFormStraightRow) {
  const auto s = steps_from({1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0});
  auto chain = iterate_chain<double>(10, 20, s);
  for (int j = 0; j < kChainLength; ++j) {
    EXPECT_EQ(chain.points[j].x, 20.0 + (j - 4));
    EXPECT_EQ(chain.points[j].y, 10.0);
  }
}

TEST(IterateChain, MatchesPrefixSumOracle) {
  CounterRng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    std::array<double, kOffsetChannels> s{};
    for (auto& v : s) v = rng.uniform(-1, 1);
    const int h = static_cast<int>(rng.uniform_int(0, 30)), w = static_cast<int>(rng.uniform_int(0, 30));
    auto chain = iterate_chain<double>(h, w, s);
    // Oracle: walk each direction one step at a time.
    double fx = w, fy = h, bx = w, by = h;
    for (int c = 1; c <= 4; ++c) {
      fx += s[4 * (c - 1) + 0];
      fy += s[4 * (c - 1) + 1];
      bx -= s[4 * (c - 1) + 2];
      by -= s[4 * (c - 1) + 3];
      EXPECT_NEAR(chain.points[4 + c].x, fx, 1e-6);
      EXPECT_NEAR(chain.points[4 + c].y, fy, 1e-6);
      EXPECT_NEAR(chain.points[4 - c].x, bx, 1e-6);
      EXPECT_NEAR(chain.points[4 - c].y, by, 1e-6);
    }
    EXPECT_EQ(chain.points[4].x, w);
    EXPECT_EQ(chain.points[4].y, h);
  }
}

TEST(IterateChain, TensorOpAgreesWithScalarChain) {
  auto steps = random_tensor<double>(Shape{2, kOffsetChannels, 4, 5}, 8, -0.99, 0.99);
  auto coords = chain_coordinates(steps);
  const std::size_t HW = 20;
  for (int n = 0; n < 2; ++n)
    for (int h = 0; h < 4; ++h)
      for (int w = 0; w < 5; ++w) {
        std::array<double, kOffsetChannels> s{};
        for (int ch = 0; ch < kOffsetChannels; ++ch) s[ch] = steps.data()[(n * kOffsetChannels + ch) * HW + h * 5 + w];
        auto chain = iterate_chain<double>(h, w, s);
        for (int j = 0; j < kChainLength; ++j) {
          EXPECT_DOUBLE_EQ(coords.data()[(n * 18 + 2 * j) * HW + h * 5 + w], chain.points[j].x);
          EXPECT_DOUBLE_EQ(coords.data()[(n * 18 + 2 * j + 1) * HW + h * 5 + w], chain.points[j].y);
        }
      }
}

TEST(BilinearSample, IntegerPointIsExactGridValue) {
  auto f = random_tensor<float>(Shape{1, 3, 5, 6}, 9);
  auto v = bilinear_sample(f, 0, {4.0, 2.0});
  for (int c = 0; c < 3; ++c) EXPECT_EQ(v[c], f.data()[c * 30 + 2 * 6 + 4]);
}

TEST(BilinearSample, MidpointIsMeanOfNeighbours) {
  auto f = Tensor<float>::from(Shape{1, 1, 2, 2}, {0, 1, 2, 3});
  EXPECT_FLOAT_EQ(bilinear_sample(f, 0, {0.5, 0.5})[0], 1.5f);
}

TEST(BilinearSample, ReproducesAffineField) {
  std::vector<double> v;
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) v.push_back(2.0 * x + 3.0 * y);
  auto f = Tensor<double>::from(Shape{1, 1, 8, 8}, v);
  EXPECT_NEAR(bilinear_sample(f, 0, {1.25, 2.5})[0], 10.0, 1e-12);
}

TEST(BilinearSample, NonFiniteCoordinateRejected) {
  auto f = Tensor<float>::zeros(Shape{1, 1, 2, 2});
  EXPECT_THROW(bilinear_sample(f, 0, {NAN, 0.0}), ContractError);
  auto coords = Tensor<float>::full(Shape{1, 2, 2, 2}, INFINITY);
  EXPECT_THROW(deform_sample(f, coords), ContractError);
}

TEST(BilinearSample, ClampedCoordinateHasZeroGradient) {
  auto f = Tensor<double>::from(Shape{1, 1, 1, 1}, {2.0});
  auto coords = Tensor<double>::from(Shape{1, 2, 1, 1}, {-2.5, 1.5}, true);
  auto out = deform_sample(f, coords);
  sum(out).backward();
  EXPECT_EQ(coords.grad()[0], 0.0);
  EXPECT_EQ(coords.grad()[1], 0.0);
  EXPECT_EQ(out.item(), 2.0);
}

TEST(DSConvForward, StraightChainEqualsLineConvolution) {
  for (auto axis : {SnakeAxis::kHorizontal, SnakeAxis::kVertical}) {
    DSConv<float> layer(2, 3, axis, 12, "dsconv.t");
    testing::freeze_straight(layer);
    auto x = random_tensor<float>(Shape{2, 2, 7, 9}, 13);
    auto y = dsconv_forward(x, layer);
    auto ref = testing::clamped_line_conv(x, layer.chain_weight(), layer.chain_bias(), axis == SnakeAxis::kVertical);
    std::vector<double> got(y.data().begin(), y.data().end());
    EXPECT_LT(max_abs_diff(got, ref), 1e-5);
  }
}

TEST(DSConvForward, FixedStraightModeEqualsLineConvolution) {
  DSConv<float> layer(2, 3, SnakeAxis::kVertical, 14, "dsconv.t", ChainMode::kFixedStraight);
  auto x = random_tensor<float>(Shape{1, 2, 8, 8}, 15);
  auto ref = testing::clamped_line_conv(x, layer.chain_weight(), layer.chain_bias(), true);
  auto y = layer.forward(x);
  std::vector<double> got(y.data().begin(), y.data().end());
  EXPECT_LT(max_abs_diff(got, ref), 1e-5);
  ParamList<float> params;
  layer.collect(params);
  EXPECT_EQ(params.size(), 2u);
}

TEST(DSConvForward, ConstantInputIgnoresOffsets) {
  DSConv<double> layer(3, 2, SnakeAxis::kHorizontal, 16, "dsconv.t");
  testing::randomize_pyramid(layer, 17, 2.0, 2.0);
  const double c = 0.8;
  auto y = dsconv_forward(Tensor<double>::full(Shape{1, 3, 6, 6}, c), layer);
  for (int o = 0; o < 2; ++o) {
    double wsum = 0;
    for (int i = 0; i < 3 * 9; ++i) wsum += layer.chain_weight().data()[o * 27 + i];
    const double want = wsum * c + layer.chain_bias().data()[o];
    for (int p = 0; p < 36; ++p) EXPECT_NEAR(y.data()[o * 36 + p], want, 1e-6);
  }
}

TEST(DSConvForward, MatchesNaiveReference) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    DSConv<double> layer(2, 3, seed % 2 ? SnakeAxis::kVertical : SnakeAxis::kHorizontal, seed, "dsconv.t");
    testing::randomize_pyramid(layer, 100 + seed);
    auto x = random_tensor<double>(Shape{1, 2, 6, 6}, 200 + seed);
    EXPECT_LT(max_abs_diff(dsconv_forward(x, layer).values(), testing::naive_dsconv(x, layer)), 1e-5);
  }
}

TEST(DSConvForward, ChainStaysInsideBoxAndContinuous) {
  DSConv<float> layer(2, 2, SnakeAxis::kHorizontal, 18, "dsconv.t");
  testing::randomize_pyramid(layer, 19, 5.0, 5.0);
  auto trace = layer.trace(random_tensor<float>(Shape{2, 2, 9, 9}, 20, -3, 3));
  const std::size_t HW = 81;
  for (int n = 0; n < 2; ++n)
    for (std::size_t p = 0; p < HW; ++p) {
      const double h = static_cast<double>(p / 9), w = static_cast<double>(p % 9);
      double prev_x = 0, prev_y = 0;
      for (int j = 0; j < kChainLength; ++j) {
        const double x = trace.coords.data()[(n * 18 + 2 * j) * HW + p];
        const double y = trace.coords.data()[(n * 18 + 2 * j + 1) * HW + p];
        EXPECT_LE(std::abs(x - w), 4.0 + 1e-5);
        EXPECT_LE(std::abs(y - h), 4.0 + 1e-5);
        if (j > 0) {
          EXPECT_LE(std::abs(x - prev_x), 1.0 + 1e-5);
          EXPECT_LE(std::abs(y - prev_y), 1.0 + 1e-5);
        }
        prev_x = x;
        prev_y = y;
      }
      EXPECT_EQ(trace.coords.data()[(n * 18 + 8) * HW + p], w);
      EXPECT_EQ(trace.coords.data()[(n * 18 + 9) * HW + p], h);
    }
}

TEST(DSConvForward, InitialChainIsStraightAlongAxis) {
  DSConv<double> layer(1, 1, SnakeAxis::kVertical, 21, "dsconv.t");
  auto trace = layer.trace(random_tensor<double>(Shape{1, 1, 9, 9}, 22));
  const std::size_t p = 4 * 9 + 4;
  for (int j = 0; j < kChainLength; ++j) {
    EXPECT_NEAR(trace.coords.data()[(2 * j) * 81 + p], 4.0, 1e-12);
    EXPECT_NEAR(trace.coords.data()[(2 * j + 1) * 81 + p], 4.0 + 0.95 * (j - 4), 1e-9);
  }
}

TEST(DSConvGradient, PassesFiniteDifferenceCheck) {
  DSConv<double> layer(2, 3, SnakeAxis::kHorizontal, 23, "dsconv.t");
  testing::randomize_pyramid(layer, 24);
  auto x = random_tensor<double>(Shape{1, 2, 6, 6}, 25, -1, 1, true);
  ParamList<double> leaves{{"input", x}};
  layer.collect(leaves);
  auto weights = testing::random_values<double>(3 * 36, 26);
  auto r = grad_check([&] { return weighted_sum(layer.forward(x), weights); }, leaves);
  EXPECT_TRUE(r.passed) << r.failure;
}

TEST(DSConvGradient, DeformSampleCoordinateGradient) {
  auto f = random_tensor<double>(Shape{1, 2, 5, 5}, 27, -1, 1, true);
  auto coords = random_tensor<double>(Shape{1, 6, 5, 5}, 28, 0.1, 3.9, true);
  auto weights = testing::random_values<double>(2 * 3 * 25, 29);
  auto r = grad_check([&] { return weighted_sum(deform_sample(f, coords), weights); }, {{"f", f}, {"coords", coords}});
  EXPECT_TRUE(r.passed) << r.failure;
}

TEST(DSConvParams, NamesFollowCheckpointScheme) {
  DSConv<float> layer(2, 3, SnakeAxis::kHorizontal, 1, "dsconv.h");
  ParamList<float> params;
  layer.collect(params);
  std::vector<std::string> names;
  for (auto& p : params) names.push_back(p.name);
  const std::vector<std::string> want = {
      "dsconv.h.pyramid.3.weight", "dsconv.h.pyramid.3.bias", "dsconv.h.pyramid.5.weight", "dsconv.h.pyramid.5.bias",
      "dsconv.h.pyramid.7.weight", "dsconv.h.pyramid.7.bias", "dsconv.h.pyramid.9.weight", "dsconv.h.pyramid.9.bias",
      "dsconv.h.chain.weight",     "dsconv.h.chain.bias"};
  EXPECT_EQ(names, want);
  EXPECT_EQ(params[6].tensor.shape(), (Shape{4, 2, 9, 9}));
  EXPECT_EQ(params[8].tensor.shape(), (Shape{3, 2, 9}));
}

}  // namespace
}  // namespace serpent
