#include <gtest/gtest.h>

#include <cmath>

#include "sttr/sttr.hpp"
#include "test_util.hpp"

using namespace sttr;

namespace {

const LossNetwork<float>& desk_loss_net() {
  static const auto net = LossNetwork<float>::random(0.25, 1234);
  return net;
}

Tensor image(std::uint64_t seed, std::size_t h = 64, std::size_t w = 64) {
  return testutil::random_tensor({1, 3, h, w}, seed, 0.0, 1.0);
}

}  // namespace

TEST(Rbc, ScaledConfigHasThreeUpsamplesAndRgbOutput) {
  const auto cfg = RbcConfig::scaled(0.25);
  ASSERT_EQ(cfg.stages.size(), 4u);
  EXPECT_EQ(cfg.upsample_count(), 3u);
  EXPECT_EQ(cfg.stages[0].out_channels, 64u);
  EXPECT_EQ(cfg.stages[1].out_channels, 32u);
  EXPECT_EQ(cfg.stages[2].out_channels, 16u);
  EXPECT_EQ(cfg.stages.back().out_channels, 3u);
  EXPECT_FALSE(cfg.stages.back().upsample);
  const auto full = RbcConfig::scaled(1.0);
  EXPECT_EQ(full.stages[0].out_channels, 256u);
  EXPECT_EQ(full.stages[2].out_channels, 64u);
  EXPECT_EQ(ModelConfig::desk().decoder().upsample_count(), 3u);
}

TEST(Rbc, BlockShapes) {
  ParameterStore<float> store;
  Rng rng(1);
  const auto up = RbcBlock<float>::create(store, "a", 4, 3, true, rng);
  EXPECT_EQ(rbc_block(up, testutil::random_tensor({1, 4, 5, 6}, 2)).shape(), (Shape{1, 3, 10, 12}));
  const auto flat = RbcBlock<float>::create(store, "b", 4, 4, false, rng);
  EXPECT_EQ(rbc_block(flat, testutil::random_tensor({1, 4, 5, 6}, 2)).shape(), (Shape{1, 4, 5, 6}));
  EXPECT_FALSE(flat.projected);
  EXPECT_TRUE(up.projected);
}

TEST(Rbc, ZeroWeightsPassUpsampledInput) {
  ParameterStore<float> store;
  Rng rng(3);
  const auto block = RbcBlock<float>::create(store, "z", 5, 5, true, rng);
  for (const auto& e : store.entries()) {
    auto t = e.tensor;
    for (auto& v : t.data()) v = 0.0f;
  }
  const auto x = testutil::random_tensor({1, 5, 3, 4}, 4);
  EXPECT_EQ(block(x).values(), bilinear_upsample2x(x).values());
}

TEST(CnnDecoder, ReconstructsEightTimesTheGrid) {
  ParameterStore<float> store;
  Rng rng(5);
  CnnDecoder<float> dec(store, "dec", 64, RbcConfig::scaled(0.25), rng);
  for (auto [h, w] : {std::pair<std::size_t, std::size_t>{1, 1}, {2, 3}, {4, 4}, {8, 8}}) {
    const TokenSequence<float> seq{testutil::random_tensor({h * w, 64}, h * 10 + w), h, w};
    const auto out = reconstruct(dec, seq);
    EXPECT_EQ(out.shape(), (Shape{1, 3, 8 * h, 8 * w}));
    EXPECT_EQ(out.shape(), CnnDecoder<float>::infer_shape(dec.config(), h, w));
    for (float v : out.values()) {
      EXPECT_GT(v, 0.0f);
      EXPECT_LT(v, 1.0f);
    }
  }
}

TEST(CnnDecoder, ZeroTokensGiveMidGray) {
  ParameterStore<float> store;
  Rng rng(6);
  CnnDecoder<float> dec(store, "dec", 64, RbcConfig::scaled(0.25), rng);
  const auto out = dec({Tensor({4, 64}, 0.0f), 2, 2});
  for (float v : out.values()) EXPECT_EQ(v, 0.5f);
}

TEST(CnnDecoder, GradientWrtTokens) {
  using D = BasicTensor<double>;
  ParameterStore<double> store;
  Rng rng(7);
  CnnDecoder<double> dec(store, "dec", 8, RbcConfig::scaled(0.0625), rng);
  const auto weights = testutil::random_tensor<double>({1, 3, 16, 16}, 8);
  const double err = grad_check<double>(
      [&](const D& t) { return sum(mul(dec({t, 2, 2}), weights)); },
      testutil::random_tensor<double>({4, 8}, 9), 1e-6);
  EXPECT_LT(err, 1e-5);
}

TEST(CnnDecoder, InvalidConfigs) {
  RbcConfig none;
  EXPECT_THROW(none.validate(), ConfigError);
  RbcConfig no_up{{{3, false}}};
  EXPECT_THROW(no_up.validate(), ConfigError);
  RbcConfig not_rgb{{{8, true}, {4, false}}};
  EXPECT_THROW(not_rgb.validate(), ConfigError);
}

TEST(LossNetwork, TapShapes) {
  const auto taps = desk_loss_net().features(image(1));
  EXPECT_EQ(taps[0].shape(), (Shape{1, 16, 64, 64}));
  EXPECT_EQ(taps[1].shape(), (Shape{1, 32, 32, 32}));
  EXPECT_EQ(taps[2].shape(), (Shape{1, 64, 16, 16}));
  EXPECT_EQ(taps[3].shape(), (Shape{1, 128, 8, 8}));
  EXPECT_EQ(desk_loss_net().tap_channels(), (std::array<std::size_t, 4>{16, 32, 64, 128}));
}

TEST(LossNetwork, SeededWeightsAreDeterministic) {
  const auto a = LossNetwork<float>::random(0.25, 1234);
  const auto b = LossNetwork<float>::random(0.25, 1234);
  const auto c = LossNetwork<float>::random(0.25, 99);
  ASSERT_EQ(a.store().size(), b.store().size());
  bool any_diff = false;
  for (std::size_t i = 0; i < a.store().size(); ++i) {
    EXPECT_EQ(a.store().entries()[i].name, b.store().entries()[i].name);
    EXPECT_EQ(a.store().entries()[i].tensor.values(), b.store().entries()[i].tensor.values());
    any_diff = any_diff || a.store().entries()[i].tensor.values() != c.store().entries()[i].tensor.values();
  }
  EXPECT_TRUE(any_diff);
  EXPECT_FALSE(a.store().trainable());
  EXPECT_TRUE(a.store().find("loss_net.conv4_1.weight").defined());
}

TEST(LossNetwork, RejectsBadInputs) {
  EXPECT_THROW(desk_loss_net().features(Tensor({1, 3, 60, 64}, 0.5f)), DimensionError);
  EXPECT_THROW(desk_loss_net().features(Tensor({1, 1, 64, 64}, 0.5f)), ShapeError);
  EXPECT_THROW(content_loss(desk_loss_net(), image(1), image(2, 32, 32)), ShapeError);
  EXPECT_THROW(total_loss(desk_loss_net(), image(1), image(2), image(3, 32, 64), 10.0), ShapeError);
}

TEST(Loss, IdentityGivesZero) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto img = image(seed + 100);
    EXPECT_EQ(content_loss(desk_loss_net(), img, img).item(), 0.0f) << seed;
    EXPECT_LE(style_loss(desk_loss_net(), img, img).total.item(), 1e-6f) << seed;
  }
}

TEST(Loss, EqualConstantsGiveZero) {
  const Tensor a({1, 3, 32, 32}, 0.3f);
  const Tensor b({1, 3, 32, 32}, 0.3f);
  EXPECT_EQ(content_loss(desk_loss_net(), a, b).item(), 0.0f);
  EXPECT_EQ(style_loss(desk_loss_net(), a, b).total.item(), 0.0f);
}

TEST(Loss, StyleAcceptsDifferentSizes) {
  const auto s = style_loss(desk_loss_net(), image(1, 128, 96), image(2));
  EXPECT_GT(s.total.item(), 0.0f);
  float sum = 0.0f;
  for (float v : s.per_layer) sum += v;
  EXPECT_NEAR(sum, s.total.item(), 1e-5f * std::max(1.0f, sum));
}

TEST(Loss, TapMaskSelectsLayers) {
  const StyleLayerMask only_last{false, false, false, true};
  const auto s = style_loss(desk_loss_net(), image(3), image(4), only_last);
  EXPECT_EQ(s.per_layer[0], 0.0f);
  EXPECT_GT(s.per_layer[3], 0.0f);
  EXPECT_EQ(s.total.item(), s.per_layer[3]);
}

TEST(Loss, TotalIsContentPlusLambdaStyle) {
  const auto c = image(5), s = image(6), o = image(7);
  for (double lambda : {0.0, 1.0, 10.0, 2.5}) {
    const auto l = total_loss(desk_loss_net(), c, s, o, lambda);
    const float expect = l.content + l.style * static_cast<float>(lambda);
    EXPECT_EQ(l.total, expect) << lambda;
    EXPECT_GE(l.content, 0.0f);
    EXPECT_GE(l.style, 0.0f);
  }
  const auto zero = total_loss(desk_loss_net(), c, s, o, 0.0);
  EXPECT_EQ(zero.total, zero.content);
  EXPECT_THROW(total_loss(desk_loss_net(), c, s, o, -1.0), ConfigError);
}

TEST(Loss, MonotoneAndLinearInLambda) {
  const auto c = image(8), s = image(9), o = image(10);
  const auto l1 = total_loss(desk_loss_net(), c, s, o, 1.0);
  const auto l5 = total_loss(desk_loss_net(), c, s, o, 5.0);
  const auto l10 = total_loss(desk_loss_net(), c, s, o, 10.0);
  EXPECT_LE(l1.total, l5.total);
  EXPECT_LE(l5.total, l10.total);
  EXPECT_NEAR(l10.total - l1.total, 9.0 * l1.style, 1e-4 * l10.total);
  EXPECT_EQ(l1.content, l10.content);
  EXPECT_EQ(l1.style, l10.style);
}

TEST(Loss, BackwardLeavesLossNetworkWithoutGradients) {
  auto out = image(11);
  out.set_requires_grad(true);
  const auto l = total_loss(desk_loss_net(), image(12), image(13), out, 10.0);
  backward(l.total_tensor);
  EXPECT_TRUE(out.has_grad());
  double norm = 0;
  for (float g : out.grad()) norm += std::abs(g);
  EXPECT_GT(norm, 0.0);
  for (const auto& e : desk_loss_net().store().entries()) {
    EXPECT_FALSE(e.tensor.requires_grad()) << e.name;
    EXPECT_FALSE(e.tensor.has_grad()) << e.name;
  }
}

TEST(Loss, TargetsMatchDirectEvaluation) {
  const auto c = image(14), s = image(15), o = image(16);
  const auto direct = total_loss(desk_loss_net(), c, s, o, 10.0);
  const auto via = evaluate_loss(desk_loss_net(), make_targets(desk_loss_net(), c, s), o, 10.0);
  EXPECT_EQ(direct.total, via.total);
  EXPECT_EQ(content_loss(desk_loss_net(), c, o).item(), via.content);
}
