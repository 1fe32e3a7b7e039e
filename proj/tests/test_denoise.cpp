#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "adept/denoise.hpp"
#include "adept/rng.hpp"

using namespace adept;

namespace {

EncoderConfig small_config() {
  EncoderConfig c;
  c.embed_dim = 16;
  c.depth = 1;
  c.heads = 2;
  c.grid_h = c.grid_w = 4;
  c.patch = 4;
  return c;
}

Tensor randn(Shape s, Rng& rng, bool grad = false) {
  std::vector<double> v(shape_numel(s));
  for (auto& x : v) x = rng.normal();
  return Tensor::from(std::move(s), std::move(v), grad);
}

}  // namespace

TEST(SimCC, BinFrozenValuesAndClamp) {
  EXPECT_EQ(simcc_bin(10.6, 2, 64), 21);
  EXPECT_EQ(simcc_bin(10.25, 2, 64), 21);  // 20.5 rounds half up
  EXPECT_EQ(simcc_bin(10.2, 2, 64), 20);
  EXPECT_EQ(simcc_bin(-3.0, 2, 64), 0);
  EXPECT_EQ(simcc_bin(70.0, 2, 64), 127);
  EXPECT_EQ(simcc_bin(63.0, 3, 64), 189);
}

TEST(LossDe, DefaultWeightsOnUnitLosses) {
  const Tensor one = Tensor::scalar(1.0);
  EXPECT_EQ(loss_de(one, one, 0.1, 0.2).item(), 0.1 * 1.0 + 0.2 * 1.0);
  EXPECT_NEAR(loss_de(one, one, 0.1, 0.2).item(), 0.3, 1e-15);
  EXPECT_THROW(loss_de(one, one, -0.1, 0.2), ParameterError);
}

TEST(LossDe, ZeroWeightTermsCarryNoGradient) {
  const Tensor a = Tensor::from({1}, {2.0}, true), b = Tensor::from({1}, {3.0}, true);
  backward(loss_de(sum(a), sum(b), 0.0, 0.5));
  EXPECT_FALSE(a.has_grad());
  EXPECT_DOUBLE_EQ(b.grad()[0], 0.5);
  const Tensor none = loss_de(sum(a), sum(b), 0.0, 0.0);
  EXPECT_EQ(none.item(), 0.0);
  EXPECT_FALSE(none.requires_grad());
}

TEST(Noise, BoundsAndMeanOverManyDraws) {
  Rng frng(1);
  const Tensor f = randn({1000}, frng);
  double mu = 0.0;
  for (double v : f.data()) mu = std::max(mu, std::abs(v));
  for (double s : {0.1, 1.0, 3.0}) {
    Rng rng(2);
    double total = 0.0;
    std::size_t n = 0, violations = 0;
    for (int rep = 0; rep < 20; ++rep) {
      const Tensor g = inject_noise(f, {s}, rng);
      for (std::size_t i = 0; i < f.numel(); ++i) {
        const double u = g[i] - f[i];
        violations += std::abs(u) > s * mu * (1.0 + 1e-12) ? 1 : 0;
        total += u;
        ++n;
      }
    }
    EXPECT_EQ(violations, 0u);
    EXPECT_LT(std::abs(total / static_cast<double>(n)), 0.02 * s * mu);
  }
}

TEST(Noise, ZeroScaleReturnsInputAndNegativeScaleThrows) {
  Rng rng(3);
  const Tensor f = randn({4, 4}, rng, true);
  Rng draw(9);
  const Tensor g = inject_noise(f, {0.0}, draw);
  EXPECT_EQ(g.node(), f.node());
  EXPECT_EQ(draw.next_u64(), Rng(9).next_u64());  // no draws consumed
  EXPECT_THROW(inject_noise(f, {-1.0}, draw), ParameterError);
  EXPECT_THROW(inject_noise(Tensor::from({2}, {1.0, NAN}), {1.0}, draw), DomainError);
}

TEST(Noise, TapeReplaysIdenticalNoiseAndIsConstantForGradients) {
  Rng rng(4);
  const Tensor f = randn({3, 3}, rng, true);
  NoiseTape tape;
  tape.record();
  Rng a(5);
  const Tensor g1 = inject_noise(f, {1.0}, a, &tape);
  tape.replay();
  Rng b(99);
  const Tensor g2 = inject_noise(f, {1.0}, b, &tape);
  for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(g1[i], g2[i]);
  EXPECT_THROW(inject_noise(f, {1.0}, b, &tape), StateError);
  backward(sum(g1));
  for (std::size_t i = 0; i < 9; ++i) EXPECT_DOUBLE_EQ(f.grad()[i], 1.0);
}

TEST(KeypointLoss, UniformLogitsGiveLogBinCount) {
  const std::size_t k = 2, w = 16, h = 8;
  KeypointLogits logits{Tensor::zeros({kNumJoints, k * w}), Tensor::zeros({kNumJoints, k * h})};
  Keypoints kp;
  for (std::size_t j = 0; j < kNumJoints; ++j) kp.joints.push_back({1.0 * j, 0.5 * j, j % 3 != 0});
  const KeypointLoss l = loss_keypoint(logits, kp, k, w, h);
  EXPECT_FALSE(l.no_visible);
  EXPECT_NEAR(l.value.item(), 0.5 * (std::log(32.0) + std::log(16.0)), 1e-12);
  for (auto& j : kp.joints) j.visible = false;
  const KeypointLoss none = loss_keypoint(logits, kp, k, w, h);
  EXPECT_TRUE(none.no_visible);
  EXPECT_EQ(none.value.item(), 0.0);
}

TEST(KeypointLoss, HiddenJointsDoNotAffectValue) {
  Rng rng(6);
  const std::size_t k = 2, w = 16, h = 16;
  KeypointLogits logits{randn({kNumJoints, k * w}, rng), randn({kNumJoints, k * h}, rng)};
  Keypoints kp;
  for (std::size_t j = 0; j < kNumJoints; ++j) kp.joints.push_back({rng.uniform(0, 15), rng.uniform(0, 15), j < 7});
  const double base = loss_keypoint(logits, kp, k, w, h).value.item();
  for (std::size_t j = 7; j < kNumJoints; ++j) kp.joints[j].x = rng.uniform(0, 15);
  EXPECT_EQ(loss_keypoint(logits, kp, k, w, h).value.item(), base);
  // Direct per-joint oracle.
  double expect = 0.0;
  for (std::size_t j = 0; j < 7; ++j) {
    for (int axis = 0; axis < 2; ++axis) {
      const Tensor& t = axis == 0 ? logits.x : logits.y;
      const double coord = axis == 0 ? kp.joints[j].x : kp.joints[j].y;
      double z = 0.0;
      for (std::size_t c = 0; c < k * w; ++c) z += std::exp(t.at(j, c));
      expect += std::log(z) - t.at(j, static_cast<std::size_t>(simcc_bin(coord, k, w)));
    }
  }
  EXPECT_NEAR(loss_keypoint(logits, kp, k, w, h).value.item(), expect / 14.0, 1e-12);
}

TEST(Decoders, ShapesAndImageDependence) {
  Rng rng(7);
  const auto cfg = small_config();
  const DctDecoder dct_dec(cfg, rng);
  const KeypointDecoder kp_dec(cfg, 2, rng);
  const SpatialFeatures noisy{randn({16, 16}, rng), 4, 4};
  const SpatialFeatures image{randn({16, 16}, rng), 4, 4};
  const SpatialFeatures zero{Tensor::zeros({16, 16}), 4, 4};
  const Tensor out = decode_dct(dct_dec, noisy, image);
  EXPECT_EQ(out.shape(), (Shape{16, 48}));
  const Tensor out0 = decode_dct(dct_dec, noisy, zero);
  double diff = 0.0;
  for (std::size_t i = 0; i < out.numel(); ++i) diff += std::abs(out[i] - out0[i]);
  EXPECT_GT(diff, 1e-6);
  const KeypointLogits kl = decode_keypoints(kp_dec, {randn({kNumJoints, 16}, rng)}, image);
  EXPECT_EQ(kl.x.shape(), (Shape{kNumJoints, 32}));
  EXPECT_EQ(kl.y.shape(), (Shape{kNumJoints, 32}));
  EXPECT_THROW(decode_dct(dct_dec, noisy, {randn({16, 8}, rng), 4, 4}), ContractError);
  EXPECT_THROW(KeypointDecoder(cfg, 1, rng), ConfigError);
}
