#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "adept/encoders.hpp"
#include "adept/rng.hpp"

using namespace adept;

namespace {

EncoderConfig small_config() {
  EncoderConfig c;
  c.embed_dim = 16;
  c.depth = 2;
  c.heads = 4;
  c.grid_h = c.grid_w = 4;
  c.patch = 4;
  c.proj_dim = 8;
  return c;
}

Tensor randn(Shape s, Rng& rng) {
  std::vector<double> v(shape_numel(s));
  for (auto& x : v) x = rng.normal();
  return Tensor::from(std::move(s), std::move(v));
}

}  // namespace

TEST(ImageTokens, ChannelMajorPatchLayout) {
  ImageRGB img(8, 8);
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x)
      for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = static_cast<double>((y * 8 + x) * 3 + c);
  const Tensor t = image_tokens(img, 4);
  EXPECT_EQ(t.shape(), (Shape{4, 48}));
  // Token 3 is grid cell (1, 1); entry c*16 + y*4 + x holds pixel (4+y, 4+x, c) / 255.
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 4; ++y)
      for (std::size_t x = 0; x < 4; ++x)
        EXPECT_DOUBLE_EQ(t.at(3, c * 16 + y * 4 + x), img.at(4 + y, 4 + x, c) / 255.0);
  EXPECT_THROW(image_tokens(ImageRGB(6, 8), 4), GeometryError);
}

TEST(SpatialEncoder, ShapeGeometryAndNormalizedOutput) {
  Rng rng(1);
  const auto cfg = small_config();
  const SpatialEncoder enc(cfg, cfg.patch_values(), rng);
  const SpatialFeatures f = encode_image(enc, ImageRGB(16, 16, 100.0));
  EXPECT_EQ(f.tokens.shape(), (Shape{16, 16}));
  EXPECT_EQ(f.grid_h, 4u);
  for (std::size_t r = 0; r < 16; ++r) {
    double m = 0.0;
    for (std::size_t c = 0; c < 16; ++c) m += f.tokens.at(r, c) / 16.0;
    EXPECT_NEAR(m, 0.0, 1e-9);
  }
  EXPECT_THROW(encode_image(enc, ImageRGB(32, 32)), DimensionError);
  EXPECT_THROW(enc.forward(Tensor::zeros({16, 5})), DimensionError);
}

TEST(SpatialEncoder, PositionsBreakPermutationEquivariance) {
  // Without positions the transformer is permutation equivariant over tokens.
  Rng rng(2);
  const auto cfg = small_config();
  SpatialEncoder enc(cfg, 5, rng);
  const Tensor x = randn({16, 5}, rng);
  std::vector<double> rev(x.numel());
  for (std::size_t r = 0; r < 16; ++r)
    for (std::size_t c = 0; c < 5; ++c) rev[(15 - r) * 5 + c] = x.at(r, c);
  const Tensor xr = Tensor::from({16, 5}, rev);

  const Tensor with_pos = enc.forward(x).tokens, with_pos_rev = enc.forward(xr).tokens;
  double diff = 0.0;
  for (std::size_t r = 0; r < 16; ++r)
    for (std::size_t c = 0; c < 16; ++c) diff += std::abs(with_pos.at(r, c) - with_pos_rev.at(15 - r, c));
  EXPECT_GT(diff, 1e-3);

  enc.zero_positions_();
  const Tensor a = enc.forward(x).tokens, b = enc.forward(xr).tokens;
  for (std::size_t r = 0; r < 16; ++r)
    for (std::size_t c = 0; c < 16; ++c) EXPECT_NEAR(a.at(r, c), b.at(15 - r, c), 1e-12);
}

TEST(SpatialEncoder, SincosPositionsAreDistinct) {
  const auto cfg = small_config();
  const Tensor p = sincos_positions(cfg);
  EXPECT_EQ(p.shape(), (Shape{16, 16}));
  for (std::size_t a = 0; a < 16; ++a)
    for (std::size_t b = a + 1; b < 16; ++b) {
      double d = 0.0;
      for (std::size_t c = 0; c < 16; ++c) d += std::abs(p.at(a, c) - p.at(b, c));
      EXPECT_GT(d, 1e-6) << a << " vs " << b;
    }
}

TEST(KeypointEncoder, BinsRoundTripAndMaskToken) {
  Rng rng(3);
  auto cfg = small_config();
  cfg.embed_dim = 32;
  const KeypointEncoder enc(cfg, rng);
  for (int trial = 0; trial < 10; ++trial) {
    Keypoints kp;
    for (std::size_t j = 0; j < kNumJoints; ++j)
      kp.joints.push_back({rng.uniform(0.0, 15.0), rng.uniform(0.0, 15.0), rng.bernoulli(0.8)});
    const KeypointFeatures f = encode_keypoints(enc, kp);
    ASSERT_EQ(f.tokens.shape(), (Shape{kNumJoints, 32}));
    for (std::size_t j = 0; j < kNumJoints; ++j) {
      const auto row = f.tokens.data().subspan(j * 32, 32);
      if (kp.joints[j].visible) {
        EXPECT_EQ(enc.decode_bins(row, j), enc.bins(kp.joints[j]));
      } else {
        for (std::size_t c = 0; c < 32; ++c) EXPECT_EQ(row[c], enc.mask[c]);
      }
    }
  }
}

TEST(KeypointEncoder, RejectsWrongCountAndOutOfViewJoints) {
  Rng rng(4);
  const KeypointEncoder enc(small_config(), rng);
  Keypoints kp;
  kp.joints.assign(kNumJoints, {1.0, 1.0, true});
  EXPECT_NO_THROW(encode_keypoints(enc, kp));
  kp.joints[2] = {16.0, 1.0, true};
  EXPECT_THROW(encode_keypoints(enc, kp), DomainError);
  kp.joints[2].visible = false;  // hidden joints may lie anywhere
  EXPECT_NO_THROW(encode_keypoints(enc, kp));
  kp.joints.pop_back();
  EXPECT_THROW(encode_keypoints(enc, kp), DimensionError);
}

TEST(ProjectionHead, UnitNormOutput) {
  Rng rng(5);
  const ProjectionHead head(16, 8, rng);
  const Tensor z = project({randn({16, 16}, rng), 4, 4}, head);
  EXPECT_EQ(z.shape(), (Shape{1, 8}));
  double n = 0.0;
  for (double v : z.data()) n += v * v;
  EXPECT_NEAR(n, 1.0, 1e-12);
}

TEST(Momentum, EmaMatchesClosedForm) {
  Rng rng(6);
  const Tensor q = randn({3, 4}, rng), m0 = randn({3, 4}, rng);
  MomentumPair pair;
  pair.online = {{"w", q}};
  pair.momentum = {{"w", m0.detach()}};
  const std::vector<double> start(pair.momentum[0].tensor.data().begin(), pair.momentum[0].tensor.data().end());
  pair.coefficient = 0.9;
  for (int i = 0; i < 10; ++i) momentum_update(pair);
  const double decay = std::pow(0.9, 10);
  for (std::size_t i = 0; i < 12; ++i)
    EXPECT_NEAR(pair.momentum[0].tensor[i], q[i] + decay * (start[i] - q[i]), 1e-12);
}

TEST(Momentum, CoefficientOneFreezesAndSyncCopiesBitwise) {
  Rng rng(7);
  const Tensor q = randn({5}, rng);
  MomentumPair pair;
  pair.online = {{"w", q}};
  pair.momentum = {{"w", randn({5}, rng)}};
  const std::vector<double> before(pair.momentum[0].tensor.data().begin(), pair.momentum[0].tensor.data().end());
  pair.coefficient = 1.0;
  momentum_update(pair);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(pair.momentum[0].tensor[i], before[i]);
  pair.sync();
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(pair.momentum[0].tensor[i], q[i]);
  pair.momentum.push_back({"extra", randn({1}, rng)});
  EXPECT_THROW(momentum_update(pair), ContractError);
}
