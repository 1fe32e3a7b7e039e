#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "adept/dct.hpp"
#include "adept/rng.hpp"
#include "adept/synthdata.hpp"

using namespace adept;

namespace {

// Direct double loop over the 8x8 definition with the 1/4 * a_u * a_v prefactor.
std::vector<double> brute_dct8(const std::vector<double>& f) {
  std::vector<double> out(64);
  for (int u = 0; u < 8; ++u)
    for (int v = 0; v < 8; ++v) {
      const double au = u == 0 ? 1.0 / std::sqrt(2.0) : 1.0;
      const double av = v == 0 ? 1.0 / std::sqrt(2.0) : 1.0;
      double s = 0.0;
      for (int x = 0; x < 8; ++x)
        for (int y = 0; y < 8; ++y)
          s += f[x * 8 + y] * std::cos((2 * x + 1) * u * std::numbers::pi / 16.0) *
               std::cos((2 * y + 1) * v * std::numbers::pi / 16.0);
      out[u * 8 + v] = 0.25 * au * av * s;
    }
  return out;
}

std::vector<double> random_block(Rng& rng, std::size_t n) {
  std::vector<double> b(n);
  for (auto& v : b) v = rng.uniform(0.0, 255.0);
  return b;
}

ImageRGB random_image(std::size_t h, std::size_t w, Rng& rng) {
  ImageRGB img(h, w);
  for (auto& v : img.pixels) v = std::floor(rng.uniform(0.0, 256.0));
  return img;
}

}  // namespace

TEST(Dct, MatchesBruteForceDefinition) {
  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const auto block = random_block(rng, 64);
    const auto fast = dct2d_patch(block);
    const auto slow = brute_dct8(block);
    for (int i = 0; i < 64; ++i) ASSERT_NEAR(fast[i], slow[i], 1e-10);
  }
}

TEST(Dct, ConstantBlockHasOnlyDc) {
  const std::vector<double> block(64, 100.0);
  const auto c = dct2d_patch(block);
  EXPECT_NEAR(c[0], 800.0, 1e-10);  // 1/4 * 1/2 * 64 * 100
  for (int i = 1; i < 64; ++i) EXPECT_NEAR(c[i], 0.0, 1e-10);
}

TEST(Dct, InverseRoundTripAndParsevalForSeveralSizes) {
  Rng rng(2);
  for (std::size_t p : {2u, 4u, 8u, 16u}) {
    for (int trial = 0; trial < 20; ++trial) {
      const auto block = random_block(rng, p * p);
      const auto c = dct2d_patch(block);
      const auto back = idct2d_patch(c);
      double e_pix = 0.0, e_coef = 0.0;
      for (std::size_t i = 0; i < p * p; ++i) {
        ASSERT_NEAR(back[i], block[i], 1e-9);
        e_pix += block[i] * block[i];
        e_coef += c[i] * c[i];
      }
      EXPECT_NEAR(e_coef / e_pix, 1.0, 1e-12);
    }
  }
}

TEST(Dct, IsLinear) {
  Rng rng(3);
  const auto a = random_block(rng, 64), b = random_block(rng, 64);
  std::vector<double> mix(64);
  for (int i = 0; i < 64; ++i) mix[i] = 2.0 * a[i] - 0.5 * b[i];
  const auto ca = dct2d_patch(a), cb = dct2d_patch(b), cm = dct2d_patch(mix);
  for (int i = 0; i < 64; ++i) EXPECT_NEAR(cm[i], 2.0 * ca[i] - 0.5 * cb[i], 1e-9);
}

TEST(Dct, RejectsNonSquareAndNaN) {
  EXPECT_THROW(dct2d_patch(std::vector<double>(10, 0.0)), GeometryError);
  std::vector<double> b(64, 0.0);
  b[5] = NAN;
  EXPECT_THROW(dct2d_patch(b), DomainError);
}

TEST(Color, PrimaryRedFrozenValues) {
  ImageRGB img(1, 1);
  img.at(0, 0, 0) = 255;
  const auto ycc = rgb_to_ycbcr(img);
  EXPECT_NEAR(ycc.channels[0][0], 76.245, 1e-9);
  EXPECT_NEAR(ycc.channels[1][0], 84.97232, 1e-9);
  EXPECT_NEAR(ycc.channels[2][0], 255.0, 1e-9);  // 255.5 clamped
}

TEST(Color, GreyMapsToNeutralChroma) {
  for (double g : {0.0, 37.0, 128.0, 255.0}) {
    ImageRGB img(1, 1, g);
    const auto ycc = rgb_to_ycbcr(img);
    EXPECT_NEAR(ycc.channels[0][0], g, 1e-9);
    EXPECT_NEAR(ycc.channels[1][0], 128.0, 1e-9);
    EXPECT_NEAR(ycc.channels[2][0], 128.0, 1e-9);
  }
}

TEST(Color, OutOfRangePixelIsDomainError) {
  ImageRGB img(1, 1);
  img.at(0, 0, 1) = 256.0;
  EXPECT_THROW(rgb_to_ycbcr(img), DomainError);
}

TEST(Patches, PartitionAssembleIsIdentity) {
  Rng rng(4);
  const auto ycc = rgb_to_ycbcr(random_image(16, 24, rng));
  const auto grid = partition_patches(ycc, 8, 8);
  EXPECT_EQ(grid.grid_h, 2u);
  EXPECT_EQ(grid.grid_w, 3u);
  const auto back = assemble_patches(grid);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(back.channels[c], ycc.channels[c]);
}

TEST(Patches, NonDivisibleIsGeometryError) {
  EXPECT_THROW(build_dct_map(ImageRGB(60, 60), 8), GeometryError);
  EXPECT_THROW(build_dct_map(ImageRGB(64, 64), 8, 4), GeometryError);
}

TEST(DctMap, LayoutAndShape) {
  Rng rng(5);
  const ImageRGB img = random_image(64, 64, rng);
  const DCTMap map = build_dct_map(img, 8);
  EXPECT_EQ(map.shape(), (Shape{192, 8, 8}));
  // Cell (gy, gx) of channel c equals the DCT of that patch.
  const auto ycc = rgb_to_ycbcr(img);
  const std::size_t gy = 3, gx = 5, c = 2;
  std::vector<double> block(64);
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x) block[y * 8 + x] = ycc.at(c, gy * 8 + y, gx * 8 + x);
  const auto expect = brute_dct8(block);
  for (std::size_t k = 0; k < 64; ++k) EXPECT_NEAR(map.at(c * 64 + k, gy, gx), expect[k], 1e-9);
  const auto pv = patch_vector(map, gy, gx);
  EXPECT_EQ(pv.size(), 192u);
  EXPECT_DOUBLE_EQ(pv[c * 64 + 7], map.at(c * 64 + 7, gy, gx));
}

TEST(DctMap, InvertReproducesYCbCr) {
  Rng rng(6);
  const ImageRGB img = random_image(32, 48, rng);
  const auto ycc = rgb_to_ycbcr(img);
  const auto back = invert_dct_map(build_dct_map(img, 8));
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < ycc.channels[c].size(); ++i)
      ASSERT_NEAR(back.channels[c][i], ycc.channels[c][i], 1e-9);
}

TEST(Zigzag, MatchesJpegTableStart) {
  const auto z = zigzag_order(8);
  const std::vector<std::size_t> head{0, 1, 8, 16, 9, 2, 3, 10, 17, 24};
  for (std::size_t i = 0; i < head.size(); ++i) EXPECT_EQ(z[i], head[i]);
  EXPECT_EQ(z.back(), 63u);
  std::vector<std::size_t> sorted = z;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < 64; ++i) EXPECT_EQ(sorted[i], i);
}

TEST(EnergyCompaction, SmoothBeatsNoise) {
  Rng rng(7);
  const double noise = energy_compaction_stat(build_dct_map(random_image(64, 64, rng), 8), 0.25);
  EXPECT_NEAR(noise, 0.25, 0.05);
  SyntheticDatasetConfig dc;
  dc.num_samples = 8;
  const SyntheticDataset data(dc);
  double scenes = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) scenes += energy_compaction_stat(build_dct_map(data.scene(i).image, 8), 0.25);
  EXPECT_GT(scenes / 8.0, noise + 0.2);
  EXPECT_THROW(energy_compaction_stat(build_dct_map(ImageRGB(8, 8), 8), 0.0), ParameterError);
  EXPECT_DOUBLE_EQ(energy_compaction_stat(build_dct_map(ImageRGB(8, 8, 128.0), 8), 0.25), 1.0);
}

TEST(Standardizer, UnitVarianceWithFloor) {
  Rng rng(8);
  std::vector<DCTMap> maps;
  for (int i = 0; i < 6; ++i) maps.push_back(build_dct_map(random_image(16, 16, rng), 8));
  const auto st = DctStandardizer::fit(maps, 0.01);
  ASSERT_EQ(st.mean.size(), 192u);
  // Pooled tokens are zero-mean, unit-variance per channel (none hit the floor for noise images).
  std::vector<double> s1(192, 0.0), s2(192, 0.0);
  std::size_t n = 0;
  for (const auto& m : maps) {
    const Tensor t = st.tokens(m);
    for (std::size_t r = 0; r < t.dim(0); ++r, ++n)
      for (std::size_t c = 0; c < 192; ++c) {
        s1[c] += t.at(r, c);
        s2[c] += t.at(r, c) * t.at(r, c);
      }
  }
  for (std::size_t c = 0; c < 192; ++c) {
    EXPECT_NEAR(s1[c] / n, 0.0, 1e-9);
    EXPECT_NEAR(s2[c] / n, 1.0, 1e-9);
  }
  // A constant channel falls back to the floor instead of dividing by zero.
  std::vector<DCTMap> flat(3, build_dct_map(ImageRGB(8, 8, 50.0), 8));
  flat[1] = build_dct_map(random_image(8, 8, rng), 8);
  const auto fs = DctStandardizer::fit(flat, 0.01);
  for (double s : fs.stddev) EXPECT_GT(s, 0.0);
}
