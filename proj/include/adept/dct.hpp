#pragma once

// RGB view -> YCbCr -> per-patch 2D DCT-II -> (3*P*P, H/P, W/P) coefficient map.

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "adept/errors.hpp"
#include "adept/tensor.hpp"

namespace adept {

/// Interleaved HxWx3 RGB, values in [0, 255].
struct ImageRGB {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;

  ImageRGB() = default;
  ImageRGB(std::size_t h, std::size_t w, double fill = 0.0)
      : height(h), width(w), pixels(h * w * 3, fill) {}

  double& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * 3 + c]; }
  double at(std::size_t y, std::size_t x, std::size_t c) const {
    return pixels[(y * width + x) * 3 + c];
  }
};

/// Planar Y, Cb, Cr channels.
struct ImageYCbCr {
  std::size_t height = 0;
  std::size_t width = 0;
  std::array<std::vector<double>, 3> channels;

  double at(std::size_t c, std::size_t y, std::size_t x) const { return channels[c][y * width + x]; }
};

/// Per-channel list of row-major patches, scanned row-major over the grid.
struct PatchGrid {
  std::size_t patch = 0;
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  std::array<std::vector<std::vector<double>>, 3> patches;

  std::size_t count() const { return grid_h * grid_w; }
};

/// Coefficients laid out [channel][gy][gx] with channel = c*P*P + u*P + v and
/// c running Y, Cb, Cr.
struct DCTMap {
  std::size_t patch = 8;
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  std::vector<double> coeffs;

  std::size_t channels() const { return 3 * patch * patch; }
  Shape shape() const { return {channels(), grid_h, grid_w}; }

  double at(std::size_t ch, std::size_t gy, std::size_t gx) const {
    return coeffs[(ch * grid_h + gy) * grid_w + gx];
  }
  double& at(std::size_t ch, std::size_t gy, std::size_t gx) {
    return coeffs[(ch * grid_h + gy) * grid_w + gx];
  }
};

inline void check_pixel_range(const ImageRGB& img) {
  for (double v : img.pixels) {
    if (!(v >= 0.0 && v <= 255.0)) {
      throw DomainError("pixel value " + std::to_string(v) + " outside [0,255]");
    }
  }
}

/// Full-range BT.601 (JFIF) conversion, clamped to [0, 255].
inline ImageYCbCr rgb_to_ycbcr(const ImageRGB& img) {
  check_pixel_range(img);
  ImageYCbCr out;
  out.height = img.height;
  out.width = img.width;
  for (auto& ch : out.channels) ch.resize(img.height * img.width);
  auto clamp = [](double v) { return std::clamp(v, 0.0, 255.0); };
  for (std::size_t i = 0; i < img.height * img.width; ++i) {
    const double r = img.pixels[3 * i], g = img.pixels[3 * i + 1], b = img.pixels[3 * i + 2];
    out.channels[0][i] = clamp(0.299 * r + 0.587 * g + 0.114 * b);
    out.channels[1][i] = clamp(128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b);
    out.channels[2][i] = clamp(128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b);
  }
  return out;
}

inline void check_divisible(std::size_t h, std::size_t w, std::size_t patch) {
  if (patch == 0 || h == 0 || w == 0 || h % patch != 0 || w % patch != 0) {
    throw GeometryError("image " + std::to_string(h) + "x" + std::to_string(w) +
                        " is not divisible into " + std::to_string(patch) + "x" +
                        std::to_string(patch) + " patches");
  }
}

inline PatchGrid partition_patches(const ImageYCbCr& img, std::size_t patch_h, std::size_t patch_w) {
  if (patch_h != patch_w) throw GeometryError("only square patches are supported");
  check_divisible(img.height, img.width, patch_h);
  const std::size_t p = patch_h;
  PatchGrid grid;
  grid.patch = p;
  grid.grid_h = img.height / p;
  grid.grid_w = img.width / p;
  for (std::size_t c = 0; c < 3; ++c) {
    auto& list = grid.patches[c];
    list.reserve(grid.count());
    for (std::size_t gy = 0; gy < grid.grid_h; ++gy) {
      for (std::size_t gx = 0; gx < grid.grid_w; ++gx) {
        std::vector<double> block(p * p);
        for (std::size_t y = 0; y < p; ++y)
          for (std::size_t x = 0; x < p; ++x)
            block[y * p + x] = img.channels[c][(gy * p + y) * img.width + gx * p + x];
        list.push_back(std::move(block));
      }
    }
  }
  return grid;
}

/// Inverse of partition_patches.
inline ImageYCbCr assemble_patches(const PatchGrid& grid) {
  const std::size_t p = grid.patch;
  ImageYCbCr img;
  img.height = grid.grid_h * p;
  img.width = grid.grid_w * p;
  for (std::size_t c = 0; c < 3; ++c) {
    img.channels[c].assign(img.height * img.width, 0.0);
    for (std::size_t gy = 0; gy < grid.grid_h; ++gy)
      for (std::size_t gx = 0; gx < grid.grid_w; ++gx) {
        const auto& block = grid.patches[c][gy * grid.grid_w + gx];
        for (std::size_t y = 0; y < p; ++y)
          for (std::size_t x = 0; x < p; ++x)
            img.channels[c][(gy * p + y) * img.width + gx * p + x] = block[y * p + x];
      }
  }
  return img;
}

namespace detail {

/// basis[u*P + x] = sqrt(2/P) * alpha_u * cos((2x+1) u pi / 2P), alpha_0 = 1/sqrt(2).
/// For P = 8 the product of two rows carries the (1/4) alpha_u alpha_v prefactor.
inline const std::vector<double>& dct_basis(std::size_t p) {
  thread_local std::vector<std::vector<double>> cache;
  if (cache.size() <= p) cache.resize(p + 1);
  auto& b = cache[p];
  if (b.empty()) {
    b.resize(p * p);
    const double s = std::sqrt(2.0 / static_cast<double>(p));
    for (std::size_t u = 0; u < p; ++u) {
      const double alpha = u == 0 ? 1.0 / std::numbers::sqrt2 : 1.0;
      for (std::size_t x = 0; x < p; ++x) {
        b[u * p + x] = s * alpha *
                       std::cos(static_cast<double>((2 * x + 1) * u) * std::numbers::pi /
                                (2.0 * static_cast<double>(p)));
      }
    }
  }
  return b;
}

inline std::size_t square_side(std::size_t n) {
  const auto p = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
  if (p == 0 || p * p != n) throw GeometryError("block of " + std::to_string(n) + " values is not square");
  return p;
}

}  // namespace detail

/// Type-II 2D DCT of a row-major PxP block; result indexed [u*P + v], where u
/// pairs with the row index and v with the column index.
inline std::vector<double> dct2d_patch(std::span<const double> block) {
  const std::size_t p = detail::square_side(block.size());
  for (double v : block) {
    if (std::isnan(v)) throw DomainError("dct2d_patch: NaN input");
  }
  const auto& b = detail::dct_basis(p);
  std::vector<double> tmp(p * p, 0.0), out(p * p, 0.0);
  // tmp[u][y] = sum_x b[u][x] block[x][y]
  for (std::size_t u = 0; u < p; ++u)
    for (std::size_t x = 0; x < p; ++x) {
      const double bu = b[u * p + x];
      for (std::size_t y = 0; y < p; ++y) tmp[u * p + y] += bu * block[x * p + y];
    }
  // out[u][v] = sum_y tmp[u][y] b[v][y]
  for (std::size_t u = 0; u < p; ++u)
    for (std::size_t v = 0; v < p; ++v) {
      double s = 0.0;
      for (std::size_t y = 0; y < p; ++y) s += tmp[u * p + y] * b[v * p + y];
      out[u * p + v] = s;
    }
  return out;
}

/// Exact inverse of dct2d_patch (the basis is orthonormal).
inline std::vector<double> idct2d_patch(std::span<const double> coeffs) {
  const std::size_t p = detail::square_side(coeffs.size());
  const auto& b = detail::dct_basis(p);
  std::vector<double> tmp(p * p, 0.0), out(p * p, 0.0);
  // tmp[x][v] = sum_u b[u][x] c[u][v]
  for (std::size_t u = 0; u < p; ++u)
    for (std::size_t x = 0; x < p; ++x) {
      const double bu = b[u * p + x];
      for (std::size_t v = 0; v < p; ++v) tmp[x * p + v] += bu * coeffs[u * p + v];
    }
  for (std::size_t x = 0; x < p; ++x)
    for (std::size_t y = 0; y < p; ++y) {
      double s = 0.0;
      for (std::size_t v = 0; v < p; ++v) s += tmp[x * p + v] * b[v * p + y];
      out[x * p + y] = s;
    }
  return out;
}

inline DCTMap build_dct_map(const ImageYCbCr& ycc, std::size_t patch) {
  const PatchGrid grid = partition_patches(ycc, patch, patch);
  DCTMap map;
  map.patch = patch;
  map.grid_h = grid.grid_h;
  map.grid_w = grid.grid_w;
  map.coeffs.assign(map.channels() * grid.count(), 0.0);
  const std::size_t pp = patch * patch;
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < grid.count(); ++i) {
      const auto coeffs = dct2d_patch(grid.patches[c][i]);
      const std::size_t gy = i / grid.grid_w, gx = i % grid.grid_w;
      for (std::size_t k = 0; k < pp; ++k) map.at(c * pp + k, gy, gx) = coeffs[k];
    }
  }
  return map;
}

inline DCTMap build_dct_map(const ImageRGB& img, std::size_t patch_h, std::size_t patch_w) {
  if (patch_h != patch_w) throw GeometryError("only square patches are supported");
  check_divisible(img.height, img.width, patch_h);
  return build_dct_map(rgb_to_ycbcr(img), patch_h);
}

inline DCTMap build_dct_map(const ImageRGB& img, std::size_t patch = 8) {
  return build_dct_map(img, patch, patch);
}

/// The 3*P*P coefficients of grid cell (gy, gx), in channel order.
inline std::vector<double> patch_vector(const DCTMap& map, std::size_t gy, std::size_t gx) {
  std::vector<double> v(map.channels());
  for (std::size_t ch = 0; ch < v.size(); ++ch) v[ch] = map.at(ch, gy, gx);
  return v;
}

/// Inverts every patch of a map back to the YCbCr image.
inline ImageYCbCr invert_dct_map(const DCTMap& map) {
  PatchGrid grid;
  grid.patch = map.patch;
  grid.grid_h = map.grid_h;
  grid.grid_w = map.grid_w;
  const std::size_t pp = map.patch * map.patch;
  for (std::size_t c = 0; c < 3; ++c) {
    grid.patches[c].resize(grid.count());
    for (std::size_t i = 0; i < grid.count(); ++i) {
      std::vector<double> coeffs(pp);
      for (std::size_t k = 0; k < pp; ++k)
        coeffs[k] = map.at(c * pp + k, i / map.grid_w, i % map.grid_w);
      grid.patches[c][i] = idct2d_patch(coeffs);
    }
  }
  return assemble_patches(grid);
}

/// Positions [u*P + v] in JPEG zigzag order (anti-diagonals, alternating direction).
inline std::vector<std::size_t> zigzag_order(std::size_t p) {
  std::vector<std::size_t> order;
  order.reserve(p * p);
  for (std::size_t s = 0; s + 1 < 2 * p; ++s) {
    const std::size_t lo = s < p ? 0 : s - p + 1;
    const std::size_t hi = std::min(s, p - 1);
    for (std::size_t k = lo; k <= hi; ++k) {
      const std::size_t u = (s % 2 == 0) ? hi - (k - lo) : k;
      order.push_back(u * p + (s - u));
    }
  }
  return order;
}

/// Share of coefficient energy held by the lowest ceil(fraction*P*P) zigzag
/// coefficients, averaged over every (patch, channel) block.
///
/// Energy is measured after the JPEG level shift (pixels - 128, i.e. DC - 128*P),
/// so a uniformly random image scores ~fraction. Blocks with zero energy count
/// as fully compacted (1.0); totals below 1e-12 are rounding residue and count as zero.
inline double energy_compaction_stat(const DCTMap& map, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw ParameterError("energy_compaction_stat: fraction must lie in (0,1]");
  }
  const std::size_t p = map.patch, pp = p * p;
  const auto order = zigzag_order(p);
  const auto keep = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(pp) - 1e-12));
  const double dc_shift = 128.0 * static_cast<double>(p);
  double acc = 0.0;
  std::size_t blocks = 0;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t gy = 0; gy < map.grid_h; ++gy)
      for (std::size_t gx = 0; gx < map.grid_w; ++gx) {
        double total = 0.0, low = 0.0;
        for (std::size_t r = 0; r < pp; ++r) {
          double v = map.at(c * pp + order[r], gy, gx);
          if (order[r] == 0) v -= dc_shift;
          const double e = v * v;
          total += e;
          if (r < keep) low += e;
        }
        acc += total > 1e-12 ? low / total : 1.0;
        ++blocks;
      }
  return blocks ? acc / static_cast<double>(blocks) : 1.0;
}

/// Per-channel affine standardization of DCT coefficients.
struct DctStandardizer {
  std::vector<double> mean;
  std::vector<double> stddev;

  bool empty() const { return mean.empty(); }

  /// Channel statistics over every patch of every map. Each channel's variance
  /// is floored at floor_ratio times the mean channel variance so that nearly
  /// empty high-frequency channels are not blown up to unit scale.
  static DctStandardizer fit(const std::vector<DCTMap>& maps, double floor_ratio = 0.01) {
    if (maps.empty()) throw ContractError("DctStandardizer::fit: no maps");
    const std::size_t c = maps[0].channels();
    std::vector<double> s1(c, 0.0), s2(c, 0.0);
    std::size_t n = 0;
    for (const auto& m : maps) {
      if (m.channels() != c) throw DimensionError("DctStandardizer::fit: mixed patch sizes");
      const std::size_t cells = m.grid_h * m.grid_w;
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < cells; ++i) {
          const double v = m.coeffs[ch * cells + i];
          s1[ch] += v;
          s2[ch] += v * v;
        }
      n += cells;
    }
    DctStandardizer st;
    st.mean.resize(c);
    st.stddev.resize(c);
    std::vector<double> var(c);
    double mean_var = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch) {
      st.mean[ch] = s1[ch] / static_cast<double>(n);
      var[ch] = std::max(0.0, s2[ch] / static_cast<double>(n) - st.mean[ch] * st.mean[ch]);
      mean_var += var[ch] / static_cast<double>(c);
    }
    const double floor = std::max(floor_ratio * mean_var, 1e-12);
    for (std::size_t ch = 0; ch < c; ++ch) st.stddev[ch] = std::sqrt(std::max(var[ch], floor));
    return st;
  }

  /// Standardized map as a token matrix [grid_h*grid_w, channels].
  Tensor tokens(const DCTMap& map) const {
    const std::size_t c = map.channels(), cells = map.grid_h * map.grid_w;
    if (c != mean.size()) {
      throw DimensionError("DctStandardizer: map has " + std::to_string(c) +
                           " channels, statistics have " + std::to_string(mean.size()));
    }
    std::vector<double> out(cells * c);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < cells; ++i)
        out[i * c + ch] = (map.coeffs[ch * cells + i] - mean[ch]) / stddev[ch];
    return Tensor::from({cells, c}, std::move(out));
  }
};

}  // namespace adept
