#pragma once

// Modality encoders: image and DCT-map token encoders, the keypoint encoder,
// projection heads, and the momentum (EMA) parameter pairing.

#include <cmath>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "adept/dct.hpp"
#include "adept/nn.hpp"
#include "adept/synthdata.hpp"
#include "adept/tensor.hpp"

namespace adept {

struct EncoderConfig {
  std::size_t embed_dim = 64;
  std::size_t depth = 2;
  std::size_t heads = 4;
  std::size_t grid_h = 8;
  std::size_t grid_w = 8;
  std::size_t patch = 8;
  std::size_t num_keypoints = kNumJoints;
  std::size_t proj_dim = 32;
  std::size_t keypoint_bin_px = 4;

  std::size_t tokens() const { return grid_h * grid_w; }
  std::size_t view_h() const { return grid_h * patch; }
  std::size_t view_w() const { return grid_w * patch; }
  std::size_t patch_values() const { return 3 * patch * patch; }

  void validate() const {
    if (depth < 1) throw ConfigError("encoder depth must be >= 1");
    if (heads == 0 || embed_dim % heads != 0) {
      throw ConfigError("embed_dim " + std::to_string(embed_dim) + " not divisible by heads " +
                        std::to_string(heads));
    }
    if (grid_h == 0 || grid_w == 0 || patch == 0) throw ConfigError("token grid must be non-empty");
    if (num_keypoints == 0 || proj_dim == 0) throw ConfigError("keypoint count and proj_dim must be positive");
    if (keypoint_bin_px == 0 || view_w() % keypoint_bin_px != 0 || view_h() % keypoint_bin_px != 0) {
      throw ConfigError("keypoint_bin_px must divide the view size");
    }
  }

  bool operator==(const EncoderConfig&) const = default;
};

struct SpatialFeatures {
  Tensor tokens;  // [grid_h*grid_w, d]
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
};

struct KeypointFeatures {
  Tensor tokens;  // [K, d]
};

/// Patch pixels as tokens [grid_h*grid_w, 3*P*P], scaled to [0,1]; each token
/// is laid out channel-major (c*P*P + y*P + x), like a DCT map column.
inline Tensor image_tokens(const ImageRGB& view, std::size_t patch) {
  check_divisible(view.height, view.width, patch);
  const std::size_t gh = view.height / patch, gw = view.width / patch, pp = patch * patch;
  std::vector<double> out(gh * gw * 3 * pp);
  for (std::size_t gy = 0; gy < gh; ++gy)
    for (std::size_t gx = 0; gx < gw; ++gx) {
      double* tok = out.data() + (gy * gw + gx) * 3 * pp;
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < patch; ++y)
          for (std::size_t x = 0; x < patch; ++x)
            tok[c * pp + y * patch + x] = view.at(gy * patch + y, gx * patch + x, c) / 255.0;
    }
  return Tensor::from({gh * gw, 3 * pp}, std::move(out));
}

/// 2D sine/cosine table [grid_h*grid_w, d] used to initialize the learned
/// positions: the first half of the channels encodes the column, the second
/// half the row.
inline Tensor sincos_positions(const EncoderConfig& c) {
  const std::size_t d = c.embed_dim, half = d / 2, pairs = std::max<std::size_t>(half / 2, 1);
  std::vector<double> v(c.tokens() * d, 0.0);
  for (std::size_t gy = 0; gy < c.grid_h; ++gy)
    for (std::size_t gx = 0; gx < c.grid_w; ++gx) {
      double* row = v.data() + (gy * c.grid_w + gx) * d;
      for (std::size_t i = 0; i < pairs; ++i) {
        const double w = std::pow(100.0, -static_cast<double>(i) / static_cast<double>(pairs));
        const std::size_t cx = 2 * i, cy = half + 2 * i;
        if (cx < half) row[cx] = std::sin(static_cast<double>(gx) * w);
        if (cx + 1 < half) row[cx + 1] = std::cos(static_cast<double>(gx) * w);
        if (cy < d) row[cy] = std::sin(static_cast<double>(gy) * w);
        if (cy + 1 < d) row[cy + 1] = std::cos(static_cast<double>(gy) * w);
      }
    }
  return Tensor::from({c.tokens(), d}, std::move(v), true);
}

/// Linear patch embedding + learned absolute positions + pre-norm transformer
/// blocks + final layer norm. Used for both F_I (pixels) and F_T (DCT maps).
struct SpatialEncoder {
  EncoderConfig cfg;
  std::size_t in_dim = 0;
  nn::Linear embed;
  Tensor pos;  // [tokens, d]
  std::vector<nn::TransformerBlock> blocks;
  nn::LayerNorm norm;

  SpatialEncoder() = default;
  SpatialEncoder(const EncoderConfig& c, std::size_t input_dim, Rng& rng)
      : cfg(c), in_dim(input_dim), embed(input_dim, c.embed_dim, rng),
        pos(sincos_positions(c)), norm(c.embed_dim) {
    c.validate();
    for (std::size_t i = 0; i < c.depth; ++i) blocks.emplace_back(c.embed_dim, c.heads, rng);
  }

  SpatialFeatures forward(const Tensor& tokens) const {
    if (tokens.rank() != 2 || tokens.dim(0) != cfg.tokens() || tokens.dim(1) != in_dim) {
      throw DimensionError("SpatialEncoder: expected tokens [" + std::to_string(cfg.tokens()) + "," +
                           std::to_string(in_dim) + "], got " + shape_str(tokens.shape()));
    }
    Tensor x = add(embed(tokens), pos);
    for (const auto& b : blocks) x = b(x);
    return {norm(x), cfg.grid_h, cfg.grid_w};
  }

  void zero_positions_() {
    for (auto& v : pos.data()) v = 0.0;
  }

  nn::ParamList parameters() const {
    nn::ParamList p;
    nn::append(p, "embed", embed.parameters());
    p.push_back({"pos", pos});
    for (std::size_t i = 0; i < blocks.size(); ++i) nn::append(p, "block" + std::to_string(i), blocks[i].parameters());
    nn::append(p, "norm", norm.parameters());
    return p;
  }
};

inline SpatialFeatures encode_image(const SpatialEncoder& enc, const ImageRGB& view) {
  if (view.height != enc.cfg.view_h() || view.width != enc.cfg.view_w()) {
    throw DimensionError("encode_image: view " + std::to_string(view.height) + "x" + std::to_string(view.width) +
                         " does not match encoder geometry " + std::to_string(enc.cfg.view_h()) + "x" +
                         std::to_string(enc.cfg.view_w()));
  }
  return enc.forward(image_tokens(view, enc.cfg.patch));
}

inline SpatialFeatures encode_dct(const SpatialEncoder& enc, const DCTMap& map, const DctStandardizer& stats) {
  if (map.grid_h != enc.cfg.grid_h || map.grid_w != enc.cfg.grid_w || map.patch != enc.cfg.patch) {
    throw DimensionError("encode_dct: map grid " + shape_str(map.shape()) + " does not match encoder geometry");
  }
  return enc.forward(stats.tokens(map));
}

/// Per-joint token = identity embedding + x-bin embedding + y-bin embedding;
/// invisible joints take a learned mask token.
struct KeypointEncoder {
  EncoderConfig cfg;
  Tensor identity;  // [K, d]
  Tensor x_bins;    // [view_w / bin, d]
  Tensor y_bins;    // [view_h / bin, d]
  Tensor mask;      // [1, d]

  KeypointEncoder() = default;
  KeypointEncoder(const EncoderConfig& c, Rng& rng)
      : cfg(c),
        identity(nn::init_normal({c.num_keypoints, c.embed_dim}, 0.5, rng)),
        x_bins(nn::init_normal({c.view_w() / c.keypoint_bin_px, c.embed_dim}, 0.5, rng)),
        y_bins(nn::init_normal({c.view_h() / c.keypoint_bin_px, c.embed_dim}, 0.5, rng)),
        mask(nn::init_normal({1, c.embed_dim}, 0.5, rng)) {
    c.validate();
  }

  std::pair<int, int> bins(const KeypointXY& j) const {
    const int nx = static_cast<int>(x_bins.dim(0)), ny = static_cast<int>(y_bins.dim(0));
    const auto bx = static_cast<int>(std::floor(j.x / static_cast<double>(cfg.keypoint_bin_px)));
    const auto by = static_cast<int>(std::floor(j.y / static_cast<double>(cfg.keypoint_bin_px)));
    return {std::clamp(bx, 0, nx - 1), std::clamp(by, 0, ny - 1)};
  }

  KeypointFeatures forward(const Keypoints& kp) const {
    const std::size_t k = cfg.num_keypoints, d = cfg.embed_dim;
    if (kp.size() != k) {
      throw DimensionError("encode_keypoints: expected " + std::to_string(k) + " joints, got " +
                           std::to_string(kp.size()));
    }
    const double hi_x = static_cast<double>(cfg.view_w()) - 1.0, hi_y = static_cast<double>(cfg.view_h()) - 1.0;
    std::vector<int> ids(k), bx(k), by(k), zeros(k, 0);
    std::vector<double> vis(k * d), hid(k * d);
    for (std::size_t j = 0; j < k; ++j) {
      const auto& p = kp.joints[j];
      if (p.visible && !(p.x >= 0.0 && p.x <= hi_x && p.y >= 0.0 && p.y <= hi_y)) {
        throw DomainError("encode_keypoints: visible joint " + std::to_string(j) + " at (" + std::to_string(p.x) +
                          ", " + std::to_string(p.y) + ") lies outside the view");
      }
      ids[j] = static_cast<int>(j);
      std::tie(bx[j], by[j]) = p.visible ? bins(p) : std::pair<int, int>{0, 0};
      std::fill_n(vis.begin() + j * d, d, p.visible ? 1.0 : 0.0);
      std::fill_n(hid.begin() + j * d, d, p.visible ? 0.0 : 1.0);
    }
    const Tensor joint = add(embedding(identity, ids), add(embedding(x_bins, bx), embedding(y_bins, by)));
    const Tensor masked = embedding(mask, zeros);
    return {add(mul(joint, Tensor::from({k, d}, std::move(vis))), mul(masked, Tensor::from({k, d}, std::move(hid))))};
  }

  /// Nearest (x-bin, y-bin) pair for a visible joint's token with its identity
  /// embedding removed.
  std::pair<int, int> decode_bins(std::span<const double> token, std::size_t joint) const {
    const std::size_t d = cfg.embed_dim;
    std::vector<double> r(d);
    for (std::size_t c = 0; c < d; ++c) r[c] = token[c] - identity.at(joint, c);
    double best = std::numeric_limits<double>::infinity();
    std::pair<int, int> arg{0, 0};
    for (std::size_t i = 0; i < x_bins.dim(0); ++i)
      for (std::size_t j = 0; j < y_bins.dim(0); ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
          const double e = r[c] - x_bins.at(i, c) - y_bins.at(j, c);
          s += e * e;
        }
        if (s < best) {
          best = s;
          arg = {static_cast<int>(i), static_cast<int>(j)};
        }
      }
    return arg;
  }

  nn::ParamList parameters() const {
    return {{"identity", identity}, {"x_bins", x_bins}, {"y_bins", y_bins}, {"mask", mask}};
  }
};

inline KeypointFeatures encode_keypoints(const KeypointEncoder& enc, const Keypoints& kp) { return enc.forward(kp); }

/// Global average pool -> Linear -> GELU -> Linear -> L2 normalize.
struct ProjectionHead {
  nn::Linear fc1, fc2;

  ProjectionHead() = default;
  ProjectionHead(std::size_t d, std::size_t proj_dim, Rng& rng) : fc1(d, d, rng), fc2(d, proj_dim, rng) {}

  /// Returns [1, proj_dim] with unit norm.
  Tensor operator()(const SpatialFeatures& f) const { return l2_normalize(fc2(gelu(fc1(mean_rows(f.tokens))))); }

  nn::ParamList parameters() const {
    nn::ParamList p;
    nn::append(p, "fc1", fc1.parameters());
    nn::append(p, "fc2", fc2.parameters());
    return p;
  }
};

inline Tensor project(const SpatialFeatures& f, const ProjectionHead& head) { return head(f); }

/// Online parameters theta_q and their EMA copy theta_m.
struct MomentumPair {
  nn::ParamList online;
  nn::ParamList momentum;
  double coefficient = 0.999;

  /// Copies theta_q into theta_m bitwise.
  void sync() { nn::copy_values(online, momentum); }
};

/// theta_m <- lambda * theta_m + (1 - lambda) * theta_q, outside the gradient graph.
inline void momentum_update(MomentumPair& pair) {
  if (pair.online.size() != pair.momentum.size()) throw ContractError("momentum_update: parameter count mismatch");
  const double lam = pair.coefficient;
  for (std::size_t i = 0; i < pair.online.size(); ++i) {
    const Tensor& q = pair.online[i].tensor;
    Tensor& m = pair.momentum[i].tensor;
    if (q.shape() != m.shape()) {
      throw ContractError("momentum_update: shape mismatch for " + pair.online[i].name + ": " +
                          shape_str(q.shape()) + " vs " + shape_str(m.shape()));
    }
    auto qv = q.data();
    auto mv = m.data();
    for (std::size_t j = 0; j < mv.size(); ++j) mv[j] = lam * mv[j] + (1.0 - lam) * qv[j];
  }
}

}  // namespace adept
