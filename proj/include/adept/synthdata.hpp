#pragma once

// Procedural human-like stick figures with exact keypoints, plus the two-view
// augmentation used for pretraining.

#include <array>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "adept/dct.hpp"
#include "adept/errors.hpp"
#include "adept/rng.hpp"

namespace adept {

inline constexpr std::size_t kNumJoints = 14;

enum Joint : int {
  kHead = 0,
  kNeck,
  kRShoulder,
  kRElbow,
  kRWrist,
  kLShoulder,
  kLElbow,
  kLWrist,
  kRHip,
  kRKnee,
  kRAnkle,
  kLHip,
  kLKnee,
  kLAnkle,
};

inline constexpr std::array<const char*, kNumJoints> kJointNames = {
    "head",  "neck",   "r_shoulder", "r_elbow", "r_wrist", "l_shoulder", "l_elbow",
    "l_wrist", "r_hip", "r_knee",     "r_ankle", "l_hip",   "l_knee",     "l_ankle"};

/// Tree topology; the neck is the root.
inline constexpr std::array<int, kNumJoints> kSkeletonParents = {
    kNeck, -1, kNeck, kRShoulder, kRElbow, kNeck, kLShoulder, kLElbow,
    kNeck, kRHip, kRKnee, kNeck, kLHip, kLKnee};

/// Left/right counterpart of every joint (self for midline joints).
inline constexpr std::array<int, kNumJoints> kMirrorJoint = {
    kHead, kNeck, kLShoulder, kLElbow, kLWrist, kRShoulder, kRElbow, kRWrist,
    kLHip, kLKnee, kLAnkle, kRHip, kRKnee, kRAnkle};

namespace skeleton {

/// Rest (T-pose) bone vector from parent to joint, in body units with y down.
inline constexpr std::array<std::array<double, 2>, kNumJoints> kRestOffset = {{
    {0.0, -0.35},   // head
    {0.0, 0.0},     // neck (root)
    {-0.30, 0.0},   // r_shoulder
    {-0.35, 0.0},   // r_elbow
    {-0.30, 0.0},   // r_wrist
    {0.30, 0.0},    // l_shoulder
    {0.35, 0.0},    // l_elbow
    {0.30, 0.0},    // l_wrist
    {-0.15, 0.75},  // r_hip
    {0.0, 0.45},    // r_knee
    {0.0, 0.45},    // r_ankle
    {0.15, 0.75},   // l_hip
    {0.0, 0.45},    // l_knee
    {0.0, 0.45},    // l_ankle
}};

inline double rest_length(int j) { return std::hypot(kRestOffset[j][0], kRestOffset[j][1]); }

inline double rest_angle(int j) { return std::atan2(kRestOffset[j][1], kRestOffset[j][0]); }

}  // namespace skeleton

struct KeypointXY {
  double x = 0.0;
  double y = 0.0;
  bool visible = true;
};

/// K joints in pixel coordinates (pixel centres at integers) of some view.
struct Keypoints {
  std::vector<KeypointXY> joints;

  std::size_t size() const { return joints.size(); }
  std::size_t visible_count() const {
    std::size_t n = 0;
    for (const auto& j : joints) n += j.visible ? 1 : 0;
    return n;
  }
};

/// Figure parameters. Joint angles are offsets (radians) from the T-pose,
/// applied relative to the parent bone; limb_scale multiplies each bone length.
struct PoseParams {
  double root_x = 32.0;
  double root_y = 20.0;
  double rotation = 0.0;
  double scale = 20.0;  // pixels per body unit
  std::array<double, kNumJoints> angles{};
  std::array<double, kNumJoints> limb_scale = {1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1};
};

/// Joint positions by 2D forward kinematics, parents before children.
inline std::array<std::array<double, 2>, kNumJoints> forward_kinematics(const PoseParams& pose) {
  std::array<std::array<double, 2>, kNumJoints> pos{};
  std::array<double, kNumJoints> abs_angle{};
  // Index order already lists every parent before its children except the
  // head, whose parent (neck) is handled first explicitly.
  static constexpr std::array<int, kNumJoints> order = {kNeck, kHead, kRShoulder, kRElbow, kRWrist,
                                                        kLShoulder, kLElbow, kLWrist, kRHip, kRKnee,
                                                        kRAnkle, kLHip, kLKnee, kLAnkle};
  for (int j : order) {
    const int p = kSkeletonParents[j];
    if (p < 0) {
      pos[j] = {pose.root_x, pose.root_y};
      abs_angle[j] = pose.rotation;
      continue;
    }
    const double parent_rest = kSkeletonParents[p] < 0 ? 0.0 : skeleton::rest_angle(p);
    const double rel_rest = skeleton::rest_angle(j) - parent_rest;
    abs_angle[j] = abs_angle[p] + rel_rest + pose.angles[j];
    const double len = pose.scale * pose.limb_scale[j] * skeleton::rest_length(j);
    pos[j] = {pos[p][0] + len * std::cos(abs_angle[j]), pos[p][1] + len * std::sin(abs_angle[j])};
  }
  return pos;
}

struct SceneConfig {
  std::size_t canvas = 64;
  std::size_t patch = 8;
};

struct SyntheticScene {
  PoseParams pose;
  std::uint64_t background_seed = 0;
  ImageRGB image;
  Keypoints keypoints;
};

namespace detail {

inline double segment_distance(double px, double py, const std::array<double, 2>& a,
                               const std::array<double, 2>& b) {
  const double dx = b[0] - a[0], dy = b[1] - a[1];
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0.0 ? ((px - a[0]) * dx + (py - a[1]) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return std::hypot(px - (a[0] + t * dx), py - (a[1] + t * dy));
}

/// Smooth background: a base colour plus a few low-frequency cosine waves per channel.
inline ImageRGB render_background(std::size_t canvas, std::uint64_t seed) {
  Rng rng(seed);
  ImageRGB img(canvas, canvas);
  constexpr int kWaves = 5;
  for (std::size_t c = 0; c < 3; ++c) {
    const double base = rng.uniform(60.0, 190.0);
    std::array<std::array<double, 4>, kWaves> waves{};
    for (auto& w : waves) {
      const double freq = rng.uniform(0.5, 3.0) * 2.0 * std::numbers::pi / static_cast<double>(canvas);
      const double dir = rng.uniform(0.0, 2.0 * std::numbers::pi);
      w = {freq * std::cos(dir), freq * std::sin(dir), rng.uniform(0.0, 2.0 * std::numbers::pi),
           rng.uniform(5.0, 18.0)};
    }
    for (std::size_t y = 0; y < canvas; ++y)
      for (std::size_t x = 0; x < canvas; ++x) {
        double v = base;
        for (const auto& w : waves) v += w[3] * std::cos(w[0] * x + w[1] * y + w[2]);
        img.at(y, x, c) = std::clamp(v, 0.0, 255.0);
      }
  }
  return img;
}

}  // namespace detail

/// Renders the figure over a procedural background. Deterministic per seed.
inline SyntheticScene render_figure(const PoseParams& pose, const SceneConfig& canvas, std::uint64_t seed) {
  check_divisible(canvas.canvas, canvas.canvas, canvas.patch);
  const double extent = static_cast<double>(canvas.canvas);
  if (!(pose.root_x >= 0.0 && pose.root_x <= extent - 1.0 && pose.root_y >= 0.0 &&
        pose.root_y <= extent - 1.0)) {
    throw DomainError("render_figure: root (" + std::to_string(pose.root_x) + ", " +
                      std::to_string(pose.root_y) + ") is off the canvas");
  }
  if (!(pose.scale > 0.0)) throw DomainError("render_figure: scale must be positive");
  for (double s : pose.limb_scale) {
    if (!(s > 0.0)) throw DomainError("render_figure: limb lengths must be positive");
  }

  SyntheticScene scene;
  scene.pose = pose;
  scene.background_seed = derive_seed(seed, 1);
  scene.image = detail::render_background(canvas.canvas, scene.background_seed);

  Rng rng(derive_seed(seed, 2));
  // Torso/head, arms and legs each get one colour; left and right match so
  // horizontal flips stay label-consistent.
  std::array<std::array<double, 3>, 3> colors{};
  for (auto& col : colors)
    for (auto& v : col) v = rng.bernoulli(0.5) ? rng.uniform(0.0, 50.0) : rng.uniform(205.0, 255.0);
  auto group = [](int j) {
    if (j == kHead || j == kNeck || j == kRHip || j == kLHip || j == kRShoulder || j == kLShoulder) return 0;
    if (j == kRElbow || j == kRWrist || j == kLElbow || j == kLWrist) return 1;
    return 2;
  };

  const auto pos = forward_kinematics(pose);
  struct Capsule {
    std::array<double, 2> a, b;
    double radius;
    int color;
  };
  std::vector<Capsule> caps;
  for (int j = 0; j < static_cast<int>(kNumJoints); ++j) {
    const int p = kSkeletonParents[j];
    if (p < 0) continue;
    const double r = (j == kRHip || j == kLHip ? 0.11 : 0.08) * pose.scale;
    caps.push_back({pos[p], pos[j], std::max(r, 1.0), group(j)});
  }
  caps.push_back({pos[kHead], pos[kHead], std::max(0.16 * pose.scale, 1.5), 0});

  for (std::size_t y = 0; y < canvas.canvas; ++y)
    for (std::size_t x = 0; x < canvas.canvas; ++x) {
      for (const auto& cap : caps) {
        const double d = detail::segment_distance(static_cast<double>(x), static_cast<double>(y), cap.a, cap.b);
        const double cover = std::clamp(cap.radius + 0.5 - d, 0.0, 1.0);
        if (cover <= 0.0) continue;
        for (std::size_t c = 0; c < 3; ++c) {
          double& v = scene.image.at(y, x, c);
          v = (1.0 - cover) * v + cover * colors[cap.color][c];
        }
      }
    }

  scene.keypoints.joints.resize(kNumJoints);
  for (std::size_t j = 0; j < kNumJoints; ++j) {
    auto& kp = scene.keypoints.joints[j];
    kp.x = pos[j][0];
    kp.y = pos[j][1];
    kp.visible = kp.x >= 0.0 && kp.x <= extent - 1.0 && kp.y >= 0.0 && kp.y <= extent - 1.0;
  }
  return scene;
}

/// Random pose that keeps the figure mostly on a canvas of the given size.
inline PoseParams sample_pose(std::size_t canvas, Rng& rng) {
  const double c = static_cast<double>(canvas);
  PoseParams p;
  p.scale = rng.uniform(0.26, 0.34) * c;
  p.root_x = rng.uniform(0.35, 0.65) * c;
  p.root_y = rng.uniform(0.22, 0.34) * c;
  p.rotation = rng.uniform(-0.25, 0.25);
  p.angles[kHead] = rng.uniform(-0.3, 0.3);
  for (int j : {kRShoulder, kLShoulder}) p.angles[j] = rng.uniform(-0.9, 0.9);
  for (int j : {kRElbow, kLElbow, kRWrist, kLWrist}) p.angles[j] = rng.uniform(-1.0, 1.0);
  for (int j : {kRHip, kLHip}) p.angles[j] = rng.uniform(-0.15, 0.15);
  for (int j : {kRKnee, kLKnee}) p.angles[j] = rng.uniform(-0.5, 0.5);
  for (int j : {kRAnkle, kLAnkle}) p.angles[j] = rng.uniform(-0.4, 0.4);
  for (auto& s : p.limb_scale) s = rng.uniform(0.85, 1.15);
  return p;
}

// ---------------------------------------------------------------------------
// Datasets

/// Source of (image, keypoints) samples. Real-dataset loaders plug in here by
/// implementing this interface; only the synthetic source ships.
class SampleSource {
 public:
  virtual ~SampleSource() = default;
  virtual std::size_t size() const = 0;
  virtual SyntheticScene scene(std::size_t index) const = 0;
  virtual SceneConfig geometry() const = 0;
};

struct SyntheticDatasetConfig {
  std::size_t num_samples = 64;
  SceneConfig scene;
  std::uint64_t seed = 0;
};

/// Sample i is a pure function of (config, i); scenes are rendered on demand
/// and cached.
class SyntheticDataset : public SampleSource {
 public:
  explicit SyntheticDataset(SyntheticDatasetConfig cfg) : cfg_(cfg), cache_(cfg.num_samples) {
    check_divisible(cfg.scene.canvas, cfg.scene.canvas, cfg.scene.patch);
  }

  std::size_t size() const override { return cfg_.num_samples; }
  SceneConfig geometry() const override { return cfg_.scene; }
  const SyntheticDatasetConfig& config() const { return cfg_; }

  std::uint64_t sample_seed(std::size_t i) const { return derive_seed(cfg_.seed, 0x5eed0000ULL + i); }

  SyntheticScene scene(std::size_t i) const override {
    if (i >= cfg_.num_samples) throw IndexError("SyntheticDataset: sample " + std::to_string(i) + " out of range");
    if (!cache_[i]) {
      const std::uint64_t s = sample_seed(i);
      Rng rng(derive_seed(s, 0));
      const PoseParams pose = sample_pose(cfg_.scene.canvas, rng);
      cache_[i] = std::make_shared<SyntheticScene>(render_figure(pose, cfg_.scene, s));
    }
    return *cache_[i];
  }

 private:
  SyntheticDatasetConfig cfg_;
  mutable std::vector<std::shared_ptr<SyntheticScene>> cache_;
};

// ---------------------------------------------------------------------------
// Augmentation

/// Maps source pixel-centre coordinates to view coordinates:
/// (u, v) = (a*x + b*y + tx, c*x + d*y + ty).
struct Affine2D {
  double a = 1, b = 0, tx = 0;
  double c = 0, d = 1, ty = 0;

  std::array<double, 2> apply(double x, double y) const { return {a * x + b * y + tx, c * x + d * y + ty}; }

  Affine2D inverse() const {
    const double det = a * d - b * c;
    if (det == 0.0) throw DomainError("Affine2D: singular transform");
    Affine2D inv;
    inv.a = d / det;
    inv.b = -b / det;
    inv.c = -c / det;
    inv.d = a / det;
    inv.tx = -(inv.a * tx + inv.b * ty);
    inv.ty = -(inv.c * tx + inv.d * ty);
    return inv;
  }

  /// this after other.
  Affine2D compose(const Affine2D& o) const {
    Affine2D r;
    r.a = a * o.a + b * o.c;
    r.b = a * o.b + b * o.d;
    r.c = c * o.a + d * o.c;
    r.d = c * o.b + d * o.d;
    r.tx = a * o.tx + b * o.ty + tx;
    r.ty = c * o.tx + d * o.ty + ty;
    return r;
  }

  bool is_identity() const { return a == 1 && b == 0 && tx == 0 && c == 0 && d == 1 && ty == 0; }
};

struct AugmentationSpec {
  double crop_scale_min = 0.7;  // crop side as a fraction of the source side
  double crop_scale_max = 1.0;
  double flip_prob = 0.5;
  double brightness = 0.2;  // factors drawn from [1-m, 1+m]
  double contrast = 0.2;
  double saturation = 0.2;
  std::uint64_t seed = 0;

  static AugmentationSpec identity() {
    AugmentationSpec s;
    s.crop_scale_min = s.crop_scale_max = 1.0;
    s.flip_prob = 0.0;
    s.brightness = s.contrast = s.saturation = 0.0;
    return s;
  }
};

/// One view's sampled augmentation parameters.
struct ViewTransform {
  Affine2D geometry;
  bool flipped = false;
  double brightness = 1.0;
  double contrast = 1.0;
  double saturation = 1.0;
};

/// Square crop [x0, x0+side) x [y0, y0+side) (pixel-edge coordinates) resized
/// to `out` pixels, optionally mirrored horizontally.
inline Affine2D crop_resize_flip(double x0, double y0, double side, std::size_t out, bool flip) {
  const double k = static_cast<double>(out) / side;
  Affine2D m;
  m.a = k;
  m.d = k;
  m.tx = (0.5 - x0) * k - 0.5;
  m.ty = (0.5 - y0) * k - 0.5;
  if (flip) {
    Affine2D f;
    f.a = -1.0;
    f.tx = static_cast<double>(out) - 1.0;
    m = f.compose(m);
  }
  return m;
}

inline ViewTransform sample_view_transform(std::size_t canvas, const AugmentationSpec& spec, Rng& rng) {
  ViewTransform t;
  const double c = static_cast<double>(canvas);
  const double s = spec.crop_scale_min == spec.crop_scale_max
                       ? spec.crop_scale_min
                       : rng.uniform(spec.crop_scale_min, spec.crop_scale_max);
  const double side = s * c;
  const double x0 = side < c ? rng.uniform(0.0, c - side) : 0.0;
  const double y0 = side < c ? rng.uniform(0.0, c - side) : 0.0;
  t.flipped = spec.flip_prob > 0.0 && rng.bernoulli(spec.flip_prob);
  t.geometry = crop_resize_flip(x0, y0, side, canvas, t.flipped);
  if (spec.brightness > 0.0) t.brightness = rng.uniform(1.0 - spec.brightness, 1.0 + spec.brightness);
  if (spec.contrast > 0.0) t.contrast = rng.uniform(1.0 - spec.contrast, 1.0 + spec.contrast);
  if (spec.saturation > 0.0) t.saturation = rng.uniform(1.0 - spec.saturation, 1.0 + spec.saturation);
  return t;
}

/// Warps by inverse mapping with bilinear sampling (edge-clamped), then applies
/// the photometric jitter. Output has the source's size.
inline ImageRGB apply_view_transform(const ImageRGB& src, const ViewTransform& t) {
  ImageRGB out(src.height, src.width);
  if (t.geometry.is_identity()) {
    out = src;
  } else {
    const Affine2D inv = t.geometry.inverse();
    const double max_x = static_cast<double>(src.width) - 1.0;
    const double max_y = static_cast<double>(src.height) - 1.0;
    for (std::size_t v = 0; v < out.height; ++v)
      for (std::size_t u = 0; u < out.width; ++u) {
        auto [x, y] = inv.apply(static_cast<double>(u), static_cast<double>(v));
        x = std::clamp(x, 0.0, max_x);
        y = std::clamp(y, 0.0, max_y);
        const auto x0 = static_cast<std::size_t>(std::floor(x));
        const auto y0 = static_cast<std::size_t>(std::floor(y));
        const std::size_t x1 = std::min(x0 + 1, src.width - 1), y1 = std::min(y0 + 1, src.height - 1);
        const double fx = x - static_cast<double>(x0), fy = y - static_cast<double>(y0);
        for (std::size_t c = 0; c < 3; ++c) {
          const double top = src.at(y0, x0, c) * (1 - fx) + src.at(y0, x1, c) * fx;
          const double bot = src.at(y1, x0, c) * (1 - fx) + src.at(y1, x1, c) * fx;
          out.at(v, u, c) = top * (1 - fy) + bot * fy;
        }
      }
  }
  if (t.brightness != 1.0) {
    for (auto& v : out.pixels) v = std::clamp(v * t.brightness, 0.0, 255.0);
  }
  if (t.contrast != 1.0) {
    double mean = 0.0;
    for (std::size_t i = 0; i < out.height * out.width; ++i) {
      mean += 0.299 * out.pixels[3 * i] + 0.587 * out.pixels[3 * i + 1] + 0.114 * out.pixels[3 * i + 2];
    }
    mean /= static_cast<double>(out.height * out.width);
    for (auto& v : out.pixels) v = std::clamp(mean + (v - mean) * t.contrast, 0.0, 255.0);
  }
  if (t.saturation != 1.0) {
    for (std::size_t i = 0; i < out.height * out.width; ++i) {
      double* p = &out.pixels[3 * i];
      const double gray = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
      for (int c = 0; c < 3; ++c) p[c] = std::clamp(gray + (p[c] - gray) * t.saturation, 0.0, 255.0);
    }
  }
  return out;
}

/// Keypoints mapped into a view; joints outside the view become invisible and
/// flipped views swap left/right labels.
inline Keypoints transform_keypoints(const Keypoints& kp, const ViewTransform& t, std::size_t canvas) {
  const double hi = static_cast<double>(canvas) - 1.0;
  Keypoints out;
  out.joints.resize(kp.size());
  for (std::size_t j = 0; j < kp.size(); ++j) {
    const auto [u, v] = t.geometry.apply(kp.joints[j].x, kp.joints[j].y);
    const std::size_t dst = t.flipped && kp.size() == kNumJoints ? static_cast<std::size_t>(kMirrorJoint[j]) : j;
    out.joints[dst] = {u, v, kp.joints[j].visible && u >= 0.0 && u <= hi && v >= 0.0 && v <= hi};
  }
  return out;
}

/// Pose whose rendering lands where `t` maps the original figure.
inline PoseParams transform_pose(const PoseParams& pose, const ViewTransform& t) {
  PoseParams out = pose;
  const auto [u, v] = t.geometry.apply(pose.root_x, pose.root_y);
  out.root_x = u;
  out.root_y = v;
  out.scale = pose.scale * std::abs(t.geometry.d);
  if (t.flipped) {
    out.rotation = -pose.rotation;
    for (std::size_t j = 0; j < kNumJoints; ++j) {
      out.angles[kMirrorJoint[j]] = -pose.angles[j];
      out.limb_scale[kMirrorJoint[j]] = pose.limb_scale[j];
    }
  }
  return out;
}

struct TwoViews {
  ImageRGB view;        // I
  ImageRGB view_prime;  // I'
  Keypoints keypoints;  // in I's frame
  ViewTransform transform;
  ViewTransform transform_prime;
};

/// Independent augmentations for I and I'. If I's crop loses every joint the
/// draw is repeated once before giving up.
inline TwoViews augment_two_views(const SyntheticScene& scene, const AugmentationSpec& spec, Rng& rng) {
  const std::size_t canvas = scene.image.width;
  TwoViews out;
  for (int attempt = 0; attempt < 2; ++attempt) {
    out.transform = sample_view_transform(canvas, spec, rng);
    out.keypoints = transform_keypoints(scene.keypoints, out.transform, canvas);
    if (out.keypoints.visible_count() > 0) break;
    if (attempt == 1) throw DomainError("augment_two_views: crop removed every joint twice");
  }
  out.transform_prime = sample_view_transform(canvas, spec, rng);
  out.view = apply_view_transform(scene.image, out.transform);
  out.view_prime = apply_view_transform(scene.image, out.transform_prime);
  return out;
}

}  // namespace adept
