#pragma once

// Annotation denoising: bounded uniform noise on annotation features, a
// transformer decoder layer that cross-attends to image features, and the
// recovery losses for DCT maps and keypoints.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "adept/dct.hpp"
#include "adept/encoders.hpp"
#include "adept/nn.hpp"
#include "adept/rng.hpp"
#include "adept/tensor.hpp"

namespace adept {

struct NoiseSpec {
  double scale = 1.0;  // multiplier on the bound mu = max|f|
  std::uint64_t rng_seed = 0;
};

/// Per-element noise draws consumed by inject_noise; Record/Replay lets
/// finite-difference probes reuse the exact same noise on every evaluation.
class NoiseTape {
 public:
  enum class Mode { Off, Record, Replay };

  void record() {
    mode_ = Mode::Record;
    draws_.clear();
    cursor_ = 0;
  }
  void replay() {
    mode_ = Mode::Replay;
    cursor_ = 0;
  }
  void off() { mode_ = Mode::Off; }
  Mode mode() const { return mode_; }

  // Replay hands back the recorded noise; record stores what was drawn.
  bool try_replay(std::vector<double>& u) {
    if (mode_ != Mode::Replay) return false;
    if (cursor_ >= draws_.size()) throw StateError("NoiseTape: replay ran past the recording");
    u = draws_[cursor_++];
    return true;
  }
  void maybe_record(const std::vector<double>& u) {
    if (mode_ == Mode::Record) draws_.push_back(u);
  }

 private:
  Mode mode_ = Mode::Off;
  std::vector<std::vector<double>> draws_;
  std::size_t cursor_ = 0;
};

/// f + u with u ~ iid Uniform(-scale*mu, scale*mu), mu = max|f| over the
/// whole tensor. u is a constant for differentiation. When the bound is zero
/// the input handle is returned unchanged.
inline Tensor inject_noise(const Tensor& f, const NoiseSpec& spec, Rng& rng, NoiseTape* tape = nullptr) {
  if (spec.scale < 0.0) throw ParameterError("inject_noise: scale must be >= 0");
  std::vector<double> u;
  if (tape && tape->try_replay(u)) {
    if (u.empty()) return f;
    return add(f, Tensor::from(f.shape(), std::move(u)));
  }
  double mu = 0.0;
  for (double v : f.data()) {
    if (!std::isfinite(v)) throw DomainError("inject_noise: non-finite feature");
    mu = std::max(mu, std::abs(v));
  }
  const double bound = spec.scale * mu;
  if (bound == 0.0) {
    if (tape) tape->maybe_record(u);
    return f;
  }
  u.resize(f.numel());
  for (auto& x : u) x = rng.uniform(-bound, bound);
  if (tape) tape->maybe_record(u);
  return add(f, Tensor::from(f.shape(), std::move(u)));
}

/// Self-attention over the noisy queries, cross-attention into the image
/// tokens, then a feed-forward block; all pre-norm with residuals.
struct DecoderLayer {
  nn::LayerNorm ln_self, ln_cross, ln_ff;
  nn::MultiHeadAttention self_attn, cross_attn;
  nn::FeedForward ff;

  DecoderLayer() = default;
  DecoderLayer(std::size_t d, std::size_t heads, Rng& rng)
      : ln_self(d), ln_cross(d), ln_ff(d), self_attn(d, heads, rng), cross_attn(d, heads, rng), ff(d, 4 * d, rng) {}

  Tensor operator()(const Tensor& queries, const Tensor& memory) const {
    if (queries.rank() != 2 || memory.rank() != 2 || queries.dim(1) != memory.dim(1) ||
        queries.dim(1) != ln_self.gamma.numel()) {
      throw ContractError("DecoderLayer: query " + shape_str(queries.shape()) + " and memory " +
                          shape_str(memory.shape()) + " widths disagree with decoder width " +
                          std::to_string(ln_self.gamma.numel()));
    }
    const Tensor h = ln_self(queries);
    Tensor x = add(queries, self_attn(h, h));
    x = add(x, cross_attn(ln_cross(x), memory));
    return add(x, ff(ln_ff(x)));
  }

  nn::ParamList parameters() const {
    nn::ParamList p;
    nn::append(p, "ln_self", ln_self.parameters());
    nn::append(p, "self_attn", self_attn.parameters());
    nn::append(p, "ln_cross", ln_cross.parameters());
    nn::append(p, "cross_attn", cross_attn.parameters());
    nn::append(p, "ln_ff", ln_ff.parameters());
    nn::append(p, "ff", ff.parameters());
    return p;
  }
};

/// Recovers standardized DCT coefficients [tokens, 3*P*P] from noisy DCT tokens.
struct DctDecoder {
  DecoderLayer layer;
  nn::LayerNorm norm;
  nn::Linear head;

  DctDecoder() = default;
  DctDecoder(const EncoderConfig& cfg, Rng& rng)
      : layer(cfg.embed_dim, cfg.heads, rng), norm(cfg.embed_dim), head(cfg.embed_dim, cfg.patch_values(), rng) {}

  Tensor operator()(const SpatialFeatures& noisy, const SpatialFeatures& image) const {
    return head(norm(layer(noisy.tokens, image.tokens)));
  }

  nn::ParamList parameters() const {
    nn::ParamList p;
    nn::append(p, "layer", layer.parameters());
    nn::append(p, "norm", norm.parameters());
    nn::append(p, "head", head.parameters());
    return p;
  }
};

/// Per-axis coordinate classifiers H_x: R^d -> R^{kW}, H_y: R^d -> R^{kH}.
struct SimCCHead {
  std::size_t k = 2;
  nn::Linear hx, hy;

  SimCCHead() = default;
  SimCCHead(std::size_t d, std::size_t view_w, std::size_t view_h, std::size_t multiplier, Rng& rng)
      : k(multiplier), hx(d, multiplier * view_w, rng), hy(d, multiplier * view_h, rng) {
    if (multiplier < 2) throw ConfigError("SimCC multiplier k must be an integer > 1");
  }

  nn::ParamList parameters() const {
    nn::ParamList p;
    nn::append(p, "hx", hx.parameters());
    nn::append(p, "hy", hy.parameters());
    return p;
  }
};

struct KeypointLogits {
  Tensor x;  // [K, k*W]
  Tensor y;  // [K, k*H]
};

struct KeypointDecoder {
  DecoderLayer layer;
  nn::LayerNorm norm;
  SimCCHead simcc;

  KeypointDecoder() = default;
  KeypointDecoder(const EncoderConfig& cfg, std::size_t k, Rng& rng)
      : layer(cfg.embed_dim, cfg.heads, rng), norm(cfg.embed_dim), simcc(cfg.embed_dim, cfg.view_w(), cfg.view_h(), k, rng) {}

  KeypointLogits operator()(const KeypointFeatures& noisy, const SpatialFeatures& image) const {
    const Tensor h = norm(layer(noisy.tokens, image.tokens));
    return {simcc.hx(h), simcc.hy(h)};
  }

  nn::ParamList parameters() const {
    nn::ParamList p;
    nn::append(p, "layer", layer.parameters());
    nn::append(p, "norm", norm.parameters());
    nn::append(p, "simcc", simcc.parameters());
    return p;
  }
};

inline Tensor decode_dct(const DctDecoder& dec, const SpatialFeatures& noisy, const SpatialFeatures& image) {
  return dec(noisy, image);
}

inline KeypointLogits decode_keypoints(const KeypointDecoder& dec, const KeypointFeatures& noisy,
                                       const SpatialFeatures& image) {
  return dec(noisy, image);
}

/// Mean absolute error in standardized-coefficient space.
inline Tensor loss_dct(const Tensor& pred, const Tensor& target) { return l1_loss(pred, target); }

/// SimCC bin for a coordinate: round-half-up of coord*k, clamped to [0, k*extent-1].
inline int simcc_bin(double coord, std::size_t k, std::size_t extent) {
  const double b = std::floor(coord * static_cast<double>(k) + 0.5);
  const double hi = static_cast<double>(k * extent) - 1.0;
  return static_cast<int>(std::clamp(b, 0.0, hi));
}

struct KeypointLoss {
  Tensor value;
  bool no_visible = false;  // value is 0 and carries no gradient
};

/// Mean over visible joints and both axes of KL(onehot(bin) || softmax(logits)).
inline KeypointLoss loss_keypoint(const KeypointLogits& logits, const Keypoints& kp, std::size_t k,
                                  std::size_t view_w, std::size_t view_h) {
  const std::size_t n = kp.size();
  if (logits.x.rank() != 2 || logits.x.dim(0) != n || logits.x.dim(1) != k * view_w || logits.y.rank() != 2 ||
      logits.y.dim(0) != n || logits.y.dim(1) != k * view_h) {
    throw DimensionError("loss_keypoint: logits " + shape_str(logits.x.shape()) + "/" + shape_str(logits.y.shape()) +
                         " do not match " + std::to_string(n) + " joints at k=" + std::to_string(k));
  }
  const std::size_t visible = kp.visible_count();
  if (visible == 0) return {Tensor::scalar(0.0), true};
  std::vector<int> bx(n, 0), by(n, 0);
  std::vector<double> w(n, 0.0);
  const double inv = 1.0 / (2.0 * static_cast<double>(visible));
  for (std::size_t j = 0; j < n; ++j) {
    if (!kp.joints[j].visible) continue;
    bx[j] = simcc_bin(kp.joints[j].x, k, view_w);
    by[j] = simcc_bin(kp.joints[j].y, k, view_h);
    w[j] = inv;
  }
  const Tensor lx = weighted_sum(kl_div_onehot_rows(logits.x, bx), w);
  const Tensor ly = weighted_sum(kl_div_onehot_rows(logits.y, by), w);
  return {add(lx, ly), false};
}

/// lambda1 * l_kp + lambda2 * l_dct. Zero-weight terms are left out of the
/// graph entirely, so they contribute neither value nor gradient.
inline Tensor loss_de(const Tensor& l_kp, const Tensor& l_dct, double lambda1, double lambda2) {
  if (lambda1 < 0.0 || lambda2 < 0.0) throw ParameterError("loss_de: weights must be >= 0");
  if (lambda1 == 0.0 && lambda2 == 0.0) return Tensor::scalar(0.0);
  if (lambda1 == 0.0) return scale(l_dct, lambda2);
  if (lambda2 == 0.0) return scale(l_kp, lambda1);
  return add(scale(l_kp, lambda1), scale(l_dct, lambda2));
}

}  // namespace adept
