#pragma once

// Two-stage pretraining: stage 1 trains the image encoder contrastively, stage
// 2 adds the DCT and keypoint denoising losses. Also the frozen-encoder probe.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "adept/checkpoint.hpp"
#include "adept/contrastive.hpp"
#include "adept/dct.hpp"
#include "adept/denoise.hpp"
#include "adept/encoders.hpp"
#include "adept/optim.hpp"
#include "adept/synthdata.hpp"

namespace adept {

struct TrainConfig {
  EncoderConfig encoder;
  double lambda1 = 0.1;  // keypoint denoising weight
  double lambda2 = 0.2;  // DCT denoising weight
  double tau = 0.2;
  double momentum = 0.999;  // EMA coefficient for the key encoder
  double noise_scale = 1.0;
  std::size_t simcc_k = 2;
  std::size_t stage1_epochs = 50;
  std::size_t stage2_epochs = 30;
  std::size_t batch_size = 8;
  std::string optimizer = "sgd";  // "sgd" or "adamw"
  double lr = 0.05;
  double sgd_momentum = 0.9;
  double weight_decay = 1e-4;
  std::size_t queue_capacity = 4096;
  bool include_positive = true;
  double dct_floor_ratio = 0.01;
  std::uint64_t seed = 0;
  AugmentationSpec augment;

  void validate() const {
    encoder.validate();
    if (lambda1 < 0.0 || lambda2 < 0.0) throw ConfigError("lambda1 and lambda2 must be >= 0");
    if (!(tau > 0.0)) throw ConfigError("tau must be > 0");
    if (!(momentum >= 0.0 && momentum <= 1.0)) throw ConfigError("momentum must lie in [0, 1]");
    if (noise_scale < 0.0) throw ConfigError("noise_scale must be >= 0");
    if (simcc_k < 2) throw ConfigError("simcc_k must be an integer > 1");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (optimizer != "sgd" && optimizer != "adamw") throw ConfigError("optimizer must be sgd or adamw");
    if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
    if (sgd_momentum < 0.0 || sgd_momentum >= 1.0) throw ConfigError("sgd_momentum must lie in [0, 1)");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
    if (queue_capacity < batch_size) throw ConfigError("queue_capacity must be >= batch_size");
    if (!(dct_floor_ratio >= 0.0)) throw ConfigError("dct_floor_ratio must be >= 0");
    if (augment.crop_scale_min <= 0.0 || augment.crop_scale_max > 1.0 ||
        augment.crop_scale_min > augment.crop_scale_max) {
      throw ConfigError("crop scale range must satisfy 0 < min <= max <= 1");
    }
  }
};

inline nlohmann::json to_json(const EncoderConfig& c) {
  return {{"embed_dim", c.embed_dim}, {"depth", c.depth},   {"heads", c.heads},
          {"grid_h", c.grid_h},       {"grid_w", c.grid_w}, {"patch", c.patch},
          {"num_keypoints", c.num_keypoints}, {"proj_dim", c.proj_dim}, {"keypoint_bin_px", c.keypoint_bin_px}};
}

inline EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
  EncoderConfig c;
  c.embed_dim = j.at("embed_dim");
  c.depth = j.at("depth");
  c.heads = j.at("heads");
  c.grid_h = j.at("grid_h");
  c.grid_w = j.at("grid_w");
  c.patch = j.at("patch");
  c.num_keypoints = j.at("num_keypoints");
  c.proj_dim = j.at("proj_dim");
  c.keypoint_bin_px = j.at("keypoint_bin_px");
  return c;
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"encoder", to_json(c.encoder)},
          {"lambda1", c.lambda1},
          {"lambda2", c.lambda2},
          {"tau", c.tau},
          {"momentum", c.momentum},
          {"noise_scale", c.noise_scale},
          {"simcc_k", c.simcc_k},
          {"stage1_epochs", c.stage1_epochs},
          {"stage2_epochs", c.stage2_epochs},
          {"batch_size", c.batch_size},
          {"optimizer", c.optimizer},
          {"lr", c.lr},
          {"sgd_momentum", c.sgd_momentum},
          {"weight_decay", c.weight_decay},
          {"queue_capacity", c.queue_capacity},
          {"include_positive", c.include_positive},
          {"dct_floor_ratio", c.dct_floor_ratio},
          {"seed", c.seed},
          {"augment",
           {{"crop_scale_min", c.augment.crop_scale_min},
            {"crop_scale_max", c.augment.crop_scale_max},
            {"flip_prob", c.augment.flip_prob},
            {"brightness", c.augment.brightness},
            {"contrast", c.augment.contrast},
            {"saturation", c.augment.saturation}}}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.encoder = encoder_config_from_json(j.at("encoder"));
  c.lambda1 = j.at("lambda1");
  c.lambda2 = j.at("lambda2");
  c.tau = j.at("tau");
  c.momentum = j.at("momentum");
  c.noise_scale = j.at("noise_scale");
  c.simcc_k = j.at("simcc_k");
  c.stage1_epochs = j.at("stage1_epochs");
  c.stage2_epochs = j.at("stage2_epochs");
  c.batch_size = j.at("batch_size");
  c.optimizer = j.at("optimizer");
  c.lr = j.at("lr");
  c.sgd_momentum = j.at("sgd_momentum");
  c.weight_decay = j.at("weight_decay");
  c.queue_capacity = j.at("queue_capacity");
  c.include_positive = j.at("include_positive");
  c.dct_floor_ratio = j.at("dct_floor_ratio");
  c.seed = j.at("seed");
  const auto& a = j.at("augment");
  c.augment.crop_scale_min = a.at("crop_scale_min");
  c.augment.crop_scale_max = a.at("crop_scale_max");
  c.augment.flip_prob = a.at("flip_prob");
  c.augment.brightness = a.at("brightness");
  c.augment.contrast = a.at("contrast");
  c.augment.saturation = a.at("saturation");
  return c;
}

// ---------------------------------------------------------------------------
// Model

/// Every network of the method plus the DCT standardization statistics.
class AdeptModel {
 public:
  EncoderConfig cfg;
  std::size_t simcc_k = 2;
  SpatialEncoder image_encoder;
  ProjectionHead proj_q;
  SpatialEncoder dct_encoder;
  KeypointEncoder keypoint_encoder;
  DctDecoder dct_decoder;
  KeypointDecoder keypoint_decoder;
  SpatialEncoder image_encoder_m;
  ProjectionHead proj_k;
  DctStandardizer dct_stats;
  MomentumPair momentum;

  AdeptModel(const EncoderConfig& c, std::size_t k, double momentum_coef, std::uint64_t seed) : cfg(c), simcc_k(k) {
    c.validate();
    Rng rng(derive_seed(seed, 0x1417));
    const std::size_t in = c.patch_values();
    image_encoder = SpatialEncoder(c, in, rng);
    proj_q = ProjectionHead(c.embed_dim, c.proj_dim, rng);
    dct_encoder = SpatialEncoder(c, in, rng);
    keypoint_encoder = KeypointEncoder(c, rng);
    dct_decoder = DctDecoder(c, rng);
    keypoint_decoder = KeypointDecoder(c, k, rng);
    Rng scratch(0);
    image_encoder_m = SpatialEncoder(c, in, scratch);
    proj_k = ProjectionHead(c.embed_dim, c.proj_dim, scratch);
    momentum.coefficient = momentum_coef;
    momentum.online = key_path_online();
    momentum.momentum = key_path_momentum();
    for (auto& p : momentum.momentum) p.tensor.set_requires_grad(false);
    momentum.sync();
  }

  AdeptModel(const AdeptModel&) = delete;
  AdeptModel& operator=(const AdeptModel&) = delete;
  AdeptModel(AdeptModel&&) = default;
  AdeptModel& operator=(AdeptModel&&) = default;

  /// theta_q of the momentum pair: online image encoder and query head.
  nn::ParamList key_path_online() const {
    nn::ParamList p;
    nn::append(p, "image_encoder", image_encoder.parameters());
    nn::append(p, "proj", proj_q.parameters());
    return p;
  }
  nn::ParamList key_path_momentum() const {
    nn::ParamList p;
    nn::append(p, "image_encoder", image_encoder_m.parameters());
    nn::append(p, "proj", proj_k.parameters());
    return p;
  }

  /// Every parameter that the optimizer updates.
  nn::ParamList trainable() const {
    nn::ParamList p;
    nn::append(p, "image_encoder", image_encoder.parameters());
    nn::append(p, "proj_q", proj_q.parameters());
    nn::append(p, "dct_encoder", dct_encoder.parameters());
    nn::append(p, "keypoint_encoder", keypoint_encoder.parameters());
    nn::append(p, "dct_decoder", dct_decoder.parameters());
    nn::append(p, "keypoint_decoder", keypoint_decoder.parameters());
    return p;
  }

  Checkpoint to_checkpoint(const TrainConfig& train, const std::string& tag) const {
    Checkpoint ck;
    ck.meta = {{"config", to_json(train)}, {"tag", tag}};
    ck.add("model", trainable());
    ck.add("momentum", key_path_momentum());
    if (!dct_stats.empty()) {
      ck.add("dct_stats.mean", Tensor::from({dct_stats.mean.size()}, dct_stats.mean));
      ck.add("dct_stats.std", Tensor::from({dct_stats.stddev.size()}, dct_stats.stddev));
    }
    return ck;
  }

  void load(const Checkpoint& ck) {
    ck.load_into("model", trainable());
    ck.load_into("momentum", key_path_momentum());
    if (ck.contains("dct_stats.mean")) {
      dct_stats.mean = ck.find("dct_stats.mean").values;
      dct_stats.stddev = ck.find("dct_stats.std").values;
    }
  }

  static AdeptModel from_checkpoint(const Checkpoint& ck) {
    if (!ck.meta.contains("config")) throw IoError("checkpoint manifest has no config");
    const TrainConfig tc = train_config_from_json(ck.meta.at("config"));
    AdeptModel m(tc.encoder, tc.simcc_k, tc.momentum, tc.seed);
    m.load(ck);
    return m;
  }
};

/// Fits standardization statistics over the DCT maps of every source image.
inline DctStandardizer fit_dct_stats(const SampleSource& data, std::size_t patch, double floor_ratio) {
  std::vector<DCTMap> maps;
  maps.reserve(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) maps.push_back(build_dct_map(data.scene(i).image, patch));
  return DctStandardizer::fit(maps, floor_ratio);
}

// ---------------------------------------------------------------------------
// Training

struct EpochMetrics {
  int stage = 1;
  std::size_t epoch = 0;  // index within the stage
  std::size_t steps = 0;
  double l_ctr = 0.0;
  double l_kp = 0.0;
  double l_dct = 0.0;
  double l_de = 0.0;
  double total = 0.0;
  double grad_norm = 0.0;
  double lr = 0.0;
  std::size_t no_visible_samples = 0;
  double wall_seconds = 0.0;

  /// Deterministic fields only; wall time is reported separately.
  nlohmann::json to_json() const {
    return {{"stage", stage}, {"epoch", epoch},   {"steps", steps},         {"l_ctr", l_ctr},
            {"l_kp", l_kp},   {"l_dct", l_dct},   {"l_de", l_de},           {"total", total},
            {"grad_norm", grad_norm}, {"lr", lr}, {"no_visible_samples", no_visible_samples}};
  }
};

struct StageReport {
  std::vector<EpochMetrics> rows;
};

/// Per-step losses handed to registered extra loss terms.
struct StepContext {
  const AdeptModel& model;
  const std::vector<SpatialFeatures>& image_features;
  const std::vector<TwoViews>& views;
  int stage;
};

/// Extra objective term added to the stage-2 total (hook for additional losses).
struct LossTerm {
  std::string name;
  std::function<Tensor(const StepContext&)> fn;
};

struct StepLosses {
  Tensor total;
  double l_ctr = 0.0, l_kp = 0.0, l_dct = 0.0, l_de = 0.0;
  std::size_t no_visible = 0;
};

inline Optimizer make_optimizer(nn::ParamList params, const TrainConfig& cfg) {
  if (cfg.optimizer == "adamw") return Optimizer(AdamW(std::move(params), 0.9, 0.999, cfg.weight_decay));
  return Optimizer(SgdMomentum(std::move(params), cfg.sgd_momentum, cfg.weight_decay));
}

class Trainer {
 public:
  Trainer(AdeptModel& model, const SampleSource& data, TrainConfig cfg)
      : model_(model), data_(data), cfg_(std::move(cfg)), queue_(cfg_.queue_capacity, cfg_.encoder.proj_dim),
        optimizer_(make_optimizer(model.trainable(), cfg_)) {
    cfg_.validate();
    if (data.size() == 0) throw ContractError("Trainer: dataset is empty");
    const SceneConfig g = data.geometry();
    if (g.canvas != cfg_.encoder.view_h() || g.canvas != cfg_.encoder.view_w() || g.patch != cfg_.encoder.patch) {
      throw ConfigError("dataset canvas " + std::to_string(g.canvas) + " / patch " + std::to_string(g.patch) +
                        " does not match the encoder geometry");
    }
    if (model_.dct_stats.empty()) model_.dct_stats = fit_dct_stats(data, cfg_.encoder.patch, cfg_.dct_floor_ratio);
  }

  const TrainConfig& config() const { return cfg_; }
  FeatureQueue& queue() { return queue_; }
  std::size_t global_epoch() const { return global_epoch_; }
  std::size_t batches_per_epoch() const { return (data_.size() + cfg_.batch_size - 1) / cfg_.batch_size; }

  void register_loss(LossTerm term) { extra_losses_.push_back(std::move(term)); }

  /// Resets optimizer state and the learning-rate schedule for a new stage.
  void begin_stage(int stage, std::size_t epochs) {
    stage_ = stage;
    stage_epoch_ = 0;
    stage_step_ = 0;
    schedule_ = CosineSchedule{cfg_.lr, epochs * batches_per_epoch()};
    optimizer_.reset_state();
  }

  EpochMetrics stage1_epoch() { return run_epoch(1); }
  EpochMetrics stage2_epoch() { return run_epoch(2); }

  /// Forward pass for one batch; returns the total loss graph and its parts.
  StepLosses compute_losses(const std::vector<std::size_t>& batch, int stage, std::uint64_t step_seed,
                            NoiseTape* tape = nullptr) {
    const std::size_t b = batch.size();
    std::vector<TwoViews> views(b);
    for (std::size_t i = 0; i < b; ++i) {
      Rng aug(derive_seed(derive_seed(cfg_.seed, 0xA000 + epoch_for_aug_), batch[i]));
      views[i] = augment_two_views(data_.scene(batch[i]), cfg_.augment, aug);
    }
    std::vector<SpatialFeatures> feats(b);
    std::vector<Tensor> q(b);
    std::vector<double> keys(b * cfg_.encoder.proj_dim);
    for (std::size_t i = 0; i < b; ++i) {
      feats[i] = encode_image(model_.image_encoder, views[i].view);
      q[i] = project(feats[i], model_.proj_q);
      NoGradGuard ng;
      const Tensor k = project(encode_image(model_.image_encoder_m, views[i].view_prime), model_.proj_k);
      std::copy(k.data().begin(), k.data().end(), keys.begin() + i * cfg_.encoder.proj_dim);
    }
    const Tensor key_batch = Tensor::from({b, cfg_.encoder.proj_dim}, std::move(keys));
    pending_keys_ = key_batch;
    enqueued_early_ = false;
    if (queue_.empty()) {
      queue_.enqueue(key_batch);
      enqueued_early_ = true;
    }
    const Tensor negatives = queue_.snapshot();
    const double inv_b = 1.0 / static_cast<double>(b);

    Tensor ctr;
    for (std::size_t i = 0; i < b; ++i) {
      const Tensor k_pos = Tensor::from({1, cfg_.encoder.proj_dim},
                                        {key_batch.data().begin() + i * cfg_.encoder.proj_dim,
                                         key_batch.data().begin() + (i + 1) * cfg_.encoder.proj_dim});
      const Tensor li = info_nce(q[i], k_pos, negatives, cfg_.tau, cfg_.include_positive);
      ctr = ctr.defined() ? add(ctr, li) : li;
    }
    ctr = scale(ctr, inv_b);

    StepLosses out;
    out.l_ctr = ctr.item();
    if (stage == 1) {
      out.total = ctr;
      return out;
    }

    const NoiseSpec noise{cfg_.noise_scale, derive_seed(cfg_.seed, 0x401)};
    Tensor kp_sum, dct_sum;
    std::size_t kp_count = 0;
    for (std::size_t i = 0; i < b; ++i) {
      const DCTMap map = build_dct_map(views[i].view, cfg_.encoder.patch);
      const Tensor target = model_.dct_stats.tokens(map);
      const SpatialFeatures ft = model_.dct_encoder.forward(target);
      const KeypointFeatures fk = encode_keypoints(model_.keypoint_encoder, views[i].keypoints);
      Rng noise_rng(derive_seed(derive_seed(noise.rng_seed, step_seed), i));
      const SpatialFeatures ft_noisy{inject_noise(ft.tokens, noise, noise_rng, tape), ft.grid_h, ft.grid_w};
      const KeypointFeatures fk_noisy{inject_noise(fk.tokens, noise, noise_rng, tape)};

      const Tensor ld = loss_dct(decode_dct(model_.dct_decoder, ft_noisy, feats[i]), target);
      dct_sum = dct_sum.defined() ? add(dct_sum, ld) : ld;
      const KeypointLoss lk = loss_keypoint(decode_keypoints(model_.keypoint_decoder, fk_noisy, feats[i]),
                                            views[i].keypoints, cfg_.simcc_k, cfg_.encoder.view_w(),
                                            cfg_.encoder.view_h());
      if (lk.no_visible) {
        ++out.no_visible;
        continue;
      }
      kp_sum = kp_sum.defined() ? add(kp_sum, lk.value) : lk.value;
      ++kp_count;
    }
    const Tensor l_dct = scale(dct_sum, inv_b);
    const Tensor l_kp = kp_count > 0 ? scale(kp_sum, 1.0 / static_cast<double>(kp_count)) : Tensor::scalar(0.0);
    const Tensor l_de = loss_de(l_kp, l_dct, cfg_.lambda1, cfg_.lambda2);
    out.l_kp = l_kp.item();
    out.l_dct = l_dct.item();
    out.l_de = l_de.item();
    out.total = add(ctr, l_de);
    if (!extra_losses_.empty()) {
      const StepContext ctx{model_, feats, views, stage};
      for (const auto& term : extra_losses_) out.total = add(out.total, term.fn(ctx));
    }
    return out;
  }

 private:
  std::vector<std::size_t> epoch_order() const {
    std::vector<std::size_t> order(data_.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(cfg_.seed, 0xD000 + global_epoch_));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.uniform_int(i)]);
    return order;
  }

  EpochMetrics run_epoch(int stage) {
    if (stage != stage_) begin_stage(stage, stage == 1 ? cfg_.stage1_epochs : cfg_.stage2_epochs);
    const auto t0 = std::chrono::steady_clock::now();
    EpochMetrics m;
    m.stage = stage;
    m.epoch = stage_epoch_;
    m.lr = schedule_(stage_step_);
    epoch_for_aug_ = global_epoch_;
    const auto order = epoch_order();
    for (std::size_t start = 0; start < order.size(); start += cfg_.batch_size) {
      const std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(start),
                                           order.begin() + static_cast<std::ptrdiff_t>(
                                                               std::min(order.size(), start + cfg_.batch_size)));
      const std::uint64_t step_seed = derive_seed(global_epoch_, start);
      StepLosses losses = compute_losses(batch, stage, step_seed);
      const double total = losses.total.item();
      if (!std::isfinite(total)) {
        std::ostringstream os;
        os << "non-finite loss at stage " << stage << " epoch " << stage_epoch_ << " batch " << start / cfg_.batch_size
           << ": l_ctr=" << losses.l_ctr << " l_kp=" << losses.l_kp << " l_dct=" << losses.l_dct
           << " l_de=" << losses.l_de << " lr=" << schedule_(stage_step_);
        throw NumericError(os.str());
      }
      optimizer_.zero_grad();
      backward(losses.total);
      const double gn = optimizer_.grad_norm();
      optimizer_.step(schedule_(stage_step_));
      momentum_update(model_.momentum);
      if (!enqueued_early_) queue_.enqueue(pending_keys_);
      ++stage_step_;
      ++m.steps;
      m.l_ctr += losses.l_ctr;
      m.l_kp += losses.l_kp;
      m.l_dct += losses.l_dct;
      m.l_de += losses.l_de;
      m.total += total;
      m.grad_norm += gn;
      m.no_visible_samples += losses.no_visible;
    }
    const double inv = 1.0 / static_cast<double>(m.steps);
    m.l_ctr *= inv;
    m.l_kp *= inv;
    m.l_dct *= inv;
    m.l_de *= inv;
    m.total *= inv;
    m.grad_norm *= inv;
    m.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    ++stage_epoch_;
    ++global_epoch_;
    return m;
  }

  AdeptModel& model_;
  const SampleSource& data_;
  TrainConfig cfg_;
  FeatureQueue queue_;
  Optimizer optimizer_;
  CosineSchedule schedule_;
  std::vector<LossTerm> extra_losses_;
  Tensor pending_keys_;
  bool enqueued_early_ = false;
  int stage_ = 0;
  std::size_t stage_epoch_ = 0;
  std::size_t stage_step_ = 0;
  std::size_t global_epoch_ = 0;
  std::size_t epoch_for_aug_ = 0;
};

struct PretrainResult {
  StageReport stage1;
  StageReport stage2;
  Checkpoint stage1_checkpoint;
  Checkpoint final_checkpoint;
};

struct PretrainOptions {
  std::optional<std::filesystem::path> out_dir;  // checkpoints and metrics go here when set
  std::function<void(const EpochMetrics&)> on_epoch;
};

/// Stage 1 for cfg.stage1_epochs, then stage 2 for cfg.stage2_epochs.
inline PretrainResult pretrain(const TrainConfig& cfg, const SampleSource& data, const PretrainOptions& opts = {}) {
  cfg.validate();
  AdeptModel model(cfg.encoder, cfg.simcc_k, cfg.momentum, cfg.seed);
  Trainer trainer(model, data, cfg);
  PretrainResult res;
  std::ofstream metrics, timing;
  if (opts.out_dir) {
    std::filesystem::create_directories(*opts.out_dir);
    metrics.open(*opts.out_dir / "metrics.jsonl", std::ios::trunc);
    timing.open(*opts.out_dir / "timing.jsonl", std::ios::trunc);
    if (!metrics || !timing) throw IoError("cannot write metrics in " + opts.out_dir->string());
  }
  auto record = [&](const EpochMetrics& m, StageReport& rep) {
    rep.rows.push_back(m);
    if (metrics.is_open()) {
      metrics << m.to_json().dump() << '\n';
      timing << nlohmann::json{{"stage", m.stage}, {"epoch", m.epoch}, {"wall_seconds", m.wall_seconds}}.dump()
             << '\n';
      metrics.flush();
      timing.flush();
    }
    if (opts.on_epoch) opts.on_epoch(m);
  };
  for (std::size_t e = 0; e < cfg.stage1_epochs; ++e) record(trainer.stage1_epoch(), res.stage1);
  res.stage1_checkpoint = model.to_checkpoint(cfg, "stage1");
  if (opts.out_dir) save_checkpoint(res.stage1_checkpoint, *opts.out_dir / "stage1.ckpt");
  for (std::size_t e = 0; e < cfg.stage2_epochs; ++e) record(trainer.stage2_epoch(), res.stage2);
  res.final_checkpoint = model.to_checkpoint(cfg, "final");
  if (opts.out_dir) save_checkpoint(res.final_checkpoint, *opts.out_dir / "final.ckpt");
  return res;
}

/// Norm of d(l_de)/d(theta) over the image-encoder parameters for one stage-2
/// batch. The contrastive part is removed by differencing against the stage-1
/// gradient of the same batch, views and queue state.
inline double denoising_grad_norm_on_image_encoder(Trainer& trainer, const AdeptModel& model,
                                                   const std::vector<std::size_t>& batch, std::uint64_t step_seed) {
  const nn::ParamList params = model.image_encoder.parameters();
  auto grads = [&](int stage) {
    for (auto p : model.trainable()) p.tensor.zero_grad();
    backward(trainer.compute_losses(batch, stage, step_seed).total);
    std::vector<double> g;
    for (const auto& p : params) {
      if (p.tensor.has_grad()) {
        g.insert(g.end(), p.tensor.grad().begin(), p.tensor.grad().end());
      } else {
        g.insert(g.end(), p.tensor.numel(), 0.0);
      }
    }
    return g;
  };
  if (trainer.queue().empty()) {
    NoGradGuard ng;
    trainer.compute_losses(batch, 1, step_seed);
  }
  const auto g1 = grads(1), g2 = grads(2);
  for (auto p : model.trainable()) p.tensor.zero_grad();
  double n = 0.0;
  for (std::size_t i = 0; i < g1.size(); ++i) n += (g2[i] - g1[i]) * (g2[i] - g1[i]);
  return std::sqrt(n);
}

// ---------------------------------------------------------------------------
// Evaluation

struct DenoiseEval {
  double l_kp = 0.0;
  double l_dct = 0.0;
  double l_de = 0.0;  // with the model's configured weights
};

/// Denoising losses on untransformed scenes. With zero_image set, the decoders
/// cross-attend into all-zero image features instead of F_I.
inline DenoiseEval evaluate_denoising(const AdeptModel& model, const SampleSource& data, const TrainConfig& cfg,
                                      bool zero_image, std::uint64_t noise_seed) {
  NoGradGuard ng;
  DenoiseEval ev;
  const NoiseSpec noise{cfg.noise_scale, noise_seed};
  std::size_t kp_count = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const SyntheticScene s = data.scene(i);
    SpatialFeatures fi = encode_image(model.image_encoder, s.image);
    if (zero_image) fi.tokens = Tensor::zeros(fi.tokens.shape());
    const Tensor target = model.dct_stats.tokens(build_dct_map(s.image, cfg.encoder.patch));
    const SpatialFeatures ft = model.dct_encoder.forward(target);
    const KeypointFeatures fk = encode_keypoints(model.keypoint_encoder, s.keypoints);
    Rng rng(derive_seed(noise_seed, i));
    const SpatialFeatures ftn{inject_noise(ft.tokens, noise, rng), ft.grid_h, ft.grid_w};
    const KeypointFeatures fkn{inject_noise(fk.tokens, noise, rng)};
    ev.l_dct += loss_dct(decode_dct(model.dct_decoder, ftn, fi), target).item();
    const KeypointLoss lk = loss_keypoint(decode_keypoints(model.keypoint_decoder, fkn, fi), s.keypoints,
                                          model.simcc_k, cfg.encoder.view_w(), cfg.encoder.view_h());
    if (!lk.no_visible) {
      ev.l_kp += lk.value.item();
      ++kp_count;
    }
  }
  ev.l_dct /= static_cast<double>(data.size());
  if (kp_count > 0) ev.l_kp /= static_cast<double>(kp_count);
  ev.l_de = cfg.lambda1 * ev.l_kp + cfg.lambda2 * ev.l_dct;
  return ev;
}

// ---------------------------------------------------------------------------
// Probe: frozen image encoder + small keypoint regression head

struct ProbeConfig {
  std::size_t train_samples = 256;
  std::size_t eval_samples = 64;
  std::size_t steps = 1000;
  std::size_t batch_size = 16;
  double lr = 0.003;
  std::uint64_t data_seed = 0x9e0b;
};

/// One learned query per joint cross-attends into the frozen tokens; a
/// softmax over tokens of query-token similarity weights the token centres,
/// plus a small offset. Output [K, 2] in coordinates normalized to [0, 1].
struct ProbeHead {
  Tensor queries;  // [K, d]
  DecoderLayer layer;
  nn::LayerNorm norm;
  nn::Linear key, offset;

  ProbeHead(std::size_t d, std::size_t heads, std::size_t joints, Rng& rng)
      : queries(nn::init_normal({joints, d}, 0.5, rng)), layer(d, heads, rng), norm(d), key(d, d, rng),
        offset(d, 2, rng) {
    for (auto& v : offset.weight.data()) v *= 0.01;
  }

  Tensor operator()(const Tensor& tokens, const Tensor& centres) const {
    const Tensor h = norm(layer(queries, tokens));
    const double d = static_cast<double>(tokens.dim(1));
    const Tensor p = softmax(scale(matmul(key(h), transpose(tokens)), 1.0 / std::sqrt(d)), 1);
    return add(matmul(p, centres), offset(h));
  }

  nn::ParamList parameters() const {
    nn::ParamList p;
    p.push_back({"queries", queries});
    nn::append(p, "layer", layer.parameters());
    nn::append(p, "norm", norm.parameters());
    nn::append(p, "key", key.parameters());
    nn::append(p, "offset", offset.parameters());
    return p;
  }
};

struct ProbeSet {
  std::vector<Tensor> tokens;
  std::vector<Keypoints> keypoints;
};

inline ProbeSet probe_features(const SpatialEncoder& enc, const SampleSource& data) {
  NoGradGuard ng;
  ProbeSet s;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const SyntheticScene sc = data.scene(i);
    s.tokens.push_back(encode_image(enc, sc.image).tokens);
    s.keypoints.push_back(sc.keypoints);
  }
  return s;
}

/// Trains a fresh head on `train` and returns mean pixel error on `eval`.
inline double probe_error(const ProbeSet& train, const ProbeSet& eval, const EncoderConfig& ecfg,
                          const ProbeConfig& pc, std::uint64_t seed) {
  const std::size_t k = ecfg.num_keypoints, t = ecfg.tokens();
  const double w = static_cast<double>(ecfg.view_w()), h = static_cast<double>(ecfg.view_h());
  std::vector<double> cv(t * 2);
  for (std::size_t gy = 0; gy < ecfg.grid_h; ++gy)
    for (std::size_t gx = 0; gx < ecfg.grid_w; ++gx) {
      const std::size_t r = gy * ecfg.grid_w + gx;
      cv[r * 2] = ((static_cast<double>(gx) + 0.5) * static_cast<double>(ecfg.patch) - 0.5) / w;
      cv[r * 2 + 1] = ((static_cast<double>(gy) + 0.5) * static_cast<double>(ecfg.patch) - 0.5) / h;
    }
  const Tensor centres = Tensor::from({t, 2}, cv);

  Rng rng(derive_seed(seed, 0x9b0e));
  ProbeHead head(ecfg.embed_dim, ecfg.heads, k, rng);
  AdamW opt(head.parameters(), 0.9, 0.999, 0.0);
  const CosineSchedule sched{pc.lr, pc.steps};
  for (std::size_t step = 0; step < pc.steps; ++step) {
    Tensor loss;
    std::size_t used = 0;
    for (std::size_t b = 0; b < pc.batch_size; ++b) {
      const std::size_t i = rng.uniform_int(train.tokens.size());
      const Keypoints& kp = train.keypoints[i];
      const std::size_t vis = kp.visible_count();
      if (vis == 0) continue;
      std::vector<double> target(k * 2, 0.0), mask(k * 2, 0.0);
      for (std::size_t j = 0; j < k; ++j) {
        if (!kp.joints[j].visible) continue;
        mask[j * 2] = mask[j * 2 + 1] = 1.0;
        target[j * 2] = kp.joints[j].x / w;
        target[j * 2 + 1] = kp.joints[j].y / h;
      }
      const Tensor pred = mul(head(train.tokens[i], centres), Tensor::from({k, 2}, mask));
      const Tensor li = scale(l1_loss(pred, Tensor::from({k, 2}, target)), static_cast<double>(k) / static_cast<double>(vis));
      loss = loss.defined() ? add(loss, li) : li;
      ++used;
    }
    if (used == 0) continue;
    loss = scale(loss, 1.0 / static_cast<double>(used));
    opt.zero_grad();
    backward(loss);
    opt.step(sched(step));
  }

  NoGradGuard ng;
  double err = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < eval.tokens.size(); ++i) {
    const Tensor p = head(eval.tokens[i], centres);
    for (std::size_t j = 0; j < k; ++j) {
      const auto& g = eval.keypoints[i].joints[j];
      if (!g.visible) continue;
      err += std::hypot(p[j * 2] * w - g.x, p[j * 2 + 1] * h - g.y);
      ++count;
    }
  }
  if (count == 0) throw ContractError("probe: evaluation set has no visible joints");
  return err / static_cast<double>(count);
}

inline SyntheticDataset probe_dataset(const ProbeConfig& pc, const SceneConfig& scene, bool eval, std::uint64_t seed) {
  SyntheticDatasetConfig dc;
  dc.num_samples = eval ? pc.eval_samples : pc.train_samples;
  dc.scene = scene;
  dc.seed = derive_seed(derive_seed(pc.data_seed, seed), eval ? 2 : 1);
  return SyntheticDataset(dc);
}

/// Probe error of one frozen encoder for one seed.
inline double probe_encoder(const SpatialEncoder& enc, const ProbeConfig& pc, std::uint64_t seed) {
  const SceneConfig scene{enc.cfg.view_w(), enc.cfg.patch};
  const auto train = probe_dataset(pc, scene, false, seed);
  const auto eval = probe_dataset(pc, scene, true, seed);
  return probe_error(probe_features(enc, train), probe_features(enc, eval), enc.cfg, pc, seed);
}

struct ProbeSeedResult {
  std::uint64_t seed = 0;
  double pretrained_error_px = 0.0;
  double random_baseline_error_px = 0.0;
};

struct ProbeReport {
  std::vector<ProbeSeedResult> per_seed;
  double pretrained_error_px = 0.0;
  double random_baseline_error_px = 0.0;
  double win_rate = 0.0;  // share of seeds where the pretrained encoder is strictly better

  nlohmann::json to_json() const {
    nlohmann::json seeds = nlohmann::json::array(), rows = nlohmann::json::array();
    for (const auto& r : per_seed) {
      seeds.push_back(r.seed);
      rows.push_back({{"seed", r.seed},
                      {"pretrained_error_px", r.pretrained_error_px},
                      {"random_baseline_error_px", r.random_baseline_error_px}});
    }
    return {{"pretrained_error_px", pretrained_error_px},
            {"random_baseline_error_px", random_baseline_error_px},
            {"seeds", seeds},
            {"win_rate", win_rate},
            {"per_seed", rows}};
  }
};

/// Compares `pretrained` with, per seed, a freshly initialized encoder of the
/// same geometry (random_init(seed)).
inline ProbeReport probe(const SpatialEncoder& pretrained,
                         const std::function<SpatialEncoder(std::uint64_t)>& random_init,
                         const std::vector<std::uint64_t>& seeds, const ProbeConfig& pc) {
  if (seeds.empty()) throw ConfigError("probe: no seeds");
  ProbeReport rep;
  std::size_t wins = 0;
  for (std::uint64_t s : seeds) {
    ProbeSeedResult r;
    r.seed = s;
    r.pretrained_error_px = probe_encoder(pretrained, pc, s);
    r.random_baseline_error_px = probe_encoder(random_init(s), pc, s);
    if (!std::isfinite(r.pretrained_error_px) || !std::isfinite(r.random_baseline_error_px)) {
      throw NumericError("probe: non-finite error for seed " + std::to_string(s));
    }
    wins += r.pretrained_error_px < r.random_baseline_error_px ? 1 : 0;
    rep.pretrained_error_px += r.pretrained_error_px;
    rep.random_baseline_error_px += r.random_baseline_error_px;
    rep.per_seed.push_back(r);
  }
  const double n = static_cast<double>(seeds.size());
  rep.pretrained_error_px /= n;
  rep.random_baseline_error_px /= n;
  rep.win_rate = static_cast<double>(wins) / n;
  return rep;
}

/// Randomly initialized image encoder for the given geometry and seed.
inline SpatialEncoder random_image_encoder(const EncoderConfig& cfg, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x4a4d));
  return SpatialEncoder(cfg, cfg.patch_values(), rng);
}

/// Null-hypothesis control: per seed, a random encoder stands in for the
/// pretrained one and is compared with an independently drawn random encoder.
inline ProbeReport probe_random_control(const EncoderConfig& cfg, const std::vector<std::uint64_t>& seeds,
                                        const ProbeConfig& pc) {
  if (seeds.empty()) throw ConfigError("probe: no seeds");
  ProbeReport rep;
  std::size_t wins = 0;
  for (std::uint64_t s : seeds) {
    const SpatialEncoder candidate = random_image_encoder(cfg, derive_seed(s, 0xc0));
    const ProbeSeedResult r =
        probe(candidate, [&](std::uint64_t t) { return random_image_encoder(cfg, t); }, {s}, pc).per_seed.front();
    wins += r.pretrained_error_px < r.random_baseline_error_px ? 1 : 0;
    rep.pretrained_error_px += r.pretrained_error_px;
    rep.random_baseline_error_px += r.random_baseline_error_px;
    rep.per_seed.push_back(r);
  }
  const double n = static_cast<double>(seeds.size());
  rep.pretrained_error_px /= n;
  rep.random_baseline_error_px /= n;
  rep.win_rate = static_cast<double>(wins) / n;
  return rep;
}

}  // namespace adept
