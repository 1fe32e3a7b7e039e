#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "adept/checkpoint.hpp"
#include "adept/pipeline.hpp"

using namespace adept;
namespace fs = std::filesystem;

namespace {

TrainConfig small_config(std::uint64_t seed) {
  TrainConfig c;
  c.encoder.embed_dim = 16;
  c.encoder.depth = 1;
  c.encoder.heads = 2;
  c.encoder.grid_h = c.encoder.grid_w = 4;
  c.encoder.patch = 8;
  c.encoder.proj_dim = 8;
  c.batch_size = 4;
  c.queue_capacity = 8;
  c.stage1_epochs = 2;
  c.stage2_epochs = 2;
  c.optimizer = "adamw";
  c.lr = 0.003;
  c.seed = seed;
  return c;
}

SyntheticDataset small_data(std::size_t n, std::size_t canvas = 32, std::uint64_t seed = 0) {
  SyntheticDatasetConfig dc;
  dc.num_samples = n;
  dc.scene = {canvas, 8};
  dc.seed = seed;
  return SyntheticDataset(dc);
}

std::vector<double> flat(const nn::ParamList& params) {
  std::vector<double> v;
  for (const auto& p : params) v.insert(v.end(), p.tensor.data().begin(), p.tensor.data().end());
  return v;
}

std::vector<std::string> metric_rows(const PretrainResult& r) {
  std::vector<std::string> rows;
  for (const auto& m : r.stage1.rows) rows.push_back(m.to_json().dump());
  for (const auto& m : r.stage2.rows) rows.push_back(m.to_json().dump());
  return rows;
}

}  // namespace

TEST(Pipeline, SameSeedGivesBitwiseIdenticalRuns) {
  const auto data = small_data(8);
  const auto a = pretrain(small_config(3), data), b = pretrain(small_config(3), data);
  EXPECT_EQ(serialize_checkpoint(a.final_checkpoint), serialize_checkpoint(b.final_checkpoint));
  EXPECT_EQ(serialize_checkpoint(a.stage1_checkpoint), serialize_checkpoint(b.stage1_checkpoint));
  EXPECT_EQ(metric_rows(a), metric_rows(b));
  const auto c = pretrain(small_config(4), data);
  EXPECT_NE(serialize_checkpoint(a.final_checkpoint), serialize_checkpoint(c.final_checkpoint));
}

TEST(Pipeline, ResultsDoNotDependOnKernelThreads) {
  const auto data = small_data(8);
  set_kernel_threads(1);
  const auto one = pretrain(small_config(5), data);
  set_kernel_threads(3);
  const auto three = pretrain(small_config(5), data);
  set_kernel_threads(0);
  EXPECT_EQ(serialize_checkpoint(one.final_checkpoint), serialize_checkpoint(three.final_checkpoint));
}

TEST(Pipeline, CheckpointRoundTripIsBitExact) {
  const auto data = small_data(8);
  const auto cfg = small_config(6);
  const auto res = pretrain(cfg, data);
  const fs::path path = fs::temp_directory_path() / "adept_test_pipeline.ckpt";
  save_checkpoint(res.final_checkpoint, path);
  const Checkpoint back = load_checkpoint(path);
  EXPECT_EQ(serialize_checkpoint(back), serialize_checkpoint(res.final_checkpoint));

  AdeptModel model = AdeptModel::from_checkpoint(back);
  EXPECT_EQ(serialize_checkpoint(model.to_checkpoint(cfg, "final")), serialize_checkpoint(res.final_checkpoint));
  const auto scene = data.scene(0);
  const Tensor f1 = encode_image(model.image_encoder, scene.image).tokens;
  const Tensor f2 = encode_image(AdeptModel::from_checkpoint(res.final_checkpoint).image_encoder, scene.image).tokens;
  for (std::size_t i = 0; i < f1.numel(); ++i) ASSERT_EQ(f1[i], f2[i]);

  std::string bytes = serialize_checkpoint(back);
  EXPECT_THROW(parse_checkpoint("NOTACKPT" + bytes.substr(8)), IoError);
  EXPECT_THROW(parse_checkpoint(bytes.substr(0, bytes.size() - 5)), IoError);
}

TEST(Pipeline, Stage2WithoutNoiseOrDenoisingReproducesStage1) {
  const auto data = small_data(8);
  TrainConfig s1 = small_config(7);
  s1.stage1_epochs = 3;
  s1.stage2_epochs = 0;
  TrainConfig s2 = s1;
  s2.stage1_epochs = 0;
  s2.stage2_epochs = 3;
  s2.noise_scale = 0.0;
  s2.lambda1 = s2.lambda2 = 0.0;
  const auto a = pretrain(s1, data), b = pretrain(s2, data);
  AdeptModel ma = AdeptModel::from_checkpoint(a.final_checkpoint);
  AdeptModel mb = AdeptModel::from_checkpoint(b.final_checkpoint);
  EXPECT_EQ(flat(ma.key_path_online()), flat(mb.key_path_online()));
  EXPECT_EQ(flat(ma.key_path_momentum()), flat(mb.key_path_momentum()));
  ASSERT_EQ(a.stage1.rows.size(), b.stage2.rows.size());
  for (std::size_t e = 0; e < a.stage1.rows.size(); ++e) EXPECT_EQ(a.stage1.rows[e].l_ctr, b.stage2.rows[e].l_ctr);
}

TEST(Pipeline, TotalLossIsContrastivePlusWeightedDenoising) {
  const auto data = small_data(8);
  const auto cfg = small_config(8);
  AdeptModel model(cfg.encoder, cfg.simcc_k, cfg.momentum, cfg.seed);
  Trainer trainer(model, data, cfg);
  for (std::uint64_t step = 0; step < 3; ++step) {
    const StepLosses l = trainer.compute_losses({0, 1, 2, 3}, 2, step);
    EXPECT_EQ(l.l_de, cfg.lambda1 * l.l_kp + cfg.lambda2 * l.l_dct);
    EXPECT_EQ(l.total.item(), l.l_ctr + l.l_de);
  }
}

TEST(Pipeline, DenoisingLossReachesImageEncoderAndDecoders) {
  const auto data = small_data(8);
  const auto cfg = small_config(9);
  AdeptModel model(cfg.encoder, cfg.simcc_k, cfg.momentum, cfg.seed);
  Trainer trainer(model, data, cfg);
  EXPECT_GT(denoising_grad_norm_on_image_encoder(trainer, model, {0, 1, 2, 3}, 1), 1e-8);
  backward(trainer.compute_losses({0, 1, 2, 3}, 2, 1).total);
  double g = 0.0;
  for (const auto& p : model.keypoint_decoder.parameters())
    if (p.tensor.has_grad())
      for (double v : p.tensor.grad()) g += v * v;
  EXPECT_GT(g, 0.0);
}

TEST(Pipeline, ColdStartStage2AndArtifacts) {
  const auto data = small_data(8);
  TrainConfig cfg = small_config(10);
  cfg.stage1_epochs = 0;
  const fs::path dir = fs::temp_directory_path() / "adept_test_pipeline_run";
  fs::remove_all(dir);
  PretrainOptions opts;
  opts.out_dir = dir;
  const auto res = pretrain(cfg, data, opts);
  EXPECT_TRUE(res.stage1.rows.empty());
  EXPECT_EQ(res.stage2.rows.size(), 2u);
  EXPECT_TRUE(fs::exists(dir / "stage1.ckpt"));
  EXPECT_TRUE(fs::exists(dir / "final.ckpt"));
  std::ifstream in(dir / "metrics.jsonl");
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j.at("stage"), 2);
    EXPECT_FALSE(j.contains("wall_seconds"));
    ++n;
  }
  EXPECT_EQ(n, 2u);
}

TEST(Pipeline, OverfitsFixedBatch) {
  // 500 steps on one fixed 16-sample batch without augmentation or noise.
  const auto data = small_data(16);
  TrainConfig cfg = small_config(11);
  cfg.encoder.embed_dim = 32;
  cfg.encoder.heads = 4;
  cfg.batch_size = 16;
  cfg.queue_capacity = 16;
  cfg.augment = AugmentationSpec::identity();
  cfg.noise_scale = 0.0;
  cfg.lr = 0.01;
  cfg.stage1_epochs = 0;
  cfg.stage2_epochs = 500;
  const auto res = pretrain(cfg, data);
  const auto& first = res.stage2.rows.front();
  const auto& last = res.stage2.rows.back();
  EXPECT_LT(last.l_dct, 0.5 * first.l_dct);
  EXPECT_LT(last.l_kp, 0.5 * first.l_kp);
}

TEST(Pipeline, SmokeRunWithDefaultModelFinishesQuickly) {
  TrainConfig cfg;
  cfg.stage1_epochs = cfg.stage2_epochs = 5;
  SyntheticDatasetConfig dc;
  dc.num_samples = 16;
  const SyntheticDataset data(dc);
  const auto t0 = std::chrono::steady_clock::now();
  const auto res = pretrain(cfg, data);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_LT(secs, 300.0);
  for (const auto& m : res.stage2.rows) {
    EXPECT_TRUE(std::isfinite(m.l_ctr));
    EXPECT_TRUE(std::isfinite(m.l_de));
  }
}

TEST(Pipeline, EvaluateDenoisingDependsOnImageFeatures) {
  const auto data = small_data(4);
  const auto cfg = small_config(12);
  AdeptModel model(cfg.encoder, cfg.simcc_k, cfg.momentum, cfg.seed);
  model.dct_stats = fit_dct_stats(data, 8, cfg.dct_floor_ratio);
  const auto a = evaluate_denoising(model, data, cfg, false, 1);
  const auto b = evaluate_denoising(model, data, cfg, true, 1);
  EXPECT_NE(a.l_dct, b.l_dct);
  EXPECT_EQ(a.l_de, cfg.lambda1 * a.l_kp + cfg.lambda2 * a.l_dct);
  EXPECT_EQ(evaluate_denoising(model, data, cfg, false, 1).l_de, a.l_de);
}

TEST(Probe, FiniteAndDeterministicPerSeed) {
  EncoderConfig ec = small_config(0).encoder;
  ProbeConfig pc;
  pc.train_samples = 16;
  pc.eval_samples = 8;
  pc.steps = 20;
  const SpatialEncoder enc = random_image_encoder(ec, 1);
  const double a = probe_encoder(enc, pc, 4), b = probe_encoder(enc, pc, 4);
  EXPECT_TRUE(std::isfinite(a));
  EXPECT_EQ(a, b);
  const ProbeReport rep = probe(enc, [&](std::uint64_t s) { return random_image_encoder(ec, s); }, {1, 2}, pc);
  EXPECT_EQ(rep.per_seed.size(), 2u);
  EXPECT_GE(rep.win_rate, 0.0);
  EXPECT_LE(rep.win_rate, 1.0);
  const auto j = rep.to_json();
  EXPECT_TRUE(j.contains("pretrained_error_px"));
  EXPECT_TRUE(j.contains("random_baseline_error_px"));
  EXPECT_EQ(j.at("seeds").size(), 2u);
  EXPECT_THROW(probe(enc, [&](std::uint64_t s) { return random_image_encoder(ec, s); }, {}, pc), ConfigError);
}
