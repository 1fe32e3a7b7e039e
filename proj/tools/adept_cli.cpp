// adept: DCT map extraction, pretraining, gradient checks and probing.
//
// Exit codes: 0 success, 1 validation error, 2 runtime or numeric failure.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "adept/checkpoint.hpp"
#include "adept/config.hpp"
#include "adept/dct.hpp"
#include "adept/gradcheck.hpp"
#include "adept/image_io.hpp"
#include "adept/pipeline.hpp"

namespace fs = std::filesystem;
using namespace adept;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool strict = false;
  bool force = false;
  std::optional<double> noise_scale;
  std::optional<std::size_t> patch_size;
  std::optional<std::size_t> stage1_epochs;
  std::optional<std::size_t> stage2_epochs;
};

// Validation failures (bad config, bad geometry, bad input files) exit 1;
// everything else that goes wrong at run time exits 2.
int classify(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const GeometryError*>(&e) ||
      dynamic_cast<const ParameterError*>(&e) || dynamic_cast<const CLI::Error*>(&e)) {
    return kExitValidation;
  }
  return kExitRuntime;
}

RunConfig resolve_config(const CommonOptions& o) {
  RunConfig cfg = o.config.empty() ? RunConfig{} : load_run_config(o.config);
  if (o.seed) {
    cfg.train.seed = *o.seed;
    cfg.data.seed = *o.seed;
  }
  if (o.noise_scale) cfg.train.noise_scale = *o.noise_scale;
  if (o.patch_size) cfg.train.encoder.patch = *o.patch_size;
  if (o.stage1_epochs) cfg.train.stage1_epochs = *o.stage1_epochs;
  if (o.stage2_epochs) cfg.train.stage2_epochs = *o.stage2_epochs;
  cfg.resolve();
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

void add_common(CLI::App* cmd, CommonOptions& o, bool training_flags) {
  cmd->add_option("--config", o.config, "INI config file")->check(CLI::ExistingFile);
  cmd->add_option("--seed", o.seed, "Override train.seed and data.seed");
  cmd->add_option("--out", o.out, "Output directory");
  cmd->add_flag("--strict", o.strict, "Single-threaded kernels (results match any thread count)");
  cmd->add_flag("--force", o.force, "Overwrite existing outputs");
  cmd->add_option("--patch-size", o.patch_size, "Override encoder.patch");
  if (training_flags) {
    cmd->add_option("--noise-scale", o.noise_scale, "Override train.noise_scale");
    cmd->add_option("--stage1-epochs", o.stage1_epochs, "Override train.stage1_epochs");
    cmd->add_option("--stage2-epochs", o.stage2_epochs, "Override train.stage2_epochs");
  }
}

// ---------------------------------------------------------------------------

int cmd_dctmap(const std::vector<std::string>& inputs, const CommonOptions& o) {
  const std::size_t patch = o.patch_size.value_or(8);
  const fs::path out_dir = o.out.empty() ? fs::path(".") : fs::path(o.out);
  fs::create_directories(out_dir);
  int status = kExitOk;
  double energy_sum = 0.0;
  std::size_t done = 0, skipped = 0;
  for (const auto& in : inputs) {
    const fs::path src(in);
    const fs::path blob = out_dir / (src.stem().string() + ".dct.bin");
    const fs::path header = out_dir / (src.stem().string() + ".dct.txt");
    if (!o.force && fs::exists(blob) && fs::exists(header)) {
      ++skipped;
      continue;
    }
    try {
      const ImageRGB img = load_image_file(src);
      const DCTMap map = build_dct_map(img, patch);
      std::ofstream b(blob, std::ios::binary | std::ios::trunc);
      if (!b) throw IoError("cannot write " + blob.string());
      for (double v : map.coeffs) {
        const auto bits = std::bit_cast<std::uint64_t>(v);
        for (int i = 0; i < 8; ++i) b.put(static_cast<char>((bits >> (8 * i)) & 0xff));
      }
      const double e = energy_compaction_stat(map, 0.25);
      std::ostringstream h;
      h << "format float64-le\n"
        << "layout channel,grid_y,grid_x\n"
        << "channel c*P*P+u*P+v; c in Y,Cb,Cr\n"
        << "patch " << map.patch << "\n"
        << "grid_h " << map.grid_h << "\n"
        << "grid_w " << map.grid_w << "\n"
        << "channels " << map.channels() << "\n"
        << "source " << src.filename().string() << "\n"
        << "energy_at_0.25 " << e << "\n";
      write_text(header, h.str());
      energy_sum += e;
      ++done;
    } catch (const std::exception& e) {
      std::cerr << "error: " << in << ": " << e.what() << '\n';
      status = std::max(status, classify(e));
    }
  }
  std::printf("dctmap: %zu written, %zu skipped, %zu failed, mean energy@0.25 %.6f\n", done, skipped,
              inputs.size() - done - skipped, done ? energy_sum / static_cast<double>(done) : 0.0);
  return status;
}

int cmd_pretrain(const CommonOptions& o) {
  const RunConfig cfg = resolve_config(o);
  const fs::path out_dir = o.out.empty() ? fs::path("run") : fs::path(o.out);
  if (!o.force && fs::exists(out_dir / "final.ckpt")) {
    std::printf("pretrain: %s already has final.ckpt; pass --force to retrain\n", out_dir.string().c_str());
    return kExitOk;
  }
  fs::create_directories(out_dir);
  write_text(out_dir / "config.resolved.ini", to_ini(cfg));
  const SyntheticDataset data(cfg.dataset());
  PretrainOptions opts;
  opts.out_dir = out_dir;
  opts.on_epoch = [](const EpochMetrics& m) {
    std::printf("stage %d epoch %3zu  l_ctr %.4f  l_kp %.4f  l_dct %.4f  l_de %.4f  lr %.5f  %.1fs\n", m.stage,
                m.epoch, m.l_ctr, m.l_kp, m.l_dct, m.l_de, m.lr, m.wall_seconds);
    std::fflush(stdout);
  };
  pretrain(cfg.train, data, opts);
  std::printf("pretrain: wrote %s\n", (out_dir / "final.ckpt").string().c_str());
  return kExitOk;
}

int cmd_gradcheck(const std::string& filter, std::uint64_t seed, bool inject_fault) {
  const auto report = gradcheck::run_all(seed, filter, 20, inject_fault);
  bool ok = true;
  for (const auto& r : report) {
    std::printf("%-18s instances %2zu  worst %.3e  %s\n", r.op.c_str(), r.instances, r.worst,
                r.passed() ? "ok" : "FAIL");
    ok = ok && r.passed();
  }
  if (report.empty()) {
    std::fprintf(stderr, "gradcheck: no suite matches '%s'\n", filter.c_str());
    return kExitValidation;
  }
  if (!ok) {
    std::fprintf(stderr, "gradcheck: failing ops:");
    for (const auto& r : report)
      if (!r.passed()) std::fprintf(stderr, " %s", r.op.c_str());
    std::fprintf(stderr, "\n");
    return kExitRuntime;
  }
  return kExitOk;
}

int cmd_probe(const std::string& checkpoint, const std::string& control, const CommonOptions& o) {
  const RunConfig cfg = resolve_config(o);
  std::vector<std::uint64_t> seeds(cfg.probe.seeds);
  for (std::size_t i = 0; i < seeds.size(); ++i) seeds[i] = cfg.train.seed + i;
  ProbeReport rep;
  if (control == "random-vs-random") {
    // Null hypothesis: two independently initialized encoders per seed.
    rep = probe_random_control(cfg.train.encoder, seeds, cfg.probe.probe);
  } else if (!control.empty()) {
    throw ConfigError("unknown --control '" + control + "' (expected random-vs-random)");
  } else {
    if (checkpoint.empty()) throw ConfigError("probe: --checkpoint is required");
    const AdeptModel model = AdeptModel::from_checkpoint(load_checkpoint(checkpoint));
    if (o.patch_size && *o.patch_size != model.cfg.patch) {
      throw ConfigError("probe: --patch-size " + std::to_string(*o.patch_size) + " does not match checkpoint patch " +
                        std::to_string(model.cfg.patch));
    }
    rep = probe(model.image_encoder, [&](std::uint64_t s) { return random_image_encoder(model.cfg, s); }, seeds,
                cfg.probe.probe);
  }
  const std::string text = rep.to_json().dump(2);
  if (!o.out.empty()) {
    const fs::path path(o.out);
    if (!o.force && fs::exists(path)) {
      std::printf("probe: %s exists; pass --force to overwrite\n", path.string().c_str());
      return kExitOk;
    }
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    write_text(path, text + "\n");
  }
  std::cout << text << '\n';
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"adept: DCT maps, denoising pretraining, gradient checks and probes"};
  app.require_subcommand(1);

  CommonOptions common;

  auto* dctmap = app.add_subcommand("dctmap", "Write DCT coefficient maps for PNG/PPM images");
  std::vector<std::string> inputs;
  dctmap->add_option("inputs", inputs, "Input images")->required();
  add_common(dctmap, common, false);

  auto* pre = app.add_subcommand("pretrain", "Run stage 1 and stage 2 pretraining");
  add_common(pre, common, true);

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  std::string filter;
  std::uint64_t grad_seed = 0;
  bool inject_fault = false;
  grad->add_option("--filter", filter, "Only suites whose name contains this text");
  grad->add_option("--seed", grad_seed, "Instance seed");
  grad->add_flag("--inject-fault", inject_fault, "Include a deliberately wrong backward rule");

  auto* prb = app.add_subcommand("probe", "Frozen-encoder keypoint probe against random encoders");
  std::string checkpoint, control;
  prb->add_option("--checkpoint", checkpoint, "Pretrained checkpoint");
  prb->add_option("--control", control, "random-vs-random: compare two random encoders instead");
  add_common(prb, common, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitValidation;
  }

  if (common.strict) set_kernel_threads(1);
  try {
    if (*dctmap) return cmd_dctmap(inputs, common);
    if (*pre) return cmd_pretrain(common);
    if (*grad) return cmd_gradcheck(filter, grad_seed, inject_fault);
    if (*prb) return cmd_probe(checkpoint, control, common);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return classify(e);
  }
  return kExitOk;
}
