#include "fils/action_area.hpp"
#include "fils/checkpoint.hpp"
#include "fils/eval.hpp"
#include "fils/selftest.hpp"
#include "fils/synthgen.hpp"
#include "fils/train.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>
#include <omp.h>
#include <spdlog/spdlog.h>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <stdexcept>
#include <string>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kUsageError = 1;
constexpr int kRuntimeError = 2;

// Bad input from the command line or a config file.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::is_regular_file(p)) throw UsageError(what + " not found: " + p.string());
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw UsageError("cannot open " + p.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw UsageError("cannot parse " + p.string() + ": " + e.what());
  }
}

void write_json(const fs::path& p, const json& j) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << j.dump(2) << '\n';
}

// Accepts a clip file path, or an id of the form <split>/<name> resolved
// against the dataset directory ("val/clip_00003" or "val/clip_00003.bin").
fs::path resolve_clip(const std::string& clip, const fs::path& data_dir) {
  if (fs::is_regular_file(clip)) return clip;
  if (data_dir.empty()) throw UsageError("clip '" + clip + "' is not a file and no dataset directory is known");
  fs::path p = data_dir / clip;
  if (!p.has_extension()) p += ".bin";
  if (!fs::is_regular_file(p)) throw UsageError("clip not found: " + clip + " (looked for " + p.string() + ")");
  return p;
}

struct Globals {
  std::optional<std::uint64_t> seed;
  int threads = 0;
  bool quiet = false;
};

int generate_data(const fs::path& config, const fs::path& out, bool force, const Globals& g) {
  require_file(config, "config file");
  fils::synth::DatasetConfig cfg;
  try {
    cfg = fils::synth::DatasetConfig::from_json(read_json(config));
  } catch (const std::invalid_argument& e) {
    throw UsageError(config.string() + ": " + e.what());
  } catch (const json::exception& e) {
    throw UsageError(config.string() + ": " + e.what());
  }
  if (g.seed) cfg.seed = *g.seed;
  const auto manifests = fils::synth::generate_dataset(cfg, out, force);
  fmt::print("{:<6} {:>6}  {}\n", "split", "clips", "config hash");
  for (const auto& m : manifests) fmt::print("{:<6} {:>6}  {}\n", fils::synth::name(m.split), m.clip_count, m.config_hash);
  return 0;
}

int pretrain(const fs::path& config, bool resume, int stop_after, const Globals& g) {
  require_file(config, "config file");
  fils::TrainConfig cfg;
  try {
    cfg = fils::TrainConfig::from_json(read_json(config));
    if (g.seed) cfg.seed = *g.seed;
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(config.string() + ": " + e.what());
  } catch (const json::exception& e) {
    throw UsageError(config.string() + ": " + e.what());
  }
  const fs::path final_ckpt = fils::pretrain(cfg, {resume, stop_after});
  fmt::print("checkpoint: {}\n", final_ckpt.string());
  return 0;
}

int probe(const fs::path& ckpt, const fs::path& data, const std::string& mode, bool random_init,
          fs::path report, int epochs, const Globals& g) {
  require_file(ckpt, "checkpoint");
  if (!fs::is_directory(data / "train") || !fs::is_directory(data / "val"))
    throw UsageError("dataset directory needs train/ and val/ splits: " + data.string());
  fils::ProbeConfig cfg;
  try {
    cfg.mode = fils::probe_mode_from_name(mode);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  if (g.seed) cfg.seed = *g.seed;
  if (epochs > 0) cfg.epochs = epochs;
  const fils::ProbeResult r = fils::probe_checkpoint(ckpt, data, cfg, random_init);
  fmt::print("{:<8} {:>8} {:>7}\n", "class", "accuracy", "clips");
  for (const auto& [label, acc] : r.per_class)
    fmt::print("{:<8} {:>8.4f} {:>7}\n", label, acc, r.per_class_count.at(label));
  fmt::print("{} top-1: {:.4f}\n", fils::name(r.mode), r.top1);
  if (report.empty())
    report = ckpt.parent_path() / fmt::format("probe_{}{}.json", mode, random_init ? "_random_init" : "");
  write_json(report, r.to_json());
  fmt::print("report: {}\n", report.string());
  return 0;
}

int heatmap(const fs::path& ckpt_file, const std::string& clip_id, const std::string& text, const fs::path& out,
            fs::path data, double blur) {
  require_file(ckpt_file, "checkpoint");
  const fils::Checkpoint ckpt = fils::load_checkpoint(ckpt_file);
  const fils::TrainConfig run = fils::TrainConfig::from_json(ckpt.config);
  if (data.empty()) data = run.data_dir;
  const fs::path clip_file = resolve_clip(clip_id, data);
  const fils::FilsModel model(fils::model_config_of(ckpt.config));
  const fils::VideoClip clip = fils::synth::read_clip(clip_file);
  fils::Heatmap map = fils::similarity_heatmap(model, ckpt.params, clip, text, run.patch, blur);
  map.clip_id = clip_id;
  fils::write_heatmap_png(out, map, clip);
  fs::path side = out;
  side.replace_extension(".json");
  write_json(side, {{"clip", clip_id},
                    {"text", text},
                    {"grid", {map.grid_h, map.grid_w}},
                    {"blur_sigma", blur},
                    {"values", map.values},
                    {"raw", map.raw}});
  fmt::print("heatmap: {} ({}x{}), values: {}\n", out.string(), map.grid_h, map.grid_w, side.string());
  return 0;
}

int actarea(const std::string& clip_id, const fs::path& data, const fs::path& out, int patch,
            const fils::ActionAreaParams& params) {
  const fs::path clip_file = resolve_clip(clip_id, data);
  const fils::VideoClip clip = fils::synth::read_clip(clip_file);
  if (patch <= 0 || clip.height % patch != 0 || clip.width % patch != 0)
    throw UsageError(fmt::format("patch size {} does not divide the {}x{} frame", patch, clip.height, clip.width));
  const fils::ActionArea area = fils::action_area_of(clip, clip.height / patch, clip.width / patch, params);
  fils::write_action_area_png(out, area, clip);
  fs::path side = out;
  side.replace_extension(".json");
  json j = fils::action_area_json(area);
  j["clip"] = clip_id;
  j["params"] = {{"threshold", params.threshold}, {"block", params.flow.block}, {"radius", params.flow.radius}};
  write_json(side, j);
  fmt::print("action area: {} of {} patches{}; {} and {}\n", area.count(), area.grid_h * area.grid_w,
             area.fallback ? " (fallback)" : "", out.string(), side.string());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Masked feature prediction with action-area video-text alignment, on synthetic video."};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--seed", g.seed, "Override the seed of any config");
  app.add_option("--threads", g.threads, "OpenMP threads (0 keeps the runtime default)")->check(CLI::NonNegativeNumber);
  app.add_flag("-q,--quiet", g.quiet, "Only log warnings and errors");

  std::function<int()> run;

  auto* gen = app.add_subcommand("generate-data", "Render a synthetic dataset");
  fs::path gen_config, gen_out;
  bool gen_force = false;
  gen->add_option("--config", gen_config, "Dataset config (JSON)")->required();
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_flag("--force", gen_force, "Overwrite an existing dataset");
  gen->callback([&] { run = [&] { return generate_data(gen_config, gen_out, gen_force, g); }; });

  auto* pre = app.add_subcommand("pretrain", "Pretrain an encoder");
  fs::path pre_config;
  bool pre_resume = false;
  int pre_stop = 0;
  pre->add_option("--config", pre_config, "Run config (JSON)")->required();
  pre->add_flag("--resume", pre_resume, "Continue from the latest checkpoint in out_dir");
  pre->add_option("--stop-after-epochs", pre_stop, "End the run after this many epochs (0: run to completion)")
      ->check(CLI::NonNegativeNumber);
  pre->callback([&] { run = [&] { return pretrain(pre_config, pre_resume, pre_stop, g); }; });

  auto* prb = app.add_subcommand("probe", "Action-recognition probe of a checkpoint");
  fs::path prb_ckpt, prb_data, prb_report;
  std::string prb_mode;
  bool prb_random = false;
  int prb_epochs = 0;
  prb->add_option("--ckpt", prb_ckpt, "Checkpoint file")->required();
  prb->add_option("--data", prb_data, "Dataset directory with train/ and val/")->required();
  prb->add_option("--mode", prb_mode, "linear-probe or finetune")->required();
  prb->add_flag("--random-init", prb_random, "Probe a freshly initialised encoder of the same config");
  prb->add_option("--report", prb_report, "Report file (default: next to the checkpoint)");
  prb->add_option("--epochs", prb_epochs, "Probe epochs (default 20)")->check(CLI::PositiveNumber);
  prb->callback([&] {
    run = [&] { return probe(prb_ckpt, prb_data, prb_mode, prb_random, prb_report, prb_epochs, g); };
  });

  auto* hm = app.add_subcommand("heatmap", "Text-video similarity heatmap");
  fs::path hm_ckpt, hm_out, hm_data;
  std::string hm_clip, hm_text;
  double hm_blur = 0.0;
  hm->add_option("--ckpt", hm_ckpt, "Checkpoint file")->required();
  hm->add_option("--clip", hm_clip, "Clip file or <split>/<name> id")->required();
  hm->add_option("--text", hm_text, "Caption to compare against")->required();
  hm->add_option("--out", hm_out, "Output PNG")->required();
  hm->add_option("--data", hm_data, "Dataset directory (default: the checkpoint's data_dir)");
  hm->add_option("--blur", hm_blur, "Gaussian blur sigma in patches")->check(CLI::NonNegativeNumber);
  hm->callback([&] { run = [&] { return heatmap(hm_ckpt, hm_clip, hm_text, hm_out, hm_data, hm_blur); }; });

  auto* aa = app.add_subcommand("actarea", "Detect and render the action area of a clip");
  fs::path aa_data, aa_out;
  std::string aa_clip;
  int aa_patch = 8;
  fils::ActionAreaParams aa_params;
  aa->add_option("--clip", aa_clip, "Clip file or <split>/<name> id")->required();
  aa->add_option("--data", aa_data, "Dataset directory for clip ids");
  aa->add_option("--out", aa_out, "Output PNG; the patch list goes to the same name with .json")->required();
  aa->add_option("--patch", aa_patch, "Spatial patch size in pixels")->capture_default_str();
  aa->add_option("--threshold", aa_params.threshold, "Score threshold relative to the clip maximum")->capture_default_str();
  aa->add_option("--block", aa_params.flow.block, "Block-matching block size")->capture_default_str();
  aa->add_option("--radius", aa_params.flow.radius, "Block-matching search radius")->capture_default_str();
  aa->callback([&] { run = [&] { return actarea(aa_clip, aa_data, aa_out, aa_patch, aa_params); }; });

  auto* st = app.add_subcommand("selftest", "Run the fast invariant suite");
  st->callback([&] { run = [] { return fils::run_selftest(std::cout) ? 0 : kRuntimeError; }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    if (e.get_exit_code() != 0) std::cerr << '\n' << app.help();
    return e.get_exit_code() == 0 ? 0 : kUsageError;
  }

  spdlog::set_level(g.quiet ? spdlog::level::warn : spdlog::level::info);
  if (g.threads > 0) omp_set_num_threads(g.threads);
  try {
    return run();
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsageError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
}
