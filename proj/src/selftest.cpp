#include "fils/selftest.hpp"

#include "fils/action_area.hpp"
#include "fils/checkpoint.hpp"
#include "fils/ema.hpp"
#include "fils/kernels.hpp"
#include "fils/losses.hpp"
#include "fils/synthgen.hpp"
#include "fils/tokenize.hpp"
#include "fils/train.hpp"

#include <fmt/format.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace fils {

namespace fs = std::filesystem;

namespace {

struct Check {
  std::string name;
  std::function<std::string()> run;  // empty string on success, else the reason
};

std::string expect(bool ok, const std::string& why) { return ok ? "" : why; }

std::string geometry() {
  const int large = grid_dims(16, 224, 224, PatchSpec{16, 2}).count();
  const int toy = grid_dims(16, 64, 64, PatchSpec{8, 2}).count();
  return expect(large == 1568 && toy == 512,
                "token counts " + std::to_string(large) + "/" + std::to_string(toy));
}

std::string masks() {
  Rng rng(11);
  const GridDims dims{8, 14, 14};
  for (int i = 0; i < 1000; ++i) {
    const MaskSpec m = sample_tube_mask(dims, 0.9, rng);
    if (m.masked_spatial_count() != 176) return "masked count " + std::to_string(m.masked_spatial_count());
    if (m.masked_token_count() != 176 * 8) return "tube mask not shared over time";
  }
  return "";
}

std::string losses() {
  const MatD one = MatD::Identity(1, 4);
  if (actclip_loss(one, one, 0.0).loss != 0.0) return "B=1 loss not zero";
  const MatD eye = MatD::Identity(2, 2);
  const double l2 = actclip_loss(eye, eye, 0.0).loss;
  if (std::abs(l2 - std::log(1.0 + std::exp(-1.0))) > 1e-10) return "orthonormal B=2 case";
  MatD same = MatD::Zero(5, 3);
  same.col(0).setOnes();
  if (std::abs(actclip_loss(same, same, std::log(0.07)).loss - std::log(5.0)) > 1e-10) return "identical rows case";
  const MatD p = (MatD(1, 2) << 1, 0).finished();
  const MatD g = (MatD(1, 2) << 0, 1).finished();
  return expect(fp_loss(p, g).loss == 2.0, "fp_loss L1 case");
}

std::string loss_gradient() {
  Rng rng(5);
  auto unit_rows = [&](Index b, Index d) {
    MatD m(b, d);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = normal01(rng);
    return nn::normalize_rows<double>(m);
  };
  const MatD v = unit_rows(4, 8);
  const MatD t = unit_rows(4, 8);
  const double ls = std::log(0.5);
  const ActClipResult r = actclip_loss(v, t, ls);
  const double h = 1e-6;
  const double numeric = (actclip_loss(v, t, ls + h).loss - actclip_loss(v, t, ls - h).loss) / (2 * h);
  const double rel = std::abs(numeric - r.d_log_sigma) / std::max(1e-12, std::abs(numeric));
  if (rel > 1e-3) return "d log_sigma relative error " + std::to_string(rel);
  MatD vp = v, vm = v;
  vp(1, 2) += h;
  vm(1, 2) -= h;
  const double dv = (actclip_loss(vp, t, ls).loss - actclip_loss(vm, t, ls).loss) / (2 * h);
  return expect(std::abs(dv - r.d_video(1, 2)) <= 1e-3 * std::max(1e-6, std::abs(dv)), "d video mismatch");
}

std::string kernels_agree() {
  Rng rng(9);
  MatF qkv(40, 48);
  for (Index i = 0; i < qkv.size(); ++i) qkv.data()[i] = static_cast<float>(normal01(rng));
  MatF a, b;
  kernels::serial::attention_forward<float>(qkv, 4, a, nullptr);
  kernels::omp::attention_forward<float>(qkv, 4, b, nullptr);
  if ((a - b).cwiseAbs().maxCoeff() > 1e-5f) return "attention forward differs";
  synth::SceneSpec spec;
  spec.motion = synth::Motion::right;
  spec.speed = 2.0;
  spec.start_x = 16;
  const VideoClip clip = synth::render_clip(spec, 3);
  const std::size_t frame = static_cast<std::size_t>(clip.height) * clip.width * 3;
  const kernels::FramePair pair{clip.pixels.data(), clip.pixels.data() + frame, clip.height, clip.width};
  std::vector<kernels::BlockMatch> s, o;
  kernels::serial::block_match(pair, 8, 4, s);
  kernels::omp::block_match(pair, 8, 4, o);
  for (std::size_t i = 0; i < s.size(); ++i)
    if (s[i].dx != o[i].dx || s[i].dy != o[i].dy || s[i].sad != o[i].sad) return "block matches differ";
  return "";
}

std::string ema() {
  std::vector<double> teacher{2.0, -1.0};
  const std::vector<double> student{0.0, 3.0};
  const double tau = 0.9;
  for (int k = 0; k < 100; ++k) ema_update<double>(teacher, student, tau);
  const double tk = std::pow(tau, 100);
  const double want0 = tk * 2.0;
  const double want1 = tk * -1.0 + (1.0 - tk) * 3.0;
  if (std::abs(teacher[0] - want0) > 1e-10 || std::abs(teacher[1] - want1) > 1e-10) return "closed form";
  const EmaSchedule s{0.9, 1.0, 10};
  return expect(tau_at(0, s) == 0.9 && std::abs(tau_at(5, s) - 0.95) < 1e-15 && tau_at(10000, s) == 1.0,
                "tau schedule endpoints");
}

std::string detector() {
  synth::DatasetConfig cfg;
  cfg.pan_probability = 0.0;
  double recall = 0.0, precision = 0.0;
  const int n = 12;
  for (int i = 0; i < n; ++i) {
    Rng rng(derive_seed(21, static_cast<std::uint64_t>(i)));
    const auto spec = synth::sample_scene(static_cast<synth::Motion>(i % 4), cfg, rng);
    const VideoClip clip = synth::render_clip(spec, derive_seed(22, static_cast<std::uint64_t>(i)));
    const auto s = compare_sets(action_area_of(clip, 8, 8).selected, object_patches(clip, 8, 8, 0.1));
    recall += s.recall / n;
    precision += s.precision / n;
  }
  return expect(recall >= 0.8 && precision >= 0.5,
                "recall " + std::to_string(recall) + ", precision " + std::to_string(precision));
}

std::string training(const fs::path& dir) {
  synth::DatasetConfig dc;
  dc.train_clips = 8;
  dc.val_clips = 0;
  dc.render = {4, 32, 32};
  synth::generate_dataset(dc, dir, true);
  TrainConfig cfg;
  cfg.data_dir = dir.string();
  cfg.batch_size = 4;
  cfg.model.encoder = {32, 1, 2, 2.0, 0, 0};
  cfg.model.predictor_dim = 32;
  cfg.model.predictor_depth = 1;
  cfg.model.predictor_heads = 2;
  cfg.model.head_hidden = 32;
  cfg.model.text_dim = 16;
  cfg.model.text_depth = 1;
  cfg.model.text_heads = 2;
  cfg.mask_ratio = 0.75;
  const Dataset data(dir / "train", 0, cfg.patch, cfg.action_area);
  resolve_geometry(cfg, data.frames(), data.height(), data.width());
  const FilsModel model(cfg.model);
  TrainState st = init_state(model, cfg);
  Schedules sched = make_schedules(cfg, data.size());
  sched.lr = {1e-3, 1e-3, 1e-3, 0, 1000};
  std::vector<Sample> batch;
  for (std::size_t i = 0; i < 4; ++i) batch.push_back(make_sample(data, i, cfg, false, 100 + i));
  const double first = pretrain_step(model, st, batch, cfg, sched).loss;
  double last = first;
  for (int k = 0; k < 14; ++k) last = pretrain_step(model, st, batch, cfg, sched).loss;
  if (!(last < first)) return "loss did not decrease (" + std::to_string(first) + " -> " + std::to_string(last) + ")";

  Checkpoint c;
  c.config = cfg.to_json();
  c.step = st.step;
  c.params = st.params;
  c.teacher = st.teacher;
  save_checkpoint(dir / "selftest.fils", c, model.layout());
  const Checkpoint back = load_checkpoint(dir / "selftest.fils");
  return expect(back.params == c.params && back.teacher == c.teacher && back.step == c.step,
                "checkpoint round trip");
}

}  // namespace

bool run_selftest(std::ostream& out) {
  const fs::path dir = fs::temp_directory_path() / ("fils-selftest-" + std::to_string(::getpid()));
  const std::vector<Check> checks = {
      {"token geometry", geometry},
      {"tube mask invariants", masks},
      {"loss oracles", losses},
      {"contrastive loss gradient", loss_gradient},
      {"serial and OpenMP kernels agree", kernels_agree},
      {"ema closed form and schedule", ema},
      {"action-area detector", detector},
      {"training step and checkpoint", [&] { return training(dir); }},
  };
  bool all = true;
  for (const auto& c : checks) {
    const auto t0 = std::chrono::steady_clock::now();
    std::string why;
    try {
      why = c.run();
    } catch (const std::exception& e) {
      why = std::string("exception: ") + e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    all &= why.empty();
    out << fmt::format("[{}] {} ({:.2f} s)", why.empty() ? "PASS" : "FAIL", c.name, secs);
    if (!why.empty()) out << ": " << why;
    out << '\n';
  }
  std::error_code ec;
  fs::remove_all(dir, ec);
  out << (all ? "selftest passed\n" : "selftest FAILED\n");
  return all;
}

}  // namespace fils
