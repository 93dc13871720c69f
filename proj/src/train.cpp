#include "fils/train.hpp"

#include "fils/json_keys.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

namespace fils {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

}  // namespace

std::string_view name(Objective o) {
  switch (o) {
    case Objective::fils:
      return "fils";
    case Objective::fp_only:
      return "fp-only";
    case Objective::actclip_only:
      return "actclip-only";
    case Objective::mse_baseline:
      return "mse-baseline";
  }
  return "?";
}

Objective objective_from_name(std::string_view s) {
  for (auto o : {Objective::fils, Objective::fp_only, Objective::actclip_only, Objective::mse_baseline})
    if (name(o) == s) return o;
  throw std::invalid_argument("unknown objective '" + std::string(s) + "'");
}

std::string_view name(TeacherInput t) {
  return t == TeacherInput::full_view ? "full-view" : "masked-only";
}

TeacherInput teacher_input_from_name(std::string_view s) {
  if (s == "full-view") return TeacherInput::full_view;
  if (s == "masked-only") return TeacherInput::masked_only;
  throw std::invalid_argument("unknown teacher_input '" + std::string(s) + "'");
}

bool uses_prediction(Objective o) { return o != Objective::actclip_only; }
bool uses_contrastive(Objective o) { return o != Objective::fp_only; }

json TrainConfig::to_json() const {
  return {
      {"data_dir", data_dir},
      {"out_dir", out_dir},
      {"epochs", epochs},
      {"batch_size", batch_size},
      {"max_clips", max_clips},
      {"mask_ratio", mask_ratio},
      {"patch", {{"spatial", patch.spatial}, {"temporal", patch.temporal}}},
      {"model", model.to_json()},
      {"ema", {{"tau0", tau0}, {"tau_e", tau_e}, {"tau_n_fraction", tau_n_fraction}}},
      {"loss",
       {{"lambda1", loss.lambda1},
        {"lambda2", loss.lambda2},
        {"sigma_min", sigma_bounds.min},
        {"sigma_max", sigma_bounds.max}}},
      {"optimizer",
       {{"lr_start", lr_start},
        {"lr_peak", lr_peak},
        {"lr_end", lr_end},
        {"warmup_epochs", warmup_epochs},
        {"beta1", adamw.beta1},
        {"beta2", adamw.beta2},
        {"eps", adamw.eps},
        {"weight_decay", adamw.weight_decay},
        {"grad_clip", grad_clip}}},
      {"seed", seed},
      {"objective", name(objective)},
      {"pooling", name(pooling)},
      {"teacher_input", name(teacher_input)},
      {"augment",
       {{"random_resized_crop", augment.random_resized_crop},
        {"scale_min", augment.scale_min},
        {"scale_max", augment.scale_max},
        {"ratio_min", augment.ratio_min},
        {"ratio_max", augment.ratio_max},
        {"horizontal_flip", augment.horizontal_flip}}},
      {"action_area",
       {{"threshold", action_area.threshold},
        {"block", action_area.flow.block},
        {"radius", action_area.flow.radius}}},
      {"checkpoint_every", checkpoint_every},
  };
}

TrainConfig TrainConfig::from_json(const json& j) {
  check_keys(j, "",
             {"data_dir", "out_dir", "epochs", "batch_size", "max_clips", "mask_ratio", "patch", "model",
              "ema", "loss", "optimizer", "seed", "objective", "pooling", "teacher_input", "augment",
              "action_area", "checkpoint_every"});
  check_keys(j.at("patch"), "patch", {"spatial", "temporal"});
  check_keys(j.at("model"), "model",
             {"embed_dim", "depth", "heads", "mlp_ratio", "predictor_dim", "predictor_depth",
              "predictor_heads", "head_hidden", "head_bias", "text_dim", "text_depth", "text_heads",
              "text_max_len", "text_frozen", "sigma_init"},
             {"token_raw_dim", "max_tokens", "grid", "pixel_predictor"});
  check_keys(j.at("ema"), "ema", {"tau0", "tau_e", "tau_n_fraction"});
  check_keys(j.at("loss"), "loss", {"lambda1", "lambda2", "sigma_min", "sigma_max"});
  check_keys(j.at("optimizer"), "optimizer",
             {"lr_start", "lr_peak", "lr_end", "warmup_epochs", "beta1", "beta2", "eps", "weight_decay",
              "grad_clip"});
  check_keys(j.at("augment"), "augment",
             {"random_resized_crop", "scale_min", "scale_max", "ratio_min", "ratio_max", "horizontal_flip"});
  check_keys(j.at("action_area"), "action_area", {"threshold", "block", "radius"});

  TrainConfig c;
  c.data_dir = j.at("data_dir").get<std::string>();
  c.out_dir = j.at("out_dir").get<std::string>();
  c.epochs = j.at("epochs").get<int>();
  c.batch_size = j.at("batch_size").get<int>();
  c.max_clips = j.at("max_clips").get<int>();
  c.mask_ratio = j.at("mask_ratio").get<double>();
  c.patch.spatial = j.at("patch").at("spatial").get<int>();
  c.patch.temporal = j.at("patch").at("temporal").get<int>();
  c.model = ModelConfig::from_json(j.at("model"));
  const auto& ema = j.at("ema");
  c.tau0 = ema.at("tau0").get<double>();
  c.tau_e = ema.at("tau_e").get<double>();
  c.tau_n_fraction = ema.at("tau_n_fraction").get<double>();
  const auto& loss = j.at("loss");
  c.loss.lambda1 = loss.at("lambda1").get<double>();
  c.loss.lambda2 = loss.at("lambda2").get<double>();
  c.sigma_bounds.min = loss.at("sigma_min").get<double>();
  c.sigma_bounds.max = loss.at("sigma_max").get<double>();
  const auto& opt = j.at("optimizer");
  c.lr_start = opt.at("lr_start").get<double>();
  c.lr_peak = opt.at("lr_peak").get<double>();
  c.lr_end = opt.at("lr_end").get<double>();
  c.warmup_epochs = opt.at("warmup_epochs").get<double>();
  c.adamw.beta1 = opt.at("beta1").get<double>();
  c.adamw.beta2 = opt.at("beta2").get<double>();
  c.adamw.eps = opt.at("eps").get<double>();
  c.adamw.weight_decay = opt.at("weight_decay").get<double>();
  c.grad_clip = opt.at("grad_clip").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.objective = objective_from_name(j.at("objective").get<std::string>());
  c.pooling = pool_strategy_from_name(j.at("pooling").get<std::string>());
  c.teacher_input = teacher_input_from_name(j.at("teacher_input").get<std::string>());
  const auto& aug = j.at("augment");
  c.augment.random_resized_crop = aug.at("random_resized_crop").get<bool>();
  c.augment.scale_min = aug.at("scale_min").get<double>();
  c.augment.scale_max = aug.at("scale_max").get<double>();
  c.augment.ratio_min = aug.at("ratio_min").get<double>();
  c.augment.ratio_max = aug.at("ratio_max").get<double>();
  c.augment.horizontal_flip = aug.at("horizontal_flip").get<bool>();
  const auto& area = j.at("action_area");
  c.action_area.threshold = area.at("threshold").get<double>();
  c.action_area.flow.block = area.at("block").get<int>();
  c.action_area.flow.radius = area.at("radius").get<int>();
  c.checkpoint_every = j.at("checkpoint_every").get<int>();
  c.model.pixel_predictor = c.objective == Objective::mse_baseline;
  return c;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument(m); };
  if (epochs <= 0) fail("epochs must be positive");
  if (batch_size <= 0) fail("batch_size must be positive");
  if (uses_contrastive(objective) && batch_size < 2)
    fail("batch_size must be at least 2 when the contrastive term is active");
  if (max_clips < 0) fail("max_clips must be >= 0");
  if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) fail("mask_ratio must lie in (0, 1)");
  if (patch.spatial <= 0 || patch.temporal <= 0) fail("patch sizes must be positive");
  if (loss.lambda1 < 0.0 || loss.lambda2 < 0.0) fail("loss weights must be >= 0");
  if (loss.lambda1 == 0.0 && loss.lambda2 == 0.0) fail("loss weights cannot both be zero");
  if (!(sigma_bounds.min > 0.0 && sigma_bounds.min < sigma_bounds.max))
    fail("sigma bounds must satisfy 0 < sigma_min < sigma_max");
  EmaSchedule{tau0, tau_e, 1}.validate();
  if (!(tau_n_fraction > 0.0)) fail("ema.tau_n_fraction must be positive");
  if (lr_start < 0.0 || lr_peak <= 0.0 || lr_end < 0.0) fail("learning rates must be positive");
  if (warmup_epochs < 0.0) fail("warmup_epochs must be >= 0");
  if (grad_clip <= 0.0) fail("grad_clip must be positive");
  if (augment.scale_min <= 0.0 || augment.scale_min > augment.scale_max || augment.scale_max > 1.0)
    fail("augment scale range must satisfy 0 < min <= max <= 1");
  if (augment.ratio_min <= 0.0 || augment.ratio_min > augment.ratio_max)
    fail("augment ratio range must satisfy 0 < min <= max");
  if (augment.horizontal_flip) fail("horizontal_flip would swap the left/right classes; not supported");
  if (!(action_area.threshold >= 0.0 && action_area.threshold < 1.0))
    fail("action_area.threshold must lie in [0, 1)");
  if (action_area.flow.block <= 0 || action_area.flow.radius < 0)
    fail("action_area block must be positive and radius non-negative");
  if (checkpoint_every <= 0) fail("checkpoint_every must be positive");
}

TrainConfig load_train_config(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("config file not found: " + file.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::runtime_error("cannot parse " + file.string() + ": " + e.what());
  }
  TrainConfig c = TrainConfig::from_json(j);
  c.validate();
  return c;
}

void resolve_geometry(TrainConfig& cfg, int frames, int height, int width) {
  cfg.model.grid = grid_dims(frames, height, width, cfg.patch);
  cfg.model.encoder.token_raw_dim = cfg.patch.raw_dim();
  cfg.model.encoder.max_tokens = cfg.model.grid.count();
  cfg.model.pixel_predictor = cfg.objective == Objective::mse_baseline;
}

ModelConfig model_config_of(const json& run_config) {
  return ModelConfig::from_json(run_config.at("model"));
}

// ---------------------------------------------------------------------------
// Dataset

namespace {

json area_params_json(const ActionAreaParams& p, GridDims grid) {
  return {{"threshold", p.threshold},
          {"block", p.flow.block},
          {"radius", p.flow.radius},
          {"grid", {grid.y, grid.x}}};
}

std::string encode_area(const ActionArea& a) {
  std::string s(a.selected.size(), '0');
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = a.selected[i] ? '1' : '0';
  return s;
}

ActionArea decode_area(const std::string& s, int gh, int gw, bool fallback) {
  ActionArea a;
  a.grid_h = gh;
  a.grid_w = gw;
  a.selected.resize(s.size());
  a.scores.assign(s.size(), 0.0);
  for (std::size_t i = 0; i < s.size(); ++i) a.selected[i] = s[i] == '1';
  a.fallback = fallback;
  return a;
}

}  // namespace

Dataset::Dataset(const fs::path& split_dir, int max_clips, PatchSpec patch,
                 const ActionAreaParams& params)
    : manifest_(synth::load_manifest(split_dir)) {
  std::size_t n = manifest_.entries.size();
  if (max_clips > 0) n = std::min(n, static_cast<std::size_t>(max_clips));
  if (n == 0) throw std::runtime_error("dataset " + split_dir.string() + " has no clips");
  pixels_.resize(n);
  masks_.resize(n);
  labels_.resize(n);
  captions_.resize(n);
  seeds_.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& e = manifest_.entries[i];
    VideoClip c = synth::read_clip(split_dir / e.file);
    if (i == 0) {
      frames_ = c.frames;
      height_ = c.height;
      width_ = c.width;
      grid_ = grid_dims(frames_, height_, width_, patch);
    } else if (c.frames != frames_ || c.height != height_ || c.width != width_) {
      throw std::runtime_error("clip " + e.file + " has a different geometry");
    }
    pixels_[i].resize(c.pixels.size());
    std::transform(c.pixels.begin(), c.pixels.end(), pixels_[i].begin(), to_byte);
    masks_[i] = std::move(c.motion_mask);
    labels_[i] = c.action_label;
    captions_[i] = c.caption;
    seeds_[i] = c.rng_seed;
  }

  const fs::path cache_file = split_dir / "action_areas.json";
  const json want = area_params_json(params, grid_);
  areas_.resize(n);
  std::vector<bool> have(n, false);
  json cache;
  if (fs::exists(cache_file)) {
    std::ifstream in(cache_file);
    try {
      cache = json::parse(in);
    } catch (const json::parse_error&) {
      cache = json();
    }
    if (cache.is_object() && cache.value("params", json()) == want && cache.contains("areas")) {
      for (const auto& [file, entry] : cache.at("areas").items()) {
        for (std::size_t i = 0; i < n; ++i) {
          if (manifest_.entries[i].file == file) {
            areas_[i] = decode_area(entry.at("selected").get<std::string>(), grid_.y, grid_.x,
                                    entry.at("fallback").get<bool>());
            have[i] = true;
            break;
          }
        }
      }
    } else {
      cache = json();
    }
  }
  std::size_t missing = static_cast<std::size_t>(std::count(have.begin(), have.end(), false));
  if (missing > 0) {
    spdlog::info("computing action areas for {} clips in {}", missing, split_dir.string());
    for (std::size_t i = 0; i < n; ++i)
      if (!have[i]) areas_[i] = action_area_of(clip(i), grid_.y, grid_.x, params);
    if (!cache.is_object()) cache = json::object();
    cache["params"] = want;
    auto& table = cache["areas"];
    if (!table.is_object()) table = json::object();
    for (std::size_t i = 0; i < n; ++i)
      table[manifest_.entries[i].file] = {{"selected", encode_area(areas_[i])},
                                          {"fallback", areas_[i].fallback}};
    std::ofstream out(cache_file);
    if (out) out << cache.dump();
  }
}

VideoClip Dataset::clip(std::size_t i) const {
  VideoClip c;
  c.frames = frames_;
  c.height = height_;
  c.width = width_;
  c.pixels.resize(pixels_[i].size());
  std::transform(pixels_[i].begin(), pixels_[i].end(), c.pixels.begin(),
                 [](std::uint8_t b) { return static_cast<float>(b) / 255.0f; });
  c.motion_mask = masks_[i];
  c.caption = captions_[i];
  c.action_label = labels_[i];
  c.rng_seed = seeds_[i];
  return c;
}

// ---------------------------------------------------------------------------
// Augmentation

CropBox sample_crop(int height, int width, const AugmentConfig& aug, Rng& rng) {
  const double area = static_cast<double>(height) * width;
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * (aug.scale_min + (aug.scale_max - aug.scale_min) * uniform01(rng));
    const double log_lo = std::log(aug.ratio_min);
    const double log_hi = std::log(aug.ratio_max);
    const double ratio = std::exp(log_lo + (log_hi - log_lo) * uniform01(rng));
    const double w = std::sqrt(target * ratio);
    const double h = std::sqrt(target / ratio);
    if (w <= width && h <= height) {
      return {uniform01(rng) * (height - h), uniform01(rng) * (width - w), h, w};
    }
  }
  return {0.0, 0.0, static_cast<double>(height), static_cast<double>(width)};
}

VideoClip apply_crop(const VideoClip& clip, const CropBox& box) {
  VideoClip out = clip;
  const double sy = box.h / clip.height;
  const double sx = box.w / clip.width;
  for (int y = 0; y < clip.height; ++y) {
    const double fy = std::clamp(box.y0 + (y + 0.5) * sy - 0.5, 0.0, clip.height - 1.0);
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, clip.height - 1);
    const double wy = fy - y0;
    const int ny = std::clamp(static_cast<int>(box.y0 + (y + 0.5) * sy), 0, clip.height - 1);
    for (int x = 0; x < clip.width; ++x) {
      const double fx = std::clamp(box.x0 + (x + 0.5) * sx - 0.5, 0.0, clip.width - 1.0);
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, clip.width - 1);
      const double wx = fx - x0;
      const int nx = std::clamp(static_cast<int>(box.x0 + (x + 0.5) * sx), 0, clip.width - 1);
      for (int t = 0; t < clip.frames; ++t) {
        const float* a = &clip.pixels[clip.pixel_index(t, y0, x0)];
        const float* b = &clip.pixels[clip.pixel_index(t, y0, x1)];
        const float* c = &clip.pixels[clip.pixel_index(t, y1, x0)];
        const float* d = &clip.pixels[clip.pixel_index(t, y1, x1)];
        float* o = &out.pixels[out.pixel_index(t, y, x)];
        for (int ch = 0; ch < 3; ++ch) {
          const double top = a[ch] * (1 - wx) + b[ch] * wx;
          const double bottom = c[ch] * (1 - wx) + d[ch] * wx;
          o[ch] = static_cast<float>(top * (1 - wy) + bottom * wy);
        }
        out.motion_mask[out.mask_index(t, y, x)] = clip.motion_mask[clip.mask_index(t, ny, nx)];
      }
    }
  }
  return out;
}

ActionArea crop_action_area(const ActionArea& area, const CropBox& box, int height, int width) {
  ActionArea out = area;
  const double ph = static_cast<double>(height) / area.grid_h;
  const double pw = static_cast<double>(width) / area.grid_w;
  for (int gy = 0; gy < area.grid_h; ++gy) {
    for (int gx = 0; gx < area.grid_w; ++gx) {
      const double sy = box.y0 + (gy + 0.5) * ph * box.h / height;
      const double sx = box.x0 + (gx + 0.5) * pw * box.w / width;
      const int py = std::clamp(static_cast<int>(sy / ph), 0, area.grid_h - 1);
      const int px = std::clamp(static_cast<int>(sx / pw), 0, area.grid_w - 1);
      out.selected[static_cast<std::size_t>(gy) * area.grid_w + gx] = area.contains(py, px);
    }
  }
  std::fill(out.scores.begin(), out.scores.end(), 0.0);
  out.fallback = area.fallback;
  if (out.count() == 0) {
    std::fill(out.selected.begin(), out.selected.end(), 1);
    out.fallback = true;
  }
  return out;
}

Sample make_sample(const Dataset& data, std::size_t index, const TrainConfig& cfg, bool augment,
                   std::uint64_t seed) {
  Sample s;
  s.caption = data.caption(index);
  s.label = data.label(index);
  s.seed = seed;
  VideoClip clip = data.clip(index);
  s.area = data.action_area(index);
  if (augment && cfg.augment.random_resized_crop) {
    Rng rng(derive_seed(seed, 0xC409));
    const CropBox box = sample_crop(clip.height, clip.width, cfg.augment, rng);
    clip = apply_crop(clip, box);
    s.area = crop_action_area(s.area, box, clip.height, clip.width);
  }
  s.grid = tubeify(clip, cfg.patch);
  return s;
}

// ---------------------------------------------------------------------------
// Optimisation

TrainState init_state(const FilsModel& model, const TrainConfig& cfg) {
  TrainState st;
  st.params = model.init_params(derive_seed(cfg.seed, 0x1417));
  st.teacher.assign(st.params.begin(), st.params.begin() + model.encoder_size());
  std::vector<bool> frozen;
  for (const auto& slot : model.layout().slots()) frozen.push_back(!model.trainable(slot));
  st.optimizer = AdamW(model.layout(), frozen, cfg.adamw);
  return st;
}

Schedules make_schedules(const TrainConfig& cfg, std::size_t dataset_size) {
  Schedules s;
  s.steps_per_epoch = static_cast<std::int64_t>(dataset_size) / cfg.batch_size;
  if (s.steps_per_epoch == 0)
    throw std::invalid_argument("dataset has fewer clips than one batch");
  const std::int64_t total = s.steps_per_epoch * cfg.epochs;
  s.lr = {cfg.lr_start, cfg.lr_peak, cfg.lr_end,
          static_cast<std::int64_t>(std::llround(cfg.warmup_epochs * static_cast<double>(s.steps_per_epoch))),
          total};
  s.ema = {cfg.tau0, cfg.tau_e,
           std::max<std::int64_t>(1, std::llround(cfg.tau_n_fraction * static_cast<double>(total)))};
  return s;
}

namespace {

// Feature prediction (or pixel regression) for one sample; accumulates
// `scale` times its gradient into `g`.
double prediction_term(const FilsModel& model, const TrainState& st, const Sample& s,
                       const TrainConfig& cfg, double scale, std::span<float> g) {
  const std::span<const float> p(st.params);
  Rng rng(derive_seed(s.seed, 0x3A5C));
  const MaskSpec mask = sample_tube_mask(s.grid.dims, cfg.mask_ratio, rng);
  const TokenSplit split = split_tokens(s.grid, mask);
  const MatF vis_tokens = gather_rows(s.grid.tokens, split.visible);
  const auto vis_coords = gather_coords(s.grid.coords, split.visible);
  const auto msk_coords = gather_coords(s.grid.coords, split.masked);

  EncoderCache<float> enc_cache;
  const MatF fu = model.encoder.forward(p, vis_tokens, vis_coords, &enc_cache);
  PredictorCache<float> pred_cache;
  const MatF pm = model.predictor.forward(p, fu, vis_coords, msk_coords, &pred_cache);

  double loss = 0.0;
  MatF d_pm;
  if (cfg.objective == Objective::mse_baseline) {
    const MatD target = gather_rows(s.grid.tokens, split.masked).cast<double>();
    const RegressionResult r = mse_pixel_loss(pm.cast<double>(), target);
    loss = r.loss;
    d_pm = (r.d_pred * scale).cast<float>();
  } else {
    const std::span<const float> teacher(st.teacher);
    MatF fm;
    if (cfg.teacher_input == TeacherInput::full_view) {
      const MatF full = model.encoder.forward<float>(teacher, s.grid.tokens, s.grid.coords, nullptr);
      fm = gather_rows(full, split.masked);
    } else {
      const MatF msk_tokens = gather_rows(s.grid.tokens, split.masked);
      fm = model.encoder.forward<float>(teacher, msk_tokens, msk_coords, nullptr);
    }
    const MatD target = project_and_normalize<float>(&model.head, p, fm).cast<double>();
    HeadCache<float> head_cache;
    const MatF proj = model.head.forward(p, pm, &head_cache);
    nn::NormalizeCache<float> norm_cache;
    const MatF pred = nn::normalize_rows<float>(proj, &norm_cache);
    const RegressionResult r = fp_loss(pred.cast<double>(), target);
    loss = r.loss;
    const MatF d_pred = (r.d_pred * scale).cast<float>();
    const MatF d_proj = nn::normalize_rows_backward<float>(norm_cache, d_pred);
    d_pm = model.head.backward(p, g, head_cache, d_proj);
  }
  const MatF d_fu = model.predictor.backward(p, g, vis_coords, msk_coords, pred_cache, d_pm);
  model.encoder.backward(p, g, vis_coords, enc_cache, d_fu);
  return loss;
}

struct ContrastiveResult {
  double loss = 0.0;
  double sigma = 0.0;
};

ContrastiveResult contrastive_term(const FilsModel& model, const TrainState& st,
                                   const std::vector<Sample>& batch, const TrainConfig& cfg,
                                   double scale, std::span<float> g) {
  const std::span<const float> p(st.params);
  const std::size_t b = batch.size();
  const Index d = model.config().encoder.embed_dim;
  std::vector<EncoderCache<float>> caches(b);
  std::vector<Pooling> pools(b);
  MatF pooled(static_cast<Index>(b), d);
  for (std::size_t i = 0; i < b; ++i) {
    const Sample& s = batch[i];
    const MatF f = model.encoder.forward(p, s.grid.tokens, s.grid.coords, &caches[i]);
    Rng rng(derive_seed(s.seed, 0x9001));
    pools[i] = action_pooling(s.grid.coords, s.area, cfg.pooling, rng);
    pooled.row(static_cast<Index>(i)) = pool_rows(f, pools[i]);
  }
  HeadCache<float> head_cache;
  const MatF proj = model.head.forward(p, pooled, &head_cache);
  nn::NormalizeCache<float> vnorm;
  const MatF zv = nn::normalize_rows<float>(proj, &vnorm);

  const Index dt = model.config().text_dim;
  MatF h(static_cast<Index>(b), dt);
  std::vector<TextCache<float>> tcache(model.config().text_frozen ? 0 : b);
  for (std::size_t i = 0; i < b; ++i)
    h.row(static_cast<Index>(i)) =
        model.text.forward(p, batch[i].caption, tcache.empty() ? nullptr : &tcache[i]);
  nn::NormalizeCache<float> tnorm;
  const MatF zt = nn::normalize_rows<float>(h, &tnorm);

  const double log_sigma = st.params[static_cast<std::size_t>(model.log_sigma())];
  const ActClipResult r =
      actclip_loss(zv.cast<double>(), zt.cast<double>(), log_sigma, cfg.sigma_bounds);

  g[static_cast<std::size_t>(model.log_sigma())] += static_cast<float>(scale * r.d_log_sigma);
  const MatF d_zv = (r.d_video * scale).cast<float>();
  const MatF d_pooled = model.head.backward(p, g, head_cache, nn::normalize_rows_backward<float>(vnorm, d_zv));
  for (std::size_t i = 0; i < b; ++i) {
    MatF df = MatF::Zero(batch[i].grid.size(), d);
    pool_rows_backward<float>(pools[i], d_pooled.row(static_cast<Index>(i)), df);
    model.encoder.backward(p, g, batch[i].grid.coords, caches[i], df);
  }
  if (!model.config().text_frozen) {
    const MatF d_h = nn::normalize_rows_backward<float>(tnorm, (r.d_text * scale).cast<float>());
    for (std::size_t i = 0; i < b; ++i)
      model.text.backward(p, g, tcache[i], MatF(d_h.row(static_cast<Index>(i))));
  }
  return {r.loss, r.sigma};
}

std::string batch_seeds(const std::vector<Sample>& batch) {
  std::ostringstream out;
  for (std::size_t i = 0; i < batch.size(); ++i) out << (i ? " " : "") << batch[i].seed;
  return out.str();
}

}  // namespace

StepMetrics compute_gradients(const FilsModel& model, const TrainState& state,
                              const std::vector<Sample>& batch, const TrainConfig& cfg,
                              std::vector<float>& grads) {
  if (batch.empty()) throw std::invalid_argument("empty batch");
  grads.assign(state.params.size(), 0.0f);
  const std::span<float> g(grads);
  StepMetrics m;
  m.sigma = sigma_of(state.params[static_cast<std::size_t>(model.log_sigma())], cfg.sigma_bounds);
  if (uses_prediction(cfg.objective) && cfg.loss.lambda2 > 0.0) {
    const double scale = cfg.loss.lambda2 / static_cast<double>(batch.size());
    double sum = 0.0;
    for (const Sample& s : batch) sum += prediction_term(model, state, s, cfg, scale, g);
    m.l_fp = sum / static_cast<double>(batch.size());
  }
  if (uses_contrastive(cfg.objective) && cfg.loss.lambda1 > 0.0) {
    const ContrastiveResult c = contrastive_term(model, state, batch, cfg, cfg.loss.lambda1, g);
    m.l_act = c.loss;
  }
  try {
    m.loss = total_loss(m.l_act, m.l_fp, cfg.loss);
  } catch (const std::runtime_error& e) {
    throw std::runtime_error(std::string(e.what()) + " at step " + std::to_string(state.step) +
                             "; sample seeds: " + batch_seeds(batch));
  }
  for (const float v : grads)
    if (!std::isfinite(v))
      throw std::runtime_error("non-finite gradient at step " + std::to_string(state.step) +
                               "; sample seeds: " + batch_seeds(batch));
  return m;
}

StepMetrics pretrain_step(const FilsModel& model, TrainState& state, const std::vector<Sample>& batch,
                          const TrainConfig& cfg, const Schedules& sched) {
  std::vector<float> grads;
  StepMetrics m = compute_gradients(model, state, batch, cfg, grads);
  m.grad_norm = clip_grad_norm(grads, cfg.grad_clip);
  m.lr = lr_at(state.step, sched.lr);
  m.tau = tau_at(state.step, sched.ema);
  state.optimizer.step(state.params, grads, m.lr);
  ema_update<float>(state.teacher,
                    std::span<const float>(state.params.data(), state.teacher.size()), m.tau);
  ++state.step;
  m.step = state.step;
  m.epoch = state.epoch;
  return m;
}

// ---------------------------------------------------------------------------
// Loop

namespace {

constexpr const char* kLatest = "latest.fils";
constexpr const char* kFinal = "final.fils";
constexpr const char* kMetrics = "metrics.csv";

Checkpoint to_checkpoint(TrainState& st, const TrainConfig& cfg) {
  Checkpoint c;
  c.config = cfg.to_json();
  c.step = st.step;
  c.epoch = st.epoch;
  c.params = st.params;
  c.teacher = st.teacher;
  c.adam_m = st.optimizer.m();
  c.adam_v = st.optimizer.v();
  c.adam_steps = st.optimizer.steps();
  return c;
}

// Keeps the header and the rows with step <= `last_step`.
void truncate_metrics(const fs::path& file, std::int64_t last_step) {
  std::ifstream in(file);
  std::vector<std::string> keep;
  std::string line;
  while (std::getline(in, line)) {
    if (keep.empty()) {
      keep.push_back(line);
      continue;
    }
    if (line.empty()) continue;
    if (std::stoll(line.substr(0, line.find(','))) <= last_step) keep.push_back(line);
  }
  in.close();
  std::ofstream out(file, std::ios::trunc);
  for (const auto& l : keep) out << l << '\n';
}

// Spot check of the EMA rule on one step per epoch.
void check_ema(const std::vector<float>& before, const TrainState& st, double tau) {
  double worst = 0.0;
  for (std::size_t i = 0; i < before.size(); ++i) {
    const double want = tau * before[i] + (1.0 - tau) * st.params[i];
    worst = std::max(worst, std::abs(want - st.teacher[i]));
  }
  if (worst > 1e-5) spdlog::error("EMA spot check failed: max deviation {:.3g}", worst);
}

}  // namespace

fs::path pretrain(const TrainConfig& config, const PretrainOptions& options) {
  TrainConfig cfg = config;
  cfg.validate();
  const fs::path out_dir(cfg.out_dir);
  const fs::path data_dir = fs::path(cfg.data_dir) / "train";
  Dataset data(data_dir, cfg.max_clips, cfg.patch, cfg.action_area);
  resolve_geometry(cfg, data.frames(), data.height(), data.width());
  const FilsModel model(cfg.model);
  const Schedules sched = make_schedules(cfg, data.size());

  TrainState st = init_state(model, cfg);
  const fs::path metrics_file = out_dir / kMetrics;
  const fs::path latest = out_dir / kLatest;
  if (options.resume && fs::exists(latest)) {
    const Checkpoint c = load_checkpoint(latest);
    if (c.params.size() != st.params.size() || c.teacher.size() != st.teacher.size())
      throw std::runtime_error("checkpoint " + latest.string() + " does not match the configured model");
    st.params = c.params;
    st.teacher = c.teacher;
    st.optimizer.restore(c.adam_m, c.adam_v, c.adam_steps);
    st.step = c.step;
    st.epoch = c.epoch;
    truncate_metrics(metrics_file, st.step);
    spdlog::info("resuming from {} at epoch {}, step {}", latest.string(), st.epoch, st.step);
  } else {
    if (fs::exists(out_dir) && !fs::is_empty(out_dir))
      throw std::runtime_error("output directory " + out_dir.string() +
                               " is not empty; pass --resume to continue a run");
    fs::create_directories(out_dir);
    std::ofstream(out_dir / "config.json") << cfg.to_json().dump(2) << '\n';
    std::ofstream(metrics_file) << kMetricsHeader << '\n';
  }

  std::ofstream metrics(metrics_file, std::ios::app);
  metrics.precision(9);
  spdlog::info("pretraining {} on {} clips: {} epochs x {} steps, batch {}", name(cfg.objective), data.size(),
               cfg.epochs, sched.steps_per_epoch, cfg.batch_size);
  int epochs_run = 0;
  while (st.epoch < cfg.epochs) {
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle(derive_seed(cfg.seed, 0x5EED0000ULL + static_cast<std::uint64_t>(st.epoch)));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(shuffle, i)]);

    double epoch_loss = 0.0;
    for (std::int64_t s = 0; s < sched.steps_per_epoch; ++s) {
      std::vector<Sample> batch;
      for (int k = 0; k < cfg.batch_size; ++k) {
        const std::size_t idx = order[static_cast<std::size_t>(s * cfg.batch_size + k)];
        const std::uint64_t seed = derive_seed(derive_seed(cfg.seed, static_cast<std::uint64_t>(st.step)),
                                               static_cast<std::uint64_t>(k));
        batch.push_back(make_sample(data, idx, cfg, true, seed));
      }
      std::vector<float> before;
      if (s == 0) before = st.teacher;
      const StepMetrics m = pretrain_step(model, st, batch, cfg, sched);
      if (s == 0) check_ema(before, st, m.tau);
      epoch_loss += m.loss;
      metrics << m.step << ',' << st.epoch << ',' << m.lr << ',' << m.tau << ',' << m.loss << ','
              << m.l_act << ',' << m.l_fp << ',' << m.sigma << '\n';
      if (m.step % 10 == 0) metrics.flush();
      spdlog::debug("step {} loss {:.5f} (act {:.5f}, fp {:.5f}) lr {:.3g} tau {:.5f}", m.step, m.loss,
                    m.l_act, m.l_fp, m.lr, m.tau);
    }
    ++st.epoch;
    ++epochs_run;
    metrics.flush();
    spdlog::info("epoch {}/{} mean loss {:.5f}", st.epoch, cfg.epochs,
                 epoch_loss / static_cast<double>(sched.steps_per_epoch));
    const Checkpoint c = to_checkpoint(st, cfg);
    save_checkpoint(latest, c, model.layout());
    if (st.epoch == cfg.epochs) {
      save_checkpoint(out_dir / kFinal, c, model.layout());
    } else if (st.epoch % cfg.checkpoint_every == 0) {
      char file[32];
      std::snprintf(file, sizeof(file), "epoch_%03lld.fils", static_cast<long long>(st.epoch));
      save_checkpoint(out_dir / file, c, model.layout());
    }
    if (options.stop_after_epochs > 0 && epochs_run >= options.stop_after_epochs && st.epoch < cfg.epochs) {
      spdlog::info("stopping after {} epochs as requested", epochs_run);
      return latest;
    }
  }
  return out_dir / kFinal;
}

}  // namespace fils
