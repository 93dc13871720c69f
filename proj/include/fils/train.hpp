#pragma once

// Pretraining: config, in-memory dataset with cached action areas and
// random-resized-crop augmentation, one optimisation step, and the resumable
// epoch loop with checkpoints and a metrics log.

#include "fils/action_area.hpp"
#include "fils/checkpoint.hpp"
#include "fils/ema.hpp"
#include "fils/losses.hpp"
#include "fils/model.hpp"
#include "fils/optim.hpp"
#include "fils/synthgen.hpp"
#include "fils/tokenize.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace fils {

enum class Objective { fils, fp_only, actclip_only, mse_baseline };
enum class TeacherInput { full_view, masked_only };

std::string_view name(Objective o);
Objective objective_from_name(std::string_view s);
std::string_view name(TeacherInput t);
TeacherInput teacher_input_from_name(std::string_view s);

bool uses_prediction(Objective o);
bool uses_contrastive(Objective o);

struct AugmentConfig {
  bool random_resized_crop = true;
  double scale_min = 0.6;  // crop area as a fraction of the frame
  double scale_max = 1.0;
  double ratio_min = 0.75;  // crop aspect ratio (width / height)
  double ratio_max = 4.0 / 3.0;
  bool horizontal_flip = false;
};

struct TrainConfig {
  std::string data_dir;
  std::string out_dir;
  int epochs = 30;
  int batch_size = 32;
  int max_clips = 0;  // 0 uses the whole split
  double mask_ratio = 0.9;
  PatchSpec patch;
  ModelConfig model;
  double tau0 = 0.996;
  double tau_e = 0.999;
  double tau_n_fraction = 0.1;  // of the planned optimizer steps
  LossWeights loss;
  TemperatureBounds sigma_bounds;
  double lr_start = 1e-6;
  double lr_peak = 1.5e-4;
  double lr_end = 1e-5;
  double warmup_epochs = 1.0;
  AdamWConfig adamw;
  double grad_clip = 1.0;
  std::uint64_t seed = 0;
  Objective objective = Objective::fils;
  PoolStrategy pooling = PoolStrategy::patch_average;
  TeacherInput teacher_input = TeacherInput::full_view;
  AugmentConfig augment;
  ActionAreaParams action_area;
  int checkpoint_every = 1;  // epochs

  nlohmann::json to_json() const;
  // Every key is required; unknown keys are rejected.
  static TrainConfig from_json(const nlohmann::json& j);
  // Throws std::invalid_argument describing the first violated constraint.
  void validate() const;
};

TrainConfig load_train_config(const std::filesystem::path& file);

// Sets the model's token geometry from the clip geometry and patch spec.
void resolve_geometry(TrainConfig& cfg, int frames, int height, int width);

// One split held in memory as 8-bit pixels.
class Dataset {
 public:
  // Loads up to `max_clips` clips (0: all) and their action areas. Areas are
  // read from <split_dir>/action_areas.json when it matches `params`, and
  // computed and written there otherwise.
  Dataset(const std::filesystem::path& split_dir, int max_clips, PatchSpec patch,
          const ActionAreaParams& params);

  std::size_t size() const { return labels_.size(); }
  int frames() const { return frames_; }
  int height() const { return height_; }
  int width() const { return width_; }
  GridDims grid() const { return grid_; }
  int label(std::size_t i) const { return labels_[i]; }
  const std::string& caption(std::size_t i) const { return captions_[i]; }
  const ActionArea& action_area(std::size_t i) const { return areas_[i]; }
  const synth::DatasetManifest& manifest() const { return manifest_; }

  VideoClip clip(std::size_t i) const;

 private:
  synth::DatasetManifest manifest_;
  int frames_ = 0;
  int height_ = 0;
  int width_ = 0;
  GridDims grid_;
  std::vector<std::vector<std::uint8_t>> pixels_;
  std::vector<std::vector<std::uint8_t>> masks_;
  std::vector<int> labels_;
  std::vector<std::string> captions_;
  std::vector<std::uint64_t> seeds_;
  std::vector<ActionArea> areas_;
};

struct CropBox {
  double y0 = 0.0;
  double x0 = 0.0;
  double h = 0.0;
  double w = 0.0;
};

CropBox sample_crop(int height, int width, const AugmentConfig& aug, Rng& rng);

// Bilinear resample of every frame (and nearest-neighbour of the mask) from
// the crop box back to full resolution.
VideoClip apply_crop(const VideoClip& clip, const CropBox& box);

// A patch of the cropped clip is in the area when the source patch under its
// centre was; falls back to every patch when none is.
ActionArea crop_action_area(const ActionArea& area, const CropBox& box, int height, int width);

struct Sample {
  TokenGrid grid;
  ActionArea area;
  std::string caption;
  int label = 0;
  std::uint64_t seed = 0;  // drives the mask and the single-patch draw
};

Sample make_sample(const Dataset& data, std::size_t index, const TrainConfig& cfg, bool augment,
                   std::uint64_t seed);

struct TrainState {
  std::vector<float> params;
  std::vector<float> teacher;
  AdamW optimizer;
  std::int64_t step = 0;  // optimizer steps completed
  std::int64_t epoch = 0;  // epochs completed
};

TrainState init_state(const FilsModel& model, const TrainConfig& cfg);

struct Schedules {
  LrSchedule lr;
  EmaSchedule ema;
  std::int64_t steps_per_epoch = 0;
};

Schedules make_schedules(const TrainConfig& cfg, std::size_t dataset_size);

struct StepMetrics {
  std::int64_t step = 0;  // value of state.step after the update
  std::int64_t epoch = 0;
  double lr = 0.0;
  double tau = 0.0;
  double loss = 0.0;
  double l_act = 0.0;
  double l_fp = 0.0;
  double sigma = 0.0;
  double grad_norm = 0.0;
};

// Losses and parameter gradients for a batch at the current weights, without
// any update. `grads` is overwritten.
StepMetrics compute_gradients(const FilsModel& model, const TrainState& state,
                              const std::vector<Sample>& batch, const TrainConfig& cfg,
                              std::vector<float>& grads);

// compute_gradients, clipping, AdamW at lr_at(step), then the EMA update at
// tau_at(step). Throws std::runtime_error (listing the batch's sample seeds)
// when the loss is not finite.
StepMetrics pretrain_step(const FilsModel& model, TrainState& state,
                          const std::vector<Sample>& batch, const TrainConfig& cfg,
                          const Schedules& sched);

struct PretrainOptions {
  bool resume = false;
  int stop_after_epochs = 0;  // > 0 ends the run early, as an interrupt would
};

// Runs (or resumes) the configured pretraining; returns the final checkpoint.
// Refuses to reuse a non-empty output directory unless resuming.
std::filesystem::path pretrain(const TrainConfig& cfg, const PretrainOptions& options = {});

inline constexpr std::string_view kMetricsHeader = "step,epoch,lr,tau,loss,l_act,l_fp,sigma";

// Model config stored in a checkpoint header (or config file).
ModelConfig model_config_of(const nlohmann::json& run_config);

}  // namespace fils
