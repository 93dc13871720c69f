#pragma once

// Downstream evaluation: action-recognition probes and text-video similarity
// heatmaps, plus PNG output for heatmaps and action areas.

#include "fils/action_area.hpp"
#include "fils/model.hpp"
#include "fils/optim.hpp"
#include "fils/train.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace fils {

enum class ProbeMode { linear_probe, finetune };

std::string_view name(ProbeMode m);
ProbeMode probe_mode_from_name(std::string_view s);

struct ProbeConfig {
  ProbeMode mode = ProbeMode::linear_probe;
  int epochs = 20;
  int batch_size = 32;
  double lr = 1e-3;
  double label_smoothing = 0.1;
  AdamWConfig adamw;
  std::uint64_t seed = 0;
  int num_classes = 0;  // 0 takes the count from the dataset manifest
  int max_train = 0;  // 0 uses the whole split
  int max_val = 0;
};

struct ProbeResult {
  ProbeMode mode = ProbeMode::linear_probe;
  double top1 = 0.0;
  std::map<int, double> per_class;  // accuracy per label
  std::map<int, int> per_class_count;
  std::uint64_t seed = 0;
  std::string checkpoint;

  nlohmann::json to_json() const;
};

// Label-smoothed softmax cross-entropy, averaged over rows. Writes the
// gradient w.r.t. the logits when `d_logits` is given.
double smoothed_cross_entropy(const MatD& logits, const std::vector<int>& labels, double smoothing,
                              MatD* d_logits);

// Trains a linear classifier on fixed features (standardised with the
// training-set statistics) and scores it on the validation features.
ProbeResult train_linear_head(const MatF& train_features, const std::vector<int>& train_labels,
                              const MatF& val_features, const std::vector<int>& val_labels,
                              int num_classes, const ProbeConfig& cfg);

// Mean-pooled full-view student features, one row per clip.
MatF clip_features(const FilsModel& model, std::span<const float> params, const Dataset& data,
                   const PatchSpec& patch, int limit = 0);

// Runs the configured probe for the given encoder weights.
ProbeResult probe(const FilsModel& model, std::span<const float> params, const PatchSpec& patch,
                  const Dataset& train, const Dataset& val, const ProbeConfig& cfg);

// Loads the checkpoint and <data_dir>/{train,val}. With `random_init` the
// checkpoint's configuration is used but its weights are replaced by a fresh
// initialisation from the probe seed.
ProbeResult probe_checkpoint(const std::filesystem::path& checkpoint,
                             const std::filesystem::path& data_dir, const ProbeConfig& cfg,
                             bool random_init = false);

struct Heatmap {
  int grid_h = 0;
  int grid_w = 0;
  std::vector<double> values;  // [grid_h * grid_w], in [0, 1]
  std::vector<double> raw;  // mean cosine similarity before normalisation
  std::string clip_id;
  std::string text;

  double at(int y, int x) const { return values[static_cast<std::size_t>(y) * grid_w + x]; }
};

// Cosine similarity between projected patch features and the normalised
// text embedding, averaged over temporal tubes, optionally blurred with a
// Gaussian of `blur_sigma` patches, then min-max normalised (all zeros when
// flat).
Heatmap similarity_heatmap(const FilsModel& model, std::span<const float> params,
                           const VideoClip& clip, const std::string& text, const PatchSpec& patch,
                           double blur_sigma = 0.0);

// Mean heatmap value over patches inside and outside `inside`.
std::pair<double, double> inside_outside_means(const Heatmap& map, const std::vector<std::uint8_t>& inside);

void write_png(const std::filesystem::path& file, int width, int height,
               const std::vector<std::uint8_t>& rgb);

// First frame next to the same frame tinted by the heatmap.
void write_heatmap_png(const std::filesystem::path& file, const Heatmap& map, const VideoClip& clip);

// First frame with selected patches highlighted and the rest dimmed.
void write_action_area_png(const std::filesystem::path& file, const ActionArea& area,
                           const VideoClip& clip);

nlohmann::json action_area_json(const ActionArea& area);

}  // namespace fils
