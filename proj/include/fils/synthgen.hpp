#pragma once

// Procedural moving-shape clips with exact object masks and template captions.

#include "fils/tensor.hpp"
#include "fils/video.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace fils::synth {

enum class Shape { square, circle, triangle };
enum class Color { red, green, blue, yellow, magenta, cyan };
// The motion index is the action label.
enum class Motion { left, right, up, down, grow, shrink, rotate, still };

inline constexpr int kNumShapes = 3;
inline constexpr int kNumColors = 6;
inline constexpr int kNumClasses = 8;

std::string_view name(Shape s);
std::string_view name(Color c);
std::string_view name(Motion m);
Motion motion_from_name(std::string_view s);
Shape shape_from_name(std::string_view s);
Color color_from_name(std::string_view s);

struct SceneSpec {
  Shape shape = Shape::square;
  Color color = Color::red;
  Motion motion = Motion::still;
  double speed = 0.0;  // px/frame: translation, edge growth, or rim speed for rotate
  int start_x = 32;    // object centre at frame 0
  int start_y = 32;
  int size = 12;       // side / diameter at frame 0
  double pan_x = 0.0;  // camera pan, px/frame (scene content moves by +pan)
  double pan_y = 0.0;
  // When set the camera moves back and forth (offset pan * (t mod 2)) instead
  // of drifting linearly; per-frame displacement is the same.
  bool pan_oscillates = false;
  double noise_std = 0.0;
};

// Camera offset at frame t; scene content (background and object) is shifted by it.
std::array<double, 2> camera_offset(const SceneSpec& spec, int t);

struct RenderConfig {
  int frames = 16;
  int height = 64;
  int width = 64;
};

// Throws std::invalid_argument if the object would leave the frame at any
// frame, or if speed is not positive for a moving object.
void validate(const SceneSpec& spec, const RenderConfig& cfg);

// "the <color> <shape> moves <motion>" or "the <color> <shape> stays still".
std::string caption_of(const SceneSpec& spec);

// Every word the caption grammar can emit.
std::vector<std::string> caption_vocabulary();

VideoClip render_clip(const SceneSpec& spec, std::uint64_t seed, const RenderConfig& cfg = {});

// Analytic object centre at frame t in screen coordinates (pixel units).
std::array<double, 2> object_center(const SceneSpec& spec, int t);

struct DatasetConfig {
  int train_clips = 3000;
  int val_clips = 600;
  RenderConfig render;
  std::uint64_t seed = 1234;
  double noise_std = 0.02;
  double pan_probability = 0.5;
  int max_pan = 1;

  nlohmann::json to_json() const;
  static DatasetConfig from_json(const nlohmann::json& j);
};

// Draws a random valid scene for the given class.
SceneSpec sample_scene(Motion motion, const DatasetConfig& cfg, Rng& rng);

enum class Split { train, val };
std::string_view name(Split s);

struct ManifestEntry {
  std::string file;
  int label = 0;
  std::string caption;
  std::string checksum;
  std::uint64_t seed = 0;
  SceneSpec scene;
};

struct DatasetManifest {
  int clip_count = 0;
  std::map<int, int> class_counts;
  std::string config_hash;
  Split split = Split::train;
  nlohmann::json config;
  std::vector<ManifestEntry> entries;

  nlohmann::json to_json() const;
  static DatasetManifest from_json(const nlohmann::json& j);
};

inline constexpr std::string_view kManifestName = "manifest.json";

// Writes <out_dir>/train and <out_dir>/val (when val_clips > 0). Refuses to
// overwrite an existing manifest unless `force`.
std::vector<DatasetManifest> generate_dataset(const DatasetConfig& cfg,
                                              const std::filesystem::path& out_dir,
                                              bool force = false);

DatasetManifest generate_split(const DatasetConfig& cfg, Split split, int clip_count,
                               const std::filesystem::path& split_dir, bool force = false);

DatasetManifest load_manifest(const std::filesystem::path& split_dir);

// Binary clip container, see README for the layout.
void write_clip(const VideoClip& clip, const std::filesystem::path& file);
VideoClip read_clip(const std::filesystem::path& file);

std::string fnv1a_hex(std::string_view bytes);
std::string file_checksum(const std::filesystem::path& file);

}  // namespace fils::synth
