#include "fils/synthgen.hpp"

#include "fils/json_keys.hpp"

#include <spdlog/spdlog.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <stdexcept>

namespace fils::synth {

namespace fs = std::filesystem;

namespace {

constexpr std::array<std::string_view, kNumShapes> kShapeNames{"square", "circle", "triangle"};
constexpr std::array<std::string_view, kNumColors> kColorNames{"red",     "green",   "blue",
                                                               "yellow",  "magenta", "cyan"};
constexpr std::array<std::string_view, kNumClasses> kMotionNames{
    "left", "right", "up", "down", "grow", "shrink", "rotate", "still"};

constexpr std::array<std::array<float, 3>, kNumColors> kPalette{{
    {0.90f, 0.15f, 0.10f},
    {0.15f, 0.80f, 0.20f},
    {0.15f, 0.30f, 0.95f},
    {0.95f, 0.90f, 0.15f},
    {0.90f, 0.20f, 0.85f},
    {0.15f, 0.85f, 0.90f},
}};

// Object texture cells: 1 px cartesian texels plus polar cells fine enough
// that rotating or rescaling by the minimum sampled rate always crosses a
// cell boundary.
constexpr double kAngularCell = 2.0 * std::numbers::pi / 96.0;
constexpr double kLogRadialCell = 0.025;
constexpr int kBackgroundLattice = 4;

constexpr char kClipMagic[8] = {'F', 'I', 'L', 'S', 'C', 'L', 'I', 'P'};
constexpr std::uint32_t kClipVersion = 1;

template <std::size_t N>
std::size_t lookup(const std::array<std::string_view, N>& names, std::string_view s,
                   const char* what) {
  for (std::size_t i = 0; i < N; ++i)
    if (names[i] == s) return i;
  throw std::invalid_argument(std::string("unknown ") + what + ": " + std::string(s));
}

std::uint64_t mix(std::uint64_t h, std::int64_t v) {
  return derive_seed(h, static_cast<std::uint64_t>(v));
}

double hash01(std::uint64_t h) { return static_cast<double>(h >> 11) * 0x1.0p-53; }

bool is_translation(Motion m) {
  return m == Motion::left || m == Motion::right || m == Motion::up || m == Motion::down;
}

double size_at(const SceneSpec& s, int t) {
  switch (s.motion) {
    case Motion::grow:
      return s.size + s.speed * t;
    case Motion::shrink:
      return s.size - s.speed * t;
    default:
      return s.size;
  }
}

double angle_at(const SceneSpec& s, int t) {
  if (s.motion != Motion::rotate) return 0.0;
  return s.speed / (0.5 * s.size) * t;
}

// Radius of a circle around the centre that contains the shape at any rotation.
double bound_radius(Shape shape, double size) {
  return shape == Shape::square ? 0.5 * size * std::numbers::sqrt2 : 0.5 * size;
}

bool inside_shape(Shape shape, double qx, double qy, double half) {
  switch (shape) {
    case Shape::square:
      return std::abs(qx) <= half && std::abs(qy) <= half;
    case Shape::circle:
      return qx * qx + qy * qy <= half * half;
    case Shape::triangle: {
      // equilateral, circumradius `half`, apex pointing up (-y)
      const double in = 0.5 * half;
      constexpr double c = 0.8660254037844386;
      return qy <= in && (-c * qx - 0.5 * qy) <= in && (c * qx - 0.5 * qy) <= in;
    }
  }
  return false;
}

float background(std::uint64_t seed, double wx, double wy) {
  const double gx = wx / kBackgroundLattice;
  const double gy = wy / kBackgroundLattice;
  const auto ix = static_cast<std::int64_t>(std::floor(gx));
  const auto iy = static_cast<std::int64_t>(std::floor(gy));
  const double fx = gx - static_cast<double>(ix);
  const double fy = gy - static_cast<double>(iy);
  auto lattice = [&](std::int64_t x, std::int64_t y) { return hash01(mix(mix(seed, x), y)); };
  const double v = (1 - fy) * ((1 - fx) * lattice(ix, iy) + fx * lattice(ix + 1, iy)) +
                   fy * ((1 - fx) * lattice(ix, iy + 1) + fx * lattice(ix + 1, iy + 1));
  return static_cast<float>(0.25 + 0.35 * v);
}

std::array<float, 3> texel(std::uint64_t seed, Color color, double qx, double qy) {
  const double r = std::sqrt(qx * qx + qy * qy);
  std::uint64_t h = mix(seed, static_cast<std::int64_t>(std::floor(qx)));
  h = mix(h, static_cast<std::int64_t>(std::floor(qy)));
  h = mix(h, static_cast<std::int64_t>(std::floor(std::atan2(qy, qx) / kAngularCell)));
  h = mix(h, static_cast<std::int64_t>(std::floor(std::log(r + 1e-9) / kLogRadialCell)));
  const auto& base = kPalette[static_cast<std::size_t>(color)];
  const double shade = 0.55 + 0.45 * hash01(h);
  std::array<float, 3> out{};
  for (int c = 0; c < 3; ++c) {
    h = mix(h, c + 1);
    const double v = base[static_cast<std::size_t>(c)] * shade + 0.2 * (hash01(h) - 0.5);
    out[static_cast<std::size_t>(c)] = static_cast<float>(std::clamp(v, 0.0, 1.0));
  }
  return out;
}

float quantize(double v) {
  const double q = std::round(std::clamp(v, 0.0, 1.0) * 255.0);
  return static_cast<float>(q) / 255.0f;
}

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

nlohmann::json scene_to_json(const SceneSpec& s) {
  return {{"shape", name(s.shape)}, {"color", name(s.color)},   {"motion", name(s.motion)},
          {"speed", s.speed},       {"start_x", s.start_x},     {"start_y", s.start_y},
          {"size", s.size},         {"pan_x", s.pan_x},         {"pan_y", s.pan_y},         {"pan_oscillates", s.pan_oscillates},
          {"noise_std", s.noise_std}};
}

SceneSpec scene_from_json(const nlohmann::json& j) {
  SceneSpec s;
  s.shape = shape_from_name(j.at("shape").get<std::string>());
  s.color = color_from_name(j.at("color").get<std::string>());
  s.motion = motion_from_name(j.at("motion").get<std::string>());
  s.speed = j.at("speed").get<double>();
  s.start_x = j.at("start_x").get<int>();
  s.start_y = j.at("start_y").get<int>();
  s.size = j.at("size").get<int>();
  s.pan_x = j.at("pan_x").get<double>();
  s.pan_y = j.at("pan_y").get<double>();
  s.pan_oscillates = j.value("pan_oscillates", false);
  s.noise_std = j.at("noise_std").get<double>();
  return s;
}

}  // namespace

std::string_view name(Shape s) { return kShapeNames[static_cast<std::size_t>(s)]; }
std::string_view name(Color c) { return kColorNames[static_cast<std::size_t>(c)]; }
std::string_view name(Motion m) { return kMotionNames[static_cast<std::size_t>(m)]; }
std::string_view name(Split s) { return s == Split::train ? "train" : "val"; }

Motion motion_from_name(std::string_view s) {
  return static_cast<Motion>(lookup(kMotionNames, s, "motion"));
}
Shape shape_from_name(std::string_view s) {
  return static_cast<Shape>(lookup(kShapeNames, s, "shape"));
}
Color color_from_name(std::string_view s) {
  return static_cast<Color>(lookup(kColorNames, s, "color"));
}

std::array<double, 2> camera_offset(const SceneSpec& s, int t) {
  const double k = s.pan_oscillates ? static_cast<double>(t % 2) : static_cast<double>(t);
  return {s.pan_x * k, s.pan_y * k};
}

std::array<double, 2> object_center(const SceneSpec& s, int t) {
  double dx = 0.0;
  double dy = 0.0;
  switch (s.motion) {
    case Motion::left:
      dx = -s.speed;
      break;
    case Motion::right:
      dx = s.speed;
      break;
    case Motion::up:
      dy = -s.speed;
      break;
    case Motion::down:
      dy = s.speed;
      break;
    default:
      break;
  }
  const auto [ox, oy] = camera_offset(s, t);
  return {s.start_x + dx * t + ox, s.start_y + dy * t + oy};
}

void validate(const SceneSpec& s, const RenderConfig& cfg) {
  if (cfg.frames < 1 || cfg.height < 1 || cfg.width < 1)
    throw std::invalid_argument("render config must have positive dimensions");
  if (s.size < 2) throw std::invalid_argument("object size must be at least 2 px");
  if (!(s.noise_std >= 0.0)) throw std::invalid_argument("noise_std must be non-negative");
  if (s.motion != Motion::still && !(s.speed > 0.0))
    throw std::invalid_argument("speed must be positive for motion " +
                                std::string(name(s.motion)));
  for (int t = 0; t < cfg.frames; ++t) {
    const double size = size_at(s, t);
    if (size < 2.0)
      throw std::invalid_argument("object shrinks below 2 px at frame " + std::to_string(t));
    const auto [cx, cy] = object_center(s, t);
    const double r = bound_radius(s.shape, size);
    if (cx - r < 0.0 || cy - r < 0.0 || cx + r > cfg.width || cy + r > cfg.height)
      throw std::invalid_argument("trajectory leaves the frame at frame " + std::to_string(t));
  }
}

std::string caption_of(const SceneSpec& s) {
  std::string out = "the " + std::string(name(s.color)) + " " + std::string(name(s.shape));
  if (s.motion == Motion::still) return out + " stays still";
  return out + " moves " + std::string(name(s.motion));
}

std::vector<std::string> caption_vocabulary() {
  std::vector<std::string> words{"the", "moves", "stays"};
  for (auto c : kColorNames) words.emplace_back(c);
  for (auto s : kShapeNames) words.emplace_back(s);
  for (auto m : kMotionNames) words.emplace_back(m);
  return words;
}

VideoClip render_clip(const SceneSpec& spec, std::uint64_t seed, const RenderConfig& cfg) {
  validate(spec, cfg);
  VideoClip clip;
  clip.frames = cfg.frames;
  clip.height = cfg.height;
  clip.width = cfg.width;
  clip.caption = caption_of(spec);
  clip.action_label = static_cast<int>(spec.motion);
  clip.rng_seed = seed;
  clip.pixels.resize(static_cast<std::size_t>(cfg.frames) * cfg.height * cfg.width * 3);
  clip.motion_mask.assign(static_cast<std::size_t>(cfg.frames) * cfg.height * cfg.width, 0);

  const std::uint64_t bg_seed = derive_seed(seed, 1);
  const std::uint64_t tex_seed = derive_seed(seed, 2);
  Rng noise_rng(derive_seed(seed, 3));
  const double half = 0.5 * spec.size;

  for (int t = 0; t < cfg.frames; ++t) {
    const auto [ox, oy] = camera_offset(spec, t);
    const auto [cx, cy] = object_center(spec, t);
    const double scale = size_at(spec, t) / spec.size;
    const double theta = angle_at(spec, t);
    const double ct = std::cos(theta);
    const double st = std::sin(theta);
    for (int y = 0; y < cfg.height; ++y) {
      for (int x = 0; x < cfg.width; ++x) {
        const double px = x + 0.5;
        const double py = y + 0.5;
        const double dx = px - cx;
        const double dy = py - cy;
        const double qx = (ct * dx + st * dy) / scale;
        const double qy = (-st * dx + ct * dy) / scale;
        std::array<float, 3> rgb;
        if (inside_shape(spec.shape, qx, qy, half)) {
          rgb = texel(tex_seed, spec.color, qx, qy);
          clip.motion_mask[clip.mask_index(t, y, x)] = 1;
        } else {
          const float g = background(bg_seed, px - ox, py - oy);
          rgb = {g, g, g};
        }
        float* out = clip.pixels.data() + clip.pixel_index(t, y, x);
        for (int c = 0; c < 3; ++c) {
          double v = rgb[static_cast<std::size_t>(c)];
          if (spec.noise_std > 0.0) v += spec.noise_std * normal01(noise_rng);
          out[c] = quantize(v);
        }
      }
    }
  }
  return clip;
}

nlohmann::json DatasetConfig::to_json() const {
  return {{"train_clips", train_clips},
          {"val_clips", val_clips},
          {"frames", render.frames},
          {"height", render.height},
          {"width", render.width},
          {"seed", seed},
          {"noise_std", noise_std},
          {"pan_probability", pan_probability},
          {"max_pan", max_pan}};
}

DatasetConfig DatasetConfig::from_json(const nlohmann::json& j) {
  check_keys(j, "", {"train_clips", "val_clips", "frames", "height", "width", "seed", "noise_std",
                     "pan_probability", "max_pan"});
  DatasetConfig c;
  c.train_clips = j.at("train_clips").get<int>();
  c.val_clips = j.at("val_clips").get<int>();
  c.render.frames = j.at("frames").get<int>();
  c.render.height = j.at("height").get<int>();
  c.render.width = j.at("width").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.noise_std = j.at("noise_std").get<double>();
  c.pan_probability = j.at("pan_probability").get<double>();
  c.max_pan = j.at("max_pan").get<int>();
  return c;
}

SceneSpec sample_scene(Motion motion, const DatasetConfig& cfg, Rng& rng) {
  auto uniform_int = [&](int lo, int hi) {
    return lo + static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(hi - lo + 1)));
  };
  for (int attempt = 0; attempt < 1000; ++attempt) {
    SceneSpec s;
    s.motion = motion;
    s.shape = static_cast<Shape>(uniform_index(rng, kNumShapes));
    s.color = static_cast<Color>(uniform_index(rng, kNumColors));
    s.noise_std = cfg.noise_std;
    if (uniform01(rng) < cfg.pan_probability) {
      s.pan_x = uniform_int(-cfg.max_pan, cfg.max_pan);
      s.pan_y = uniform_int(-cfg.max_pan, cfg.max_pan);
    }
    switch (motion) {
      case Motion::left:
      case Motion::right:
      case Motion::up:
      case Motion::down:
        s.speed = uniform_int(1, 2);
        s.size = uniform_int(10, 16);
        break;
      case Motion::grow:
        s.speed = 1.0;
        s.size = uniform_int(8, 12);
        break;
      case Motion::shrink:
        s.speed = 1.0;
        s.size = uniform_int(22, 26);
        break;
      case Motion::rotate:
        s.speed = 1.0 + uniform01(rng);
        s.size = uniform_int(14, 22);
        break;
      case Motion::still:
        s.speed = 0.0;
        s.size = uniform_int(10, 18);
        break;
    }
    if (is_translation(motion)) {
      // the object must actually move on screen
      s.start_x = s.start_y = 0;
      const auto [vx, vy] = object_center(s, 1);
      if (vx == 0.0 && vy == 0.0) continue;
    }
    // Feasible start positions keep every frame inside the image.
    SceneSpec probe = s;
    probe.start_x = probe.start_y = 0;
    double lo_x = -1e9, hi_x = 1e9, lo_y = -1e9, hi_y = 1e9;
    for (int t = 0; t < cfg.render.frames; ++t) {
      const auto [dx, dy] = object_center(probe, t);
      const double r = bound_radius(s.shape, size_at(s, t));
      lo_x = std::max(lo_x, r - dx);
      hi_x = std::min(hi_x, cfg.render.width - r - dx);
      lo_y = std::max(lo_y, r - dy);
      hi_y = std::min(hi_y, cfg.render.height - r - dy);
    }
    const int x0 = static_cast<int>(std::ceil(lo_x));
    const int x1 = static_cast<int>(std::floor(hi_x));
    const int y0 = static_cast<int>(std::ceil(lo_y));
    const int y1 = static_cast<int>(std::floor(hi_y));
    if (x0 > x1 || y0 > y1) continue;
    s.start_x = uniform_int(x0, x1);
    s.start_y = uniform_int(y0, y1);
    return s;
  }
  throw std::runtime_error("could not sample a valid scene for motion " +
                           std::string(name(motion)));
}

nlohmann::json DatasetManifest::to_json() const {
  nlohmann::json counts = nlohmann::json::object();
  for (const auto& [label, n] : class_counts) counts[std::to_string(label)] = n;
  nlohmann::json list = nlohmann::json::array();
  for (const auto& e : entries) {
    list.push_back({{"file", e.file},
                    {"label", e.label},
                    {"caption", e.caption},
                    {"checksum", e.checksum},
                    {"seed", e.seed},
                    {"scene", scene_to_json(e.scene)}});
  }
  return {{"format", "fils-dataset"},
          {"version", 1},
          {"split", name(split)},
          {"clip_count", clip_count},
          {"num_classes", kNumClasses},
          {"class_counts", counts},
          {"config_hash", config_hash},
          {"config", config},
          {"entries", list}};
}

DatasetManifest DatasetManifest::from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "fils-dataset")
    throw std::runtime_error("not a fils dataset manifest");
  DatasetManifest m;
  m.clip_count = j.at("clip_count").get<int>();
  m.split = j.at("split").get<std::string>() == "val" ? Split::val : Split::train;
  m.config_hash = j.at("config_hash").get<std::string>();
  m.config = j.at("config");
  for (const auto& [label, n] : j.at("class_counts").items())
    m.class_counts[std::stoi(label)] = n.get<int>();
  for (const auto& e : j.at("entries")) {
    ManifestEntry entry;
    entry.file = e.at("file").get<std::string>();
    entry.label = e.at("label").get<int>();
    entry.caption = e.at("caption").get<std::string>();
    entry.checksum = e.at("checksum").get<std::string>();
    entry.seed = e.at("seed").get<std::uint64_t>();
    entry.scene = scene_from_json(e.at("scene"));
    if (entry.label < 0 || entry.label >= kNumClasses)
      throw std::runtime_error("manifest label out of range: " + std::to_string(entry.label));
    m.entries.push_back(std::move(entry));
  }
  if (static_cast<int>(m.entries.size()) != m.clip_count)
    throw std::runtime_error("manifest entry count does not match clip_count");
  return m;
}

DatasetManifest generate_split(const DatasetConfig& cfg, Split split, int clip_count,
                               const fs::path& split_dir, bool force) {
  if (clip_count <= 0)
    throw std::invalid_argument("clip_count must be positive for split " +
                                std::string(name(split)));
  const fs::path manifest_path = split_dir / kManifestName;
  if (fs::exists(manifest_path) && !force)
    throw std::runtime_error("refusing to overwrite existing manifest " +
                             manifest_path.string() + " (use --force)");
  fs::create_directories(split_dir);

  DatasetManifest m;
  m.split = split;
  m.clip_count = clip_count;
  m.config = cfg.to_json();
  m.config_hash = fnv1a_hex(m.config.dump());
  m.entries.resize(static_cast<std::size_t>(clip_count));

  const std::uint64_t split_seed = derive_seed(cfg.seed, split == Split::train ? 11 : 13);
  std::string failure;
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < clip_count; ++i) {
    try {
      const std::uint64_t clip_seed = derive_seed(split_seed, static_cast<std::uint64_t>(i));
      Rng rng(derive_seed(clip_seed, 99));
      const auto motion = static_cast<Motion>(i % kNumClasses);
      const SceneSpec scene = sample_scene(motion, cfg, rng);
      const VideoClip clip = render_clip(scene, clip_seed, cfg.render);
      char file[32];
      std::snprintf(file, sizeof(file), "clip_%05d.bin", i);
      write_clip(clip, split_dir / file);
      auto& e = m.entries[static_cast<std::size_t>(i)];
      e.file = file;
      e.label = clip.action_label;
      e.caption = clip.caption;
      e.checksum = file_checksum(split_dir / file);
      e.seed = clip_seed;
      e.scene = scene;
    } catch (const std::exception& ex) {
#pragma omp critical
      failure = ex.what();
    }
  }
  if (!failure.empty()) throw std::runtime_error("clip generation failed: " + failure);
  for (const auto& e : m.entries) ++m.class_counts[e.label];

  std::ofstream out(manifest_path);
  out << m.to_json().dump(2) << '\n';
  if (!out) throw std::runtime_error("failed to write " + manifest_path.string());
  spdlog::info("wrote {} {} clips to {}", clip_count, name(split), split_dir.string());
  return m;
}

std::vector<DatasetManifest> generate_dataset(const DatasetConfig& cfg, const fs::path& out_dir,
                                              bool force) {
  if (cfg.train_clips <= 0) throw std::invalid_argument("train_clips must be positive");
  if (cfg.val_clips < 0) throw std::invalid_argument("val_clips must be non-negative");
  std::vector<DatasetManifest> out;
  // check both splits before writing anything
  for (auto split : {Split::train, Split::val}) {
    const fs::path p = out_dir / name(split) / kManifestName;
    if (fs::exists(p) && !force)
      throw std::runtime_error("refusing to overwrite existing manifest " + p.string() +
                               " (use --force)");
  }
  out.push_back(generate_split(cfg, Split::train, cfg.train_clips, out_dir / "train", force));
  if (cfg.val_clips > 0)
    out.push_back(generate_split(cfg, Split::val, cfg.val_clips, out_dir / "val", force));
  return out;
}

DatasetManifest load_manifest(const fs::path& split_dir) {
  const fs::path p = split_dir / kManifestName;
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot open manifest " + p.string());
  return DatasetManifest::from_json(nlohmann::json::parse(in));
}

void write_clip(const VideoClip& clip, const fs::path& file) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  auto put = [&](const auto& v) { out.write(reinterpret_cast<const char*>(&v), sizeof(v)); };
  out.write(kClipMagic, sizeof(kClipMagic));
  put(kClipVersion);
  put(static_cast<std::uint32_t>(clip.frames));
  put(static_cast<std::uint32_t>(clip.height));
  put(static_cast<std::uint32_t>(clip.width));
  put(static_cast<std::int32_t>(clip.action_label));
  put(static_cast<std::uint64_t>(clip.rng_seed));
  put(static_cast<std::uint32_t>(clip.caption.size()));
  out.write(clip.caption.data(), static_cast<std::streamsize>(clip.caption.size()));
  std::vector<std::uint8_t> bytes(clip.pixels.size());
  for (std::size_t i = 0; i < bytes.size(); ++i)
    bytes[i] = static_cast<std::uint8_t>(std::lround(clip.pixels[i] * 255.0f));
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  out.write(reinterpret_cast<const char*>(clip.motion_mask.data()),
            static_cast<std::streamsize>(clip.motion_mask.size()));
  if (!out) throw std::runtime_error("failed writing " + file.string());
}

VideoClip read_clip(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open clip " + file.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kClipMagic, sizeof(magic)) != 0)
    throw std::runtime_error(file.string() + " is not a fils clip");
  auto get = [&](auto& v) { in.read(reinterpret_cast<char*>(&v), sizeof(v)); };
  std::uint32_t version = 0, frames = 0, height = 0, width = 0, caption_len = 0;
  std::int32_t label = 0;
  std::uint64_t seed = 0;
  get(version);
  if (version != kClipVersion)
    throw std::runtime_error("unsupported clip version " + std::to_string(version));
  get(frames);
  get(height);
  get(width);
  get(label);
  get(seed);
  get(caption_len);
  VideoClip clip;
  clip.frames = static_cast<int>(frames);
  clip.height = static_cast<int>(height);
  clip.width = static_cast<int>(width);
  clip.action_label = label;
  clip.rng_seed = seed;
  clip.caption.resize(caption_len);
  in.read(clip.caption.data(), caption_len);
  const std::size_t n = static_cast<std::size_t>(frames) * height * width;
  std::vector<std::uint8_t> bytes(n * 3);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  clip.pixels.resize(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) clip.pixels[i] = static_cast<float>(bytes[i]) / 255.0f;
  clip.motion_mask.resize(n);
  in.read(reinterpret_cast<char*>(clip.motion_mask.data()), static_cast<std::streamsize>(n));
  if (!in) throw std::runtime_error("truncated clip file " + file.string());
  return clip;
}

std::string fnv1a_hex(std::string_view bytes) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a(bytes)));
  return buf;
}

std::string file_checksum(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + file.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return fnv1a_hex(bytes);
}

}  // namespace fils::synth
