#include "fils/eval.hpp"

#include "fils/checkpoint.hpp"

#include <png.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

namespace fils {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view name(ProbeMode m) { return m == ProbeMode::finetune ? "finetune" : "linear-probe"; }

ProbeMode probe_mode_from_name(std::string_view s) {
  if (s == "linear-probe") return ProbeMode::linear_probe;
  if (s == "finetune") return ProbeMode::finetune;
  throw std::invalid_argument("unknown probe mode '" + std::string(s) + "'");
}

json ProbeResult::to_json() const {
  json pc = json::object();
  for (const auto& [label, acc] : per_class)
    pc[std::to_string(label)] = {{"accuracy", acc}, {"count", per_class_count.at(label)}};
  return {{"mode", name(mode)}, {"top1", top1}, {"per_class", pc}, {"seed", seed}, {"checkpoint", checkpoint}};
}

double smoothed_cross_entropy(const MatD& logits, const std::vector<int>& labels, double smoothing,
                              MatD* d_logits) {
  const Index n = logits.rows();
  const Index c = logits.cols();
  if (static_cast<Index>(labels.size()) != n) throw std::invalid_argument("one label per row expected");
  if (d_logits) d_logits->resize(n, c);
  double loss = 0.0;
  const double off = smoothing / static_cast<double>(c);
  for (Index i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= c) throw std::invalid_argument("label " + std::to_string(y) + " outside the head");
    const double mx = logits.row(i).maxCoeff();
    const RowVec<double> e = (logits.row(i).array() - mx).exp().matrix();
    const double z = e.sum();
    const double log_z = std::log(z) + mx;
    for (Index k = 0; k < c; ++k) {
      const double q = off + (k == y ? 1.0 - smoothing : 0.0);
      loss -= q * (logits(i, k) - log_z);
      if (d_logits) (*d_logits)(i, k) = (e(k) / z - q) / static_cast<double>(n);
    }
  }
  return loss / static_cast<double>(n);
}

namespace {

struct Standardizer {
  RowVec<float> mean;
  RowVec<float> inv_std;

  explicit Standardizer(const MatF& f) {
    mean = f.colwise().mean();
    const MatF centered = f.rowwise() - mean;
    const RowVec<float> var = centered.array().square().colwise().mean().matrix();
    inv_std = (var.array() + 1e-6f).rsqrt().matrix();
  }
  MatF apply(const MatF& f) const {
    return ((f.rowwise() - mean).array().rowwise() * inv_std.array()).matrix();
  }
};

struct LinearHead {
  nn::ParamLayout layout;
  nn::Linear fc;
  std::vector<float> params;

  LinearHead(Index in, Index classes, std::uint64_t seed) {
    fc = nn::Linear(layout, "probe", in, classes);
    params.resize(static_cast<std::size_t>(layout.size()));
    Rng rng(seed);
    layout.initialize(params, rng);
  }
};

std::vector<std::size_t> shuffled(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
  return order;
}

ProbeResult score(const MatF& logits, const std::vector<int>& labels, int num_classes, const ProbeConfig& cfg) {
  ProbeResult r;
  r.mode = cfg.mode;
  r.seed = cfg.seed;
  std::map<int, int> hits;
  for (int c = 0; c < num_classes; ++c) {
    hits[c] = 0;
    r.per_class_count[c] = 0;
  }
  int correct = 0;
  for (Index i = 0; i < logits.rows(); ++i) {
    Index pred = 0;
    logits.row(i).maxCoeff(&pred);
    const int y = labels[static_cast<std::size_t>(i)];
    ++r.per_class_count[y];
    if (pred == y) {
      ++hits[y];
      ++correct;
    }
  }
  for (const auto& [c, count] : r.per_class_count)
    r.per_class[c] = count > 0 ? static_cast<double>(hits[c]) / count : 0.0;
  r.top1 = logits.rows() > 0 ? static_cast<double>(correct) / static_cast<double>(logits.rows()) : 0.0;
  return r;
}

std::vector<int> labels_of(const Dataset& d, int limit) {
  const std::size_t n = limit > 0 ? std::min(d.size(), static_cast<std::size_t>(limit)) : d.size();
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = d.label(i);
  return out;
}

int resolve_classes(const ProbeConfig& cfg, const Dataset& train) {
  const int from_data = train.manifest().class_counts.empty()
                            ? synth::kNumClasses
                            : train.manifest().class_counts.rbegin()->first + 1;
  if (cfg.num_classes > 0 && cfg.num_classes < from_data)
    throw std::invalid_argument("probe head has " + std::to_string(cfg.num_classes) +
                                " classes but the dataset uses " + std::to_string(from_data));
  return cfg.num_classes > 0 ? cfg.num_classes : from_data;
}

}  // namespace

ProbeResult train_linear_head(const MatF& train_features, const std::vector<int>& train_labels,
                              const MatF& val_features, const std::vector<int>& val_labels,
                              int num_classes, const ProbeConfig& cfg) {
  const Standardizer norm(train_features);
  const MatF xtr = norm.apply(train_features);
  const MatF xva = norm.apply(val_features);
  LinearHead head(xtr.cols(), num_classes, derive_seed(cfg.seed, 0x4EAD));
  AdamW opt(head.layout, std::vector<bool>(head.layout.slots().size(), false), cfg.adamw);
  const std::size_t n = static_cast<std::size_t>(xtr.rows());
  std::vector<float> grads(head.params.size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = shuffled(n, derive_seed(cfg.seed, 0xE90C + static_cast<std::uint64_t>(epoch)));
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(n, start + static_cast<std::size_t>(cfg.batch_size));
      MatF xb(static_cast<Index>(end - start), xtr.cols());
      std::vector<int> yb;
      for (std::size_t k = start; k < end; ++k) {
        xb.row(static_cast<Index>(k - start)) = xtr.row(static_cast<Index>(order[k]));
        yb.push_back(train_labels[order[k]]);
      }
      const std::span<const float> p(head.params);
      MatF logits;
      head.fc.forward(p, xb, logits);
      MatD d_logits;
      smoothed_cross_entropy(logits.cast<double>(), yb, cfg.label_smoothing, &d_logits);
      std::fill(grads.begin(), grads.end(), 0.0f);
      head.fc.backward<float>(p, grads, xb, d_logits.cast<float>(), nullptr);
      opt.step(head.params, grads, cfg.lr);
    }
  }
  MatF logits;
  head.fc.forward(std::span<const float>(head.params), xva, logits);
  return score(logits, val_labels, num_classes, cfg);
}

MatF clip_features(const FilsModel& model, std::span<const float> params, const Dataset& data,
                   const PatchSpec& patch, int limit) {
  const std::size_t n = limit > 0 ? std::min(data.size(), static_cast<std::size_t>(limit)) : data.size();
  MatF out(static_cast<Index>(n), model.config().encoder.embed_dim);
  for (std::size_t i = 0; i < n; ++i) {
    const TokenGrid grid = tubeify(data.clip(i), patch);
    const MatF f = model.encoder.forward<float>(params, grid.tokens, grid.coords, nullptr);
    out.row(static_cast<Index>(i)) = f.colwise().mean();
  }
  return out;
}

namespace {

ProbeResult finetune(const FilsModel& model, std::span<const float> init, const PatchSpec& patch,
                     const Dataset& train, const Dataset& val, int num_classes, const ProbeConfig& cfg) {
  std::vector<float> params(init.begin(), init.end());
  const Index d = model.config().encoder.embed_dim;
  const Standardizer norm(clip_features(model, params, train, patch, cfg.max_train));
  LinearHead head(d, num_classes, derive_seed(cfg.seed, 0x4EAD));
  std::vector<bool> frozen;
  for (const auto& slot : model.layout().slots()) frozen.push_back(slot.offset >= model.encoder_size());
  AdamW enc_opt(model.layout(), frozen, cfg.adamw);
  AdamW head_opt(head.layout, std::vector<bool>(head.layout.slots().size(), false), cfg.adamw);
  const std::vector<int> labels = labels_of(train, cfg.max_train);
  const std::size_t n = labels.size();
  std::vector<float> enc_grads(params.size());
  std::vector<float> head_grads(head.params.size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = shuffled(n, derive_seed(cfg.seed, 0xF17E + static_cast<std::uint64_t>(epoch)));
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(n, start + static_cast<std::size_t>(cfg.batch_size));
      const std::span<const float> p(params);
      std::vector<TokenGrid> grids;
      std::vector<EncoderCache<float>> caches(end - start);
      MatF pooled(static_cast<Index>(end - start), d);
      std::vector<int> yb;
      for (std::size_t k = start; k < end; ++k) {
        grids.push_back(tubeify(train.clip(order[k]), patch));
        const MatF f = model.encoder.forward(p, grids.back().tokens, grids.back().coords, &caches[k - start]);
        pooled.row(static_cast<Index>(k - start)) = f.colwise().mean();
        yb.push_back(labels[order[k]]);
      }
      const MatF z = norm.apply(pooled);
      MatF logits;
      head.fc.forward(std::span<const float>(head.params), z, logits);
      MatD d_logits;
      epoch_loss += smoothed_cross_entropy(logits.cast<double>(), yb, cfg.label_smoothing, &d_logits);
      std::fill(head_grads.begin(), head_grads.end(), 0.0f);
      std::fill(enc_grads.begin(), enc_grads.end(), 0.0f);
      MatF dz;
      head.fc.backward<float>(head.params, head_grads, z, d_logits.cast<float>(), &dz);
      const MatF d_pooled = (dz.array().rowwise() * norm.inv_std.array()).matrix();
      for (std::size_t k = 0; k < grids.size(); ++k) {
        const Index rows = grids[k].size();
        const MatF df = (d_pooled.row(static_cast<Index>(k)) / static_cast<float>(rows)).replicate(rows, 1);
        model.encoder.backward(p, std::span<float>(enc_grads), grids[k].coords, caches[k], df);
      }
      enc_opt.step(params, enc_grads, cfg.lr);
      head_opt.step(head.params, head_grads, cfg.lr);
    }
    spdlog::info("finetune epoch {}/{} loss {:.4f}", epoch + 1, cfg.epochs,
                 epoch_loss / std::ceil(static_cast<double>(n) / cfg.batch_size));
  }
  const MatF feats = norm.apply(clip_features(model, params, val, patch, cfg.max_val));
  MatF logits;
  head.fc.forward(std::span<const float>(head.params), feats, logits);
  return score(logits, labels_of(val, cfg.max_val), num_classes, cfg);
}

}  // namespace

ProbeResult probe(const FilsModel& model, std::span<const float> params, const PatchSpec& patch,
                  const Dataset& train, const Dataset& val, const ProbeConfig& cfg) {
  const int classes = resolve_classes(cfg, train);
  for (std::size_t i = 0; i < val.size(); ++i)
    if (val.label(i) >= classes)
      throw std::invalid_argument("validation label " + std::to_string(val.label(i)) + " exceeds the head");
  if (cfg.mode == ProbeMode::finetune) return finetune(model, params, patch, train, val, classes, cfg);
  const MatF ftr = clip_features(model, params, train, patch, cfg.max_train);
  const MatF fva = clip_features(model, params, val, patch, cfg.max_val);
  return train_linear_head(ftr, labels_of(train, cfg.max_train), fva, labels_of(val, cfg.max_val), classes, cfg);
}

ProbeResult probe_checkpoint(const fs::path& checkpoint, const fs::path& data_dir, const ProbeConfig& cfg,
                             bool random_init) {
  const Checkpoint ckpt = load_checkpoint(checkpoint);
  const TrainConfig run = TrainConfig::from_json(ckpt.config);
  const FilsModel model(model_config_of(ckpt.config));
  std::vector<float> params = ckpt.params;
  if (random_init) params = model.init_params(derive_seed(cfg.seed, 0x2A2D));
  if (static_cast<Index>(params.size()) != model.size())
    throw std::runtime_error("checkpoint parameters do not match its model config");
  const Dataset train(data_dir / "train", cfg.max_train, run.patch, run.action_area);
  const Dataset val(data_dir / "val", cfg.max_val, run.patch, run.action_area);
  if (train.grid() != model.config().grid)
    throw std::runtime_error("dataset geometry does not match the checkpoint");
  ProbeResult r = probe(model, params, run.patch, train, val, cfg);
  r.checkpoint = random_init ? "random-init:" + checkpoint.string() : checkpoint.string();
  return r;
}

// ---------------------------------------------------------------------------
// Heatmaps

namespace {

std::vector<double> gaussian_blur(const std::vector<double>& v, int h, int w, double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  for (int i = -radius; i <= radius; ++i) k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
  auto pass = [&](const std::vector<double>& in, bool horizontal) {
    std::vector<double> out(in.size());
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double acc = 0.0, wsum = 0.0;
        for (int i = -radius; i <= radius; ++i) {
          const int yy = horizontal ? y : y + i;
          const int xx = horizontal ? x + i : x;
          if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
          const double kw = k[static_cast<std::size_t>(i + radius)];
          acc += kw * in[static_cast<std::size_t>(yy) * w + xx];
          wsum += kw;
        }
        out[static_cast<std::size_t>(y) * w + x] = acc / wsum;
      }
    return out;
  };
  return pass(pass(v, true), false);
}

}  // namespace

Heatmap similarity_heatmap(const FilsModel& model, std::span<const float> params, const VideoClip& clip,
                           const std::string& text, const PatchSpec& patch, double blur_sigma) {
  const TokenGrid grid = tubeify(clip, patch);
  const MatF f = model.encoder.forward<float>(params, grid.tokens, grid.coords, nullptr);
  const MatF zv = project_and_normalize<float>(&model.head, params, f);
  const MatF zt = nn::normalize_rows<float>(model.text.forward<float>(params, text, nullptr));
  Heatmap m;
  m.grid_h = grid.dims.y;
  m.grid_w = grid.dims.x;
  m.text = text;
  m.raw.assign(static_cast<std::size_t>(m.grid_h) * m.grid_w, 0.0);
  for (Index i = 0; i < grid.size(); ++i) {
    const auto& c = grid.coords[static_cast<std::size_t>(i)];
    m.raw[static_cast<std::size_t>(c.y) * m.grid_w + c.x] += static_cast<double>(zv.row(i).dot(zt.row(0)));
  }
  for (double& v : m.raw) v /= grid.dims.t;
  std::vector<double> v = blur_sigma > 0.0 ? gaussian_blur(m.raw, m.grid_h, m.grid_w, blur_sigma) : m.raw;
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double min = *lo;
  const double range = *hi - *lo;
  m.values.assign(v.size(), 0.0);
  if (range > 1e-12)
    for (std::size_t i = 0; i < v.size(); ++i) m.values[i] = (v[i] - min) / range;
  return m;
}

std::pair<double, double> inside_outside_means(const Heatmap& map, const std::vector<std::uint8_t>& inside) {
  double in = 0.0, out = 0.0;
  int n_in = 0, n_out = 0;
  for (std::size_t i = 0; i < map.values.size(); ++i) {
    if (inside[i]) {
      in += map.values[i];
      ++n_in;
    } else {
      out += map.values[i];
      ++n_out;
    }
  }
  return {n_in ? in / n_in : 0.0, n_out ? out / n_out : 0.0};
}

void write_png(const fs::path& file, int width, int height, const std::vector<std::uint8_t>& rgb) {
  if (rgb.size() != static_cast<std::size_t>(width) * height * 3)
    throw std::invalid_argument("write_png: buffer does not match the image size");
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  FILE* fp = std::fopen(file.c_str(), "wb");
  if (!fp) throw std::runtime_error("cannot write " + file.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw std::runtime_error("libpng failed writing " + file.string());
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < height; ++y)
    png_write_row(png, const_cast<png_bytep>(rgb.data() + static_cast<std::size_t>(y) * width * 3));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

namespace {

constexpr int kUpscale = 4;

// Blue to red through green and yellow.
std::array<double, 3> colormap(double v) {
  v = std::clamp(v, 0.0, 1.0);
  const double r = std::clamp(1.5 - std::abs(4.0 * v - 3.0), 0.0, 1.0);
  const double g = std::clamp(1.5 - std::abs(4.0 * v - 2.0), 0.0, 1.0);
  const double b = std::clamp(1.5 - std::abs(4.0 * v - 1.0), 0.0, 1.0);
  return {r, g, b};
}

std::uint8_t byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

}  // namespace

void write_heatmap_png(const fs::path& file, const Heatmap& map, const VideoClip& clip) {
  const int w = clip.width * kUpscale;
  const int h = clip.height * kUpscale;
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(2 * w) * h * 3);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const float* px = &clip.pixels[clip.pixel_index(0, y / kUpscale, x / kUpscale)];
      const int gy = (y / kUpscale) * map.grid_h / clip.height;
      const int gx = (x / kUpscale) * map.grid_w / clip.width;
      const auto c = colormap(map.at(gy, gx));
      std::uint8_t* left = &rgb[(static_cast<std::size_t>(y) * 2 * w + x) * 3];
      std::uint8_t* right = &rgb[(static_cast<std::size_t>(y) * 2 * w + w + x) * 3];
      for (int ch = 0; ch < 3; ++ch) {
        left[ch] = byte(px[ch]);
        right[ch] = byte(0.45 * px[ch] + 0.55 * c[static_cast<std::size_t>(ch)]);
      }
    }
  }
  write_png(file, 2 * w, h, rgb);
}

void write_action_area_png(const fs::path& file, const ActionArea& area, const VideoClip& clip) {
  const int w = clip.width * kUpscale;
  const int h = clip.height * kUpscale;
  const int ph = h / area.grid_h;
  const int pw = w / area.grid_w;
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(w) * h * 3);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const float* px = &clip.pixels[clip.pixel_index(0, y / kUpscale, x / kUpscale)];
      const int gy = y / ph;
      const int gx = x / pw;
      const bool sel = area.contains(gy, gx);
      const bool edge = sel && (y % ph == 0 || x % pw == 0 || y % ph == ph - 1 || x % pw == pw - 1);
      std::uint8_t* o = &rgb[(static_cast<std::size_t>(y) * w + x) * 3];
      for (int ch = 0; ch < 3; ++ch) {
        const double v = sel ? px[ch] : 0.35 * px[ch];
        o[ch] = edge ? (ch == 1 ? 255 : 0) : byte(v);
      }
    }
  }
  write_png(file, w, h, rgb);
}

json action_area_json(const ActionArea& area) {
  json patches = json::array();
  for (const auto& [y, x] : area.patches()) patches.push_back({y, x});
  return {{"grid", {area.grid_h, area.grid_w}},
          {"fallback", area.fallback},
          {"count", area.count()},
          {"patches", patches},
          {"scores", area.scores}};
}

}  // namespace fils
