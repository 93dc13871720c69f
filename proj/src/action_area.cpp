#include "fils/action_area.hpp"

#include "fils/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace fils {

namespace {

float median(std::vector<float> v) {
  const std::size_t n = v.size();
  const std::size_t mid = n / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  const float upper = v[mid];
  if (n % 2 == 1) return upper;
  const float lower = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5f * (lower + upper);
}

}  // namespace

FlowField estimate_flow(const VideoClip& clip, const FlowParams& params) {
  if (clip.frames < 2) throw std::invalid_argument("flow needs at least two frames");
  if (params.block <= 0 || clip.height % params.block != 0 || clip.width % params.block != 0)
    throw std::invalid_argument("flow block size must tile the frame");
  FlowField f;
  f.pairs = clip.frames - 1;
  f.height = clip.height;
  f.width = clip.width;
  f.block = params.block;
  f.flow.assign(static_cast<std::size_t>(f.pairs) * f.blocks_y() * f.blocks_x() * 2, 0.0f);
  std::vector<kernels::BlockMatch> matches;
  for (int t = 0; t < f.pairs; ++t) {
    const kernels::FramePair frames{clip.frame(t), clip.frame(t + 1), clip.height, clip.width};
    kernels::omp::block_match(frames, params.block, params.radius, matches);
    for (int by = 0; by < f.blocks_y(); ++by) {
      for (int bx = 0; bx < f.blocks_x(); ++bx) {
        const auto& m = matches[static_cast<std::size_t>(by) * f.blocks_x() + bx];
        const std::size_t i = f.index(t, by, bx);
        f.flow[i] = static_cast<float>(m.dx);
        f.flow[i + 1] = static_cast<float>(m.dy);
      }
    }
  }
  return f;
}

FlowField compensate_camera(const FlowField& field) {
  FlowField out = field;
  const std::size_t blocks = static_cast<std::size_t>(field.blocks_y()) * field.blocks_x();
  std::vector<float> xs(blocks), ys(blocks);
  for (int t = 0; t < field.pairs; ++t) {
    const std::size_t base = field.index(t, 0, 0);
    for (std::size_t b = 0; b < blocks; ++b) {
      xs[b] = field.flow[base + 2 * b];
      ys[b] = field.flow[base + 2 * b + 1];
    }
    const float mx = median(xs);
    const float my = median(ys);
    for (std::size_t b = 0; b < blocks; ++b) {
      out.flow[base + 2 * b] -= mx;
      out.flow[base + 2 * b + 1] -= my;
    }
  }
  return out;
}

int ActionArea::count() const {
  return static_cast<int>(std::count(selected.begin(), selected.end(), 1));
}

std::vector<std::pair<int, int>> ActionArea::patches() const {
  std::vector<std::pair<int, int>> out;
  for (int y = 0; y < grid_h; ++y)
    for (int x = 0; x < grid_w; ++x)
      if (contains(y, x)) out.emplace_back(y, x);
  return out;
}

ActionArea ActionArea::all(int grid_h, int grid_w) {
  ActionArea a;
  a.grid_h = grid_h;
  a.grid_w = grid_w;
  a.selected.assign(static_cast<std::size_t>(grid_h) * grid_w, 1);
  a.scores.assign(a.selected.size(), 0.0);
  a.fallback = true;
  return a;
}

ActionArea detect_action_area(const FlowField& field, int grid_h, int grid_w,
                              const ActionAreaParams& params) {
  if (grid_h <= 0 || grid_w <= 0 || field.height % grid_h != 0 || field.width % grid_w != 0)
    throw std::invalid_argument("patch grid does not tile the flow field");
  if (!(params.threshold >= 0.0 && params.threshold < 1.0))
    throw std::invalid_argument("action-area threshold must be in [0, 1)");
  const int ph = field.height / grid_h;
  const int pw = field.width / grid_w;
  ActionArea a;
  a.grid_h = grid_h;
  a.grid_w = grid_w;
  a.scores.assign(static_cast<std::size_t>(grid_h) * grid_w, 0.0);
  a.selected.assign(a.scores.size(), 0);
  if (field.pairs > 0) {
    for (int gy = 0; gy < grid_h; ++gy) {
      for (int gx = 0; gx < grid_w; ++gx) {
        double total = 0.0;
        for (int t = 0; t < field.pairs; ++t)
          for (int y = gy * ph; y < (gy + 1) * ph; ++y)
            for (int x = gx * pw; x < (gx + 1) * pw; ++x) {
              const auto [dx, dy] = field.at_pixel(t, y, x);
              total += std::hypot(static_cast<double>(dx), static_cast<double>(dy));
            }
        a.scores[static_cast<std::size_t>(gy) * grid_w + gx] =
            total / (static_cast<double>(field.pairs) * ph * pw);
      }
    }
  }
  const double best = *std::max_element(a.scores.begin(), a.scores.end());
  const double cut = params.threshold * best;
  for (std::size_t i = 0; i < a.scores.size(); ++i) a.selected[i] = (best > 0.0 && a.scores[i] > cut);
  if (a.count() == 0) {
    std::fill(a.selected.begin(), a.selected.end(), 1);
    a.fallback = true;
  }
  return a;
}

ActionArea action_area_of(const VideoClip& clip, int grid_h, int grid_w,
                          const ActionAreaParams& params) {
  return detect_action_area(compensate_camera(estimate_flow(clip, params.flow)), grid_h, grid_w,
                            params);
}

std::vector<std::uint8_t> object_patches(const VideoClip& clip, int grid_h, int grid_w,
                                         double min_fraction) {
  const int ph = clip.height / grid_h;
  const int pw = clip.width / grid_w;
  std::vector<std::uint8_t> out(static_cast<std::size_t>(grid_h) * grid_w, 0);
  for (int gy = 0; gy < grid_h; ++gy) {
    for (int gx = 0; gx < grid_w; ++gx) {
      long covered = 0;
      for (int t = 0; t < clip.frames; ++t)
        for (int y = gy * ph; y < (gy + 1) * ph; ++y)
          for (int x = gx * pw; x < (gx + 1) * pw; ++x) covered += clip.masked(t, y, x);
      const double fraction = static_cast<double>(covered) / (static_cast<double>(clip.frames) * ph * pw);
      out[static_cast<std::size_t>(gy) * grid_w + gx] = fraction >= min_fraction && covered > 0;
    }
  }
  return out;
}

SetAgreement compare_sets(const std::vector<std::uint8_t>& predicted,
                          const std::vector<std::uint8_t>& truth) {
  if (predicted.size() != truth.size()) throw std::invalid_argument("set sizes differ");
  double both = 0, pred = 0, real = 0, any = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    both += predicted[i] && truth[i];
    pred += predicted[i] != 0;
    real += truth[i] != 0;
    any += predicted[i] || truth[i];
  }
  SetAgreement s;
  s.recall = real > 0 ? both / real : 1.0;
  s.precision = pred > 0 ? both / pred : 1.0;
  s.jaccard = any > 0 ? both / any : 1.0;
  return s;
}

}  // namespace fils
