#include "fils/tokenize.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace fils {

GridDims grid_dims(int frames, int height, int width, const PatchSpec& spec) {
  if (spec.spatial <= 0 || spec.temporal <= 0)
    throw std::invalid_argument("patch sizes must be positive");
  auto check = [](int n, int p, const char* axis) {
    if (n <= 0 || n % p != 0)
      throw std::invalid_argument(std::string("patch size ") + std::to_string(p) +
                                  " does not divide " + axis + " = " + std::to_string(n));
  };
  check(frames, spec.temporal, "T (frames)");
  check(height, spec.spatial, "H (height)");
  check(width, spec.spatial, "W (width)");
  return {frames / spec.temporal, height / spec.spatial, width / spec.spatial};
}

std::vector<TubeCoord> grid_coords(const GridDims& dims) {
  std::vector<TubeCoord> coords;
  coords.reserve(static_cast<std::size_t>(dims.count()));
  for (int t = 0; t < dims.t; ++t)
    for (int y = 0; y < dims.y; ++y)
      for (int x = 0; x < dims.x; ++x) coords.push_back({t, y, x});
  return coords;
}

TokenGrid tubeify(const VideoClip& clip, const PatchSpec& spec) {
  TokenGrid g;
  g.spec = spec;
  g.dims = grid_dims(clip.frames, clip.height, clip.width, spec);
  g.coords = grid_coords(g.dims);
  const int s = spec.spatial;
  g.tokens.resize(g.dims.count(), spec.raw_dim());
  for (Index i = 0; i < g.size(); ++i) {
    const TubeCoord c = g.coords[static_cast<std::size_t>(i)];
    float* row = g.tokens.row(i).data();
    for (int dt = 0; dt < spec.temporal; ++dt) {
      for (int py = 0; py < s; ++py) {
        const float* src = clip.pixels.data() +
                           clip.pixel_index(c.t * spec.temporal + dt, c.y * s + py, c.x * s);
        std::copy(src, src + 3 * s, row + ((dt * s + py) * s) * 3);
      }
    }
  }
  return g;
}

std::vector<float> untubeify(const TokenGrid& g) {
  const int s = g.spec.spatial;
  const int frames = g.dims.t * g.spec.temporal;
  const int height = g.dims.y * s;
  const int width = g.dims.x * s;
  std::vector<float> pixels(static_cast<std::size_t>(frames) * height * width * 3);
  for (Index i = 0; i < g.size(); ++i) {
    const TubeCoord c = g.coords[static_cast<std::size_t>(i)];
    const float* row = g.tokens.row(i).data();
    for (int dt = 0; dt < g.spec.temporal; ++dt) {
      for (int py = 0; py < s; ++py) {
        const std::size_t dst =
            ((static_cast<std::size_t>(c.t * g.spec.temporal + dt) * height + c.y * s + py) *
                 width +
             c.x * s) *
            3;
        std::copy(row + ((dt * s + py) * s) * 3, row + ((dt * s + py) * s + s) * 3,
                  pixels.data() + dst);
      }
    }
  }
  return pixels;
}

int MaskSpec::masked_spatial_count() const {
  return static_cast<int>(std::count(masked_spatial.begin(), masked_spatial.end(), 1));
}

int masked_spatial_target(const GridDims& dims, double ratio) {
  return static_cast<int>(std::floor(ratio * dims.spatial() + 0.5));
}

MaskSpec sample_tube_mask(const GridDims& dims, double ratio, Rng& rng) {
  if (!(ratio > 0.0 && ratio < 1.0))
    throw std::invalid_argument("mask ratio must lie in (0, 1), got " + std::to_string(ratio));
  const int total = dims.spatial();
  const int count = masked_spatial_target(dims, ratio);
  if (count <= 0 || count >= total)
    throw std::invalid_argument("mask ratio " + std::to_string(ratio) + " on " +
                                std::to_string(total) +
                                " spatial positions leaves no masked or no visible tube");
  std::vector<int> order(static_cast<std::size_t>(total));
  std::iota(order.begin(), order.end(), 0);
  // partial Fisher-Yates: the first `count` entries are a uniform subset
  for (int i = 0; i < count; ++i) {
    const auto j = i + static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(total - i)));
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
  }
  MaskSpec m;
  m.dims = dims;
  m.ratio_target = ratio;
  m.masked_spatial.assign(static_cast<std::size_t>(total), 0);
  for (int i = 0; i < count; ++i) m.masked_spatial[static_cast<std::size_t>(order[i])] = 1;
  return m;
}

MaskSpec all_visible_mask(const GridDims& dims) {
  MaskSpec m;
  m.dims = dims;
  m.masked_spatial.assign(static_cast<std::size_t>(dims.spatial()), 0);
  return m;
}

TokenSplit split_tokens(const GridDims& dims, const MaskSpec& mask) {
  if (!(mask.dims.y == dims.y && mask.dims.x == dims.x))
    throw std::invalid_argument("mask spatial dims do not match the token grid");
  TokenSplit out;
  Index i = 0;
  for (int t = 0; t < dims.t; ++t)
    for (int y = 0; y < dims.y; ++y)
      for (int x = 0; x < dims.x; ++x, ++i) (mask.masked(y, x) ? out.masked : out.visible).push_back(i);
  return out;
}

TokenSplit split_tokens(const TokenGrid& grid, const MaskSpec& mask) {
  return split_tokens(grid.dims, mask);
}

MatF gather_rows(const MatF& m, const std::vector<Index>& rows) {
  MatF out(static_cast<Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = m.row(rows[i]);
  return out;
}

std::vector<TubeCoord> gather_coords(const std::vector<TubeCoord>& coords,
                                     const std::vector<Index>& rows) {
  std::vector<TubeCoord> out;
  out.reserve(rows.size());
  for (Index r : rows) out.push_back(coords[static_cast<std::size_t>(r)]);
  return out;
}

}  // namespace fils
