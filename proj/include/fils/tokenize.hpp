#pragma once

// Tube patchification and spatiotemporal tube masking.

#include "fils/tensor.hpp"
#include "fils/video.hpp"

#include <vector>

namespace fils {

struct PatchSpec {
  int spatial = 8;   // patch side in pixels
  int temporal = 2;  // frames per tube

  int raw_dim() const { return spatial * spatial * temporal * 3; }
};

struct GridDims {
  int t = 0;
  int y = 0;
  int x = 0;

  int spatial() const { return y * x; }
  int count() const { return t * y * x; }
  bool operator==(const GridDims&) const = default;
};

struct TubeCoord {
  int t = 0;
  int y = 0;
  int x = 0;
  bool operator==(const TubeCoord&) const = default;
};

// Grid dims for a clip geometry; throws naming the axis that does not divide.
GridDims grid_dims(int frames, int height, int width, const PatchSpec& spec);

// Tokens in (t, y, x) raster order. Each row lays out (dt, py, px, channel).
struct TokenGrid {
  MatF tokens;
  std::vector<TubeCoord> coords;
  GridDims dims;
  PatchSpec spec;

  Index size() const { return tokens.rows(); }
  Index index_of(const TubeCoord& c) const {
    return (static_cast<Index>(c.t) * dims.y + c.y) * dims.x + c.x;
  }
};

TokenGrid tubeify(const VideoClip& clip, const PatchSpec& spec);

// Inverse of tubeify; returns interleaved [T, H, W, 3] pixels.
std::vector<float> untubeify(const TokenGrid& grid);

std::vector<TubeCoord> grid_coords(const GridDims& dims);

// Spatial positions masked for every temporal index.
struct MaskSpec {
  GridDims dims;
  std::vector<std::uint8_t> masked_spatial;  // [y * x]
  double ratio_target = 0.0;

  bool masked(int y, int x) const { return masked_spatial[static_cast<std::size_t>(y) * dims.x + x] != 0; }
  int masked_spatial_count() const;
  int masked_token_count() const { return masked_spatial_count() * dims.t; }
  int visible_token_count() const { return dims.count() - masked_token_count(); }
};

// round(ratio * spatial count), ties up.
int masked_spatial_target(const GridDims& dims, double ratio);

// Uniform random subset of spatial positions of the target size, broadcast
// over time. Throws if the ratio is outside (0, 1) or rounds to an all-masked
// or all-visible mask.
MaskSpec sample_tube_mask(const GridDims& dims, double ratio, Rng& rng);

// Everything visible; only for tests and inference paths.
MaskSpec all_visible_mask(const GridDims& dims);

struct TokenSplit {
  std::vector<Index> visible;
  std::vector<Index> masked;
};

// Partition of token indices in grid order.
TokenSplit split_tokens(const TokenGrid& grid, const MaskSpec& mask);
TokenSplit split_tokens(const GridDims& dims, const MaskSpec& mask);

MatF gather_rows(const MatF& m, const std::vector<Index>& rows);
std::vector<TubeCoord> gather_coords(const std::vector<TubeCoord>& coords,
                                     const std::vector<Index>& rows);

}  // namespace fils
