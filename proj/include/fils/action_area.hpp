#pragma once

// Patch-level motion region detection: block-matching flow, camera-motion
// compensation by the per-frame median displacement, and relative thresholding.

#include "fils/tokenize.hpp"
#include "fils/video.hpp"

#include <utility>
#include <vector>

namespace fils {

struct FlowParams {
  int block = 8;
  int radius = 4;
};

// Displacements are stored per block ([pairs, blocks_y, blocks_x, 2]); every
// pixel of a block carries the block's displacement.
struct FlowField {
  int pairs = 0;
  int height = 0;
  int width = 0;
  int block = 8;
  std::vector<float> flow;

  int blocks_y() const { return height / block; }
  int blocks_x() const { return width / block; }
  std::size_t index(int pair, int by, int bx) const {
    return ((static_cast<std::size_t>(pair) * blocks_y() + by) * blocks_x() + bx) * 2;
  }
  std::pair<float, float> at_block(int pair, int by, int bx) const {
    const std::size_t i = index(pair, by, bx);
    return {flow[i], flow[i + 1]};
  }
  // Per-pixel view of the field.
  std::pair<float, float> at_pixel(int pair, int y, int x) const {
    return at_block(pair, std::min(y / block, blocks_y() - 1), std::min(x / block, blocks_x() - 1));
  }
};

// Throws if the clip has fewer than two frames or the block does not tile it.
FlowField estimate_flow(const VideoClip& clip, const FlowParams& params = {});

// Subtracts the coordinate-wise median block displacement of each frame pair.
FlowField compensate_camera(const FlowField& field);

struct ActionAreaParams {
  double threshold = 0.5;  // relative to the per-clip maximum score
  FlowParams flow;
};

struct ActionArea {
  int grid_h = 0;
  int grid_w = 0;
  std::vector<std::uint8_t> selected;  // [grid_h * grid_w]
  std::vector<double> scores;
  bool fallback = false;  // no patch exceeded the threshold; all are selected

  bool contains(int y, int x) const { return selected[static_cast<std::size_t>(y) * grid_w + x] != 0; }
  int count() const;
  std::vector<std::pair<int, int>> patches() const;
  static ActionArea all(int grid_h, int grid_w);
};

// Scores each spatial patch by its mean compensated flow magnitude over time.
ActionArea detect_action_area(const FlowField& compensated, int grid_h, int grid_w,
                              const ActionAreaParams& params = {});

// estimate_flow -> compensate_camera -> detect_action_area.
ActionArea action_area_of(const VideoClip& clip, int grid_h, int grid_w,
                          const ActionAreaParams& params = {});

// Ground-truth object patches from the clip's motion mask: a patch counts when
// the object covers at least `min_fraction` of its pixels, averaged over frames.
std::vector<std::uint8_t> object_patches(const VideoClip& clip, int grid_h, int grid_w,
                                         double min_fraction);

struct SetAgreement {
  double recall = 0.0;
  double precision = 0.0;
  double jaccard = 0.0;
};

SetAgreement compare_sets(const std::vector<std::uint8_t>& predicted,
                          const std::vector<std::uint8_t>& truth);

}  // namespace fils
