#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace fils {

// An RGB clip with per-frame object masks. Pixels are interleaved
// [T, H, W, 3] in [0, 1]; the mask is [T, H, W] and marks object pixels only
// (camera motion never sets it).
struct VideoClip {
  int frames = 0;
  int height = 0;
  int width = 0;
  std::vector<float> pixels;
  std::vector<std::uint8_t> motion_mask;
  std::string caption;
  int action_label = 0;
  std::uint64_t rng_seed = 0;

  std::size_t pixel_index(int t, int y, int x) const {
    return ((static_cast<std::size_t>(t) * height + y) * width + x) * 3;
  }
  std::size_t mask_index(int t, int y, int x) const {
    return (static_cast<std::size_t>(t) * height + y) * width + x;
  }
  const float* frame(int t) const { return pixels.data() + pixel_index(t, 0, 0); }
  bool masked(int t, int y, int x) const { return motion_mask[mask_index(t, y, x)] != 0; }
};

}  // namespace fils
