#include "fils/kernels.hpp"

#include <algorithm>
#include <cstdlib>

namespace fils::kernels {

std::vector<std::pair<int, int>> search_order(int radius) {
  std::vector<std::pair<int, int>> order;
  for (int dy = -radius; dy <= radius; ++dy)
    for (int dx = -radius; dx <= radius; ++dx) order.emplace_back(dx, dy);
  std::stable_sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
    return std::abs(a.first) + std::abs(a.second) < std::abs(b.first) + std::abs(b.second);
  });
  return order;
}

namespace {

// Rows/cols of the block at (x0, y0) whose displaced position stays in frame.
struct Overlap {
  int y_begin, y_end, x_begin, x_end;
  int area() const { return (y_end - y_begin) * (x_end - x_begin); }
};

Overlap overlap(const FramePair& f, int x0, int y0, int dx, int dy, int block) {
  Overlap o;
  o.y_begin = std::max(0, -(y0 + dy));
  o.y_end = std::min(block, f.height - (y0 + dy));
  o.x_begin = std::max(0, -(x0 + dx));
  o.x_end = std::min(block, f.width - (x0 + dx));
  return o;
}

bool usable(const Overlap& o, int block) {
  return 2 * (o.y_end - o.y_begin) >= block && 2 * (o.x_end - o.x_begin) >= block;
}

}  // namespace

namespace serial {

void block_match(const FramePair& frames, int block, int radius, std::vector<BlockMatch>& out) {
  const int by = frames.height / block;
  const int bx = frames.width / block;
  const auto order = search_order(radius);
  out.assign(static_cast<std::size_t>(by) * bx, BlockMatch{});
  for (int r = 0; r < by; ++r) {
    for (int c = 0; c < bx; ++c) {
      const int y0 = r * block;
      const int x0 = c * block;
      BlockMatch best{0, 0, std::numeric_limits<float>::infinity()};
      for (const auto& [dx, dy] : order) {
        const Overlap o = overlap(frames, x0, y0, dx, dy, block);
        if (!usable(o, block)) continue;
        float sad = 0.0f;
        for (int y = o.y_begin; y < o.y_end; ++y) {
          for (int x = o.x_begin; x < o.x_end; ++x) {
            const float* a = frames.current + ((y0 + y) * frames.width + (x0 + x)) * 3;
            const float* b = frames.next + ((y0 + y + dy) * frames.width + (x0 + x + dx)) * 3;
            sad += std::abs(a[0] - b[0]) + std::abs(a[1] - b[1]) + std::abs(a[2] - b[2]);
          }
        }
        const float area = static_cast<float>(o.area());
        if (sad < best.sad * area) best = {dx, dy, sad / area};
      }
      out[static_cast<std::size_t>(r) * bx + c] = best;
    }
  }
}

}  // namespace serial

namespace omp {

void block_match(const FramePair& frames, int block, int radius, std::vector<BlockMatch>& out) {
  const int by = frames.height / block;
  const int bx = frames.width / block;
  const auto order = search_order(radius);
  out.assign(static_cast<std::size_t>(by) * bx, BlockMatch{});
#pragma omp parallel for schedule(static)
  for (int idx = 0; idx < by * bx; ++idx) {
    const int y0 = (idx / bx) * block;
    const int x0 = (idx % bx) * block;
    BlockMatch best{0, 0, std::numeric_limits<float>::infinity()};
    for (const auto& [dx, dy] : order) {
      const Overlap o = overlap(frames, x0, y0, dx, dy, block);
      if (!usable(o, block)) continue;
      const float area = static_cast<float>(o.area());
      const float bound = best.sad * area;
      float sad = 0.0f;
      for (int y = o.y_begin; y < o.y_end && sad < bound; ++y) {
        const float* a = frames.current + ((y0 + y) * frames.width + x0) * 3;
        const float* b = frames.next + ((y0 + y + dy) * frames.width + x0 + dx) * 3;
        for (int x = o.x_begin; x < o.x_end; ++x) {
          sad += std::abs(a[3 * x] - b[3 * x]) + std::abs(a[3 * x + 1] - b[3 * x + 1]) +
                 std::abs(a[3 * x + 2] - b[3 * x + 2]);
        }
      }
      if (sad < bound) best = {dx, dy, sad / area};
    }
    out[static_cast<std::size_t>(idx)] = best;
  }
}

}  // namespace omp

}  // namespace fils::kernels
