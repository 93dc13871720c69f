#include "support.hpp"

#include "fils/synthgen.hpp"
#include "fils/tokenize.hpp"

#include <set>

using namespace fils;

TEST_SUITE("tokenize") {

TEST_CASE("token counts") {
  CHECK(grid_dims(16, 224, 224, {16, 2}).count() == 1568);
  CHECK(grid_dims(16, 64, 64, {8, 2}).count() == 512);
  CHECK(grid_dims(16, 64, 64, {8, 2}) == GridDims{8, 8, 8});
  CHECK(PatchSpec{8, 2}.raw_dim() == 384);
  CHECK_THROWS_WITH_AS(grid_dims(15, 64, 64, {8, 2}), doctest::Contains("frames"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(grid_dims(16, 60, 64, {8, 2}), doctest::Contains("height"), std::invalid_argument);
}

TEST_CASE("token layout is (dt, py, px, channel) in (t, y, x) raster order") {
  VideoClip c;
  c.frames = 4;
  c.height = 4;
  c.width = 6;
  c.pixels.resize(4 * 4 * 6 * 3);
  for (std::size_t i = 0; i < c.pixels.size(); ++i) c.pixels[i] = static_cast<float>(i);
  const TokenGrid g = tubeify(c, {2, 2});
  REQUIRE(g.dims == GridDims{2, 2, 3});
  REQUIRE(g.tokens.rows() == 12);
  REQUIRE(g.tokens.cols() == 24);
  for (Index r = 0; r < g.size(); ++r) {
    const TubeCoord tc = g.coords[static_cast<std::size_t>(r)];
    CHECK(g.index_of(tc) == r);
    for (int dt = 0; dt < 2; ++dt)
      for (int py = 0; py < 2; ++py)
        for (int px = 0; px < 2; ++px)
          for (int ch = 0; ch < 3; ++ch) {
            const Index col = ((dt * 2 + py) * 2 + px) * 3 + ch;
            const std::size_t src = c.pixel_index(tc.t * 2 + dt, tc.y * 2 + py, tc.x * 2 + px) + static_cast<std::size_t>(ch);
            CHECK(g.tokens(r, col) == c.pixels[src]);
          }
  }
  CHECK(untubeify(g) == c.pixels);
}

TEST_CASE("tubeify round-trips a rendered clip") {
  synth::SceneSpec s;
  s.motion = synth::Motion::rotate;
  s.speed = 1.0;
  s.noise_std = 0.03;
  const VideoClip c = synth::render_clip(s, 5);
  CHECK(untubeify(tubeify(c, {8, 2})) == c.pixels);
  CHECK(untubeify(tubeify(c, {16, 4})) == c.pixels);
}

TEST_CASE("mask target rounding") {
  CHECK(masked_spatial_target({8, 14, 14}, 0.9) == 176);
  CHECK(masked_spatial_target({8, 8, 8}, 0.9) == 58);
  CHECK(masked_spatial_target({1, 2, 1}, 0.25) == 1);  // 0.5 rounds up
}

TEST_CASE("tube masks are shared over time and hit the target") {
  Rng rng(3);
  const GridDims dims{8, 8, 8};
  for (int k = 0; k < 200; ++k) {
    const MaskSpec m = sample_tube_mask(dims, 0.9, rng);
    CHECK(m.masked_spatial_count() == 58);
    CHECK(m.masked_token_count() == 58 * 8);
    CHECK(m.visible_token_count() == 6 * 8);
    const TokenSplit split = split_tokens(dims, m);
    CHECK(split.visible.size() == 48);
    CHECK(split.masked.size() == 464);
    std::set<std::pair<int, int>> seen;
    for (Index i : split.masked) {
      const int y = static_cast<int>((i / 8) % 8);
      const int x = static_cast<int>(i % 8);
      CHECK(m.masked(y, x));
      seen.insert({y, x});
    }
    CHECK(seen.size() == 58);
  }
}

TEST_CASE("split partitions the grid in order") {
  Rng rng(4);
  const GridDims dims{2, 3, 3};
  const MaskSpec m = sample_tube_mask(dims, 0.5, rng);
  const TokenSplit s = split_tokens(dims, m);
  std::vector<Index> all(s.visible);
  all.insert(all.end(), s.masked.begin(), s.masked.end());
  std::sort(all.begin(), all.end());
  for (Index i = 0; i < dims.count(); ++i) CHECK(all[static_cast<std::size_t>(i)] == i);
  CHECK(std::is_sorted(s.visible.begin(), s.visible.end()));
  CHECK(std::is_sorted(s.masked.begin(), s.masked.end()));
}

TEST_CASE("degenerate ratios are rejected") {
  Rng rng(1);
  CHECK_THROWS_AS(sample_tube_mask({2, 2, 2}, 0.0, rng), std::invalid_argument);
  CHECK_THROWS_AS(sample_tube_mask({2, 2, 2}, 1.0, rng), std::invalid_argument);
  CHECK_THROWS_AS(sample_tube_mask({2, 2, 2}, 0.95, rng), std::invalid_argument);  // rounds to all masked
  CHECK(all_visible_mask({2, 2, 2}).masked_spatial_count() == 0);
}

TEST_CASE("masks are reproducible per seed") {
  Rng a(99), b(99);
  CHECK(sample_tube_mask({8, 14, 14}, 0.9, a).masked_spatial == sample_tube_mask({8, 14, 14}, 0.9, b).masked_spatial);
}

}  // TEST_SUITE
