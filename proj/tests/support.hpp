#pragma once

#include "fils/model.hpp"
#include "fils/tensor.hpp"
#include "fils/train.hpp"

#include <doctest.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace fils::test {

inline MatD random_mat(Index rows, Index cols, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  MatD m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = scale * normal01(rng);
  return m;
}

inline MatD unit_rows(Index rows, Index cols, std::uint64_t seed) {
  MatD m = random_mat(rows, cols, seed);
  for (Index i = 0; i < rows; ++i) m.row(i).normalize();
  return m;
}

// Largest relative error between an analytic gradient and central differences
// of `f` over every coordinate of `x`. The denominator is floored at `floor`
// so coordinates with a vanishing gradient compare absolutely.
inline double max_rel_error(std::vector<double>& x, const std::vector<double>& analytic,
                            const std::function<double()>& f, double h = 1e-6, double floor = 1e-6) {
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f();
    x[i] = keep - h;
    const double down = f();
    x[i] = keep;
    const double numeric = (up - down) / (2.0 * h);
    const double err = std::abs(numeric - analytic[i]) / std::max({std::abs(numeric), std::abs(analytic[i]), floor});
    worst = std::max(worst, err);
  }
  return worst;
}

inline double max_rel_error(MatD& x, const MatD& analytic, const std::function<double()>& f, double h = 1e-6,
                            double floor = 1e-6) {
  std::vector<double> flat(x.data(), x.data() + x.size());
  const std::vector<double> a(analytic.data(), analytic.data() + analytic.size());
  return max_rel_error(flat, a, [&] {
    std::copy(flat.begin(), flat.end(), x.data());
    return f();
  }, h, floor);
}

// A model small enough for double-precision gradient checks.
inline ModelConfig tiny_model(GridDims grid = {2, 3, 3}, Index raw = 12) {
  ModelConfig c;
  c.encoder = {8, 1, 2, 2.0, raw, grid.count()};
  c.grid = grid;
  c.predictor_dim = 8;
  c.predictor_depth = 1;
  c.predictor_heads = 2;
  c.head_hidden = 6;
  c.text_dim = 4;
  c.text_depth = 1;
  c.text_heads = 2;
  c.text_max_len = 8;
  return c;
}

inline std::vector<double> init_double(const FilsModel& m, std::uint64_t seed) {
  const std::vector<float> f = m.init_params(seed);
  std::vector<double> d(f.begin(), f.end());
  // Non-trivial norms and biases so their gradients are exercised.
  Rng rng(seed + 1);
  for (const auto& s : m.layout().slots())
    if (s.init == nn::Init::zeros || s.init == nn::Init::ones)
      for (Index i = 0; i < s.size(); ++i) d[static_cast<std::size_t>(s.offset + i)] += 0.1 * normal01(rng);
  return d;
}

// Training config for the small synthetic datasets used in tests.
inline TrainConfig tiny_train_config(const std::filesystem::path& data, const std::filesystem::path& out) {
  TrainConfig cfg;
  cfg.data_dir = data.string();
  cfg.out_dir = out.string();
  cfg.epochs = 2;
  cfg.batch_size = 4;
  cfg.mask_ratio = 0.75;
  cfg.model.encoder = {32, 1, 2, 2.0, 0, 0};
  cfg.model.predictor_dim = 32;
  cfg.model.predictor_depth = 1;
  cfg.model.predictor_heads = 2;
  cfg.model.head_hidden = 32;
  cfg.model.text_dim = 16;
  cfg.model.text_depth = 1;
  cfg.model.text_heads = 2;
  return cfg;
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("fils-test-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

// 16 train / 8 val clips of 4 frames at 32x32, shared by the tests that need
// files on disk.
const std::filesystem::path& small_dataset();

}  // namespace fils::test
