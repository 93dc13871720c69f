#pragma once

// Transformer building blocks with hand-written backward passes.
//
// Layers do not own weights. Each layer registers its tensors in a
// ParamLayout and remembers their offsets; forward/backward receive the flat
// parameter (and gradient) buffer. The same layer object therefore runs on
// student weights, on EMA teacher weights, or on a float64 copy for gradient
// checks.

#include "fils/kernels.hpp"
#include "fils/tensor.hpp"

#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fils::nn {

enum class Init { zeros, ones, normal, xavier };

struct ParamSlot {
  std::string name;
  Index rows = 0;
  Index cols = 0;
  Index offset = 0;
  bool decay = false;
  Init init = Init::zeros;
  double std = 0.0;

  Index size() const { return rows * cols; }
};

class ParamLayout {
 public:
  Index add(std::string name, Index rows, Index cols, Init init, double std = 0.0,
            bool decay = false);

  Index size() const { return size_; }
  const std::vector<ParamSlot>& slots() const { return slots_; }
  const ParamSlot& slot(std::string_view name) const;

  // Fills `values` according to each slot's init rule.
  void initialize(std::span<float> values, Rng& rng) const;

 private:
  std::vector<ParamSlot> slots_;
  Index size_ = 0;
};

template <typename T>
ConstMapMat<T> view(std::span<const T> p, Index offset, Index rows, Index cols) {
  return ConstMapMat<T>(p.data() + offset, rows, cols);
}

template <typename T>
MapMat<T> view(std::span<T> g, Index offset, Index rows, Index cols) {
  return MapMat<T>(g.data() + offset, rows, cols);
}

struct Linear {
  Index in = 0;
  Index out = 0;
  Index w = -1;
  Index b = -1;

  Linear() = default;
  Linear(ParamLayout& layout, const std::string& name, Index in_dim, Index out_dim,
         bool bias = true, Init init = Init::xavier, double std = 0.0)
      : in(in_dim), out(out_dim) {
    w = layout.add(name + ".weight", in, out, init, std, true);
    if (bias) b = layout.add(name + ".bias", 1, out, Init::zeros);
  }

  template <typename T>
  void forward(std::span<const T> p, const Mat<T>& x, Mat<T>& y) const {
    y.noalias() = x * view(p, w, in, out);
    if (b >= 0) y.rowwise() += Eigen::Map<const RowVec<T>>(p.data() + b, out);
  }

  // Accumulates weight gradients into `g`; writes the input gradient when dx is given.
  template <typename T>
  void backward(std::span<const T> p, std::span<T> g, const Mat<T>& x, const Mat<T>& dy,
                Mat<T>* dx) const {
    view(g, w, in, out).noalias() += x.transpose() * dy;
    if (b >= 0) view(g, b, 1, out) += RowVec<T>(dy.colwise().sum());
    if (dx) dx->noalias() = dy * view(p, w, in, out).transpose();
  }
};

template <typename T>
struct LayerNormCache {
  Mat<T> xhat;
  std::vector<T> rstd;
};

struct LayerNorm {
  Index dim = 0;
  Index gamma = -1;
  Index beta = -1;
  static constexpr double kEps = 1e-6;

  LayerNorm() = default;
  LayerNorm(ParamLayout& layout, const std::string& name, Index d) : dim(d) {
    gamma = layout.add(name + ".gamma", 1, d, Init::ones);
    beta = layout.add(name + ".beta", 1, d, Init::zeros);
  }

  template <typename T>
  void forward(std::span<const T> p, const Mat<T>& x, Mat<T>& y, LayerNormCache<T>* cache) const {
    kernels::omp::layer_norm_forward<T>(x, p.data() + gamma, p.data() + beta, T(kEps), y,
                                        cache ? &cache->xhat : nullptr,
                                        cache ? &cache->rstd : nullptr);
  }

  template <typename T>
  void backward(std::span<const T> p, std::span<T> g, const LayerNormCache<T>& cache,
                const Mat<T>& dy, Mat<T>& dx) const {
    kernels::omp::layer_norm_backward<T>(cache.xhat, cache.rstd, p.data() + gamma, dy, dx,
                                         g.data() + gamma, g.data() + beta);
  }
};

template <typename T>
struct BlockCache {
  LayerNormCache<T> ln1;
  Mat<T> h1;
  Mat<T> qkv;
  std::vector<Mat<T>> probs;
  Mat<T> attn;
  Mat<T> x1;
  LayerNormCache<T> ln2;
  Mat<T> h2;
  Mat<T> fc1;
  Mat<T> act;
};

// Pre-norm transformer block: x + Attn(LN(x)), then + MLP(LN(.)).
struct Block {
  Index dim = 0;
  Index heads = 1;
  LayerNorm ln1;
  Linear qkv;
  Linear proj;
  LayerNorm ln2;
  Linear fc1;
  Linear fc2;

  Block() = default;
  Block(ParamLayout& layout, const std::string& name, Index d, Index num_heads, double mlp_ratio);

  template <typename T>
  void forward(std::span<const T> p, const Mat<T>& x, Mat<T>& y, BlockCache<T>* cache) const;

  template <typename T>
  void backward(std::span<const T> p, std::span<T> g, const BlockCache<T>& cache,
                const Mat<T>& dy, Mat<T>& dx) const;
};

template <typename T>
struct StackCache {
  std::vector<BlockCache<T>> blocks;
  LayerNormCache<T> norm;
};

// Blocks followed by a final LayerNorm.
struct TransformerStack {
  std::vector<Block> blocks;
  LayerNorm norm;

  TransformerStack() = default;
  TransformerStack(ParamLayout& layout, const std::string& name, Index d, Index depth,
                   Index heads, double mlp_ratio);

  template <typename T>
  Mat<T> forward(std::span<const T> p, Mat<T> x, StackCache<T>* cache) const;

  template <typename T>
  Mat<T> backward(std::span<const T> p, std::span<T> g, const StackCache<T>& cache,
                  const Mat<T>& dy) const;
};

// Row-wise x / (||x|| + eps). The cache keeps outputs and input norms.
template <typename T>
struct NormalizeCache {
  Mat<T> y;
  std::vector<T> norms;
};

inline constexpr double kNormEps = 1e-8;

template <typename T>
Mat<T> normalize_rows(const Mat<T>& x, NormalizeCache<T>* cache = nullptr);

template <typename T>
Mat<T> normalize_rows_backward(const NormalizeCache<T>& cache, const Mat<T>& dy);

}  // namespace fils::nn
