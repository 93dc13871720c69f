#include "fils/nn.hpp"

#include <spdlog/spdlog.h>

namespace fils::nn {

Index ParamLayout::add(std::string name, Index rows, Index cols, Init init, double std,
                       bool decay) {
  const Index offset = size_;
  slots_.push_back({std::move(name), rows, cols, offset, decay, init, std});
  size_ += rows * cols;
  return offset;
}

const ParamSlot& ParamLayout::slot(std::string_view name) const {
  for (const auto& s : slots_)
    if (s.name == name) return s;
  throw std::out_of_range("no parameter named " + std::string(name));
}

void ParamLayout::initialize(std::span<float> values, Rng& rng) const {
  if (static_cast<Index>(values.size()) != size_)
    throw std::invalid_argument("parameter buffer does not match layout");
  for (const auto& s : slots_) {
    float* v = values.data() + s.offset;
    switch (s.init) {
      case Init::zeros:
        std::fill(v, v + s.size(), 0.0f);
        break;
      case Init::ones:
        std::fill(v, v + s.size(), 1.0f);
        break;
      case Init::normal:
        for (Index i = 0; i < s.size(); ++i) {
          // truncated at two standard deviations
          double z = normal01(rng);
          while (std::abs(z) > 2.0) z = normal01(rng);
          v[i] = static_cast<float>(z * s.std);
        }
        break;
      case Init::xavier: {
        const double bound = std::sqrt(6.0 / static_cast<double>(s.rows + s.cols));
        for (Index i = 0; i < s.size(); ++i)
          v[i] = static_cast<float>((2.0 * uniform01(rng) - 1.0) * bound);
        break;
      }
    }
  }
}

Block::Block(ParamLayout& layout, const std::string& name, Index d, Index num_heads,
             double mlp_ratio)
    : dim(d), heads(num_heads) {
  if (d % num_heads != 0)
    throw std::invalid_argument(name + ": embed dim " + std::to_string(d) +
                                " not divisible by heads " + std::to_string(num_heads));
  const auto hidden = static_cast<Index>(static_cast<double>(d) * mlp_ratio);
  ln1 = LayerNorm(layout, name + ".ln1", d);
  qkv = Linear(layout, name + ".qkv", d, 3 * d);
  proj = Linear(layout, name + ".proj", d, d);
  ln2 = LayerNorm(layout, name + ".ln2", d);
  fc1 = Linear(layout, name + ".fc1", d, hidden);
  fc2 = Linear(layout, name + ".fc2", hidden, d);
}

template <typename T>
void Block::forward(std::span<const T> p, const Mat<T>& x, Mat<T>& y,
                    BlockCache<T>* cache) const {
  BlockCache<T> local;
  BlockCache<T>& c = cache ? *cache : local;
  ln1.forward(p, x, c.h1, cache ? &c.ln1 : nullptr);
  qkv.forward(p, c.h1, c.qkv);
  kernels::omp::attention_forward<T>(c.qkv, heads, c.attn, cache ? &c.probs : nullptr);
  Mat<T> a;
  proj.forward(p, c.attn, a);
  c.x1 = x + a;
  ln2.forward(p, c.x1, c.h2, cache ? &c.ln2 : nullptr);
  fc1.forward(p, c.h2, c.fc1);
  kernels::omp::gelu_forward<T>(c.fc1, c.act);
  fc2.forward(p, c.act, y);
  y += c.x1;
}

template <typename T>
void Block::backward(std::span<const T> p, std::span<T> g, const BlockCache<T>& c,
                     const Mat<T>& dy, Mat<T>& dx) const {
  Mat<T> d_act;
  fc2.backward(p, g, c.act, dy, &d_act);
  Mat<T> d_fc1;
  kernels::omp::gelu_backward<T>(c.fc1, d_act, d_fc1);
  Mat<T> d_h2;
  fc1.backward(p, g, c.h2, d_fc1, &d_h2);
  Mat<T> d_x1;
  ln2.backward(p, g, c.ln2, d_h2, d_x1);
  d_x1 += dy;
  Mat<T> d_attn;
  proj.backward(p, g, c.attn, d_x1, &d_attn);
  Mat<T> d_qkv;
  kernels::omp::attention_backward<T>(c.qkv, heads, c.probs, d_attn, d_qkv);
  Mat<T> d_h1;
  qkv.backward(p, g, c.h1, d_qkv, &d_h1);
  ln1.backward(p, g, c.ln1, d_h1, dx);
  dx += d_x1;
}

TransformerStack::TransformerStack(ParamLayout& layout, const std::string& name, Index d,
                                   Index depth, Index heads, double mlp_ratio) {
  for (Index i = 0; i < depth; ++i)
    blocks.emplace_back(layout, name + ".blocks." + std::to_string(i), d, heads, mlp_ratio);
  norm = LayerNorm(layout, name + ".norm", d);
}

template <typename T>
Mat<T> TransformerStack::forward(std::span<const T> p, Mat<T> x, StackCache<T>* cache) const {
  if (cache) cache->blocks.resize(blocks.size());
  Mat<T> y;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    blocks[i].forward(p, x, y, cache ? &cache->blocks[i] : nullptr);
    x.swap(y);
  }
  norm.forward(p, x, y, cache ? &cache->norm : nullptr);
  return y;
}

template <typename T>
Mat<T> TransformerStack::backward(std::span<const T> p, std::span<T> g,
                                  const StackCache<T>& cache, const Mat<T>& dy) const {
  Mat<T> d;
  norm.backward(p, g, cache.norm, dy, d);
  Mat<T> dx;
  for (std::size_t i = blocks.size(); i-- > 0;) {
    blocks[i].backward(p, g, cache.blocks[i], d, dx);
    d.swap(dx);
  }
  return d;
}

template <typename T>
Mat<T> normalize_rows(const Mat<T>& x, NormalizeCache<T>* cache) {
  Mat<T> y(x.rows(), x.cols());
  std::vector<T> norms(static_cast<std::size_t>(x.rows()));
  bool degenerate = false;
  for (Index i = 0; i < x.rows(); ++i) {
    const T n = x.row(i).norm();
    norms[static_cast<std::size_t>(i)] = n;
    y.row(i) = x.row(i) / (n + T(kNormEps));
    degenerate |= (n == T(0));
  }
  if (degenerate) spdlog::warn("normalize_rows: zero-norm row mapped to zero vector");
  if (cache) {
    cache->y = y;
    cache->norms = std::move(norms);
  }
  return y;
}

template <typename T>
Mat<T> normalize_rows_backward(const NormalizeCache<T>& cache, const Mat<T>& dy) {
  Mat<T> dx(dy.rows(), dy.cols());
  for (Index i = 0; i < dy.rows(); ++i) {
    const T n = cache.norms[static_cast<std::size_t>(i)];
    const T denom = n + T(kNormEps);
    dx.row(i) = dy.row(i) / denom;
    if (n > T(0)) dx.row(i) -= cache.y.row(i) * (cache.y.row(i).dot(dy.row(i)) / n);
  }
  return dx;
}

#define FILS_NN_INSTANTIATE(T)                                                               \
  template void Block::forward<T>(std::span<const T>, const Mat<T>&, Mat<T>&, BlockCache<T>*) \
      const;                                                                                 \
  template void Block::backward<T>(std::span<const T>, std::span<T>, const BlockCache<T>&,   \
                                   const Mat<T>&, Mat<T>&) const;                            \
  template Mat<T> TransformerStack::forward<T>(std::span<const T>, Mat<T>, StackCache<T>*)   \
      const;                                                                                 \
  template Mat<T> TransformerStack::backward<T>(std::span<const T>, std::span<T>,            \
                                                const StackCache<T>&, const Mat<T>&) const;  \
  template Mat<T> normalize_rows<T>(const Mat<T>&, NormalizeCache<T>*);                      \
  template Mat<T> normalize_rows_backward<T>(const NormalizeCache<T>&, const Mat<T>&);

FILS_NN_INSTANTIATE(float)
FILS_NN_INSTANTIATE(double)

#undef FILS_NN_INSTANTIATE

}  // namespace fils::nn
