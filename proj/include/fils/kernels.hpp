#pragma once

// Hot inner loops of the model and the motion detector. Each kernel exists
// twice: `serial::` is a plain loop nest kept as the reference the tests check
// against, `omp::` is the OpenMP version the library actually calls. Both
// produce identical results up to floating-point reassociation.

#include "fils/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace fils::kernels {

// One matched block: integer displacement into the next frame and its cost,
// the absolute RGB difference per pixel averaged over the in-frame overlap.
struct BlockMatch {
  int dx = 0;
  int dy = 0;
  float sad = 0.0f;
};

// Frames are interleaved RGB, row-major [H, W, 3].
struct FramePair {
  const float* current;
  const float* next;
  int height;
  int width;
};

template <typename T>
inline T gelu(T x) {
  constexpr T k = T(0.7978845608028654);  // sqrt(2 / pi)
  return T(0.5) * x * (T(1) + std::tanh(k * (x + T(0.044715) * x * x * x)));
}

template <typename T>
inline T gelu_grad(T x) {
  constexpr T k = T(0.7978845608028654);
  const T inner = k * (x + T(0.044715) * x * x * x);
  const T t = std::tanh(inner);
  const T d_inner = k * (T(1) + T(3 * 0.044715) * x * x);
  return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * d_inner;
}

// Candidate order for the block search. Zero displacement first, then by L1
// radius, so ties in SAD resolve toward the smallest motion.
std::vector<std::pair<int, int>> search_order(int radius);

namespace serial {

template <typename T>
void attention_forward(const Mat<T>& qkv, Index heads, Mat<T>& out,
                       std::vector<Mat<T>>* probs) {
  const Index n = qkv.rows();
  const Index dim = qkv.cols() / 3;
  const Index dh = dim / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  out.setZero(n, dim);
  if (probs) probs->assign(heads, Mat<T>(n, n));
  std::vector<T> row(n);
  for (Index h = 0; h < heads; ++h) {
    for (Index i = 0; i < n; ++i) {
      T mx = -std::numeric_limits<T>::infinity();
      for (Index j = 0; j < n; ++j) {
        T s = 0;
        for (Index c = 0; c < dh; ++c) s += qkv(i, h * dh + c) * qkv(j, dim + h * dh + c);
        row[j] = s * scale;
        mx = std::max(mx, row[j]);
      }
      T total = 0;
      for (Index j = 0; j < n; ++j) {
        row[j] = std::exp(row[j] - mx);
        total += row[j];
      }
      for (Index j = 0; j < n; ++j) {
        const T p = row[j] / total;
        if (probs) (*probs)[h](i, j) = p;
        for (Index c = 0; c < dh; ++c) out(i, h * dh + c) += p * qkv(j, 2 * dim + h * dh + c);
      }
    }
  }
}

template <typename T>
void attention_backward(const Mat<T>& qkv, Index heads, const std::vector<Mat<T>>& probs,
                        const Mat<T>& d_out, Mat<T>& d_qkv) {
  const Index n = qkv.rows();
  const Index dim = qkv.cols() / 3;
  const Index dh = dim / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  d_qkv.setZero(n, 3 * dim);
  std::vector<T> d_p(n);
  for (Index h = 0; h < heads; ++h) {
    const Mat<T>& p = probs[h];
    for (Index i = 0; i < n; ++i) {
      T dot = 0;
      for (Index j = 0; j < n; ++j) {
        T s = 0;
        for (Index c = 0; c < dh; ++c) s += d_out(i, h * dh + c) * qkv(j, 2 * dim + h * dh + c);
        d_p[j] = s;
        dot += s * p(i, j);
      }
      for (Index j = 0; j < n; ++j) {
        const T d_s = p(i, j) * (d_p[j] - dot) * scale;
        for (Index c = 0; c < dh; ++c) {
          d_qkv(i, h * dh + c) += d_s * qkv(j, dim + h * dh + c);
          d_qkv(j, dim + h * dh + c) += d_s * qkv(i, h * dh + c);
          d_qkv(j, 2 * dim + h * dh + c) += p(i, j) * d_out(i, h * dh + c);
        }
      }
    }
  }
}

template <typename T>
void layer_norm_forward(const Mat<T>& x, const T* gamma, const T* beta, T eps, Mat<T>& y,
                        Mat<T>* xhat, std::vector<T>* rstd) {
  const Index n = x.rows();
  const Index d = x.cols();
  y.resize(n, d);
  if (xhat) xhat->resize(n, d);
  if (rstd) rstd->resize(n);
  for (Index i = 0; i < n; ++i) {
    T mean = 0;
    for (Index c = 0; c < d; ++c) mean += x(i, c);
    mean /= T(d);
    T var = 0;
    for (Index c = 0; c < d; ++c) var += (x(i, c) - mean) * (x(i, c) - mean);
    var /= T(d);
    const T r = T(1) / std::sqrt(var + eps);
    for (Index c = 0; c < d; ++c) {
      const T h = (x(i, c) - mean) * r;
      if (xhat) (*xhat)(i, c) = h;
      y(i, c) = h * gamma[c] + beta[c];
    }
    if (rstd) (*rstd)[i] = r;
  }
}

template <typename T>
void layer_norm_backward(const Mat<T>& xhat, const std::vector<T>& rstd, const T* gamma,
                         const Mat<T>& dy, Mat<T>& dx, T* d_gamma, T* d_beta) {
  const Index n = xhat.rows();
  const Index d = xhat.cols();
  dx.resize(n, d);
  for (Index i = 0; i < n; ++i) {
    T mean_g = 0;
    T mean_gx = 0;
    for (Index c = 0; c < d; ++c) {
      const T g = dy(i, c) * gamma[c];
      mean_g += g;
      mean_gx += g * xhat(i, c);
    }
    mean_g /= T(d);
    mean_gx /= T(d);
    for (Index c = 0; c < d; ++c) {
      const T g = dy(i, c) * gamma[c];
      dx(i, c) = rstd[i] * (g - mean_g - xhat(i, c) * mean_gx);
    }
  }
  for (Index i = 0; i < n; ++i) {
    for (Index c = 0; c < d; ++c) {
      d_gamma[c] += dy(i, c) * xhat(i, c);
      d_beta[c] += dy(i, c);
    }
  }
}

template <typename T>
void gelu_forward(const Mat<T>& x, Mat<T>& y) {
  y.resize(x.rows(), x.cols());
  for (Index i = 0; i < x.size(); ++i) y.data()[i] = gelu(x.data()[i]);
}

template <typename T>
void gelu_backward(const Mat<T>& x, const Mat<T>& dy, Mat<T>& dx) {
  dx.resize(x.rows(), x.cols());
  for (Index i = 0; i < x.size(); ++i) dx.data()[i] = dy.data()[i] * gelu_grad(x.data()[i]);
}

// Exhaustive search over [-radius, radius]^2 for every block of `block`
// pixels. Candidates may leave the frame as long as at least half the block
// rows and columns stay inside; cost is averaged over the pixels that do.
// Ties keep the candidate nearest zero. Output is row-major over the block grid.
void block_match(const FramePair& frames, int block, int radius, std::vector<BlockMatch>& out);

}  // namespace serial

namespace omp {

template <typename T>
void attention_forward(const Mat<T>& qkv, Index heads, Mat<T>& out,
                       std::vector<Mat<T>>* probs) {
  const Index n = qkv.rows();
  const Index dim = qkv.cols() / 3;
  const Index dh = dim / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  out.resize(n, dim);
  if (probs) probs->resize(heads);
#pragma omp parallel for schedule(static)
  for (Index h = 0; h < heads; ++h) {
    Mat<T> s(n, n);
    s.noalias() = qkv.middleCols(h * dh, dh) * qkv.middleCols(dim + h * dh, dh).transpose();
    for (Index i = 0; i < n; ++i) {
      auto r = s.row(i);
      const T mx = r.maxCoeff();
      r = ((r.array() - mx) * scale).exp();
      r /= r.sum();
    }
    out.middleCols(h * dh, dh).noalias() = s * qkv.middleCols(2 * dim + h * dh, dh);
    if (probs) (*probs)[h] = std::move(s);
  }
}

template <typename T>
void attention_backward(const Mat<T>& qkv, Index heads, const std::vector<Mat<T>>& probs,
                        const Mat<T>& d_out, Mat<T>& d_qkv) {
  const Index n = qkv.rows();
  const Index dim = qkv.cols() / 3;
  const Index dh = dim / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  d_qkv.resize(n, 3 * dim);
#pragma omp parallel for schedule(static)
  for (Index h = 0; h < heads; ++h) {
    const Mat<T>& p = probs[h];
    const auto d_o = d_out.middleCols(h * dh, dh);
    d_qkv.middleCols(2 * dim + h * dh, dh).noalias() = p.transpose() * d_o;
    Mat<T> d_s(n, n);
    d_s.noalias() = d_o * qkv.middleCols(2 * dim + h * dh, dh).transpose();
    for (Index i = 0; i < n; ++i) {
      const T dot = d_s.row(i).dot(p.row(i));
      d_s.row(i) = (p.row(i).array() * (d_s.row(i).array() - dot) * scale).matrix();
    }
    d_qkv.middleCols(h * dh, dh).noalias() = d_s * qkv.middleCols(dim + h * dh, dh);
    d_qkv.middleCols(dim + h * dh, dh).noalias() = d_s.transpose() * qkv.middleCols(h * dh, dh);
  }
}

template <typename T>
void layer_norm_forward(const Mat<T>& x, const T* gamma, const T* beta, T eps, Mat<T>& y,
                        Mat<T>* xhat, std::vector<T>* rstd) {
  const Index n = x.rows();
  const Index d = x.cols();
  y.resize(n, d);
  if (xhat) xhat->resize(n, d);
  if (rstd) rstd->resize(n);
  Eigen::Map<const RowVec<T>> g(gamma, d);
  Eigen::Map<const RowVec<T>> b(beta, d);
#pragma omp parallel for schedule(static)
  for (Index i = 0; i < n; ++i) {
    const T mean = x.row(i).mean();
    const RowVec<T> centered = x.row(i).array() - mean;
    const T r = T(1) / std::sqrt(centered.squaredNorm() / T(d) + eps);
    const RowVec<T> h = centered * r;
    y.row(i) = (h.array() * g.array() + b.array()).matrix();
    if (xhat) xhat->row(i) = h;
    if (rstd) (*rstd)[i] = r;
  }
}

template <typename T>
void layer_norm_backward(const Mat<T>& xhat, const std::vector<T>& rstd, const T* gamma,
                         const Mat<T>& dy, Mat<T>& dx, T* d_gamma, T* d_beta) {
  const Index n = xhat.rows();
  const Index d = xhat.cols();
  dx.resize(n, d);
  Eigen::Map<const RowVec<T>> g(gamma, d);
#pragma omp parallel for schedule(static)
  for (Index i = 0; i < n; ++i) {
    const RowVec<T> gy = (dy.row(i).array() * g.array()).matrix();
    const T mean_g = gy.mean();
    const T mean_gx = gy.dot(xhat.row(i)) / T(d);
    dx.row(i) = rstd[i] * (gy.array() - mean_g - xhat.row(i).array() * mean_gx).matrix();
  }
  // Sum into aligned temporaries: reducing straight into the gradient buffer
  // makes the result depend on its address.
  const RowVec<T> sum_gamma = (dy.array() * xhat.array()).colwise().sum().matrix();
  const RowVec<T> sum_beta = dy.colwise().sum();
  Eigen::Map<RowVec<T>>(d_gamma, d) += sum_gamma;
  Eigen::Map<RowVec<T>>(d_beta, d) += sum_beta;
}

// Row-wise, using Eigen's vectorized tanh.
template <typename T>
void gelu_forward(const Mat<T>& x, Mat<T>& y) {
  constexpr T k = T(0.7978845608028654);
  y.resize(x.rows(), x.cols());
#pragma omp parallel for schedule(static)
  for (Index i = 0; i < x.rows(); ++i) {
    const auto v = x.row(i).array();
    y.row(i).array() = T(0.5) * v * (T(1) + (k * (v + T(0.044715) * v.cube())).tanh());
  }
}

template <typename T>
void gelu_backward(const Mat<T>& x, const Mat<T>& dy, Mat<T>& dx) {
  constexpr T k = T(0.7978845608028654);
  dx.resize(x.rows(), x.cols());
#pragma omp parallel for schedule(static)
  for (Index i = 0; i < x.rows(); ++i) {
    const auto v = x.row(i).array();
    const RowVec<T> t = (k * (v + T(0.044715) * v.cube())).tanh().matrix();
    const auto ta = t.array();
    dx.row(i).array() =
        dy.row(i).array() * (T(0.5) * (T(1) + ta) + T(0.5) * v * (T(1) - ta.square()) * k *
                                                         (T(1) + T(3 * 0.044715) * v.square()));
  }
}

// Same search as serial::block_match, parallel over blocks, with partial-sum
// early exit once a candidate can no longer beat the running best.
void block_match(const FramePair& frames, int block, int radius, std::vector<BlockMatch>& out);

}  // namespace omp

}  // namespace fils::kernels
