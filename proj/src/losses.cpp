#include "fils/losses.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace fils {

namespace {

constexpr double kUnitTol = 1e-4;

void require_unit_rows(const MatD& m, const char* what) {
  for (Index i = 0; i < m.rows(); ++i) {
    const double n = m.row(i).norm();
    if (std::abs(n - 1.0) > kUnitTol) {
      std::ostringstream msg;
      msg << what << " row " << i << " has norm " << n << ", expected unit rows";
      throw std::invalid_argument(msg.str());
    }
  }
}

void require_same_shape(const MatD& a, const MatD& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    std::ostringstream msg;
    msg << what << ": shape " << a.rows() << "x" << a.cols() << " vs " << b.rows() << "x"
        << b.cols();
    throw std::invalid_argument(msg.str());
  }
}

// Row-wise softmax of `logits` with max subtraction; returns the mean
// cross-entropy against the diagonal.
double diagonal_cross_entropy(const MatD& logits, MatD& probs) {
  const Index b = logits.rows();
  probs.resize(b, logits.cols());
  double loss = 0.0;
  for (Index i = 0; i < b; ++i) {
    const double mx = logits.row(i).maxCoeff();
    probs.row(i) = (logits.row(i).array() - mx).exp().matrix();
    const double z = probs.row(i).sum();
    probs.row(i) /= z;
    loss -= logits(i, i) - mx - std::log(z);
  }
  return loss / static_cast<double>(b);
}

}  // namespace

double sigma_of(double log_sigma, const TemperatureBounds& bounds) {
  return std::clamp(std::exp(log_sigma), bounds.min, bounds.max);
}

ActClipResult actclip_loss(const MatD& video, const MatD& text, double log_sigma,
                           const TemperatureBounds& bounds) {
  if (video.rows() == 0) throw std::invalid_argument("actclip_loss: empty batch");
  require_same_shape(video, text, "actclip_loss");
  require_unit_rows(video, "video embedding");
  require_unit_rows(text, "text embedding");
  const Index b = video.rows();
  const double raw = std::exp(log_sigma);
  ActClipResult r;
  r.sigma = sigma_of(log_sigma, bounds);
  const MatD logits = (video * text.transpose()) / r.sigma;
  MatD p_v2t, p_t2v;
  const double l_v2t = diagonal_cross_entropy(logits, p_v2t);
  const double l_t2v = diagonal_cross_entropy(logits.transpose(), p_t2v);
  r.loss = 0.5 * (l_v2t + l_t2v);

  const MatD eye = MatD::Identity(b, b);
  const MatD d_logits = (0.5 / static_cast<double>(b)) * ((p_v2t - eye) + (p_t2v - eye).transpose());
  r.d_video = d_logits * text / r.sigma;
  r.d_text = d_logits.transpose() * video / r.sigma;
  const bool clamped = raw <= bounds.min || raw >= bounds.max;
  // logits scale as exp(-log_sigma)
  r.d_log_sigma = clamped ? 0.0 : -(d_logits.array() * logits.array()).sum();
  return r;
}

RegressionResult fp_loss(const MatD& pred, const MatD& target) {
  require_same_shape(pred, target, "fp_loss");
  if (pred.rows() == 0) throw std::invalid_argument("fp_loss: no rows");
  require_same_shape(pred, target, "fp_loss");
  const double n = static_cast<double>(pred.rows());
  const MatD diff = pred - target;
  RegressionResult r;
  r.loss = diff.cwiseAbs().sum() / n;
  r.d_pred = diff.unaryExpr([n](double v) { return v > 0.0 ? 1.0 / n : (v < 0.0 ? -1.0 / n : 0.0); });
  return r;
}

RegressionResult mse_pixel_loss(const MatD& recon, const MatD& target) {
  require_same_shape(recon, target, "mse_pixel_loss");
  if (recon.size() == 0) throw std::invalid_argument("mse_pixel_loss: empty input");
  require_same_shape(recon, target, "mse_pixel_loss");
  const double n = static_cast<double>(recon.size());
  const MatD diff = recon - target;
  RegressionResult r;
  r.loss = diff.squaredNorm() / n;
  r.d_pred = diff * (2.0 / n);
  return r;
}

double total_loss(double l_act, double l_fp, const LossWeights& w) {
  if (!std::isfinite(l_act) || !std::isfinite(l_fp)) {
    std::ostringstream msg;
    msg << "non-finite loss component: l_act=" << l_act << " l_fp=" << l_fp;
    throw std::runtime_error(msg.str());
  }
  return w.lambda1 * l_act + w.lambda2 * l_fp;
}

}  // namespace fils
