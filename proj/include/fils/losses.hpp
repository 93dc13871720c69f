#pragma once

// Training objectives, evaluated in double precision. Each returns the loss
// and the gradients the caller needs for backpropagation.

#include "fils/tensor.hpp"

namespace fils {

struct LossWeights {
  double lambda1 = 1.0;  // contrastive term
  double lambda2 = 1.0;  // feature prediction term
};

struct TemperatureBounds {
  double min = 1e-3;
  double max = 10.0;
};

// exp(log_sigma) clamped to the bounds.
double sigma_of(double log_sigma, const TemperatureBounds& bounds = {});

struct ActClipResult {
  double loss = 0.0;
  double sigma = 0.0;
  MatD d_video;
  MatD d_text;
  double d_log_sigma = 0.0;  // zero while sigma sits on a clamp bound
};

// Symmetric InfoNCE between row-aligned video and text embeddings. Rows must
// be unit-norm within 1e-4; throws on an empty batch or mismatched shapes.
ActClipResult actclip_loss(const MatD& video, const MatD& text, double log_sigma,
                           const TemperatureBounds& bounds = {});

struct RegressionResult {
  double loss = 0.0;
  MatD d_pred;  // no gradient is produced for the target
};

// Mean over rows of the L1 distance between predicted and target unit rows.
RegressionResult fp_loss(const MatD& pred, const MatD& target);

// Mean squared error over every element.
RegressionResult mse_pixel_loss(const MatD& recon, const MatD& target);

// lambda1 * l_act + lambda2 * l_fp; throws std::runtime_error naming the
// offending component when either is not finite.
double total_loss(double l_act, double l_fp, const LossWeights& w);

}  // namespace fils
