#pragma once

// AdamW with per-slot decay/freeze masks, global-norm clipping and the
// warmup + half-cosine learning-rate schedule.

#include "fils/nn.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace fils {

struct LrSchedule {
  double lr_start = 1e-6;
  double lr_peak = 1.5e-4;
  double lr_end = 1e-5;
  std::int64_t warmup_steps = 1;
  std::int64_t total_steps = 1;
};

// Linear from lr_start (step 0) to lr_peak (step warmup_steps), then a half
// cosine reaching lr_end at the last step (total_steps - 1). Steps past the
// horizon stay at lr_end.
double lr_at(std::int64_t step, const LrSchedule& s);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

class AdamW {
 public:
  AdamW() = default;
  // `decay[i]` enables weight decay and `frozen[i]` skips the update for
  // element i; both are expanded from the layout's slots.
  AdamW(const nn::ParamLayout& layout, const std::vector<bool>& frozen_slots, AdamWConfig cfg);

  void step(std::span<float> params, std::span<const float> grads, double lr);

  std::int64_t steps() const { return t_; }
  std::vector<float>& m() { return m_; }
  std::vector<float>& v() { return v_; }
  void restore(std::vector<float> m, std::vector<float> v, std::int64_t t);

 private:
  AdamWConfig cfg_;
  std::vector<std::uint8_t> decay_;
  std::vector<std::uint8_t> frozen_;
  std::vector<float> m_;
  std::vector<float> v_;
  std::int64_t t_ = 0;
};

// Scales `grads` so their global L2 norm is at most max_norm; returns the
// norm before clipping.
double clip_grad_norm(std::span<float> grads, double max_norm);

}  // namespace fils
