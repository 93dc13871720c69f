#include "fils/optim.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace fils {

double lr_at(std::int64_t step, const LrSchedule& s) {
  if (step <= 0) return s.lr_start;
  if (step < s.warmup_steps)
    return s.lr_start + (s.lr_peak - s.lr_start) * static_cast<double>(step) /
                            static_cast<double>(s.warmup_steps);
  const std::int64_t last = s.total_steps - 1;
  if (last <= s.warmup_steps) return step >= last && last > 0 ? s.lr_end : s.lr_peak;
  if (step >= last) return s.lr_end;
  const double progress =
      static_cast<double>(step - s.warmup_steps) / static_cast<double>(last - s.warmup_steps);
  return s.lr_end + 0.5 * (s.lr_peak - s.lr_end) * (1.0 + std::cos(std::numbers::pi * progress));
}

AdamW::AdamW(const nn::ParamLayout& layout, const std::vector<bool>& frozen_slots, AdamWConfig cfg)
    : cfg_(cfg) {
  const auto& slots = layout.slots();
  if (frozen_slots.size() != slots.size())
    throw std::invalid_argument("AdamW: one frozen flag per slot expected");
  const auto n = static_cast<std::size_t>(layout.size());
  decay_.assign(n, 0);
  frozen_.assign(n, 0);
  for (std::size_t s = 0; s < slots.size(); ++s) {
    const auto begin = static_cast<std::size_t>(slots[s].offset);
    const auto end = begin + static_cast<std::size_t>(slots[s].size());
    for (std::size_t i = begin; i < end; ++i) {
      decay_[i] = slots[s].decay;
      frozen_[i] = frozen_slots[s];
    }
  }
  m_.assign(n, 0.0f);
  v_.assign(n, 0.0f);
}

void AdamW::step(std::span<float> params, std::span<const float> grads, double lr) {
  if (params.size() != m_.size() || grads.size() != m_.size())
    throw std::invalid_argument("AdamW: buffer size does not match the layout");
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  const float b1 = static_cast<float>(cfg_.beta1);
  const float b2 = static_cast<float>(cfg_.beta2);
  const float step_size = static_cast<float>(lr / bc1);
  const float inv_bc2 = static_cast<float>(1.0 / bc2);
  const float eps = static_cast<float>(cfg_.eps);
  const float shrink = static_cast<float>(lr * cfg_.weight_decay);
  const std::size_t n = m_.size();
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < n; ++i) {
    if (frozen_[i]) continue;
    const float g = grads[i];
    m_[i] = b1 * m_[i] + (1.0f - b1) * g;
    v_[i] = b2 * v_[i] + (1.0f - b2) * g * g;
    if (decay_[i]) params[i] -= shrink * params[i];
    params[i] -= step_size * m_[i] / (std::sqrt(v_[i] * inv_bc2) + eps);
  }
}

void AdamW::restore(std::vector<float> m, std::vector<float> v, std::int64_t t) {
  if (m.size() != m_.size() || v.size() != v_.size())
    throw std::invalid_argument("AdamW: restored moments do not match the layout");
  m_ = std::move(m);
  v_ = std::move(v);
  t_ = t;
}

double clip_grad_norm(std::span<float> grads, double max_norm) {
  double sq = 0.0;
  for (const float g : grads) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const float scale = static_cast<float>(max_norm / norm);
    for (float& g : grads) g *= scale;
  }
  return norm;
}

}  // namespace fils
