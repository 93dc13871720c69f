#pragma once

// EMA teacher: momentum schedule and the parameter update.

#include <cstdint>
#include <span>

namespace fils {

struct EmaSchedule {
  double tau0 = 0.996;
  double tau_e = 0.999;
  std::int64_t tau_n = 1;

  // Throws unless 0 <= tau0 <= tau_e <= 1 and tau_n >= 1.
  void validate() const;
};

// Linear from tau0 to tau_e over the first tau_n updates, then tau_e.
double tau_at(std::int64_t step, const EmaSchedule& s);

// teacher <- tau * teacher + (1 - tau) * student, elementwise. Throws when the
// buffers differ in length.
template <typename T>
void ema_update(std::span<T> teacher, std::span<const T> student, double tau);

}  // namespace fils
