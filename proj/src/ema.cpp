#include "fils/ema.hpp"

#include <stdexcept>
#include <string>

namespace fils {

void EmaSchedule::validate() const {
  if (!(0.0 <= tau0 && tau0 <= tau_e && tau_e <= 1.0))
    throw std::invalid_argument("ema schedule needs 0 <= tau0 <= tau_e <= 1");
  if (tau_n < 1) throw std::invalid_argument("ema schedule needs tau_n >= 1");
}

double tau_at(std::int64_t step, const EmaSchedule& s) {
  if (step >= s.tau_n) return s.tau_e;
  return s.tau0 + (s.tau_e - s.tau0) * static_cast<double>(step) / static_cast<double>(s.tau_n);
}

template <typename T>
void ema_update(std::span<T> teacher, std::span<const T> student, double tau) {
  if (teacher.size() != student.size())
    throw std::invalid_argument("ema_update: teacher has " + std::to_string(teacher.size()) +
                                " values, student " + std::to_string(student.size()));
  const T a = static_cast<T>(tau);
  const T b = static_cast<T>(1.0 - tau);
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < teacher.size(); ++i) teacher[i] = a * teacher[i] + b * student[i];
}

template void ema_update<float>(std::span<float>, std::span<const float>, double);
template void ema_update<double>(std::span<double>, std::span<const double>, double);

}  // namespace fils
