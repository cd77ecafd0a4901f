#pragma once

#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace dsamp {

enum class ScheduleKind { uniform, harmonic };

inline ScheduleKind parse_schedule_kind(std::string_view s) {
  if (s == "uniform") return ScheduleKind::uniform;
  if (s == "harmonic") return ScheduleKind::harmonic;
  throw std::invalid_argument("unknown schedule '" + std::string(s) + "' (expected uniform|harmonic)");
}

inline std::string_view schedule_name(ScheduleKind k) {
  return k == ScheduleKind::uniform ? "uniform" : "harmonic";
}

/// Time grid 0 = t_0 < t_1 < ... < t_T = 1 with widths dt_i = t_{i+1} - t_i.
struct Schedule {
  std::vector<double> times;
  std::vector<double> widths;

  int steps() const noexcept { return static_cast<int>(widths.size()); }
};

namespace detail {
inline Schedule from_widths(std::vector<double> w) {
  Schedule s;
  s.times.push_back(0.0);
  double acc = 0.0;
  for (double v : w) {
    acc += v;
    s.times.push_back(acc);
  }
  s.times.back() = 1.0;
  s.widths.resize(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) s.widths[i] = s.times[i + 1] - s.times[i];
  return s;
}
}  // namespace detail

inline Schedule uniform_schedule(int steps) {
  if (steps < 1) throw std::invalid_argument("schedule: T must be >= 1");
  Schedule s;
  for (int i = 0; i <= steps; ++i) s.times.push_back(static_cast<double>(i) / steps);
  for (int i = 0; i < steps; ++i) s.widths.push_back(1.0 / steps);
  return s;
}

/// Widths proportional to 1, 1/2, ..., 1/T: coarse near t = 0, fine near t = 1.
inline Schedule harmonic_schedule(int steps) {
  if (steps < 1) throw std::invalid_argument("schedule: T must be >= 1");
  std::vector<double> w(steps);
  double total = 0.0;
  for (int i = 0; i < steps; ++i) total += 1.0 / (i + 1);
  for (int i = 0; i < steps; ++i) w[i] = (1.0 / (i + 1)) / total;
  return detail::from_widths(std::move(w));
}

inline Schedule make_schedule(ScheduleKind kind, int steps) {
  return kind == ScheduleKind::uniform ? uniform_schedule(steps) : harmonic_schedule(steps);
}

}  // namespace dsamp
