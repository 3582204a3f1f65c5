#pragma once

namespace hf {

inline constexpr double kSecondsPerHour = 3600.0;
inline constexpr double kMetersPerKm = 1000.0;

constexpr double mps_to_kmh(double v) { return v * 3.6; }
constexpr double kmh_to_mps(double v) { return v / 3.6; }
constexpr double m_to_km(double x) { return x / kMetersPerKm; }
constexpr double km_to_m(double x) { return x * kMetersPerKm; }
constexpr double s_to_h(double t) { return t / kSecondsPerHour; }
constexpr double h_to_s(double t) { return t * kSecondsPerHour; }

}  // namespace hf
