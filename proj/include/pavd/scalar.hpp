#pragma once

#include <ceres/jet.h>

#include <cmath>
#include <numbers>

namespace pavd {

/// Forward-mode dual number used to differentiate the physics.
template <int N>
using Jet = ceres::Jet<double, N>;

inline double value(double x) { return x; }

template <typename T, int N>
double value(const ceres::Jet<T, N>& x) {
  return value(x.a);
}

template <typename S>
bool all_finite(const S& x) {
  return std::isfinite(value(x));
}

/// Wraps an angle to (-pi, pi]. The shift is a piecewise constant so
/// derivatives pass through unchanged.
template <typename S>
S wrap_angle(const S& theta) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  const double t = value(theta);
  double k = std::floor((t + std::numbers::pi) / two_pi);
  double wrapped = t - k * two_pi;  // [-pi, pi)
  if (wrapped <= -std::numbers::pi) k -= 1.0;
  return theta - S(k * two_pi);
}

}  // namespace pavd
