#pragma once

// Physics guard: maps unbounded network outputs into the admissible box of
// physical parameters and checks externally supplied parameter sets.

#include <algorithm>
#include <array>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "pavd/types.hpp"

namespace pavd {

struct ParamBounds {
  std::array<double, kNumParams> lo{};
  std::array<double, kNumParams> hi{};

  double width(std::size_t i) const { return hi[i] - lo[i]; }
  double midpoint(std::size_t i) const { return lo[i] + 0.5 * (hi[i] - lo[i]); }

  void check() const {
    for (std::size_t i = 0; i < kNumParams; ++i) {
      if (!(std::isfinite(lo[i]) && std::isfinite(hi[i]) && lo[i] < hi[i])) {
        throw Error(ErrorKind::Domain, "invalid bounds for slot " + std::string(kSlotNames[i]));
      }
    }
  }

  ModelParams midpoints() const {
    std::array<double, kNumParams> v{};
    for (std::size_t i = 0; i < kNumParams; ++i) v[i] = midpoint(i);
    return ModelParams::unflatten(v);
  }

  bool operator==(const ParamBounds&) const = default;
};

enum class Profile { Sim, Real };

inline std::string_view to_string(Profile p) { return p == Profile::Sim ? "sim" : "real"; }

inline Profile parse_profile(std::string_view s) {
  if (s == "sim" || s == "Sim") return Profile::Sim;
  if (s == "real" || s == "Real") return Profile::Real;
  throw Error(ErrorKind::Domain, "unknown bounds profile '" + std::string(s) + "'");
}

struct BoundsProfile {
  Profile name = Profile::Sim;
  ParamBounds bounds;
};

struct BuiltinProfiles {
  BoundsProfile sim;
  BoundsProfile real;
};

namespace detail {

// Slot order: Bf Cf Df Ef Br Cr Dr Er Shf Svf Shr Svr Cm1 Cm2 Cr0 Cr2 Iz
inline ParamBounds make_bounds(std::array<std::pair<double, double>, kNumParams> rows) {
  ParamBounds b;
  for (std::size_t i = 0; i < kNumParams; ++i) {
    b.lo[i] = rows[i].first;
    b.hi[i] = rows[i].second;
  }
  return b;
}

}  // namespace detail

/// Coefficient boxes for the 1:43 simulator and the full-scale car. The
/// drivetrain rows are defaults; override them with a bounds file.
inline BuiltinProfiles builtin_profiles() {
  BuiltinProfiles out;
  out.sim.name = Profile::Sim;
  out.sim.bounds = detail::make_bounds({{
      {5, 30}, {0.5, 2}, {0.1, 0.9}, {-2, 0},          // front B C D E
      {5, 30}, {0.5, 2}, {0.1, 0.9}, {-2, 0},          // rear B C D E
      {-0.02, 0.02}, {-0.003, 0.003},                  // Shf Svf
      {-0.02, 0.02}, {-0.003, 0.003},                  // Shr Svr
      {0, 12}, {0, 1}, {0, 1}, {0, 1},                 // Cm1 Cm2 Cr0 Cr2
      {1.4e-5, 5.6e-5},                                // Iz
  }});
  out.real.name = Profile::Real;
  out.real.bounds = detail::make_bounds({{
      {5, 30}, {0.5, 2}, {100, 1e4}, {-2, 0},
      {5, 30}, {0.5, 2}, {100, 1e4}, {-2, 0},
      {-0.02, 0.02}, {-300, 300},
      {-0.02, 0.02}, {-300, 300},
      {0, 4000}, {0, 200}, {0, 2000}, {0, 20},
      {500, 2000},
  }});
  return out;
}

inline BoundsProfile builtin_profile(Profile p) {
  auto all = builtin_profiles();
  return p == Profile::Sim ? all.sim : all.real;
}

/// Parameters produced by the guard. Every slot lies in its closed interval.
struct GuardedParams {
  ModelParams params;
  Profile profile = Profile::Sim;
};

inline double logistic(double z) {
  // Split branches keep exp() from overflowing for large |z|.
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// p[i] = lo[i] + sigmoid(z[i]) * (hi[i] - lo[i]).
inline std::array<double, kNumParams> project_values(const std::array<double, kNumParams>& z,
                                                     const ParamBounds& bounds) {
  std::array<double, kNumParams> p{};
  for (std::size_t i = 0; i < kNumParams; ++i) {
    if (!std::isfinite(z[i])) {
      throw Error(ErrorKind::Domain, "non-finite latent for slot " + std::string(kSlotNames[i]));
    }
    p[i] = bounds.lo[i] + logistic(z[i]) * bounds.width(i);
  }
  return p;
}

/// Diagonal Jacobian dp/dz of the projection.
inline std::array<double, kNumParams> project_jacobian(const std::array<double, kNumParams>& z,
                                                       const ParamBounds& bounds) {
  std::array<double, kNumParams> d{};
  for (std::size_t i = 0; i < kNumParams; ++i) {
    const double s = logistic(z[i]);
    d[i] = s * (1.0 - s) * bounds.width(i);
  }
  return d;
}

inline GuardedParams project(const std::array<double, kNumParams>& z, const BoundsProfile& profile) {
  return {ModelParams::unflatten(project_values(z, profile.bounds)), profile.name};
}

struct BoundViolation {
  std::size_t slot = 0;
  double value = 0;
  double lo = 0;
  double hi = 0;

  std::string describe() const {
    std::ostringstream os;
    os << kSlotNames[slot] << " = " << value << " outside [" << lo << ", " << hi << "]";
    return os.str();
  }
};

inline std::vector<BoundViolation> validate(const ModelParams& params, const ParamBounds& bounds) {
  std::vector<BoundViolation> out;
  const auto v = params.flatten();
  for (std::size_t i = 0; i < kNumParams; ++i) {
    if (!(v[i] >= bounds.lo[i] && v[i] <= bounds.hi[i])) {
      out.push_back({i, v[i], bounds.lo[i], bounds.hi[i]});
    }
  }
  return out;
}

/// Hard clamp into the box. Only for externally supplied parameter sets;
/// learned parameters always go through project().
inline ModelParams clamp(const ModelParams& params, const ParamBounds& bounds) {
  auto v = params.flatten();
  for (std::size_t i = 0; i < kNumParams; ++i) v[i] = std::clamp(v[i], bounds.lo[i], bounds.hi[i]);
  return ModelParams::unflatten(v);
}

}  // namespace pavd
