#pragma once

// Geometric raceline follower. Used by the data generator, for warm-up in
// the race loop and as the lap-time baseline.

#include <algorithm>
#include <cmath>

#include "pavd/scalar.hpp"
#include "pavd/track.hpp"
#include "pavd/types.hpp"

namespace pavd {

struct InputBounds {
  double T_min = -1.0;
  double T_max = 1.0;
  double delta_max = 0.4;  // rad

  ControlInput clip(const ControlInput& u) const {
    return {std::clamp(u.T, T_min, T_max), std::clamp(u.delta, -delta_max, delta_max)};
  }
  bool contains(const ControlInput& u) const {
    return u.T >= T_min && u.T <= T_max && std::abs(u.delta) <= delta_max;
  }
};

struct PurePursuitConfig {
  double lookahead = 0.25;        // m, at standstill
  double lookahead_gain = 0.15;   // s, lookahead grows with speed
  double speed_preview = 0.3;     // m, where the speed reference is read
  double speed_scale = 1.0;       // multiplies the raceline speed profile
  double kp = 2.0;                // throttle per m/s of speed error
  double throttle_bias = 0.2;     // feed-forward against rolling resistance
  InputBounds bounds;
};

/// Command for the current pose and body state.
inline ControlInput pure_pursuit(const Track& track, const Pose& pose, const BodyState& state,
                                 const VehicleGeometry& geom, const PurePursuitConfig& cfg) {
  const auto& line = track.raceline();
  const auto here = line.project({pose.x, pose.y});
  const double ld = cfg.lookahead + cfg.lookahead_gain * std::max(0.0, state.vx);
  const auto target = line.at(here.s + ld);
  const double dx = target.point.x - pose.x;
  const double dy = target.point.y - pose.y;
  const double dist = std::max(std::hypot(dx, dy), 1e-6);
  const double alpha = wrap_angle(std::atan2(dy, dx) - pose.theta);
  const double delta = std::atan(2.0 * geom.wheelbase() * std::sin(alpha) / dist);

  const auto ahead = line.at(here.s + cfg.speed_preview);
  const double v_ref = cfg.speed_scale * track.reference_speed(ahead);
  const double T = cfg.throttle_bias + cfg.kp * (v_ref - state.vx);
  return cfg.bounds.clip({T, delta});
}

}  // namespace pavd
