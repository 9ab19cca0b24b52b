#pragma once

// Synthetic telemetry: pure pursuit drives the full single-track model with
// the ground-truth parameters around a track. Commands pass through a
// first-order actuator lag; the lagged value is what the plant receives and
// what is logged as feedback.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "pavd/control/pure_pursuit.hpp"
#include "pavd/dynamics.hpp"
#include "pavd/telemetry.hpp"
#include "pavd/track.hpp"

namespace pavd {

struct GeneratorConfig {
  double dt = 0.02;               // s (50 Hz)
  double actuator_tau = 0.05;     // s, first-order command smoothing
  double start_speed = 1.0;       // m/s
  double v_max = 4.0;             // m/s, generation aborts above this
  double max_excursion = 5.0;     // half-widths outside the centerline
  std::uint64_t seed = 0;
  // Optional excitation: piecewise-constant random offsets on the commands.
  double throttle_noise = 0.0;
  double steer_noise = 0.0;
  int noise_hold = 10;            // steps per excitation sample
  PurePursuitConfig controller;
};

/// Smoothing factor of the discrete first-order lag.
inline double lag_alpha(double dt, double tau) { return tau > 0 ? 1.0 - std::exp(-dt / tau) : 1.0; }

/// Pose on the raceline start, aligned with its tangent.
inline Pose start_pose(const Track& track, double s = 0.0) {
  const auto p = track.raceline().at(s);
  return {p.point.x, p.point.y, p.heading};
}

inline TelemetrySeries generate_synthetic(const Track& track, const ModelParams& truth,
                                          const VehicleGeometry& geom, std::size_t laps,
                                          const GeneratorConfig& cfg = {},
                                          std::vector<ForceTrace>* forces = nullptr) {
  if (!(cfg.dt > 0)) throw Error(ErrorKind::Domain, "dt must be positive");
  TelemetrySeries series;
  series.rate_hz = 1.0 / cfg.dt;
  series.source = Source::Synthetic;
  if (laps == 0) return series;

  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double a = lag_alpha(cfg.dt, cfg.actuator_tau);
  const double L = track.length();
  const auto max_steps = static_cast<std::size_t>(
      std::ceil(static_cast<double>(laps) * L / (0.2 * cfg.dt)));  // mean speed above 0.2 m/s

  Pose pose = start_pose(track);
  BodyState state{cfg.start_speed, 0.0, 0.0};
  ControlInput fb{0.0, 0.0};
  ControlInput offset{0.0, 0.0};
  double s_prev = track.centerline().project({pose.x, pose.y}).s;
  double progress = 0.0;
  series.lap_starts.push_back(0);

  for (std::size_t k = 0; k < max_steps; ++k) {
    if (cfg.noise_hold > 0 && k % static_cast<std::size_t>(cfg.noise_hold) == 0) {
      offset = {cfg.throttle_noise * normal(rng), cfg.steer_noise * normal(rng)};
    }
    ControlInput cmd = pure_pursuit(track, pose, state, geom, cfg.controller);
    cmd = cfg.controller.bounds.clip({cmd.T + offset.T, cmd.delta + offset.delta});
    fb = {fb.T + a * (cmd.T - fb.T), fb.delta + a * (cmd.delta - fb.delta)};

    series.records.push_back({static_cast<double>(k) * cfg.dt, state, pose, fb, cmd});
    const auto step = simulate_step(state, pose, fb, truth, geom, cfg.dt, PhysicsMode::Full);
    if (forces) forces->push_back(step.forces);
    state = step.state;
    pose = step.pose;

    if (!finite(state) || !finite(pose)) throw DivergenceError("generator state became non-finite", static_cast<long>(k));
    if (std::hypot(state.vx, state.vy) > cfg.v_max) {
      throw DivergenceError("generator exceeded v_max", static_cast<long>(k));
    }
    const auto pr = track.centerline().project({pose.x, pose.y});
    if (std::abs(pr.lateral) > cfg.max_excursion * track.half_width(pr)) {
      throw DivergenceError("vehicle left the track during generation", static_cast<long>(k));
    }
    progress += track.centerline().delta_s(s_prev, pr.s);
    s_prev = pr.s;
    const auto completed = static_cast<std::size_t>(std::floor(progress / L));
    if (completed >= laps) return series;
    if (completed + 1 > series.lap_starts.size()) series.lap_starts.push_back(k + 1);
  }
  throw DivergenceError("generator made too little progress", static_cast<long>(max_steps));
}

}  // namespace pavd
