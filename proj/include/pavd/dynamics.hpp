#pragma once

// Enhanced single-track vehicle model: slip angles, drivetrain force,
// longitudinal load transfer, load-scaled Pacejka lateral forces, rigid-body
// derivatives and forward Euler integration.
//
// Every function is templated on the scalar so the same code path runs on
// doubles (simulation) and on dual numbers (training and NMPC Jacobians).

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pavd/scalar.hpp"
#include "pavd/types.hpp"

namespace pavd {

/// Floor on |vx| used in the slip-angle denominators (m/s).
inline constexpr double kMinSlipSpeed = 0.05;

namespace detail {

template <typename S>
void require_finite(std::initializer_list<S> xs, const char* what) {
  for (const auto& x : xs) {
    if (!all_finite(x)) throw Error(ErrorKind::Domain, std::string("non-finite input to ") + what);
  }
}

}  // namespace detail

template <typename S>
struct SlipAngles {
  S alpha_f{}, alpha_r{};
};

template <typename S>
SlipAngles<S> slip_angles(const BasicBodyState<S>& state, const S& delta,
                          const VehicleGeometry& geom, const PacejkaCoeffs<S>& coeffs) {
  using std::abs;
  using std::atan;
  detail::require_finite<S>({state.vx, state.vy, state.omega, delta, coeffs.Shf, coeffs.Shr},
                            "slip_angles");
  S speed = abs(state.vx);
  if (value(speed) < kMinSlipSpeed) speed = S(kMinSlipSpeed);
  SlipAngles<S> out;
  out.alpha_f = delta - atan((geom.lf * state.omega + state.vy) / speed) + coeffs.Shf;
  out.alpha_r = atan((geom.lr * state.omega - state.vy) / speed) + coeffs.Shr;
  return out;
}

/// Rear-wheel drive force: engine/brake minus rolling and drag resistance.
template <typename S>
S longitudinal_force(const S& vx, const S& throttle, const DrivetrainCoeffs<S>& d) {
  return (d.Cm1 - d.Cm2 * vx) * throttle - d.Cr0 - d.Cr2 * vx * vx;
}

/// Axle loads before the non-negativity clamp. Frz is formed as the
/// complement of Ffz so the pair sums to m*g up to a single rounding.
template <typename S>
BasicAxleLoads<S> axle_loads_unclamped(const S& Frx, const VehicleGeometry& geom) {
  const double weight = geom.weight();
  BasicAxleLoads<S> loads;
  loads.Ffz = (S(weight * geom.lr) - geom.hcg * Frx) / geom.wheelbase();
  loads.Frz = S(weight) - loads.Ffz;
  return loads;
}

/// Longitudinal load transfer driven by a_x = Frx / m.
template <typename S>
BasicAxleLoads<S> axle_loads(const S& Frx, const VehicleGeometry& geom) {
  auto loads = axle_loads_unclamped(Frx, geom);
  if (value(loads.Ffz) < geom.load_floor) loads.Ffz = S(geom.load_floor);
  if (value(loads.Frz) < geom.load_floor) loads.Frz = S(geom.load_floor);
  return loads;
}

/// Static (zero transfer) axle loads.
inline AxleLoads static_axle_loads(const VehicleGeometry& geom) {
  return axle_loads_unclamped(0.0, geom);
}

/// Load-scaled Magic Formula with curvature factor E and vertical shift Sv.
template <typename S>
S pacejka_lateral(const S& alpha, const S& Fz, const S& B, const S& C, const S& D, const S& E,
                  const S& Sv, double Fz0) {
  using std::atan;
  using std::sin;
  const S b_alpha = B * alpha;
  const S psi = atan(b_alpha - E * (b_alpha - atan(b_alpha)));
  return (Sv + D * sin(C * psi)) * (Fz / Fz0);
}

template <typename S>
BasicStateRate<S> body_derivative(const BasicBodyState<S>& state, const S& delta, const S& Frx,
                                  const S& Ffy, const S& Fry, const VehicleGeometry& geom,
                                  const S& Iz) {
  using std::cos;
  using std::sin;
  const double m = geom.m;
  const S cd = cos(delta);
  const S sd = sin(delta);
  BasicStateRate<S> rate;
  rate.dvx = (Frx - Ffy * sd + m * state.vy * state.omega) / m;
  rate.dvy = (Ffy * cd + Fry - m * state.vx * state.omega) / m;
  rate.domega = (geom.lf * Ffy * cd - geom.lr * Fry) / Iz;
  return rate;
}

template <typename S>
BasicBodyState<S> euler_step(const BasicBodyState<S>& state, const BasicStateRate<S>& rate,
                             double dt) {
  return {state.vx + dt * rate.dvx, state.vy + dt * rate.dvy, state.omega + dt * rate.domega};
}

/// Body-to-world kinematics over one step, heading wrapped to (-pi, pi].
template <typename S>
BasicPose<S> advance_pose(const BasicPose<S>& pose, const BasicBodyState<S>& state, double dt) {
  using std::cos;
  using std::sin;
  const S c = cos(pose.theta);
  const S s = sin(pose.theta);
  BasicPose<S> out;
  out.x = pose.x + dt * (state.vx * c - state.vy * s);
  out.y = pose.y + dt * (state.vx * s + state.vy * c);
  out.theta = wrap_angle(S(pose.theta + dt * state.omega));
  return out;
}

template <typename S>
struct StepForces {
  S Frx{}, Ffy{}, Fry{};
  BasicAxleLoads<S> loads;
  SlipAngles<S> slip;
};

/// Forces acting on the body for a given state, applied input and parameter set.
template <typename S>
StepForces<S> step_forces(const BasicBodyState<S>& state, const BasicControl<S>& u,
                          const BasicModelParams<S>& params, const VehicleGeometry& geom,
                          PhysicsMode mode) {
  const auto& pc = params.pacejka;
  StepForces<S> f;
  f.slip = slip_angles(state, u.delta, geom, pc);
  f.Frx = longitudinal_force(state.vx, u.T, params.drivetrain);

  double Fz0 = geom.Fz0;
  double Fz0_rear = geom.Fz0;
  switch (mode) {
    case PhysicsMode::Full:
      f.loads = axle_loads(f.Frx, geom);
      break;
    case PhysicsMode::NominalLoad:
      f.loads = {S(geom.Fz0), S(geom.Fz0)};
      break;
    case PhysicsMode::LoadTransferOnly: {
      f.loads = axle_loads(f.Frx, geom);
      const auto stat = static_axle_loads(geom);
      Fz0 = stat.Ffz;
      Fz0_rear = stat.Frz;
      break;
    }
  }
  f.Ffy = pacejka_lateral(f.slip.alpha_f, f.loads.Ffz, pc.Bf, pc.Cf, pc.Df, pc.Ef, pc.Svf, Fz0);
  f.Fry = pacejka_lateral(f.slip.alpha_r, f.loads.Frz, pc.Br, pc.Cr, pc.Dr, pc.Er, pc.Svr,
                          Fz0_rear);
  if (mode == PhysicsMode::NominalLoad) {
    // Report the loads the car actually carries; the force law ignored them.
    const auto stat = static_axle_loads(geom);
    f.loads = {S(stat.Ffz), S(stat.Frz)};
  }
  return f;
}

/// Next body state (no pose) for one forward Euler step.
template <typename S>
BasicBodyState<S> next_body_state(const BasicBodyState<S>& state, const BasicControl<S>& u,
                                  const BasicModelParams<S>& params, const VehicleGeometry& geom,
                                  double dt, PhysicsMode mode) {
  const auto f = step_forces(state, u, params, geom, mode);
  const auto rate = body_derivative(state, u.delta, f.Frx, f.Ffy, f.Fry, geom, params.Iz);
  return euler_step(state, rate, dt);
}

struct StepResult {
  BodyState state;
  Pose pose;
  ForceTrace forces;
};

inline StepResult simulate_step(const BodyState& state, const Pose& pose, const ControlInput& u,
                                const ModelParams& params, const VehicleGeometry& geom, double dt,
                                PhysicsMode mode = PhysicsMode::Full) {
  if (!(dt > 0)) throw Error(ErrorKind::Domain, "dt must be positive");
  const auto f = step_forces(state, u, params, geom, mode);
  const auto rate = body_derivative(state, u.delta, f.Frx, f.Ffy, f.Fry, geom, params.Iz);
  StepResult out;
  out.state = euler_step(state, rate, dt);
  out.pose = advance_pose(pose, state, dt);
  out.forces = {f.Frx, f.Ffy, f.Fry, f.loads.Ffz, f.loads.Frz, f.slip.alpha_f, f.slip.alpha_r};
  return out;
}

using Trajectory = std::vector<StepResult>;

/// Open-loop rollout. `params` holds either one set (reused for every step)
/// or exactly one set per control.
inline Trajectory rollout(const BodyState& state0, const Pose& pose0,
                          std::span<const ControlInput> controls,
                          std::span<const ModelParams> params, const VehicleGeometry& geom,
                          double dt, PhysicsMode mode = PhysicsMode::Full) {
  if (controls.empty()) throw Error(ErrorKind::Domain, "rollout needs at least one control");
  if (params.size() != 1 && params.size() != controls.size()) {
    throw Error(ErrorKind::Dimension, "rollout needs one parameter set or one per step");
  }
  Trajectory traj;
  traj.reserve(controls.size());
  BodyState state = state0;
  Pose pose = pose0;
  for (std::size_t k = 0; k < controls.size(); ++k) {
    const auto& p = params.size() == 1 ? params[0] : params[k];
    auto step = simulate_step(state, pose, controls[k], p, geom, dt, mode);
    if (!finite(step.state) || !finite(step.pose)) {
      throw DivergenceError("rollout produced a non-finite state", static_cast<long>(k));
    }
    state = step.state;
    pose = step.pose;
    traj.push_back(step);
  }
  return traj;
}

inline Trajectory rollout(const BodyState& state0, const Pose& pose0,
                          std::span<const ControlInput> controls, const ModelParams& params,
                          const VehicleGeometry& geom, double dt,
                          PhysicsMode mode = PhysicsMode::Full) {
  return rollout(state0, pose0, controls, std::span<const ModelParams>(&params, 1), geom, dt,
                 mode);
}

}  // namespace pavd
