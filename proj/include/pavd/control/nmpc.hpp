#pragma once

// Single-shooting NMPC on the single-track model. Parameters are held fixed
// over the horizon. Gradients come from an adjoint sweep over per-step
// forward-mode Jacobians; the solver is projected gradient descent with
// Barzilai-Borwein step sizes and Armijo backtracking.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <vector>

#include "pavd/control/pure_pursuit.hpp"
#include "pavd/dynamics.hpp"
#include "pavd/scalar.hpp"
#include "pavd/track.hpp"

namespace pavd {

struct NmpcWeights {
  double lateral = 30.0;   // per m^2 of lateral error to the raceline
  double along = 0.0;      // per m^2 of along-track error to the reference point
  double heading = 1.0;    // per rad^2
  double speed = 1.0;      // per (m/s)^2
  double effort = 0.01;    // per unit^2 of normalized input
  double rate = 0.2;       // per unit^2 of normalized input change
  double boundary = 2000;  // per m^2 past the soft edge
  double terminal = 3.0;   // multiplies the last stage's state cost
};

struct NmpcConfig {
  int horizon = 15;
  double dt = 0.02;
  NmpcWeights weights;
  InputBounds bounds;
  double boundary_margin = 0.08;  // m inside the track edge where the penalty starts
  double speed_scale = 1.0;       // multiplies the raceline speed profile
  double model_actuator_tau = 0.05;  // s, first-order lag assumed by the prediction model
  int max_iter = 40;
  double tol = 1e-4;              // on the normalized step
  PhysicsMode mode = PhysicsMode::Full;

  void check() const {
    if (horizon < 1) throw Error(ErrorKind::Domain, "NMPC horizon must be >= 1");
    if (!(dt > 0)) throw Error(ErrorKind::Domain, "NMPC dt must be positive");
    const auto& w = weights;
    for (double v : {w.lateral, w.along, w.heading, w.speed, w.effort, w.rate, w.boundary, w.terminal}) {
      if (!(v >= 0)) throw Error(ErrorKind::Domain, "NMPC weights must be >= 0");
    }
    if (!(bounds.T_min < bounds.T_max) || !(bounds.delta_max > 0)) {
      throw Error(ErrorKind::Domain, "NMPC input bounds are empty");
    }
    if (max_iter < 0) throw Error(ErrorKind::Domain, "max_iter must be >= 0");
  }
};

/// Full plant-side state seen by the controller: body, pose and actuator.
struct VehicleState {
  BodyState body;
  Pose pose;
  ControlInput actuator;
};

struct RefPoint {
  double x = 0, y = 0, heading = 0, speed = 0;
  double center_offset = 0;  // lateral offset of the reference from the centerline
  double half_width = 0;
};

struct NmpcSolution {
  std::vector<ControlInput> controls;
  std::vector<VehicleState> predicted;  // states after each control
  double cost = 0;
  double zero_cost = 0;     // cost of the all-zero sequence
  double initial_cost = 0;  // cost of the chosen starting candidate
  int iterations = 0;
  bool converged = false;
};

namespace nmpc_detail {

constexpr int kX = 8;  // vx vy omega x y theta aT adelta
constexpr int kU = 2;

using XVec = Eigen::Matrix<double, kX, 1>;

template <typename S>
std::array<S, kX> step(const std::array<S, kX>& x, const S& uT, const S& ud,
                       const BasicModelParams<S>& p, const VehicleGeometry& geom, double dt,
                       double alpha, PhysicsMode mode) {
  const S aT = x[6] + alpha * (uT - x[6]);
  const S ad = x[7] + alpha * (ud - x[7]);
  const BasicBodyState<S> body{x[0], x[1], x[2]};
  const auto next = next_body_state(body, BasicControl<S>{aT, ad}, p, geom, dt, mode);
  using std::cos;
  using std::sin;
  const S c = cos(x[5]), s = sin(x[5]);
  return {next.vx, next.vy, next.omega, x[3] + dt * (x[0] * c - x[1] * s),
          x[4] + dt * (x[0] * s + x[1] * c), x[5] + dt * x[2], aT, ad};
}

template <typename S>
S state_cost(const std::array<S, kX>& x, const RefPoint& r, const NmpcConfig& cfg) {
  using std::cos;
  using std::sin;
  const auto& w = cfg.weights;
  const double ch = std::cos(r.heading), sh = std::sin(r.heading);
  const S dx = x[3] - r.x, dy = x[4] - r.y;
  const S lat = -sh * dx + ch * dy;
  const S lon = ch * dx + sh * dy;
  const double k = std::round((value(x[5]) - r.heading) / (2 * std::numbers::pi));
  const S head = x[5] - r.heading - k * 2 * std::numbers::pi;
  const S ev = x[0] - r.speed;
  S cost = w.lateral * lat * lat + w.along * lon * lon + w.heading * head * head + w.speed * ev * ev;
  const S off = lat + r.center_offset;
  const double edge = r.half_width - cfg.boundary_margin;
  if (value(off) > edge) cost += w.boundary * (off - edge) * (off - edge);
  if (value(off) < -edge) cost += w.boundary * (off + edge) * (off + edge);
  return cost;
}

inline std::array<double, kX> pack(const VehicleState& s) {
  return {s.body.vx, s.body.vy, s.body.omega, s.pose.x, s.pose.y, s.pose.theta, s.actuator.T, s.actuator.delta};
}

inline VehicleState unpack(const std::array<double, kX>& x) {
  return {{x[0], x[1], x[2]}, {x[3], x[4], x[5]}, {x[6], x[7]}};
}

}  // namespace nmpc_detail

class Nmpc {
 public:
  explicit Nmpc(NmpcConfig cfg) : cfg_(std::move(cfg)) { cfg_.check(); }

  const NmpcConfig& config() const { return cfg_; }
  void reset() { warm_.reset(); }

  /// Reference points along the raceline for a predicted path.
  std::vector<RefPoint> references(const Track& track, const std::vector<VehicleState>& path) const {
    std::vector<RefPoint> refs;
    refs.reserve(path.size());
    for (const auto& s : path) {
      const auto pr = track.raceline().project({s.pose.x, s.pose.y});
      RefPoint r;
      r.x = pr.point.x;
      r.y = pr.point.y;
      r.heading = pr.heading;
      r.speed = cfg_.speed_scale * track.reference_speed(pr);
      const auto cp = track.centerline().project(pr.point);
      r.center_offset = cp.lateral;
      r.half_width = track.half_width(cp);
      refs.push_back(r);
    }
    return refs;
  }

  /// Rollout of the prediction model (no derivatives).
  std::vector<VehicleState> rollout(const VehicleState& x0, const std::vector<ControlInput>& u,
                                    const ModelParams& params, const VehicleGeometry& geom) const {
    std::vector<VehicleState> out;
    auto x = nmpc_detail::pack(x0);
    for (const auto& c : u) {
      x = nmpc_detail::step<double>(x, c.T, c.delta, params, geom, cfg_.dt, alpha(), cfg_.mode);
      for (double v : x) {
        if (!std::isfinite(v)) throw Error(ErrorKind::Solver, "NMPC rollout became non-finite");
      }
      out.push_back(nmpc_detail::unpack(x));
    }
    return out;
  }

  double cost(const VehicleState& x0, const std::vector<ControlInput>& u, const ModelParams& params,
              const VehicleGeometry& geom, const std::vector<RefPoint>& refs) const {
    const auto path = rollout(x0, u, params, geom);
    return cost_of(path, u, x0.actuator, refs);
  }

  NmpcSolution solve(const VehicleState& x0, const ModelParams& params, const VehicleGeometry& geom,
                     const Track& track) {
    const auto H = static_cast<std::size_t>(cfg_.horizon);
    const std::vector<ControlInput> zeros(H, ControlInput{0.0, 0.0});
    std::vector<std::vector<ControlInput>> candidates{zeros, std::vector<ControlInput>(H, cfg_.bounds.clip(x0.actuator))};
    if (warm_) {
      auto w = *warm_;
      w.erase(w.begin());
      w.push_back(w.back());
      candidates.insert(candidates.begin(), w);
    }
    // References come from the first candidate's predicted path and stay
    // fixed for the whole solve.
    const auto refs = references(track, rollout(x0, candidates.front(), params, geom));

    NmpcSolution sol;
    sol.zero_cost = cost(x0, zeros, params, geom, refs);
    double best = std::numeric_limits<double>::infinity();
    std::vector<ControlInput> u;
    for (const auto& c : candidates) {
      const double j = cost(x0, c, params, geom, refs);
      if (j < best) {
        best = j;
        u = c;
      }
    }
    sol.initial_cost = best;

    std::vector<double> z = normalize(u);
    std::vector<double> g = gradient(x0, z, params, geom, refs);
    double J = best;
    double step = 0.1;
    std::vector<double> z_prev, g_prev;
    for (int it = 0; it < cfg_.max_iter; ++it) {
      if (!z_prev.empty()) {
        double ss = 0, sy = 0;
        for (std::size_t i = 0; i < z.size(); ++i) {
          const double s = z[i] - z_prev[i], y = g[i] - g_prev[i];
          ss += s * s;
          sy += s * y;
        }
        step = sy > 1e-16 ? std::clamp(ss / sy, 1e-6, 10.0) : std::min(10.0, step * 2);
      }
      bool accepted = false;
      std::vector<double> z_new(z.size());
      double J_new = J, move = 0;
      for (int ls = 0; ls < 30; ++ls) {
        move = 0;
        double dec = 0;
        for (std::size_t i = 0; i < z.size(); ++i) {
          z_new[i] = std::clamp(z[i] - step * g[i], lo(i), hi(i));
          const double d = z_new[i] - z[i];
          move = std::max(move, std::abs(d));
          dec += d * d;
        }
        if (move == 0) break;
        J_new = cost(x0, denormalize(z_new), params, geom, refs);
        if (J_new <= J - 1e-4 / step * dec) {
          accepted = true;
          break;
        }
        step *= 0.5;
      }
      sol.iterations = it + 1;
      if (!accepted) {
        sol.converged = true;  // no descent direction left within the box
        break;
      }
      z_prev = z;
      g_prev = g;
      z = z_new;
      J = J_new;
      if (move < cfg_.tol) {
        sol.converged = true;
        break;
      }
      g = gradient(x0, z, params, geom, refs);
    }
    sol.controls = denormalize(z);
    sol.cost = J;
    sol.predicted = rollout(x0, sol.controls, params, geom);
    warm_ = sol.controls;
    return sol;
  }

  /// Gradient of the cost in normalized input coordinates (exposed for tests).
  std::vector<double> gradient(const VehicleState& x0, const std::vector<double>& z,
                               const ModelParams& params, const VehicleGeometry& geom,
                               const std::vector<RefPoint>& refs) const {
    using namespace nmpc_detail;
    using J10 = Jet<kX + kU>;
    using J8 = Jet<kX>;
    const auto H = static_cast<std::size_t>(cfg_.horizon);
    const auto u = denormalize(z);
    const auto flat = params.flatten();
    std::array<J10, kNumParams> jp;
    for (std::size_t i = 0; i < kNumParams; ++i) jp[i] = J10(flat[i]);
    const auto jparams = BasicModelParams<J10>::unflatten(jp);

    std::vector<Eigen::Matrix<double, kX, kX>> A(H);
    std::vector<Eigen::Matrix<double, kX, kU>> B(H);
    std::vector<XVec> dcost(H);
    auto x = pack(x0);
    for (std::size_t k = 0; k < H; ++k) {
      std::array<J10, kX> xj;
      for (int i = 0; i < kX; ++i) xj[static_cast<std::size_t>(i)] = J10(x[static_cast<std::size_t>(i)], i);
      const auto nx = step<J10>(xj, J10(u[k].T, kX), J10(u[k].delta, kX + 1), jparams, geom, cfg_.dt,
                                alpha(), cfg_.mode);
      for (int i = 0; i < kX; ++i) {
        const auto& v = nx[static_cast<std::size_t>(i)].v;
        A[k].row(i) = v.template head<kX>().transpose();
        B[k].row(i) = v.template tail<kU>().transpose();
        x[static_cast<std::size_t>(i)] = nx[static_cast<std::size_t>(i)].a;
      }
      std::array<J8, kX> xc;
      for (int i = 0; i < kX; ++i) xc[static_cast<std::size_t>(i)] = J8(x[static_cast<std::size_t>(i)], i);
      const J8 c = state_cost<J8>(xc, refs[k], cfg_);
      dcost[k] = c.v * (k + 1 == H ? cfg_.weights.terminal : 1.0);
    }
    // Adjoint sweep: lambda_k = dJ/dx_{k+1}. Input gradients are taken in
    // normalized coordinates.
    std::vector<double> g(2 * H, 0.0);
    XVec lambda = XVec::Zero();
    for (std::size_t k = H; k-- > 0;) {
      lambda += dcost[k];
      const Eigen::Matrix<double, kU, 1> gu = B[k].transpose() * lambda;
      g[2 * k] += gu(0) * scale(0);
      g[2 * k + 1] += gu(1) * scale(1);
      lambda = A[k].transpose() * lambda;
    }
    // Effort and rate terms in normalized coordinates.
    const auto& w = cfg_.weights;
    const auto zprev = normalize_one(x0.actuator);
    for (std::size_t k = 0; k < H; ++k) {
      for (int c = 0; c < 2; ++c) {
        const std::size_t i = 2 * k + static_cast<std::size_t>(c);
        const double prev = k == 0 ? zprev[static_cast<std::size_t>(c)] : z[i - 2];
        g[i] += 2 * w.effort * z[i] + 2 * w.rate * (z[i] - prev);
        if (k + 1 < H) g[i] -= 2 * w.rate * (z[i + 2] - z[i]);
      }
    }
    return g;
  }

  std::vector<double> normalize(const std::vector<ControlInput>& u) const {
    std::vector<double> z;
    for (const auto& c : u) {
      const auto n = normalize_one(c);
      z.push_back(n[0]);
      z.push_back(n[1]);
    }
    return z;
  }

  std::vector<ControlInput> denormalize(const std::vector<double>& z) const {
    std::vector<ControlInput> u;
    for (std::size_t k = 0; k + 1 < z.size(); k += 2) u.push_back({z[k] * scale(0), z[k + 1] * scale(1)});
    return u;
  }

  double cost_of(const std::vector<VehicleState>& path, const std::vector<ControlInput>& u,
                 const ControlInput& prev_actuator, const std::vector<RefPoint>& refs) const {
    const auto& w = cfg_.weights;
    double J = 0;
    auto prev = normalize_one(prev_actuator);
    for (std::size_t k = 0; k < path.size(); ++k) {
      const double sc = state_cost_value(path[k], refs[k]);
      J += (k + 1 == path.size() ? w.terminal : 1.0) * sc;
      const auto n = normalize_one(u[k]);
      for (int c = 0; c < 2; ++c) {
        const auto ci = static_cast<std::size_t>(c);
        J += w.effort * n[ci] * n[ci] + w.rate * (n[ci] - prev[ci]) * (n[ci] - prev[ci]);
      }
      prev = n;
    }
    return J;
  }

 private:
  double alpha() const {
    return cfg_.model_actuator_tau > 0 ? 1.0 - std::exp(-cfg_.dt / cfg_.model_actuator_tau) : 1.0;
  }
  // Throttle is already unit-scaled; steering is scaled by its limit.
  double scale(int c) const { return c == 0 ? 1.0 : cfg_.bounds.delta_max; }
  double lo(std::size_t i) const { return i % 2 == 0 ? cfg_.bounds.T_min : -1.0; }
  double hi(std::size_t i) const { return i % 2 == 0 ? cfg_.bounds.T_max : 1.0; }
  std::array<double, 2> normalize_one(const ControlInput& c) const { return {c.T / scale(0), c.delta / scale(1)}; }

  double state_cost_value(const VehicleState& s, const RefPoint& r) const {
    return nmpc_detail::state_cost<double>(nmpc_detail::pack(s), r, cfg_);
  }

  NmpcConfig cfg_;
  std::optional<std::vector<ControlInput>> warm_;
};

}  // namespace pavd
