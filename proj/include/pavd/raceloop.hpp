#pragma once

// Closed-loop racing: a plant (full physics, ground-truth parameters, lagged
// actuators) driven by pure pursuit or by NMPC on a dynamics model whose
// parameters come from a ParamModel. Pure pursuit drives until the history
// buffer holds enough records for the model, then NMPC takes over.

#include <nlohmann/json.hpp>

#include <cmath>
#include <deque>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <string>
#include <vector>

#include "pavd/control/nmpc.hpp"
#include "pavd/control/pure_pursuit.hpp"
#include "pavd/estimator/estimator.hpp"
#include "pavd/generator.hpp"
#include "pavd/telemetry.hpp"
#include "pavd/track.hpp"

namespace pavd {

enum class Controller { Nmpc, PurePursuit };

inline std::string_view to_string(Controller c) { return c == Controller::Nmpc ? "nmpc" : "pure-pursuit"; }

inline Controller parse_controller(std::string_view s) {
  if (s == "nmpc") return Controller::Nmpc;
  if (s == "pure-pursuit" || s == "pp") return Controller::PurePursuit;
  throw Error(ErrorKind::Domain, "unknown controller '" + std::string(s) + "'");
}

struct RaceConfig {
  Controller controller = Controller::Nmpc;
  int laps = 1;
  double dt = 0.02;
  double actuator_tau = 0.05;   // s, plant actuator lag
  double start_back = 0.5;      // m behind the start line along the raceline
  double start_speed = 1.0;     // m/s
  double max_time = 60.0;       // s, abort after this much simulated time
  double max_excursion = 5.0;   // half-widths off the centerline before aborting
  PurePursuitConfig pure_pursuit;
  NmpcConfig nmpc;

  void check() const {
    if (laps < 1) throw Error(ErrorKind::Domain, "laps must be >= 1");
    if (!(dt > 0)) throw Error(ErrorKind::Domain, "dt must be positive");
    if (!(actuator_tau >= 0)) throw Error(ErrorKind::Domain, "actuator_tau must be >= 0");
    if (!(max_time > 0)) throw Error(ErrorKind::Domain, "max_time must be positive");
    nmpc.check();
  }
};

struct RaceTraceRow {
  double t = 0;
  BodyState state;
  Pose pose;
  ControlInput cmd;
  ControlInput applied;
  int nmpc = 0;  // 1 when the command came from the NMPC
  double excursion = 0;
  ForceTrace forces;

  bool operator==(const RaceTraceRow& o) const {
    return t == o.t && state == o.state && pose == o.pose && cmd == o.cmd && applied == o.applied &&
           nmpc == o.nmpc && excursion == o.excursion && forces.Frx == o.forces.Frx &&
           forces.Ffy == o.forces.Ffy && forces.Fry == o.forces.Fry && forces.Ffz == o.forces.Ffz &&
           forces.Frz == o.forces.Frz && forces.alpha_f == o.forces.alpha_f &&
           forces.alpha_r == o.forces.alpha_r;
  }
};

struct LapResult {
  std::string track;
  std::string controller;
  std::string model;
  bool completed = false;
  std::string abort_reason;
  std::vector<double> lap_times;
  double lap_time = 0;         // first timed lap, 0 when none completed
  long violations = 0;         // entries into the off-track region
  long steps_outside = 0;
  double max_excursion = 0;    // m beyond the edge (negative: always inside)
  double mean_vx = 0, mean_vy = 0, mean_omega = 0;  // over the timed laps
  long nmpc_solves = 0;
  long nmpc_not_converged = 0;
  long nmpc_failures = 0;
  double mean_nmpc_iterations = 0;
  std::vector<RaceTraceRow> trace;

  bool operator==(const LapResult&) const = default;
};

/// Counts entries into the off-track region: a step outside that follows a
/// step inside (or starts the sequence) is one violation.
inline long count_violations(const std::vector<double>& excursions) {
  long n = 0;
  bool outside = false;
  for (double e : excursions) {
    const bool now = e > 0;
    if (now && !outside) ++n;
    outside = now;
  }
  return n;
}

/// Signed distance along the start-line normal (positive past the line) and
/// distance from the line's centre along the line.
struct StartLine {
  Point2 origin;
  double heading = 0;
  double reach = 0;  // crossings farther than this from the origin are ignored

  double along(const Point2& p) const {
    return std::cos(heading) * (p.x - origin.x) + std::sin(heading) * (p.y - origin.y);
  }
  double across(const Point2& p) const {
    return -std::sin(heading) * (p.x - origin.x) + std::cos(heading) * (p.y - origin.y);
  }
};

inline StartLine start_line(const Track& track) {
  const auto pr = track.raceline().at(0.0);
  const auto cp = track.centerline().project(pr.point);
  return {pr.point, pr.heading, 2.0 * track.half_width(cp) + std::abs(cp.lateral)};
}

inline LapResult run_race(const Track& track, const ModelParams& truth, const VehicleGeometry& geom,
                          const nn::ParamModel& model, const RaceConfig& cfg,
                          const std::string& model_label = "model") {
  cfg.check();
  LapResult res;
  res.track = track.definition().name;
  res.controller = std::string(to_string(cfg.controller));
  res.model = model_label;

  NmpcConfig ncfg = cfg.nmpc;
  ncfg.dt = cfg.dt;
  Nmpc nmpc(ncfg);
  const auto tau = static_cast<std::size_t>(model.history_len());
  const double a = lag_alpha(cfg.dt, cfg.actuator_tau);
  const auto line = start_line(track);

  Pose pose = start_pose(track, track.raceline().length() - cfg.start_back);
  BodyState state{cfg.start_speed, 0.0, 0.0};
  ControlInput fb{0.0, 0.0};
  nn::History history;
  std::vector<double> crossings;
  std::vector<double> excursions;
  double sum_vx = 0, sum_vy = 0, sum_w = 0;
  long n_timed = 0;
  long iter_sum = 0;

  const auto max_steps = static_cast<long>(std::ceil(cfg.max_time / cfg.dt));
  for (long k = 0; k < max_steps; ++k) {
    const double t = static_cast<double>(k) * cfg.dt;
    ControlInput cmd = pure_pursuit(track, pose, state, geom, cfg.pure_pursuit);
    int used_nmpc = 0;
    if (cfg.controller == Controller::Nmpc && history.size() >= tau) {
      const nn::History window(history.end() - static_cast<std::ptrdiff_t>(tau), history.end());
      const auto params = model.estimate(window);
      try {
        const auto sol = nmpc.solve({state, pose, fb}, params, geom, track);
        cmd = cfg.nmpc.bounds.clip(sol.controls.front());
        used_nmpc = 1;
        ++res.nmpc_solves;
        iter_sum += sol.iterations;
        if (!sol.converged) ++res.nmpc_not_converged;
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::Solver) throw;
        ++res.nmpc_failures;
        nmpc.reset();
      }
    }
    fb = {fb.T + a * (cmd.T - fb.T), fb.delta + a * (cmd.delta - fb.delta)};
    history.push_back({t, state, pose, fb, cmd});
    if (history.size() > tau) history.erase(history.begin());

    const auto step = simulate_step(state, pose, fb, truth, geom, cfg.dt, PhysicsMode::Full);
    const Point2 before{pose.x, pose.y};
    state = step.state;
    pose = step.pose;
    const Point2 after{pose.x, pose.y};

    const double exc = track.excursion(after);
    excursions.push_back(exc);
    res.trace.push_back({t + cfg.dt, state, pose, cmd, fb, used_nmpc, exc, step.forces});
    if (!crossings.empty()) {
      sum_vx += state.vx;
      sum_vy += state.vy;
      sum_w += state.omega;
      ++n_timed;
    }

    if (!finite(state) || !finite(pose)) {
      res.abort_reason = "state became non-finite";
      break;
    }
    if (exc > (cfg.max_excursion - 1.0) * track.half_width(track.centerline().project(after))) {
      res.abort_reason = "vehicle left the track";
      break;
    }
    const double d0 = line.along(before), d1 = line.along(after);
    if (d0 < 0 && d1 >= 0 && std::abs(line.across(after)) <= line.reach) {
      crossings.push_back(t + cfg.dt * (-d0) / (d1 - d0));
      if (static_cast<int>(crossings.size()) == cfg.laps + 1) {
        res.completed = true;
        break;
      }
    }
  }
  if (!res.completed && res.abort_reason.empty()) res.abort_reason = "time limit reached";

  for (std::size_t i = 1; i < crossings.size(); ++i) res.lap_times.push_back(crossings[i] - crossings[i - 1]);
  if (!res.lap_times.empty()) res.lap_time = res.lap_times.front();
  res.violations = count_violations(excursions);
  res.max_excursion = -std::numeric_limits<double>::infinity();
  for (double e : excursions) {
    if (e > 0) ++res.steps_outside;
    res.max_excursion = std::max(res.max_excursion, e);
  }
  if (n_timed > 0) {
    res.mean_vx = sum_vx / static_cast<double>(n_timed);
    res.mean_vy = sum_vy / static_cast<double>(n_timed);
    res.mean_omega = sum_w / static_cast<double>(n_timed);
  }
  if (res.nmpc_solves > 0) res.mean_nmpc_iterations = static_cast<double>(iter_sum) / static_cast<double>(res.nmpc_solves);
  return res;
}

inline nlohmann::json to_json(const LapResult& r) {
  return {{"track", r.track},
          {"controller", r.controller},
          {"model", r.model},
          {"completed", r.completed},
          {"abort_reason", r.abort_reason},
          {"lap_time", r.lap_time},
          {"lap_times", r.lap_times},
          {"violations", r.violations},
          {"steps_outside", r.steps_outside},
          {"max_excursion", r.max_excursion},
          {"mean_vx", r.mean_vx},
          {"mean_vy", r.mean_vy},
          {"mean_omega", r.mean_omega},
          {"nmpc_solves", r.nmpc_solves},
          {"nmpc_not_converged", r.nmpc_not_converged},
          {"nmpc_failures", r.nmpc_failures},
          {"mean_nmpc_iterations", r.mean_nmpc_iterations},
          {"steps", r.trace.size()}};
}

inline void write_race_trace(std::ostream& os, const LapResult& r) {
  using detail::format_double;
  os << "t,x,y,theta,vx,vy,omega,T_cmd,delta_cmd,T_applied,delta_applied,nmpc,excursion,"
        "Frx,Ffy,Fry,Ffz,Frz,alpha_f,alpha_r\n";
  for (const auto& row : r.trace) {
    const double vals[] = {row.t,         row.pose.x,    row.pose.y,    row.pose.theta, row.state.vx,
                           row.state.vy,  row.state.omega, row.cmd.T,   row.cmd.delta,  row.applied.T,
                           row.applied.delta};
    for (double v : vals) os << format_double(v) << ',';
    os << row.nmpc << ',' << format_double(row.excursion);
    const auto& f = row.forces;
    for (double v : {f.Frx, f.Ffy, f.Fry, f.Ffz, f.Frz, f.alpha_f, f.alpha_r}) os << ',' << format_double(v);
    os << '\n';
  }
}

inline void write_race_trace(const std::filesystem::path& path, const LapResult& r) {
  std::ofstream os(path);
  if (!os) throw Error(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  write_race_trace(os, r);
}

}  // namespace pavd
