#pragma once

// Open-loop metrics: one-step state errors and multi-step displacement
// errors over a fixed horizon, plus a constant-velocity baseline.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "pavd/dynamics.hpp"
#include "pavd/estimator/estimator.hpp"
#include "pavd/telemetry.hpp"

namespace pavd {

inline double rmse(std::span<const double> pred, std::span<const double> obs) {
  if (pred.size() != obs.size() || pred.empty()) {
    throw Error(ErrorKind::Dimension, "rmse needs equal, non-empty sequences");
  }
  double s = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += (pred[i] - obs[i]) * (pred[i] - obs[i]);
  return std::sqrt(s / static_cast<double>(pred.size()));
}

inline double max_abs_err(std::span<const double> pred, std::span<const double> obs) {
  if (pred.size() != obs.size() || pred.empty()) {
    throw Error(ErrorKind::Dimension, "max_abs_err needs equal, non-empty sequences");
  }
  double m = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) m = std::max(m, std::abs(pred[i] - obs[i]));
  return m;
}

struct DisplacementErrors {
  double ade = 0;
  double fde = 0;
};

inline DisplacementErrors displacement_errors(std::span<const Pose> pred, std::span<const Pose> obs) {
  if (pred.size() != obs.size() || pred.empty()) {
    throw Error(ErrorKind::Dimension, "displacement_errors needs equal, non-empty trajectories");
  }
  DisplacementErrors d;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double e = std::hypot(pred[i].x - obs[i].x, pred[i].y - obs[i].y);
    d.ade += e;
    if (i + 1 == pred.size()) d.fde = e;
  }
  d.ade /= static_cast<double>(pred.size());
  return d;
}

enum class ReplayInput { Feedback, Commanded };

inline std::string_view to_string(ReplayInput r) { return r == ReplayInput::Feedback ? "feedback" : "commanded"; }

inline ReplayInput parse_replay_input(std::string_view s) {
  if (s == "feedback") return ReplayInput::Feedback;
  if (s == "commanded") return ReplayInput::Commanded;
  throw Error(ErrorKind::Domain, "unknown replay input '" + std::string(s) + "'");
}

struct EvalConfig {
  double horizon_ms = 300;
  double dt = 0.02;
  PhysicsMode mode = PhysicsMode::Full;
  ReplayInput replay = ReplayInput::Feedback;
  std::size_t stride = 1;
  /// Re-estimate parameters at every rollout step from the sliding window
  /// (predicted states feed back into the history). Otherwise the first
  /// estimate is held over the horizon.
  bool reestimate = true;
  double divergence_limit = 1e4;

  std::size_t horizon_steps() const {
    if (!(dt > 0) || !(horizon_ms > 0)) throw Error(ErrorKind::Domain, "horizon and dt must be positive");
    const double steps = horizon_ms / 1000.0 / dt;
    const double rounded = std::round(steps);
    if (std::abs(steps - rounded) * dt > 1e-9 || rounded < 1) {
      throw Error(ErrorKind::Domain, "horizon is not a whole number of steps");
    }
    return static_cast<std::size_t>(rounded);
  }
};

struct OpenLoopReport {
  std::string label;
  PhysicsMode mode = PhysicsMode::Full;
  double horizon_ms = 0;
  std::size_t horizon_steps = 0;
  std::size_t n_samples = 0;  // windows evaluated successfully
  std::size_t n_failed = 0;   // rollouts that diverged
  std::size_t parameter_count = 0;
  std::array<double, 3> rmse{};     // one-step vx, vy, omega
  std::array<double, 3> max_err{};  // one-step vx, vy, omega
  double one_step_mse = 0;          // mean over states and windows
  double ade = 0;
  double fde = 0;
  std::vector<double> step_error;   // mean displacement error per horizon step

  bool operator==(const OpenLoopReport&) const = default;
};

inline nlohmann::json to_json(const OpenLoopReport& r) {
  nlohmann::json j;
  j["label"] = r.label;
  j["mode"] = std::string(to_string(r.mode));
  j["horizon_ms"] = r.horizon_ms;
  j["horizon_steps"] = r.horizon_steps;
  j["n_samples"] = r.n_samples;
  j["n_failed"] = r.n_failed;
  j["parameter_count"] = r.parameter_count;
  j["rmse"] = {{"vx", r.rmse[0]}, {"vy", r.rmse[1]}, {"omega", r.rmse[2]}};
  j["max_err"] = {{"vx", r.max_err[0]}, {"vy", r.max_err[1]}, {"omega", r.max_err[2]}};
  j["one_step_mse"] = r.one_step_mse;
  j["ade"] = r.ade;
  j["fde"] = r.fde;
  j["step_error"] = r.step_error;
  return j;
}

inline constexpr std::string_view kReportCsvHeader =
    "label,mode,horizon_ms,n_samples,n_failed,parameter_count,rmse_vx,rmse_vy,rmse_omega,"
    "max_vx,max_vy,max_omega,one_step_mse,ade,fde";

inline void write_report_row(std::ostream& os, const OpenLoopReport& r) {
  using detail::format_double;
  os << r.label << ',' << to_string(r.mode) << ',' << format_double(r.horizon_ms) << ','
     << r.n_samples << ',' << r.n_failed << ',' << r.parameter_count;
  for (double v : r.rmse) os << ',' << format_double(v);
  for (double v : r.max_err) os << ',' << format_double(v);
  os << ',' << format_double(r.one_step_mse) << ',' << format_double(r.ade) << ','
     << format_double(r.fde) << '\n';
}

inline void write_step_trace(std::ostream& os, const std::vector<OpenLoopReport>& reports) {
  os << "step,t_ms";
  for (const auto& r : reports) os << ',' << r.label << '_' << to_string(r.mode);
  os << '\n';
  std::size_t n = 0;
  for (const auto& r : reports) n = std::max(n, r.step_error.size());
  for (std::size_t k = 0; k < n; ++k) {
    os << k + 1;
    os << ',' << detail::format_double(reports.empty() ? 0.0 : reports[0].horizon_ms * static_cast<double>(k + 1) /
                                                          static_cast<double>(std::max<std::size_t>(1, reports[0].horizon_steps)));
    for (const auto& r : reports) {
      os << ',' << (k < r.step_error.size() ? detail::format_double(r.step_error[k]) : "");
    }
    os << '\n';
  }
}

namespace detail {

inline ControlInput replayed(const TelemetryRecord& r, ReplayInput mode) {
  return mode == ReplayInput::Feedback ? r.u_fb : r.u_cmd;
}

inline bool diverged(const BodyState& s, const Pose& p, double limit) {
  for (double v : {s.vx, s.vy, s.omega, p.x, p.y, p.theta}) {
    if (!std::isfinite(v) || std::abs(v) > limit) return true;
  }
  return false;
}

struct Accumulator {
  std::array<std::vector<double>, 3> pred, obs;
  std::vector<double> ade, fde;
  std::vector<double> step_sum;
  std::size_t failed = 0;

  explicit Accumulator(std::size_t horizon) : step_sum(horizon, 0.0) {}

  OpenLoopReport finish(std::string label, const EvalConfig& cfg, std::size_t horizon,
                        std::size_t param_count) const {
    OpenLoopReport r;
    r.label = std::move(label);
    r.mode = cfg.mode;
    r.horizon_ms = cfg.horizon_ms;
    r.horizon_steps = horizon;
    r.n_samples = ade.size();
    r.n_failed = failed;
    r.parameter_count = param_count;
    if (ade.empty()) return r;
    double mse = 0;
    for (int c = 0; c < 3; ++c) {
      r.rmse[c] = pavd::rmse(pred[c], obs[c]);
      r.max_err[c] = max_abs_err(pred[c], obs[c]);
      mse += r.rmse[c] * r.rmse[c];
    }
    r.one_step_mse = mse / 3.0;
    for (double v : ade) r.ade += v;
    for (double v : fde) r.fde += v;
    r.ade /= static_cast<double>(ade.size());
    r.fde /= static_cast<double>(fde.size());
    r.step_error = step_sum;
    for (auto& v : r.step_error) v /= static_cast<double>(ade.size());
    return r;
  }
};

}  // namespace detail

/// Rolls each window of `series` forward over the horizon with parameters
/// from `model`, anchored at the recorded pose of the window's last step.
inline OpenLoopReport evaluate_open_loop(const nn::ParamModel& model, const TelemetrySeries& series,
                                         const VehicleGeometry& geom, const EvalConfig& cfg,
                                         std::string label = "model") {
  const std::size_t H = cfg.horizon_steps();
  const auto tau = static_cast<std::size_t>(model.history_len());
  if (cfg.stride == 0) throw Error(ErrorKind::Domain, "stride must be positive");
  const auto& rec = series.records;

  std::vector<std::size_t> lasts;  // index of each window's last record
  for (std::size_t last = tau - 1; last + H < rec.size(); last += cfg.stride) lasts.push_back(last);
  if (lasts.empty()) throw Error(ErrorKind::Window, "series too short for the evaluation horizon");

  const std::size_t W = lasts.size();
  std::vector<nn::History> hist(W);
  std::vector<BodyState> state(W);
  std::vector<Pose> pose(W);
  std::vector<bool> alive(W, true);
  std::vector<std::vector<Pose>> pred_poses(W);
  std::vector<ModelParams> held(W);
  for (std::size_t w = 0; w < W; ++w) {
    hist[w].assign(rec.begin() + static_cast<long>(lasts[w] + 1 - tau), rec.begin() + static_cast<long>(lasts[w] + 1));
    if (cfg.replay == ReplayInput::Commanded) {
      for (auto& r : hist[w]) r.u_fb = r.u_cmd;
    }
    state[w] = rec[lasts[w]].state;
    pose[w] = rec[lasts[w]].pose;
  }

  detail::Accumulator acc(H);
  for (std::size_t k = 0; k < H; ++k) {
    std::vector<const nn::History*> live;
    std::vector<std::size_t> live_idx;
    for (std::size_t w = 0; w < W; ++w) {
      if (alive[w]) {
        live.push_back(&hist[w]);
        live_idx.push_back(w);
      }
    }
    if (live.empty()) break;
    std::vector<ModelParams> params;
    if (k == 0 || cfg.reestimate) {
      params = model.estimate(live);
      if (k == 0) {
        for (std::size_t i = 0; i < live_idx.size(); ++i) held[live_idx[i]] = params[i];
      }
    } else {
      for (auto w : live_idx) params.push_back(held[w]);
    }
    for (std::size_t i = 0; i < live_idx.size(); ++i) {
      const auto w = live_idx[i];
      const auto& next_rec = rec[lasts[w] + k + 1];
      const ControlInput u = detail::replayed(rec[lasts[w] + k], cfg.replay);
      StepResult step;
      try {
        step = simulate_step(state[w], pose[w], u, params[i], geom, cfg.dt, cfg.mode);
      } catch (const Error&) {
        alive[w] = false;
        continue;
      }
      if (detail::diverged(step.state, step.pose, cfg.divergence_limit)) {
        alive[w] = false;
        continue;
      }
      if (k == 0) {
        const std::array<double, 3> p{step.state.vx, step.state.vy, step.state.omega};
        const std::array<double, 3> o{next_rec.state.vx, next_rec.state.vy, next_rec.state.omega};
        for (int c = 0; c < 3; ++c) {
          acc.pred[c].push_back(p[c]);
          acc.obs[c].push_back(o[c]);
        }
      }
      state[w] = step.state;
      pose[w] = step.pose;
      pred_poses[w].push_back(step.pose);
      // Slide the window: the predicted state with the next replayed inputs.
      TelemetryRecord r = next_rec;
      r.state = step.state;
      r.pose = step.pose;
      if (cfg.replay == ReplayInput::Commanded) r.u_fb = r.u_cmd;
      hist[w].erase(hist[w].begin());
      hist[w].push_back(r);
    }
  }

  // Windows that failed after step 0 still contributed one-step samples;
  // drop them so every metric uses the same window set.
  detail::Accumulator clean(H);
  std::size_t one_step_i = 0;
  for (std::size_t w = 0; w < W; ++w) {
    const bool has_one_step = !pred_poses[w].empty();
    if (alive[w]) {
      for (int c = 0; c < 3; ++c) {
        clean.pred[c].push_back(acc.pred[c][one_step_i]);
        clean.obs[c].push_back(acc.obs[c][one_step_i]);
      }
      std::vector<Pose> obs;
      for (std::size_t k = 0; k < H; ++k) obs.push_back(rec[lasts[w] + k + 1].pose);
      const auto d = displacement_errors(pred_poses[w], obs);
      clean.ade.push_back(d.ade);
      clean.fde.push_back(d.fde);
      for (std::size_t k = 0; k < H; ++k) {
        clean.step_sum[k] += std::hypot(pred_poses[w][k].x - obs[k].x, pred_poses[w][k].y - obs[k].y);
      }
    } else {
      ++clean.failed;
    }
    if (has_one_step) ++one_step_i;
  }
  return clean.finish(std::move(label), cfg, H, model.parameter_count());
}

/// Constant world-frame velocity extrapolation from the window's last record.
inline OpenLoopReport evaluate_constant_velocity(const TelemetrySeries& series, const EvalConfig& cfg,
                                                 std::size_t history_len = 12) {
  const std::size_t H = cfg.horizon_steps();
  const auto& rec = series.records;
  detail::Accumulator acc(H);
  for (std::size_t last = history_len - 1; last + H < rec.size(); last += cfg.stride) {
    const auto& r0 = rec[last];
    const double c = std::cos(r0.pose.theta), s = std::sin(r0.pose.theta);
    const double vxw = r0.state.vx * c - r0.state.vy * s;
    const double vyw = r0.state.vx * s + r0.state.vy * c;
    std::vector<Pose> pred, obs;
    for (std::size_t k = 1; k <= H; ++k) {
      const double t = cfg.dt * static_cast<double>(k);
      pred.push_back({r0.pose.x + t * vxw, r0.pose.y + t * vyw, r0.pose.theta});
      obs.push_back(rec[last + k].pose);
    }
    const std::array<double, 3> p{r0.state.vx, r0.state.vy, r0.state.omega};
    const auto& n = rec[last + 1].state;
    const std::array<double, 3> o{n.vx, n.vy, n.omega};
    for (int ci = 0; ci < 3; ++ci) {
      acc.pred[ci].push_back(p[ci]);
      acc.obs[ci].push_back(o[ci]);
    }
    const auto d = displacement_errors(pred, obs);
    acc.ade.push_back(d.ade);
    acc.fde.push_back(d.fde);
    for (std::size_t k = 0; k < H; ++k) acc.step_sum[k] += std::hypot(pred[k].x - obs[k].x, pred[k].y - obs[k].y);
  }
  if (acc.ade.empty()) throw Error(ErrorKind::Window, "series too short for the evaluation horizon");
  return acc.finish("constant-velocity", cfg, H, 0);
}

}  // namespace pavd
