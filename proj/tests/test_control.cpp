#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <sstream>

#include "fd.hpp"
#include "pavd/control/nmpc.hpp"
#include "pavd/control/pure_pursuit.hpp"
#include "pavd/raceloop.hpp"

using namespace pavd;

namespace {

TrackDefinition straight(double v_ref) {
  TrackDefinition d;
  d.name = "straight";
  for (int i = 0; i <= 400; ++i) d.centerline.push_back({0.05 * i, 0.0});
  d.half_width = {0.25};
  d.raceline = d.centerline;
  d.speed.assign(d.raceline.size(), v_ref);
  d.closed = false;
  return d;
}

TrackDefinition circle(double r) {
  TrackDefinition d;
  d.name = "circle";
  const int n = 400;
  for (int i = 0; i < n; ++i) {
    const double a = 2 * std::numbers::pi * i / n;
    d.centerline.push_back({r * std::cos(a), r * std::sin(a)});
  }
  d.half_width = {0.25};
  d.raceline = d.centerline;
  d.speed.assign(d.raceline.size(), 1.0);
  return d;
}

// Truth parameters with the Pacejka shifts removed, so the tyres are
// left/right symmetric.
ModelParams symmetric_params() {
  auto p = sim_truth_params();
  p.pacejka.Shf = p.pacejka.Svf = p.pacejka.Shr = p.pacejka.Svr = 0.0;
  return p;
}

// Throttle that holds speed v with zero slip.
double cruise_throttle(const ModelParams& p, double v) {
  const auto& d = p.drivetrain;
  return (d.Cr0 + d.Cr2 * v * v) / (d.Cm1 - d.Cm2 * v);
}

}  // namespace

TEST(PurePursuit, AlignedOnStraightSteersStraight) {
  Track t(straight(1.5));
  const auto u = pure_pursuit(t, {1.0, 0.0, 0.0}, {1.0, 0, 0}, sim_geometry(), {});
  EXPECT_NEAR(u.delta, 0.0, 1e-12);
}

TEST(PurePursuit, SteersTowardTheLine) {
  Track t(straight(1.5));
  // Right of the line: steer left (positive). Left of it: steer right.
  EXPECT_GT(pure_pursuit(t, {1.0, -0.1, 0.0}, {1.0, 0, 0}, sim_geometry(), {}).delta, 0.0);
  EXPECT_LT(pure_pursuit(t, {1.0, 0.1, 0.0}, {1.0, 0, 0}, sim_geometry(), {}).delta, 0.0);
}

TEST(PurePursuit, LongerLookaheadSteersLessOnACircle) {
  Track t(circle(1.0));
  const Pose pose{1.0, 0.0, std::numbers::pi / 2};
  PurePursuitConfig shortc, longc;
  shortc.lookahead = 0.2;
  longc.lookahead = 0.6;
  const auto a = pure_pursuit(t, pose, {0.0, 0, 0}, sim_geometry(), shortc);
  const auto b = pure_pursuit(t, pose, {0.0, 0, 0}, sim_geometry(), longc);
  EXPECT_GT(a.delta, 0.0);
  EXPECT_GT(b.delta, 0.0);
  // On an arc the pure-pursuit curvature is exact for any lookahead; the
  // geometric steering angle stays close to atan(L / R).
  EXPECT_NEAR(a.delta, std::atan(sim_geometry().wheelbase() / 1.0), 0.02);
  EXPECT_NEAR(b.delta, std::atan(sim_geometry().wheelbase() / 1.0), 0.02);
}

TEST(PurePursuit, OutputIsClipped) {
  Track t(straight(1.5));
  PurePursuitConfig cfg;
  cfg.lookahead = 0.01;
  const auto u = pure_pursuit(t, {1.0, -0.05, 0.0}, {0.0, 0, 0}, sim_geometry(), cfg);
  EXPECT_TRUE(InputBounds{}.contains(u));
  EXPECT_DOUBLE_EQ(u.delta, InputBounds{}.delta_max);
}

TEST(Nmpc, GradientMatchesFiniteDifferences) {
  Track t(builtin_track("ethz-like"));
  const auto geom = sim_geometry();
  const auto params = sim_truth_params();
  Nmpc mpc(NmpcConfig{});
  const auto p0 = start_pose(t, 1.0);
  const VehicleState x0{{1.6, 0.05, 0.8}, {p0.x + 0.03, p0.y - 0.02, p0.theta + 0.05}, {0.3, 0.1}};
  std::vector<ControlInput> u;
  for (int k = 0; k < mpc.config().horizon; ++k) u.push_back({0.4 - 0.02 * k, 0.15 + 0.01 * k});
  const auto refs = mpc.references(t, mpc.rollout(x0, u, params, geom));
  auto z = mpc.normalize(u);
  const auto g = mpc.gradient(x0, z, params, geom, refs);
  ASSERT_EQ(g.size(), z.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double h = 1e-6;
    auto zp = z, zm = z;
    zp[i] += h;
    zm[i] -= h;
    const double fd = (mpc.cost(x0, mpc.denormalize(zp), params, geom, refs) -
                       mpc.cost(x0, mpc.denormalize(zm), params, geom, refs)) /
                      (2 * h);
    EXPECT_NEAR(g[i], fd, 1e-5 * std::max(1.0, std::abs(fd))) << "input " << i;
  }
}

TEST(Nmpc, SolvedCostNotAboveZeroControls) {
  Track t(builtin_track("ethzmobil-like"));
  Nmpc mpc(NmpcConfig{});
  const auto p0 = start_pose(t, 2.0);
  const VehicleState x0{{1.8, 0.0, 0.5}, {p0.x, p0.y + 0.05, p0.theta}, {0.2, 0.0}};
  const auto sol = mpc.solve(x0, sim_truth_params(), sim_geometry(), t);
  EXPECT_LE(sol.cost, sol.zero_cost);
  EXPECT_LE(sol.cost, sol.initial_cost);
  EXPECT_EQ(sol.controls.size(), static_cast<std::size_t>(mpc.config().horizon));
  for (const auto& c : sol.controls) EXPECT_TRUE(mpc.config().bounds.contains(c));
}

TEST(Nmpc, SymmetricStraightLineKeepsWheelStraight) {
  const double v = 1.5;
  Track t(straight(v));
  const auto p = symmetric_params();
  NmpcConfig cfg;
  cfg.max_iter = 200;
  Nmpc mpc(cfg);
  const double T = cruise_throttle(p, v);
  const VehicleState x0{{v, 0, 0}, {2.0, 0.0, 0.0}, {T, 0.0}};
  const auto sol = mpc.solve(x0, p, sim_geometry(), t);
  for (const auto& c : sol.controls) EXPECT_LE(std::abs(c.delta), 1e-3);
}

TEST(Nmpc, WarmStartNeedsNoMoreIterations) {
  Track t(builtin_track("ethz-like"));
  const auto geom = sim_geometry();
  const auto params = sim_truth_params();
  Nmpc warm(NmpcConfig{});
  const auto p0 = start_pose(t, 3.0);
  VehicleState x{{1.7, 0.0, 0.3}, p0, {0.3, 0.0}};
  const auto first = warm.solve(x, params, geom, t);
  // Advance the plant by the first control, then solve again warm and cold.
  const double a = lag_alpha(0.02, warm.config().model_actuator_tau);
  x.actuator = {x.actuator.T + a * (first.controls[0].T - x.actuator.T),
                x.actuator.delta + a * (first.controls[0].delta - x.actuator.delta)};
  const auto s = simulate_step(x.body, x.pose, x.actuator, params, geom, 0.02);
  x.body = s.state;
  x.pose = s.pose;
  const auto w = warm.solve(x, params, geom, t);
  Nmpc cold(NmpcConfig{});
  const auto c = cold.solve(x, params, geom, t);
  EXPECT_LE(w.iterations, c.iterations);
  EXPECT_LE(w.cost, c.initial_cost);
}

TEST(Nmpc, MaxIterationsReportsNotConverged) {
  Track t(builtin_track("ethz-like"));
  NmpcConfig cfg;
  cfg.max_iter = 1;
  Nmpc mpc(cfg);
  const auto p0 = start_pose(t, 0.0);
  const auto sol = mpc.solve({{1.0, 0, 0}, {p0.x, p0.y + 0.1, p0.theta + 0.3}, {0, 0}},
                             sim_truth_params(), sim_geometry(), t);
  EXPECT_EQ(sol.iterations, 1);
  EXPECT_FALSE(sol.converged);
}

TEST(Nmpc, NearStandstillStaysFinite) {
  Track t(builtin_track("ethz-like"));
  Nmpc mpc(NmpcConfig{});
  const auto p0 = start_pose(t, 0.0);
  const auto sol = mpc.solve({{0.01, 0, 0}, p0, {0, 0}}, sim_truth_params(), sim_geometry(), t);
  EXPECT_TRUE(std::isfinite(sol.cost));
  EXPECT_GT(sol.controls.front().T, 0.0);  // it wants to get going
  for (const auto& s : sol.predicted) EXPECT_TRUE(finite(s.body) && finite(s.pose));
}

TEST(Nmpc, RejectsBadConfig) {
  NmpcConfig cfg;
  cfg.horizon = 0;
  EXPECT_THROW(Nmpc{cfg}, Error);
  cfg = {};
  cfg.weights.lateral = -1;
  EXPECT_THROW(Nmpc{cfg}, Error);
}

TEST(Violations, CountsEntriesIntoTheOffTrackRegion) {
  Track t(straight(1.0));
  for (int k : {0, 1, 2, 5}) {
    // Weave across the right edge (y = -0.25) exactly k times.
    std::vector<double> exc;
    for (int i = 0; i < 20; ++i) exc.push_back(t.excursion({0.5 + 0.1 * i, -0.1}));
    for (int j = 0; j < k; ++j) {
      exc.push_back(t.excursion({3.0 + j, -0.3}));
      exc.push_back(t.excursion({3.2 + j, -0.4}));
      exc.push_back(t.excursion({3.4 + j, -0.2}));
    }
    EXPECT_EQ(count_violations(exc), k);
  }
  EXPECT_EQ(count_violations({0.1, 0.2, -0.1}), 1);  // starting outside counts
  EXPECT_EQ(count_violations({}), 0);
}

TEST(Race, TruthModelCompletesLapCleanly) {
  Track t(builtin_track("ethz-like"));
  const auto model = nn::ParamModel::fixed(sim_truth_params());
  RaceConfig cfg;
  const auto r = run_race(t, sim_truth_params(), sim_geometry(), model, cfg);
  ASSERT_TRUE(r.completed) << r.abort_reason;
  EXPECT_EQ(r.violations, 0);
  EXPECT_GT(r.nmpc_solves, 0);
  EXPECT_EQ(r.nmpc_failures, 0);
  EXPECT_GT(r.lap_time, 0.0);
  ASSERT_EQ(r.lap_times.size(), 1u);
  // The first few commands come from the warm-up controller.
  EXPECT_EQ(r.trace.front().nmpc, 0);
  EXPECT_EQ(r.trace.back().nmpc, 1);
}

TEST(Race, PurePursuitRunsWithoutSolver) {
  Track t(builtin_track("ethzmobil-like"));
  RaceConfig cfg;
  cfg.controller = Controller::PurePursuit;
  cfg.laps = 2;
  const auto r = run_race(t, sim_truth_params(), sim_geometry(),
                          nn::ParamModel::fixed(sim_truth_params()), cfg);
  ASSERT_TRUE(r.completed);
  EXPECT_EQ(r.lap_times.size(), 2u);
  EXPECT_EQ(r.nmpc_solves, 0);
  // Lap time is roughly length over mean speed.
  EXPECT_NEAR(r.lap_time, t.length() / r.mean_vx, 0.1 * r.lap_time);
}

TEST(Race, IsDeterministic) {
  Track t(builtin_track("ethzmobil-like"));
  const auto model = nn::ParamModel::fixed(sim_truth_params());
  const auto a = run_race(t, sim_truth_params(), sim_geometry(), model, {});
  const auto b = run_race(t, sim_truth_params(), sim_geometry(), model, {});
  EXPECT_TRUE(a == b);
  std::ostringstream sa, sb;
  write_race_trace(sa, a);
  write_race_trace(sb, b);
  EXPECT_EQ(sa.str(), sb.str());
  EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
}

TEST(Race, TimeLimitAborts) {
  Track t(builtin_track("ethz-like"));
  RaceConfig cfg;
  cfg.max_time = 1.0;
  const auto r = run_race(t, sim_truth_params(), sim_geometry(),
                          nn::ParamModel::fixed(sim_truth_params()), cfg);
  EXPECT_FALSE(r.completed);
  EXPECT_EQ(r.abort_reason, "time limit reached");
  EXPECT_EQ(r.lap_time, 0.0);
}
