#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fd.hpp"
#include "pavd/estimator/estimator.hpp"

using namespace pavd;
using namespace pavd::nn;

namespace {

NetworkConfig tiny(int tau = 3, int h = 4, std::vector<int> dense = {5}) {
  NetworkConfig cfg;
  cfg.history_len = tau;
  cfg.gru_hidden = h;
  cfg.gru_layers = 1;
  cfg.dense_widths = std::move(dense);
  return cfg;
}

// Short driven sequence from the truth model with lagged actuators.
TelemetrySeries drive(std::size_t n, std::uint64_t seed, double dt = 0.02) {
  const auto g = sim_geometry();
  const auto p = sim_truth_params();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1, 1);
  TelemetrySeries s;
  s.rate_hz = 1.0 / dt;
  s.source = Source::Synthetic;
  BodyState x{1.2, 0, 0};
  Pose pose{};
  ControlInput fb{0.2, 0}, cmd{0.2, 0};
  for (std::size_t k = 0; k < n; ++k) {
    if (k % 10 == 0) cmd = {0.25 + 0.15 * u(rng), 0.3 * u(rng)};
    fb.T += 0.3 * (cmd.T - fb.T);
    fb.delta += 0.3 * (cmd.delta - fb.delta);
    s.records.push_back({static_cast<double>(k) * dt, x, pose, fb, cmd});
    const auto r = simulate_step(x, pose, fb, p, g, dt);
    x = r.state;
    pose = r.pose;
  }
  return s;
}

// Output bias that makes the network emit `p` exactly when out.w == 0.
void freeze_output(Network& net, const ModelParams& p, const ParamBounds& b) {
  net.mat(net.out_w_block()).setZero();
  const auto v = p.flatten();
  for (std::size_t i = 0; i < kNumParams; ++i) {
    const double s = (v[i] - b.lo[i]) / b.width(i);
    net.vec(net.out_b_block())(static_cast<Eigen::Index>(i)) = std::log(s / (1 - s));
  }
}

std::vector<std::size_t> iota(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

}  // namespace

TEST(Adam, ZeroGradientLeavesParameters) {
  std::vector<double> p{1.0, -2.0};
  OptimizerState opt;
  adam_step(p, {0.0, 0.0}, opt, 1e-3);
  EXPECT_EQ(p[0], 1.0);
  EXPECT_EQ(p[1], -2.0);
  EXPECT_EQ(opt.step, 1);
}

TEST(Adam, FirstStepHasMagnitudeLr) {
  std::vector<double> p{0.0, 0.0, 0.0};
  OptimizerState opt;
  adam_step(p, {0.5, -3.0, 1e-3}, opt, 1e-3);
  EXPECT_NEAR(p[0], -1e-3, 1e-10);
  EXPECT_NEAR(p[1], 1e-3, 1e-10);
  EXPECT_NEAR(p[2], -1e-3, 1e-7);
}

TEST(Adam, TwoStepRecursion) {
  // Hand-computed: g1 = 2, g2 = -1, lr = 0.1.
  // m1 = 0.2, v1 = 0.004 -> mhat 2, vhat 4 -> x1 = 1 - 0.1*2/(2+1e-8)
  // m2 = 0.18 - 0.1 = 0.08, v2 = 0.003996 + 0.001 = 0.004996
  // mhat2 = 0.08/0.19, vhat2 = 0.004996/0.001999
  std::vector<double> p{1.0};
  OptimizerState opt;
  adam_step(p, {2.0}, opt, 0.1);
  const double x1 = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
  EXPECT_NEAR(p[0], x1, 1e-15);
  adam_step(p, {-1.0}, opt, 0.1);
  const double mhat = 0.08 / (1 - 0.81);
  const double vhat = 0.004996 / (1 - 0.998001);
  EXPECT_NEAR(p[0], x1 - 0.1 * mhat / (std::sqrt(vhat) + 1e-8), 1e-12);
  EXPECT_THROW(adam_step(p, {1.0, 2.0}, opt, 0.1), Error);
}

TEST(Schedule, Shape) {
  const Schedule s{1e-3, 10, 110};
  EXPECT_EQ(lr_schedule(0, s), 0.0);
  EXPECT_DOUBLE_EQ(lr_schedule(5, s), 5e-4);
  EXPECT_DOUBLE_EQ(lr_schedule(10, s), 1e-3);
  EXPECT_NEAR(lr_schedule(60, s), 5e-4, 1e-18);
  EXPECT_NEAR(lr_schedule(110, s), 0.0, 1e-19);
  EXPECT_THROW(lr_schedule(111, s), Error);
  EXPECT_THROW(lr_schedule(-1, s), Error);
}

TEST(Loss, Examples) {
  EXPECT_EQ(mse_loss(BodyState{1, 2, 3}, BodyState{1, 2, 3}), 0.0);
  EXPECT_DOUBLE_EQ(mse_loss(BodyState{2, 3, 4}, BodyState{1, 2, 3}), 1.0);
  EXPECT_DOUBLE_EQ(mse_loss(BodyState{3, 0, 0}, BodyState{0, 0, 0}), 3.0);
}

TEST(Estimate, ZeroNetworkGivesMidpoints) {
  const auto prof = builtin_profile(Profile::Sim);
  Network net(tiny());
  const auto series = drive(10, 1);
  const auto w = make_windows(series, 3);
  const auto p = estimate_params(w[0].history, net, prof).params.flatten();
  const auto mid = prof.bounds.midpoints().flatten();
  for (std::size_t i = 0; i < kNumParams; ++i) EXPECT_NEAR(p[i], mid[i], 1e-15 * std::abs(mid[i]) + 1e-300);
  History short_window(w[0].history.begin(), w[0].history.begin() + 2);
  EXPECT_THROW(estimate_params(short_window, net, prof), Error);
}

TEST(Estimate, BatchOrderDoesNotMatter) {
  const auto prof = builtin_profile(Profile::Sim);
  Network net(tiny());
  net.initialize(3, 1.0);
  const auto w = make_windows(drive(20, 2), 3);
  std::vector<const History*> fwd{&w[0].history, &w[5].history, &w[9].history};
  std::vector<const History*> rev{&w[9].history, &w[5].history, &w[0].history};
  const auto a = estimate_batch(fwd, net, prof.bounds);
  const auto b = estimate_batch(rev, net, prof.bounds);
  EXPECT_EQ(a[0].flatten(), b[2].flatten());
  EXPECT_EQ(a[1].flatten(), b[1].flatten());
  for (const auto& p : a) EXPECT_TRUE(validate(p, prof.bounds).empty());
}

TEST(Estimate, FrozenTruthReproducesSimulator) {
  const auto prof = builtin_profile(Profile::Sim);
  Network net(tiny());
  net.initialize(4);
  freeze_output(net, sim_truth_params(), prof.bounds);
  const auto series = drive(40, 3);
  const auto ws = make_windows(series, 3);
  for (const auto& w : ws) {
    const auto pred = predict_next_state(w.history, net, prof, sim_geometry(), 0.02, PhysicsMode::Full);
    EXPECT_NEAR(pred.vx, w.target.vx, 1e-12);
    EXPECT_NEAR(pred.vy, w.target.vy, 1e-12);
    EXPECT_NEAR(pred.omega, w.target.omega, 1e-10);
  }
}

TEST(Gradient, FullPipelineMatchesFiniteDifferences) {
  const auto prof = builtin_profile(Profile::Sim);
  const auto geom = sim_geometry();
  const auto ws = make_windows(drive(60, 4), 3);
  int checked = 0;
  for (int trial = 0; trial < 20; ++trial) {
    Network net(tiny(3, 4, {5}));
    net.initialize(200 + static_cast<std::uint64_t>(trial), 1.0);
    const std::vector<std::size_t> idx{static_cast<std::size_t>(2 * trial),
                                       static_cast<std::size_t>(2 * trial + 7)};
    const LossOptions opts{PhysicsMode::Full, {1, 1, 1}, 1.0};
    const auto g = loss_and_gradient(net, ws, idx, prof.bounds, geom, 0.02, opts, false);
    auto f = [&](const std::vector<double>& theta) {
      Network n2 = net;
      n2.parameters() = theta;
      return batch_loss(n2, ws, idx, prof.bounds, geom, 0.02, opts);
    };
    EXPECT_NEAR(g.loss, f(net.parameters()), 1e-12 * std::max(1.0, g.loss));
    EXPECT_LE(test::rel_error(g.grad, test::central_diff(f, net.parameters())), 1e-4);
    ++checked;
  }
  EXPECT_GE(checked, 20);
}

TEST(Gradient, ZeroLossGivesZeroGradient) {
  const auto prof = builtin_profile(Profile::Sim);
  Network net(tiny());
  net.initialize(5);
  freeze_output(net, sim_truth_params(), prof.bounds);
  const auto ws = make_windows(drive(30, 5), 3);
  const std::vector<std::size_t> idx{0, 4, 8};
  const auto g = loss_and_gradient(net, ws, idx, prof.bounds, sim_geometry(), 0.02, {}, false);
  EXPECT_LT(g.loss, 1e-25);
  double mx = 0;
  for (double v : g.grad) mx = std::max(mx, std::abs(v));
  EXPECT_LT(mx, 1e-9);
}

TEST(Gradient, ScaleIsLinear) {
  const auto prof = builtin_profile(Profile::Sim);
  Network net(tiny());
  net.initialize(6, 1.0);
  const auto ws = make_windows(drive(30, 6), 3);
  const std::vector<std::size_t> idx{1, 2, 3};
  LossOptions o1, o2;
  o2.scale = 2.0;
  const auto a = loss_and_gradient(net, ws, idx, prof.bounds, sim_geometry(), 0.02, o1, false);
  const auto b = loss_and_gradient(net, ws, idx, prof.bounds, sim_geometry(), 0.02, o2, false);
  EXPECT_DOUBLE_EQ(b.loss, 2 * a.loss);
  for (std::size_t i = 0; i < a.grad.size(); ++i) EXPECT_DOUBLE_EQ(b.grad[i], 2 * a.grad[i]);
}

TEST(Batches, TrailingSingletonIsFolded) {
  const auto b = make_batches(iota(9), 4);
  ASSERT_EQ(b.size(), 2u);
  EXPECT_EQ(b[1].size(), 5u);
  EXPECT_EQ(make_batches(iota(8), 4).size(), 2u);
}

TEST(Train, ReducesLossDeterministicallyAndStaysFeasible) {
  const auto prof = builtin_profile(Profile::Sim);
  const auto geom = sim_geometry();
  const auto train_w = make_windows(drive(400, 7), 4);
  const auto val_w = make_windows(drive(150, 8), 4);
  TrainConfig cfg;
  cfg.batch_size = 32;
  cfg.epochs = 6;
  cfg.seed = 17;
  cfg.base_lr = 3e-3;
  auto run = [&] {
    Network net(tiny(4, 8, {16}));
    net.initialize(1);
    OptimizerState opt;
    auto h = train(train_w, val_w, net, opt, cfg, prof.bounds, geom, 0.02);
    return std::make_pair(h, net);
  };
  const auto [h1, n1] = run();
  const auto [h2, n2] = run();
  EXPECT_EQ(h1.train_loss, h2.train_loss);
  EXPECT_EQ(h1.val_loss, h2.val_loss);
  EXPECT_TRUE(n1 == n2);
  EXPECT_EQ(h1.guard_violations, 0u);
  EXPECT_EQ(h1.params_emitted, 6 * train_w.size());
  EXPECT_LT(h1.train_loss.back(), h1.train_loss.front());
}

TEST(Train, ResumeContinuesStepCount) {
  const auto prof = builtin_profile(Profile::Sim);
  const auto ws = make_windows(drive(100, 9), 3);
  Network net(tiny());
  net.initialize(2);
  OptimizerState opt;
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 16;
  const auto h = train(ws, {}, net, opt, cfg, prof.bounds, sim_geometry(), 0.02);
  EXPECT_EQ(h.first_step, 0);
  EXPECT_EQ(h.last_step, opt.step);
  const auto h2 = train(ws, {}, net, opt, cfg, prof.bounds, sim_geometry(), 0.02);
  EXPECT_EQ(h2.first_step, h.last_step);
  EXPECT_TRUE(h2.val_loss.empty());
}

TEST(Train, StandardizationIsFitOnce) {
  const auto ws = make_windows(drive(60, 10), 3);
  Network net(tiny());
  net.initialize(3);
  OptimizerState opt;
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.standardize = true;
  train(ws, {}, net, opt, cfg, builtin_profile(Profile::Sim).bounds, sim_geometry(), 0.02);
  ASSERT_TRUE(net.scaling().enabled);
  EXPECT_EQ(net.scaling().mean.size(), 7u);
  EXPECT_GT(net.scaling().stddev[0], 0.0);
}

TEST(ParamModelTest, FixedReturnsSameParams) {
  const auto m = ParamModel::fixed(sim_truth_params(), 3);
  const auto ws = make_windows(drive(10, 11), 3);
  EXPECT_EQ(m.estimate(ws[0].history).flatten(), sim_truth_params().flatten());
  EXPECT_FALSE(m.is_neural());
  EXPECT_NEAR(one_step_mse(m, ws, sim_geometry(), 0.02, PhysicsMode::Full), 0.0, 1e-28);
}

TEST(Loss, DeltaVarianceWeightsMatchHandComputation) {
  // Two windows with one-step changes (1, 2, 4) and (3, 2, 0): the variances
  // are 1, 0 and 4, so vy must be rejected; shifting vy fixes that.
  std::vector<SampleWindow> w(2);
  for (auto& x : w) x.history.resize(2);
  w[0].history.back().state = {0, 0, 0};
  w[0].target = {1, 2, 4};
  w[1].history.back().state = {1, 1, 1};
  w[1].target = {4, 3, 1};
  EXPECT_THROW(delta_variance_weights(w), Error);
  w[1].target.vy = 4;  // deltas for vy become 2 and 3, variance 0.25
  const auto lw = delta_variance_weights(w);
  EXPECT_DOUBLE_EQ(lw[0], 1.0);
  EXPECT_DOUBLE_EQ(lw[1], 4.0);
  EXPECT_DOUBLE_EQ(lw[2], 0.25);
}

TEST(Train, BalancedLossRecordsItsWeights) {
  const auto prof = builtin_profile(Profile::Sim);
  const auto train_w = make_windows(drive(200, 3), 4);
  TrainConfig cfg;
  cfg.batch_size = 32;
  cfg.epochs = 2;
  cfg.balance_loss = true;
  Network net(tiny(4, 8, {16}));
  net.initialize(2);
  OptimizerState opt;
  const auto h = train(train_w, {}, net, opt, cfg, prof.bounds, sim_geometry(), 0.02);
  EXPECT_EQ(h.loss_weights, delta_variance_weights(train_w));
  EXPECT_GT(h.loss_weights[0], h.loss_weights[2]);  // yaw rate changes fastest
}
