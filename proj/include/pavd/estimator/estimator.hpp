#pragma once

// End-to-end estimator: window features -> GRU/dense network -> guard
// projection -> one physics step, with the loss gradient flowing back through
// every stage.

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <utility>
#include <vector>

#include "pavd/dynamics.hpp"
#include "pavd/estimator/network.hpp"
#include "pavd/estimator/optimizer.hpp"
#include "pavd/param_guard.hpp"
#include "pavd/telemetry.hpp"

namespace pavd::nn {

using History = std::vector<TelemetryRecord>;

inline std::array<double, kFeatureDim> features(const TelemetryRecord& r) {
  return {r.state.vx, r.state.vy, r.state.omega, r.u_fb.T, r.u_fb.delta, r.u_cmd.T, r.u_cmd.delta};
}

/// Window as a (tau x 7) tensor.
inline Tensor window_tensor(const History& history) {
  Tensor t({history.size(), static_cast<std::size_t>(kFeatureDim)});
  for (std::size_t i = 0; i < history.size(); ++i) {
    const auto f = features(history[i]);
    std::copy(f.begin(), f.end(), t.data.begin() + static_cast<long>(i * kFeatureDim));
  }
  return t;
}

/// Stacks histories into per-step batch matrices.
inline SequenceBatch to_sequence(std::span<const History* const> histories) {
  if (histories.empty()) throw Error(ErrorKind::Window, "empty batch");
  const std::size_t tau = histories.front()->size();
  SequenceBatch seq(tau, RowMat(static_cast<Eigen::Index>(histories.size()), kFeatureDim));
  for (std::size_t b = 0; b < histories.size(); ++b) {
    if (histories[b]->size() != tau) throw Error(ErrorKind::Window, "ragged window batch");
    for (std::size_t t = 0; t < tau; ++t) {
      const auto f = features((*histories[b])[t]);
      for (int c = 0; c < kFeatureDim; ++c) seq[t](static_cast<Eigen::Index>(b), c) = f[static_cast<std::size_t>(c)];
    }
  }
  return seq;
}

inline SequenceBatch to_sequence(const std::vector<SampleWindow>& windows,
                                 std::span<const std::size_t> idx) {
  std::vector<const History*> hs;
  hs.reserve(idx.size());
  for (auto i : idx) hs.push_back(&windows[i].history);
  return to_sequence(hs);
}

/// Single-window GRU pass (tensor in, final hidden vector out).
inline Tensor gru_forward(const Tensor& window, const Network& net) {
  const auto& cfg = net.config();
  if (window.rank() != 2 || window.shape[1] != static_cast<std::size_t>(cfg.input_dim)) {
    throw Error(ErrorKind::Dimension, "window tensor must be tau x input_dim");
  }
  SequenceBatch seq;
  for (std::size_t t = 0; t < window.shape[0]; ++t) {
    seq.emplace_back(ConstMatMap(window.data.data() + t * window.shape[1], 1,
                                 static_cast<Eigen::Index>(window.shape[1])));
  }
  RowMat h = gru_forward(seq, net, nullptr);
  return Tensor({static_cast<std::size_t>(h.cols())}, std::vector<double>(h.data(), h.data() + h.size()));
}

inline std::array<double, kNumParams> row_array(const RowMat& m, Eigen::Index row) {
  std::array<double, kNumParams> a{};
  for (std::size_t i = 0; i < kNumParams; ++i) a[i] = m(row, static_cast<Eigen::Index>(i));
  return a;
}

/// Eval-mode parameter estimates for a batch of histories.
inline std::vector<ModelParams> estimate_batch(std::span<const History* const> histories,
                                               const Network& net, const ParamBounds& bounds) {
  for (const auto* h : histories) {
    if (static_cast<int>(h->size()) != net.config().history_len) {
      throw Error(ErrorKind::Window, "window has " + std::to_string(h->size()) +
                                         " steps, expected " +
                                         std::to_string(net.config().history_len));
    }
  }
  const RowMat z = head_forward(gru_forward(to_sequence(histories), net, nullptr), net);
  std::vector<ModelParams> out;
  out.reserve(histories.size());
  for (Eigen::Index b = 0; b < z.rows(); ++b) {
    out.push_back(ModelParams::unflatten(project_values(row_array(z, b), bounds)));
  }
  return out;
}

/// Parameters for one window. Train mode uses single-sample batch statistics
/// and leaves the running statistics alone.
inline GuardedParams estimate_params(const History& history, const Network& net,
                                     const BoundsProfile& profile, Mode mode = Mode::Eval) {
  if (static_cast<int>(history.size()) != net.config().history_len) {
    throw Error(ErrorKind::Window, "incomplete window");
  }
  const History* hp = &history;
  if (mode == Mode::Eval) {
    return {estimate_batch(std::span<const History* const>(&hp, 1), net, profile.bounds).front(),
            profile.name};
  }
  Network scratch = net;
  const RowMat z = head_forward(gru_forward(to_sequence(std::span<const History* const>(&hp, 1)), net, nullptr),
                                scratch, Mode::Train, nullptr, false);
  return project(row_array(z, 0), profile);
}

/// Applied input for the physics step: the recorded feedback control at the
/// window's last step.
inline ControlInput applied_input(const History& history) { return history.back().u_fb; }

inline BodyState predict_next_state(const History& history, const Network& net,
                                    const BoundsProfile& profile, const VehicleGeometry& geom,
                                    double dt, PhysicsMode mode) {
  const auto p = estimate_params(history, net, profile).params;
  return next_body_state(history.back().state, applied_input(history), p, geom, dt, mode);
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

using LossWeights = std::array<double, 3>;

/// Mean over the batch of the mean squared error over (vx, vy, omega).
inline double mse_loss(std::span<const BodyState> pred, std::span<const BodyState> obs,
                       const LossWeights& w = {1, 1, 1}) {
  if (pred.size() != obs.size() || pred.empty()) {
    throw Error(ErrorKind::Dimension, "mse_loss needs equal, non-empty batches");
  }
  double sum = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double e0 = pred[i].vx - obs[i].vx;
    const double e1 = pred[i].vy - obs[i].vy;
    const double e2 = pred[i].omega - obs[i].omega;
    sum += (w[0] * e0 * e0 + w[1] * e1 * e1 + w[2] * e2 * e2) / 3.0;
  }
  return sum / static_cast<double>(pred.size());
}

/// Per-component weights 1 / Var(x[k+1] - x[k]) over a window set. With them
/// the loss reads as the share of one-step change left unexplained, and the
/// stiff yaw-rate channel no longer drowns out vx and vy.
inline LossWeights delta_variance_weights(const std::vector<SampleWindow>& windows) {
  if (windows.size() < 2) throw Error(ErrorKind::Window, "need at least two windows for delta variances");
  std::array<double, 3> mean{}, sq{};
  for (const auto& w : windows) {
    const auto& c = w.current().state;
    const std::array<double, 3> d{w.target.vx - c.vx, w.target.vy - c.vy, w.target.omega - c.omega};
    for (std::size_t j = 0; j < 3; ++j) {
      mean[j] += d[j];
      sq[j] += d[j] * d[j];
    }
  }
  const auto n = static_cast<double>(windows.size());
  LossWeights out;
  for (std::size_t j = 0; j < 3; ++j) {
    const double var = sq[j] / n - (mean[j] / n) * (mean[j] / n);
    if (!(var > 0)) throw Error(ErrorKind::Data, "a state component never changes; cannot balance the loss");
    out[j] = 1.0 / var;
  }
  return out;
}

inline double mse_loss(const BodyState& pred, const BodyState& obs) {
  return mse_loss(std::span<const BodyState>(&pred, 1), std::span<const BodyState>(&obs, 1));
}

using ParamJacobian = Eigen::Matrix<double, 3, static_cast<int>(kNumParams)>;

/// Next body state and its Jacobian with respect to the 17 parameters.
inline std::pair<BodyState, ParamJacobian> step_param_jacobian(const BodyState& state,
                                                               const ControlInput& u,
                                                               const ModelParams& params,
                                                               const VehicleGeometry& geom,
                                                               double dt, PhysicsMode mode) {
  using J = Jet<static_cast<int>(kNumParams)>;
  const auto flat = params.flatten();
  std::array<J, kNumParams> jp;
  for (std::size_t i = 0; i < kNumParams; ++i) jp[i] = J(flat[i], static_cast<int>(i));
  const auto jparams = BasicModelParams<J>::unflatten(jp);
  const BasicBodyState<J> js{J(state.vx), J(state.vy), J(state.omega)};
  const BasicControl<J> ju{J(u.T), J(u.delta)};
  const auto next = next_body_state(js, ju, jparams, geom, dt, mode);
  ParamJacobian jac;
  jac.row(0) = next.vx.v.transpose();
  jac.row(1) = next.vy.v.transpose();
  jac.row(2) = next.omega.v.transpose();
  return {{next.vx.a, next.vy.a, next.omega.a}, jac};
}

struct LossOptions {
  PhysicsMode mode = PhysicsMode::Full;
  LossWeights weights = {1, 1, 1};
  double scale = 1.0;  // multiplies the loss (and hence every gradient)
};

struct BatchGradient {
  double loss = 0;
  std::vector<double> grad;
  std::size_t guard_violations = 0;
};

/// Train-mode forward and reverse pass over a batch of windows.
inline BatchGradient loss_and_gradient(Network& net, const std::vector<SampleWindow>& windows,
                                       std::span<const std::size_t> idx, const ParamBounds& bounds,
                                       const VehicleGeometry& geom, double dt,
                                       const LossOptions& opts, bool update_stats) {
  if (idx.empty()) throw Error(ErrorKind::Window, "empty batch");
  for (auto i : idx) {
    if (static_cast<int>(windows[i].history.size()) != net.config().history_len) {
      throw Error(ErrorKind::Window, "incomplete window in batch");
    }
  }
  ForwardCache cache;
  const RowMat hidden = gru_forward(to_sequence(windows, idx), net, &cache);
  const RowMat z = head_forward(hidden, net, Mode::Train, &cache, update_stats);

  const auto batch = static_cast<double>(idx.size());
  BatchGradient out;
  RowMat dz(z.rows(), z.cols());
  for (Eigen::Index b = 0; b < z.rows(); ++b) {
    const auto& w = windows[idx[static_cast<std::size_t>(b)]];
    const auto zrow = row_array(z, b);
    const auto p = ModelParams::unflatten(project_values(zrow, bounds));
    out.guard_violations += validate(p, bounds).empty() ? 0 : 1;
    const auto [pred, jac] =
        step_param_jacobian(w.current().state, applied_input(w.history), p, geom, dt, opts.mode);
    const Eigen::Vector3d err(pred.vx - w.target.vx, pred.vy - w.target.vy,
                              pred.omega - w.target.omega);
    const Eigen::Vector3d wv(opts.weights[0], opts.weights[1], opts.weights[2]);
    out.loss += opts.scale * (wv.array() * err.array().square()).sum() / (3.0 * batch);
    const Eigen::Vector3d dpred = opts.scale * 2.0 * (wv.array() * err.array()).matrix() / (3.0 * batch);
    const Eigen::Matrix<double, static_cast<int>(kNumParams), 1> dp = jac.transpose() * dpred;
    const auto dproj = project_jacobian(zrow, bounds);
    for (std::size_t i = 0; i < kNumParams; ++i) {
      dz(b, static_cast<Eigen::Index>(i)) = dp(static_cast<Eigen::Index>(i)) * dproj[i];
    }
  }
  out.grad.assign(net.parameter_count(), 0.0);
  network_backward(dz, net, cache, out.grad);
  return out;
}

/// Loss only (Train-mode batch statistics, running statistics untouched).
inline double batch_loss(const Network& net, const std::vector<SampleWindow>& windows,
                         std::span<const std::size_t> idx, const ParamBounds& bounds,
                         const VehicleGeometry& geom, double dt, const LossOptions& opts) {
  Network scratch = net;
  const RowMat hidden = gru_forward(to_sequence(windows, idx), scratch, nullptr);
  const RowMat z = head_forward(hidden, scratch, Mode::Train, nullptr, false);
  std::vector<BodyState> pred, obs;
  for (Eigen::Index b = 0; b < z.rows(); ++b) {
    const auto& w = windows[idx[static_cast<std::size_t>(b)]];
    const auto p = ModelParams::unflatten(project_values(row_array(z, b), bounds));
    pred.push_back(next_body_state(w.current().state, applied_input(w.history), p, geom, dt, opts.mode));
    obs.push_back(w.target);
  }
  return opts.scale * mse_loss(pred, obs, opts.weights);
}

// ---------------------------------------------------------------------------
// Parameter source used by evaluation and the race loop
// ---------------------------------------------------------------------------

/// Either a trained network behind the guard or a fixed parameter set.
class ParamModel {
 public:
  static ParamModel fixed(const ModelParams& p, int history_len = 12) {
    ParamModel m;
    m.fixed_ = p;
    m.history_len_ = history_len;
    return m;
  }

  static ParamModel neural(Network net, BoundsProfile profile) {
    ParamModel m;
    m.history_len_ = net.config().history_len;
    m.net_ = std::move(net);
    m.profile_ = profile;
    return m;
  }

  bool is_neural() const { return net_.has_value(); }
  int history_len() const { return history_len_; }
  std::size_t parameter_count() const { return net_ ? net_->parameter_count() : 0; }
  const Network* network() const { return net_ ? &*net_ : nullptr; }

  std::vector<ModelParams> estimate(std::span<const History* const> histories) const {
    if (!net_) return std::vector<ModelParams>(histories.size(), *fixed_);
    return estimate_batch(histories, *net_, profile_.bounds);
  }

  ModelParams estimate(const History& h) const {
    const History* hp = &h;
    return estimate(std::span<const History* const>(&hp, 1)).front();
  }

 private:
  std::optional<ModelParams> fixed_;
  std::optional<Network> net_;
  BoundsProfile profile_;
  int history_len_ = 12;
};

/// Eval-mode one-step MSE over a set of windows.
inline double one_step_mse(const ParamModel& model, const std::vector<SampleWindow>& windows,
                           const VehicleGeometry& geom, double dt, PhysicsMode mode,
                           std::size_t chunk = 512) {
  if (windows.empty()) throw Error(ErrorKind::Window, "no windows to evaluate");
  std::vector<BodyState> pred, obs;
  for (std::size_t start = 0; start < windows.size(); start += chunk) {
    const std::size_t end = std::min(windows.size(), start + chunk);
    std::vector<const History*> hs;
    for (std::size_t i = start; i < end; ++i) hs.push_back(&windows[i].history);
    const auto params = model.estimate(hs);
    for (std::size_t i = start; i < end; ++i) {
      const auto& w = windows[i];
      pred.push_back(next_body_state(w.current().state, applied_input(w.history),
                                     params[i - start], geom, dt, mode));
      obs.push_back(w.target);
    }
  }
  return mse_loss(pred, obs);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainConfig {
  double base_lr = 1e-3;
  int batch_size = 128;
  int epochs = 50;
  std::int64_t warmup_steps = -1;  // -1: 5% of the run
  std::uint64_t seed = 0;
  PhysicsMode mode = PhysicsMode::Full;
  LossWeights loss_weights = {1, 1, 1};
  bool balance_loss = false;  // replace loss_weights by delta_variance_weights(train_set)
  bool standardize = false;

  void check() const {
    if (batch_size < 1) throw Error(ErrorKind::Domain, "batch_size must be >= 1");
    if (epochs < 0) throw Error(ErrorKind::Domain, "epochs must be >= 0");
    if (!(base_lr > 0)) throw Error(ErrorKind::Domain, "base_lr must be positive");
  }
};

struct TrainHistory {
  std::vector<double> train_loss;  // per epoch, sample-weighted mean of batch losses
  std::vector<double> val_loss;    // per epoch, Eval-mode one-step MSE (if a val set is given)
  std::vector<double> lr;          // learning rate at the last step of each epoch
  std::int64_t first_step = 0;
  std::int64_t last_step = 0;
  std::size_t guard_violations = 0;
  std::size_t params_emitted = 0;
  LossWeights loss_weights = {1, 1, 1};
};

/// Batches for one epoch. A trailing single-sample batch is folded into the
/// previous one (batch norm needs at least two rows).
inline std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& order,
                                                          std::size_t batch_size) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    out.emplace_back(order.begin() + static_cast<long>(i),
                     order.begin() + static_cast<long>(std::min(order.size(), i + batch_size)));
  }
  if (out.size() > 1 && out.back().size() == 1) {
    out[out.size() - 2].push_back(out.back().front());
    out.pop_back();
  }
  return out;
}

inline FeatureScaling fit_scaling(const std::vector<SampleWindow>& windows) {
  FeatureScaling s;
  s.enabled = true;
  s.mean.assign(kFeatureDim, 0.0);
  s.stddev.assign(kFeatureDim, 0.0);
  std::size_t n = 0;
  for (const auto& w : windows) {
    for (const auto& r : w.history) {
      const auto f = features(r);
      for (int c = 0; c < kFeatureDim; ++c) s.mean[static_cast<std::size_t>(c)] += f[static_cast<std::size_t>(c)];
      ++n;
    }
  }
  for (auto& m : s.mean) m /= static_cast<double>(n);
  for (const auto& w : windows) {
    for (const auto& r : w.history) {
      const auto f = features(r);
      for (std::size_t c = 0; c < kFeatureDim; ++c) {
        s.stddev[c] += (f[c] - s.mean[c]) * (f[c] - s.mean[c]);
      }
    }
  }
  for (auto& sd : s.stddev) sd = std::max(std::sqrt(sd / static_cast<double>(n)), 1e-8);
  return s;
}

using EpochCallback = std::function<void(int epoch, double train_loss, double val_loss)>;

inline TrainHistory train(const std::vector<SampleWindow>& train_set,
                          const std::vector<SampleWindow>& val_set, Network& net,
                          OptimizerState& opt, const TrainConfig& cfg, const ParamBounds& bounds,
                          const VehicleGeometry& geom, double dt,
                          const EpochCallback& on_epoch = {}) {
  cfg.check();
  if (train_set.empty()) throw Error(ErrorKind::Window, "training set is empty");
  if (cfg.standardize && !net.scaling().enabled) net.scaling() = fit_scaling(train_set);

  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto per_epoch = make_batches(order, static_cast<std::size_t>(cfg.batch_size)).size();

  Schedule sched;
  sched.base_lr = cfg.base_lr;
  sched.total_steps = std::max<std::int64_t>(1, static_cast<std::int64_t>(per_epoch) * cfg.epochs);
  sched.warmup_steps = cfg.warmup_steps >= 0 ? cfg.warmup_steps : sched.total_steps / 20;
  sched.warmup_steps = std::min(sched.warmup_steps, sched.total_steps - 1);

  const LossWeights weights = cfg.balance_loss ? delta_variance_weights(train_set) : cfg.loss_weights;
  const LossOptions lopts{cfg.mode, weights, 1.0};
  const ParamModel* val_model = nullptr;
  TrainHistory hist;
  hist.first_step = opt.step;
  hist.loss_weights = weights;
  std::int64_t local = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double sum = 0;
    std::size_t count = 0;
    double lr = 0;
    for (const auto& batch : make_batches(order, static_cast<std::size_t>(cfg.batch_size))) {
      auto g = loss_and_gradient(net, train_set, batch, bounds, geom, dt, lopts, true);
      hist.guard_violations += g.guard_violations;
      hist.params_emitted += batch.size();
      if (!std::isfinite(g.loss)) {
        throw DivergenceError("training loss became non-finite in epoch " + std::to_string(epoch),
                              opt.step);
      }
      for (std::size_t i = 0; i < g.grad.size(); ++i) {
        if (!std::isfinite(g.grad[i])) {
          throw Error(ErrorKind::Divergence, "non-finite gradient in block " + net.block_name(i) +
                                                 " at step " + std::to_string(opt.step));
        }
      }
      ++local;
      lr = lr_schedule(local, sched);
      adam_step(net.parameters(), g.grad, opt, lr);
      sum += g.loss * static_cast<double>(batch.size());
      count += batch.size();
    }
    hist.train_loss.push_back(sum / static_cast<double>(count));
    hist.lr.push_back(lr);
    double val = std::nan("");
    if (!val_set.empty()) {
      const auto model = ParamModel::neural(net, BoundsProfile{net.config().profile, bounds});
      val_model = &model;
      val = one_step_mse(*val_model, val_set, geom, dt, cfg.mode);
      hist.val_loss.push_back(val);
    }
    if (on_epoch) on_epoch(epoch, hist.train_loss.back(), val);
  }
  hist.last_step = opt.step;
  return hist;
}

}  // namespace pavd::nn
