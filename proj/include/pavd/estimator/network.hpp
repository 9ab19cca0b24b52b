#pragma once

// Recurrent parameter estimator: a GRU stack over the history window, a dense
// head (Linear -> Mish -> BatchNorm per hidden layer) and a final linear map to
// the 17 latent outputs fed to the physics guard.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "pavd/estimator/layers.hpp"
#include "pavd/param_guard.hpp"

namespace pavd::nn {

/// Per-step window features: vx, vy, omega, T_fb, delta_fb, T_cmd, delta_cmd.
inline constexpr int kFeatureDim = 7;

struct NetworkConfig {
  int history_len = 12;
  int input_dim = kFeatureDim;
  int gru_layers = 2;
  int gru_hidden = 96;
  std::vector<int> dense_widths = {128, 128};
  int output_dim = static_cast<int>(kNumParams);
  Profile profile = Profile::Sim;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;

  static NetworkConfig sim_default() { return {}; }

  static NetworkConfig real_default() {
    NetworkConfig c;
    c.gru_layers = 5;
    c.gru_hidden = 144;
    c.dense_widths = {184, 184};
    c.profile = Profile::Real;
    return c;
  }

  static NetworkConfig for_profile(Profile p) {
    return p == Profile::Sim ? sim_default() : real_default();
  }

  void check() const {
    if (history_len < 1) throw Error(ErrorKind::Domain, "history_len must be >= 1");
    if (input_dim < 1 || gru_layers < 1 || gru_hidden < 1) {
      throw Error(ErrorKind::Domain, "GRU dimensions must be positive");
    }
    for (int w : dense_widths) {
      if (w < 1) throw Error(ErrorKind::Domain, "dense widths must be positive");
    }
    if (output_dim != static_cast<int>(kNumParams)) {
      throw Error(ErrorKind::Domain, "output_dim must be 17");
    }
    if (!(bn_momentum > 0 && bn_momentum <= 1 && bn_eps > 0)) {
      throw Error(ErrorKind::Domain, "invalid batch-norm settings");
    }
  }

  bool operator==(const NetworkConfig&) const = default;
};

/// Trainable parameters of one GRU cell: input and recurrent weights for the
/// three gates plus one bias vector on each side.
inline std::size_t gru_param_count(std::size_t in, std::size_t hidden) {
  return 3 * ((in + hidden) * hidden + 2 * hidden);
}

inline std::size_t dense_param_count(std::size_t in, std::size_t out) { return in * out + out; }

/// Batch-norm scale and shift.
inline std::size_t batchnorm_param_count(std::size_t width) { return 2 * width; }

inline std::size_t expected_param_count(const NetworkConfig& cfg) {
  std::size_t total = 0;
  std::size_t in = static_cast<std::size_t>(cfg.input_dim);
  const auto h = static_cast<std::size_t>(cfg.gru_hidden);
  for (int l = 0; l < cfg.gru_layers; ++l) {
    total += gru_param_count(in, h);
    in = h;
  }
  for (int w : cfg.dense_widths) {
    total += dense_param_count(in, static_cast<std::size_t>(w)) +
             batchnorm_param_count(static_cast<std::size_t>(w));
    in = static_cast<std::size_t>(w);
  }
  return total + dense_param_count(in, static_cast<std::size_t>(cfg.output_dim));
}

struct ParamBlock {
  std::string name;
  Eigen::Index rows = 0;
  Eigen::Index cols = 1;  // 1 for vectors
  std::size_t offset = 0;
  std::size_t size() const { return static_cast<std::size_t>(rows * cols); }
};

struct FeatureScaling {
  bool enabled = false;
  std::vector<double> mean;
  std::vector<double> stddev;
  bool operator==(const FeatureScaling&) const = default;
};

struct ForwardCache;

/// All trainable values live in one flat vector; blocks describe the views.
class Network {
 public:
  Network() = default;

  explicit Network(NetworkConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.check();
    layout();
    theta_.assign(offset_, 0.0);
    for (std::size_t j = 0; j < cfg_.dense_widths.size(); ++j) {
      const auto w = static_cast<std::size_t>(cfg_.dense_widths[j]);
      running_mean_.emplace_back(Vec::Zero(static_cast<Eigen::Index>(w)));
      running_var_.emplace_back(Vec::Ones(static_cast<Eigen::Index>(w)));
      vec(bn_gamma_block(j)).setOnes();
    }
  }

  /// PyTorch-style uniform initialization. The output layer is scaled down so
  /// the initial parameters sit near the middle of the box.
  void initialize(std::uint64_t seed, double output_scale = 0.1) {
    std::mt19937_64 rng(seed);
    auto fill = [&](const ParamBlock& b, double bound) {
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (std::size_t i = 0; i < b.size(); ++i) theta_[b.offset + i] = dist(rng);
    };
    const double gru_bound = 1.0 / std::sqrt(static_cast<double>(cfg_.gru_hidden));
    for (int l = 0; l < cfg_.gru_layers; ++l) {
      for (int k = 0; k < 4; ++k) fill(blocks_[gru_block(l, k)], gru_bound);
    }
    Eigen::Index in = cfg_.gru_hidden;
    for (std::size_t j = 0; j < cfg_.dense_widths.size(); ++j) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(in));
      fill(blocks_[dense_w_block(j)], bound);
      fill(blocks_[dense_b_block(j)], bound);
      vec(bn_gamma_block(j)).setOnes();
      vec(bn_beta_block(j)).setZero();
      running_mean_[j].setZero();
      running_var_[j].setOnes();
      in = cfg_.dense_widths[j];
    }
    const double bound = output_scale / std::sqrt(static_cast<double>(in));
    fill(blocks_[out_w_block()], bound);
    fill(blocks_[out_b_block()], bound);
  }

  const NetworkConfig& config() const { return cfg_; }
  std::vector<double>& parameters() { return theta_; }
  const std::vector<double>& parameters() const { return theta_; }
  const std::vector<ParamBlock>& blocks() const { return blocks_; }
  std::size_t parameter_count() const { return theta_.size(); }

  std::vector<Vec>& running_mean() { return running_mean_; }
  std::vector<Vec>& running_var() { return running_var_; }
  const std::vector<Vec>& running_mean() const { return running_mean_; }
  const std::vector<Vec>& running_var() const { return running_var_; }

  FeatureScaling& scaling() { return scaling_; }
  const FeatureScaling& scaling() const { return scaling_; }

  // Block indices.
  std::size_t gru_block(int layer, int k) const { return static_cast<std::size_t>(4 * layer + k); }
  std::size_t dense_base(std::size_t j) const {
    return static_cast<std::size_t>(4 * cfg_.gru_layers) + 4 * j;
  }
  std::size_t dense_w_block(std::size_t j) const { return dense_base(j); }
  std::size_t dense_b_block(std::size_t j) const { return dense_base(j) + 1; }
  std::size_t bn_gamma_block(std::size_t j) const { return dense_base(j) + 2; }
  std::size_t bn_beta_block(std::size_t j) const { return dense_base(j) + 3; }
  std::size_t out_w_block() const { return dense_base(cfg_.dense_widths.size()); }
  std::size_t out_b_block() const { return out_w_block() + 1; }

  ConstMatMap mat(std::size_t block) const { return mat_view(theta_, block); }
  MatMap mat(std::size_t block) { return mat_view(theta_, block); }
  ConstVecMap vec(std::size_t block) const { return vec_view(theta_, block); }
  VecMap vec(std::size_t block) { return vec_view(theta_, block); }

  MatMap mat_view(std::vector<double>& buf, std::size_t block) const {
    const auto& b = blocks_[block];
    return MatMap(buf.data() + b.offset, b.rows, b.cols);
  }
  ConstMatMap mat_view(const std::vector<double>& buf, std::size_t block) const {
    const auto& b = blocks_[block];
    return ConstMatMap(buf.data() + b.offset, b.rows, b.cols);
  }
  VecMap vec_view(std::vector<double>& buf, std::size_t block) const {
    const auto& b = blocks_[block];
    return VecMap(buf.data() + b.offset, b.rows);
  }
  ConstVecMap vec_view(const std::vector<double>& buf, std::size_t block) const {
    const auto& b = blocks_[block];
    return ConstVecMap(buf.data() + b.offset, b.rows);
  }

  GruWeights gru_weights(int layer) const {
    return {mat(gru_block(layer, 0)), mat(gru_block(layer, 1)), vec(gru_block(layer, 2)),
            vec(gru_block(layer, 3))};
  }

  GruGrads gru_grads(std::vector<double>& grad, int layer) const {
    return {mat_view(grad, gru_block(layer, 0)), mat_view(grad, gru_block(layer, 1)),
            vec_view(grad, gru_block(layer, 2)), vec_view(grad, gru_block(layer, 3))};
  }

  /// Name of the block that owns flat index i (for error messages).
  const std::string& block_name(std::size_t i) const {
    for (const auto& b : blocks_) {
      if (i >= b.offset && i < b.offset + b.size()) return b.name;
    }
    static const std::string none = "<none>";
    return none;
  }

  bool operator==(const Network& o) const {
    if (!(cfg_ == o.cfg_ && theta_ == o.theta_ && scaling_ == o.scaling_)) return false;
    for (std::size_t j = 0; j < running_mean_.size(); ++j) {
      if (running_mean_[j] != o.running_mean_[j] || running_var_[j] != o.running_var_[j]) {
        return false;
      }
    }
    return true;
  }

 private:
  void add_block(std::string name, Eigen::Index rows, Eigen::Index cols) {
    blocks_.push_back({std::move(name), rows, cols, offset_});
    offset_ += static_cast<std::size_t>(rows * cols);
  }

  void layout() {
    blocks_.clear();
    offset_ = 0;
    Eigen::Index in = cfg_.input_dim;
    const Eigen::Index h = cfg_.gru_hidden;
    for (int l = 0; l < cfg_.gru_layers; ++l) {
      const auto p = "gru" + std::to_string(l);
      add_block(p + ".w_ih", 3 * h, in);
      add_block(p + ".w_hh", 3 * h, h);
      add_block(p + ".b_ih", 3 * h, 1);
      add_block(p + ".b_hh", 3 * h, 1);
      in = h;
    }
    for (std::size_t j = 0; j < cfg_.dense_widths.size(); ++j) {
      const auto p = "dense" + std::to_string(j);
      const Eigen::Index w = cfg_.dense_widths[j];
      add_block(p + ".w", w, in);
      add_block(p + ".b", w, 1);
      add_block(p + ".bn_gamma", w, 1);
      add_block(p + ".bn_beta", w, 1);
      in = w;
    }
    add_block("out.w", cfg_.output_dim, in);
    add_block("out.b", cfg_.output_dim, 1);
  }

  NetworkConfig cfg_;
  std::vector<ParamBlock> blocks_;
  std::size_t offset_ = 0;
  std::vector<double> theta_;
  std::vector<Vec> running_mean_;
  std::vector<Vec> running_var_;
  FeatureScaling scaling_;
};

/// Exact trainable-parameter count.
inline std::size_t count_parameters(const Network& net) { return net.parameter_count(); }

// ---------------------------------------------------------------------------
// Forward / backward over a batch
// ---------------------------------------------------------------------------

/// Batch of windows, one matrix per time step (batch x input_dim).
using SequenceBatch = std::vector<RowMat>;

struct ForwardCache {
  std::vector<std::vector<GruCellCache>> gru;  // [layer][t]
  std::vector<RowMat> dense_in;                // input to dense layer j
  std::vector<RowMat> dense_pre;               // pre-activation of dense layer j
  std::vector<BatchNormCache> bn;
  RowMat out_in;                               // input to the output layer
};

inline SequenceBatch apply_scaling(const SequenceBatch& seq, const FeatureScaling& s) {
  if (!s.enabled) return seq;
  SequenceBatch out = seq;
  for (auto& step : out) {
    for (Eigen::Index c = 0; c < step.cols(); ++c) {
      step.col(c).array() = (step.col(c).array() - s.mean[static_cast<std::size_t>(c)]) /
                            s.stddev[static_cast<std::size_t>(c)];
    }
  }
  return out;
}

/// Runs the GRU stack from zero hidden state; returns the top layer's final
/// hidden state (batch x hidden).
inline RowMat gru_forward(const SequenceBatch& raw, const Network& net, ForwardCache* cache) {
  const auto& cfg = net.config();
  if (static_cast<int>(raw.size()) != cfg.history_len) {
    throw Error(ErrorKind::Dimension, "window length " + std::to_string(raw.size()) +
                                          " does not match history_len " +
                                          std::to_string(cfg.history_len));
  }
  const Eigen::Index batch = raw.front().rows();
  for (const auto& step : raw) {
    if (step.cols() != cfg.input_dim || step.rows() != batch) {
      throw Error(ErrorKind::Dimension, "window feature shape mismatch");
    }
  }
  SequenceBatch seq = apply_scaling(raw, net.scaling());
  if (cache) cache->gru.assign(static_cast<std::size_t>(cfg.gru_layers), {});
  RowMat h;
  for (int l = 0; l < cfg.gru_layers; ++l) {
    const auto w = net.gru_weights(l);
    h = RowMat::Zero(batch, cfg.gru_hidden);
    if (cache) cache->gru[static_cast<std::size_t>(l)].resize(seq.size());
    for (std::size_t t = 0; t < seq.size(); ++t) {
      h = gru_cell_forward(seq[t], h, w, cache ? &cache->gru[static_cast<std::size_t>(l)][t] : nullptr);
      seq[t] = h;  // becomes the input of the next layer
    }
  }
  return h;
}

/// Dense head to 17 latent outputs (batch x 17). In Train mode batch-norm uses
/// batch statistics; running statistics are only touched when update_stats.
inline RowMat head_forward(const RowMat& hidden, Network& net, Mode mode, ForwardCache* cache,
                           bool update_stats) {
  const auto& cfg = net.config();
  const auto n_dense = cfg.dense_widths.size();
  RowMat a = hidden;
  const Eigen::Index expected_in = cfg.gru_hidden;
  if (a.cols() != expected_in) throw Error(ErrorKind::Dimension, "hidden width mismatch");
  if (cache) {
    cache->dense_in.resize(n_dense);
    cache->dense_pre.resize(n_dense);
    cache->bn.resize(n_dense);
  }
  for (std::size_t j = 0; j < n_dense; ++j) {
    RowMat pre = dense_forward(a, std::as_const(net).mat(net.dense_w_block(j)),
                               std::as_const(net).vec(net.dense_b_block(j)));
    RowMat act = pre.unaryExpr([](double v) { return mish(v); });
    BatchNormCache bn_local;
    BatchNormCache& bn = cache ? cache->bn[j] : bn_local;
    RowMat out = batchnorm_forward(act, std::as_const(net).vec(net.bn_gamma_block(j)),
                                   std::as_const(net).vec(net.bn_beta_block(j)),
                                   net.running_mean()[j], net.running_var()[j], cfg.bn_eps, mode, bn);
    if (mode == Mode::Train && update_stats) {
      const double mom = cfg.bn_momentum;
      const double n = static_cast<double>(act.rows());
      const Vec unbiased = n > 1 ? Vec(bn.batch_var * (n / (n - 1.0))) : bn.batch_var;
      net.running_mean()[j] = (1.0 - mom) * net.running_mean()[j] + mom * bn.batch_mean;
      net.running_var()[j] = (1.0 - mom) * net.running_var()[j] + mom * unbiased;
    }
    if (cache) {
      cache->dense_in[j] = std::move(a);
      cache->dense_pre[j] = std::move(pre);
    }
    a = std::move(out);
  }
  RowMat z = dense_forward(a, std::as_const(net).mat(net.out_w_block()),
                           std::as_const(net).vec(net.out_b_block()));
  if (cache) cache->out_in = std::move(a);
  return z;
}

/// Eval-mode head; never touches running statistics.
inline RowMat head_forward(const RowMat& hidden, const Network& net) {
  // Eval mode reads but never writes the network.
  return head_forward(hidden, const_cast<Network&>(net), Mode::Eval, nullptr, false);
}

/// Backpropagates dL/dz (batch x 17) through head and GRU stack, accumulating
/// into grad (same layout as net.parameters()).
inline void network_backward(const RowMat& dz, const Network& net, const ForwardCache& cache,
                             std::vector<double>& grad) {
  const auto& cfg = net.config();
  if (grad.size() != net.parameter_count()) grad.assign(net.parameter_count(), 0.0);

  RowMat da = dense_backward(dz, cache.out_in, net.mat(net.out_w_block()),
                             net.mat_view(grad, net.out_w_block()),
                             net.vec_view(grad, net.out_b_block()));
  for (std::size_t jj = cfg.dense_widths.size(); jj-- > 0;) {
    RowMat dact = batchnorm_backward(da, net.vec(net.bn_gamma_block(jj)), cache.bn[jj],
                                     net.vec_view(grad, net.bn_gamma_block(jj)),
                                     net.vec_view(grad, net.bn_beta_block(jj)));
    const RowMat& pre = cache.dense_pre[jj];
    RowMat dpre = dact.array() * pre.unaryExpr([](double v) { return mish_grad(v); }).array();
    da = dense_backward(dpre, cache.dense_in[jj], net.mat(net.dense_w_block(jj)),
                        net.mat_view(grad, net.dense_w_block(jj)),
                        net.vec_view(grad, net.dense_b_block(jj)));
  }

  // BPTT. dout[t] is dL/d(output of the current layer at step t).
  const std::size_t steps = static_cast<std::size_t>(cfg.history_len);
  const Eigen::Index batch = da.rows();
  std::vector<RowMat> dout(steps, RowMat::Zero(batch, cfg.gru_hidden));
  dout.back() = da;
  for (int l = cfg.gru_layers; l-- > 0;) {
    const auto w = net.gru_weights(l);
    auto g = net.gru_grads(grad, l);
    const auto& layer_cache = cache.gru[static_cast<std::size_t>(l)];
    std::vector<RowMat> dinput(steps);
    RowMat dh_next = RowMat::Zero(batch, cfg.gru_hidden);
    for (std::size_t t = steps; t-- > 0;) {
      RowMat dh = dout[t] + dh_next;
      auto back = gru_cell_backward(dh, layer_cache[t], w, g);
      dinput[t] = std::move(back.dx);
      dh_next = std::move(back.dh_prev);
    }
    dout = std::move(dinput);
  }
}

}  // namespace pavd::nn
