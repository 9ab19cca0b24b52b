#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fd.hpp"
#include "pavd/estimator/network.hpp"

using namespace pavd;
using namespace pavd::nn;

namespace {

RowMat random_mat(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double s = 1.0) {
  std::normal_distribution<double> n(0, s);
  RowMat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

std::vector<double> flat(const RowMat& m) { return {m.data(), m.data() + m.size()}; }

RowMat unflat(const std::vector<double>& v, Eigen::Index r, Eigen::Index c) {
  return ConstMatMap(v.data(), r, c);
}

// Random scalar loss weights so every output element matters.
double weighted(const RowMat& y, const RowMat& w) { return (y.array() * w.array()).sum(); }

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST(Mish, Values) {
  EXPECT_EQ(mish(0.0), 0.0);
  EXPECT_NEAR(mish(1.0), 0.8650983882673103, 1e-12);
  EXPECT_NEAR(mish(30.0), 30.0, 1e-9);
  EXPECT_TRUE(std::isfinite(mish(800.0)));
  EXPECT_NEAR(mish(-800.0), 0.0, 1e-300);
}

TEST(Mish, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-6, 6);
  for (int k = 0; k < 50; ++k) {
    const double x = u(rng);
    const auto fd = test::central_diff([](const std::vector<double>& v) { return mish(v[0]); }, {x});
    EXPECT_LE(test::rel_error({mish_grad(x)}, fd, 1e-6), 1e-6) << x;
  }
}

TEST(Dense, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const RowMat x = random_mat(3, 4, rng);
    const RowMat w = random_mat(5, 4, rng);
    const Vec b = random_mat(5, 1, rng);
    const RowMat lw = random_mat(3, 5, rng);
    auto loss = [&](const RowMat& xx, const RowMat& ww, const Vec& bb) {
      return weighted(dense_forward(xx, ConstMatMap(ww.data(), 5, 4), ConstVecMap(bb.data(), 5)), lw);
    };
    RowMat dw = RowMat::Zero(5, 4);
    Vec db = Vec::Zero(5);
    const RowMat dx = dense_backward(lw, x, ConstMatMap(w.data(), 5, 4), MatMap(dw.data(), 5, 4),
                                     VecMap(db.data(), 5));
    const auto fdx = test::central_diff(
        [&](const std::vector<double>& v) { return loss(unflat(v, 3, 4), w, b); }, flat(x));
    const auto fdw = test::central_diff(
        [&](const std::vector<double>& v) { return loss(x, unflat(v, 5, 4), b); }, flat(w));
    const auto fdb = test::central_diff(
        [&](const std::vector<double>& v) { return loss(x, w, ConstVecMap(v.data(), 5)); },
        std::vector<double>(b.data(), b.data() + 5));
    EXPECT_LE(test::rel_error(flat(dx), fdx), 1e-4);
    EXPECT_LE(test::rel_error(flat(dw), fdw), 1e-4);
    EXPECT_LE(test::rel_error({db.data(), db.data() + 5}, fdb), 1e-4);
  }
}

TEST(BatchNorm, TrainModeGradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    for (Mode mode : {Mode::Train, Mode::Eval}) {
      const RowMat x = random_mat(4, 3, rng, 2.0);
      const Vec gamma = random_mat(3, 1, rng);
      const Vec beta = random_mat(3, 1, rng);
      const Vec rm = random_mat(3, 1, rng);
      const Vec rv = random_mat(3, 1, rng).array().abs() + 0.5;
      const RowMat lw = random_mat(4, 3, rng);
      auto loss = [&](const RowMat& xx, const Vec& g, const Vec& bt) {
        BatchNormCache c;
        return weighted(batchnorm_forward(xx, ConstVecMap(g.data(), 3), ConstVecMap(bt.data(), 3), rm,
                                          rv, 1e-5, mode, c),
                        lw);
      };
      BatchNormCache cache;
      batchnorm_forward(x, ConstVecMap(gamma.data(), 3), ConstVecMap(beta.data(), 3), rm, rv, 1e-5,
                        mode, cache);
      Vec dg = Vec::Zero(3), dbt = Vec::Zero(3);
      const RowMat dx = batchnorm_backward(lw, ConstVecMap(gamma.data(), 3), cache,
                                           VecMap(dg.data(), 3), VecMap(dbt.data(), 3));
      const auto fdx = test::central_diff(
          [&](const std::vector<double>& v) { return loss(unflat(v, 4, 3), gamma, beta); }, flat(x));
      const auto fdg = test::central_diff(
          [&](const std::vector<double>& v) { return loss(x, ConstVecMap(v.data(), 3), beta); },
          {gamma.data(), gamma.data() + 3});
      EXPECT_LE(test::rel_error(flat(dx), fdx), 1e-4);
      EXPECT_LE(test::rel_error({dg.data(), dg.data() + 3}, fdg), 1e-4);
    }
  }
}

TEST(BatchNorm, EvalIndependentOfBatchComposition) {
  std::mt19937_64 rng(4);
  const RowMat x = random_mat(5, 3, rng);
  const Vec g = Vec::Ones(3), b = Vec::Zero(3), rm = Vec::Constant(3, 0.2), rv = Vec::Constant(3, 2.0);
  BatchNormCache c;
  const RowMat all = batchnorm_forward(x, ConstVecMap(g.data(), 3), ConstVecMap(b.data(), 3), rm, rv,
                                       1e-5, Mode::Eval, c);
  const RowMat one = batchnorm_forward(x.row(2), ConstVecMap(g.data(), 3), ConstVecMap(b.data(), 3),
                                       rm, rv, 1e-5, Mode::Eval, c);
  EXPECT_EQ(all.row(2), one.row(0));
}

TEST(GruCell, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(5);
  const int in = 3, h = 4;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> theta = flat(random_mat(1, gru_param_count(in, h), rng, 0.5));
    const RowMat x = random_mat(2, in, rng);
    const RowMat h0 = random_mat(2, h, rng, 0.5);
    const RowMat lw = random_mat(2, h, rng);
    auto weights = [&](const std::vector<double>& t) {
      const double* p = t.data();
      return GruWeights{ConstMatMap(p, 3 * h, in), ConstMatMap(p + 3 * h * in, 3 * h, h),
                        ConstVecMap(p + 3 * h * (in + h), 3 * h),
                        ConstVecMap(p + 3 * h * (in + h) + 3 * h, 3 * h)};
    };
    auto loss = [&](const std::vector<double>& t, const RowMat& xx, const RowMat& hh) {
      return weighted(gru_cell_forward(xx, hh, weights(t), nullptr), lw);
    };
    GruCellCache cache;
    gru_cell_forward(x, h0, weights(theta), &cache);
    std::vector<double> grad(theta.size(), 0.0);
    double* gp = grad.data();
    GruGrads g{MatMap(gp, 3 * h, in), MatMap(gp + 3 * h * in, 3 * h, h),
               VecMap(gp + 3 * h * (in + h), 3 * h), VecMap(gp + 3 * h * (in + h) + 3 * h, 3 * h)};
    const auto back = gru_cell_backward(lw, cache, weights(theta), g);
    EXPECT_LE(test::rel_error(grad, test::central_diff(
                                        [&](const std::vector<double>& v) { return loss(v, x, h0); },
                                        theta)),
              1e-4);
    EXPECT_LE(test::rel_error(flat(back.dx),
                              test::central_diff(
                                  [&](const std::vector<double>& v) {
                                    return loss(theta, unflat(v, 2, in), h0);
                                  },
                                  flat(x))),
              1e-4);
    EXPECT_LE(test::rel_error(flat(back.dh_prev),
                              test::central_diff(
                                  [&](const std::vector<double>& v) {
                                    return loss(theta, x, unflat(v, 2, h));
                                  },
                                  flat(h0))),
              1e-4);
  }
}

TEST(Counts, Formulas) {
  EXPECT_EQ(gru_param_count(2, 3), 63u);
  EXPECT_EQ(dense_param_count(4, 3), 15u);
  for (const auto& cfg : {NetworkConfig::sim_default(), NetworkConfig::real_default()}) {
    Network net(cfg);
    EXPECT_EQ(count_parameters(net), expected_param_count(cfg));
  }
}

namespace {

NetworkConfig tiny_config(int tau, int in, int h, int layers, std::vector<int> dense) {
  NetworkConfig cfg;
  cfg.history_len = tau;
  cfg.input_dim = in;
  cfg.gru_hidden = h;
  cfg.gru_layers = layers;
  cfg.dense_widths = std::move(dense);
  return cfg;
}

// Per-element recurrence written against the flat weight layout
// (w_ih, w_hh, b_ih, b_hh per layer; gate rows r, z, n).
std::vector<double> scalar_gru(const Network& net, const std::vector<std::vector<double>>& xs) {
  const auto& cfg = net.config();
  const int h = cfg.gru_hidden;
  std::vector<std::vector<double>> seq = xs;
  std::vector<double> hid;
  for (int l = 0; l < cfg.gru_layers; ++l) {
    const auto wih = net.mat(net.gru_block(l, 0));
    const auto whh = net.mat(net.gru_block(l, 1));
    const auto bih = net.vec(net.gru_block(l, 2));
    const auto bhh = net.vec(net.gru_block(l, 3));
    hid.assign(static_cast<std::size_t>(h), 0.0);
    for (auto& x : seq) {
      std::vector<double> nh(static_cast<std::size_t>(h));
      for (int j = 0; j < h; ++j) {
        double ar = bih(j) + bhh(j), az = bih(h + j) + bhh(h + j), ain = bih(2 * h + j),
               ahn = bhh(2 * h + j);
        for (std::size_t k = 0; k < x.size(); ++k) {
          const auto kk = static_cast<Eigen::Index>(k);
          ar += wih(j, kk) * x[k];
          az += wih(h + j, kk) * x[k];
          ain += wih(2 * h + j, kk) * x[k];
        }
        for (int k = 0; k < h; ++k) {
          ar += whh(j, k) * hid[static_cast<std::size_t>(k)];
          az += whh(h + j, k) * hid[static_cast<std::size_t>(k)];
          ahn += whh(2 * h + j, k) * hid[static_cast<std::size_t>(k)];
        }
        const double r = sig(ar), z = sig(az), n = std::tanh(ain + r * ahn);
        nh[static_cast<std::size_t>(j)] = (1 - z) * n + z * hid[static_cast<std::size_t>(j)];
      }
      hid = nh;
      x = nh;
    }
  }
  return hid;
}

}  // namespace

TEST(GruForward, MatchesScalarOracle) {
  Network net(tiny_config(3, 4, 5, 2, {6}));
  net.initialize(99);
  std::mt19937_64 rng(6);
  std::normal_distribution<double> n(0, 1);
  std::vector<std::vector<double>> xs(3, std::vector<double>(4));
  SequenceBatch seq;
  for (auto& x : xs) {
    for (auto& v : x) v = n(rng);
    seq.push_back(ConstMatMap(x.data(), 1, 4));
  }
  const RowMat h = gru_forward(seq, net, nullptr);
  const auto ref = scalar_gru(net, xs);
  for (int j = 0; j < 5; ++j) EXPECT_NEAR(h(0, j), ref[static_cast<std::size_t>(j)], 1e-12);
}

TEST(GruForward, ZeroWeightsGiveZeroHidden) {
  Network net(tiny_config(4, 7, 6, 2, {5}));
  SequenceBatch seq(4, RowMat::Constant(2, 7, 3.0));
  EXPECT_EQ(gru_forward(seq, net, nullptr).norm(), 0.0);
}

TEST(GruForward, SingleStepIsOneCell) {
  Network net(tiny_config(1, 3, 4, 1, {5}));
  net.initialize(4);
  std::mt19937_64 rng(7);
  const RowMat x = random_mat(2, 3, rng);
  const RowMat a = gru_forward(SequenceBatch{x}, net, nullptr);
  const RowMat b = gru_cell_forward(x, RowMat::Zero(2, 4), net.gru_weights(0), nullptr);
  EXPECT_EQ(a, b);
}

TEST(GruForward, ShapeErrors) {
  Network net(tiny_config(3, 7, 4, 1, {5}));
  EXPECT_THROW(gru_forward(SequenceBatch(2, RowMat::Zero(1, 7)), net, nullptr), Error);
  EXPECT_THROW(gru_forward(SequenceBatch(3, RowMat::Zero(1, 6)), net, nullptr), Error);
}

TEST(Head, EvalDeterministicAndRowwise) {
  Network net(tiny_config(2, 3, 4, 1, {5, 6}));
  net.initialize(8);
  net.running_mean()[0].setConstant(0.1);
  net.running_var()[1].setConstant(0.7);
  RowMat hid(3, 4);
  hid.rowwise() = Eigen::RowVector4d(0.1, -0.2, 0.3, 0.05);
  const RowMat a = head_forward(hid, net);
  const RowMat b = head_forward(hid, net);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.row(0), a.row(2));
  EXPECT_EQ(a.cols(), 17);
}

TEST(Head, NeutralParametersGiveMishPipeline) {
  // Square identity dense layers, gamma 1, beta 0, running stats (0, 1 - eps).
  NetworkConfig cfg = tiny_config(1, 3, 17, 1, {17});
  Network net(cfg);
  net.mat(net.dense_w_block(0)).setIdentity();
  net.vec(net.bn_gamma_block(0)).setOnes();
  net.running_var()[0].setConstant(1.0 - cfg.bn_eps);
  net.mat(net.out_w_block()).setIdentity();
  std::mt19937_64 rng(9);
  const RowMat hid = random_mat(2, 17, rng);
  const RowMat z = head_forward(hid, net);
  for (Eigen::Index i = 0; i < hid.size(); ++i) EXPECT_NEAR(z.data()[i], mish(hid.data()[i]), 1e-15);
}

TEST(Network, BackwardMatchesFiniteDifferences) {
  Network net(tiny_config(3, 7, 4, 2, {5}));
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    net.initialize(100 + static_cast<std::uint64_t>(trial), 1.0);
    SequenceBatch seq;
    for (int t = 0; t < 3; ++t) seq.push_back(random_mat(3, 7, rng));
    const RowMat lw = random_mat(3, 17, rng);
    auto loss = [&](const std::vector<double>& theta) {
      Network n2 = net;
      n2.parameters() = theta;
      return weighted(head_forward(gru_forward(seq, n2, nullptr), n2, Mode::Train, nullptr, false), lw);
    };
    ForwardCache cache;
    head_forward(gru_forward(seq, net, &cache), net, Mode::Train, &cache, false);
    std::vector<double> grad;
    network_backward(lw, net, cache, grad);
    EXPECT_LE(test::rel_error(grad, test::central_diff(loss, net.parameters())), 1e-4);
  }
}

TEST(Network, RunningStatsUpdate) {
  Network net(tiny_config(2, 7, 3, 1, {4}));
  net.initialize(1);
  std::mt19937_64 rng(11);
  SequenceBatch seq{random_mat(5, 7, rng), random_mat(5, 7, rng)};
  ForwardCache cache;
  head_forward(gru_forward(seq, net, &cache), net, Mode::Train, &cache, true);
  const Vec expect_mean = 0.1 * cache.bn[0].batch_mean;
  const Vec expect_var = 0.9 * Vec::Ones(4) + 0.1 * cache.bn[0].batch_var * (5.0 / 4.0);
  EXPECT_LE((net.running_mean()[0] - expect_mean).norm(), 1e-15);
  EXPECT_LE((net.running_var()[0] - expect_var).norm(), 1e-15);
}

TEST(Network, BlockNamesAndLayout) {
  Network net(tiny_config(3, 7, 4, 2, {5}));
  EXPECT_EQ(net.block_name(0), "gru0.w_ih");
  EXPECT_EQ(net.block_name(net.parameter_count() - 1), "out.b");
}
