#pragma once

// Batched building blocks of the estimator with hand-written backward passes.
// Rows index samples, columns index features.

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "pavd/types.hpp"

namespace pavd::nn {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using VecMap = Eigen::Map<Vec>;
using ConstVecMap = Eigen::Map<const Vec>;

enum class Mode { Train, Eval };

/// Plain dense tensor used at the module boundary (windows, hidden vectors,
/// latent outputs). Row-major.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::vector<std::size_t> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != numel()) throw Error(ErrorKind::Dimension, "tensor data does not match shape");
  }
  explicit Tensor(std::vector<std::size_t> s) : shape(std::move(s)), data(numel(), 0.0) {}

  std::size_t numel() const {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  }
  std::size_t rank() const { return shape.size(); }

  static Tensor from(const RowMat& m) {
    return Tensor({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())},
                  std::vector<double>(m.data(), m.data() + m.size()));
  }

  /// View as a matrix: rank-1 tensors become a single row.
  RowMat matrix() const {
    if (rank() == 1) return ConstMatMap(data.data(), 1, static_cast<Eigen::Index>(shape[0]));
    if (rank() != 2) throw Error(ErrorKind::Dimension, "expected a rank-1 or rank-2 tensor");
    return ConstMatMap(data.data(), static_cast<Eigen::Index>(shape[0]),
                       static_cast<Eigen::Index>(shape[1]));
  }
};

// ---------------------------------------------------------------------------
// Mish
// ---------------------------------------------------------------------------

inline double softplus(double x) {
  // log(1 + e^x) without overflow.
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double mish(double x) { return x * std::tanh(softplus(x)); }

inline double mish_grad(double x) {
  const double t = std::tanh(softplus(x));
  return t + x * (1.0 - t * t) * sigmoid(x);
}

// ---------------------------------------------------------------------------
// Dense layer: Y = X W^T + b
// ---------------------------------------------------------------------------

inline RowMat dense_forward(const RowMat& x, const ConstMatMap& w, const ConstVecMap& b) {
  RowMat y = x * w.transpose();
  y.rowwise() += b.transpose();
  return y;
}

/// Accumulates into dw and db; returns dL/dx.
inline RowMat dense_backward(const RowMat& dy, const RowMat& x, const ConstMatMap& w, MatMap dw,
                             VecMap db) {
  dw.noalias() += dy.transpose() * x;
  db += dy.colwise().sum().transpose();
  return dy * w;
}

// ---------------------------------------------------------------------------
// Batch normalization over the batch dimension
// ---------------------------------------------------------------------------

struct BatchNormCache {
  RowMat xhat;
  Vec inv_std;
  Vec batch_mean;
  Vec batch_var;  // biased
  Mode mode = Mode::Eval;
};

inline RowMat batchnorm_forward(const RowMat& x, const ConstVecMap& gamma, const ConstVecMap& beta,
                                const Vec& running_mean, const Vec& running_var, double eps,
                                Mode mode, BatchNormCache& cache) {
  const auto n = x.rows();
  cache.mode = mode;
  if (mode == Mode::Train) {
    cache.batch_mean = x.colwise().mean().transpose();
    RowMat centered = x.rowwise() - cache.batch_mean.transpose();
    cache.batch_var = centered.array().square().colwise().sum().transpose() / static_cast<double>(n);
    cache.inv_std = (cache.batch_var.array() + eps).rsqrt();
    cache.xhat = centered.array().rowwise() * cache.inv_std.transpose().array();
  } else {
    cache.batch_mean = running_mean;
    cache.batch_var = running_var;
    cache.inv_std = (running_var.array() + eps).rsqrt();
    cache.xhat = (x.rowwise() - running_mean.transpose()).array().rowwise() *
                 cache.inv_std.transpose().array();
  }
  RowMat y = cache.xhat.array().rowwise() * gamma.transpose().array();
  y.rowwise() += beta.transpose();
  return y;
}

inline RowMat batchnorm_backward(const RowMat& dy, const ConstVecMap& gamma,
                                 const BatchNormCache& cache, VecMap dgamma, VecMap dbeta) {
  dgamma += (dy.array() * cache.xhat.array()).colwise().sum().transpose().matrix();
  dbeta += dy.colwise().sum().transpose();
  RowMat dxhat = dy.array().rowwise() * gamma.transpose().array();
  if (cache.mode == Mode::Eval) {
    return dxhat.array().rowwise() * cache.inv_std.transpose().array();
  }
  const double n = static_cast<double>(dy.rows());
  const Eigen::RowVectorXd sum_dxhat = dxhat.colwise().sum();
  const Eigen::RowVectorXd sum_dxhat_xhat = (dxhat.array() * cache.xhat.array()).colwise().sum();
  RowMat dx = (n * dxhat.array()).matrix();
  dx.rowwise() -= sum_dxhat;
  dx.array() -= cache.xhat.array().rowwise() * sum_dxhat_xhat.array();
  dx.array().rowwise() *= (cache.inv_std.transpose().array() / n);
  return dx;
}

// ---------------------------------------------------------------------------
// GRU cell (gate order r, z, n)
//   r = s(Wir x + bir + Whr h + bhr)
//   z = s(Wiz x + biz + Whz h + bhz)
//   n = tanh(Win x + bin + r * (Whn h + bhn))
//   h' = (1 - z) * n + z * h
// ---------------------------------------------------------------------------

struct GruCellCache {
  RowMat x, h_prev, r, z, n, gh_n;
};

struct GruWeights {
  ConstMatMap w_ih;  // 3h x in
  ConstMatMap w_hh;  // 3h x h
  ConstVecMap b_ih;  // 3h
  ConstVecMap b_hh;  // 3h
};

struct GruGrads {
  MatMap w_ih;
  MatMap w_hh;
  VecMap b_ih;
  VecMap b_hh;
};

inline RowMat gru_cell_forward(const RowMat& x, const RowMat& h_prev, const GruWeights& w,
                               GruCellCache* cache) {
  const auto h = h_prev.cols();
  RowMat gi = dense_forward(x, w.w_ih, w.b_ih);
  RowMat gh = dense_forward(h_prev, w.w_hh, w.b_hh);
  RowMat r = (gi.leftCols(h) + gh.leftCols(h)).unaryExpr([](double v) { return sigmoid(v); });
  RowMat z = (gi.middleCols(h, h) + gh.middleCols(h, h)).unaryExpr([](double v) {
    return sigmoid(v);
  });
  RowMat gh_n = gh.rightCols(h);
  RowMat n = (gi.rightCols(h).array() + r.array() * gh_n.array()).tanh().matrix();
  RowMat out = ((1.0 - z.array()) * n.array() + z.array() * h_prev.array()).matrix();
  if (cache) {
    cache->x = x;
    cache->h_prev = h_prev;
    cache->r = std::move(r);
    cache->z = std::move(z);
    cache->n = std::move(n);
    cache->gh_n = std::move(gh_n);
  }
  return out;
}

struct GruCellBackward {
  RowMat dx;
  RowMat dh_prev;
};

inline GruCellBackward gru_cell_backward(const RowMat& dh, const GruCellCache& c,
                                         const GruWeights& w, GruGrads& g) {
  const auto h = dh.cols();
  const auto rows = dh.rows();
  const auto& r = c.r.array();
  const auto& z = c.z.array();
  const auto& n = c.n.array();

  const Eigen::ArrayXXd dn = dh.array() * (1.0 - z);
  const Eigen::ArrayXXd dz = dh.array() * (c.h_prev.array() - n);
  const Eigen::ArrayXXd da_n = dn * (1.0 - n * n);
  const Eigen::ArrayXXd dr = da_n * c.gh_n.array();
  const Eigen::ArrayXXd da_z = dz * z * (1.0 - z);
  const Eigen::ArrayXXd da_r = dr * r * (1.0 - r);

  RowMat dgi(rows, 3 * h);
  dgi.leftCols(h) = da_r.matrix();
  dgi.middleCols(h, h) = da_z.matrix();
  dgi.rightCols(h) = da_n.matrix();
  RowMat dgh(rows, 3 * h);
  dgh.leftCols(h) = da_r.matrix();
  dgh.middleCols(h, h) = da_z.matrix();
  dgh.rightCols(h) = (da_n * r).matrix();

  GruCellBackward out;
  out.dx = dense_backward(dgi, c.x, w.w_ih, g.w_ih, g.b_ih);
  out.dh_prev = dense_backward(dgh, c.h_prev, w.w_hh, g.w_hh, g.b_hh);
  out.dh_prev.array() += dh.array() * z;
  return out;
}

}  // namespace pavd::nn
