#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "pavd/types.hpp"

namespace pavd::nn {

struct OptimizerState {
  std::int64_t step = 0;
  std::vector<double> m;
  std::vector<double> v;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  bool operator==(const OptimizerState&) const = default;
};

/// One Adam update with bias correction.
inline void adam_step(std::vector<double>& params, const std::vector<double>& grads,
                      OptimizerState& opt, double lr) {
  if (grads.size() != params.size()) {
    throw Error(ErrorKind::Dimension, "gradient size does not match parameters");
  }
  if (opt.m.size() != params.size()) {
    opt.m.assign(params.size(), 0.0);
    opt.v.assign(params.size(), 0.0);
  }
  opt.step += 1;
  const double t = static_cast<double>(opt.step);
  const double c1 = 1.0 - std::pow(opt.beta1, t);
  const double c2 = 1.0 - std::pow(opt.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    opt.m[i] = opt.beta1 * opt.m[i] + (1.0 - opt.beta1) * grads[i];
    opt.v[i] = opt.beta2 * opt.v[i] + (1.0 - opt.beta2) * grads[i] * grads[i];
    const double mhat = opt.m[i] / c1;
    const double vhat = opt.v[i] / c2;
    params[i] -= lr * mhat / (std::sqrt(vhat) + opt.eps);
  }
}

struct Schedule {
  double base_lr = 1e-3;
  std::int64_t warmup_steps = 0;
  std::int64_t total_steps = 1;
};

/// Linear warm-up to base_lr, then half-cosine decay to zero at total_steps.
inline double lr_schedule(std::int64_t t, const Schedule& s) {
  if (t < 0 || t > s.total_steps) throw Error(ErrorKind::Domain, "schedule step out of range");
  if (!(s.warmup_steps >= 0 && s.warmup_steps < s.total_steps)) {
    throw Error(ErrorKind::Domain, "warmup_steps must be in [0, total_steps)");
  }
  if (t < s.warmup_steps) {
    return s.base_lr * static_cast<double>(t) / static_cast<double>(s.warmup_steps);
  }
  const double progress = static_cast<double>(t - s.warmup_steps) /
                          static_cast<double>(s.total_steps - s.warmup_steps);
  return s.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace pavd::nn
