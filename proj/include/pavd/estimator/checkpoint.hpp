#pragma once

// Binary model checkpoint. Little-endian, doubles stored as raw IEEE-754 bits
// so a write/read round trip is exact.
//
//   "PAVDCKPT" u32 version, then the sections in the order written below.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "pavd/estimator/network.hpp"
#include "pavd/estimator/optimizer.hpp"
#include "pavd/param_guard.hpp"

namespace pavd::nn {

inline constexpr char kCheckpointMagic[8] = {'P', 'A', 'V', 'D', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  Network net;
  BoundsProfile bounds;
  VehicleGeometry geom;
  double dt = 0.02;
  PhysicsMode mode = PhysicsMode::Full;
  std::uint64_t seed = 0;
  std::optional<OptimizerState> opt;
  std::vector<double> train_loss;
  std::vector<double> val_loss;

  bool operator==(const Checkpoint& o) const {
    return net == o.net && bounds.name == o.bounds.name && bounds.bounds == o.bounds.bounds &&
           geom.m == o.geom.m && geom.lf == o.geom.lf && geom.lr == o.geom.lr &&
           geom.hcg == o.geom.hcg && geom.g == o.geom.g && geom.Fz0 == o.geom.Fz0 &&
           geom.load_floor == o.geom.load_floor && dt == o.dt && mode == o.mode &&
           seed == o.seed && opt == o.opt && train_loss == o.train_loss && val_loss == o.val_loss;
  }
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

class Writer {
 public:
  explicit Writer(std::ostream& os) : os_(os) {}
  void u32(std::uint32_t v) { raw(&v, sizeof v); }
  void u64(std::uint64_t v) { raw(&v, sizeof v); }
  void i64(std::int64_t v) { raw(&v, sizeof v); }
  void f64(double v) { raw(&v, sizeof v); }
  void doubles(const double* p, std::size_t n) {
    u64(n);
    raw(p, n * sizeof(double));
  }
  void doubles(const std::vector<double>& v) { doubles(v.data(), v.size()); }
  void raw(const void* p, std::size_t n) { os_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }

 private:
  std::ostream& os_;
};

class Reader {
 public:
  explicit Reader(std::istream& is) : is_(is) {}
  std::uint32_t u32() { return get<std::uint32_t>(); }
  std::uint64_t u64() { return get<std::uint64_t>(); }
  std::int64_t i64() { return get<std::int64_t>(); }
  double f64() { return get<double>(); }
  std::vector<double> doubles(std::uint64_t limit = std::uint64_t{1} << 32) {
    const auto n = u64();
    if (n > limit) throw Error(ErrorKind::Schema, "checkpoint array length is implausible");
    std::vector<double> v(n);
    raw(v.data(), n * sizeof(double));
    return v;
  }
  void raw(void* p, std::size_t n) {
    is_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n) throw Error(ErrorKind::Schema, "truncated checkpoint");
  }

 private:
  template <typename T>
  T get() {
    T v;
    raw(&v, sizeof v);
    return v;
  }
  std::istream& is_;
};

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const Checkpoint& ck) {
  detail::Writer w(os);
  w.raw(kCheckpointMagic, sizeof kCheckpointMagic);
  w.u32(kCheckpointVersion);

  const auto& cfg = ck.net.config();
  w.i64(cfg.history_len);
  w.i64(cfg.input_dim);
  w.i64(cfg.gru_layers);
  w.i64(cfg.gru_hidden);
  w.u64(cfg.dense_widths.size());
  for (int d : cfg.dense_widths) w.i64(d);
  w.i64(cfg.output_dim);
  w.u32(static_cast<std::uint32_t>(cfg.profile));
  w.f64(cfg.bn_momentum);
  w.f64(cfg.bn_eps);

  w.u32(static_cast<std::uint32_t>(ck.bounds.name));
  w.raw(ck.bounds.bounds.lo.data(), sizeof(double) * kNumParams);
  w.raw(ck.bounds.bounds.hi.data(), sizeof(double) * kNumParams);

  for (double v : {ck.geom.m, ck.geom.lf, ck.geom.lr, ck.geom.hcg, ck.geom.g, ck.geom.Fz0,
                   ck.geom.load_floor, ck.dt}) {
    w.f64(v);
  }
  w.u32(static_cast<std::uint32_t>(ck.mode));
  w.u64(ck.seed);

  w.doubles(ck.net.parameters());
  for (std::size_t j = 0; j < cfg.dense_widths.size(); ++j) {
    w.doubles(ck.net.running_mean()[j].data(), static_cast<std::size_t>(ck.net.running_mean()[j].size()));
    w.doubles(ck.net.running_var()[j].data(), static_cast<std::size_t>(ck.net.running_var()[j].size()));
  }
  const auto& sc = ck.net.scaling();
  w.u32(sc.enabled ? 1 : 0);
  w.doubles(sc.mean);
  w.doubles(sc.stddev);

  w.u32(ck.opt ? 1 : 0);
  if (ck.opt) {
    w.i64(ck.opt->step);
    w.f64(ck.opt->beta1);
    w.f64(ck.opt->beta2);
    w.f64(ck.opt->eps);
    w.doubles(ck.opt->m);
    w.doubles(ck.opt->v);
  }
  w.doubles(ck.train_loss);
  w.doubles(ck.val_loss);
  if (!os) throw Error(ErrorKind::Io, "failed to write checkpoint");
}

inline Checkpoint read_checkpoint(std::istream& is) {
  detail::Reader r(is);
  char magic[8];
  r.raw(magic, sizeof magic);
  if (std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) {
    throw Error(ErrorKind::Schema, "not a checkpoint file (bad magic)");
  }
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw Error(ErrorKind::Schema, "unsupported checkpoint version " + std::to_string(version));
  }

  NetworkConfig cfg;
  cfg.history_len = static_cast<int>(r.i64());
  cfg.input_dim = static_cast<int>(r.i64());
  cfg.gru_layers = static_cast<int>(r.i64());
  cfg.gru_hidden = static_cast<int>(r.i64());
  const auto n_dense = r.u64();
  if (n_dense > 64) throw Error(ErrorKind::Schema, "implausible dense layer count");
  cfg.dense_widths.clear();
  for (std::uint64_t j = 0; j < n_dense; ++j) cfg.dense_widths.push_back(static_cast<int>(r.i64()));
  cfg.output_dim = static_cast<int>(r.i64());
  const auto prof = r.u32();
  if (prof > 1) throw Error(ErrorKind::Schema, "unknown profile tag");
  cfg.profile = static_cast<Profile>(prof);
  cfg.bn_momentum = r.f64();
  cfg.bn_eps = r.f64();

  Checkpoint ck;
  try {
    ck.net = Network(cfg);
  } catch (const Error& e) {
    throw Error(ErrorKind::Schema, std::string("checkpoint network config invalid: ") + e.what());
  }
  const auto bprof = r.u32();
  if (bprof > 1) throw Error(ErrorKind::Schema, "unknown bounds profile tag");
  ck.bounds.name = static_cast<Profile>(bprof);
  r.raw(ck.bounds.bounds.lo.data(), sizeof(double) * kNumParams);
  r.raw(ck.bounds.bounds.hi.data(), sizeof(double) * kNumParams);

  ck.geom.m = r.f64();
  ck.geom.lf = r.f64();
  ck.geom.lr = r.f64();
  ck.geom.hcg = r.f64();
  ck.geom.g = r.f64();
  ck.geom.Fz0 = r.f64();
  ck.geom.load_floor = r.f64();
  ck.dt = r.f64();
  const auto mode = r.u32();
  if (mode > 2) throw Error(ErrorKind::Schema, "unknown physics mode tag");
  ck.mode = static_cast<PhysicsMode>(mode);
  ck.seed = r.u64();

  auto theta = r.doubles();
  if (theta.size() != ck.net.parameter_count()) {
    throw Error(ErrorKind::Schema, "checkpoint has " + std::to_string(theta.size()) +
                                       " parameters, config implies " +
                                       std::to_string(ck.net.parameter_count()));
  }
  ck.net.parameters() = std::move(theta);
  for (std::size_t j = 0; j < cfg.dense_widths.size(); ++j) {
    const auto mean = r.doubles();
    const auto var = r.doubles();
    const auto width = static_cast<std::size_t>(cfg.dense_widths[j]);
    if (mean.size() != width || var.size() != width) {
      throw Error(ErrorKind::Schema, "batch-norm statistics do not match layer width");
    }
    ck.net.running_mean()[j] = ConstVecMap(mean.data(), static_cast<Eigen::Index>(width));
    ck.net.running_var()[j] = ConstVecMap(var.data(), static_cast<Eigen::Index>(width));
  }
  auto& sc = ck.net.scaling();
  sc.enabled = r.u32() != 0;
  sc.mean = r.doubles(1024);
  sc.stddev = r.doubles(1024);

  if (r.u32() != 0) {
    OptimizerState opt;
    opt.step = r.i64();
    opt.beta1 = r.f64();
    opt.beta2 = r.f64();
    opt.eps = r.f64();
    opt.m = r.doubles();
    opt.v = r.doubles();
    ck.opt = std::move(opt);
  }
  ck.train_loss = r.doubles();
  ck.val_loss = r.doubles();
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  write_checkpoint(os, ck);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorKind::Io, "cannot open checkpoint " + path.string());
  return read_checkpoint(is);
}

}  // namespace pavd::nn
