#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>

namespace pavd {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

enum class ErrorKind {
  Domain,
  Dimension,
  Window,
  Schema,
  Ordering,
  Data,
  Divergence,
  Solver,
  Io,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Domain: return "domain";
    case ErrorKind::Dimension: return "dimension";
    case ErrorKind::Window: return "window";
    case ErrorKind::Schema: return "schema";
    case ErrorKind::Ordering: return "ordering";
    case ErrorKind::Data: return "data";
    case ErrorKind::Divergence: return "divergence";
    case ErrorKind::Solver: return "solver";
    case ErrorKind::Io: return "io";
  }
  return "unknown";
}

/// Base exception for everything thrown by the library. The kind lets callers
/// (notably the CLI) map failures onto exit codes without string matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + " error: " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// Raised when a rollout or training run produces non-finite values.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, long step)
      : Error(ErrorKind::Divergence, what + " (step " + std::to_string(step) + ")"), step_(step) {}

  long step() const noexcept { return step_; }

 private:
  long step_;
};

// ---------------------------------------------------------------------------
// Vehicle description
// ---------------------------------------------------------------------------

struct VehicleGeometry {
  double m = 0.041;     // kg
  double lf = 0.029;    // m
  double lr = 0.033;    // m
  double hcg = 0.015;   // m
  double g = 9.81;      // m/s^2
  double Fz0 = 0.2011;  // N
  // Lower clamp on axle normal loads (N).
  double load_floor = 1e-3;

  double wheelbase() const { return lf + lr; }
  double weight() const { return m * g; }

  void check() const {
    if (!(m > 0 && lf > 0 && lr > 0 && hcg >= 0 && g > 0 && Fz0 > 0 && load_floor >= 0) ||
        !std::isfinite(m + lf + lr + hcg + g + Fz0 + load_floor)) {
      throw Error(ErrorKind::Domain, "invalid vehicle geometry");
    }
  }
};

/// 1:43 scale car. Fz0 is half the static weight.
inline VehicleGeometry sim_geometry() {
  VehicleGeometry geom;
  geom.Fz0 = 0.5 * geom.m * geom.g;
  return geom;
}

/// Full-scale open-wheel racecar.
inline VehicleGeometry real_geometry() {
  VehicleGeometry geom;
  geom.m = 790.0;
  geom.lf = 1.7238;
  geom.lr = 1.248;
  geom.hcg = 0.275;
  geom.g = 9.81;
  geom.Fz0 = 0.5 * geom.m * geom.g;
  geom.load_floor = 1.0;
  return geom;
}

// ---------------------------------------------------------------------------
// Learned physical parameters
// ---------------------------------------------------------------------------

inline constexpr std::size_t kNumParams = 17;

/// Flattening order of ModelParams. Fixed; checkpoints and bounds files rely on it.
enum class Slot : std::size_t {
  Bf, Cf, Df, Ef, Br, Cr, Dr, Er, Shf, Svf, Shr, Svr, Cm1, Cm2, Cr0, Cr2, Iz,
};

inline constexpr std::array<std::string_view, kNumParams> kSlotNames = {
    "Bf", "Cf", "Df", "Ef", "Br", "Cr", "Dr", "Er", "Shf",
    "Svf", "Shr", "Svr", "Cm1", "Cm2", "Cr0", "Cr2", "Iz"};

inline constexpr std::size_t index(Slot s) { return static_cast<std::size_t>(s); }

inline std::size_t slot_index(std::string_view name) {
  for (std::size_t i = 0; i < kNumParams; ++i) {
    if (kSlotNames[i] == name) return i;
  }
  throw Error(ErrorKind::Schema, "unknown parameter slot '" + std::string(name) + "'");
}

template <typename S = double>
struct PacejkaCoeffs {
  S Bf{}, Cf{}, Df{}, Ef{};
  S Br{}, Cr{}, Dr{}, Er{};
  S Shf{}, Svf{}, Shr{}, Svr{};
};

template <typename S = double>
struct DrivetrainCoeffs {
  S Cm1{}, Cm2{}, Cr0{}, Cr2{};
};

template <typename S = double>
struct BasicModelParams {
  PacejkaCoeffs<S> pacejka;
  DrivetrainCoeffs<S> drivetrain;
  S Iz{};

  std::array<S, kNumParams> flatten() const {
    const auto& p = pacejka;
    const auto& d = drivetrain;
    return {p.Bf, p.Cf, p.Df, p.Ef, p.Br, p.Cr, p.Dr, p.Er, p.Shf,
            p.Svf, p.Shr, p.Svr, d.Cm1, d.Cm2, d.Cr0, d.Cr2, Iz};
  }

  static BasicModelParams unflatten(const std::array<S, kNumParams>& v) {
    BasicModelParams out;
    auto& p = out.pacejka;
    auto& d = out.drivetrain;
    p.Bf = v[0]; p.Cf = v[1]; p.Df = v[2]; p.Ef = v[3];
    p.Br = v[4]; p.Cr = v[5]; p.Dr = v[6]; p.Er = v[7];
    p.Shf = v[8]; p.Svf = v[9]; p.Shr = v[10]; p.Svr = v[11];
    d.Cm1 = v[12]; d.Cm2 = v[13]; d.Cr0 = v[14]; d.Cr2 = v[15];
    out.Iz = v[16];
    return out;
  }

  S& operator[](Slot s) { return ref(*this, index(s)); }
  const S& operator[](Slot s) const { return ref(*this, index(s)); }

 private:
  template <typename Self>
  static auto& ref(Self& mp, std::size_t i) {
    auto& p = mp.pacejka;
    auto& d = mp.drivetrain;
    decltype(&mp.Iz) slots[kNumParams] = {&p.Bf, &p.Cf, &p.Df, &p.Ef, &p.Br, &p.Cr,
                                          &p.Dr, &p.Er, &p.Shf, &p.Svf, &p.Shr, &p.Svr,
                                          &d.Cm1, &d.Cm2, &d.Cr0, &d.Cr2, &mp.Iz};
    return *slots[i];
  }
};

using ModelParams = BasicModelParams<double>;

/// Ground-truth parameters used by the bundled synthetic data. Pacejka shifts
/// and Iz follow the learned means reported for the 1:43 platform; the shape
/// factors are chosen so the car understeers at racing speeds.
inline ModelParams sim_truth_params() {
  ModelParams p;
  p.pacejka = {6.0, 1.2, 0.19, -0.3, 8.0, 1.3, 0.18, -0.4, -0.0032, 0.0016, -0.0025, -0.00039};
  p.drivetrain = {0.287, 0.0545, 0.0518, 0.00035};
  p.Iz = 2.79e-5;
  return p;
}

// ---------------------------------------------------------------------------
// State and inputs
// ---------------------------------------------------------------------------

template <typename S = double>
struct BasicBodyState {
  S vx{}, vy{}, omega{};
  bool operator==(const BasicBodyState&) const = default;
};

template <typename S = double>
struct BasicPose {
  S x{}, y{}, theta{};
  bool operator==(const BasicPose&) const = default;
};

template <typename S = double>
struct BasicControl {
  S T{}, delta{};
  bool operator==(const BasicControl&) const = default;
};

using BodyState = BasicBodyState<double>;
using Pose = BasicPose<double>;
using ControlInput = BasicControl<double>;

/// Time derivative of BodyState.
template <typename S = double>
struct BasicStateRate {
  S dvx{}, dvy{}, domega{};
};
using StateRate = BasicStateRate<double>;

template <typename S = double>
struct BasicAxleLoads {
  S Ffz{}, Frz{};
};
using AxleLoads = BasicAxleLoads<double>;

/// Model-internal forces of one step, kept for diagnostics and plotting.
struct ForceTrace {
  double Frx = 0, Ffy = 0, Fry = 0, Ffz = 0, Frz = 0, alpha_f = 0, alpha_r = 0;
};

inline bool finite(const BodyState& s) {
  return std::isfinite(s.vx) && std::isfinite(s.vy) && std::isfinite(s.omega);
}
inline bool finite(const Pose& p) {
  return std::isfinite(p.x) && std::isfinite(p.y) && std::isfinite(p.theta);
}
inline bool finite(const ControlInput& u) { return std::isfinite(u.T) && std::isfinite(u.delta); }

/// Which physics the stepper evaluates. These are the ablation variants.
enum class PhysicsMode {
  Full,              // load transfer, lateral forces scaled by Fz / Fz0
  NominalLoad,       // static loads, lateral forces evaluated at Fz0
  LoadTransferOnly,  // load transfer, lateral forces scaled by Fz / Fz_static(axle)
};

inline std::string_view to_string(PhysicsMode mode) {
  switch (mode) {
    case PhysicsMode::Full: return "full";
    case PhysicsMode::NominalLoad: return "nominal-load";
    case PhysicsMode::LoadTransferOnly: return "load-transfer-only";
  }
  return "full";
}

inline PhysicsMode parse_physics_mode(std::string_view s) {
  if (s == "full") return PhysicsMode::Full;
  if (s == "nominal-load" || s == "nominal") return PhysicsMode::NominalLoad;
  if (s == "load-transfer-only" || s == "load-transfer") return PhysicsMode::LoadTransferOnly;
  throw Error(ErrorKind::Domain, "unknown physics mode '" + std::string(s) + "'");
}

}  // namespace pavd
