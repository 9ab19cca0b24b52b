#pragma once

// Closed-circuit track description, TOML I/O, geometric queries and the two
// bundled parametric tracks.

#include <toml.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "pavd/telemetry.hpp"
#include "pavd/types.hpp"

namespace pavd {

inline constexpr int kTrackSchemaVersion = 1;

struct Point2 {
  double x = 0, y = 0;
  bool operator==(const Point2&) const = default;
};

inline double distance(const Point2& a, const Point2& b) { return std::hypot(a.x - b.x, a.y - b.y); }

struct TrackDefinition {
  std::string name;
  std::vector<Point2> centerline;
  /// One value (uniform) or one per centerline waypoint.
  std::vector<double> half_width;
  std::vector<Point2> raceline;
  std::vector<double> speed;  // reference speed per raceline point (m/s)
  bool closed = true;

  double half_width_at(std::size_t i) const {
    return half_width.size() == 1 ? half_width.front() : half_width[i];
  }

  void check() const {
    if (centerline.size() < 3) throw Error(ErrorKind::Domain, "track needs at least 3 waypoints");
    if (half_width.size() != 1 && half_width.size() != centerline.size()) {
      throw Error(ErrorKind::Domain, "half_width must be scalar or per waypoint");
    }
    for (double w : half_width) {
      if (!(w > 0) || !std::isfinite(w)) throw Error(ErrorKind::Domain, "half_width must be > 0");
    }
    for (std::size_t i = 0; i < centerline.size(); ++i) {
      const auto& p = centerline[i];
      if (!std::isfinite(p.x) || !std::isfinite(p.y)) {
        throw Error(ErrorKind::Domain, "non-finite waypoint " + std::to_string(i));
      }
      const auto& q = centerline[(i + 1) % centerline.size()];
      if ((closed || i + 1 < centerline.size()) && p == q) {
        throw Error(ErrorKind::Domain, "repeated consecutive waypoint " + std::to_string(i));
      }
    }
    if (raceline.size() < 3) throw Error(ErrorKind::Domain, "raceline needs at least 3 points");
    if (speed.size() != raceline.size()) {
      throw Error(ErrorKind::Domain, "raceline speed count does not match its points");
    }
    for (double v : speed) {
      if (!(v > 0) || !std::isfinite(v)) throw Error(ErrorKind::Domain, "raceline speeds must be > 0");
    }
  }

  bool operator==(const TrackDefinition&) const = default;
};

// ---------------------------------------------------------------------------
// Polyline queries
// ---------------------------------------------------------------------------

struct PathProjection {
  std::size_t segment = 0;  // segment i runs from point i to point i+1 (wrapping)
  double t = 0;             // position along the segment in [0, 1]
  double s = 0;             // arc length from point 0
  double lateral = 0;       // signed offset, positive to the left of travel
  double heading = 0;       // tangent direction
  Point2 point;
};

/// Closed or open polyline with cached arc lengths.
class Path {
 public:
  Path() = default;
  Path(std::vector<Point2> pts, bool closed) : pts_(std::move(pts)), closed_(closed) {
    if (pts_.size() < 2) throw Error(ErrorKind::Domain, "path needs at least 2 points");
    cum_.assign(pts_.size() + 1, 0.0);
    for (std::size_t i = 0; i < segments(); ++i) cum_[i + 1] = cum_[i] + distance(pts_[i], next(i));
    if (!closed_) cum_.pop_back();
  }

  std::size_t size() const { return pts_.size(); }
  std::size_t segments() const { return closed_ ? pts_.size() : pts_.size() - 1; }
  double length() const { return cum_[segments()]; }
  const Point2& operator[](std::size_t i) const { return pts_[i]; }
  double arc_at(std::size_t i) const { return cum_[i]; }
  bool closed() const { return closed_; }

  PathProjection project(const Point2& p) const {
    PathProjection best;
    double best_d2 = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < segments(); ++i) {
      const auto& a = pts_[i];
      const auto& b = next(i);
      const double dx = b.x - a.x, dy = b.y - a.y;
      const double len2 = dx * dx + dy * dy;
      double t = len2 > 0 ? ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2 : 0.0;
      t = std::clamp(t, 0.0, 1.0);
      const Point2 q{a.x + t * dx, a.y + t * dy};
      const double d2 = (p.x - q.x) * (p.x - q.x) + (p.y - q.y) * (p.y - q.y);
      if (d2 < best_d2) {
        best_d2 = d2;
        best.segment = i;
        best.t = t;
        best.point = q;
        best.heading = std::atan2(dy, dx);
        best.s = cum_[i] + t * std::sqrt(len2);
        const double cross = dx * (p.y - a.y) - dy * (p.x - a.x);
        best.lateral = (cross >= 0 ? 1.0 : -1.0) * std::sqrt(d2);
      }
    }
    return best;
  }

  /// Point and heading at arc length s (wrapped on closed paths, clamped otherwise).
  PathProjection at(double s) const {
    const double L = length();
    if (closed_) {
      s = std::fmod(s, L);
      if (s < 0) s += L;
    } else {
      s = std::clamp(s, 0.0, L);
    }
    auto it = std::upper_bound(cum_.begin(), cum_.begin() + static_cast<long>(segments()) + 1, s);
    std::size_t i = static_cast<std::size_t>(std::max<long>(0, (it - cum_.begin()) - 1));
    i = std::min(i, segments() - 1);
    const double seg = cum_[i + 1] - cum_[i];
    const double t = seg > 0 ? (s - cum_[i]) / seg : 0.0;
    const auto& a = pts_[i];
    const auto& b = next(i);
    PathProjection out;
    out.segment = i;
    out.t = t;
    out.s = s;
    out.point = {a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)};
    out.heading = std::atan2(b.y - a.y, b.x - a.x);
    return out;
  }

  /// Signed arc-length difference s_to - s_from, wrapped to (-L/2, L/2] on closed paths.
  double delta_s(double s_from, double s_to) const {
    double d = s_to - s_from;
    if (closed_) {
      const double L = length();
      d = std::fmod(d, L);
      if (d > 0.5 * L) d -= L;
      if (d <= -0.5 * L) d += L;
    }
    return d;
  }

 private:
  const Point2& next(std::size_t i) const { return pts_[(i + 1) % pts_.size()]; }

  std::vector<Point2> pts_;
  std::vector<double> cum_;
  bool closed_ = true;
};

/// Precomputed geometry for a track definition.
class Track {
 public:
  Track() = default;
  explicit Track(TrackDefinition def) : def_(std::move(def)) {
    def_.check();
    center_ = Path(def_.centerline, def_.closed);
    race_ = Path(def_.raceline, def_.closed);
  }

  const TrackDefinition& definition() const { return def_; }
  const Path& centerline() const { return center_; }
  const Path& raceline() const { return race_; }
  double length() const { return center_.length(); }

  /// Half width at a centerline projection (linear between waypoints).
  double half_width(const PathProjection& pr) const {
    if (def_.half_width.size() == 1) return def_.half_width.front();
    const auto n = def_.centerline.size();
    return (1 - pr.t) * def_.half_width[pr.segment] + pr.t * def_.half_width[(pr.segment + 1) % n];
  }

  /// Distance outside the track edge (<= 0 when inside).
  double excursion(const Point2& p) const {
    const auto pr = center_.project(p);
    return std::abs(pr.lateral) - half_width(pr);
  }

  /// Reference speed on the raceline at a projection (linear between points).
  double reference_speed(const PathProjection& pr) const {
    const auto n = def_.speed.size();
    return (1 - pr.t) * def_.speed[pr.segment] + pr.t * def_.speed[(pr.segment + 1) % n];
  }

 private:
  TrackDefinition def_;
  Path center_;
  Path race_;
};

// ---------------------------------------------------------------------------
// Reference speed profile
// ---------------------------------------------------------------------------

struct SpeedProfileConfig {
  double v_max = 2.5;      // m/s
  double a_lat = 3.0;      // m/s^2, lateral acceleration budget
  double a_brake = 2.0;    // m/s^2
  double a_accel = 1.5;    // m/s^2
  std::size_t curvature_stride = 3;
};

/// Three-point circle radius through p[i-k], p[i], p[i+k] (closed path).
inline std::vector<double> turn_radius(const std::vector<Point2>& p, std::size_t k) {
  const auto n = p.size();
  std::vector<double> r(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& a = p[(i + n - k) % n];
    const auto& b = p[i];
    const auto& c = p[(i + k) % n];
    const double cross = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
    const double abc = distance(a, b) * distance(b, c) * distance(a, c);
    r[i] = std::abs(cross) > 1e-15 ? abc / (2.0 * std::abs(cross)) : std::numeric_limits<double>::infinity();
  }
  return r;
}

/// v = min(v_max, sqrt(a_lat R)) followed by forward (acceleration) and
/// backward (braking) passes around the loop.
inline std::vector<double> speed_profile(const std::vector<Point2>& p, const SpeedProfileConfig& cfg) {
  const auto n = p.size();
  const auto r = turn_radius(p, cfg.curvature_stride);
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = std::min(cfg.v_max, std::sqrt(cfg.a_lat * r[i]));
  for (int sweep = 0; sweep < 2; ++sweep) {
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t i = (k + 1) % n, prev = k;
      const double ds = distance(p[prev], p[i]);
      v[i] = std::min(v[i], std::sqrt(v[prev] * v[prev] + 2 * cfg.a_accel * ds));
    }
    for (std::size_t k = n; k-- > 0;) {
      const std::size_t i = k, nxt = (k + 1) % n;
      const double ds = distance(p[i], p[nxt]);
      v[i] = std::min(v[i], std::sqrt(v[nxt] * v[nxt] + 2 * cfg.a_brake * ds));
    }
  }
  return v;
}

// ---------------------------------------------------------------------------
// Bundled tracks
// ---------------------------------------------------------------------------

struct PolarTrackSpec {
  std::string name;
  double radius = 1.0;
  std::vector<std::pair<int, double>> cos_terms;  // (k, a_k): r *= 1 + sum a_k cos(k phi) ...
  std::vector<std::pair<int, double>> sin_terms;
  double scale_x = 1.0;
  double scale_y = 1.0;
  double spacing = 0.05;
  double half_width = 0.25;
};

/// Uniformly resampled closed curve r(phi) in polar form, counter-clockwise.
inline std::vector<Point2> polar_curve(const PolarTrackSpec& spec) {
  constexpr std::size_t dense = 20000;
  std::vector<Point2> fine(dense + 1);
  std::vector<double> cum(dense + 1, 0.0);
  for (std::size_t i = 0; i <= dense; ++i) {
    const double phi = 2.0 * std::numbers::pi * static_cast<double>(i) / dense;
    double f = 1.0;
    for (auto [k, a] : spec.cos_terms) f += a * std::cos(k * phi);
    for (auto [k, a] : spec.sin_terms) f += a * std::sin(k * phi);
    const double r = spec.radius * f;
    fine[i] = {spec.scale_x * r * std::cos(phi), spec.scale_y * r * std::sin(phi)};
    if (i > 0) cum[i] = cum[i - 1] + distance(fine[i - 1], fine[i]);
  }
  const double L = cum.back();
  const auto n = static_cast<std::size_t>(std::lround(L / spec.spacing));
  std::vector<Point2> out;
  out.reserve(n);
  std::size_t j = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double s = L * static_cast<double>(i) / static_cast<double>(n);
    while (cum[j + 1] < s) ++j;
    const double t = (s - cum[j]) / (cum[j + 1] - cum[j]);
    out.push_back({fine[j].x + t * (fine[j + 1].x - fine[j].x), fine[j].y + t * (fine[j + 1].y - fine[j].y)});
  }
  return out;
}

inline TrackDefinition make_polar_track(const PolarTrackSpec& spec, const SpeedProfileConfig& speed = {}) {
  TrackDefinition def;
  def.name = spec.name;
  def.centerline = polar_curve(spec);
  def.half_width = {spec.half_width};
  def.raceline = def.centerline;
  def.speed = speed_profile(def.raceline, speed);
  def.closed = true;
  return def;
}

/// Elongated loop with a mild asymmetry; used for training data.
inline PolarTrackSpec train_track_spec() {
  PolarTrackSpec s;
  s.name = "ethz-like";
  s.radius = 1.0;
  s.cos_terms = {{2, 0.18}, {4, -0.04}};
  s.sin_terms = {{1, 0.05}};
  s.scale_x = 2.0;
  s.scale_y = 1.0;
  return s;
}

/// Non-convex loop with a three-lobed bend sequence; held out for testing.
inline PolarTrackSpec test_track_spec() {
  PolarTrackSpec s;
  s.name = "ethzmobil-like";
  s.radius = 1.55;
  s.cos_terms = {{2, 0.2}};
  s.sin_terms = {{3, 0.12}};
  return s;
}

inline std::vector<std::string> builtin_track_names() { return {"ethz-like", "ethzmobil-like"}; }

inline TrackDefinition builtin_track(std::string_view name) {
  if (name == "ethz-like" || name == "train" || name == "train-track") return make_polar_track(train_track_spec());
  if (name == "ethzmobil-like" || name == "test" || name == "test-track") return make_polar_track(test_track_spec());
  throw Error(ErrorKind::Domain, "unknown built-in track '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// TOML
// ---------------------------------------------------------------------------

namespace detail {

inline void write_array(std::ostream& os, std::string_view key, const std::vector<double>& v) {
  os << key << " = [";
  for (std::size_t i = 0; i < v.size(); ++i) {
    os << (i % 6 == 0 ? "\n  " : " ") << format_double(v[i]) << ',';
  }
  os << "\n]\n";
}

inline std::vector<double> read_array(const toml::table& t, std::string_view key, std::string_view where) {
  const auto* arr = t[key].as_array();
  if (!arr) throw Error(ErrorKind::Schema, std::string(where) + "." + std::string(key) + " missing or not an array");
  std::vector<double> out;
  out.reserve(arr->size());
  for (const auto& el : *arr) {
    if (auto d = el.value<double>()) {
      out.push_back(*d);
    } else {
      throw Error(ErrorKind::Schema, std::string(where) + "." + std::string(key) + " has a non-numeric entry");
    }
  }
  return out;
}

}  // namespace detail

inline void write_track_toml(std::ostream& os, const TrackDefinition& def) {
  os << "schema_version = " << kTrackSchemaVersion << '\n';
  os << "name = \"" << def.name << "\"\n";
  os << "closed = " << (def.closed ? "true" : "false") << '\n';
  if (def.half_width.size() == 1) {
    os << "half_width = " << detail::format_double(def.half_width.front()) << '\n';
  } else {
    detail::write_array(os, "half_width", def.half_width);
  }
  auto xs = [](const std::vector<Point2>& p, bool x) {
    std::vector<double> v;
    for (const auto& q : p) v.push_back(x ? q.x : q.y);
    return v;
  };
  os << "\n[centerline]\n";
  detail::write_array(os, "x", xs(def.centerline, true));
  detail::write_array(os, "y", xs(def.centerline, false));
  os << "\n[raceline]\n";
  detail::write_array(os, "x", xs(def.raceline, true));
  detail::write_array(os, "y", xs(def.raceline, false));
  detail::write_array(os, "v", def.speed);
}

inline void save_track(const std::filesystem::path& path, const TrackDefinition& def) {
  std::ofstream os(path);
  if (!os) throw Error(ErrorKind::Io, "cannot write " + path.string());
  write_track_toml(os, def);
}

inline TrackDefinition parse_track_toml(const toml::table& t) {
  const auto version = t["schema_version"].value<std::int64_t>();
  if (!version) throw Error(ErrorKind::Schema, "track file has no schema_version");
  if (*version != kTrackSchemaVersion) {
    throw Error(ErrorKind::Schema, "unsupported track schema_version " + std::to_string(*version));
  }
  TrackDefinition def;
  def.name = t["name"].value_or(std::string("unnamed"));
  def.closed = t["closed"].value_or(true);
  if (auto w = t["half_width"].value<double>()) {
    def.half_width = {*w};
  } else {
    def.half_width = detail::read_array(t, "half_width", "track");
  }
  const auto* c = t["centerline"].as_table();
  const auto* r = t["raceline"].as_table();
  if (!c) throw Error(ErrorKind::Schema, "track has no [centerline] table");
  const auto cx = detail::read_array(*c, "x", "centerline");
  const auto cy = detail::read_array(*c, "y", "centerline");
  if (cx.size() != cy.size()) throw Error(ErrorKind::Schema, "centerline x and y differ in length");
  for (std::size_t i = 0; i < cx.size(); ++i) def.centerline.push_back({cx[i], cy[i]});
  if (r) {
    const auto rx = detail::read_array(*r, "x", "raceline");
    const auto ry = detail::read_array(*r, "y", "raceline");
    if (rx.size() != ry.size()) throw Error(ErrorKind::Schema, "raceline x and y differ in length");
    for (std::size_t i = 0; i < rx.size(); ++i) def.raceline.push_back({rx[i], ry[i]});
    def.speed = detail::read_array(*r, "v", "raceline");
  } else {
    def.raceline = def.centerline;
    def.speed = speed_profile(def.raceline, {});
  }
  def.check();
  return def;
}

inline TrackDefinition read_track_toml(std::istream& is, const std::string& source = "<stream>") {
  try {
    return parse_track_toml(toml::parse(is, source));
  } catch (const toml::parse_error& e) {
    throw Error(ErrorKind::Schema, "track TOML parse error: " + std::string(e.description()));
  }
}

inline TrackDefinition load_track(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorKind::Io, "cannot open track file " + path.string());
  return read_track_toml(is, path.string());
}

/// A built-in name or a path to a TOML track file.
inline TrackDefinition resolve_track(const std::string& name_or_path) {
  for (const auto& n : builtin_track_names()) {
    if (name_or_path == n) return builtin_track(n);
  }
  if (name_or_path == "train" || name_or_path == "test" || name_or_path == "train-track" ||
      name_or_path == "test-track") {
    return builtin_track(name_or_path);
  }
  return load_track(name_or_path);
}

}  // namespace pavd
