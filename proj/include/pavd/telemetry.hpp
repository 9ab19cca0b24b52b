#pragma once

// Telemetry records, the versioned CSV format, windowing and dataset splits.

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <utility>
#include <vector>

#include "pavd/types.hpp"

namespace pavd {

inline constexpr int kTelemetrySchemaVersion = 1;

struct TelemetryRecord {
  double t = 0;
  BodyState state;
  Pose pose;
  ControlInput u_fb;   // applied (measured) actuator positions
  ControlInput u_cmd;  // controller commands

  bool operator==(const TelemetryRecord& o) const {
    return t == o.t && state.vx == o.state.vx && state.vy == o.state.vy &&
           state.omega == o.state.omega && pose.x == o.pose.x && pose.y == o.pose.y &&
           pose.theta == o.pose.theta && u_fb.T == o.u_fb.T && u_fb.delta == o.u_fb.delta &&
           u_cmd.T == o.u_cmd.T && u_cmd.delta == o.u_cmd.delta;
  }
};

enum class Source { Synthetic, Imported };

struct TelemetrySeries {
  std::vector<TelemetryRecord> records;
  double rate_hz = 50.0;
  Source source = Source::Imported;
  /// Record index at which each lap begins (may be empty).
  std::vector<std::size_t> lap_starts;

  std::size_t size() const { return records.size(); }
  bool empty() const { return records.empty(); }
  double dt() const { return 1.0 / rate_hz; }

  /// Throws on non-increasing timestamps or spacing off by more than 1%.
  void check() const {
    if (!(rate_hz > 0) || !std::isfinite(rate_hz)) throw Error(ErrorKind::Data, "invalid rate");
    const double step = dt();
    for (std::size_t i = 1; i < records.size(); ++i) {
      const double gap = records[i].t - records[i - 1].t;
      if (!(gap > 0)) {
        throw Error(ErrorKind::Ordering,
                    "timestamps not strictly increasing at row " + std::to_string(i));
      }
      if (std::abs(gap - step) > 0.01 * step) {
        throw Error(ErrorKind::Ordering, "irregular sample spacing at row " + std::to_string(i));
      }
    }
  }
};

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

inline constexpr std::array<std::string_view, 11> kTelemetryColumns = {
    "t", "x", "y", "theta", "vx", "vy", "omega", "throttle_fb", "steer_fb", "throttle_cmd",
    "steer_cmd"};

namespace detail {

/// Shortest representation that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline bool parse_double(std::string_view s, double& out) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  return res.ec == std::errc() && res.ptr == s.data() + s.size();
}

inline std::vector<std::string_view> split(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    auto pos = line.find(sep, start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? line.npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

}  // namespace detail

inline void write_csv(std::ostream& os, const TelemetrySeries& series) {
  os << "# pavd-telemetry schema_version=" << kTelemetrySchemaVersion
     << " rate_hz=" << detail::format_double(series.rate_hz)
     << " source=" << (series.source == Source::Synthetic ? "synthetic" : "imported");
  if (!series.lap_starts.empty()) {
    os << " lap_starts=";
    for (std::size_t i = 0; i < series.lap_starts.size(); ++i) {
      os << (i ? ";" : "") << series.lap_starts[i];
    }
  }
  os << '\n';
  for (std::size_t i = 0; i < kTelemetryColumns.size(); ++i) {
    os << (i ? "," : "") << kTelemetryColumns[i];
  }
  os << '\n';
  using detail::format_double;
  for (const auto& r : series.records) {
    os << format_double(r.t) << ',' << format_double(r.pose.x) << ',' << format_double(r.pose.y)
       << ',' << format_double(r.pose.theta) << ',' << format_double(r.state.vx) << ','
       << format_double(r.state.vy) << ',' << format_double(r.state.omega) << ','
       << format_double(r.u_fb.T) << ',' << format_double(r.u_fb.delta) << ','
       << format_double(r.u_cmd.T) << ',' << format_double(r.u_cmd.delta) << '\n';
  }
}

inline void write_csv(const std::filesystem::path& path, const TelemetrySeries& series) {
  std::ofstream os(path);
  if (!os) throw Error(ErrorKind::Io, "cannot write " + path.string());
  write_csv(os, series);
  if (!os) throw Error(ErrorKind::Io, "failed writing " + path.string());
}

inline TelemetrySeries read_csv(std::istream& is) {
  TelemetrySeries series;
  bool rate_given = false;
  std::string line;
  std::vector<int> column_of;  // file column -> record field, -1 = ignored
  std::size_t line_no = 0;
  bool have_header = false;

  while (std::getline(is, line)) {
    ++line_no;
    std::string_view sv = detail::trim(line);
    if (sv.empty()) continue;
    if (sv.front() == '#') {
      // Metadata: key=value tokens.
      std::istringstream meta{std::string(sv.substr(1))};
      std::string tok;
      while (meta >> tok) {
        auto eq = tok.find('=');
        if (eq == std::string::npos) continue;
        const std::string key = tok.substr(0, eq);
        const std::string val = tok.substr(eq + 1);
        if (key == "schema_version") {
          if (val != std::to_string(kTelemetrySchemaVersion)) {
            throw Error(ErrorKind::Schema, "unsupported telemetry schema_version " + val);
          }
        } else if (key == "rate_hz") {
          if (!detail::parse_double(val, series.rate_hz)) {
            throw Error(ErrorKind::Schema, "bad rate_hz '" + val + "'");
          }
          rate_given = true;
        } else if (key == "source") {
          series.source = val == "synthetic" ? Source::Synthetic : Source::Imported;
        } else if (key == "lap_starts") {
          for (auto part : detail::split(val, ';')) {
            double idx = 0;
            if (!detail::parse_double(part, idx) || idx < 0) {
              throw Error(ErrorKind::Schema, "bad lap_starts entry");
            }
            series.lap_starts.push_back(static_cast<std::size_t>(idx));
          }
        }
      }
      continue;
    }
    if (!have_header) {
      const auto names = detail::split(sv, ',');
      column_of.assign(names.size(), -1);
      std::vector<bool> seen(kTelemetryColumns.size(), false);
      for (std::size_t c = 0; c < names.size(); ++c) {
        const auto name = detail::trim(names[c]);
        for (std::size_t k = 0; k < kTelemetryColumns.size(); ++k) {
          if (name == kTelemetryColumns[k]) {
            column_of[c] = static_cast<int>(k);
            seen[k] = true;
          }
        }
      }
      for (std::size_t k = 0; k < kTelemetryColumns.size(); ++k) {
        if (!seen[k]) {
          throw Error(ErrorKind::Schema,
                      "missing column '" + std::string(kTelemetryColumns[k]) + "'");
        }
      }
      have_header = true;
      continue;
    }
    const auto cells = detail::split(sv, ',');
    if (cells.size() != column_of.size()) {
      throw Error(ErrorKind::Data, "wrong number of fields on line " + std::to_string(line_no));
    }
    std::array<double, kTelemetryColumns.size()> v{};
    for (std::size_t c = 0; c < cells.size(); ++c) {
      if (column_of[c] < 0) continue;
      double x = 0;
      if (!detail::parse_double(cells[c], x) || !std::isfinite(x)) {
        throw Error(ErrorKind::Data, "non-finite or unparsable value in row " +
                                         std::to_string(series.records.size()) + " (line " +
                                         std::to_string(line_no) + ")");
      }
      v[static_cast<std::size_t>(column_of[c])] = x;
    }
    TelemetryRecord r;
    r.t = v[0];
    r.pose = {v[1], v[2], v[3]};
    r.state = {v[4], v[5], v[6]};
    r.u_fb = {v[7], v[8]};
    r.u_cmd = {v[9], v[10]};
    if (!series.records.empty() && !(r.t > series.records.back().t)) {
      throw Error(ErrorKind::Ordering, "timestamps not strictly increasing at row " +
                                           std::to_string(series.records.size()));
    }
    series.records.push_back(r);
  }
  if (!have_header) throw Error(ErrorKind::Schema, "missing header row");
  if (!rate_given && series.records.size() >= 2) {
    std::vector<double> gaps;
    for (std::size_t i = 1; i < series.records.size(); ++i) {
      gaps.push_back(series.records[i].t - series.records[i - 1].t);
    }
    std::nth_element(gaps.begin(), gaps.begin() + static_cast<long>(gaps.size() / 2), gaps.end());
    series.rate_hz = 1.0 / gaps[gaps.size() / 2];
  }
  series.check();
  return series;
}

inline TelemetrySeries load_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorKind::Io, "cannot open telemetry file " + path.string());
  return read_csv(is);
}

// ---------------------------------------------------------------------------
// Windows
// ---------------------------------------------------------------------------

/// tau consecutive records and the state that follows them.
struct SampleWindow {
  std::vector<TelemetryRecord> history;
  BodyState target;
  Pose target_pose;
  std::size_t start = 0;  // index of history.front() in the source series

  const TelemetryRecord& current() const { return history.back(); }
};

/// Sliding windows; the target of each window is the record right after it.
/// Too-short series yield an empty list.
inline std::vector<SampleWindow> make_windows(const TelemetrySeries& series, std::size_t tau,
                                              std::size_t stride = 1) {
  if (tau == 0 || stride == 0) throw Error(ErrorKind::Domain, "tau and stride must be positive");
  std::vector<SampleWindow> out;
  const auto& rec = series.records;
  for (std::size_t i = 0; i + tau < rec.size(); i += stride) {
    SampleWindow w;
    w.history.assign(rec.begin() + static_cast<long>(i), rec.begin() + static_cast<long>(i + tau));
    w.target = rec[i + tau].state;
    w.target_pose = rec[i + tau].pose;
    w.start = i;
    out.push_back(std::move(w));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

template <typename T>
struct Split {
  std::vector<T> train;
  std::vector<T> test;
};

/// First round(fraction * n) items go to train, the rest to test.
template <typename T>
Split<T> split_by_fraction(const std::vector<T>& items, double fraction) {
  if (items.empty()) throw Error(ErrorKind::Domain, "cannot split an empty set");
  if (!(fraction >= 0 && fraction <= 1)) throw Error(ErrorKind::Domain, "fraction must be in [0,1]");
  const auto cut = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(items.size())));
  Split<T> s;
  s.train.assign(items.begin(), items.begin() + static_cast<long>(cut));
  s.test.assign(items.begin() + static_cast<long>(cut), items.end());
  return s;
}

/// Splits at a lap boundary: laps [0, train_laps) go to train.
inline Split<TelemetryRecord> split_by_lap(const TelemetrySeries& series, std::size_t train_laps) {
  if (series.empty()) throw Error(ErrorKind::Domain, "cannot split an empty series");
  if (series.lap_starts.empty()) throw Error(ErrorKind::Domain, "series has no lap boundaries");
  const std::size_t cut = train_laps < series.lap_starts.size() ? series.lap_starts[train_laps]
                                                                : series.records.size();
  Split<TelemetryRecord> s;
  s.train.assign(series.records.begin(), series.records.begin() + static_cast<long>(cut));
  s.test.assign(series.records.begin() + static_cast<long>(cut), series.records.end());
  return s;
}

/// Series-valued lap split that keeps rate and source.
inline std::pair<TelemetrySeries, TelemetrySeries> split_series_by_lap(const TelemetrySeries& series,
                                                                      std::size_t train_laps) {
  auto s = split_by_lap(series, train_laps);
  TelemetrySeries a{std::move(s.train), series.rate_hz, series.source, {}};
  TelemetrySeries b{std::move(s.test), series.rate_hz, series.source, {}};
  for (auto start : series.lap_starts) {
    if (start < a.size()) a.lap_starts.push_back(start);
    else b.lap_starts.push_back(start - a.size());
  }
  return {std::move(a), std::move(b)};
}

}  // namespace pavd
