#pragma once

// TOML files for fixed parameter sets, bounds overrides and vehicle geometry.
//
//   [params]            all 17 slots by name
//   [bounds.<slot>]     lo = ..., hi = ...   (any subset of slots)
//   [geometry]          m, lf, lr, hcg, g, Fz0, load_floor (any subset)

#include <toml.hpp>

#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include "pavd/param_guard.hpp"
#include "pavd/telemetry.hpp"

namespace pavd {

namespace detail {

inline double require_number(const toml::node_view<const toml::node>& n, const std::string& where) {
  if (auto v = n.value<double>()) return *v;
  throw Error(ErrorKind::Schema, where + " missing or not a number");
}

inline toml::table parse_toml_file(const std::filesystem::path& path, std::string_view what) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorKind::Io, "cannot open " + std::string(what) + " " + path.string());
  try {
    return toml::parse(is, path.string());
  } catch (const toml::parse_error& e) {
    throw Error(ErrorKind::Schema, path.string() + ": " + std::string(e.description()));
  }
}

}  // namespace detail

inline void write_params_toml(std::ostream& os, const ModelParams& p) {
  const auto v = p.flatten();
  os << "[params]\n";
  for (std::size_t i = 0; i < kNumParams; ++i) {
    os << kSlotNames[i] << " = " << detail::format_double(v[i]) << '\n';
  }
}

/// Reads the [params] table; every slot is required and unknown keys are rejected.
inline ModelParams parse_params_toml(const toml::table& t) {
  const auto* p = t["params"].as_table();
  if (!p) throw Error(ErrorKind::Schema, "parameter file has no [params] table");
  for (const auto& [key, _] : *p) slot_index(key.str());
  std::array<double, kNumParams> v{};
  const toml::node_view<const toml::node> view{p};
  for (std::size_t i = 0; i < kNumParams; ++i) {
    v[i] = detail::require_number(view[kSlotNames[i]], "params." + std::string(kSlotNames[i]));
    if (!std::isfinite(v[i])) throw Error(ErrorKind::Schema, "params." + std::string(kSlotNames[i]) + " is not finite");
  }
  return ModelParams::unflatten(v);
}

inline ModelParams load_params(const std::filesystem::path& path) {
  return parse_params_toml(detail::parse_toml_file(path, "parameter file"));
}

inline void save_params(const std::filesystem::path& path, const ModelParams& p) {
  std::ofstream os(path);
  if (!os) throw Error(ErrorKind::Io, "cannot write " + path.string());
  write_params_toml(os, p);
}

/// Applies [bounds.<slot>] overrides, if present, and re-checks the box.
inline ParamBounds apply_bounds_overrides(const toml::table& t, ParamBounds b) {
  const auto* tab = t["bounds"].as_table();
  if (!tab) return b;
  for (const auto& [key, node] : *tab) {
    const auto i = slot_index(key.str());
    const auto* row = node.as_table();
    if (!row) throw Error(ErrorKind::Schema, "bounds." + std::string(key.str()) + " must be a table");
    const toml::node_view<const toml::node> view{row};
    if (auto lo = view["lo"].value<double>()) b.lo[i] = *lo;
    if (auto hi = view["hi"].value<double>()) b.hi[i] = *hi;
  }
  b.check();
  return b;
}

inline void write_bounds_toml(std::ostream& os, const ParamBounds& b) {
  for (std::size_t i = 0; i < kNumParams; ++i) {
    os << "[bounds." << kSlotNames[i] << "]\nlo = " << detail::format_double(b.lo[i])
       << "\nhi = " << detail::format_double(b.hi[i]) << '\n';
  }
}

/// Applies [geometry] overrides, if present.
inline VehicleGeometry apply_geometry_overrides(const toml::table& t, VehicleGeometry g) {
  const auto* tab = t["geometry"].as_table();
  if (!tab) return g;
  const toml::node_view<const toml::node> view{tab};
  std::pair<const char*, double*> fields[] = {{"m", &g.m},     {"lf", &g.lf},   {"lr", &g.lr},
                                              {"hcg", &g.hcg}, {"g", &g.g},     {"Fz0", &g.Fz0},
                                              {"load_floor", &g.load_floor}};
  for (const auto& [key, _] : *tab) {
    bool known = false;
    for (const auto& f : fields) known = known || key.str() == f.first;
    if (!known) throw Error(ErrorKind::Schema, "unknown geometry key '" + std::string(key.str()) + "'");
  }
  for (auto& [name, ptr] : fields) {
    if (auto v = view[name].value<double>()) *ptr = *v;
  }
  g.check();
  return g;
}

inline void write_geometry_toml(std::ostream& os, const VehicleGeometry& g) {
  os << "[geometry]\nm = " << detail::format_double(g.m) << "\nlf = " << detail::format_double(g.lf)
     << "\nlr = " << detail::format_double(g.lr) << "\nhcg = " << detail::format_double(g.hcg)
     << "\ng = " << detail::format_double(g.g) << "\nFz0 = " << detail::format_double(g.Fz0)
     << "\nload_floor = " << detail::format_double(g.load_floor) << '\n';
}

}  // namespace pavd
