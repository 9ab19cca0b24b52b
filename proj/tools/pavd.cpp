// pavd: generate telemetry, train the parameter estimator, evaluate it open
// loop, race it in closed loop and collect the results.
//
// Settings come from built-in defaults, then a TOML config file (--config or
// $PAVD_CONFIG), then flags. The resolved settings are written next to the
// outputs as resolved_config.toml and can be fed back with --config.
//
// Exit codes: 0 ok, 1 internal error, 2 bad input, 3 domain failure.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <toml.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "pavd/estimator/checkpoint.hpp"
#include "pavd/estimator/estimator.hpp"
#include "pavd/evaluation.hpp"
#include "pavd/generator.hpp"
#include "pavd/params_io.hpp"
#include "pavd/raceloop.hpp"
#include "pavd/telemetry.hpp"
#include "pavd/track.hpp"

namespace fs = std::filesystem;
using namespace pavd;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInternal = 1;
constexpr int kExitBadInput = 2;
constexpr int kExitDomain = 3;

// ---------------------------------------------------------------------------
// Settings
// ---------------------------------------------------------------------------

struct Global {
  std::uint64_t seed = 0;
  std::string profile = "sim";
  std::string mode = "full";
  bool mode_given = false;  // eval falls back to the checkpoint's mode otherwise
  std::string out_dir = "pavd-run";
};

struct GenData {
  std::string track = "ethz-like";
  std::int64_t laps = 3;
  double rate = 50;
  double actuator_tau = 0.05;
  double start_speed = 1.0;
  double throttle_noise = 0.2;
  double steer_noise = 0.06;
  std::int64_t noise_hold = 10;
  std::string params_file;  // empty: built-in ground truth (sim profile only)
};

struct Train {
  std::string data;
  double val_fraction = 0.2;
  std::int64_t history_len = 12;
  std::int64_t gru_layers = -1;  // -1: profile default
  std::int64_t gru_hidden = -1;
  std::vector<std::int64_t> dense_widths;  // empty: profile default
  std::int64_t epochs = 50;
  std::int64_t batch_size = 128;
  double lr = 1e-3;
  std::int64_t warmup_steps = -1;
  bool balance_loss = true;
  bool standardize = true;
  std::string resume;
};

struct Eval {
  std::string model;
  std::string params_file;
  std::string data;
  double horizon_ms = 0;  // 0: 300 for sim, 600 for real
  std::string replay = "feedback";
  std::int64_t stride = 1;
  bool baselines = true;
};

struct Race {
  std::string model;
  std::string params_file;
  std::string plant_params_file;  // empty: built-in ground truth
  std::string track = "ethz-like";
  std::string controller = "nmpc";
  std::int64_t horizon = 15;
  std::int64_t laps = 1;
  double max_time = 60;
  double actuator_tau = 0.05;
  double rate = 50;
};

struct Report {
  std::vector<std::string> runs;
};

// Reads `key` from a TOML table into `out` when present; type errors are bad input.
template <typename T>
void take(const toml::table* t, std::string_view key, T& out) {
  if (!t) return;
  const auto* node = t->get(key);
  if (!node) return;
  if constexpr (std::is_same_v<T, std::vector<std::int64_t>> || std::is_same_v<T, std::vector<std::string>>) {
    const auto* arr = node->as_array();
    if (!arr) throw Error(ErrorKind::Schema, "config key '" + std::string(key) + "' must be an array");
    out.clear();
    for (const auto& el : *arr) {
      auto v = el.value<typename T::value_type>();
      if (!v) throw Error(ErrorKind::Schema, "config key '" + std::string(key) + "' has a bad element");
      out.push_back(*v);
    }
  } else {
    auto v = node->value<T>();
    if (!v) throw Error(ErrorKind::Schema, "config key '" + std::string(key) + "' has the wrong type");
    out = *v;
  }
}

void check_keys(const toml::table* t, std::initializer_list<std::string_view> known, std::string_view where) {
  if (!t) return;
  for (const auto& [k, _] : *t) {
    bool ok = false;
    for (auto n : known) ok = ok || k.str() == n;
    if (!ok) throw Error(ErrorKind::Schema, "unknown key '" + std::string(k.str()) + "' in " + std::string(where));
  }
}

// Everything one invocation needs, resolved.
struct Settings {
  Global global;
  GenData gen;
  Train train;
  Eval eval;
  Race race;
  Report report;
  VehicleGeometry geometry;
  ParamBounds bounds;
  toml::table file;  // raw config file, empty if none

  Profile profile() const { return parse_profile(global.profile); }
  PhysicsMode mode() const { return parse_physics_mode(global.mode); }
};

void load_file(Settings& s, const std::string& path) {
  s.file = detail::parse_toml_file(path, "config file");
  const auto& f = s.file;
  check_keys(&f, {"seed", "profile", "mode", "out_dir", "gen-data", "train", "eval", "race", "report", "geometry", "bounds"},
             "config file");
  std::int64_t seed = static_cast<std::int64_t>(s.global.seed);
  take(&f, "seed", seed);
  if (seed < 0) throw Error(ErrorKind::Schema, "seed must be >= 0");
  s.global.seed = static_cast<std::uint64_t>(seed);
  take(&f, "profile", s.global.profile);
  if (f.get("mode")) {
    take(&f, "mode", s.global.mode);
    s.global.mode_given = true;
  }
  take(&f, "out_dir", s.global.out_dir);

  const auto* g = f["gen-data"].as_table();
  check_keys(g, {"track", "laps", "rate", "actuator_tau", "start_speed", "throttle_noise", "steer_noise", "noise_hold", "params_file"}, "[gen-data]");
  take(g, "track", s.gen.track);
  take(g, "laps", s.gen.laps);
  take(g, "rate", s.gen.rate);
  take(g, "actuator_tau", s.gen.actuator_tau);
  take(g, "start_speed", s.gen.start_speed);
  take(g, "throttle_noise", s.gen.throttle_noise);
  take(g, "steer_noise", s.gen.steer_noise);
  take(g, "noise_hold", s.gen.noise_hold);
  take(g, "params_file", s.gen.params_file);

  const auto* t = f["train"].as_table();
  check_keys(t, {"data", "val_fraction", "history_len", "gru_layers", "gru_hidden", "dense_widths", "epochs", "batch_size", "lr",
                 "warmup_steps", "balance_loss", "standardize", "resume"}, "[train]");
  take(t, "data", s.train.data);
  take(t, "val_fraction", s.train.val_fraction);
  take(t, "history_len", s.train.history_len);
  take(t, "gru_layers", s.train.gru_layers);
  take(t, "gru_hidden", s.train.gru_hidden);
  take(t, "dense_widths", s.train.dense_widths);
  take(t, "epochs", s.train.epochs);
  take(t, "batch_size", s.train.batch_size);
  take(t, "lr", s.train.lr);
  take(t, "warmup_steps", s.train.warmup_steps);
  take(t, "balance_loss", s.train.balance_loss);
  take(t, "standardize", s.train.standardize);
  take(t, "resume", s.train.resume);

  const auto* e = f["eval"].as_table();
  check_keys(e, {"model", "params_file", "data", "horizon_ms", "replay", "stride", "baselines"}, "[eval]");
  take(e, "model", s.eval.model);
  take(e, "params_file", s.eval.params_file);
  take(e, "data", s.eval.data);
  take(e, "horizon_ms", s.eval.horizon_ms);
  take(e, "replay", s.eval.replay);
  take(e, "stride", s.eval.stride);
  take(e, "baselines", s.eval.baselines);

  const auto* r = f["race"].as_table();
  check_keys(r, {"model", "params_file", "plant_params_file", "track", "controller", "horizon", "laps", "max_time", "actuator_tau", "rate"},
             "[race]");
  take(r, "model", s.race.model);
  take(r, "params_file", s.race.params_file);
  take(r, "plant_params_file", s.race.plant_params_file);
  take(r, "track", s.race.track);
  take(r, "controller", s.race.controller);
  take(r, "horizon", s.race.horizon);
  take(r, "laps", s.race.laps);
  take(r, "max_time", s.race.max_time);
  take(r, "actuator_tau", s.race.actuator_tau);
  take(r, "rate", s.race.rate);

  const auto* rep = f["report"].as_table();
  check_keys(rep, {"runs"}, "[report]");
  take(rep, "runs", s.report.runs);
}

// Geometry and bounds depend on the profile, so they resolve after it is known.
void resolve_vehicle(Settings& s) {
  const auto prof = s.profile();
  s.geometry = apply_geometry_overrides(s.file, prof == Profile::Sim ? sim_geometry() : real_geometry());
  s.bounds = apply_bounds_overrides(s.file, builtin_profile(prof).bounds);
  parse_physics_mode(s.global.mode);
}

// ---------------------------------------------------------------------------
// Resolved config output
// ---------------------------------------------------------------------------

std::string abs_or_empty(const std::string& p) { return p.empty() ? p : fs::absolute(p).lexically_normal().string(); }

void write_resolved(const Settings& s, const std::string& command, const fs::path& dir) {
  std::ostringstream os;
  toml::table top;
  top.insert("seed", static_cast<std::int64_t>(s.global.seed));
  top.insert("profile", s.global.profile);
  top.insert("mode", s.global.mode);
  top.insert("out_dir", abs_or_empty(s.global.out_dir));
  toml::table sec;
  if (command == "gen-data") {
    const auto& g = s.gen;
    sec.insert("track", g.track);
    sec.insert("laps", g.laps);
    sec.insert("rate", g.rate);
    sec.insert("actuator_tau", g.actuator_tau);
    sec.insert("start_speed", g.start_speed);
    sec.insert("throttle_noise", g.throttle_noise);
    sec.insert("steer_noise", g.steer_noise);
    sec.insert("noise_hold", g.noise_hold);
    sec.insert("params_file", g.params_file);
  } else if (command == "train") {
    const auto& t = s.train;
    sec.insert("data", t.data);
    sec.insert("val_fraction", t.val_fraction);
    sec.insert("history_len", t.history_len);
    sec.insert("gru_layers", t.gru_layers);
    sec.insert("gru_hidden", t.gru_hidden);
    toml::array dw;
    for (auto d : t.dense_widths) dw.push_back(d);
    sec.insert("dense_widths", dw);
    sec.insert("epochs", t.epochs);
    sec.insert("batch_size", t.batch_size);
    sec.insert("lr", t.lr);
    sec.insert("warmup_steps", t.warmup_steps);
    sec.insert("balance_loss", t.balance_loss);
    sec.insert("standardize", t.standardize);
    sec.insert("resume", t.resume);
  } else if (command == "eval") {
    const auto& e = s.eval;
    sec.insert("model", e.model);
    sec.insert("params_file", e.params_file);
    sec.insert("data", e.data);
    sec.insert("horizon_ms", e.horizon_ms);
    sec.insert("replay", e.replay);
    sec.insert("stride", e.stride);
    sec.insert("baselines", e.baselines);
  } else if (command == "race") {
    const auto& r = s.race;
    sec.insert("model", r.model);
    sec.insert("params_file", r.params_file);
    sec.insert("plant_params_file", r.plant_params_file);
    sec.insert("track", r.track);
    sec.insert("controller", r.controller);
    sec.insert("horizon", r.horizon);
    sec.insert("laps", r.laps);
    sec.insert("max_time", r.max_time);
    sec.insert("actuator_tau", r.actuator_tau);
    sec.insert("rate", r.rate);
  } else if (command == "report") {
    toml::array runs;
    for (const auto& r : s.report.runs) runs.push_back(r);
    sec.insert("runs", runs);
  }
  top.insert(command, sec);
  os << "# resolved settings for `pavd " << command << "`\n" << top << "\n\n";
  write_geometry_toml(os, s.geometry);
  os << '\n';
  write_bounds_toml(os, s.bounds);
  std::ofstream f(dir / "resolved_config.toml");
  if (!f) throw Error(ErrorKind::Io, "cannot write " + (dir / "resolved_config.toml").string());
  f << os.str();
}

fs::path prepare_out_dir(const Settings& s) {
  fs::path dir(s.global.out_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::Io, "cannot create output directory " + dir.string() + ": " + ec.message());
  return dir;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream os(path);
  if (!os) throw Error(ErrorKind::Io, "cannot write " + path.string());
  os << j.dump(2) << '\n';
}

// Paths in the resolved config are absolute so the file works from anywhere.
void absolutize(Settings& s) {
  for (auto* p : {&s.gen.params_file, &s.train.data, &s.train.resume, &s.eval.model, &s.eval.params_file, &s.eval.data,
                  &s.race.model, &s.race.params_file, &s.race.plant_params_file}) {
    *p = abs_or_empty(*p);
  }
  for (auto& r : s.report.runs) r = abs_or_empty(r);
  // Track names stay as names; files become absolute.
  for (auto* t : {&s.gen.track, &s.race.track}) {
    bool builtin = false;
    for (const auto& n : builtin_track_names()) builtin = builtin || *t == n;
    for (const char* alias : {"train", "test", "train-track", "test-track"}) builtin = builtin || *t == alias;
    if (!builtin) *t = abs_or_empty(*t);
  }
}

ModelParams truth_for(const Settings& s, const std::string& file) {
  if (!file.empty()) return load_params(file);
  if (s.profile() != Profile::Sim) {
    throw Error(ErrorKind::Domain, "the real profile has no built-in ground truth; pass a params file");
  }
  return sim_truth_params();
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

int cmd_gen_data(const Settings& s) {
  const auto& g = s.gen;
  if (g.laps < 1) throw Error(ErrorKind::Domain, "laps must be >= 1");
  if (!(g.rate > 0)) throw Error(ErrorKind::Domain, "rate must be positive");
  const Track track(resolve_track(g.track));
  const auto truth = truth_for(s, g.params_file);
  GeneratorConfig cfg;
  cfg.dt = 1.0 / g.rate;
  cfg.actuator_tau = g.actuator_tau;
  cfg.start_speed = g.start_speed;
  cfg.seed = s.global.seed;
  cfg.throttle_noise = g.throttle_noise;
  cfg.steer_noise = g.steer_noise;
  cfg.noise_hold = static_cast<int>(g.noise_hold);
  std::vector<ForceTrace> forces;
  const auto series = generate_synthetic(track, truth, s.geometry, static_cast<std::size_t>(g.laps), cfg, &forces);

  const auto dir = prepare_out_dir(s);
  write_csv(dir / "telemetry.csv", series);
  save_track(dir / "track.toml", track.definition());
  save_params(dir / "truth_params.toml", truth);
  {
    std::ofstream os(dir / "forces.csv");
    os << "t,Frx,Ffy,Fry,Ffz,Frz,alpha_f,alpha_r\n";
    for (std::size_t k = 0; k < forces.size(); ++k) {
      const auto& f = forces[k];
      os << detail::format_double(series.records[k].t);
      for (double v : {f.Frx, f.Ffy, f.Fry, f.Ffz, f.Frz, f.alpha_f, f.alpha_r}) os << ',' << detail::format_double(v);
      os << '\n';
    }
  }
  write_resolved(s, "gen-data", dir);
  std::cout << "wrote " << series.size() << " records (" << g.laps << " laps at " << g.rate << " Hz) to "
            << (dir / "telemetry.csv").string() << "\nground-truth parameters:\n";
  write_params_toml(std::cout, truth);
  return kExitOk;
}

int cmd_train(const Settings& s) {
  const auto& t = s.train;
  if (t.data.empty()) throw Error(ErrorKind::Domain, "train needs a telemetry CSV (--data)");
  if (!(t.val_fraction >= 0 && t.val_fraction < 1)) throw Error(ErrorKind::Domain, "val_fraction must be in [0, 1)");
  const auto series = load_csv(t.data);
  const double dt = 1.0 / series.rate_hz;

  nn::Checkpoint ck;
  if (!t.resume.empty()) {
    ck = nn::load_checkpoint(t.resume);
    if (ck.bounds.name != s.profile()) throw Error(ErrorKind::Schema, "checkpoint profile differs from --profile");
    if (std::abs(ck.dt - dt) > 1e-12) throw Error(ErrorKind::Schema, "checkpoint sample time differs from the data");
  } else {
    auto nc = nn::NetworkConfig::for_profile(s.profile());
    nc.history_len = static_cast<int>(t.history_len);
    if (t.gru_layers > 0) nc.gru_layers = static_cast<int>(t.gru_layers);
    if (t.gru_hidden > 0) nc.gru_hidden = static_cast<int>(t.gru_hidden);
    if (!t.dense_widths.empty()) {
      nc.dense_widths.clear();
      for (auto d : t.dense_widths) nc.dense_widths.push_back(static_cast<int>(d));
    }
    ck.net = nn::Network(nc);
    ck.net.initialize(s.global.seed);
    ck.bounds = BoundsProfile{s.profile(), s.bounds};
    ck.geom = s.geometry;
    ck.dt = dt;
    ck.mode = s.mode();
    ck.seed = s.global.seed;
  }
  const auto tau = static_cast<std::size_t>(ck.net.config().history_len);
  const auto windows = make_windows(series, tau, 1);
  const auto split = split_by_fraction(windows, 1.0 - t.val_fraction);

  nn::TrainConfig tc;
  tc.base_lr = t.lr;
  tc.batch_size = static_cast<int>(t.batch_size);
  tc.epochs = static_cast<int>(t.epochs);
  tc.warmup_steps = t.warmup_steps;
  tc.seed = s.global.seed;
  tc.mode = ck.mode;
  tc.balance_loss = t.balance_loss;
  tc.standardize = t.standardize;

  nn::OptimizerState opt = ck.opt.value_or(nn::OptimizerState{});
  int last_finite = -1;
  const auto prior_epochs = ck.train_loss.size();
  nn::TrainHistory hist;
  try {
    hist = nn::train(split.train, split.test, ck.net, opt, tc, ck.bounds.bounds, ck.geom, dt,
                     [&](int epoch, double tl, double vl) {
                       if (std::isfinite(tl)) last_finite = epoch;
                       std::cerr << "epoch " << (prior_epochs + static_cast<std::size_t>(epoch) + 1) << " train " << tl
                                 << " val " << vl << '\n';
                     });
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::Divergence) throw;
    std::cerr << "training diverged: " << e.what() << "; last finite epoch "
              << (last_finite < 0 ? std::string("none") : std::to_string(prior_epochs + static_cast<std::size_t>(last_finite) + 1))
              << '\n';
    return kExitDomain;
  }
  ck.opt = opt;
  ck.train_loss.insert(ck.train_loss.end(), hist.train_loss.begin(), hist.train_loss.end());
  ck.val_loss.insert(ck.val_loss.end(), hist.val_loss.begin(), hist.val_loss.end());

  const auto dir = prepare_out_dir(s);
  nn::save_checkpoint(dir / "model.ckpt", ck);
  {
    std::ofstream os(dir / "loss.csv");
    os << "epoch,train_loss,val_loss\n";
    for (std::size_t i = 0; i < ck.train_loss.size(); ++i) {
      os << (i + 1) << ',' << detail::format_double(ck.train_loss[i]) << ','
         << (i < ck.val_loss.size() ? detail::format_double(ck.val_loss[i]) : std::string()) << '\n';
    }
  }
  nlohmann::json summary{{"parameter_count", ck.net.parameter_count()},
                         {"train_windows", split.train.size()},
                         {"val_windows", split.test.size()},
                         {"first_step", hist.first_step},
                         {"last_step", hist.last_step},
                         {"guard_violations", hist.guard_violations},
                         {"params_emitted", hist.params_emitted},
                         {"loss_weights", hist.loss_weights},
                         {"mode", std::string(to_string(ck.mode))},
                         {"final_train_loss", hist.train_loss.empty() ? 0.0 : hist.train_loss.back()},
                         {"final_val_loss", hist.val_loss.empty() ? 0.0 : hist.val_loss.back()}};
  write_json(dir / "train_summary.json", summary);
  write_resolved(s, "train", dir);
  std::cout << "trained " << ck.net.parameter_count() << " weights for " << hist.train_loss.size()
            << " epochs (steps " << hist.first_step << " to " << hist.last_step << "); checkpoint "
            << (dir / "model.ckpt").string() << '\n';
  return kExitOk;
}

// A checkpoint or a fixed parameter file, never both.
struct LoadedModel {
  nn::ParamModel model;
  std::string label;
  VehicleGeometry geom;
  std::optional<PhysicsMode> mode;
  std::optional<double> dt;
};

LoadedModel load_model(const Settings& s, const std::string& ckpt, const std::string& params_file, int history_len = 12) {
  if (ckpt.empty() == params_file.empty()) throw Error(ErrorKind::Domain, "give exactly one of --model and --params-file");
  if (!ckpt.empty()) {
    auto ck = nn::load_checkpoint(ckpt);
    if (ck.bounds.name != s.profile()) throw Error(ErrorKind::Schema, "checkpoint profile differs from --profile");
    return {nn::ParamModel::neural(ck.net, ck.bounds), fs::path(ckpt).stem().string(), ck.geom, ck.mode, ck.dt};
  }
  const auto p = load_params(params_file);
  return {nn::ParamModel::fixed(p, history_len), fs::path(params_file).stem().string(), s.geometry, std::nullopt, std::nullopt};
}

int cmd_eval(const Settings& s) {
  const auto& e = s.eval;
  if (e.data.empty()) throw Error(ErrorKind::Domain, "eval needs a telemetry CSV (--data)");
  if (e.stride < 1) throw Error(ErrorKind::Domain, "stride must be >= 1");
  const auto lm = load_model(s, e.model, e.params_file);
  const auto series = load_csv(e.data);
  EvalConfig cfg;
  cfg.dt = 1.0 / series.rate_hz;
  if (lm.dt && std::abs(*lm.dt - cfg.dt) > 1e-12) {
    throw Error(ErrorKind::Schema, "checkpoint sample time " + std::to_string(*lm.dt) + " s differs from the data (" +
                                       std::to_string(cfg.dt) + " s)");
  }
  cfg.horizon_ms = e.horizon_ms > 0 ? e.horizon_ms : (s.profile() == Profile::Sim ? 300.0 : 600.0);
  cfg.mode = (!s.global.mode_given && lm.mode) ? *lm.mode : s.mode();
  cfg.replay = parse_replay_input(e.replay);
  cfg.stride = static_cast<std::size_t>(e.stride);

  std::vector<OpenLoopReport> reports{evaluate_open_loop(lm.model, series, lm.geom, cfg, lm.label)};
  if (e.baselines) {
    reports.push_back(evaluate_open_loop(nn::ParamModel::fixed(s.bounds.midpoints(), lm.model.history_len()), series,
                                         lm.geom, cfg, "midpoint"));
    reports.push_back(evaluate_constant_velocity(series, cfg, static_cast<std::size_t>(lm.model.history_len())));
  }
  const auto dir = prepare_out_dir(s);
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : reports) j.push_back(to_json(r));
  write_json(dir / "eval_report.json", j);
  {
    std::ofstream os(dir / "eval_report.csv");
    os << kReportCsvHeader << '\n';
    for (const auto& r : reports) write_report_row(os, r);
  }
  {
    std::ofstream os(dir / "eval_steps.csv");
    write_step_trace(os, reports);
  }
  auto resolved = s;
  resolved.eval.horizon_ms = cfg.horizon_ms;
  resolved.global.mode = std::string(to_string(cfg.mode));
  write_resolved(resolved, "eval", dir);
  for (const auto& r : reports) {
    std::cout << r.label << ": one-step MSE " << r.one_step_mse << ", ADE " << r.ade << " m, FDE " << r.fde << " m over "
              << r.horizon_ms << " ms (" << r.n_samples << " windows, " << r.n_failed << " diverged)\n";
  }
  return kExitOk;
}

int cmd_race(const Settings& s) {
  const auto& r = s.race;
  if (!(r.rate > 0)) throw Error(ErrorKind::Domain, "rate must be positive");
  const Track track(resolve_track(r.track));
  const auto plant = truth_for(s, r.plant_params_file);
  const auto lm = load_model(s, r.model, r.params_file);
  RaceConfig cfg;
  cfg.controller = parse_controller(r.controller);
  cfg.laps = static_cast<int>(r.laps);
  cfg.dt = 1.0 / r.rate;
  cfg.max_time = r.max_time;
  cfg.actuator_tau = r.actuator_tau;
  cfg.nmpc.horizon = static_cast<int>(r.horizon);
  cfg.nmpc.model_actuator_tau = r.actuator_tau;
  cfg.nmpc.mode = lm.mode.value_or(s.mode());
  if (lm.dt && std::abs(*lm.dt - cfg.dt) > 1e-12) throw Error(ErrorKind::Schema, "checkpoint sample time differs from --rate");
  const auto res = run_race(track, plant, s.geometry, lm.model, cfg, lm.label);

  const auto dir = prepare_out_dir(s);
  auto j = to_json(res);
  write_json(dir / "lap_result.json", j);
  write_race_trace(dir / "race_trace.csv", res);
  write_resolved(s, "race", dir);
  if (!res.completed) {
    std::cerr << "lap not completed: " << res.abort_reason << " after " << res.trace.size() << " steps (max excursion "
              << res.max_excursion << " m, " << res.violations << " violations)\n";
    return kExitDomain;
  }
  std::cout << res.controller << " on " << res.track << ": lap " << res.lap_time << " s, " << res.violations
            << " violations, mean vx " << res.mean_vx << " m/s\n";
  return kExitOk;
}

int cmd_report(const Settings& s) {
  if (s.report.runs.empty()) throw Error(ErrorKind::Domain, "report needs at least one run directory");
  nlohmann::json all = nlohmann::json::array();
  std::ostringstream csv;
  csv << "run,kind,label,track,mode,horizon_ms,n_samples,n_failed,parameter_count,one_step_mse,ade,fde,completed,"
         "lap_time,violations,mean_vx\n";
  auto field = [](const nlohmann::json& j, const char* k) -> std::string {
    if (!j.contains(k)) return "";
    const auto& v = j[k];
    if (v.is_string()) return v.get<std::string>();
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    if (v.is_number_float()) return detail::format_double(v.get<double>());
    return v.dump();
  };
  for (const auto& run : s.report.runs) {
    if (!fs::is_directory(run)) throw Error(ErrorKind::Io, "run directory " + run + " does not exist");
    bool found = false;
    auto read = [&](const fs::path& p) {
      std::ifstream is(p);
      try {
        return nlohmann::json::parse(is);
      } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::Schema, p.string() + ": " + e.what());
      }
    };
    const auto name = fs::path(run).filename().string();
    if (fs::exists(fs::path(run) / "eval_report.json")) {
      found = true;
      for (const auto& r : read(fs::path(run) / "eval_report.json")) {
        all.push_back({{"run", name}, {"kind", "eval"}, {"result", r}});
        csv << name << ",eval," << field(r, "label") << ",," << field(r, "mode") << ',' << field(r, "horizon_ms") << ','
            << field(r, "n_samples") << ',' << field(r, "n_failed") << ',' << field(r, "parameter_count") << ','
            << field(r, "one_step_mse") << ',' << field(r, "ade") << ',' << field(r, "fde") << ",,,,\n";
      }
    }
    if (fs::exists(fs::path(run) / "lap_result.json")) {
      found = true;
      const auto r = read(fs::path(run) / "lap_result.json");
      all.push_back({{"run", name}, {"kind", "race"}, {"result", r}});
      csv << name << ",race," << field(r, "model") << ',' << field(r, "track") << ",,,,,,,,," << field(r, "completed")
          << ',' << field(r, "lap_time") << ',' << field(r, "violations") << ',' << field(r, "mean_vx") << '\n';
    }
    if (fs::exists(fs::path(run) / "train_summary.json")) {
      found = true;
      all.push_back({{"run", name}, {"kind", "train"}, {"result", read(fs::path(run) / "train_summary.json")}});
    }
    if (!found) throw Error(ErrorKind::Data, "no results found in " + run);
  }
  const auto dir = prepare_out_dir(s);
  write_json(dir / "summary.json", all);
  {
    std::ofstream os(dir / "summary.csv");
    os << csv.str();
  }
  write_resolved(s, "report", dir);
  std::cout << csv.str();
  return kExitOk;
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

int run(int argc, char** argv) {
  CLI::App app{"pavd: physics-informed vehicle dynamics estimation, evaluation and racing"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "pavd 0.1.0");

  std::string config_path;
  std::optional<std::string> out_dir, profile, mode;
  std::optional<std::uint64_t> seed;

  Settings flags;  // flag values, applied over the file only where given
  std::map<std::string, bool> given;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "TOML config file (falls back to $PAVD_CONFIG)");
    sub->add_option("--out-dir", out_dir, "run directory for all outputs");
    sub->add_option("--seed", seed, "seed for all randomness");
    sub->add_option("--profile", profile, "bounds/geometry profile: sim or real");
    sub->add_option("--mode", mode, "physics mode: full, nominal-load or load-transfer-only");
  };

  auto* gen = app.add_subcommand("gen-data", "generate synthetic telemetry on a track");
  add_common(gen);
  gen->add_option("--track", flags.gen.track, "built-in track name or track TOML file");
  gen->add_option("--laps", flags.gen.laps, "laps to drive");
  gen->add_option("--rate", flags.gen.rate, "sample rate in Hz");
  gen->add_option("--actuator-tau", flags.gen.actuator_tau, "actuator lag time constant (s)");
  gen->add_option("--throttle-noise", flags.gen.throttle_noise, "throttle excitation std");
  gen->add_option("--steer-noise", flags.gen.steer_noise, "steering excitation std (rad)");
  gen->add_option("--params-file", flags.gen.params_file, "ground-truth parameter TOML");

  auto* tr = app.add_subcommand("train", "train the parameter estimator");
  add_common(tr);
  tr->add_option("--data", flags.train.data, "training telemetry CSV");
  tr->add_option("--epochs", flags.train.epochs, "epochs");
  tr->add_option("--batch-size", flags.train.batch_size, "batch size");
  tr->add_option("--lr", flags.train.lr, "peak learning rate");
  tr->add_option("--val-fraction", flags.train.val_fraction, "trailing share of windows held out");
  tr->add_option("--gru-layers", flags.train.gru_layers, "GRU layers");
  tr->add_option("--gru-hidden", flags.train.gru_hidden, "GRU hidden size");
  tr->add_option("--dense", flags.train.dense_widths, "dense layer widths");
  tr->add_option("--resume", flags.train.resume, "checkpoint to continue from");

  auto* ev = app.add_subcommand("eval", "open-loop evaluation");
  add_common(ev);
  ev->add_option("--model", flags.eval.model, "checkpoint");
  ev->add_option("--params-file", flags.eval.params_file, "fixed parameter TOML instead of a network");
  ev->add_option("--data", flags.eval.data, "test telemetry CSV");
  ev->add_option("--horizon-ms", flags.eval.horizon_ms, "rollout horizon in ms");
  ev->add_option("--replay", flags.eval.replay, "replayed inputs: feedback or commanded");
  ev->add_option("--stride", flags.eval.stride, "window stride");

  auto* ra = app.add_subcommand("race", "closed-loop lap with NMPC or pure pursuit");
  add_common(ra);
  ra->add_option("--model", flags.race.model, "checkpoint");
  ra->add_option("--params-file", flags.race.params_file, "fixed parameter TOML instead of a network");
  ra->add_option("--plant-params-file", flags.race.plant_params_file, "parameters of the simulated car");
  ra->add_option("--track", flags.race.track, "built-in track name or track TOML file");
  ra->add_option("--controller", flags.race.controller, "nmpc or pure-pursuit");
  ra->add_option("--horizon", flags.race.horizon, "NMPC horizon in steps");
  ra->add_option("--laps", flags.race.laps, "timed laps");
  ra->add_option("--max-time", flags.race.max_time, "abort after this many simulated seconds");

  auto* rep = app.add_subcommand("report", "collect results from run directories");
  add_common(rep);
  rep->add_option("runs", flags.report.runs, "run directories");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitBadInput;
  }

  CLI::App* sub = app.get_subcommands().front();
  const std::string command = sub->get_name();

  Settings s;
  if (config_path.empty()) {
    if (const char* env = std::getenv("PAVD_CONFIG"); env && *env) config_path = env;
  }
  if (!config_path.empty()) load_file(s, config_path);

  // Flags override the file.
  auto over = [&](const char* name, auto& dst, const auto& src) {
    const auto* opt = sub->get_option_no_throw(name);
    if (opt && opt->count() > 0) dst = src;
  };
  over("--track", s.gen.track, flags.gen.track);
  over("--laps", s.gen.laps, flags.gen.laps);
  over("--rate", s.gen.rate, flags.gen.rate);
  over("--actuator-tau", s.gen.actuator_tau, flags.gen.actuator_tau);
  over("--throttle-noise", s.gen.throttle_noise, flags.gen.throttle_noise);
  over("--steer-noise", s.gen.steer_noise, flags.gen.steer_noise);
  if (command == "gen-data") over("--params-file", s.gen.params_file, flags.gen.params_file);
  over("--data", s.train.data, flags.train.data);
  over("--epochs", s.train.epochs, flags.train.epochs);
  over("--batch-size", s.train.batch_size, flags.train.batch_size);
  over("--lr", s.train.lr, flags.train.lr);
  over("--val-fraction", s.train.val_fraction, flags.train.val_fraction);
  over("--gru-layers", s.train.gru_layers, flags.train.gru_layers);
  over("--gru-hidden", s.train.gru_hidden, flags.train.gru_hidden);
  over("--dense", s.train.dense_widths, flags.train.dense_widths);
  over("--resume", s.train.resume, flags.train.resume);
  if (command == "eval") {
    over("--model", s.eval.model, flags.eval.model);
    over("--params-file", s.eval.params_file, flags.eval.params_file);
    over("--data", s.eval.data, flags.eval.data);
  }
  over("--horizon-ms", s.eval.horizon_ms, flags.eval.horizon_ms);
  over("--replay", s.eval.replay, flags.eval.replay);
  over("--stride", s.eval.stride, flags.eval.stride);
  if (command == "race") {
    over("--model", s.race.model, flags.race.model);
    over("--params-file", s.race.params_file, flags.race.params_file);
    over("--track", s.race.track, flags.race.track);
    over("--laps", s.race.laps, flags.race.laps);
  }
  over("--plant-params-file", s.race.plant_params_file, flags.race.plant_params_file);
  over("--controller", s.race.controller, flags.race.controller);
  over("--horizon", s.race.horizon, flags.race.horizon);
  over("--max-time", s.race.max_time, flags.race.max_time);
  over("runs", s.report.runs, flags.report.runs);
  if (out_dir) s.global.out_dir = *out_dir;
  if (seed) s.global.seed = *seed;
  if (profile) s.global.profile = *profile;
  if (mode) {
    s.global.mode = *mode;
    s.global.mode_given = true;
  }
  resolve_vehicle(s);
  absolutize(s);

  if (command == "gen-data") return cmd_gen_data(s);
  if (command == "train") return cmd_train(s);
  if (command == "eval") return cmd_eval(s);
  if (command == "race") return cmd_race(s);
  return cmd_report(s);
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const Error& e) {
    std::cerr << "pavd: " << to_string(e.kind()) << " error: " << e.what() << '\n';
    switch (e.kind()) {
      case ErrorKind::Divergence:
      case ErrorKind::Solver:
        return kExitDomain;
      default:
        return kExitBadInput;
    }
  } catch (const std::exception& e) {
    std::cerr << "pavd: internal error: " << e.what() << '\n';
    return kExitInternal;
  }
}
