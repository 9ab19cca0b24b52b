#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string err;
};

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / "pavd_cli_tests" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

Run pavd(const std::string& args, const std::string& env = "") {
  const auto err = fs::temp_directory_path() / "pavd_cli_tests" / "stderr.txt";
  fs::create_directories(err.parent_path());
  const std::string cmd = env + " '" + std::string(PAVD_CLI) + "' " + args + " > /dev/null 2> '" + err.string() + "'";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(err)};
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

// One lap of data and a small, quickly trained model shared by several tests.
struct Pipeline {
  fs::path root, gen, train;
  Pipeline() : root(scratch("pipeline")), gen(root / "gen"), train(root / "train") {
    EXPECT_EQ(pavd("gen-data --laps 1 --seed 3 --out-dir " + q(gen)).code, 0);
    EXPECT_EQ(pavd("train --data " + q(gen / "telemetry.csv") +
                   " --epochs 2 --batch-size 16 --lr 1e-2 --gru-layers 1 --gru-hidden 4 --dense 5 --seed 3 --out-dir " + q(train))
                  .code,
              0);
  }
};

const Pipeline& pipeline() {
  static const Pipeline p;
  return p;
}

}  // namespace

TEST(Cli, NoSubcommandIsBadInput) { EXPECT_EQ(pavd("").code, 2); }

TEST(Cli, MissingTrackFileIsBadInputNamingThePath) {
  const auto dir = scratch("missing");
  const auto r = pavd("gen-data --track /nonexistent/track.toml --out-dir " + q(dir));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("/nonexistent/track.toml"), std::string::npos) << r.err;
}

TEST(Cli, UnknownConfigKeyIsRejected) {
  const auto dir = scratch("badkey");
  std::ofstream(dir / "c.toml") << "[gen-data]\nlapz = 2\n";
  const auto r = pavd("gen-data --config " + q(dir / "c.toml") + " --out-dir " + q(dir / "out"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("lapz"), std::string::npos) << r.err;
}

TEST(Cli, SameSeedGivesIdenticalFiles) {
  const auto dir = scratch("seed");
  ASSERT_EQ(pavd("gen-data --laps 1 --seed 5 --out-dir " + q(dir / "a")).code, 0);
  ASSERT_EQ(pavd("gen-data --laps 1 --seed 5 --out-dir " + q(dir / "b")).code, 0);
  ASSERT_EQ(pavd("gen-data --laps 1 --seed 6 --out-dir " + q(dir / "c")).code, 0);
  EXPECT_EQ(slurp(dir / "a" / "telemetry.csv"), slurp(dir / "b" / "telemetry.csv"));
  EXPECT_NE(slurp(dir / "a" / "telemetry.csv"), slurp(dir / "c" / "telemetry.csv"));
}

TEST(Cli, ResolvedConfigReproducesOutputs) {
  const auto dir = scratch("resolved");
  ASSERT_EQ(pavd("gen-data --laps 1 --seed 8 --steer-noise 0.03 --track ethzmobil-like --out-dir " + q(dir / "a")).code, 0);
  ASSERT_TRUE(fs::exists(dir / "a" / "resolved_config.toml"));
  ASSERT_EQ(pavd("gen-data --config " + q(dir / "a" / "resolved_config.toml") + " --out-dir " + q(dir / "b")).code, 0);
  EXPECT_EQ(slurp(dir / "a" / "telemetry.csv"), slurp(dir / "b" / "telemetry.csv"));
}

TEST(Cli, EnvironmentSuppliesConfig) {
  const auto dir = scratch("env");
  std::ofstream(dir / "c.toml") << "seed = 11\n[gen-data]\nlaps = 1\n";
  ASSERT_EQ(pavd("gen-data --out-dir " + q(dir / "a"), "PAVD_CONFIG=" + q(dir / "c.toml")).code, 0);
  ASSERT_EQ(pavd("gen-data --laps 1 --seed 11 --out-dir " + q(dir / "b")).code, 0);
  EXPECT_EQ(slurp(dir / "a" / "telemetry.csv"), slurp(dir / "b" / "telemetry.csv"));
  // Flags beat the file.
  ASSERT_EQ(pavd("gen-data --seed 12 --out-dir " + q(dir / "c"), "PAVD_CONFIG=" + q(dir / "c.toml")).code, 0);
  EXPECT_NE(slurp(dir / "a" / "telemetry.csv"), slurp(dir / "c" / "telemetry.csv"));
}

TEST(Cli, TrainWritesCheckpointAndLossHistory) {
  const auto& p = pipeline();
  EXPECT_TRUE(fs::exists(p.train / "model.ckpt"));
  EXPECT_TRUE(fs::exists(p.train / "resolved_config.toml"));
  const auto loss = slurp(p.train / "loss.csv");
  EXPECT_EQ(std::count(loss.begin(), loss.end(), '\n'), 3);
}

TEST(Cli, EvalReportCarriesParameterCount) {
  const auto& p = pipeline();
  const auto dir = scratch("eval");
  ASSERT_EQ(pavd("eval --model " + q(p.train / "model.ckpt") + " --data " + q(p.gen / "telemetry.csv") + " --out-dir " + q(dir)).code, 0);
  std::ifstream is(dir / "eval_report.json");
  const auto j = nlohmann::json::parse(is);
  ASSERT_EQ(j.size(), 3u);
  const auto summary = nlohmann::json::parse(slurp(p.train / "train_summary.json"));
  EXPECT_EQ(j[0]["parameter_count"], summary["parameter_count"]);
  EXPECT_GT(j[0]["parameter_count"].get<int>(), 0);
  EXPECT_EQ(j[0]["horizon_ms"], 300.0);
  EXPECT_TRUE(fs::exists(dir / "eval_steps.csv"));
}

TEST(Cli, EvalRejectsSampleTimeMismatch) {
  const auto& p = pipeline();
  const auto dir = scratch("dtmismatch");
  ASSERT_EQ(pavd("gen-data --laps 1 --rate 25 --out-dir " + q(dir / "gen")).code, 0);
  const auto r = pavd("eval --model " + q(p.train / "model.ckpt") + " --data " + q(dir / "gen" / "telemetry.csv") + " --out-dir " + q(dir / "e"));
  EXPECT_EQ(r.code, 2);
}

TEST(Cli, EvalNeedsExactlyOneModelSource) {
  const auto& p = pipeline();
  const auto dir = scratch("twomodels");
  const auto r = pavd("eval --model " + q(p.train / "model.ckpt") + " --params-file " + q(p.gen / "truth_params.toml") +
                      " --data " + q(p.gen / "telemetry.csv") + " --out-dir " + q(dir));
  EXPECT_EQ(r.code, 2);
}

TEST(Cli, RaceWithParamsFileCompletes) {
  const auto& p = pipeline();
  const auto dir = scratch("race");
  ASSERT_EQ(pavd("race --params-file " + q(p.gen / "truth_params.toml") + " --out-dir " + q(dir)).code, 0);
  const auto j = nlohmann::json::parse(slurp(dir / "lap_result.json"));
  EXPECT_TRUE(j["completed"].get<bool>());
  EXPECT_EQ(j["violations"], 0);
  EXPECT_TRUE(fs::exists(dir / "race_trace.csv"));
}

TEST(Cli, AbortedRaceIsDomainFailure) {
  const auto& p = pipeline();
  const auto dir = scratch("abort");
  const auto r = pavd("race --params-file " + q(p.gen / "truth_params.toml") + " --max-time 1 --out-dir " + q(dir));
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("time limit"), std::string::npos) << r.err;
}

TEST(Cli, ReportCollectsRuns) {
  const auto& p = pipeline();
  const auto dir = scratch("report");
  ASSERT_EQ(pavd("race --controller pure-pursuit --params-file " + q(p.gen / "truth_params.toml") + " --out-dir " + q(dir / "race")).code, 0);
  ASSERT_EQ(pavd("report " + q(dir / "race") + " " + q(p.train) + " --out-dir " + q(dir / "summary")).code, 0);
  const auto j = nlohmann::json::parse(slurp(dir / "summary" / "summary.json"));
  EXPECT_EQ(j.size(), 2u);
  const auto csv = slurp(dir / "summary" / "summary.csv");
  EXPECT_NE(csv.find("truth_params"), std::string::npos);
  EXPECT_EQ(pavd("report " + q(dir / "nothing-here") + " --out-dir " + q(dir / "s2")).code, 2);
}
