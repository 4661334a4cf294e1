#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <vector>

#include "../support.hpp"
#include "utiltune/errors.hpp"
#include "utiltune/harness.hpp"
#include "utiltune/ope.hpp"

namespace utiltune {
namespace {

namespace fs = std::filesystem;
using testing::TempDir;

TEST(Presets, DeskAndFidelity) {
  const auto desk = preset_config("desk");
  EXPECT_EQ(desk.exploration.fraction, 1.0);
  EXPECT_EQ(desk.exploration.requests_per_day * desk.exploration.num_days, 200004);
  const auto fid = preset_config("fidelity");
  EXPECT_EQ(fid.exploration.fraction, 0.0125);
  EXPECT_EQ(fid.exploration.requests_per_day, 10000);
  EXPECT_NO_THROW(desk.validate());
  EXPECT_NO_THROW(fid.validate());
  EXPECT_THROW((void)preset_config("huge"), ConfigError);
}

TEST(RunConfig, JsonRoundTrip) {
  auto c = preset_config("desk");
  c.seed = 77;
  c.env.num_users = 321;
  c.cohort_maps["m"] = CohortAlphaMap{{0.0, 0.5, 1.0}};
  c.ablation_groups = {{"user", "context"}};
  const auto back = RunConfig::from_json(c.to_json(), preset_config("fidelity"));
  EXPECT_EQ(back.to_json(), c.to_json());
}

TEST(RunConfig, PartialJsonKeepsBase) {
  const auto base = preset_config("desk");
  const auto c = RunConfig::from_json(nlohmann::json{{"seed", 5}, {"train", {{"epochs", 2}}}}, base);
  EXPECT_EQ(c.seed, 5u);
  EXPECT_EQ(c.train.epochs, 2);
  EXPECT_EQ(c.train.batch_size, base.train.batch_size);
  EXPECT_EQ(c.exploration.requests_per_day, base.exploration.requests_per_day);
}

TEST(RunConfig, InvalidValuesRejected) {
  auto c = preset_config("desk");
  c.train_days = 20;
  EXPECT_THROW(c.validate(), ConfigError);
  c = preset_config("desk");
  c.ab_alphas = {0.3};
  EXPECT_THROW(c.validate(), ConfigError);
  c = preset_config("desk");
  c.exploration.fraction = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = preset_config("desk");
  c.ablation_groups = {{"weather"}};
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW((void)RunConfig::from_json(nlohmann::json{{"seed", "x"}}, preset_config("desk")), ConfigError);
}

TEST(RunConfig, SubSeedsAreDistinctAndFollowMasterSeed) {
  auto c = preset_config("desk");
  EXPECT_NE(c.train_seed(), c.ab_seed());
  EXPECT_NE(c.train_seed(), c.exploration_seed());
  const auto t = c.train_seed();
  c.seed += 1;
  EXPECT_NE(c.train_seed(), t);
}

TEST(RunConfig, LoadFromFile) {
  TempDir dir("config");
  const auto path = dir.path() / "c.json";
  std::ofstream(path) << R"({"seed": 9, "ab": {"requests_per_arm": 500}})";
  const auto c = load_run_config("fidelity", path);
  EXPECT_EQ(c.seed, 9u);
  EXPECT_EQ(c.ab.requests_per_arm, 500);
  EXPECT_EQ(c.exploration.fraction, 0.0125);
}

TEST(Deciles, EqualFrequencyBins) {
  std::vector<double> v(20);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(19 - i);
  const auto b = equal_frequency_bins(v);
  EXPECT_EQ(b[19], 0);
  EXPECT_EQ(b[18], 0);
  EXPECT_EQ(b[0], 9);
  std::map<int, int> sizes;
  for (int x : b) ++sizes[x];
  for (const auto& [bin, n] : sizes) EXPECT_EQ(n, 2);
}

TEST(Deciles, TiesKeepLogOrderAndBalancedSizes) {
  const std::vector<double> v(23, 1.0);
  const auto b = equal_frequency_bins(v);
  for (std::size_t i = 1; i < b.size(); ++i) EXPECT_GE(b[i], b[i - 1]);
  std::map<int, int> sizes;
  for (int x : b) ++sizes[x];
  EXPECT_EQ(sizes.size(), 10u);
  for (const auto& [bin, n] : sizes) {
    EXPECT_GE(n, 2);
    EXPECT_LE(n, 3);
  }
}

TEST(TrafficAverage, MeanOfChosenWeights) {
  const auto grid = default_grid();
  const std::vector<std::size_t> chosen{0, 48};
  const auto a = traffic_average_action(grid, chosen);
  EXPECT_DOUBLE_EQ(a.repin, 105.0);
  EXPECT_DOUBLE_EQ(a.p2p, 15.5);
  EXPECT_THROW((void)traffic_average_action(grid, std::span<const std::size_t>{}), NoSupportError);
}

TEST(FrontierCsv, RoundTripIncludingUnsupported) {
  TempDir dir("frontier");
  std::vector<FrontierPoint> f(3);
  f[0].alpha = 0.0;
  f[0].estimate = {true, 0.3, 0.2, 40, 0.01, 0.01};
  f[0].lift = {0.01, -0.02, 3.5, -10.0};
  f[0].role = "repin_leaning|balanced";
  f[1].alpha = 0.5;
  f[1].estimate.supported = false;
  f[1].dominated = true;
  f[2].alpha = 1.0;
  f[2].estimate = {true, 0.2, 0.3, 41, 0.01, 0.01};
  f[2].lift = {-0.1, 0.1, -25.0, 50.0};
  const auto path = dir.path() / "frontier.csv";
  write_frontier_csv(path, f);
  const auto rows = read_frontier_csv(path);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].role, "repin_leaning|balanced");
  EXPECT_NEAR(rows[0].delta_repin_pct, 3.5, 1e-6);
  EXPECT_EQ(rows[0].hit_count, 40);
  EXPECT_FALSE(rows[1].supported);
  EXPECT_TRUE(rows[1].dominated);
  EXPECT_NEAR(rows[2].delta_p2p_pct, 50.0, 1e-6);
}

TEST(ExitCodes, Mapping) {
  EXPECT_EQ(exit_code_for(ConfigError("x")), 2);
  EXPECT_EQ(exit_code_for(NoSupportError("x")), 3);
  EXPECT_EQ(exit_code_for(DivergenceError("x")), 4);
  EXPECT_EQ(exit_code_for(std::runtime_error("x")), 1);
}

RunConfig tiny_run(const fs::path& out) {
  auto c = preset_config("desk");
  c.env = testing::small_env_config(600, 200);
  c.exploration.requests_per_day = 1500;
  c.net = testing::small_net_config();
  c.train.epochs = 2;
  c.train.batch_size = 64;
  c.train.learning_rate = 3e-3;
  c.ab.requests_per_arm = 600;
  c.ablation_groups = {{"user"}};
  c.contribution_sample = 2000;
  c.out_dir = out;
  return c;
}

TEST(Pipeline, TinyEndToEnd) {
  TempDir dir("pipeline");
  auto c = tiny_run(dir.path());
  c.cohort_maps["split"] = CohortAlphaMap{{0.25, 0.5, 0.75}};
  cmd_simulate(c);
  cmd_train(c);
  cmd_sweep(c);
  cmd_ab_test(c);
  cmd_ablate(c);
  cmd_analyze(c);
  const auto gov = nlohmann::json::parse(std::ifstream(dir.path() / run_files::kGovernance));
  if (gov.at("status") == "selected") {
    EXPECT_NO_THROW(cmd_static_match(c));
  } else {
    EXPECT_THROW(cmd_static_match(c), NoSupportError);
  }
  cmd_cohort(c);
  for (const char* f : {run_files::kLogs, run_files::kManifest, run_files::kCheckpoint, run_files::kLossCurve,
                        run_files::kFrontier, run_files::kGovernance, run_files::kAbArms, run_files::kAbReport,
                        run_files::kCohortReport, run_files::kAblationFrontiers, run_files::kAblationReport,
                        run_files::kContributionBars, run_files::kContributionCurve, run_files::kDeciles,
                        run_files::kAnalyzeReport}) {
    EXPECT_TRUE(fs::exists(dir.path() / f)) << f;
  }
  const auto rows = read_frontier_csv(dir.path() / run_files::kFrontier);
  EXPECT_EQ(rows.size(), 25u);
  const auto ab = nlohmann::json::parse(std::ifstream(dir.path() / run_files::kAbReport));
  EXPECT_GE(ab.at("arms").size(), 7u);
}

TEST(Pipeline, MissingInputsAndEmptySplit) {
  TempDir dir("pipeline_errors");
  auto c = tiny_run(dir.path());
  EXPECT_THROW((void)cmd_train(c), ConfigError);
  c.exploration.fraction = 0.001;
  c.exploration.requests_per_day = 50;
  cmd_simulate(c);
  EXPECT_THROW((void)cmd_train(c), NoSupportError);
}

TEST(Pipeline, ConfigMismatchWithLogsRejected) {
  TempDir dir("pipeline_mismatch");
  auto c = tiny_run(dir.path());
  c.exploration.requests_per_day = 20;
  cmd_simulate(c);
  c.grid.k = 5;
  EXPECT_THROW((void)cmd_train(c), ConfigError);
}

}  // namespace
}  // namespace utiltune
