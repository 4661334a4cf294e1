#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "utiltune/ab_test.hpp"
#include "utiltune/action_space.hpp"
#include "utiltune/env_sim.hpp"
#include "utiltune/policy.hpp"
#include "utiltune/trainer.hpp"
#include "utiltune/value_net.hpp"

namespace utiltune {

struct GridConfig {
  WeightRange repin = kRepinRange;
  WeightRange p2p = kP2pRange;
  int k = 7;
  bool include_baseline = true;

  ActionGrid build() const;
  nlohmann::json to_json() const;
  static GridConfig from_json(const nlohmann::json& j, GridConfig base);
};

struct ExplorationConfig {
  double fraction = 0.0125;
  std::int64_t requests_per_day = 10000;
  int num_days = 21;
};

/// Everything one pipeline run needs. `seed` is the master seed: exploration
/// traffic, model initialisation and A/B assignment each draw a sub-seed from
/// it. The simulated population is fixed by env.seed.
struct RunConfig {
  std::string preset = "desk";
  std::uint64_t seed = 42;
  EnvConfig env;
  GridConfig grid;
  ExplorationConfig exploration;
  int train_days = 14;
  int holdout_days = 7;
  NetConfig net;
  TrainConfig train;
  int alpha_grid_size = 25;
  // Extra A/B arms besides the selected operating points; must lie on the alpha grid.
  std::vector<double> ab_alphas{0.0, 0.25, 0.5, 0.75, 1.0};
  AbConfig ab;
  // Named cohort maps for the cohort study; empty derives them from the
  // per-cohort frontiers.
  std::map<std::string, CohortAlphaMap> cohort_maps;
  std::vector<std::vector<std::string>> ablation_groups{{"user"}, {"history"}, {"context"}};
  std::size_t contribution_sample = 20000;
  std::filesystem::path out_dir = "runs/desk";

  std::uint64_t exploration_seed() const;
  std::uint64_t train_seed() const;
  std::uint64_t ab_seed() const;

  void validate() const;  // throws ConfigError
  nlohmann::json to_json() const;
  // Keys absent from `j` keep the values of `base`.
  static RunConfig from_json(const nlohmann::json& j, RunConfig base);
};

// "desk" (dense exploration, 2e5 logged requests) or "fidelity" (1.25% cap).
RunConfig preset_config(std::string_view name);
// Preset, then the optional JSON file on top.
RunConfig load_run_config(std::string_view preset, const std::optional<std::filesystem::path>& file);

/// File names inside a run directory.
namespace run_files {
inline constexpr const char* kConfig = "run_config.json";
inline constexpr const char* kLogs = "logs.ndjson";
inline constexpr const char* kManifest = "manifest.json";
inline constexpr const char* kCheckpoint = "checkpoint.json";
inline constexpr const char* kLossCurve = "loss_curve.csv";
inline constexpr const char* kTrainSummary = "train_summary.json";
inline constexpr const char* kFrontier = "frontier.csv";
inline constexpr const char* kGovernance = "governance.json";
inline constexpr const char* kAbArms = "ab_arms.csv";
inline constexpr const char* kAbReport = "ab_report.json";
inline constexpr const char* kAbObservations = "ab_observations.csv";
inline constexpr const char* kStaticMatch = "static_match.csv";
inline constexpr const char* kStaticMatchReport = "static_match.json";
inline constexpr const char* kCohortReport = "cohort_report.csv";
inline constexpr const char* kCohortJson = "cohort_report.json";
inline constexpr const char* kAblationFrontiers = "ablation_frontiers.csv";
inline constexpr const char* kAblationReport = "ablation.json";
inline constexpr const char* kContributionBars = "contribution_bars.csv";
inline constexpr const char* kContributionCurve = "contribution_curve.csv";
inline constexpr const char* kDeciles = "engagement_deciles.csv";
inline constexpr const char* kAnalyzeReport = "analyze.json";
inline constexpr const char* kReport = "report.json";
}  // namespace run_files

// Subcommands. Each reads its inputs from and writes its outputs to
// config.out_dir and returns the JSON report it wrote.
nlohmann::json cmd_simulate(const RunConfig& config);
nlohmann::json cmd_train(const RunConfig& config);
nlohmann::json cmd_sweep(const RunConfig& config);
nlohmann::json cmd_ab_test(const RunConfig& config);
nlohmann::json cmd_static_match(const RunConfig& config);
nlohmann::json cmd_cohort(const RunConfig& config);
nlohmann::json cmd_ablate(const RunConfig& config);
nlohmann::json cmd_analyze(const RunConfig& config);
nlohmann::json cmd_all(const RunConfig& config);

// 0 success, 2 config error, 3 no support / insufficient data, 4 divergence, 1 other.
int exit_code_for(const std::exception& e);

// Equal-frequency decile of each value: stable sort by value, then position
// i of n goes to bin floor(10 i / n). Equal values keep log order, so the
// earlier record of a tie lands in the lower bin and bin sizes differ by <= 1.
std::vector<int> equal_frequency_bins(std::span<const double> values, int bins = 10);

// Mean (repin, p2p) weights of the chosen actions.
WeightAction traffic_average_action(const ActionGrid& grid, std::span<const std::size_t> chosen);

/// Parsed row of a frontier CSV.
struct FrontierRow {
  double alpha = 0.0;
  bool supported = false;
  double delta_repin_pct = 0.0;
  double delta_p2p_pct = 0.0;
  std::int64_t hit_count = 0;
  bool dominated = false;
  std::string role;
};
std::vector<FrontierRow> read_frontier_csv(const std::filesystem::path& path);

}  // namespace utiltune
