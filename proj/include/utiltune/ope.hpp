#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "utiltune/log_store.hpp"
#include "utiltune/parallel.hpp"
#include "utiltune/policy.hpp"

namespace utiltune {

/// The parts of a logged record that off-policy evaluation needs.
struct LoggedOutcome {
  std::size_t action_index = 0;
  double propensity = 0.0;
  double r_repin = 0.0;
  double r_p2p = 0.0;
};

std::vector<LoggedOutcome> logged_outcomes(const LogStore& logs, std::span<const std::size_t> ids);

struct PolicyEstimate {
  bool supported = false;
  double v_repin = 0.0;
  double v_p2p = 0.0;
  std::int64_t hit_count = 0;
  double se_repin = 0.0;
  double se_p2p = 0.0;
};

// Mean reward over records whose logged action equals the policy's choice,
// with binomial standard errors. Zero hits yields supported == false.
PolicyEstimate reward_at_hit(std::span<const LoggedOutcome> logs, std::span<const std::size_t> chosen);

// Self-normalised IPS with explicit weights 1/propensity on matching records.
PolicyEstimate snips_estimate(std::span<const LoggedOutcome> logs, std::span<const std::size_t> chosen);

// Constant-action policy.
PolicyEstimate reward_at_hit_constant(std::span<const LoggedOutcome> logs, std::size_t action);

struct Lift {
  double delta_repin = 0.0;
  double delta_p2p = 0.0;
  double pct_repin = 0.0;  // 100 * delta / baseline value
  double pct_p2p = 0.0;
};

// Throws NoSupportError if either estimate lacks support.
Lift offline_lift(const PolicyEstimate& policy, const PolicyEstimate& baseline);

struct FrontierPoint {
  double alpha = 0.0;
  PolicyEstimate estimate;
  Lift lift;
  bool dominated = false;
  std::string role;  // "|"-separated selected roles, empty if none
};

// `count` evenly spaced values in [0, 1], endpoints exact.
std::vector<double> alpha_grid(int count = 25);

// Chosen action per row of `q` under alpha.
std::vector<std::size_t> choose_actions(const QTable& q, double alpha, Exec exec = Exec::kSerial);

/// One frontier point per alpha from a single value table; lifts are relative
/// to the baseline action's Reward@HIT on the same logs. Pareto flags are set
/// over supported points; unsupported points are kept and flagged dominated.
std::vector<FrontierPoint> sweep(const QTable& q, std::span<const LoggedOutcome> logs,
                                 std::span<const double> alphas, std::size_t baseline_action,
                                 Exec exec = Exec::kParallel);

struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

// dominated[i] iff some j has x_j >= x_i, y_j >= y_i and one strictly greater.
std::vector<bool> pareto_filter(std::span<const Point2> points);

struct OperatingPoints {
  std::optional<std::size_t> repin_leaning;
  std::optional<std::size_t> balanced;
  std::optional<std::size_t> p2p_leaning;
  bool any() const { return balanced.has_value(); }
};

/// Among non-dominated supported points with both lifts >= 0: largest repin
/// lift, largest p2p lift, and the knee (max over points of the smaller
/// min-max-normalised lift). Sets FrontierPoint::role.
OperatingPoints select_operating_points(std::vector<FrontierPoint>& frontier);

// Pearson correlation; empty when either series has zero variance.
// Throws std::invalid_argument for mismatched sizes or fewer than 3 points.
std::optional<double> pearson(std::span<const double> x, std::span<const double> y);

void write_frontier_csv(const std::filesystem::path& path, std::span<const FrontierPoint> frontier);
nlohmann::json governance_json(std::span<const FrontierPoint> frontier, const OperatingPoints& ops,
                               const PolicyEstimate& baseline, const std::string& checkpoint_sha256);

}  // namespace utiltune
