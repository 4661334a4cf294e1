#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "utiltune/rng.hpp"

namespace utiltune {

/// One utility-weight action: the two controlled head weights.
struct WeightAction {
  double repin = 0.0;
  double p2p = 0.0;

  friend bool operator==(const WeightAction&, const WeightAction&) = default;
};

inline constexpr WeightAction kProductionAction{91.6, 9.1};

struct NormalizedAction {
  double repin = 0.0;
  double p2p = 0.0;
};

struct WeightRange {
  double min = 0.0;
  double max = 0.0;
};

/// Discrete action set: the K x K Cartesian product of linearly spaced
/// repin and p2p weights, enumerated row-major (repin-major), optionally
/// followed by the production pair as one extra action.
class ActionGrid {
 public:
  ActionGrid(WeightRange repin_range, WeightRange p2p_range, int k, bool include_baseline);

  std::size_t size() const { return actions_.size(); }
  int k() const { return k_; }
  const std::vector<double>& repin_values() const { return repin_values_; }
  const std::vector<double>& p2p_values() const { return p2p_values_; }
  const std::vector<WeightAction>& actions() const { return actions_; }
  const WeightAction& action(std::size_t index) const { return actions_.at(index); }
  WeightRange repin_range() const { return repin_range_; }
  WeightRange p2p_range() const { return p2p_range_; }

  bool has_baseline() const { return baseline_index_.has_value(); }
  // Throws ConfigError if the grid was built without the baseline action.
  std::size_t baseline_index() const;

  // Exact lookup of an action on the grid (including the baseline pair).
  std::optional<std::size_t> index_of(const WeightAction& action) const;

  double propensity() const { return 1.0 / static_cast<double>(actions_.size()); }

  nlohmann::json to_json() const;
  static ActionGrid from_json(const nlohmann::json& j);
  // SHA-256 of the canonical JSON; checkpoints and logs carry it.
  std::string hash() const;

 private:
  WeightRange repin_range_;
  WeightRange p2p_range_;
  int k_;
  std::vector<double> repin_values_;
  std::vector<double> p2p_values_;
  std::vector<WeightAction> actions_;
  std::optional<std::size_t> baseline_index_;
};

inline constexpr WeightRange kRepinRange{10.0, 200.0};
inline constexpr WeightRange kP2pRange{1.0, 30.0};

ActionGrid build_grid(WeightRange repin_range, WeightRange p2p_range, int k, bool include_baseline);
// The default 7x7 grid plus the production baseline (50 actions).
ActionGrid default_grid();

// K linearly spaced values, both endpoints included exactly.
std::vector<double> linspace(double lo, double hi, int k);

// Min-max normalisation over the grid's ranges; throws std::out_of_range
// for components outside them.
NormalizedAction normalize_action(const ActionGrid& grid, const WeightAction& action);

struct ExplorationDraw {
  std::size_t action_index;
  double propensity;
};

// Uniform logging policy over every action in the grid.
ExplorationDraw uniform_policy(const ActionGrid& grid, Xoshiro256& rng);

}  // namespace utiltune
