#include "utiltune/action_space.hpp"

#include <stdexcept>

#include "utiltune/errors.hpp"
#include "utiltune/hashing.hpp"

namespace utiltune {

std::vector<double> linspace(double lo, double hi, int k) {
  std::vector<double> out(static_cast<std::size_t>(k));
  const double step = (hi - lo) / static_cast<double>(k - 1);
  for (int i = 0; i < k; ++i) out[static_cast<std::size_t>(i)] = lo + step * i;
  out.back() = hi;
  return out;
}

ActionGrid::ActionGrid(WeightRange repin_range, WeightRange p2p_range, int k,
                       bool include_baseline)
    : repin_range_(repin_range), p2p_range_(p2p_range), k_(k) {
  if (k < 2) throw ConfigError("action grid needs K >= 2");
  if (!(repin_range.min < repin_range.max) || !(p2p_range.min < p2p_range.max)) {
    throw ConfigError("action grid ranges must satisfy min < max");
  }
  repin_values_ = linspace(repin_range.min, repin_range.max, k);
  p2p_values_ = linspace(p2p_range.min, p2p_range.max, k);
  actions_.reserve(static_cast<std::size_t>(k * k) + 1);
  for (double wr : repin_values_) {
    for (double wp : p2p_values_) actions_.push_back({wr, wp});
  }
  if (include_baseline) {
    baseline_index_ = actions_.size();
    actions_.push_back(kProductionAction);
  }
}

std::size_t ActionGrid::baseline_index() const {
  if (!baseline_index_) throw ConfigError("action grid has no baseline action");
  return *baseline_index_;
}

std::optional<std::size_t> ActionGrid::index_of(const WeightAction& action) const {
  if (baseline_index_ && actions_[*baseline_index_] == action) return baseline_index_;
  for (std::size_t i = 0; i < actions_.size(); ++i) {
    if (actions_[i] == action) return i;
  }
  return std::nullopt;
}

nlohmann::json ActionGrid::to_json() const {
  nlohmann::json actions = nlohmann::json::array();
  for (const auto& a : actions_) actions.push_back({a.repin, a.p2p});
  return {
      {"k", k_},
      {"repin_range", {repin_range_.min, repin_range_.max}},
      {"p2p_range", {p2p_range_.min, p2p_range_.max}},
      {"repin_values", repin_values_},
      {"p2p_values", p2p_values_},
      {"include_baseline", has_baseline()},
      {"baseline_index", baseline_index_ ? nlohmann::json(*baseline_index_) : nlohmann::json()},
      {"actions", actions},
  };
}

ActionGrid ActionGrid::from_json(const nlohmann::json& j) {
  ActionGrid grid({j.at("repin_range").at(0).get<double>(), j.at("repin_range").at(1).get<double>()},
                  {j.at("p2p_range").at(0).get<double>(), j.at("p2p_range").at(1).get<double>()},
                  j.at("k").get<int>(), j.at("include_baseline").get<bool>());
  if (j.contains("actions") && grid.to_json().at("actions") != j.at("actions")) {
    throw ConfigError("serialized action grid does not match its own parameters");
  }
  return grid;
}

std::string ActionGrid::hash() const { return sha256_hex(to_json().dump()); }

ActionGrid build_grid(WeightRange repin_range, WeightRange p2p_range, int k,
                      bool include_baseline) {
  return ActionGrid(repin_range, p2p_range, k, include_baseline);
}

ActionGrid default_grid() { return build_grid(kRepinRange, kP2pRange, 7, true); }

NormalizedAction normalize_action(const ActionGrid& grid, const WeightAction& action) {
  const auto r = grid.repin_range();
  const auto p = grid.p2p_range();
  if (action.repin < r.min || action.repin > r.max || action.p2p < p.min || action.p2p > p.max) {
    throw std::out_of_range("weight action outside the grid ranges");
  }
  return {(action.repin - r.min) / (r.max - r.min), (action.p2p - p.min) / (p.max - p.min)};
}

ExplorationDraw uniform_policy(const ActionGrid& grid, Xoshiro256& rng) {
  // Multiply-shift bounded draw; bias is below |A| / 2^64.
  __extension__ typedef unsigned __int128 u128;
  const auto index = static_cast<std::size_t>((static_cast<u128>(rng()) * grid.size()) >> 64);
  return {index, grid.propensity()};
}

}  // namespace utiltune
