#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "utiltune/action_space.hpp"
#include "utiltune/env_sim.hpp"
#include "utiltune/value_net.hpp"

namespace utiltune {

/// Row-major (context x action) table of value estimates.
struct QTable {
  std::size_t num_actions = 0;
  std::vector<ValuePair> values;

  std::size_t num_contexts() const { return num_actions == 0 ? 0 : values.size() / num_actions; }
  std::span<const ValuePair> row(std::size_t i) const {
    return std::span<const ValuePair>(values).subspan(i * num_actions, num_actions);
  }
};

// argmax_a alpha*q_p2p + (1-alpha)*q_repin; ties go to the lowest index.
std::size_t argmax_scalarized(std::span<const ValuePair> q, double alpha);

// Counts fallback activations. Shared across threads.
class IncidentCounter {
 public:
  void record() { count_.fetch_add(1, std::memory_order_relaxed); }
  std::int64_t count() const { return count_.load(std::memory_order_relaxed); }
  void reset() { count_.store(0, std::memory_order_relaxed); }

 private:
  std::atomic<std::int64_t> count_{0};
};

// Production baseline action. Throws ConfigError if the grid has none.
std::size_t fallback_action(const ActionGrid& grid);

class ScalarizedPolicy {
 public:
  // Throws std::invalid_argument unless alpha is in [0, 1].
  ScalarizedPolicy(const ValueNet& model, double alpha, IncidentCounter* incidents = nullptr);

  double alpha() const { return alpha_; }
  const ActionGrid& grid() const { return model_->grid(); }

  // Falls back to the baseline action on a model failure, a non-finite
  // value, or when `budget_exceeded` is set.
  std::size_t select_action(const RequestContext& context, bool budget_exceeded = false) const;
  WeightAction action_for(const RequestContext& context) const {
    return grid().action(select_action(context));
  }

 private:
  const ValueNet* model_;
  double alpha_;
  IncidentCounter* incidents_;
};

struct CohortAlphaMap {
  std::array<double, 3> alpha{0.5, 0.5, 0.5};  // CORE, CASUAL, REST

  double at(Cohort c) const { return alpha[static_cast<std::size_t>(c)]; }
  static CohortAlphaMap uniform(double a) { return {{a, a, a}}; }
  void validate() const;  // throws ConfigError
  nlohmann::json to_json() const;
  // Every cohort must be present; throws ConfigError otherwise.
  static CohortAlphaMap from_json(const nlohmann::json& j);
};

using CohortLookup = std::function<Cohort(std::int64_t user_id)>;

class CohortPolicy {
 public:
  CohortPolicy(const ValueNet& model, CohortAlphaMap map, CohortLookup lookup,
               IncidentCounter* incidents = nullptr);

  const CohortAlphaMap& map() const { return map_; }
  std::size_t select_action(const RequestContext& context) const;
  WeightAction action_for(const RequestContext& context) const;

 private:
  std::array<ScalarizedPolicy, 3> per_cohort_;
  CohortAlphaMap map_;
  CohortLookup lookup_;
  const ActionGrid* grid_;
};

class StaticPolicy {
 public:
  explicit StaticPolicy(WeightAction action) : action_(action) {}
  const WeightAction& action() const { return action_; }
  WeightAction action_for(const RequestContext&) const { return action_; }
  // Grid index of the action if it is on the grid.
  std::optional<std::size_t> select_action(const ActionGrid& grid) const { return grid.index_of(action_); }

 private:
  WeightAction action_;
};

// Adapters for the simulator oracle and A/B harness.
ContextPolicy as_context_policy(const ScalarizedPolicy& p);
ContextPolicy as_context_policy(const CohortPolicy& p);
ContextPolicy as_context_policy(const StaticPolicy& p);

}  // namespace utiltune
