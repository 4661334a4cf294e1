#include "utiltune/policy.hpp"

#include <cmath>
#include <stdexcept>

#include "utiltune/errors.hpp"

namespace utiltune {

std::size_t argmax_scalarized(std::span<const ValuePair> q, double alpha) {
  if (q.empty()) throw std::invalid_argument("argmax over an empty action set");
  std::size_t best = 0;
  double best_score = alpha * q[0].q_p2p + (1.0 - alpha) * q[0].q_repin;
  for (std::size_t a = 1; a < q.size(); ++a) {
    const double s = alpha * q[a].q_p2p + (1.0 - alpha) * q[a].q_repin;
    if (s > best_score) {
      best_score = s;
      best = a;
    }
  }
  return best;
}

std::size_t fallback_action(const ActionGrid& grid) { return grid.baseline_index(); }

ScalarizedPolicy::ScalarizedPolicy(const ValueNet& model, double alpha, IncidentCounter* incidents)
    : model_(&model), alpha_(alpha), incidents_(incidents) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("alpha must lie in [0, 1]");
}

std::size_t ScalarizedPolicy::select_action(const RequestContext& context, bool budget_exceeded) const {
  const auto fallback = [&] {
    if (incidents_ != nullptr) incidents_->record();
    return fallback_action(grid());
  };
  if (budget_exceeded) return fallback();
  std::vector<ValuePair> q;
  try {
    q = model_->predict_all_actions(context);
  } catch (const std::exception&) {
    return fallback();
  }
  for (const auto& v : q) {
    if (!std::isfinite(v.q_repin) || !std::isfinite(v.q_p2p)) return fallback();
  }
  return argmax_scalarized(q, alpha_);
}

void CohortAlphaMap::validate() const {
  for (double a : alpha) {
    if (!(a >= 0.0 && a <= 1.0)) throw ConfigError("cohort alpha must lie in [0, 1]");
  }
}

nlohmann::json CohortAlphaMap::to_json() const {
  nlohmann::json j;
  for (Cohort c : kAllCohorts) j[std::string(cohort_name(c))] = at(c);
  return j;
}

CohortAlphaMap CohortAlphaMap::from_json(const nlohmann::json& j) {
  CohortAlphaMap m;
  for (Cohort c : kAllCohorts) {
    const std::string key(cohort_name(c));
    if (!j.contains(key)) throw ConfigError("cohort alpha map is missing " + key);
    m.alpha[static_cast<std::size_t>(c)] = j.at(key).get<double>();
  }
  m.validate();
  return m;
}

CohortPolicy::CohortPolicy(const ValueNet& model, CohortAlphaMap map, CohortLookup lookup,
                           IncidentCounter* incidents)
    : per_cohort_{ScalarizedPolicy(model, map.alpha[0], incidents),
                  ScalarizedPolicy(model, map.alpha[1], incidents),
                  ScalarizedPolicy(model, map.alpha[2], incidents)},
      map_(map),
      lookup_(std::move(lookup)),
      grid_(&model.grid()) {
  map_.validate();
  if (!lookup_) throw std::invalid_argument("cohort policy needs a cohort lookup");
}

std::size_t CohortPolicy::select_action(const RequestContext& context) const {
  const auto c = static_cast<std::size_t>(lookup_(context.user_id));
  if (c >= per_cohort_.size()) throw std::invalid_argument("unknown cohort");
  return per_cohort_[c].select_action(context);
}

WeightAction CohortPolicy::action_for(const RequestContext& context) const {
  return grid_->action(select_action(context));
}

ContextPolicy as_context_policy(const ScalarizedPolicy& p) {
  return [&p](const RequestContext& ctx) { return p.action_for(ctx); };
}

ContextPolicy as_context_policy(const CohortPolicy& p) {
  return [&p](const RequestContext& ctx) { return p.action_for(ctx); };
}

ContextPolicy as_context_policy(const StaticPolicy& p) {
  const WeightAction a = p.action();
  return [a](const RequestContext&) { return a; };
}

}  // namespace utiltune
