#include "utiltune/ope.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "utiltune/errors.hpp"

namespace utiltune {
namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

void add_role(std::string& roles, const char* role) {
  if (!roles.empty()) roles += '|';
  roles += role;
}

}  // namespace

std::vector<LoggedOutcome> logged_outcomes(const LogStore& logs, std::span<const std::size_t> ids) {
  std::vector<LoggedOutcome> out;
  out.reserve(ids.size());
  for (std::size_t id : ids) {
    const auto& r = logs.at(id);
    out.push_back({r.action_index, r.propensity, static_cast<double>(r.r_repin),
                   static_cast<double>(r.r_p2p)});
  }
  return out;
}

PolicyEstimate reward_at_hit(std::span<const LoggedOutcome> logs, std::span<const std::size_t> chosen) {
  if (chosen.size() != logs.size()) throw std::invalid_argument("reward_at_hit: size mismatch");
  PolicyEstimate e;
  double sum_r = 0.0, sum_p = 0.0;
  for (std::size_t i = 0; i < logs.size(); ++i) {
    if (chosen[i] != logs[i].action_index) continue;
    ++e.hit_count;
    sum_r += logs[i].r_repin;
    sum_p += logs[i].r_p2p;
  }
  if (e.hit_count == 0) return e;
  const double n = static_cast<double>(e.hit_count);
  e.supported = true;
  e.v_repin = sum_r / n;
  e.v_p2p = sum_p / n;
  e.se_repin = std::sqrt(e.v_repin * (1.0 - e.v_repin) / n);
  e.se_p2p = std::sqrt(e.v_p2p * (1.0 - e.v_p2p) / n);
  return e;
}

PolicyEstimate snips_estimate(std::span<const LoggedOutcome> logs, std::span<const std::size_t> chosen) {
  if (chosen.size() != logs.size()) throw std::invalid_argument("snips_estimate: size mismatch");
  PolicyEstimate e;
  double w_sum = 0.0, wr = 0.0, wp = 0.0;
  for (std::size_t i = 0; i < logs.size(); ++i) {
    if (chosen[i] != logs[i].action_index) continue;
    const double w = 1.0 / logs[i].propensity;
    ++e.hit_count;
    w_sum += w;
    wr += w * logs[i].r_repin;
    wp += w * logs[i].r_p2p;
  }
  if (e.hit_count == 0) return e;
  e.supported = true;
  e.v_repin = wr / w_sum;
  e.v_p2p = wp / w_sum;
  const double n = static_cast<double>(e.hit_count);
  e.se_repin = std::sqrt(e.v_repin * (1.0 - e.v_repin) / n);
  e.se_p2p = std::sqrt(e.v_p2p * (1.0 - e.v_p2p) / n);
  return e;
}

PolicyEstimate reward_at_hit_constant(std::span<const LoggedOutcome> logs, std::size_t action) {
  const std::vector<std::size_t> chosen(logs.size(), action);
  return reward_at_hit(logs, chosen);
}

Lift offline_lift(const PolicyEstimate& policy, const PolicyEstimate& baseline) {
  if (!policy.supported || !baseline.supported) {
    throw NoSupportError("offline lift needs support for both the policy and the baseline");
  }
  Lift l;
  l.delta_repin = policy.v_repin - baseline.v_repin;
  l.delta_p2p = policy.v_p2p - baseline.v_p2p;
  l.pct_repin = 100.0 * l.delta_repin / baseline.v_repin;
  l.pct_p2p = 100.0 * l.delta_p2p / baseline.v_p2p;
  return l;
}

std::vector<double> alpha_grid(int count) {
  if (count < 2) throw std::invalid_argument("alpha grid needs at least 2 values");
  std::vector<double> out(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) out[static_cast<std::size_t>(i)] = static_cast<double>(i) / (count - 1);
  return out;
}

std::vector<std::size_t> choose_actions(const QTable& q, double alpha, Exec exec) {
  std::vector<std::size_t> chosen(q.num_contexts());
  parallel_for(chosen.size(), exec, [&](std::size_t i) { chosen[i] = argmax_scalarized(q.row(i), alpha); });
  return chosen;
}

std::vector<FrontierPoint> sweep(const QTable& q, std::span<const LoggedOutcome> logs,
                                 std::span<const double> alphas, std::size_t baseline_action,
                                 Exec exec) {
  if (q.num_contexts() != logs.size()) throw std::invalid_argument("sweep: table/log size mismatch");
  for (double a : alphas) {
    if (!(a >= 0.0 && a <= 1.0)) throw std::invalid_argument("sweep: alpha outside [0, 1]");
  }
  const PolicyEstimate baseline = reward_at_hit_constant(logs, baseline_action);
  if (!baseline.supported) throw NoSupportError("baseline action has no support in the holdout logs");

  std::vector<FrontierPoint> points(alphas.size());
  parallel_for(alphas.size(), exec, [&](std::size_t k) {
    FrontierPoint& p = points[k];
    p.alpha = alphas[k];
    p.estimate = reward_at_hit(logs, choose_actions(q, alphas[k], Exec::kSerial));
    if (p.estimate.supported) p.lift = offline_lift(p.estimate, baseline);
  });

  std::vector<Point2> supported;
  std::vector<std::size_t> where;
  for (std::size_t k = 0; k < points.size(); ++k) {
    if (!points[k].estimate.supported) {
      points[k].dominated = true;
      continue;
    }
    supported.push_back({points[k].lift.delta_repin, points[k].lift.delta_p2p});
    where.push_back(k);
  }
  const auto dominated = pareto_filter(supported);
  for (std::size_t i = 0; i < where.size(); ++i) points[where[i]].dominated = dominated[i];
  return points;
}

std::vector<bool> pareto_filter(std::span<const Point2> points) {
  std::vector<std::size_t> order(points.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (points[a].x != points[b].x) return points[a].x > points[b].x;
    return points[a].y > points[b].y;
  });
  std::vector<bool> dominated(points.size(), false);
  double prev_max_y = -std::numeric_limits<double>::infinity();
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    const double x = points[order[i]].x;
    const double group_max_y = points[order[i]].y;
    while (j < order.size() && points[order[j]].x == x) {
      const double y = points[order[j]].y;
      dominated[order[j]] = prev_max_y >= y || group_max_y > y;
      ++j;
    }
    prev_max_y = std::max(prev_max_y, group_max_y);
    i = j;
  }
  return dominated;
}

OperatingPoints select_operating_points(std::vector<FrontierPoint>& frontier) {
  std::vector<std::size_t> feasible;
  for (std::size_t k = 0; k < frontier.size(); ++k) {
    const auto& p = frontier[k];
    if (p.estimate.supported && !p.dominated && p.lift.delta_repin >= 0.0 && p.lift.delta_p2p >= 0.0) {
      feasible.push_back(k);
    }
  }
  for (auto& p : frontier) p.role.clear();
  OperatingPoints ops;
  if (feasible.empty()) return ops;

  const auto lift_r = [&](std::size_t k) { return frontier[k].lift.delta_repin; };
  const auto lift_p = [&](std::size_t k) { return frontier[k].lift.delta_p2p; };

  std::size_t best_r = feasible.front();
  std::size_t best_p = feasible.front();
  for (std::size_t k : feasible) {
    if (lift_r(k) > lift_r(best_r) || (lift_r(k) == lift_r(best_r) && lift_p(k) > lift_p(best_r))) {
      best_r = k;
    }
    if (lift_p(k) > lift_p(best_p) || (lift_p(k) == lift_p(best_p) && lift_r(k) > lift_r(best_p))) {
      best_p = k;
    }
  }

  double min_r = lift_r(feasible.front()), max_r = min_r;
  double min_p = lift_p(feasible.front()), max_p = min_p;
  for (std::size_t k : feasible) {
    min_r = std::min(min_r, lift_r(k));
    max_r = std::max(max_r, lift_r(k));
    min_p = std::min(min_p, lift_p(k));
    max_p = std::max(max_p, lift_p(k));
  }
  const auto norm = [](double v, double lo, double hi) { return hi > lo ? (v - lo) / (hi - lo) : 1.0; };
  std::size_t knee = feasible.front();
  double knee_min = -1.0, knee_sum = -1.0;
  for (std::size_t k : feasible) {
    const double nr = norm(lift_r(k), min_r, max_r);
    const double np = norm(lift_p(k), min_p, max_p);
    const double m = std::min(nr, np);
    if (m > knee_min || (m == knee_min && nr + np > knee_sum)) {
      knee = k;
      knee_min = m;
      knee_sum = nr + np;
    }
  }

  ops.repin_leaning = best_r;
  ops.balanced = knee;
  ops.p2p_leaning = best_p;
  add_role(frontier[best_r].role, "repin_leaning");
  add_role(frontier[knee].role, "balanced");
  add_role(frontier[best_p].role, "p2p_leaning");
  return ops;
}

std::optional<double> pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw std::invalid_argument("pearson: series differ in length");
  if (x.size() < 3) throw std::invalid_argument("pearson: needs at least 3 paired points");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (!(sxx > 0.0) || !(syy > 0.0)) return std::nullopt;
  return sxy / std::sqrt(sxx * syy);
}

void write_frontier_csv(const std::filesystem::path& path, std::span<const FrontierPoint> frontier) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "alpha,delta_repin_pct,delta_p2p_pct,hit_count,stderr_repin,stderr_p2p,dominated,selected_role\n";
  for (const auto& p : frontier) {
    out << fmt(p.alpha) << ',';
    if (p.estimate.supported) {
      const double base_r = p.estimate.v_repin - p.lift.delta_repin;
      const double base_p = p.estimate.v_p2p - p.lift.delta_p2p;
      out << fmt(p.lift.pct_repin) << ',' << fmt(p.lift.pct_p2p) << ',' << p.estimate.hit_count << ','
          << fmt(100.0 * p.estimate.se_repin / base_r) << ',' << fmt(100.0 * p.estimate.se_p2p / base_p)
          << ',' << (p.dominated ? "true" : "false");
    } else {
      out << "nan,nan,0,nan,nan,no_support";
    }
    out << ',' << p.role << '\n';
  }
}

nlohmann::json governance_json(std::span<const FrontierPoint> frontier, const OperatingPoints& ops,
                               const PolicyEstimate& baseline, const std::string& checkpoint_sha256) {
  const auto point = [&](const std::optional<std::size_t>& k) -> nlohmann::json {
    if (!k) return nullptr;
    const auto& p = frontier[*k];
    return {{"alpha", p.alpha},
            {"delta_repin", p.lift.delta_repin},
            {"delta_p2p", p.lift.delta_p2p},
            {"delta_repin_pct", p.lift.pct_repin},
            {"delta_p2p_pct", p.lift.pct_p2p},
            {"hit_count", p.estimate.hit_count}};
  };
  std::int64_t frontier_size = 0;
  for (const auto& p : frontier) frontier_size += (p.estimate.supported && !p.dominated) ? 1 : 0;
  return {{"checkpoint_sha256", checkpoint_sha256},
          {"baseline", {{"v_repin", baseline.v_repin}, {"v_p2p", baseline.v_p2p}, {"hit_count", baseline.hit_count}}},
          {"evaluated_points", frontier.size()},
          {"non_dominated_points", frontier_size},
          {"status", ops.any() ? "selected" : "no_non_degrading_point"},
          {"repin_leaning", point(ops.repin_leaning)},
          {"balanced", point(ops.balanced)},
          {"p2p_leaning", point(ops.p2p_leaning)}};
}

}  // namespace utiltune
