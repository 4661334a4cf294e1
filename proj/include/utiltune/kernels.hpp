#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "utiltune/env_sim.hpp"
#include "utiltune/log_store.hpp"
#include "utiltune/parallel.hpp"
#include "utiltune/policy.hpp"
#include "utiltune/value_net.hpp"

namespace utiltune {

struct ExplorationSpec {
  int num_days = 21;
  std::int64_t requests_per_day = 10000;
  double fraction = 1.0;  // share of requests served with a uniform action and logged
  std::uint64_t seed = 1;
};

/// Simulates traffic day by day. Request j of day d draws from the stream
/// (seed, traffic, d, j); explored requests are logged in (day, j) order.
/// Unexplored requests are served at production weights and not logged.
std::vector<InteractionRecord> simulate_exploration(const Environment& env, const ActionGrid& grid,
                                                    const ExplorationSpec& spec, Exec exec);

// Values of every grid action for each context.
QTable predict_q_table(const ValueNet& net, std::span<const RequestContext* const> contexts, Exec exec);
QTable predict_q_table(const ValueNet& net, const LogStore& logs, std::span<const std::size_t> ids,
                       Exec exec);

}  // namespace utiltune
