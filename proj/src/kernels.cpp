#include "utiltune/kernels.hpp"

#include <optional>
#include <stdexcept>

namespace utiltune {

std::vector<InteractionRecord> simulate_exploration(const Environment& env, const ActionGrid& grid,
                                                    const ExplorationSpec& spec, Exec exec) {
  if (spec.num_days < 1 || spec.requests_per_day < 1) {
    throw std::invalid_argument("exploration needs at least one day and one request per day");
  }
  if (!(spec.fraction > 0.0 && spec.fraction <= 1.0)) {
    throw std::invalid_argument("exploration fraction must lie in (0, 1]");
  }
  const auto per_day = static_cast<std::size_t>(spec.requests_per_day);
  const std::size_t total = static_cast<std::size_t>(spec.num_days) * per_day;
  std::vector<std::optional<InteractionRecord>> slots(total);

  parallel_for(total, exec, [&](std::size_t flat) {
    const auto day = static_cast<int>(flat / per_day);
    const std::size_t j = flat % per_day;
    auto rng = make_stream(spec.seed, StreamTag::kTraffic, static_cast<std::uint64_t>(day), j);
    if (spec.fraction < 1.0 && rng.uniform() >= spec.fraction) return;
    const Request req = env.sample_request(day, rng);
    const auto draw = uniform_policy(grid, rng);
    const auto served = env.serve(req.candidates, grid.action(draw.action_index));
    const auto& user = env.user(req.context.user_id);
    const auto counts = env.simulate_engagement(req.candidates, served, user, rng);
    slots[flat] = make_record(req.context, draw.action_index, draw.propensity, counts);
  });

  std::vector<InteractionRecord> out;
  for (auto& s : slots) {
    if (s) out.push_back(std::move(*s));
  }
  return out;
}

QTable predict_q_table(const ValueNet& net, std::span<const RequestContext* const> contexts, Exec exec) {
  QTable table;
  table.num_actions = net.grid().size();
  table.values.resize(contexts.size() * table.num_actions);
  parallel_for(contexts.size(), exec, [&](std::size_t i) {
    const auto q = net.predict_all_actions(*contexts[i]);
    std::copy(q.begin(), q.end(), table.values.begin() + static_cast<std::ptrdiff_t>(i * table.num_actions));
  });
  return table;
}

QTable predict_q_table(const ValueNet& net, const LogStore& logs, std::span<const std::size_t> ids,
                       Exec exec) {
  std::vector<const RequestContext*> contexts;
  contexts.reserve(ids.size());
  for (std::size_t id : ids) contexts.push_back(&logs.at(id).features);
  return predict_q_table(net, contexts, exec);
}

}  // namespace utiltune
