// Serial vs OpenMP timings of the parallel kernels. Argument 0 is the serial
// path and 1 the OpenMP path; both produce identical results.

#include <benchmark/benchmark.h>

#include <vector>

#include "utiltune/env_sim.hpp"
#include "utiltune/kernels.hpp"
#include "utiltune/log_store.hpp"
#include "utiltune/ope.hpp"
#include "utiltune/trainer.hpp"
#include "utiltune/value_net.hpp"

namespace {

using namespace utiltune;

Exec exec_of(const benchmark::State& state) { return state.range(0) == 0 ? Exec::kSerial : Exec::kParallel; }

const Environment& env() {
  static const Environment e([] {
    EnvConfig c;
    c.num_users = 2000;
    return c;
  }());
  return e;
}

const LogStore& logs() {
  static const LogStore store = [] {
    ExplorationSpec spec;
    spec.num_days = 1;
    spec.requests_per_day = 2000;
    LogStore s;
    for (auto& r : simulate_exploration(env(), default_grid(), spec, Exec::kParallel)) s.append(std::move(r));
    return s;
  }();
  return store;
}

std::vector<std::size_t> all_ids() {
  std::vector<std::size_t> ids(logs().size());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
  return ids;
}

ValueNet default_net() {
  ValueNet net(NetConfig{}, default_grid());
  net.initialize(1);
  return net;
}

void BM_SimulateExploration(benchmark::State& state) {
  ExplorationSpec spec;
  spec.num_days = 1;
  spec.requests_per_day = 500;
  for (auto _ : state) {
    benchmark::DoNotOptimize(simulate_exploration(env(), default_grid(), spec, exec_of(state)));
  }
  state.SetItemsProcessed(state.iterations() * spec.requests_per_day);
}
BENCHMARK(BM_SimulateExploration)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_PredictQTable(benchmark::State& state) {
  const ValueNet net = default_net();
  const auto ids = all_ids();
  for (auto _ : state) benchmark::DoNotOptimize(predict_q_table(net, logs(), ids, exec_of(state)));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(ids.size()));
}
BENCHMARK(BM_PredictQTable)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_LossAndGradient(benchmark::State& state) {
  ValueNet net = default_net();
  const auto ids = all_ids();
  auto examples = make_examples(logs(), ids);
  examples.resize(256);
  std::vector<double> grad;
  for (auto _ : state) benchmark::DoNotOptimize(net.loss_and_gradient(examples, &grad, exec_of(state), false));
  state.SetItemsProcessed(state.iterations() * 256);
}
BENCHMARK(BM_LossAndGradient)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_AlphaSweep(benchmark::State& state) {
  const ValueNet net = default_net();
  const auto ids = all_ids();
  const QTable q = predict_q_table(net, logs(), ids, Exec::kParallel);
  const auto outcomes = logged_outcomes(logs(), ids);
  const auto alphas = alpha_grid(25);
  for (auto _ : state) {
    benchmark::DoNotOptimize(sweep(q, outcomes, alphas, default_grid().baseline_index(), exec_of(state)));
  }
}
BENCHMARK(BM_AlphaSweep)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
