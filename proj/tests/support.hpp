#pragma once

#include <unistd.h>

#include <filesystem>
#include <string>
#include <vector>

#include "utiltune/env_sim.hpp"
#include "utiltune/kernels.hpp"
#include "utiltune/log_store.hpp"
#include "utiltune/rng.hpp"
#include "utiltune/value_net.hpp"

namespace utiltune::testing {

// Small simulator for fast tests; same generative model as the default.
inline EnvConfig small_env_config(std::int64_t users = 400, int candidates = 300) {
  EnvConfig c;
  c.num_users = users;
  c.candidates_per_request = candidates;
  return c;
}

inline NetConfig small_net_config() {
  NetConfig c;
  c.d_model = 8;
  c.d_state = 16;
  c.d_action = 4;
  c.d_hidden = 16;
  c.backbone_layers = 2;
  return c;
}

// Tiny network for gradient checks (all dims <= 8).
inline NetConfig tiny_net_config() {
  NetConfig c;
  c.item_dim = 5;
  c.user_dim = 6;
  c.max_history = 6;
  c.d_cat = 3;
  c.d_model = 4;
  c.d_state = 8;
  c.d_action = 4;
  c.d_hidden = 6;
  return c;
}

inline EnvConfig tiny_env_config() {
  EnvConfig c;
  c.num_users = 50;
  c.user_dim = 6;
  c.item_dim = 5;
  c.max_history = 6;
  c.candidates_per_request = 30;
  return c;
}

inline LogStore make_logs(const Environment& env, const ActionGrid& grid, int days, std::int64_t per_day,
                          std::uint64_t seed) {
  ExplorationSpec spec;
  spec.num_days = days;
  spec.requests_per_day = per_day;
  spec.fraction = 1.0;
  spec.seed = seed;
  LogStore logs;
  for (auto& r : simulate_exploration(env, grid, spec, Exec::kParallel)) logs.append(std::move(r));
  return logs;
}

// Parameters drawn from U[-1, 1].
inline void randomize_params(ValueNet& net, std::uint64_t seed) {
  auto rng = make_stream(seed, StreamTag::kModelInit, 1);
  for (double& v : net.mutable_params()) v = 2.0 * rng.uniform() - 1.0;
}

// Four contexts from the tiny simulator with fixed action/reward labels.
struct TinyBatch {
  std::vector<RequestContext> contexts;
  std::vector<TrainingExample> examples;
};

inline TinyBatch tiny_batch(const Environment& env, std::uint64_t seed, std::size_t n = 4) {
  TinyBatch b;
  for (std::size_t i = 0; i < n; ++i) {
    auto rng = make_stream(seed, StreamTag::kTraffic, i);
    b.contexts.push_back(env.sample_request(0, rng).context);
  }
  for (std::size_t i = 0; i < n; ++i) {
    b.examples.push_back({&b.contexts[i], i * 13 % 50, static_cast<double>(i % 2), static_cast<double>((i / 2) % 2)});
  }
  return b;
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() / ("utiltune_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace utiltune::testing
