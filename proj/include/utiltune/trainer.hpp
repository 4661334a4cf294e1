#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "utiltune/log_store.hpp"
#include "utiltune/value_net.hpp"

namespace utiltune {

enum class Optimizer { kAdam, kSgd };

struct TrainConfig {
  double learning_rate = 1e-3;
  int batch_size = 256;
  int epochs = 5;
  Optimizer optimizer = Optimizer::kAdam;
  std::uint64_t seed = 11;
  double grad_clip = 10.0;  // global L2 norm; <= 0 disables clipping
  // Where the last finite parameters are written if training diverges.
  std::filesystem::path last_good_path;

  void validate() const;  // throws ConfigError
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct TrainResult {
  double initial_loss = 0.0;
  std::vector<double> epoch_loss;  // mean batch loss per epoch
  std::int64_t steps = 0;
};

std::vector<TrainingExample> make_examples(const LogStore& logs, std::span<const std::size_t> ids);

// Randomly permutes the reward pairs across examples (label-shuffle control).
void shuffle_rewards(std::span<TrainingExample> examples, std::uint64_t seed);

/// Initialises `net` from config.seed and trains it in place. Throws
/// std::invalid_argument on empty data and DivergenceError on a non-finite
/// loss or parameter (after writing the last finite state if requested).
TrainResult train(ValueNet& net, std::span<const TrainingExample> data, const TrainConfig& config,
                  Exec exec = Exec::kParallel);

void write_loss_curve_csv(const std::filesystem::path& path, const TrainResult& result);

}  // namespace utiltune
