#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "utiltune/value_net.hpp"

namespace utiltune {

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  ValueNet net;
  std::uint64_t train_seed = 0;
};

// JSON container: net dims and feature groups, grid, grid hash, training
// seed, parameters and running normalisation statistics.
void save_checkpoint(const std::filesystem::path& path, const ValueNet& net, std::uint64_t train_seed);

// Throws std::runtime_error on I/O or format errors and ConfigError when the
// stored grid hash differs from `expected_grid_hash`.
Checkpoint load_checkpoint(const std::filesystem::path& path,
                           const std::optional<std::string>& expected_grid_hash = std::nullopt);

// SHA-256 of the file bytes.
std::string checkpoint_hash(const std::filesystem::path& path);

}  // namespace utiltune
