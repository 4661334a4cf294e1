#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "utiltune/action_space.hpp"
#include "utiltune/env_sim.hpp"

namespace utiltune {

inline constexpr int kLogSchemaVersion = 1;

struct ClippedRewards {
  int repin = 0;
  int p2p = 0;
};

// min(n, 1) per objective. Throws std::invalid_argument on negative counts.
ClippedRewards clip_rewards(std::int64_t n_repin, std::int64_t n_p2p);

/// One logged exploration tuple. record_id is the arrival index in its
/// store and is not serialised.
struct InteractionRecord {
  std::int64_t record_id = 0;
  int day_index = 0;
  std::int64_t user_id = 0;
  std::size_t action_index = 0;
  double propensity = 0.0;
  std::int64_t n_repin = 0;
  std::int64_t n_p2p = 0;
  int r_repin = 0;
  int r_p2p = 0;
  RequestContext features;
};

InteractionRecord make_record(const RequestContext& context, std::size_t action_index,
                              double propensity, const EngagementCounts& counts);

nlohmann::json record_to_json(const InteractionRecord& record);
// Throws std::invalid_argument on a malformed or inconsistent record.
InteractionRecord record_from_json(const nlohmann::json& j);

/// Record indices into a store: train days [0, train_days), holdout days
/// [train_days, train_days + holdout_days).
struct DatasetSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> holdout;
};

struct RunManifest {
  nlohmann::json grid;
  std::string grid_hash;
  std::string env_config_hash;
  std::uint64_t seed = 0;
  double exploration_fraction = 1.0;
  int num_days = 0;
  std::int64_t num_records = 0;

  nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);
};

/// Append-only, in-memory interaction log with NDJSON persistence.
class LogStore {
 public:
  void append(InteractionRecord record);
  const std::vector<InteractionRecord>& read_all() const { return records_; }
  const InteractionRecord& at(std::size_t i) const { return records_.at(i); }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }

  // Throws std::invalid_argument if the windows are empty or negative.
  DatasetSplit temporal_split(int train_days = 14, int holdout_days = 7) const;

  void write_ndjson(const std::filesystem::path& path) const;
  // Throws std::runtime_error on I/O failure, std::invalid_argument on bad lines.
  static LogStore read_ndjson(const std::filesystem::path& path);

 private:
  std::vector<InteractionRecord> records_;
};

void write_manifest(const std::filesystem::path& path, const RunManifest& manifest);
RunManifest read_manifest(const std::filesystem::path& path);

// True if every record carries exactly the same propensity value.
bool propensities_constant(std::span<const InteractionRecord> records);

}  // namespace utiltune
