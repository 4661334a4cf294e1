#include "utiltune/log_store.hpp"

#include <fstream>
#include <stdexcept>

namespace utiltune {
namespace {

nlohmann::json features_to_json(const RequestContext& ctx) {
  nlohmann::json items = nlohmann::json::array();
  nlohmann::json actions = nlohmann::json::array();
  for (std::size_t i = 0; i < ctx.history_size(); ++i) {
    const auto item = ctx.history_item(i);
    items.push_back(std::vector<double>(item.begin(), item.end()));
    actions.push_back(history_action_name(ctx.history_actions[i]));
  }
  return {
      {"user_embedding", ctx.user_embedding},
      {"item_dim", ctx.item_dim},
      {"history_items", std::move(items)},
      {"history_actions", std::move(actions)},
      {"history_age", ctx.history_age},
      {"device_type", device_name(ctx.device)},
      {"surface", surface_name(ctx.surface)},
      {"hour_of_day", ctx.hour_of_day},
  };
}

RequestContext features_from_json(const nlohmann::json& j) {
  RequestContext ctx;
  ctx.user_embedding = j.at("user_embedding").get<std::vector<double>>();
  ctx.item_dim = j.at("item_dim").get<int>();
  const auto& items = j.at("history_items");
  const auto& actions = j.at("history_actions");
  ctx.history_age = j.at("history_age").get<std::vector<std::uint8_t>>();
  if (items.size() != actions.size() || items.size() != ctx.history_age.size()) {
    throw std::invalid_argument("history arrays differ in length");
  }
  ctx.history_items.reserve(items.size() * static_cast<std::size_t>(ctx.item_dim));
  for (const auto& item : items) {
    if (item.size() != static_cast<std::size_t>(ctx.item_dim)) {
      throw std::invalid_argument("history item has wrong dimension");
    }
    for (const auto& v : item) ctx.history_items.push_back(v.get<double>());
  }
  for (const auto& a : actions) {
    ctx.history_actions.push_back(history_action_from_name(a.get<std::string>()));
  }
  for (auto age : ctx.history_age) {
    if (age >= kNumAgeBuckets) throw std::invalid_argument("history age bucket out of range");
  }
  ctx.device = device_from_name(j.at("device_type").get<std::string>());
  ctx.surface = surface_from_name(j.at("surface").get<std::string>());
  ctx.hour_of_day = j.at("hour_of_day").get<int>();
  if (ctx.hour_of_day < 0 || ctx.hour_of_day > 23) {
    throw std::invalid_argument("hour_of_day out of range");
  }
  return ctx;
}

}  // namespace

ClippedRewards clip_rewards(std::int64_t n_repin, std::int64_t n_p2p) {
  if (n_repin < 0 || n_p2p < 0) throw std::invalid_argument("engagement counts must be >= 0");
  return {n_repin > 0 ? 1 : 0, n_p2p > 0 ? 1 : 0};
}

InteractionRecord make_record(const RequestContext& context, std::size_t action_index,
                              double propensity, const EngagementCounts& counts) {
  const auto r = clip_rewards(counts.n_repin, counts.n_p2p);
  InteractionRecord rec;
  rec.day_index = context.day_index;
  rec.user_id = context.user_id;
  rec.action_index = action_index;
  rec.propensity = propensity;
  rec.n_repin = counts.n_repin;
  rec.n_p2p = counts.n_p2p;
  rec.r_repin = r.repin;
  rec.r_p2p = r.p2p;
  rec.features = context;
  return rec;
}

nlohmann::json record_to_json(const InteractionRecord& r) {
  return {
      {"schema_version", kLogSchemaVersion},
      {"day_index", r.day_index},
      {"user_id", r.user_id},
      {"action_index", r.action_index},
      {"propensity", r.propensity},
      {"n_repin", r.n_repin},
      {"n_p2p", r.n_p2p},
      {"r_repin", r.r_repin},
      {"r_p2p", r.r_p2p},
      {"features", features_to_json(r.features)},
  };
}

InteractionRecord record_from_json(const nlohmann::json& j) {
  try {
    if (j.at("schema_version").get<int>() != kLogSchemaVersion) {
      throw std::invalid_argument("unsupported schema_version");
    }
    InteractionRecord r;
    r.day_index = j.at("day_index").get<int>();
    r.user_id = j.at("user_id").get<std::int64_t>();
    r.action_index = j.at("action_index").get<std::size_t>();
    r.propensity = j.at("propensity").get<double>();
    r.n_repin = j.at("n_repin").get<std::int64_t>();
    r.n_p2p = j.at("n_p2p").get<std::int64_t>();
    r.r_repin = j.at("r_repin").get<int>();
    r.r_p2p = j.at("r_p2p").get<int>();
    r.features = features_from_json(j.at("features"));
    r.features.user_id = r.user_id;
    r.features.day_index = r.day_index;

    if (r.day_index < 0) throw std::invalid_argument("negative day_index");
    if (!(r.propensity > 0.0 && r.propensity <= 1.0)) {
      throw std::invalid_argument("propensity outside (0, 1]");
    }
    const auto clipped = clip_rewards(r.n_repin, r.n_p2p);
    if (clipped.repin != r.r_repin || clipped.p2p != r.r_p2p) {
      throw std::invalid_argument("rewards are not the clipped counts");
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("malformed record: ") + e.what());
  }
}

// --- Manifest ----------------------------------------------------------------

nlohmann::json RunManifest::to_json() const {
  return {
      {"schema_version", kLogSchemaVersion},
      {"grid", grid},
      {"grid_hash", grid_hash},
      {"env_config_hash", env_config_hash},
      {"seed", seed},
      {"exploration_fraction", exploration_fraction},
      {"num_days", num_days},
      {"num_records", num_records},
  };
}

RunManifest RunManifest::from_json(const nlohmann::json& j) {
  RunManifest m;
  m.grid = j.at("grid");
  m.grid_hash = j.at("grid_hash").get<std::string>();
  m.env_config_hash = j.at("env_config_hash").get<std::string>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.exploration_fraction = j.at("exploration_fraction").get<double>();
  m.num_days = j.at("num_days").get<int>();
  m.num_records = j.at("num_records").get<std::int64_t>();
  return m;
}

void write_manifest(const std::filesystem::path& path, const RunManifest& manifest) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write manifest " + path.string());
  out << manifest.to_json().dump(2) << '\n';
}

RunManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read manifest " + path.string());
  try {
    return RunManifest::from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("malformed manifest: " + std::string(e.what()));
  }
}

// --- LogStore ------------------------------------------------------------------

void LogStore::append(InteractionRecord record) {
  record.record_id = static_cast<std::int64_t>(records_.size());
  records_.push_back(std::move(record));
}

DatasetSplit LogStore::temporal_split(int train_days, int holdout_days) const {
  if (train_days <= 0 || holdout_days <= 0) {
    throw std::invalid_argument("temporal_split: day windows must be positive");
  }
  DatasetSplit split;
  for (std::size_t i = 0; i < records_.size(); ++i) {
    const int day = records_[i].day_index;
    if (day < train_days) {
      split.train.push_back(i);
    } else if (day < train_days + holdout_days) {
      split.holdout.push_back(i);
    }
  }
  return split;
}

void LogStore::write_ndjson(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write log " + path.string());
  for (const auto& r : records_) out << record_to_json(r).dump() << '\n';
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

LogStore LogStore::read_ndjson(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read log " + path.string());
  LogStore store;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      store.append(record_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw std::invalid_argument(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return store;
}

bool propensities_constant(std::span<const InteractionRecord> records) {
  for (const auto& r : records) {
    if (r.propensity != records.front().propensity) return false;
  }
  return true;
}

}  // namespace utiltune
