#include <gtest/gtest.h>

#include <fstream>

#include "../support.hpp"
#include "utiltune/kernels.hpp"
#include "utiltune/log_store.hpp"

namespace utiltune {
namespace {

using testing::TempDir;

RequestContext sample_context(std::int64_t user, int day) {
  RequestContext c;
  c.user_id = user;
  c.day_index = day;
  c.item_dim = 2;
  c.user_embedding = {0.25, -0.5, 1.0};
  c.history_items = {0.1, 0.2, -0.3, 0.4};
  c.history_actions = {HistoryAction::kRepin, HistoryAction::kImpression};
  c.history_age = {0, 7};
  c.device = DeviceType::kAndroid;
  c.hour_of_day = 21;
  return c;
}

TEST(ClipRewards, Table) {
  EXPECT_EQ(clip_rewards(0, 0).repin, 0);
  EXPECT_EQ(clip_rewards(1, 0).repin, 1);
  EXPECT_EQ(clip_rewards(7, 0).repin, 1);
  EXPECT_EQ(clip_rewards(0, 3).p2p, 1);
  EXPECT_EQ(clip_rewards(0, 3).repin, 0);
  EXPECT_THROW((void)clip_rewards(-1, 0), std::invalid_argument);
  EXPECT_THROW((void)clip_rewards(0, -2), std::invalid_argument);
}

TEST(MakeRecord, ClipsAndCopiesContext) {
  const auto ctx = sample_context(4, 2);
  const auto r = make_record(ctx, 12, 0.02, {5, 0});
  EXPECT_EQ(r.r_repin, 1);
  EXPECT_EQ(r.r_p2p, 0);
  EXPECT_EQ(r.n_repin, 5);
  EXPECT_EQ(r.user_id, 4);
  EXPECT_EQ(r.day_index, 2);
  EXPECT_EQ(r.features, ctx);
}

TEST(RecordJson, RoundTripIsExact) {
  auto r = make_record(sample_context(9, 3), 48, 0.02, {0, 2});
  r.features.user_embedding[0] = 0.1 + 0.2;
  const auto back = record_from_json(record_to_json(r));
  EXPECT_EQ(back.features, r.features);
  EXPECT_EQ(back.action_index, 48u);
  EXPECT_EQ(back.propensity, 0.02);
  EXPECT_EQ(back.r_p2p, 1);
  EXPECT_EQ(back.n_p2p, 2);
}

TEST(RecordJson, InconsistentRewardRejected) {
  auto j = record_to_json(make_record(sample_context(1, 0), 3, 0.02, {2, 0}));
  j["r_repin"] = 0;
  EXPECT_THROW((void)record_from_json(j), std::invalid_argument);
}

TEST(RecordJson, MissingFieldRejected) {
  auto j = record_to_json(make_record(sample_context(1, 0), 3, 0.02, {0, 0}));
  j.erase("propensity");
  EXPECT_THROW((void)record_from_json(j), std::invalid_argument);
}

TEST(LogStore, AppendAssignsArrivalIds) {
  LogStore s;
  for (int i = 0; i < 5; ++i) s.append(make_record(sample_context(i, 0), 0, 0.02, {0, 0}));
  for (std::size_t i = 0; i < s.size(); ++i) EXPECT_EQ(s.at(i).record_id, static_cast<std::int64_t>(i));
}

TEST(LogStore, TemporalSplitBoundary) {
  LogStore s;
  for (int day = 0; day < 21; ++day) {
    for (int k = 0; k < 3; ++k) s.append(make_record(sample_context(k, day), 0, 0.02, {0, 0}));
  }
  const auto split = s.temporal_split(14, 7);
  EXPECT_EQ(split.train.size(), 42u);
  EXPECT_EQ(split.holdout.size(), 21u);
  for (auto i : split.train) EXPECT_LE(s.at(i).day_index, 13);
  for (auto i : split.holdout) EXPECT_GE(s.at(i).day_index, 14);
  EXPECT_EQ(s.at(split.holdout.front()).day_index, 14);
}

TEST(LogStore, SplitIgnoresDaysOutsideWindows) {
  LogStore s;
  for (int day = 0; day < 25; ++day) s.append(make_record(sample_context(0, day), 0, 0.02, {0, 0}));
  const auto split = s.temporal_split(14, 7);
  EXPECT_EQ(split.train.size() + split.holdout.size(), 21u);
}

TEST(LogStore, InvalidSplitThrows) {
  LogStore s;
  EXPECT_THROW((void)s.temporal_split(0, 7), std::invalid_argument);
  EXPECT_THROW((void)s.temporal_split(14, -1), std::invalid_argument);
}

TEST(LogStore, NdjsonRoundTrip) {
  TempDir dir("logstore");
  const Environment env(testing::small_env_config(100, 100));
  const auto logs = testing::make_logs(env, default_grid(), 2, 50, 5);
  const auto path = dir.path() / "logs.ndjson";
  logs.write_ndjson(path);
  const auto back = LogStore::read_ndjson(path);
  ASSERT_EQ(back.size(), logs.size());
  for (std::size_t i = 0; i < logs.size(); ++i) {
    EXPECT_EQ(back.at(i).features, logs.at(i).features);
    EXPECT_EQ(back.at(i).action_index, logs.at(i).action_index);
    EXPECT_EQ(back.at(i).n_repin, logs.at(i).n_repin);
    EXPECT_EQ(back.at(i).record_id, logs.at(i).record_id);
  }
}

TEST(LogStore, BadLineReportsError) {
  TempDir dir("logstore_bad");
  const auto path = dir.path() / "bad.ndjson";
  std::ofstream(path) << "{not json\n";
  EXPECT_THROW((void)LogStore::read_ndjson(path), std::invalid_argument);
  EXPECT_THROW((void)LogStore::read_ndjson(dir.path() / "missing.ndjson"), std::runtime_error);
}

TEST(Manifest, RoundTrip) {
  TempDir dir("manifest");
  RunManifest m;
  m.grid = default_grid().to_json();
  m.grid_hash = default_grid().hash();
  m.env_config_hash = EnvConfig{}.hash();
  m.seed = 42;
  m.exploration_fraction = 0.0125;
  m.num_days = 21;
  m.num_records = 2625;
  write_manifest(dir.path() / "manifest.json", m);
  const auto back = read_manifest(dir.path() / "manifest.json");
  EXPECT_EQ(back.grid_hash, m.grid_hash);
  EXPECT_EQ(back.seed, 42u);
  EXPECT_EQ(back.exploration_fraction, 0.0125);
  EXPECT_EQ(back.num_records, 2625);
}

TEST(Exploration, UniformPropensityAndDeterminism) {
  const Environment env(testing::small_env_config(100, 100));
  const auto grid = default_grid();
  ExplorationSpec spec;
  spec.num_days = 2;
  spec.requests_per_day = 200;
  spec.fraction = 0.5;
  spec.seed = 3;
  const auto serial = simulate_exploration(env, grid, spec, Exec::kSerial);
  const auto parallel = simulate_exploration(env, grid, spec, Exec::kParallel);
  ASSERT_EQ(serial.size(), parallel.size());
  EXPECT_GT(serial.size(), 120u);
  EXPECT_LT(serial.size(), 280u);
  for (std::size_t i = 0; i < serial.size(); ++i) {
    EXPECT_EQ(serial[i].features, parallel[i].features);
    EXPECT_EQ(serial[i].action_index, parallel[i].action_index);
    EXPECT_EQ(serial[i].n_p2p, parallel[i].n_p2p);
    EXPECT_EQ(serial[i].propensity, 0.02);
  }
  EXPECT_TRUE(propensities_constant(serial));
}

}  // namespace
}  // namespace utiltune
