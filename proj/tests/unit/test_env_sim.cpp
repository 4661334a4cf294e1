#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "../support.hpp"
#include "utiltune/action_space.hpp"
#include "utiltune/env_sim.hpp"
#include "utiltune/errors.hpp"
#include "utiltune/rng.hpp"

namespace utiltune {
namespace {

using testing::small_env_config;

TEST(Cohort, Definitions) {
  EXPECT_EQ(cohort_of(10, 5), Cohort::kCore);
  EXPECT_EQ(cohort_of(4, 4), Cohort::kCore);
  EXPECT_EQ(cohort_of(10, 3), Cohort::kCasual);
  EXPECT_EQ(cohort_of(2, 0), Cohort::kRest);
  EXPECT_EQ(cohort_of(3, 3), Cohort::kRest);
  EXPECT_EQ(cohort_from_name(cohort_name(Cohort::kCasual)), Cohort::kCasual);
}

TEST(Population, DeterministicAndValid) {
  EnvConfig c = small_env_config(1000);
  const auto a = generate_population(c);
  const auto b = generate_population(c);
  ASSERT_EQ(a.size(), 1000u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].user_embedding, b[i].user_embedding);
    EXPECT_EQ(a[i].latent_preference, b[i].latent_preference);
    EXPECT_EQ(a[i].days_active, b[i].days_active);
    EXPECT_LE(a[i].days_saved, a[i].days_active);
    EXPECT_LE(a[i].days_active, 28);
    EXPECT_GE(a[i].days_saved, 0);
    EXPECT_EQ(a[i].user_embedding.size(), static_cast<std::size_t>(c.user_dim));
    EXPECT_NEAR(std::accumulate(a[i].latent_preference.begin(), a[i].latent_preference.end(), 0.0), 1.0, 1e-12);
    EXPECT_GT(a[i].affinity_repin, 0.0);
    EXPECT_LE(a[i].affinity_repin, 1.0);
  }
}

TEST(Population, PrefixStableAcrossSizes) {
  const auto small = generate_population(small_env_config(50));
  const auto large = generate_population(small_env_config(500));
  for (std::size_t i = 0; i < small.size(); ++i) EXPECT_EQ(small[i].user_embedding, large[i].user_embedding);
}

TEST(Population, CohortMixRoughlyMatchesConfig) {
  const auto users = generate_population(small_env_config(10000));
  std::array<int, 3> counts{};
  for (const auto& u : users) ++counts[static_cast<std::size_t>(u.cohort())];
  EXPECT_NEAR(counts[0] / 10000.0, 0.2, 0.02);
  EXPECT_NEAR(counts[1] / 10000.0, 0.5, 0.02);
  EXPECT_NEAR(counts[2] / 10000.0, 0.3, 0.02);
}

TEST(EnvConfig, InvalidSizesRejected) {
  EnvConfig c;
  c.num_users = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = EnvConfig{};
  c.top_k = 30;
  c.candidates_per_request = 20;
  EXPECT_THROW(c.validate(), ConfigError);
  c = EnvConfig{};
  c.cohort_mix = {0.5, 0.5, 0.5};
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(EnvConfig, JsonRoundTripPreservesHash) {
  EnvConfig c;
  c.num_users = 1234;
  c.heterogeneity_strength = 0.4;
  const auto back = EnvConfig::from_json(c.to_json());
  EXPECT_EQ(back.hash(), c.hash());
  EXPECT_EQ(back.num_users, 1234);
  EXPECT_NE(EnvConfig{}.hash(), c.hash());
}

TEST(EnvConfig, MissingKeysKeepDefaults) {
  const auto c = EnvConfig::from_json(nlohmann::json{{"num_users", 77}});
  EXPECT_EQ(c.num_users, 77);
  EXPECT_EQ(c.candidates_per_request, 2000);
  EXPECT_EQ(c.production_weights, EnvConfig{}.production_weights);
}

TEST(SampleRequest, DefaultShapeAndRanges) {
  const Environment env(small_env_config(200, 2000));
  auto rng = make_stream(1, StreamTag::kTraffic);
  const Request r = env.sample_request(3, rng);
  EXPECT_EQ(r.candidates.count, 2000u);
  EXPECT_EQ(r.context.day_index, 3);
  EXPECT_LE(r.context.history_size(), 16u);
  EXPECT_EQ(r.context.history_items.size(), r.context.history_size() * 16);
  EXPECT_EQ(r.context.history_age.size(), r.context.history_size());
  EXPECT_GE(r.context.hour_of_day, 0);
  EXPECT_LT(r.context.hour_of_day, 24);
  for (double h : r.candidates.head_scores) {
    EXPECT_GT(h, 0.0);
    EXPECT_LT(h, 1.0);
  }
  for (std::size_t i = 0; i < r.candidates.count; ++i) {
    const auto item = r.candidates.item(i);
    EXPECT_EQ(item.item_embedding.size(), 16u);
    EXPECT_GE(item.true_engagement_prob[0], 0.0);
    EXPECT_LE(item.true_engagement_prob[1], 1.0);
  }
}

TEST(SampleRequest, SameSeedSameRequest) {
  const Environment env(small_env_config());
  auto a = make_stream(9, StreamTag::kTraffic, 4, 5);
  auto b = make_stream(9, StreamTag::kTraffic, 4, 5);
  const Request ra = env.sample_request(0, a);
  const Request rb = env.sample_request(0, b);
  EXPECT_EQ(ra.context, rb.context);
  EXPECT_EQ(ra.candidates.head_scores, rb.candidates.head_scores);
  EXPECT_EQ(ra.candidates.true_prob_repin, rb.candidates.true_prob_repin);
}

TEST(SampleRequest, HeadScoresAreInformative) {
  const Environment env(small_env_config(200, 2000));
  auto rng = make_stream(2, StreamTag::kTraffic);
  const Request r = env.sample_request(0, rng);
  std::vector<double> h, p;
  for (std::size_t i = 0; i < r.candidates.count; ++i) {
    h.push_back(r.candidates.heads().row(i)[0]);
    p.push_back(r.candidates.true_prob_repin[i]);
  }
  const double mh = std::accumulate(h.begin(), h.end(), 0.0) / h.size();
  const double mp = std::accumulate(p.begin(), p.end(), 0.0) / p.size();
  double cov = 0.0;
  for (std::size_t i = 0; i < h.size(); ++i) cov += (h[i] - mh) * (p[i] - mp);
  EXPECT_GT(cov, 0.0);
}

TEST(SampleRequest, NoHeterogeneityMeansTypeIndependentProbabilities) {
  EnvConfig c = small_env_config();
  c.heterogeneity_strength = 0.0;
  const Environment env(c);
  const auto& u0 = env.user(0);
  const auto& u1 = env.user(1);
  ASSERT_NE(u0.latent_preference, u1.latent_preference);
  auto ctx_rng = make_stream(3, StreamTag::kTraffic);
  const RequestContext ctx = env.sample_context(u0, 0, ctx_rng);
  CandidateSet a, b;
  auto ra = make_stream(4, StreamTag::kTraffic);
  auto rb = make_stream(4, StreamTag::kTraffic);
  env.sample_candidates(u0, ctx, ra, a);
  env.sample_candidates(u1, ctx, rb, b);
  EXPECT_EQ(a.true_prob_repin, b.true_prob_repin);
  EXPECT_EQ(a.true_prob_p2p, b.true_prob_p2p);
}

TEST(SimulateEngagement, ZeroAndOneProbabilities) {
  EnvConfig c = small_env_config(10, 30);
  const Environment env(c);
  CandidateSet cands;
  cands.resize(30);
  std::vector<std::size_t> served(25);
  std::iota(served.begin(), served.end(), std::size_t{0});
  UserProfile u = env.user(0);
  u.affinity_repin = 1.0;
  u.affinity_p2p = 1.0;
  auto rng = make_stream(1, StreamTag::kTraffic);
  auto counts = env.simulate_engagement(cands, served, u, rng);
  EXPECT_EQ(counts.n_repin, 0);
  EXPECT_EQ(counts.n_p2p, 0);
  std::fill(cands.true_prob_repin.begin(), cands.true_prob_repin.end(), 1.0);
  counts = env.simulate_engagement(cands, served, u, rng);
  EXPECT_EQ(counts.n_repin, 25);
  EXPECT_EQ(counts.n_p2p, 0);
  const auto e = env.expected_clipped_reward(cands, served, u);
  EXPECT_EQ(e.repin, 1.0);
  EXPECT_EQ(e.p2p, 0.0);
}

TEST(SimulateEngagement, WrongLengthThrows) {
  const Environment env(small_env_config(10, 30));
  CandidateSet cands;
  cands.resize(30);
  const std::vector<std::size_t> served{0, 1, 2};
  auto rng = make_stream(1, StreamTag::kTraffic);
  EXPECT_THROW((void)env.simulate_engagement(cands, served, env.user(0), rng), std::invalid_argument);
}

TEST(SimulateEngagement, ExpectedRewardMatchesMonteCarlo) {
  const Environment env(small_env_config(50, 300));
  auto rng = make_stream(5, StreamTag::kTraffic);
  const Request r = env.sample_request(0, rng);
  const auto served = env.serve(r.candidates, kProductionAction);
  const auto& u = env.user(r.context.user_id);
  const auto e = env.expected_clipped_reward(r.candidates, served, u);
  const int n = 40000;
  int hits_r = 0, hits_p = 0;
  for (int i = 0; i < n; ++i) {
    const auto c = env.simulate_engagement(r.candidates, served, u, rng);
    hits_r += c.n_repin > 0;
    hits_p += c.n_p2p > 0;
  }
  EXPECT_NEAR(hits_r / double(n), e.repin, 4.0 * std::sqrt(e.repin * (1 - e.repin) / n) + 1e-9);
  EXPECT_NEAR(hits_p / double(n), e.p2p, 4.0 * std::sqrt(e.p2p * (1 - e.p2p) / n) + 1e-9);
}

TEST(TruePolicyValue, DeterministicAndValidatesInput) {
  const Environment env(small_env_config(100, 200));
  const ContextPolicy prod = [](const RequestContext&) { return kProductionAction; };
  const auto a = true_policy_value(env, prod, 500, 3);
  const auto b = true_policy_value(env, prod, 500, 3);
  EXPECT_EQ(a.mean_repin, b.mean_repin);
  EXPECT_EQ(a.mean_p2p, b.mean_p2p);
  EXPECT_GT(a.se_repin, 0.0);
  EXPECT_THROW((void)true_policy_value(env, prod, 0, 3), std::invalid_argument);
}

TEST(TruePolicyValue, UniformPolicyIsMeanOfConstantPolicies) {
  const Environment env(small_env_config(300, 200));
  const ActionGrid grid = default_grid();
  const std::int64_t n = 4000;
  double sum_r = 0.0, sum_p = 0.0, var_r = 0.0, var_p = 0.0;
  for (std::size_t a = 0; a < grid.size(); ++a) {
    const WeightAction act = grid.action(a);
    const auto v = true_policy_value(env, [act](const RequestContext&) { return act; }, n, 17 + a);
    sum_r += v.mean_repin;
    sum_p += v.mean_p2p;
    var_r += v.se_repin * v.se_repin;
    var_p += v.se_p2p * v.se_p2p;
  }
  const double k = static_cast<double>(grid.size());
  // Pseudo-random action keyed on the context, uniform over the grid.
  const ContextPolicy uniform = [&grid](const RequestContext& c) {
    std::uint64_t s = static_cast<std::uint64_t>(c.user_id) * 1000003u + static_cast<std::uint64_t>(c.hour_of_day) * 7919u +
                      c.history_size() * 104729u + static_cast<std::uint64_t>(c.device);
    for (double x : c.user_embedding) s = s * 31u + static_cast<std::uint64_t>(std::llround(x * 1000.0));
    const std::uint64_t h = splitmix64(s);
    return grid.action(h % grid.size());
  };
  const auto u = true_policy_value(env, uniform, 50000, 99);
  EXPECT_NEAR(u.mean_repin, sum_r / k, 3.0 * std::sqrt(u.se_repin * u.se_repin + var_r / (k * k)));
  EXPECT_NEAR(u.mean_p2p, sum_p / k, 3.0 * std::sqrt(u.se_p2p * u.se_p2p + var_p / (k * k)));
}

// Best constant action by total expected reward, for users of one latent type.
std::size_t best_action_for(const Environment& env, const ActionGrid& grid, bool repin_type) {
  std::vector<const UserProfile*> users;
  for (const auto& u : env.population()) {
    double mass = 0.0;
    for (std::size_t k = 0; k < u.latent_preference.size() / 2; ++k) mass += u.latent_preference[k];
    if (repin_type ? mass > 0.6 : mass < 0.4) users.push_back(&u);
  }
  std::vector<double> value(grid.size(), 0.0);
  for (int i = 0; i < 600; ++i) {
    auto rng = make_stream(21, StreamTag::kOracle, repin_type, static_cast<std::uint64_t>(i));
    const UserProfile& u = *users[static_cast<std::size_t>(i) % users.size()];
    const Request r = env.sample_request_for(u, 0, rng);
    for (std::size_t a = 0; a < grid.size(); ++a) {
      const auto e = env.expected_clipped_reward(r.candidates, env.serve(r.candidates, grid.action(a)), u);
      value[a] += e.repin + e.p2p;
    }
  }
  return static_cast<std::size_t>(std::max_element(value.begin(), value.end()) - value.begin());
}

TEST(Informativeness, BestConstantActionDiffersAcrossTypes) {
  const Environment env(small_env_config(2000, 300));
  const ActionGrid grid = default_grid();
  const std::size_t best_repin_type = best_action_for(env, grid, true);
  const std::size_t best_p2p_type = best_action_for(env, grid, false);
  EXPECT_NE(best_repin_type, best_p2p_type);
  // Repin-type users prefer a larger repin-to-p2p weight ratio.
  const auto ra = grid.action(best_repin_type);
  const auto pa = grid.action(best_p2p_type);
  EXPECT_GT(ra.repin / ra.p2p, pa.repin / pa.p2p);
}

TEST(Calibration, OtherHeadScaleIsBakedIntoDefaults) {
  EXPECT_NEAR(calibrate_other_head_scale(EnvConfig{}, 0.90), 1.0, 0.01);
}

}  // namespace
}  // namespace utiltune
