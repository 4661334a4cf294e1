#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "utiltune/errors.hpp"
#include "utiltune/ope.hpp"
#include "utiltune/rng.hpp"

namespace utiltune {
namespace {

std::vector<LoggedOutcome> hand_logs() {
  return {{0, 0.5, 1.0, 0.0}, {1, 0.5, 0.0, 1.0}, {0, 0.5, 0.0, 1.0}, {1, 0.5, 1.0, 1.0}};
}

TEST(RewardAtHit, HandExample) {
  const auto logs = hand_logs();
  const std::vector<std::size_t> chosen{0, 0, 0, 0};
  const auto e = reward_at_hit(logs, chosen);
  ASSERT_TRUE(e.supported);
  EXPECT_EQ(e.hit_count, 2);
  EXPECT_DOUBLE_EQ(e.v_repin, 0.5);
  EXPECT_DOUBLE_EQ(e.v_p2p, 0.5);
  EXPECT_DOUBLE_EQ(e.se_repin, std::sqrt(0.25 / 2.0));
}

TEST(RewardAtHit, MixedChoices) {
  const auto logs = hand_logs();
  const std::vector<std::size_t> chosen{0, 1, 1, 1};
  const auto e = reward_at_hit(logs, chosen);
  EXPECT_EQ(e.hit_count, 3);
  EXPECT_DOUBLE_EQ(e.v_repin, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(e.v_p2p, 2.0 / 3.0);
}

TEST(RewardAtHit, NoHitsIsUnsupported) {
  const auto logs = hand_logs();
  const std::vector<std::size_t> chosen{2, 2, 2, 2};
  EXPECT_FALSE(reward_at_hit(logs, chosen).supported);
  EXPECT_EQ(reward_at_hit(logs, chosen).hit_count, 0);
  EXPECT_FALSE(reward_at_hit_constant(logs, 7).supported);
}

TEST(RewardAtHit, ConstantMatchesGeneral) {
  const auto logs = hand_logs();
  const std::vector<std::size_t> chosen(4, 1);
  const auto a = reward_at_hit(logs, chosen);
  const auto b = reward_at_hit_constant(logs, 1);
  EXPECT_EQ(a.v_repin, b.v_repin);
  EXPECT_EQ(a.v_p2p, b.v_p2p);
  EXPECT_EQ(a.hit_count, b.hit_count);
}

TEST(Snips, EqualsRewardAtHitUnderConstantPropensity) {
  auto rng = make_stream(1, StreamTag::kCalibration);
  std::vector<LoggedOutcome> logs(2000);
  std::vector<std::size_t> chosen(logs.size());
  for (std::size_t i = 0; i < logs.size(); ++i) {
    logs[i] = {static_cast<std::size_t>(rng.uniform() * 50), 0.02, rng.uniform() < 0.3 ? 1.0 : 0.0,
               rng.uniform() < 0.1 ? 1.0 : 0.0};
    chosen[i] = static_cast<std::size_t>(rng.uniform() * 50);
  }
  const auto a = reward_at_hit(logs, chosen);
  const auto b = snips_estimate(logs, chosen);
  EXPECT_NEAR(a.v_repin, b.v_repin, 1e-12);
  EXPECT_NEAR(a.v_p2p, b.v_p2p, 1e-12);
  EXPECT_EQ(a.hit_count, b.hit_count);
}

TEST(Snips, WeightsByInversePropensity) {
  const std::vector<LoggedOutcome> logs{{0, 0.5, 1.0, 0.0}, {0, 0.25, 0.0, 1.0}};
  const std::vector<std::size_t> chosen{0, 0};
  const auto e = snips_estimate(logs, chosen);
  EXPECT_DOUBLE_EQ(e.v_repin, 2.0 / 6.0);
  EXPECT_DOUBLE_EQ(e.v_p2p, 4.0 / 6.0);
}

TEST(OfflineLift, PercentOfBaseline) {
  PolicyEstimate p{true, 0.12, 0.05, 100, 0.0, 0.0};
  PolicyEstimate b{true, 0.10, 0.04, 100, 0.0, 0.0};
  const auto l = offline_lift(p, b);
  EXPECT_NEAR(l.delta_repin, 0.02, 1e-15);
  EXPECT_NEAR(l.pct_repin, 20.0, 1e-12);
  EXPECT_NEAR(l.pct_p2p, 25.0, 1e-12);
  p.supported = false;
  EXPECT_THROW((void)offline_lift(p, b), NoSupportError);
}

TEST(AlphaGrid, EvenlySpacedWithExactEndpoints) {
  const auto a = alpha_grid(25);
  ASSERT_EQ(a.size(), 25u);
  EXPECT_EQ(a.front(), 0.0);
  EXPECT_EQ(a.back(), 1.0);
  EXPECT_NEAR(a[12], 0.5, 1e-15);
  for (std::size_t i = 1; i < a.size(); ++i) EXPECT_NEAR(a[i] - a[i - 1], 1.0 / 24.0, 1e-15);
}

TEST(ParetoFilter, HandExamples) {
  const std::vector<Point2> pts{{1, 1}, {2, 0}, {0, 2}, {0.5, 0.5}, {1, 0.5}, {1, 1}};
  const auto d = pareto_filter(pts);
  EXPECT_EQ(d, (std::vector<bool>{false, false, false, true, true, false}));
}

TEST(ParetoFilter, MatchesBruteForce) {
  auto rng = make_stream(2, StreamTag::kCalibration);
  for (int t = 0; t < 50; ++t) {
    std::vector<Point2> pts(40);
    for (auto& p : pts) p = {std::floor(rng.uniform() * 8), std::floor(rng.uniform() * 8)};
    const auto d = pareto_filter(pts);
    for (std::size_t i = 0; i < pts.size(); ++i) {
      bool dominated = false;
      for (std::size_t j = 0; j < pts.size(); ++j) {
        dominated |= pts[j].x >= pts[i].x && pts[j].y >= pts[i].y && (pts[j].x > pts[i].x || pts[j].y > pts[i].y);
      }
      EXPECT_EQ(d[i], dominated);
    }
  }
}

FrontierPoint point(double alpha, double dr, double dp, bool supported = true) {
  FrontierPoint p;
  p.alpha = alpha;
  p.estimate.supported = supported;
  p.lift.delta_repin = dr;
  p.lift.delta_p2p = dp;
  return p;
}

TEST(OperatingPoints, HandExample) {
  std::vector<FrontierPoint> f{point(0.0, 0.10, -0.01), point(0.25, 0.08, 0.00), point(0.5, 0.05, 0.03),
                               point(0.75, 0.01, 0.04), point(1.0, -0.02, 0.06)};
  const auto ops = select_operating_points(f);
  ASSERT_TRUE(ops.any());
  EXPECT_EQ(*ops.repin_leaning, 1u);
  EXPECT_EQ(*ops.p2p_leaning, 3u);
  // Normalised (repin, p2p): (1, 0), (4/7, 3/4), (0, 1); knee is the middle.
  EXPECT_EQ(*ops.balanced, 2u);
  EXPECT_EQ(f[2].role, "balanced");
  EXPECT_EQ(f[1].role, "repin_leaning");
  EXPECT_TRUE(f[0].role.empty());
}

TEST(OperatingPoints, SinglePointTakesAllRoles) {
  std::vector<FrontierPoint> f{point(0.0, 0.1, -0.1), point(0.5, 0.02, 0.01), point(1.0, -0.1, 0.2)};
  const auto ops = select_operating_points(f);
  EXPECT_EQ(*ops.repin_leaning, 1u);
  EXPECT_EQ(*ops.balanced, 1u);
  EXPECT_EQ(*ops.p2p_leaning, 1u);
  EXPECT_EQ(f[1].role, "repin_leaning|balanced|p2p_leaning");
}

TEST(OperatingPoints, NoneWhenEveryPointDegrades) {
  std::vector<FrontierPoint> f{point(0.0, 0.1, -0.1), point(1.0, -0.1, 0.2), point(0.5, 0.3, 0.3, false)};
  EXPECT_FALSE(select_operating_points(f).any());
}

TEST(Pearson, KnownValues) {
  const std::vector<double> x{1, 2, 3, 4};
  const std::vector<double> y{2, 4, 6, 8};
  const std::vector<double> z{8, 6, 4, 2};
  EXPECT_NEAR(*pearson(x, y), 1.0, 1e-12);
  EXPECT_NEAR(*pearson(x, z), -1.0, 1e-12);
  const std::vector<double> c{3, 3, 3, 3};
  EXPECT_FALSE(pearson(x, c).has_value());
  const std::vector<double> two{1, 2};
  EXPECT_THROW((void)pearson(two, two), std::invalid_argument);
  EXPECT_THROW((void)pearson(x, two), std::invalid_argument);
}

TEST(Pearson, OnlineOfflineFixture) {
  const std::vector<double> repin_off{2.77, 1.46, 0.31}, repin_on{2.26, 1.35, 0.66};
  const std::vector<double> p2p_off{-0.30, 0.41, 1.18}, p2p_on{-0.21, -0.04, 0.30};
  EXPECT_NEAR(*pearson(repin_off, repin_on), 0.999, 1e-3);
  EXPECT_NEAR(*pearson(p2p_off, p2p_on), 0.986, 1e-3);
}

TEST(Sweep, ConsistentWithRewardAtHit) {
  auto rng = make_stream(3, StreamTag::kCalibration);
  const std::size_t n = 3000, k = 5;
  QTable q;
  q.num_actions = k;
  std::vector<LoggedOutcome> logs(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t a = static_cast<std::size_t>(rng.uniform() * k);
    logs[i] = {a, 0.2, rng.uniform() < 0.1 + 0.05 * a ? 1.0 : 0.0, rng.uniform() < 0.3 - 0.05 * a ? 1.0 : 0.0};
    for (std::size_t b = 0; b < k; ++b) q.values.push_back({0.1 + 0.05 * b, 0.3 - 0.05 * b});
  }
  const auto alphas = alpha_grid(5);
  const auto frontier = sweep(q, logs, alphas, 2);
  ASSERT_EQ(frontier.size(), 5u);
  const auto base = reward_at_hit_constant(logs, 2);
  for (const auto& p : frontier) {
    const auto chosen = choose_actions(q, p.alpha);
    const auto e = reward_at_hit(logs, chosen);
    EXPECT_EQ(p.estimate.v_repin, e.v_repin);
    EXPECT_NEAR(p.lift.delta_p2p, e.v_p2p - base.v_p2p, 1e-15);
  }
  EXPECT_EQ(choose_actions(q, 0.0).front(), 4u);
  EXPECT_EQ(choose_actions(q, 1.0).front(), 0u);
  const auto serial = sweep(q, logs, alphas, 2, Exec::kSerial);
  for (std::size_t i = 0; i < serial.size(); ++i) EXPECT_EQ(serial[i].lift.pct_repin, frontier[i].lift.pct_repin);
}

}  // namespace
}  // namespace utiltune
