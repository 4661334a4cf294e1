#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <sstream>
#include <vector>

#include "utiltune/env_sim.hpp"
#include "utiltune/rng.hpp"
#include "utiltune/utility.hpp"

namespace utiltune {
namespace {

TEST(UtilityScore, BasisVectorPicksHead) {
  const WeightVector w({1.0, 0.0, 0.0, 0.0, 0.0});
  const std::vector<double> h{0.3, 0.9, 0.8, 0.7, 0.6};
  EXPECT_DOUBLE_EQ(utility_score(w, h), 0.3);
}

TEST(UtilityScore, ProductionPairArithmetic) {
  const WeightVector w({91.6, 9.1, 0.0, 0.0, 0.0});
  const std::vector<double> h{0.01, 0.10, 0.5, 0.5, 0.5};
  EXPECT_NEAR(utility_score(w, h), 1.826, 1e-12);
}

TEST(UtilityScore, ZeroWeightsGiveZero) {
  const WeightVector w({0.0, 0.0, 0.0, 0.0, 0.0});
  const std::vector<double> h{0.3, 0.9, 0.8, 0.7, 0.6};
  EXPECT_EQ(utility_score(w, h), 0.0);
}

TEST(UtilityScore, LengthMismatchThrows) {
  const WeightVector w({1.0, 2.0});
  const std::vector<double> h{0.3, 0.9, 0.8};
  EXPECT_THROW((void)utility_score(w, h), std::invalid_argument);
}

TEST(UtilityScore, LinearInWeights) {
  auto rng = make_stream(5, StreamTag::kCalibration);
  for (int t = 0; t < 100; ++t) {
    std::vector<double> a(5), b(5), sum(5), h(5);
    for (int i = 0; i < 5; ++i) {
      a[i] = 100.0 * rng.uniform() - 50.0;
      b[i] = 100.0 * rng.uniform() - 50.0;
      sum[i] = a[i] + b[i];
      h[i] = rng.uniform();
    }
    EXPECT_NEAR(utility_score(WeightVector(sum), h),
                utility_score(WeightVector(a), h) + utility_score(WeightVector(b), h), 1e-10);
  }
}

TEST(WeightVector, RejectsNonFinite) {
  EXPECT_THROW(WeightVector({1.0, std::nan("")}), std::invalid_argument);
  EXPECT_THROW(WeightVector(std::vector<double>{}), std::invalid_argument);
}

TEST(RankTopK, FullSortWhenKIsAll) {
  const std::vector<double> scores{0.1, 0.5, 0.3, 0.9};
  const WeightVector w({1.0});
  const auto top = rank_top_k(w, HeadScoreView{scores, 1}, 4);
  EXPECT_EQ(top, (std::vector<std::size_t>{3, 1, 2, 0}));
}

TEST(RankTopK, TiesGoToLowerIndex) {
  const std::vector<double> scores{0.5, 0.7, 0.5, 0.7};
  const WeightVector w({1.0});
  const auto top = rank_top_k(w, HeadScoreView{scores, 1}, 3);
  EXPECT_EQ(top, (std::vector<std::size_t>{1, 3, 0}));
}

TEST(RankTopK, KTooLargeThrows) {
  const std::vector<double> scores{0.5, 0.7};
  EXPECT_THROW((void)rank_top_k(WeightVector({1.0}), HeadScoreView{scores, 1}, 3), std::invalid_argument);
}

TEST(RankTopK, MatchesSortOracle) {
  auto rng = make_stream(6, StreamTag::kCalibration);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> scores(100 * kNumHeads);
    for (double& s : scores) s = rng.uniform();
    std::vector<double> wv(kNumHeads);
    for (double& x : wv) x = 20.0 * rng.uniform() - 5.0;
    const WeightVector w(wv);
    const HeadScoreView view{scores, kNumHeads};
    std::vector<std::size_t> oracle(100);
    std::iota(oracle.begin(), oracle.end(), std::size_t{0});
    std::stable_sort(oracle.begin(), oracle.end(), [&](std::size_t a, std::size_t b) {
      return utility_score(w, view.row(a)) > utility_score(w, view.row(b));
    });
    oracle.resize(25);
    EXPECT_EQ(rank_top_k(w, view, 25), oracle);
  }
}

TEST(HeadContribution, HandArithmetic) {
  const auto c = head_contribution(WeightVector({2.0, 1.0}), std::vector<double>{0.5, 1.0});
  EXPECT_DOUBLE_EQ(c.contributions[0], 0.5);
  EXPECT_DOUBLE_EQ(c.contributions[1], 0.5);
}

TEST(HeadContribution, SingleNonZeroProduct) {
  const auto c = head_contribution(WeightVector({0.0, 3.0, 0.0}), std::vector<double>{0.5, 0.2, 0.9});
  EXPECT_EQ(c.contributions, (std::vector<double>{0.0, 1.0, 0.0}));
}

TEST(HeadContribution, UsesAbsoluteValuesAndSumsToOne) {
  const auto c = head_contribution(WeightVector({91.6, 9.1, 3.0, 2.0, -12.0}),
                                   std::vector<double>{0.02, 0.1, 0.05, 0.04, 0.01});
  double sum = 0.0;
  for (double x : c.contributions) {
    EXPECT_GE(x, 0.0);
    EXPECT_LE(x, 1.0);
    sum += x;
  }
  EXPECT_NEAR(sum, 1.0, 1e-9);
}

TEST(HeadContribution, AllZeroThrows) {
  EXPECT_THROW((void)head_contribution(WeightVector({0.0, 0.0}), std::vector<double>{0.5, 0.5}),
               std::domain_error);
}

TEST(ContributionCurve, ZeroWeightGivesZero) {
  const std::vector<double> sample{0.1, 0.2, 0.3, 0.4, 0.5, 0.2, 0.1, 0.4, 0.3, 0.2};
  const std::vector<double> weights{0.0, 5.0};
  const auto curve = contribution_vs_weight_curve(1, weights, WeightVector({91.6, 9.1, 3.0, 2.0, -12.0}),
                                                  HeadScoreView{sample, kNumHeads});
  ASSERT_EQ(curve.size(), 2u);
  EXPECT_EQ(curve[0].mean_contribution, 0.0);
  EXPECT_GT(curve[1].mean_contribution, 0.0);
}

TEST(ContributionCurve, CalibratedSimulatorP2pCurve) {
  const Environment env(EnvConfig{});
  const auto scores = sample_item_scores(env, 10000, 3);
  std::vector<double> weights;
  for (int w = 1; w <= 30; ++w) weights.push_back(w);
  const auto curve = contribution_vs_weight_curve(1, weights, env.production_weights(),
                                                  HeadScoreView{scores, kNumHeads});
  for (std::size_t i = 1; i < curve.size(); ++i) {
    EXPECT_GT(curve[i].mean_contribution, curve[i - 1].mean_contribution);
  }
  // Concavity bounds c(30) by 30 c(1); the simulator hits the upper endpoint.
  EXPECT_LT(curve.front().mean_contribution, 0.10);
  EXPECT_GE(curve.back().mean_contribution, 0.40);
  EXPECT_LE(curve.back().mean_contribution, 0.60);
}

TEST(ContributionCurve, CsvHasHeader) {
  std::ostringstream out;
  const std::vector<ContributionCurvePoint> pts{{1, 2.0, 0.25, 0.01}};
  write_contribution_csv(out, pts);
  EXPECT_EQ(out.str().substr(0, out.str().find('\n')), "head,weight,mean_contribution,stderr");
}

}  // namespace
}  // namespace utiltune
