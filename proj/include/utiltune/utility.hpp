#pragma once

#include <array>
#include <cstddef>
#include <iosfwd>
#include <span>
#include <string_view>
#include <vector>

#include "utiltune/action_space.hpp"

namespace utiltune {

// Ranker prediction heads. Only the first two are controlled by actions.
enum class Head : std::size_t { kRepin = 0, kP2p = 1, kClick = 2, kCloseup = 3, kHide = 4 };
inline constexpr std::size_t kNumHeads = 5;

std::string_view head_name(std::size_t head);

/// Per-head utility weights; length fixed to the ranker's head count.
class WeightVector {
 public:
  explicit WeightVector(std::vector<double> weights);

  std::size_t size() const { return weights_.size(); }
  double operator[](std::size_t i) const { return weights_[i]; }
  std::span<const double> values() const { return weights_; }

  // Copy with the two controlled heads replaced by `action`.
  WeightVector with_action(const WeightAction& action) const;
  WeightVector with_weight(std::size_t head, double weight) const;

 private:
  std::vector<double> weights_;
};

/// Row-major (item x head) matrix of ranker scores.
struct HeadScoreView {
  std::span<const double> data;
  std::size_t num_heads = kNumHeads;

  std::size_t size() const { return num_heads == 0 ? 0 : data.size() / num_heads; }
  std::span<const double> row(std::size_t item) const {
    return data.subspan(item * num_heads, num_heads);
  }
};

struct HeadContribution {
  std::vector<double> contributions;
};

// Sum_i w_i * h_i. Throws std::invalid_argument on a length mismatch.
double utility_score(const WeightVector& weights, std::span<const double> head_scores);

// Indices of the k highest-utility items in descending utility order; ties
// go to the lower index. Throws std::invalid_argument if k exceeds the count.
std::vector<std::size_t> rank_top_k(const WeightVector& weights, HeadScoreView items,
                                    std::size_t k);

// Allocation-free variant for hot loops; `utilities` and `order` are scratch.
void rank_top_k_into(const WeightVector& weights, HeadScoreView items, std::size_t k,
                     std::vector<double>& utilities, std::vector<std::size_t>& order);

// c_i = |w_i h_i| / sum_j |w_j h_j|. Throws std::domain_error when every
// product is zero.
HeadContribution head_contribution(const WeightVector& weights, std::span<const double> head_scores);

struct ContributionCurvePoint {
  std::size_t head = 0;
  double weight = 0.0;
  double mean_contribution = 0.0;
  double stderr_contribution = 0.0;
};

// Mean contribution of `head` over the sample as its weight sweeps through
// `weights`, all other weights held at `base`.
std::vector<ContributionCurvePoint> contribution_vs_weight_curve(std::size_t head,
                                                                 std::span<const double> weights,
                                                                 const WeightVector& base,
                                                                 HeadScoreView sample);

// Mean per-head contribution over a sample of items.
std::vector<double> mean_head_contribution(const WeightVector& weights, HeadScoreView sample);

void write_contribution_csv(std::ostream& out, std::span<const ContributionCurvePoint> curve);

}  // namespace utiltune
