#include "utiltune/utility.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <stdexcept>

namespace utiltune {

std::string_view head_name(std::size_t head) {
  static constexpr std::array<std::string_view, kNumHeads> kNames{"repin", "p2p", "click",
                                                                  "closeup", "hide"};
  return head < kNames.size() ? kNames[head] : std::string_view("unknown");
}

WeightVector::WeightVector(std::vector<double> weights) : weights_(std::move(weights)) {
  if (weights_.empty()) throw std::invalid_argument("weight vector must be non-empty");
  for (double w : weights_) {
    if (!std::isfinite(w)) throw std::invalid_argument("weight vector entries must be finite");
  }
}

WeightVector WeightVector::with_action(const WeightAction& action) const {
  auto w = weights_;
  w.at(static_cast<std::size_t>(Head::kRepin)) = action.repin;
  w.at(static_cast<std::size_t>(Head::kP2p)) = action.p2p;
  return WeightVector(std::move(w));
}

WeightVector WeightVector::with_weight(std::size_t head, double weight) const {
  auto w = weights_;
  w.at(head) = weight;
  return WeightVector(std::move(w));
}

double utility_score(const WeightVector& weights, std::span<const double> head_scores) {
  if (head_scores.size() != weights.size()) {
    throw std::invalid_argument("utility_score: head score length does not match weights");
  }
  double u = 0.0;
  for (std::size_t i = 0; i < head_scores.size(); ++i) u += weights[i] * head_scores[i];
  return u;
}

void rank_top_k_into(const WeightVector& weights, HeadScoreView items, std::size_t k,
                     std::vector<double>& utilities, std::vector<std::size_t>& order) {
  if (items.num_heads != weights.size()) {
    throw std::invalid_argument("rank_top_k: head count does not match weights");
  }
  const std::size_t n = items.size();
  if (k > n) throw std::invalid_argument("rank_top_k: k exceeds the candidate count");

  utilities.resize(n);
  for (std::size_t i = 0; i < n; ++i) utilities[i] = utility_score(weights, items.row(i));

  order.resize(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto before = [&utilities](std::size_t a, std::size_t b) {
    return utilities[a] > utilities[b] || (utilities[a] == utilities[b] && a < b);
  };
  if (k < n) {
    std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                     before);
  }
  std::sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), before);
  order.resize(k);
}

std::vector<std::size_t> rank_top_k(const WeightVector& weights, HeadScoreView items,
                                    std::size_t k) {
  std::vector<double> utilities;
  std::vector<std::size_t> order;
  rank_top_k_into(weights, items, k, utilities, order);
  return order;
}

HeadContribution head_contribution(const WeightVector& weights, std::span<const double> head_scores) {
  if (head_scores.size() != weights.size()) {
    throw std::invalid_argument("head_contribution: head score length does not match weights");
  }
  HeadContribution out;
  out.contributions.resize(weights.size());
  double total = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    out.contributions[i] = std::abs(weights[i] * head_scores[i]);
    total += out.contributions[i];
  }
  if (!(total > 0.0)) throw std::domain_error("head_contribution: all weighted scores are zero");
  for (double& c : out.contributions) c /= total;
  return out;
}

std::vector<double> mean_head_contribution(const WeightVector& weights, HeadScoreView sample) {
  if (sample.size() == 0) throw std::invalid_argument("mean_head_contribution: empty sample");
  std::vector<double> mean(weights.size(), 0.0);
  for (std::size_t i = 0; i < sample.size(); ++i) {
    const auto c = head_contribution(weights, sample.row(i));
    for (std::size_t h = 0; h < mean.size(); ++h) mean[h] += c.contributions[h];
  }
  for (double& m : mean) m /= static_cast<double>(sample.size());
  return mean;
}

std::vector<ContributionCurvePoint> contribution_vs_weight_curve(std::size_t head,
                                                                 std::span<const double> weights,
                                                                 const WeightVector& base,
                                                                 HeadScoreView sample) {
  if (sample.size() == 0) throw std::invalid_argument("contribution curve: empty sample");
  if (weights.empty()) throw std::invalid_argument("contribution curve: empty weight range");
  if (head >= base.size()) throw std::invalid_argument("contribution curve: head out of range");

  std::vector<ContributionCurvePoint> curve;
  curve.reserve(weights.size());
  const double n = static_cast<double>(sample.size());
  for (double w : weights) {
    const auto swept = base.with_weight(head, w);
    double sum = 0.0;
    double sum_sq = 0.0;
    for (std::size_t i = 0; i < sample.size(); ++i) {
      const double c = head_contribution(swept, sample.row(i)).contributions[head];
      sum += c;
      sum_sq += c * c;
    }
    const double mean = sum / n;
    const double var = sample.size() > 1 ? std::max(0.0, (sum_sq - n * mean * mean) / (n - 1)) : 0.0;
    curve.push_back({head, w, mean, std::sqrt(var / n)});
  }
  return curve;
}

void write_contribution_csv(std::ostream& out, std::span<const ContributionCurvePoint> curve) {
  out << "head,weight,mean_contribution,stderr\n";
  for (const auto& p : curve) {
    out << head_name(p.head) << ',' << p.weight << ',' << p.mean_contribution << ','
        << p.stderr_contribution << '\n';
  }
}

}  // namespace utiltune
