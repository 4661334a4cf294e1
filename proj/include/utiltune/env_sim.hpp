#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "utiltune/action_space.hpp"
#include "utiltune/rng.hpp"
#include "utiltune/utility.hpp"

namespace utiltune {

enum class Cohort : std::uint8_t { kCore = 0, kCasual = 1, kRest = 2 };
inline constexpr std::array<Cohort, 3> kAllCohorts{Cohort::kCore, Cohort::kCasual, Cohort::kRest};

std::string_view cohort_name(Cohort c);
Cohort cohort_from_name(std::string_view name);
// CORE: saved on >= 4 of the last 28 days; CASUAL: active on >= 4 days; REST otherwise.
Cohort cohort_of(int days_active, int days_saved);

enum class DeviceType : std::uint8_t { kIos = 0, kAndroid = 1, kWeb = 2 };
enum class Surface : std::uint8_t { kHomefeed = 0 };
enum class HistoryAction : std::uint8_t { kRepin = 0, kClick = 1, kImpression = 2 };
inline constexpr std::size_t kNumDevices = 3;
inline constexpr std::size_t kNumSurfaces = 1;
inline constexpr std::size_t kNumHistoryActions = 3;
inline constexpr int kNumAgeBuckets = 8;

std::string_view device_name(DeviceType d);
DeviceType device_from_name(std::string_view name);
std::string_view surface_name(Surface s);
Surface surface_from_name(std::string_view name);
std::string_view history_action_name(HistoryAction a);
HistoryAction history_action_from_name(std::string_view name);

struct HeadScale {
  double logit_mean = 0.0;
  double logit_sd = 1.0;
};

/// Ground-truth engagement model. Per-item probability for objective x:
///   sigmoid(base_x + eta*a*(2<pref, archetype_x> - 1) + b*(1 + eta*(2<pref, archetype_x> - 1))*q_x
///           - hide_penalty*q_hide + eta*topic_match*(pref[topic archetype] - 1/d) + context_x + noise)
/// where q_x is the standardised ranker logit of head x and eta is the
/// heterogeneity strength. Request counts are Bernoulli sums over the served
/// items with probabilities scaled by the user's per-objective affinity.
struct EngagementParams {
  double base_logit_repin = -6.0;
  double base_logit_p2p = -6.0;
  double archetype_offset = 0.8;
  double score_slope = 1.0;
  double hide_penalty = 0.3;
  double topic_match = 1.0;
  double item_noise = 0.5;
  double quality_correlation = -0.3;
  std::array<double, kNumDevices> device_repin{0.1, 0.0, -0.1};
  std::array<double, kNumDevices> device_p2p{0.0, 0.0, 0.2};
  double evening_repin = 0.1;
  // Log-normal affinity (clipped at 1) per cohort: CORE, CASUAL, REST.
  std::array<double, 3> affinity_log_mean_repin{-0.4, -0.8, -1.2};
  std::array<double, 3> affinity_log_mean_p2p{-1.1, -0.9, -1.3};
  double affinity_log_sd = 0.9;
};

struct EnvConfig {
  std::int64_t num_users = 10000;
  int candidates_per_request = 2000;
  int top_k = 25;
  int num_heads = static_cast<int>(kNumHeads);
  std::uint64_t seed = 7;
  double heterogeneity_strength = 0.9;

  int pref_dim = 8;
  int user_dim = 16;
  int item_dim = 16;
  int max_history = 16;
  int topics_per_archetype = 4;

  std::array<double, 3> cohort_mix{0.2, 0.5, 0.3};
  // Dirichlet concentration of (repin-archetype, p2p-archetype) mass per cohort.
  std::array<std::array<double, 2>, 3> preference_concentration{{{0.6, 0.25}, {0.3, 0.5}, {0.4, 0.4}}};

  std::array<HeadScale, kNumHeads> head_scales{
      {{-4.0, 0.6}, {-2.93, 1.6}, {-3.5, 0.6}, {-3.5, 0.6}, {-5.0, 0.6}}};
  // Static production utility weights; entries 0 and 1 are the controlled pair.
  std::array<double, kNumHeads> production_weights{91.6, 9.1, 3.04, 2.03, -12.16};
  EngagementParams engagement;

  void validate() const;  // throws ConfigError
  nlohmann::json to_json() const;
  // Missing keys keep their defaults.
  static EnvConfig from_json(const nlohmann::json& j);
  std::string hash() const;
};

struct UserProfile {
  std::int64_t user_id = 0;
  std::vector<double> latent_preference;
  std::vector<double> user_embedding;
  int days_active = 0;
  int days_saved = 0;
  double affinity_repin = 1.0;
  double affinity_p2p = 1.0;

  Cohort cohort() const { return cohort_of(days_active, days_saved); }
};

/// Serving-time state of one request. History is stored flat: entry i owns
/// history_items[i*item_dim, (i+1)*item_dim).
struct RequestContext {
  std::int64_t user_id = 0;
  int day_index = 0;
  std::vector<double> user_embedding;
  int item_dim = 0;
  std::vector<double> history_items;
  std::vector<HistoryAction> history_actions;
  std::vector<std::uint8_t> history_age;
  DeviceType device = DeviceType::kIos;
  Surface surface = Surface::kHomefeed;
  int hour_of_day = 0;

  std::size_t history_size() const { return history_actions.size(); }
  std::span<const double> history_item(std::size_t i) const {
    return std::span<const double>(history_items)
        .subspan(i * static_cast<std::size_t>(item_dim), static_cast<std::size_t>(item_dim));
  }

  friend bool operator==(const RequestContext&, const RequestContext&) = default;
};

struct CandidateItem {
  std::span<const double> item_embedding;
  std::span<const double> head_scores;
  std::array<double, 2> true_engagement_prob{};  // repin, p2p
};

/// Candidates of one request in struct-of-arrays form. Item embeddings are
/// the centroid of the item's topic.
struct CandidateSet {
  std::size_t count = 0;
  std::vector<double> head_scores;  // count x kNumHeads
  std::vector<double> true_prob_repin;
  std::vector<double> true_prob_p2p;
  std::vector<std::uint16_t> topic;
  const std::vector<double>* topic_embeddings = nullptr;
  int item_dim = 0;

  HeadScoreView heads() const { return {head_scores, kNumHeads}; }
  CandidateItem item(std::size_t i) const;
  void resize(std::size_t n);
};

struct Request {
  RequestContext context;
  CandidateSet candidates;
};

struct EngagementCounts {
  std::int64_t n_repin = 0;
  std::int64_t n_p2p = 0;
};

struct ExpectedReward {
  double repin = 0.0;
  double p2p = 0.0;
};

struct PolicyValue {
  double mean_repin = 0.0;
  double mean_p2p = 0.0;
  double se_repin = 0.0;
  double se_p2p = 0.0;
  std::int64_t num_requests = 0;
};

// Request context -> weight action. Must be safe to call concurrently.
using ContextPolicy = std::function<WeightAction(const RequestContext&)>;

std::vector<UserProfile> generate_population(const EnvConfig& config);

class Environment {
 public:
  explicit Environment(EnvConfig config);

  const EnvConfig& config() const { return config_; }
  std::span<const UserProfile> population() const { return population_; }
  const UserProfile& user(std::int64_t user_id) const;
  Cohort cohort_of_user(std::int64_t user_id) const { return user(user_id).cohort(); }
  WeightVector production_weights() const;
  std::span<const double> topic_embedding(std::size_t topic) const;
  std::size_t num_topics() const;

  // Uniformly random user, then context and candidates.
  Request sample_request(int day_index, Xoshiro256& rng) const;
  Request sample_request_for(const UserProfile& user, int day_index, Xoshiro256& rng) const;
  RequestContext sample_context(const UserProfile& user, int day_index, Xoshiro256& rng) const;
  void sample_candidates(const UserProfile& user, const RequestContext& context, Xoshiro256& rng,
                         CandidateSet& out) const;

  // Throws std::invalid_argument unless served.size() == top_k.
  EngagementCounts simulate_engagement(const CandidateSet& candidates,
                                       std::span<const std::size_t> served,
                                       const UserProfile& user, Xoshiro256& rng) const;
  // E[min(n, 1)] for each objective given the served list.
  ExpectedReward expected_clipped_reward(const CandidateSet& candidates,
                                         std::span<const std::size_t> served,
                                         const UserProfile& user) const;

  // Serve top-k under `action` (other heads at production weights).
  std::vector<std::size_t> serve(const CandidateSet& candidates, const WeightAction& action) const;

 private:
  EnvConfig config_;
  std::vector<UserProfile> population_;
  std::vector<double> topic_embeddings_;  // num_topics x item_dim
};

/// Ground-truth value of a policy on fresh traffic. Each request contributes
/// the exact conditional expectation of its clipped rewards given the served
/// list, which is an unbiased, lower-variance Monte Carlo estimate of E[r | pi].
PolicyValue true_policy_value(const Environment& env, const ContextPolicy& policy,
                              std::int64_t num_requests, std::uint64_t seed);

// Ranker scores of `num_items` candidates drawn from random requests.
std::vector<double> sample_item_scores(const Environment& env, std::size_t num_items,
                                       std::uint64_t seed);

// Multiplier on the uncontrolled production weights so that repin + p2p
// carry `target_share` of the mean utility contribution (bisection).
double calibrate_other_head_scale(const EnvConfig& config, double target_share,
                                  std::size_t num_items = 20000);

double sigmoid(double x);

}  // namespace utiltune
