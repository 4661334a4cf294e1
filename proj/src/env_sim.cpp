#include "utiltune/env_sim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

#include "utiltune/errors.hpp"
#include "utiltune/hashing.hpp"
#include "utiltune/parallel.hpp"

namespace utiltune {
namespace {

constexpr double kEmbeddingQuantum = 1e-3;
constexpr double kUserEmbeddingScale = 2.0;
constexpr double kUserEmbeddingNoise = 0.3;
constexpr double kHistoryItemNoise = 0.2;
constexpr double kTopicSpread = 0.5;

double quantize(double x) { return std::round(x / kEmbeddingQuantum) * kEmbeddingQuantum; }

// Uniform integer in [lo, hi].
int uniform_int(Xoshiro256& rng, int lo, int hi) {
  __extension__ typedef unsigned __int128 u128;
  const auto span = static_cast<std::uint64_t>(hi - lo + 1);
  return lo + static_cast<int>((static_cast<u128>(rng()) * span) >> 64);
}

template <std::size_t N>
std::size_t categorical(Xoshiro256& rng, const std::array<double, N>& probs) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t i = 0; i + 1 < N; ++i) {
    acc += probs[i];
    if (u < acc) return i;
  }
  return N - 1;
}

std::size_t categorical(Xoshiro256& rng, std::span<const double> probs) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t i = 0; i + 1 < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return i;
  }
  return probs.size() - 1;
}

std::size_t cohort_index(Cohort c) { return static_cast<std::size_t>(c); }

// Mass on the repin archetypes: the first half of the preference simplex.
double repin_archetype_mass(std::span<const double> latent) {
  const std::size_t half = latent.size() / 2;
  return std::accumulate(latent.begin(), latent.begin() + static_cast<std::ptrdiff_t>(half), 0.0);
}

std::vector<double> user_projection(const EnvConfig& config) {
  auto rng = make_stream(config.seed, StreamTag::kEnvTables, 0);
  std::normal_distribution<double> normal;
  std::vector<double> proj(static_cast<std::size_t>(config.user_dim * config.pref_dim));
  for (double& v : proj) v = normal(rng);
  return proj;
}

template <class T>
void read_if(const nlohmann::json& j, const char* key, T& field) {
  if (j.contains(key)) field = j.at(key).get<T>();
}

}  // namespace

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

std::string_view cohort_name(Cohort c) {
  switch (c) {
    case Cohort::kCore: return "CORE";
    case Cohort::kCasual: return "CASUAL";
    case Cohort::kRest: return "REST";
  }
  return "UNKNOWN";
}

Cohort cohort_from_name(std::string_view name) {
  for (Cohort c : kAllCohorts) {
    if (cohort_name(c) == name) return c;
  }
  throw std::invalid_argument("unknown cohort: " + std::string(name));
}

Cohort cohort_of(int days_active, int days_saved) {
  if (days_saved >= 4) return Cohort::kCore;
  if (days_active >= 4) return Cohort::kCasual;
  return Cohort::kRest;
}

std::string_view device_name(DeviceType d) {
  switch (d) {
    case DeviceType::kIos: return "ios";
    case DeviceType::kAndroid: return "android";
    case DeviceType::kWeb: return "web";
  }
  return "unknown";
}

DeviceType device_from_name(std::string_view name) {
  if (name == "ios") return DeviceType::kIos;
  if (name == "android") return DeviceType::kAndroid;
  if (name == "web") return DeviceType::kWeb;
  throw std::invalid_argument("unknown device_type: " + std::string(name));
}

std::string_view surface_name(Surface) { return "homefeed"; }

Surface surface_from_name(std::string_view name) {
  if (name == "homefeed") return Surface::kHomefeed;
  throw std::invalid_argument("unknown surface: " + std::string(name));
}

std::string_view history_action_name(HistoryAction a) {
  switch (a) {
    case HistoryAction::kRepin: return "repin";
    case HistoryAction::kClick: return "click";
    case HistoryAction::kImpression: return "impression";
  }
  return "unknown";
}

HistoryAction history_action_from_name(std::string_view name) {
  if (name == "repin") return HistoryAction::kRepin;
  if (name == "click") return HistoryAction::kClick;
  if (name == "impression") return HistoryAction::kImpression;
  throw std::invalid_argument("unknown action_type: " + std::string(name));
}

// --- EnvConfig -------------------------------------------------------------

void EnvConfig::validate() const {
  if (num_users <= 0) throw ConfigError("env: num_users must be positive");
  if (top_k < 1) throw ConfigError("env: top_k must be >= 1");
  if (candidates_per_request < top_k) throw ConfigError("env: candidates_per_request < top_k");
  if (num_heads != static_cast<int>(kNumHeads)) throw ConfigError("env: num_heads must be 5");
  if (pref_dim < 2 || pref_dim % 2 != 0) throw ConfigError("env: pref_dim must be even and >= 2");
  if (user_dim < 1 || item_dim < 1 || max_history < 0 || topics_per_archetype < 1) {
    throw ConfigError("env: dimensions must be positive");
  }
  if (!(heterogeneity_strength >= 0.0)) throw ConfigError("env: heterogeneity_strength < 0");
  double mix = 0.0;
  for (double p : cohort_mix) {
    if (p < 0.0) throw ConfigError("env: negative cohort_mix entry");
    mix += p;
  }
  if (std::abs(mix - 1.0) > 1e-9) throw ConfigError("env: cohort_mix must sum to 1");
  for (const auto& c : preference_concentration) {
    if (!(c[0] > 0.0) || !(c[1] > 0.0)) throw ConfigError("env: concentrations must be positive");
  }
  for (const auto& s : head_scales) {
    if (!(s.logit_sd > 0.0)) throw ConfigError("env: head logit_sd must be positive");
  }
  if (!(engagement.affinity_log_sd >= 0.0)) throw ConfigError("env: affinity_log_sd < 0");
  if (std::abs(engagement.quality_correlation) >= 1.0) {
    throw ConfigError("env: quality_correlation must lie in (-1, 1)");
  }
}

nlohmann::json EnvConfig::to_json() const {
  nlohmann::json scales = nlohmann::json::array();
  for (const auto& s : head_scales) scales.push_back({s.logit_mean, s.logit_sd});
  const auto& e = engagement;
  return {
      {"num_users", num_users},
      {"candidates_per_request", candidates_per_request},
      {"top_k", top_k},
      {"num_heads", num_heads},
      {"seed", seed},
      {"heterogeneity_strength", heterogeneity_strength},
      {"pref_dim", pref_dim},
      {"user_dim", user_dim},
      {"item_dim", item_dim},
      {"max_history", max_history},
      {"topics_per_archetype", topics_per_archetype},
      {"cohort_mix", cohort_mix},
      {"preference_concentration", preference_concentration},
      {"head_scales", scales},
      {"production_weights", production_weights},
      {"engagement",
       {{"base_logit_repin", e.base_logit_repin},
        {"base_logit_p2p", e.base_logit_p2p},
        {"archetype_offset", e.archetype_offset},
        {"score_slope", e.score_slope},
        {"hide_penalty", e.hide_penalty},
        {"topic_match", e.topic_match},
        {"item_noise", e.item_noise},
        {"quality_correlation", e.quality_correlation},
        {"device_repin", e.device_repin},
        {"device_p2p", e.device_p2p},
        {"evening_repin", e.evening_repin},
        {"affinity_log_mean_repin", e.affinity_log_mean_repin},
        {"affinity_log_mean_p2p", e.affinity_log_mean_p2p},
        {"affinity_log_sd", e.affinity_log_sd}}},
  };
}

EnvConfig EnvConfig::from_json(const nlohmann::json& j) {
  EnvConfig c;
  try {
    read_if(j, "num_users", c.num_users);
    read_if(j, "candidates_per_request", c.candidates_per_request);
    read_if(j, "top_k", c.top_k);
    read_if(j, "num_heads", c.num_heads);
    read_if(j, "seed", c.seed);
    read_if(j, "heterogeneity_strength", c.heterogeneity_strength);
    read_if(j, "pref_dim", c.pref_dim);
    read_if(j, "user_dim", c.user_dim);
    read_if(j, "item_dim", c.item_dim);
    read_if(j, "max_history", c.max_history);
    read_if(j, "topics_per_archetype", c.topics_per_archetype);
    read_if(j, "cohort_mix", c.cohort_mix);
    read_if(j, "preference_concentration", c.preference_concentration);
    read_if(j, "production_weights", c.production_weights);
    if (j.contains("head_scales")) {
      const auto& hs = j.at("head_scales");
      if (hs.size() != kNumHeads) throw ConfigError("env: head_scales needs 5 entries");
      for (std::size_t i = 0; i < kNumHeads; ++i) {
        c.head_scales[i] = {hs.at(i).at(0).get<double>(), hs.at(i).at(1).get<double>()};
      }
    }
    if (j.contains("engagement")) {
      const auto& ej = j.at("engagement");
      auto& e = c.engagement;
      read_if(ej, "base_logit_repin", e.base_logit_repin);
      read_if(ej, "base_logit_p2p", e.base_logit_p2p);
      read_if(ej, "archetype_offset", e.archetype_offset);
      read_if(ej, "score_slope", e.score_slope);
      read_if(ej, "hide_penalty", e.hide_penalty);
      read_if(ej, "topic_match", e.topic_match);
      read_if(ej, "item_noise", e.item_noise);
      read_if(ej, "quality_correlation", e.quality_correlation);
      read_if(ej, "device_repin", e.device_repin);
      read_if(ej, "device_p2p", e.device_p2p);
      read_if(ej, "evening_repin", e.evening_repin);
      read_if(ej, "affinity_log_mean_repin", e.affinity_log_mean_repin);
      read_if(ej, "affinity_log_mean_p2p", e.affinity_log_mean_p2p);
      read_if(ej, "affinity_log_sd", e.affinity_log_sd);
    }
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError(std::string("env config: ") + ex.what());
  }
  c.validate();
  return c;
}

std::string EnvConfig::hash() const { return sha256_hex(to_json().dump()); }

// --- Population ------------------------------------------------------------

std::vector<UserProfile> generate_population(const EnvConfig& config) {
  config.validate();
  const auto proj = user_projection(config);
  const auto pref_dim = static_cast<std::size_t>(config.pref_dim);
  const auto user_dim = static_cast<std::size_t>(config.user_dim);
  const auto& eng = config.engagement;

  std::vector<UserProfile> users(static_cast<std::size_t>(config.num_users));
  for (std::size_t id = 0; id < users.size(); ++id) {
    auto rng = make_stream(config.seed, StreamTag::kPopulation, id);
    UserProfile& u = users[id];
    u.user_id = static_cast<std::int64_t>(id);

    const auto cohort = static_cast<Cohort>(categorical(rng, config.cohort_mix));
    switch (cohort) {
      case Cohort::kCore:
        u.days_saved = uniform_int(rng, 4, 28);
        u.days_active = uniform_int(rng, u.days_saved, 28);
        break;
      case Cohort::kCasual:
        u.days_active = uniform_int(rng, 4, 28);
        u.days_saved = uniform_int(rng, 0, 3);
        break;
      case Cohort::kRest:
        u.days_active = uniform_int(rng, 0, 3);
        u.days_saved = uniform_int(rng, 0, u.days_active);
        break;
    }

    const auto& conc = config.preference_concentration[cohort_index(cohort)];
    u.latent_preference.resize(pref_dim);
    double total = 0.0;
    for (std::size_t k = 0; k < pref_dim; ++k) {
      std::gamma_distribution<double> gamma(k < pref_dim / 2 ? conc[0] : conc[1], 1.0);
      u.latent_preference[k] = gamma(rng);
      total += u.latent_preference[k];
    }
    for (double& p : u.latent_preference) {
      p = total > 0.0 ? p / total : 1.0 / static_cast<double>(pref_dim);
    }

    std::normal_distribution<double> normal;
    const double log_r = eng.affinity_log_mean_repin[cohort_index(cohort)] +
                         eng.affinity_log_sd * normal(rng);
    const double log_p = eng.affinity_log_mean_p2p[cohort_index(cohort)] +
                         eng.affinity_log_sd * normal(rng);
    u.affinity_repin = std::min(1.0, std::exp(log_r));
    u.affinity_p2p = std::min(1.0, std::exp(log_p));

    auto noise_rng = make_stream(config.seed, StreamTag::kUserEmbedding, id);
    std::normal_distribution<double> noise(0.0, kUserEmbeddingNoise);
    u.user_embedding.resize(user_dim);
    for (std::size_t r = 0; r < user_dim; ++r) {
      double v = 0.0;
      for (std::size_t k = 0; k < pref_dim; ++k) v += proj[r * pref_dim + k] * u.latent_preference[k];
      u.user_embedding[r] = quantize(kUserEmbeddingScale * v + noise(noise_rng));
    }
  }
  return users;
}

// --- CandidateSet ----------------------------------------------------------

CandidateItem CandidateSet::item(std::size_t i) const {
  if (i >= count) throw std::out_of_range("candidate index");
  CandidateItem out;
  if (topic_embeddings != nullptr) {
    out.item_embedding = std::span<const double>(*topic_embeddings)
                             .subspan(static_cast<std::size_t>(topic[i]) * item_dim,
                                      static_cast<std::size_t>(item_dim));
  }
  out.head_scores = heads().row(i);
  out.true_engagement_prob = {true_prob_repin[i], true_prob_p2p[i]};
  return out;
}

void CandidateSet::resize(std::size_t n) {
  count = n;
  head_scores.resize(n * kNumHeads);
  true_prob_repin.resize(n);
  true_prob_p2p.resize(n);
  topic.resize(n);
}

// --- Environment -----------------------------------------------------------

Environment::Environment(EnvConfig config) : config_(std::move(config)) {
  config_.validate();
  population_ = generate_population(config_);

  auto rng = make_stream(config_.seed, StreamTag::kEnvTables, 1);
  std::normal_distribution<double> normal;
  const auto item_dim = static_cast<std::size_t>(config_.item_dim);
  const auto pref_dim = static_cast<std::size_t>(config_.pref_dim);
  std::vector<double> centers(pref_dim * item_dim);
  for (double& c : centers) c = normal(rng);
  topic_embeddings_.resize(num_topics() * item_dim);
  for (std::size_t t = 0; t < num_topics(); ++t) {
    const std::size_t archetype = t / static_cast<std::size_t>(config_.topics_per_archetype);
    for (std::size_t d = 0; d < item_dim; ++d) {
      topic_embeddings_[t * item_dim + d] =
          quantize(centers[archetype * item_dim + d] + kTopicSpread * normal(rng));
    }
  }
}

std::size_t Environment::num_topics() const {
  return static_cast<std::size_t>(config_.pref_dim * config_.topics_per_archetype);
}

const UserProfile& Environment::user(std::int64_t user_id) const {
  if (user_id < 0 || static_cast<std::size_t>(user_id) >= population_.size()) {
    throw std::out_of_range("unknown user_id " + std::to_string(user_id));
  }
  return population_[static_cast<std::size_t>(user_id)];
}

WeightVector Environment::production_weights() const {
  return WeightVector({config_.production_weights.begin(), config_.production_weights.end()});
}

std::span<const double> Environment::topic_embedding(std::size_t topic) const {
  const auto d = static_cast<std::size_t>(config_.item_dim);
  return std::span<const double>(topic_embeddings_).subspan(topic * d, d);
}

Request Environment::sample_request(int day_index, Xoshiro256& rng) const {
  __extension__ typedef unsigned __int128 u128;
  const auto idx = static_cast<std::size_t>((static_cast<u128>(rng()) * population_.size()) >> 64);
  return sample_request_for(population_[idx], day_index, rng);
}

Request Environment::sample_request_for(const UserProfile& user, int day_index,
                                        Xoshiro256& rng) const {
  Request req;
  req.context = sample_context(user, day_index, rng);
  sample_candidates(user, req.context, rng, req.candidates);
  return req;
}

RequestContext Environment::sample_context(const UserProfile& user, int day_index,
                                           Xoshiro256& rng) const {
  if (day_index < 0) throw std::invalid_argument("day_index must be >= 0");
  RequestContext ctx;
  ctx.user_id = user.user_id;
  ctx.day_index = day_index;
  ctx.user_embedding = user.user_embedding;
  ctx.item_dim = config_.item_dim;

  const int n = config_.max_history;
  int length = 0;
  switch (user.cohort()) {
    case Cohort::kCore: length = uniform_int(rng, (5 * n) / 8, n); break;
    case Cohort::kCasual: length = uniform_int(rng, n / 4, n); break;
    case Cohort::kRest: length = uniform_int(rng, 0, (3 * n) / 8); break;
  }

  const auto item_dim = static_cast<std::size_t>(config_.item_dim);
  const auto half = static_cast<std::size_t>(config_.pref_dim / 2);
  static constexpr std::array<double, 3> kRepinArchetypeActions{0.5, 0.2, 0.3};
  static constexpr std::array<double, 3> kP2pArchetypeActions{0.1, 0.4, 0.5};
  std::normal_distribution<double> normal(0.0, kHistoryItemNoise);

  ctx.history_items.resize(static_cast<std::size_t>(length) * item_dim);
  ctx.history_actions.resize(static_cast<std::size_t>(length));
  ctx.history_age.resize(static_cast<std::size_t>(length));
  for (std::size_t i = 0; i < static_cast<std::size_t>(length); ++i) {
    const std::size_t archetype = categorical(rng, user.latent_preference);
    const auto topic = archetype * static_cast<std::size_t>(config_.topics_per_archetype) +
                       static_cast<std::size_t>(uniform_int(rng, 0, config_.topics_per_archetype - 1));
    const auto centroid = topic_embedding(topic);
    for (std::size_t d = 0; d < item_dim; ++d) {
      ctx.history_items[i * item_dim + d] = quantize(centroid[d] + normal(rng));
    }
    ctx.history_actions[i] = static_cast<HistoryAction>(
        categorical(rng, archetype < half ? kRepinArchetypeActions : kP2pArchetypeActions));
    ctx.history_age[i] = static_cast<std::uint8_t>(uniform_int(rng, 0, kNumAgeBuckets - 1));
  }

  static constexpr std::array<double, kNumDevices> kDeviceMix{0.45, 0.35, 0.2};
  ctx.device = static_cast<DeviceType>(categorical(rng, kDeviceMix));
  ctx.surface = Surface::kHomefeed;
  ctx.hour_of_day = uniform_int(rng, 0, 23);
  return ctx;
}

void Environment::sample_candidates(const UserProfile& user, const RequestContext& context,
                                    Xoshiro256& rng, CandidateSet& out) const {
  const auto n = static_cast<std::size_t>(config_.candidates_per_request);
  out.resize(n);
  out.topic_embeddings = &topic_embeddings_;
  out.item_dim = config_.item_dim;

  const auto& e = config_.engagement;
  const double eta = config_.heterogeneity_strength;
  const double tilt = 2.0 * repin_archetype_mass(user.latent_preference) - 1.0;
  const auto device = static_cast<std::size_t>(context.device);
  const double evening = context.hour_of_day >= 18 ? e.evening_repin : 0.0;
  const double offset_repin = e.base_logit_repin + eta * e.archetype_offset * tilt +
                              e.device_repin[device] + evening;
  const double offset_p2p = e.base_logit_p2p - eta * e.archetype_offset * tilt + e.device_p2p[device];
  const double slope_repin = e.score_slope * (1.0 + eta * tilt);
  const double slope_p2p = e.score_slope * (1.0 - eta * tilt);
  const double rho = e.quality_correlation;
  const double rho_c = std::sqrt(1.0 - rho * rho);

  const std::size_t topics = num_topics();
  const auto pref_dim = static_cast<double>(config_.pref_dim);
  std::vector<double> topic_term(topics);
  for (std::size_t t = 0; t < topics; ++t) {
    const auto archetype = t / static_cast<std::size_t>(config_.topics_per_archetype);
    topic_term[t] = eta * e.topic_match * (user.latent_preference[archetype] - 1.0 / pref_dim);
  }

  const auto& hs = config_.head_scales;
  std::normal_distribution<double> normal;
  __extension__ typedef unsigned __int128 u128;
  for (std::size_t i = 0; i < n; ++i) {
    const double q_repin = normal(rng);
    const double q_p2p = rho * q_repin + rho_c * normal(rng);
    const double q_click = 0.6 * q_p2p + 0.8 * normal(rng);
    const double q_closeup = 0.6 * q_repin + 0.8 * normal(rng);
    const double q_hide = normal(rng);
    const auto topic = static_cast<std::size_t>((static_cast<u128>(rng()) * topics) >> 64);

    double* h = &out.head_scores[i * kNumHeads];
    h[0] = sigmoid(hs[0].logit_mean + hs[0].logit_sd * q_repin);
    h[1] = sigmoid(hs[1].logit_mean + hs[1].logit_sd * q_p2p);
    h[2] = sigmoid(hs[2].logit_mean + hs[2].logit_sd * q_click);
    h[3] = sigmoid(hs[3].logit_mean + hs[3].logit_sd * q_closeup);
    h[4] = sigmoid(hs[4].logit_mean + hs[4].logit_sd * q_hide);

    const double shared = -e.hide_penalty * q_hide + topic_term[topic];
    out.true_prob_repin[i] =
        sigmoid(offset_repin + slope_repin * q_repin + shared + e.item_noise * normal(rng));
    out.true_prob_p2p[i] =
        sigmoid(offset_p2p + slope_p2p * q_p2p + shared + e.item_noise * normal(rng));
    out.topic[i] = static_cast<std::uint16_t>(topic);
  }
}

std::vector<std::size_t> Environment::serve(const CandidateSet& candidates,
                                            const WeightAction& action) const {
  thread_local std::vector<double> utilities;
  std::vector<std::size_t> order;
  rank_top_k_into(production_weights().with_action(action), candidates.heads(),
                  static_cast<std::size_t>(config_.top_k), utilities, order);
  return order;
}

EngagementCounts Environment::simulate_engagement(const CandidateSet& candidates,
                                                  std::span<const std::size_t> served,
                                                  const UserProfile& user, Xoshiro256& rng) const {
  if (served.size() != static_cast<std::size_t>(config_.top_k)) {
    throw std::invalid_argument("simulate_engagement: served list length must equal top_k");
  }
  EngagementCounts counts;
  for (std::size_t idx : served) {
    if (rng.uniform() < user.affinity_repin * candidates.true_prob_repin.at(idx)) ++counts.n_repin;
    if (rng.uniform() < user.affinity_p2p * candidates.true_prob_p2p.at(idx)) ++counts.n_p2p;
  }
  return counts;
}

ExpectedReward Environment::expected_clipped_reward(const CandidateSet& candidates,
                                                    std::span<const std::size_t> served,
                                                    const UserProfile& user) const {
  double none_repin = 1.0;
  double none_p2p = 1.0;
  for (std::size_t idx : served) {
    none_repin *= 1.0 - user.affinity_repin * candidates.true_prob_repin.at(idx);
    none_p2p *= 1.0 - user.affinity_p2p * candidates.true_prob_p2p.at(idx);
  }
  return {1.0 - none_repin, 1.0 - none_p2p};
}

// --- Oracles and calibration ----------------------------------------------

PolicyValue true_policy_value(const Environment& env, const ContextPolicy& policy,
                              std::int64_t num_requests, std::uint64_t seed) {
  if (num_requests <= 0) throw std::invalid_argument("true_policy_value: num_requests <= 0");
  const auto n = static_cast<std::size_t>(num_requests);
  std::vector<ExpectedReward> per_request(n);
  parallel_for(n, Exec::kParallel, [&](std::size_t i) {
    auto rng = make_stream(seed, StreamTag::kOracle, 0, i);
    const Request req = env.sample_request(0, rng);
    const auto served = env.serve(req.candidates, policy(req.context));
    per_request[i] = env.expected_clipped_reward(req.candidates, served, env.user(req.context.user_id));
  });

  double sum_r = 0.0, sum_p = 0.0, sq_r = 0.0, sq_p = 0.0;
  for (const auto& r : per_request) {
    sum_r += r.repin;
    sum_p += r.p2p;
    sq_r += r.repin * r.repin;
    sq_p += r.p2p * r.p2p;
  }
  const double nd = static_cast<double>(n);
  PolicyValue v;
  v.num_requests = num_requests;
  v.mean_repin = sum_r / nd;
  v.mean_p2p = sum_p / nd;
  if (n > 1) {
    v.se_repin = std::sqrt(std::max(0.0, (sq_r - nd * v.mean_repin * v.mean_repin) / (nd - 1)) / nd);
    v.se_p2p = std::sqrt(std::max(0.0, (sq_p - nd * v.mean_p2p * v.mean_p2p) / (nd - 1)) / nd);
  }
  return v;
}

std::vector<double> sample_item_scores(const Environment& env, std::size_t num_items,
                                       std::uint64_t seed) {
  std::vector<double> scores;
  scores.reserve(num_items * kNumHeads);
  CandidateSet cands;
  for (std::uint64_t r = 0; scores.size() < num_items * kNumHeads; ++r) {
    auto rng = make_stream(seed, StreamTag::kCalibration, r);
    const Request req = env.sample_request(0, rng);
    const std::size_t take = std::min(req.candidates.count, num_items - scores.size() / kNumHeads);
    scores.insert(scores.end(), req.candidates.head_scores.begin(),
                  req.candidates.head_scores.begin() + static_cast<std::ptrdiff_t>(take * kNumHeads));
  }
  return scores;
}

double calibrate_other_head_scale(const EnvConfig& config, double target_share,
                                  std::size_t num_items) {
  if (!(target_share > 0.0 && target_share < 1.0)) {
    throw std::invalid_argument("calibration target share must lie in (0, 1)");
  }
  EnvConfig small = config;
  small.num_users = std::min<std::int64_t>(config.num_users, 2000);
  const Environment env(small);
  const auto scores = sample_item_scores(env, num_items, config.seed);
  const HeadScoreView view{scores, kNumHeads};
  const auto& w = config.production_weights;

  const auto share = [&](double scale) {
    double acc = 0.0;
    for (std::size_t i = 0; i < view.size(); ++i) {
      const auto h = view.row(i);
      const double controlled = std::abs(w[0] * h[0]) + std::abs(w[1] * h[1]);
      double other = 0.0;
      for (std::size_t k = 2; k < kNumHeads; ++k) other += std::abs(w[k] * h[k]);
      acc += controlled / (controlled + scale * other);
    }
    return acc / static_cast<double>(view.size());
  };

  double lo = std::log(1e-3);
  double hi = std::log(1e3);
  for (int it = 0; it < 80; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (share(std::exp(mid)) > target_share) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return std::exp(0.5 * (lo + hi));
}

}  // namespace utiltune
