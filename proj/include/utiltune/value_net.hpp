#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "utiltune/action_space.hpp"
#include "utiltune/env_sim.hpp"
#include "utiltune/parallel.hpp"

namespace utiltune {

enum class NormMode { kBatch, kStandardize };

std::string_view norm_mode_name(NormMode m);
NormMode norm_mode_from_name(std::string_view name);

/// Input feature groups. A disabled group is fed as zeros.
struct FeatureGroups {
  bool user = true;
  bool history = true;
  bool context = true;

  // Parses names from {"user", "history", "context"}; throws ConfigError on
  // unknown or empty lists.
  static FeatureGroups only(std::span<const std::string> names);
  std::string label() const;
  friend bool operator==(const FeatureGroups&, const FeatureGroups&) = default;
};

struct NetConfig {
  int item_dim = 16;
  int user_dim = 16;
  int max_history = 16;
  int d_cat = 4;
  int d_model = 16;
  int attention_blocks = 1;
  int d_state = 32;
  int d_action = 8;
  int d_hidden = 32;
  int backbone_layers = 3;
  FeatureGroups groups;
  NormMode norm = NormMode::kBatch;

  void validate() const;  // throws ConfigError
  nlohmann::json to_json() const;
  static NetConfig from_json(const nlohmann::json& j);
};

inline constexpr int kNumHourBuckets = 6;
inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

/// Offset and shape of one tensor inside the flat parameter vector.
struct TensorRef {
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 1;
  std::size_t size() const { return rows * cols; }
};

struct AttentionRefs {
  TensorRef wq, bq, wk, bk, wv, bv, wo, bo;
};

struct BackboneRefs {
  TensorRef gamma, beta, w, b;
};

struct ParamLayout {
  TensorRef emb_device, emb_surface, emb_hour, emb_history_action, emb_age;
  TensorRef tok_w, tok_b, position, null_history;
  std::vector<AttentionRefs> attention;
  TensorRef state_w, state_b;
  TensorRef action_w, action_b;
  std::vector<BackboneRefs> backbone;
  TensorRef head_repin_w, head_repin_b, head_p2p_w, head_p2p_b;
  std::size_t total = 0;
  std::size_t bn_total = 0;  // running-statistic entries across backbone layers
  std::vector<std::size_t> bn_offset;
  std::vector<std::size_t> bn_width;

  static ParamLayout build(const NetConfig& config);
};

struct ValuePair {
  double q_repin = 0.0;
  double q_p2p = 0.0;
};

/// One training tuple; the context is borrowed from the log store.
struct TrainingExample {
  const RequestContext* context = nullptr;
  std::size_t action_index = 0;
  double r_repin = 0.0;
  double r_p2p = 0.0;
};

/// Two-head action-value network. State is encoded once per context; the
/// action grid is part of the model because inputs are normalised to it.
class ValueNet {
 public:
  ValueNet(NetConfig config, ActionGrid grid);

  const NetConfig& config() const { return config_; }
  const ActionGrid& grid() const { return grid_; }
  const ParamLayout& layout() const { return layout_; }

  std::span<const double> params() const { return params_; }
  std::span<double> mutable_params() { return params_; }
  std::span<const double> running_mean() const { return running_mean_; }
  std::span<const double> running_var() const { return running_var_; }
  void set_state(std::vector<double> params, std::vector<double> running_mean,
                 std::vector<double> running_var);

  void initialize(std::uint64_t seed);

  // Pooled-history + user + context through the state MLP. Throws
  // std::invalid_argument on out-of-vocabulary categorical values or
  // mismatched dimensions.
  std::vector<double> encode_state(const RequestContext& context) const;
  std::vector<double> encode_action(const WeightAction& action) const;

  // Inference mode (running normalisation statistics).
  ValuePair forward(const RequestContext& context, std::size_t action_index) const;
  std::vector<ValuePair> predict_all_actions(const RequestContext& context) const;

  // Training-mode loss (1/N) sum[(q_p2p - r_p2p)^2 + (q_repin - r_repin)^2].
  // When `grad` is non-null it receives the analytic gradient (resized to
  // params().size()). Running statistics are updated only if requested.
  double loss_and_gradient(std::span<const TrainingExample> batch, std::vector<double>* grad,
                           Exec exec = Exec::kParallel, bool update_running_stats = false);
  double batch_loss(std::span<const TrainingExample> batch) const;

 private:
  NetConfig config_;
  ActionGrid grid_;
  ParamLayout layout_;
  std::vector<double> params_;
  std::vector<double> running_mean_;
  std::vector<double> running_var_;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t coordinates = 0;
  std::size_t worst_index = 0;
};

// Central finite differences (4-point stencil, step h) on `coordinates`
// random parameter indices; relative error uses max(|a|, |n|, 1e-6).
GradCheckResult finite_difference_check(ValueNet& net, std::span<const TrainingExample> batch,
                                        std::size_t coordinates, std::uint64_t seed,
                                        double h = 1e-5);

// Mean-squared loss on already computed predictions, same normalisation as the
// training objective. Throws std::invalid_argument on an empty batch.
double mse_loss(std::span<const ValuePair> predictions, std::span<const TrainingExample> batch);

}  // namespace utiltune
