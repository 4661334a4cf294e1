#include "utiltune/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "utiltune/checkpoint.hpp"
#include "utiltune/errors.hpp"
#include "utiltune/hashing.hpp"
#include "utiltune/kernels.hpp"
#include "utiltune/log_store.hpp"
#include "utiltune/ope.hpp"
#include "utiltune/rng.hpp"
#include "utiltune/utility.hpp"

namespace utiltune {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();
constexpr double kAlphaMatchTolerance = 5e-7;  // frontier CSV prints 6 decimals

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fixed6(double v) {
  if (!std::isfinite(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string exact(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string alpha_label(double alpha) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "alpha=%.4f", alpha);
  return buf;
}

fs::path in_run(const RunConfig& c, const char* name) { return c.out_dir / name; }

void ensure_out_dir(const RunConfig& c) {
  std::error_code ec;
  fs::create_directories(c.out_dir, ec);
  if (ec) throw ConfigError("cannot create output directory " + c.out_dir.string() + ": " + ec.message());
  const fs::path probe = c.out_dir / ".write_probe";
  {
    std::ofstream out(probe);
    if (!out) throw ConfigError("output directory is not writable: " + c.out_dir.string());
  }
  fs::remove(probe, ec);
}

void require_file(const RunConfig& c, const char* name, const char* producer) {
  if (!fs::exists(in_run(c, name))) {
    throw ConfigError("missing " + in_run(c, name).string() + "; run '" + producer + "' first");
  }
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

std::ofstream open_csv(const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

template <class T>
void read_key(const json& j, const char* key, T& field) {
  if (j.contains(key)) field = j.at(key).get<T>();
}

std::uint64_t sub_seed(std::uint64_t seed, StreamTag tag) { return make_stream(seed, tag, 0xC0FFEE)(); }

/// Logs, manifest and split of a run, validated against the config.
struct RunData {
  Environment env;
  ActionGrid grid;
  RunManifest manifest;
  LogStore logs;
  DatasetSplit split;
};

std::unique_ptr<RunData> load_run(const RunConfig& c) {
  require_file(c, run_files::kManifest, "simulate");
  require_file(c, run_files::kLogs, "simulate");
  RunManifest manifest = read_manifest(in_run(c, run_files::kManifest));
  const ActionGrid grid = c.grid.build();
  if (manifest.grid_hash != grid.hash()) {
    throw ConfigError("logs were produced with a different action grid than the run config");
  }
  if (manifest.env_config_hash != c.env.hash()) {
    throw ConfigError("logs were produced with a different simulator config than the run config");
  }
  LogStore logs = LogStore::read_ndjson(in_run(c, run_files::kLogs));
  DatasetSplit split = logs.temporal_split(c.train_days, c.holdout_days);
  return std::unique_ptr<RunData>(
      new RunData{Environment(c.env), grid, std::move(manifest), std::move(logs), std::move(split)});
}

ValueNet load_model(const RunConfig& c, const RunData& run) {
  require_file(c, run_files::kCheckpoint, "train");
  return load_checkpoint(in_run(c, run_files::kCheckpoint), run.manifest.grid_hash).net;
}

void require_holdout(const RunData& run) {
  if (run.split.holdout.empty()) throw NoSupportError("holdout split is empty");
}

std::size_t alpha_grid_index(const RunConfig& c, double alpha) {
  const double scaled = alpha * (c.alpha_grid_size - 1);
  const double idx = std::round(scaled);
  if (std::abs(scaled - idx) > 1e-9 || idx < 0 || idx > c.alpha_grid_size - 1) {
    throw ConfigError("alpha " + exact(alpha) + " is not on the " + std::to_string(c.alpha_grid_size) +
                      "-point alpha grid");
  }
  return static_cast<std::size_t>(idx);
}

const FrontierRow* find_row(std::span<const FrontierRow> rows, double alpha) {
  for (const auto& r : rows) {
    if (std::abs(r.alpha - alpha) <= kAlphaMatchTolerance) return &r;
  }
  return nullptr;
}

std::optional<double> governance_alpha(const json& g, const char* role) {
  if (!g.contains(role) || g.at(role).is_null()) return std::nullopt;
  return g.at(role).at("alpha").get<double>();
}

json optional_number(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

QTable subset_rows(const QTable& q, std::span<const std::size_t> rows) {
  QTable out;
  out.num_actions = q.num_actions;
  out.values.reserve(rows.size() * q.num_actions);
  for (std::size_t r : rows) {
    const auto row = q.row(r);
    out.values.insert(out.values.end(), row.begin(), row.end());
  }
  return out;
}

void write_observations(const fs::path& path, std::span<const AbObservation> obs,
                        std::span<const std::string> names) {
  auto out = open_csv(path);
  out << "arm,user_id,y_repin,y_p2p,x_repin,x_p2p\n";
  for (const auto& o : obs) {
    out << names[o.arm] << ',' << o.user_id << ',' << exact(o.y_repin) << ',' << exact(o.y_p2p) << ','
        << exact(o.x_repin) << ',' << exact(o.x_p2p) << '\n';
  }
}

// Offline lift of per-row actions against the baseline action, NaN without support.
Lift offline_lift_or_nan(std::span<const LoggedOutcome> outcomes, std::span<const std::size_t> chosen,
                         std::size_t baseline) {
  try {
    return offline_lift(reward_at_hit(outcomes, chosen), reward_at_hit_constant(outcomes, baseline));
  } catch (const NoSupportError&) {
    return {kNan, kNan, kNan, kNan};
  }
}

// Pearson over points where both series are finite; null with fewer than 3.
json correlation(std::span<const double> x, std::span<const double> y) {
  std::vector<double> xs, ys;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (std::isfinite(x[i]) && std::isfinite(y[i])) {
      xs.push_back(x[i]);
      ys.push_back(y[i]);
    }
  }
  json j{{"points", xs.size()}, {"pearson", nullptr}};
  if (xs.size() >= 3) {
    if (auto r = pearson(xs, ys)) j["pearson"] = *r;
  }
  return j;
}

ContextPolicy production_policy(const Environment& env) {
  const WeightVector w = env.production_weights();
  const WeightAction a{w[0], w[1]};
  return [a](const RequestContext&) { return a; };
}

struct TrainedVariant {
  ValueNet net;
  TrainResult result;
};

TrainedVariant train_variant(const RunConfig& c, const RunData& run, const NetConfig& net_config,
                             const fs::path& last_good) {
  if (run.split.train.empty()) throw NoSupportError("training split is empty");
  const auto examples = make_examples(run.logs, run.split.train);
  ValueNet net(net_config, run.grid);
  TrainConfig tc = c.train;
  tc.seed = c.train_seed();
  tc.last_good_path = last_good;
  TrainResult result = train(net, examples, tc);
  return {std::move(net), std::move(result)};
}

double holdout_loss(const ValueNet& net, const RunData& run) {
  const auto examples = make_examples(run.logs, run.split.holdout);
  return net.batch_loss(examples);
}

}  // namespace

// --- Configuration ----------------------------------------------------------

ActionGrid GridConfig::build() const { return build_grid(repin, p2p, k, include_baseline); }

json GridConfig::to_json() const {
  return {{"repin_range", {repin.min, repin.max}},
          {"p2p_range", {p2p.min, p2p.max}},
          {"k", k},
          {"include_baseline", include_baseline}};
}

GridConfig GridConfig::from_json(const json& j, GridConfig base) {
  try {
    if (j.contains("repin_range")) base.repin = {j.at("repin_range").at(0), j.at("repin_range").at(1)};
    if (j.contains("p2p_range")) base.p2p = {j.at("p2p_range").at(0), j.at("p2p_range").at(1)};
    read_key(j, "k", base.k);
    read_key(j, "include_baseline", base.include_baseline);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("grid config: ") + e.what());
  }
  return base;
}

std::uint64_t RunConfig::exploration_seed() const { return seed; }
std::uint64_t RunConfig::train_seed() const { return sub_seed(seed, StreamTag::kModelInit); }
std::uint64_t RunConfig::ab_seed() const { return sub_seed(seed, StreamTag::kAbSplit); }

void RunConfig::validate() const {
  env.validate();
  try {
    (void)grid.build();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("grid config: ") + e.what());
  }
  if (!grid.include_baseline) throw ConfigError("the action grid must include the production baseline");
  if (!(exploration.fraction > 0.0 && exploration.fraction <= 1.0)) {
    throw ConfigError("exploration.fraction must lie in (0, 1]");
  }
  if (exploration.requests_per_day < 1) throw ConfigError("exploration.requests_per_day must be >= 1");
  if (exploration.num_days < 1) throw ConfigError("exploration.num_days must be >= 1");
  if (train_days < 1 || holdout_days < 1) throw ConfigError("train_days and holdout_days must be >= 1");
  if (train_days + holdout_days > exploration.num_days) {
    throw ConfigError("train_days + holdout_days exceeds the simulated days");
  }
  net.validate();
  train.validate();
  if (alpha_grid_size < 2) throw ConfigError("alpha_grid_size must be >= 2");
  for (double a : ab_alphas) (void)alpha_grid_index(*this, a);
  ab.validate();
  for (const auto& [name, map] : cohort_maps) {
    if (name.empty() || name == "baseline") throw ConfigError("invalid cohort map name '" + name + "'");
    map.validate();
  }
  for (const auto& groups : ablation_groups) (void)FeatureGroups::only(groups);
  if (contribution_sample < 1) throw ConfigError("contribution_sample must be >= 1");
  if (out_dir.empty()) throw ConfigError("out_dir is empty");
}

json RunConfig::to_json() const {
  json train_j = train.to_json();
  train_j.erase("seed");
  json ab_j = ab.to_json();
  ab_j.erase("seed");
  json maps = json::object();
  for (const auto& [name, map] : cohort_maps) maps[name] = map.to_json();
  return {{"preset", preset},
          {"seed", seed},
          {"env", env.to_json()},
          {"grid", grid.to_json()},
          {"exploration",
           {{"fraction", exploration.fraction},
            {"requests_per_day", exploration.requests_per_day},
            {"num_days", exploration.num_days}}},
          {"train_days", train_days},
          {"holdout_days", holdout_days},
          {"net", net.to_json()},
          {"train", train_j},
          {"alpha_grid_size", alpha_grid_size},
          {"ab_alphas", ab_alphas},
          {"ab", ab_j},
          {"cohort_maps", maps},
          {"ablation_groups", ablation_groups},
          {"contribution_sample", contribution_sample},
          {"out_dir", out_dir.string()}};
}

RunConfig RunConfig::from_json(const json& j, RunConfig base) {
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  json merged = base.to_json();
  merged.merge_patch(j);
  RunConfig c;
  try {
    c.preset = merged.at("preset").get<std::string>();
    c.seed = merged.at("seed").get<std::uint64_t>();
    c.env = EnvConfig::from_json(merged.at("env"));
    c.grid = GridConfig::from_json(merged.at("grid"), GridConfig{});
    const auto& ex = merged.at("exploration");
    c.exploration.fraction = ex.at("fraction").get<double>();
    c.exploration.requests_per_day = ex.at("requests_per_day").get<std::int64_t>();
    c.exploration.num_days = ex.at("num_days").get<int>();
    c.train_days = merged.at("train_days").get<int>();
    c.holdout_days = merged.at("holdout_days").get<int>();
    c.net = NetConfig::from_json(merged.at("net"));
    c.train = TrainConfig::from_json(merged.at("train"));
    c.alpha_grid_size = merged.at("alpha_grid_size").get<int>();
    c.ab_alphas = merged.at("ab_alphas").get<std::vector<double>>();
    c.ab = AbConfig::from_json(merged.at("ab"));
    for (const auto& [name, m] : merged.at("cohort_maps").items()) {
      c.cohort_maps[name] = CohortAlphaMap::from_json(m);
    }
    c.ablation_groups = merged.at("ablation_groups").get<std::vector<std::vector<std::string>>>();
    c.contribution_sample = merged.at("contribution_sample").get<std::size_t>();
    c.out_dir = merged.at("out_dir").get<std::string>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("run config: ") + e.what());
  }
  c.validate();
  return c;
}

RunConfig preset_config(std::string_view name) {
  RunConfig c;
  c.preset = std::string(name);
  if (name == "desk") {
    c.exploration.fraction = 1.0;
    c.exploration.requests_per_day = 9524;
    c.out_dir = "runs/desk";
  } else if (name == "fidelity") {
    c.exploration.fraction = 0.0125;
    c.exploration.requests_per_day = 10000;
    c.out_dir = "runs/fidelity";
  } else {
    throw ConfigError("unknown preset '" + std::string(name) + "' (expected desk or fidelity)");
  }
  return c;
}

RunConfig load_run_config(std::string_view preset, const std::optional<fs::path>& file) {
  RunConfig base = preset_config(preset);
  if (!file) {
    base.validate();
    return base;
  }
  return RunConfig::from_json(read_json(*file), base);
}

// --- Helpers exposed for tests ------------------------------------------------

std::vector<int> equal_frequency_bins(std::span<const double> values, int bins) {
  if (bins < 1) throw std::invalid_argument("bins must be >= 1");
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<int> out(values.size());
  const std::size_t n = values.size();
  for (std::size_t pos = 0; pos < n; ++pos) {
    out[order[pos]] = static_cast<int>(pos * static_cast<std::size_t>(bins) / n);
  }
  return out;
}

WeightAction traffic_average_action(const ActionGrid& grid, std::span<const std::size_t> chosen) {
  if (chosen.empty()) throw NoSupportError("no contexts to average actions over");
  double r = 0.0, p = 0.0;
  for (std::size_t a : chosen) {
    r += grid.action(a).repin;
    p += grid.action(a).p2p;
  }
  const double n = static_cast<double>(chosen.size());
  return {r / n, p / n};
}

std::vector<FrontierRow> read_frontier_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  std::vector<FrontierRow> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    if (cells.size() != 8) {
      throw ConfigError(path.string() + ":" + std::to_string(line_no) + ": expected 8 columns");
    }
    FrontierRow r;
    try {
      r.alpha = std::stod(cells[0]);
      r.supported = cells[6] != "no_support";
      if (r.supported) {
        r.delta_repin_pct = std::stod(cells[1]);
        r.delta_p2p_pct = std::stod(cells[2]);
        r.hit_count = std::stoll(cells[3]);
        r.dominated = cells[6] == "true";
      } else {
        r.delta_repin_pct = kNan;
        r.delta_p2p_pct = kNan;
        r.dominated = true;
      }
    } catch (const std::logic_error&) {
      throw ConfigError(path.string() + ":" + std::to_string(line_no) + ": malformed number");
    }
    r.role = cells[7];
    rows.push_back(std::move(r));
  }
  return rows;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  if (dynamic_cast<const NoSupportError*>(&e)) return 3;
  if (dynamic_cast<const DivergenceError*>(&e)) return 4;
  return 1;
}

// --- Commands -----------------------------------------------------------------

json cmd_simulate(const RunConfig& c) {
  Stopwatch clock;
  c.validate();
  ensure_out_dir(c);
  write_json(in_run(c, run_files::kConfig), c.to_json());
  const Environment env(c.env);
  const ActionGrid grid = c.grid.build();
  ExplorationSpec spec;
  spec.num_days = c.exploration.num_days;
  spec.requests_per_day = c.exploration.requests_per_day;
  spec.fraction = c.exploration.fraction;
  spec.seed = c.exploration_seed();
  auto records = simulate_exploration(env, grid, spec, Exec::kParallel);
  LogStore logs;
  for (auto& r : records) logs.append(std::move(r));
  logs.write_ndjson(in_run(c, run_files::kLogs));

  RunManifest manifest;
  manifest.grid = grid.to_json();
  manifest.grid_hash = grid.hash();
  manifest.env_config_hash = c.env.hash();
  manifest.seed = c.seed;
  manifest.exploration_fraction = c.exploration.fraction;
  manifest.num_days = c.exploration.num_days;
  manifest.num_records = static_cast<std::int64_t>(logs.size());
  write_manifest(in_run(c, run_files::kManifest), manifest);

  return {{"command", "simulate"},
          {"requests_simulated", static_cast<std::int64_t>(spec.num_days) * spec.requests_per_day},
          {"records_logged", logs.size()},
          {"exploration_fraction", spec.fraction},
          {"logs_sha256", sha256_file(in_run(c, run_files::kLogs))},
          {"seconds", clock.seconds()}};
}

json cmd_train(const RunConfig& c) {
  Stopwatch clock;
  c.validate();
  ensure_out_dir(c);
  const auto run = load_run(c);
  auto trained = train_variant(c, *run, c.net, in_run(c, "checkpoint_last_good.json"));
  save_checkpoint(in_run(c, run_files::kCheckpoint), trained.net, c.train_seed());
  write_loss_curve_csv(in_run(c, run_files::kLossCurve), trained.result);
  json report{{"command", "train"},
              {"train_examples", run->split.train.size()},
              {"holdout_examples", run->split.holdout.size()},
              {"initial_loss", trained.result.initial_loss},
              {"epoch_loss", trained.result.epoch_loss},
              {"steps", trained.result.steps},
              {"holdout_loss", run->split.holdout.empty() ? json(nullptr) : json(holdout_loss(trained.net, *run))},
              {"checkpoint_sha256", checkpoint_hash(in_run(c, run_files::kCheckpoint))},
              {"seconds", clock.seconds()}};
  write_json(in_run(c, run_files::kTrainSummary), report);
  return report;
}

json cmd_sweep(const RunConfig& c) {
  Stopwatch clock;
  c.validate();
  ensure_out_dir(c);
  const auto run = load_run(c);
  require_holdout(*run);
  const ValueNet net = load_model(c, *run);
  const QTable q = predict_q_table(net, run->logs, run->split.holdout, Exec::kParallel);
  const auto outcomes = logged_outcomes(run->logs, run->split.holdout);
  const std::size_t baseline = run->grid.baseline_index();
  auto frontier = sweep(q, outcomes, alpha_grid(c.alpha_grid_size), baseline);
  const auto ops = select_operating_points(frontier);
  write_frontier_csv(in_run(c, run_files::kFrontier), frontier);
  json gov = governance_json(frontier, ops, reward_at_hit_constant(outcomes, baseline),
                             checkpoint_hash(in_run(c, run_files::kCheckpoint)));
  gov["holdout_records"] = run->split.holdout.size();
  gov["grid_hash"] = run->manifest.grid_hash;
  write_json(in_run(c, run_files::kGovernance), gov);
  json report = gov;
  report["command"] = "sweep";
  report["seconds"] = clock.seconds();
  return report;
}

json cmd_ab_test(const RunConfig& c) {
  Stopwatch clock;
  c.validate();
  ensure_out_dir(c);
  require_file(c, run_files::kGovernance, "sweep");
  require_file(c, run_files::kFrontier, "sweep");
  const auto run = load_run(c);
  const ValueNet net = load_model(c, *run);
  const json gov = read_json(in_run(c, run_files::kGovernance));
  const auto rows = read_frontier_csv(in_run(c, run_files::kFrontier));

  struct ArmPlan {
    std::string name;
    std::optional<double> alpha;
    std::vector<std::string> roles;
  };
  std::vector<ArmPlan> plan{{"baseline", std::nullopt, {}}, {"baseline_aa", std::nullopt, {}}};
  const auto add_alpha = [&plan](double alpha, const std::string& role) {
    for (auto& p : plan) {
      if (p.alpha && *p.alpha == alpha) {
        if (!role.empty()) p.roles.push_back(role);
        return;
      }
    }
    plan.push_back({alpha_label(alpha), alpha, role.empty() ? std::vector<std::string>{} : std::vector{role}});
  };
  const std::vector<double> grid_alphas = alpha_grid(c.alpha_grid_size);
  for (const char* role : {"repin_leaning", "balanced", "p2p_leaning"}) {
    if (auto a = governance_alpha(gov, role)) add_alpha(*a, role);
  }
  for (double a : c.ab_alphas) add_alpha(grid_alphas[alpha_grid_index(c, a)], "");

  IncidentCounter incidents;
  std::vector<std::unique_ptr<ScalarizedPolicy>> policies;
  std::vector<AbArmSpec> arms;
  std::vector<std::string> names;
  for (const auto& p : plan) {
    if (p.alpha) {
      policies.push_back(std::make_unique<ScalarizedPolicy>(net, *p.alpha, &incidents));
      arms.push_back({p.name, as_context_policy(*policies.back())});
    } else {
      arms.push_back({p.name, production_policy(run->env)});
    }
    names.push_back(p.name);
  }
  AbConfig abc = c.ab;
  abc.seed = c.ab_seed();
  const auto obs = run_ab_traffic(run->env, arms, abc, Exec::kParallel);
  write_observations(in_run(c, run_files::kAbObservations), obs, names);
  const AbReport ab = summarize_ab(obs, names, abc);

  auto csv = open_csv(in_run(c, run_files::kAbArms));
  csv << "arm,alpha,roles,offline_repin_pct,offline_p2p_pct,offline_hit_count,online_repin_pct,"
         "online_repin_se_pct,online_p2p_pct,online_p2p_se_pct,users,requests\n";
  std::vector<double> off_r, off_p, on_r, on_p;
  json arms_j = json::array();
  for (std::size_t i = 0; i < plan.size(); ++i) {
    const auto& p = plan[i];
    const auto& a = ab.arms[i];
    double o_r = kNan, o_p = kNan;
    std::int64_t hits = 0;
    if (p.alpha) {
      if (const FrontierRow* row = find_row(rows, *p.alpha); row && row->supported) {
        o_r = row->delta_repin_pct;
        o_p = row->delta_p2p_pct;
        hits = row->hit_count;
      }
      off_r.push_back(o_r);
      off_p.push_back(o_p);
      on_r.push_back(a.lift_repin_pct);
      on_p.push_back(a.lift_p2p_pct);
    }
    std::string roles;
    for (const auto& r : p.roles) roles += (roles.empty() ? "" : "|") + r;
    csv << p.name << ',' << (p.alpha ? fixed6(*p.alpha) : "") << ',' << roles << ',' << fixed6(o_r) << ','
        << fixed6(o_p) << ',' << hits << ',' << fixed6(a.lift_repin_pct) << ',' << fixed6(a.se_repin_pct) << ','
        << fixed6(a.lift_p2p_pct) << ',' << fixed6(a.se_p2p_pct) << ',' << a.stats.users << ','
        << a.stats.requests << '\n';
    arms_j.push_back({{"name", p.name},
                      {"alpha", optional_number(p.alpha)},
                      {"roles", p.roles},
                      {"offline_repin_pct", o_r},
                      {"offline_p2p_pct", o_p},
                      {"online_repin_pct", a.lift_repin_pct},
                      {"online_repin_se_pct", a.se_repin_pct},
                      {"online_p2p_pct", a.lift_p2p_pct},
                      {"online_p2p_se_pct", a.se_p2p_pct}});
  }

  // Ordering of the selected operating points.
  json ordering = nullptr;
  const auto role_arm = [&](const std::string& role) -> const ArmResult* {
    for (std::size_t i = 0; i < plan.size(); ++i) {
      if (std::find(plan[i].roles.begin(), plan[i].roles.end(), role) != plan[i].roles.end()) return &ab.arms[i];
    }
    return nullptr;
  };
  const ArmResult* rl = role_arm("repin_leaning");
  const ArmResult* bal = role_arm("balanced");
  const ArmResult* pl = role_arm("p2p_leaning");
  if (rl && bal && pl) {
    const bool repin_max = rl->lift_repin_pct >= bal->lift_repin_pct && rl->lift_repin_pct >= pl->lift_repin_pct;
    const bool p2p_max = pl->lift_p2p_pct >= bal->lift_p2p_pct && pl->lift_p2p_pct >= rl->lift_p2p_pct;
    ordering = {{"repin_leaning_has_max_repin_lift", repin_max},
                {"p2p_leaning_has_max_p2p_lift", p2p_max},
                {"reproduced", repin_max && p2p_max}};
  }
  const ArmResult& aa = ab.arm("baseline_aa");
  const bool aa_ok = std::abs(aa.lift_repin) <= 3.0 * aa.se_lift_repin && std::abs(aa.lift_p2p) <= 3.0 * aa.se_lift_p2p;

  json report{{"command", "ab-test"},
              {"config", abc.to_json()},
              {"ab", ab.to_json()},
              {"arms", arms_j},
              {"correlation", {{"repin", correlation(off_r, on_r)}, {"p2p", correlation(off_p, on_p)}}},
              {"ordering", ordering},
              {"aa_within_3se", aa_ok},
              {"incidents", incidents.count()},
              {"seconds", clock.seconds()}};
  write_json(in_run(c, run_files::kAbReport), report);
  return report;
}

json cmd_static_match(const RunConfig& c) {
  Stopwatch clock;
  c.validate();
  ensure_out_dir(c);
  require_file(c, run_files::kGovernance, "sweep");
  const auto run = load_run(c);
  require_holdout(*run);
  const ValueNet net = load_model(c, *run);
  const json gov = read_json(in_run(c, run_files::kGovernance));
  const auto alpha = governance_alpha(gov, "balanced");
  if (!alpha) throw NoSupportError("no operating point was selected; nothing to match");

  const QTable q = predict_q_table(net, run->logs, run->split.holdout, Exec::kParallel);
  const auto chosen = choose_actions(q, *alpha, Exec::kParallel);
  const WeightAction avg = traffic_average_action(run->grid, chosen);
  const WeightVector prod = run->env.production_weights();

  IncidentCounter incidents;
  const ScalarizedPolicy learned(net, *alpha, &incidents);
  const StaticPolicy matched(avg);
  const std::vector<AbArmSpec> arms{{"baseline", production_policy(run->env)},
                                    {"learned", as_context_policy(learned)},
                                    {"matched_static", as_context_policy(matched)}};
  const std::vector<std::string> names{"baseline", "learned", "matched_static"};
  AbConfig abc = c.ab;
  abc.seed = c.ab_seed();
  const auto obs = run_ab_traffic(run->env, arms, abc, Exec::kParallel);
  write_observations(in_run(c, "static_match_observations.csv"), obs, names);
  const AbReport ab = summarize_ab(obs, names, abc);

  const ArmResult& l = ab.arm("learned");
  const ArmResult& s = ab.arm("matched_static");
  const auto diff = [](double ml, double ms, double sl, double ss) {
    const double d = ml - ms;
    const double se = std::hypot(sl, ss);
    return json{{"delta", d}, {"se", se}, {"pct", 100.0 * d / ms}, {"se_pct", 100.0 * se / ms}, {"z", d / se}};
  };
  const json vs_static{
      {"repin", diff(l.stats.mean_repin, s.stats.mean_repin, l.stats.se_repin, s.stats.se_repin)},
      {"p2p", diff(l.stats.mean_p2p, s.stats.mean_p2p, l.stats.se_p2p, s.stats.se_p2p)}};

  auto csv = open_csv(in_run(c, run_files::kStaticMatch));
  csv << "arm,w_repin,w_p2p,lift_repin_pct,se_repin_pct,lift_p2p_pct,se_p2p_pct\n";
  csv << "baseline," << fixed6(prod[0]) << ',' << fixed6(prod[1]) << ",0.000000,0.000000,0.000000,0.000000\n";
  csv << "learned,,," << fixed6(l.lift_repin_pct) << ',' << fixed6(l.se_repin_pct) << ','
      << fixed6(l.lift_p2p_pct) << ',' << fixed6(l.se_p2p_pct) << '\n';
  csv << "matched_static," << fixed6(avg.repin) << ',' << fixed6(avg.p2p) << ',' << fixed6(s.lift_repin_pct)
      << ',' << fixed6(s.se_repin_pct) << ',' << fixed6(s.lift_p2p_pct) << ',' << fixed6(s.se_p2p_pct) << '\n';

  json report{{"command", "static-match"},
              {"alpha", *alpha},
              {"traffic_average_weights", {{"repin", avg.repin}, {"p2p", avg.p2p}}},
              {"production_weights", {{"repin", prod[0]}, {"p2p", prod[1]}}},
              {"holdout_contexts", chosen.size()},
              {"ab", ab.to_json()},
              {"learned_vs_static", vs_static},
              {"incidents", incidents.count()},
              {"seconds", clock.seconds()}};
  write_json(in_run(c, run_files::kStaticMatchReport), report);
  return report;
}

json cmd_cohort(const RunConfig& c) {
  Stopwatch clock;
  c.validate();
  ensure_out_dir(c);
  require_file(c, run_files::kGovernance, "sweep");
  const auto run = load_run(c);
  require_holdout(*run);
  const ValueNet net = load_model(c, *run);
  const json gov = read_json(in_run(c, run_files::kGovernance));
  const Environment& env = run->env;
  const std::size_t baseline = run->grid.baseline_index();

  const QTable q = predict_q_table(net, run->logs, run->split.holdout, Exec::kParallel);
  const auto outcomes = logged_outcomes(run->logs, run->split.holdout);
  std::array<std::vector<std::size_t>, 3> rows_of;
  std::vector<Cohort> row_cohort(run->split.holdout.size());
  for (std::size_t i = 0; i < run->split.holdout.size(); ++i) {
    row_cohort[i] = env.cohort_of_user(run->logs.at(run->split.holdout[i]).user_id);
    rows_of[static_cast<std::size_t>(row_cohort[i])].push_back(i);
  }

  // Per-cohort offline frontiers.
  const auto alphas = alpha_grid(c.alpha_grid_size);
  json cohorts_j = json::object();
  std::array<std::optional<double>, 3> role_alpha[3];  // [role][cohort]
  const char* role_names[3] = {"repin_leaning", "balanced", "p2p_leaning"};
  for (Cohort co : kAllCohorts) {
    const auto ci = static_cast<std::size_t>(co);
    const std::string name(cohort_name(co));
    std::vector<LoggedOutcome> sub;
    for (std::size_t r : rows_of[ci]) sub.push_back(outcomes[r]);
    json cj{{"holdout_records", sub.size()}};
    try {
      auto frontier = sweep(subset_rows(q, rows_of[ci]), sub, alphas, baseline);
      const auto ops = select_operating_points(frontier);
      write_frontier_csv(in_run(c, ("cohort_frontier_" + name + ".csv").c_str()), frontier);
      const std::optional<std::size_t> picks[3] = {ops.repin_leaning, ops.balanced, ops.p2p_leaning};
      for (int r = 0; r < 3; ++r) {
        if (picks[r]) role_alpha[r][ci] = frontier[*picks[r]].alpha;
        cj[role_names[r]] = optional_number(role_alpha[r][ci]);
      }
      cj["status"] = ops.any() ? "selected" : "no_non_degrading_point";
    } catch (const NoSupportError& e) {
      cj["status"] = "no_support";
      cj["detail"] = e.what();
    }
    cohorts_j[name] = cj;
  }

  // Cohort maps: configured, or one per role from the per-cohort selections.
  std::vector<std::pair<std::string, CohortAlphaMap>> maps;
  if (!c.cohort_maps.empty()) {
    for (const auto& [name, m] : c.cohort_maps) maps.emplace_back(name, m);
  } else {
    const auto global = governance_alpha(gov, "balanced");
    if (!global) throw NoSupportError("no global operating point to fill cohorts without a selection");
    maps.emplace_back("global_balanced", CohortAlphaMap::uniform(*global));
    for (int r = 0; r < 3; ++r) {
      CohortAlphaMap m;
      for (std::size_t ci = 0; ci < 3; ++ci) m.alpha[ci] = role_alpha[r][ci].value_or(*global);
      maps.emplace_back(std::string("cohort_") + role_names[r], m);
    }
  }
  // Identical maps share one arm.
  std::vector<std::pair<std::string, CohortAlphaMap>> unique_maps;
  for (const auto& [name, m] : maps) {
    auto it = std::find_if(unique_maps.begin(), unique_maps.end(),
                           [&](const auto& u) { return u.second.alpha == m.alpha; });
    if (it == unique_maps.end()) {
      unique_maps.emplace_back(name, m);
    } else {
      it->first += "|" + name;
    }
  }

  IncidentCounter incidents;
  const CohortLookup lookup = [&env](std::int64_t id) { return env.cohort_of_user(id); };
  std::vector<std::unique_ptr<CohortPolicy>> policies;
  std::vector<AbArmSpec> arms{{"baseline", production_policy(env)}};
  std::vector<std::string> names{"baseline"};
  for (const auto& [name, m] : unique_maps) {
    policies.push_back(std::make_unique<CohortPolicy>(net, m, lookup, &incidents));
    arms.push_back({name, as_context_policy(*policies.back())});
    names.push_back(name);
  }
  AbConfig abc = c.ab;
  abc.seed = c.ab_seed();
  const auto obs = run_ab_traffic(env, arms, abc, Exec::kParallel);
  write_observations(in_run(c, "cohort_observations.csv"), obs, names);

  // Online lifts per cohort and in total.
  std::array<std::optional<AbReport>, 4> online;  // CORE, CASUAL, REST, TOTAL
  json warnings = json::array();
  for (Cohort co : kAllCohorts) {
    try {
      online[static_cast<std::size_t>(co)] =
          summarize_ab(obs, names, abc, [&env, co](std::int64_t id) { return env.cohort_of_user(id) == co; });
    } catch (const NoSupportError& e) {
      warnings.push_back(std::string(cohort_name(co)) + ": " + e.what());
    }
  }
  online[3] = summarize_ab(obs, names, abc);
  for (const auto& rep : online) {
    if (!rep) continue;
    for (const auto& w : rep->warnings) warnings.push_back(w);
  }

  auto csv = open_csv(in_run(c, run_files::kCohortReport));
  csv << "arm,cohort,alpha,offline_repin_pct,offline_p2p_pct,online_repin_pct,online_repin_se_pct,"
         "online_p2p_pct,online_p2p_se_pct,users,requests\n";
  const std::array<std::string, 4> columns{"CORE", "CASUAL", "REST", "TOTAL"};
  std::array<std::vector<double>, 4> off_r, off_p, on_r, on_p;
  json arms_j = json::array();
  for (std::size_t m = 0; m < unique_maps.size(); ++m) {
    const auto& [name, map] = unique_maps[m];
    json arm_j{{"name", name}, {"map", map.to_json()}};
    for (std::size_t col = 0; col < 4; ++col) {
      std::vector<LoggedOutcome> sub;
      std::vector<std::size_t> chosen;
      for (std::size_t i = 0; i < row_cohort.size(); ++i) {
        const auto ci = static_cast<std::size_t>(row_cohort[i]);
        if (col < 3 && ci != col) continue;
        sub.push_back(outcomes[i]);
        chosen.push_back(argmax_scalarized(q.row(i), map.alpha[ci]));
      }
      const Lift off = offline_lift_or_nan(sub, chosen, baseline);
      double o_r = kNan, o_p = kNan, se_r = kNan, se_p = kNan;
      std::int64_t users = 0, requests = 0;
      if (online[col]) {
        const ArmResult& a = online[col]->arms[m + 1];
        o_r = a.lift_repin_pct;
        o_p = a.lift_p2p_pct;
        se_r = a.se_repin_pct;
        se_p = a.se_p2p_pct;
        users = a.stats.users;
        requests = a.stats.requests;
      }
      off_r[col].push_back(off.pct_repin);
      off_p[col].push_back(off.pct_p2p);
      on_r[col].push_back(o_r);
      on_p[col].push_back(o_p);
      csv << name << ',' << columns[col] << ',' << (col < 3 ? fixed6(map.alpha[col]) : "") << ','
          << fixed6(off.pct_repin) << ',' << fixed6(off.pct_p2p) << ',' << fixed6(o_r) << ',' << fixed6(se_r)
          << ',' << fixed6(o_p) << ',' << fixed6(se_p) << ',' << users << ',' << requests << '\n';
      arm_j[columns[col]] = {{"offline_repin_pct", off.pct_repin},
                             {"offline_p2p_pct", off.pct_p2p},
                             {"online_repin_pct", o_r},
                             {"online_repin_se_pct", se_r},
                             {"online_p2p_pct", o_p},
                             {"online_p2p_se_pct", se_p}};
    }
    arms_j.push_back(arm_j);
  }
  json corr = json::object();
  for (std::size_t col = 0; col < 4; ++col) {
    corr[columns[col]] = {{"repin", correlation(off_r[col], on_r[col])},
                          {"p2p", correlation(off_p[col], on_p[col])}};
  }

  json report{{"command", "cohort"},
              {"cohorts", cohorts_j},
              {"arms", arms_j},
              {"correlation", corr},
              {"warnings", warnings},
              {"incidents", incidents.count()},
              {"seconds", clock.seconds()}};
  write_json(in_run(c, run_files::kCohortJson), report);
  return report;
}

json cmd_ablate(const RunConfig& c) {
  Stopwatch clock;
  c.validate();
  ensure_out_dir(c);
  const auto run = load_run(c);
  require_holdout(*run);
  const auto outcomes = logged_outcomes(run->logs, run->split.holdout);
  const std::size_t baseline = run->grid.baseline_index();
  const auto alphas = alpha_grid(c.alpha_grid_size);

  std::vector<FeatureGroups> variants{FeatureGroups{}};
  for (const auto& g : c.ablation_groups) variants.push_back(FeatureGroups::only(g));

  auto csv = open_csv(in_run(c, run_files::kAblationFrontiers));
  csv << "variant,alpha,delta_repin_pct,delta_p2p_pct,hit_count,dominated,selected_role\n";
  json variants_j = json::array();
  std::vector<Point2> full_points;
  for (std::size_t v = 0; v < variants.size(); ++v) {
    NetConfig nc = c.net;
    nc.groups = variants[v];
    const std::string label = variants[v].label();
    auto trained = train_variant(c, *run, nc, {});
    const QTable q = predict_q_table(trained.net, run->logs, run->split.holdout, Exec::kParallel);
    auto frontier = sweep(q, outcomes, alphas, baseline);
    const auto ops = select_operating_points(frontier);

    std::vector<Point2> points;
    for (const auto& p : frontier) {
      csv << label << ',' << fixed6(p.alpha) << ',';
      if (p.estimate.supported) {
        csv << fixed6(p.lift.pct_repin) << ',' << fixed6(p.lift.pct_p2p) << ',' << p.estimate.hit_count << ','
            << (p.dominated ? "true" : "false");
        if (!p.dominated) points.push_back({p.lift.pct_repin, p.lift.pct_p2p});
      } else {
        csv << "nan,nan,0,no_support";
      }
      csv << ',' << p.role << '\n';
    }
    if (v == 0) full_points = points;
    // Share of this variant's non-dominated points weakly dominated by a full-feature point.
    std::size_t covered = 0;
    for (const auto& p : points) {
      const bool dom = std::any_of(full_points.begin(), full_points.end(),
                                   [&](const Point2& f) { return f.x >= p.x && f.y >= p.y; });
      covered += dom ? 1 : 0;
    }
    const auto pick = [&](const std::optional<std::size_t>& k) -> json {
      if (!k) return nullptr;
      return {{"alpha", frontier[*k].alpha},
              {"delta_repin_pct", frontier[*k].lift.pct_repin},
              {"delta_p2p_pct", frontier[*k].lift.pct_p2p}};
    };
    variants_j.push_back(
        {{"variant", label},
         {"final_train_loss", trained.result.epoch_loss.empty() ? json(nullptr) : json(trained.result.epoch_loss.back())},
         {"holdout_loss", holdout_loss(trained.net, *run)},
         {"non_dominated_points", points.size()},
         {"weakly_dominated_by_full", points.empty() ? json(nullptr)
                                                     : json(static_cast<double>(covered) / points.size())},
         {"repin_leaning", pick(ops.repin_leaning)},
         {"balanced", pick(ops.balanced)},
         {"p2p_leaning", pick(ops.p2p_leaning)}});
  }
  json report{{"command", "ablate"},
              {"train_seed", c.train_seed()},
              {"epochs", c.train.epochs},
              {"variants", variants_j},
              {"seconds", clock.seconds()}};
  write_json(in_run(c, run_files::kAblationReport), report);
  return report;
}

json cmd_analyze(const RunConfig& c) {
  Stopwatch clock;
  c.validate();
  ensure_out_dir(c);
  const auto run = load_run(c);
  if (run->logs.empty()) throw NoSupportError("logs are empty");

  const WeightVector prod = run->env.production_weights();
  const auto scores = sample_item_scores(run->env, c.contribution_sample, sub_seed(c.seed, StreamTag::kCalibration));
  const HeadScoreView sample{scores, kNumHeads};
  const auto bars = mean_head_contribution(prod, sample);
  {
    auto csv = open_csv(in_run(c, run_files::kContributionBars));
    csv << "head,weight,mean_contribution\n";
    for (std::size_t h = 0; h < kNumHeads; ++h) {
      csv << head_name(h) << ',' << fixed6(prod[h]) << ',' << fixed6(bars[h]) << '\n';
    }
  }
  {
    std::vector<double> w_p2p, w_repin;
    for (int w = 1; w <= 30; ++w) w_p2p.push_back(w);
    for (int w = 10; w <= 200; w += 10) w_repin.push_back(w);
    auto csv = open_csv(in_run(c, run_files::kContributionCurve));
    const auto curve_p2p = contribution_vs_weight_curve(static_cast<std::size_t>(Head::kP2p), w_p2p, prod, sample);
    const auto curve_repin =
        contribution_vs_weight_curve(static_cast<std::size_t>(Head::kRepin), w_repin, prod, sample);
    std::vector<ContributionCurvePoint> all(curve_repin);
    all.insert(all.end(), curve_p2p.begin(), curve_p2p.end());
    write_contribution_csv(csv, all);
  }

  std::vector<double> n_repin, n_p2p;
  for (const auto& r : run->logs.read_all()) {
    n_repin.push_back(static_cast<double>(r.n_repin));
    n_p2p.push_back(static_cast<double>(r.n_p2p));
  }
  const auto le1 = [](const std::vector<double>& v) {
    return static_cast<double>(std::count_if(v.begin(), v.end(), [](double x) { return x <= 1.0; })) /
           static_cast<double>(v.size());
  };
  auto csv = open_csv(in_run(c, run_files::kDeciles));
  csv << "objective,decile,count,min,max,mean\n";
  for (const auto& [name, values] : {std::pair{"repin", &n_repin}, std::pair{"p2p", &n_p2p}}) {
    const auto bins = equal_frequency_bins(*values, 10);
    for (int b = 0; b < 10; ++b) {
      double lo = std::numeric_limits<double>::infinity(), hi = -lo, sum = 0.0;
      std::int64_t count = 0;
      for (std::size_t i = 0; i < values->size(); ++i) {
        if (bins[i] != b) continue;
        const double x = (*values)[i];
        lo = std::min(lo, x);
        hi = std::max(hi, x);
        sum += x;
        ++count;
      }
      csv << name << ',' << b + 1 << ',' << count << ',' << fixed6(count ? lo : kNan) << ','
          << fixed6(count ? hi : kNan) << ',' << fixed6(count ? sum / count : kNan) << '\n';
    }
  }

  json report{{"command", "analyze"},
              {"records", run->logs.size()},
              {"fraction_le1_repin", le1(n_repin)},
              {"fraction_le1_p2p", le1(n_p2p)},
              {"contribution_share_repin_p2p", bars[0] + bars[1]},
              {"mean_head_contribution", bars},
              {"seconds", clock.seconds()}};
  write_json(in_run(c, run_files::kAnalyzeReport), report);
  return report;
}

json cmd_all(const RunConfig& c) {
  Stopwatch clock;
  json steps = json::array();
  const std::pair<const char*, json (*)(const RunConfig&)> pipeline[] = {
      {"simulate", cmd_simulate}, {"train", cmd_train},   {"sweep", cmd_sweep},     {"ab-test", cmd_ab_test},
      {"static-match", cmd_static_match}, {"cohort", cmd_cohort}, {"ablate", cmd_ablate}, {"analyze", cmd_analyze}};
  json incidents = json::object();
  for (const auto& [name, fn] : pipeline) {
    const json r = fn(c);
    steps.push_back({{"command", name}, {"seconds", r.at("seconds")}});
    if (r.contains("incidents")) incidents[name] = r.at("incidents");
  }
  json report{{"command", "all"},
              {"config", c.to_json()},
              {"steps", steps},
              {"incidents", incidents},
              {"outputs",
               {run_files::kFrontier, run_files::kGovernance, run_files::kAbArms, run_files::kAbReport,
                run_files::kStaticMatch, run_files::kStaticMatchReport, run_files::kCohortReport,
                run_files::kCohortJson, run_files::kAblationFrontiers, run_files::kAblationReport,
                run_files::kContributionBars, run_files::kContributionCurve, run_files::kDeciles,
                run_files::kAnalyzeReport}},
              {"seconds", clock.seconds()}};
  write_json(in_run(c, run_files::kReport), report);
  return report;
}

}  // namespace utiltune
