#include "utiltune/trainer.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include "utiltune/checkpoint.hpp"
#include "utiltune/errors.hpp"

namespace utiltune {
namespace {

// Fisher-Yates with a multiply-shift bounded draw.
template <class T>
void shuffle_in_place(std::vector<T>& v, Xoshiro256& rng) {
  __extension__ typedef unsigned __int128 u128;
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>((static_cast<u128>(rng()) * i) >> 64);
    std::swap(v[i - 1], v[j]);
  }
}

class Adam {
 public:
  explicit Adam(std::size_t n) : m_(n, 0.0), v_(n, 0.0) {}

  void step(std::span<double> params, const std::vector<double>& grad, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      m_[k] = kBeta1 * m_[k] + (1.0 - kBeta1) * grad[k];
      v_[k] = kBeta2 * v_[k] + (1.0 - kBeta2) * grad[k] * grad[k];
      params[k] -= lr * (m_[k] / c1) / (std::sqrt(v_[k] / c2) + kEps);
    }
  }

 private:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;
  std::vector<double> m_, v_;
  std::int64_t t_ = 0;
};

}  // namespace

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("train: learning_rate must be > 0");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"learning_rate", learning_rate},
          {"batch_size", batch_size},
          {"epochs", epochs},
          {"optimizer", optimizer == Optimizer::kAdam ? "adam" : "sgd"},
          {"seed", seed},
          {"grad_clip", grad_clip}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    if (j.contains("learning_rate")) c.learning_rate = j.at("learning_rate").get<double>();
    if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<int>();
    if (j.contains("epochs")) c.epochs = j.at("epochs").get<int>();
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("grad_clip")) c.grad_clip = j.at("grad_clip").get<double>();
    if (j.contains("optimizer")) {
      const auto name = j.at("optimizer").get<std::string>();
      if (name == "adam") {
        c.optimizer = Optimizer::kAdam;
      } else if (name == "sgd") {
        c.optimizer = Optimizer::kSgd;
      } else {
        throw ConfigError("train: unknown optimizer " + name);
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

std::vector<TrainingExample> make_examples(const LogStore& logs, std::span<const std::size_t> ids) {
  std::vector<TrainingExample> out;
  out.reserve(ids.size());
  for (std::size_t id : ids) {
    const auto& r = logs.at(id);
    out.push_back({&r.features, r.action_index, static_cast<double>(r.r_repin),
                   static_cast<double>(r.r_p2p)});
  }
  return out;
}

void shuffle_rewards(std::span<TrainingExample> examples, std::uint64_t seed) {
  std::vector<std::pair<double, double>> rewards;
  rewards.reserve(examples.size());
  for (const auto& e : examples) rewards.emplace_back(e.r_repin, e.r_p2p);
  auto rng = make_stream(seed, StreamTag::kShuffle, 0x5eed);
  shuffle_in_place(rewards, rng);
  for (std::size_t i = 0; i < examples.size(); ++i) {
    examples[i].r_repin = rewards[i].first;
    examples[i].r_p2p = rewards[i].second;
  }
}

TrainResult train(ValueNet& net, std::span<const TrainingExample> data, const TrainConfig& config,
                  Exec exec) {
  config.validate();
  if (data.empty()) throw std::invalid_argument("train: training split is empty");
  for (const auto& e : data) {
    if (e.action_index >= net.grid().size()) {
      throw std::invalid_argument("train: action index outside the grid");
    }
  }
  net.initialize(config.seed);

  const std::size_t n = data.size();
  const auto bs = static_cast<std::size_t>(config.batch_size);
  std::vector<std::size_t> order(n);
  std::vector<TrainingExample> batch;
  batch.reserve(bs);
  const auto gather = [&](std::size_t begin, std::size_t end) {
    batch.clear();
    for (std::size_t i = begin; i < end; ++i) batch.push_back(data[order[i]]);
  };
  const auto fail = [&](const std::string& why) {
    if (!config.last_good_path.empty()) save_checkpoint(config.last_good_path, net, config.seed);
    throw DivergenceError(why);
  };

  TrainResult result;
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  {
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < n; b += bs) {
      gather(b, std::min(n, b + bs));
      total += net.batch_loss(batch);
      ++batches;
    }
    result.initial_loss = total / static_cast<double>(batches);
  }

  Adam adam(net.params().size());
  std::vector<double> grad;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    auto rng = make_stream(config.seed, StreamTag::kShuffle, static_cast<std::uint64_t>(epoch));
    shuffle_in_place(order, rng);

    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < n; b += bs) {
      const std::size_t end = std::min(n, b + bs);
      // A single-example batch has no batch statistics; it is skipped.
      if (end - b < 2 && n >= 2) continue;
      gather(b, end);
      double loss = 0.0;
      try {
        loss = net.loss_and_gradient(batch, &grad, exec, true);
      } catch (const DivergenceError& e) {
        fail(e.what());
      }
      if (config.grad_clip > 0.0) {
        double sq = 0.0;
        for (double g : grad) sq += g * g;
        const double norm = std::sqrt(sq);
        if (norm > config.grad_clip) {
          const double s = config.grad_clip / norm;
          for (double& g : grad) g *= s;
        }
      }
      const std::vector<double> before(net.params().begin(), net.params().end());
      if (config.optimizer == Optimizer::kAdam) {
        adam.step(net.mutable_params(), grad, config.learning_rate);
      } else {
        auto p = net.mutable_params();
        for (std::size_t k = 0; k < p.size(); ++k) p[k] -= config.learning_rate * grad[k];
      }
      for (double v : net.params()) {
        if (!std::isfinite(v)) {
          std::copy(before.begin(), before.end(), net.mutable_params().begin());
          fail("parameter became non-finite at step " + std::to_string(result.steps));
        }
      }
      total += loss;
      ++batches;
      ++result.steps;
    }
    result.epoch_loss.push_back(batches > 0 ? total / static_cast<double>(batches) : 0.0);
  }
  return result;
}

void write_loss_curve_csv(const std::filesystem::path& path, const TrainResult& result) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(17);
  out << "epoch,loss\n0," << result.initial_loss << '\n';
  for (std::size_t e = 0; e < result.epoch_loss.size(); ++e) {
    out << e + 1 << ',' << result.epoch_loss[e] << '\n';
  }
}

}  // namespace utiltune
