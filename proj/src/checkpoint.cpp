#include "utiltune/checkpoint.hpp"

#include <fstream>
#include <stdexcept>

#include "utiltune/errors.hpp"
#include "utiltune/hashing.hpp"

namespace utiltune {

void save_checkpoint(const std::filesystem::path& path, const ValueNet& net, std::uint64_t train_seed) {
  const auto as_vec = [](std::span<const double> s) { return std::vector<double>(s.begin(), s.end()); };
  const nlohmann::json j = {
      {"format", "utiltune-checkpoint"},
      {"version", kCheckpointVersion},
      {"net", net.config().to_json()},
      {"grid", net.grid().to_json()},
      {"grid_hash", net.grid().hash()},
      {"train_seed", train_seed},
      {"params", as_vec(net.params())},
      {"running_mean", as_vec(net.running_mean())},
      {"running_var", as_vec(net.running_var())},
  };
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out << j.dump() << '\n';
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path,
                           const std::optional<std::string>& expected_grid_hash) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read checkpoint " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
    if (j.at("format").get<std::string>() != "utiltune-checkpoint" ||
        j.at("version").get<int>() != kCheckpointVersion) {
      throw std::runtime_error("unsupported checkpoint format in " + path.string());
    }
    const auto grid = ActionGrid::from_json(j.at("grid"));
    const auto stored_hash = j.at("grid_hash").get<std::string>();
    if (stored_hash != grid.hash()) {
      throw std::runtime_error("checkpoint grid hash does not match its grid");
    }
    if (expected_grid_hash && *expected_grid_hash != stored_hash) {
      throw ConfigError("checkpoint was trained against a different action grid");
    }
    ValueNet net(NetConfig::from_json(j.at("net")), grid);
    net.set_state(j.at("params").get<std::vector<double>>(),
                  j.at("running_mean").get<std::vector<double>>(),
                  j.at("running_var").get<std::vector<double>>());
    return {std::move(net), j.at("train_seed").get<std::uint64_t>()};
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("malformed checkpoint " + path.string() + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw std::runtime_error("malformed checkpoint " + path.string() + ": " + e.what());
  }
}

std::string checkpoint_hash(const std::filesystem::path& path) { return sha256_file(path); }

}  // namespace utiltune
