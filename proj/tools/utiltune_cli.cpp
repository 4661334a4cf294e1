#include <cstdint>
#include <exception>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "utiltune/harness.hpp"

namespace {

using Command = nlohmann::json (*)(const utiltune::RunConfig&);

struct Entry {
  Command fn;
  const char* help;
};

const std::map<std::string, Entry>& commands() {
  static const std::map<std::string, Entry> table{
      {"simulate", {utiltune::cmd_simulate, "Simulate uniform-exploration traffic and write the logs"}},
      {"train", {utiltune::cmd_train, "Train the two-head value network on the training days"}},
      {"sweep", {utiltune::cmd_sweep, "Sweep alpha on the holdout days and select operating points"}},
      {"ab-test", {utiltune::cmd_ab_test, "Simulated A/B test of the operating points against production"}},
      {"static-match", {utiltune::cmd_static_match, "Learned policy vs the traffic-average static weights"}},
      {"cohort", {utiltune::cmd_cohort, "Per-cohort frontiers and cohort-conditioned alpha maps"}},
      {"ablate", {utiltune::cmd_ablate, "Retrain with feature groups removed and compare frontiers"}},
      {"analyze", {utiltune::cmd_analyze, "Head contributions and engagement distributions"}},
      {"all", {utiltune::cmd_all, "Run every step in order"}}};
  return table;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Utility-weight tuning: exploration logs, value model, alpha sweep and simulated A/B tests"};
  app.require_subcommand(1, 1);

  std::string config_path;
  std::string preset = "desk";
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  app.add_option("--config", config_path, "Run config JSON layered over the preset")->check(CLI::ExistingFile);
  app.add_option("--preset", preset, "Base preset")->check(CLI::IsMember({"desk", "fidelity"}));
  app.add_option("--seed", seed, "Master seed");
  app.add_option("--out", out_dir, "Run directory");
  for (const auto& [name, entry] : commands()) {
    app.add_subcommand(name, entry.help)->fallthrough();
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    auto config = utiltune::load_run_config(
        preset, config_path.empty() ? std::nullopt : std::optional<std::filesystem::path>(config_path));
    if (seed) config.seed = *seed;
    if (!out_dir.empty()) config.out_dir = out_dir;
    const std::string name = app.get_subcommands().front()->get_name();
    const auto report = commands().at(name).fn(config);
    std::cout << report.dump(2) << '\n';
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return utiltune::exit_code_for(e);
  }
}
