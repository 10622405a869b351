#include <iostream>

#include <CLI11.hpp>

#include "dadt/cli/commands.hpp"
#include "dadt/cli/log.hpp"
#include "dadt/errors.hpp"

namespace {

int run(const std::string& command, const dadt::cli::ConfigSources& sources, int networks) {
  using namespace dadt::cli;
  const ExperimentConfig config = load_config(sources);
  if (command == "train") cmd_train(config);
  else if (command == "attack") cmd_attack(config);
  else if (command == "edit") cmd_edit(config);
  else if (command == "purify") cmd_purify(config);
  else if (command == "evaluate") cmd_evaluate(config);
  else if (command == "reproduce") cmd_reproduce(config);
  else if (command == "gradcheck") return cmd_gradcheck(config, networks) ? 0 : 1;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarial attacks and purification on toy diffusion models"};
  app.require_subcommand(1);

  dadt::cli::ConfigSources sources;
  std::string config_path, out;
  std::uint64_t seed = 0;
  int workers = 0, networks = 20;

  const char* names[][2] = {
      {"train", "train the pixel diffusion model, autoencoder and latent denoiser"},
      {"attack", "run PGD over the input set for each configured budget"},
      {"edit", "SDEdit the input set"},
      {"purify", "purify the input set with the configured method"},
      {"evaluate", "metrics of candidate sets against the reference set"},
      {"reproduce", "attack, purification and ablation tables end to end"},
      {"gradcheck", "reverse mode against finite differences on random networks"},
  };
  for (const auto& [name, help] : names) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "experiment config (JSON)")->check(CLI::ExistingFile);
    sub->add_option("--set", sources.overrides, "override a config key: key.path=value (repeatable)");
    sub->add_option("--out", out, "output directory");
    sub->add_option("--seed", seed, "global seed");
    sub->add_option("--workers", workers, "worker threads (0: logical processors)")->check(CLI::NonNegativeNumber);
    if (std::string(name) == "gradcheck")
      sub->add_option("--networks", networks, "number of random networks")->check(CLI::PositiveNumber);
  }

  CLI11_PARSE(app, argc, argv);

  const CLI::App* chosen = app.get_subcommands().front();
  if (chosen->count("--config")) sources.file = config_path;
  if (chosen->count("--out")) sources.output = out;
  if (chosen->count("--seed")) sources.seed = seed;
  if (chosen->count("--workers")) sources.workers = workers;

  try {
    return run(chosen->get_name(), sources, networks);
  } catch (const dadt::Error& e) {
    dadt::cli::log().error("{}", e.what());
  } catch (const std::exception& e) {
    dadt::cli::log().error("unexpected failure: {}", e.what());
  }
  return 1;
}
