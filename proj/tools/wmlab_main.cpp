#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "wmlab/config.hpp"
#include "wmlab/runner.hpp"

namespace {

int run_train(const CLI::App& sub, const std::string& config_path,
              const wmlab::ExperimentConfig& flags) {
  wmlab::ExperimentConfig cfg;
  try {
    if (!config_path.empty()) cfg = wmlab::load_config_file(config_path);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return wmlab::kExitConfigError;
  }
  if (sub.count("--suite")) cfg.suite.name = flags.suite.name;
  if (sub.count("--tasks")) cfg.suite.tasks = flags.suite.tasks;
  if (sub.count("--iters")) cfg.training.max_iters = flags.training.max_iters;
  if (sub.count("--budget"))
    cfg.training.env_step_budget = flags.training.env_step_budget;
  if (sub.count("--batch")) cfg.training.batch = flags.training.batch;
  if (sub.count("--seed")) cfg.seed = flags.seed;
  if (sub.count("--out")) cfg.out_dir = flags.out_dir;
  if (sub.count("--backbone")) cfg.model.backbone = flags.model.backbone;
  if (sub.count("--experts")) cfg.model.n_experts = flags.model.n_experts;
  if (sub.count("--latent")) cfg.model.latent_dim = flags.model.latent_dim;
  if (sub.count("--layers")) cfg.model.n_layers = flags.model.n_layers;
  if (sub.count("--sims"))
    cfg.search.n_simulations = flags.search.n_simulations;
  if (sub.count("--dps")) cfg.dps.enabled = flags.dps.enabled;
  if (sub.count("--moco")) cfg.training.moco = flags.training.moco;
  if (sub.count("--stop-when-solved"))
    cfg.training.stop_when_solved = flags.training.stop_when_solved;
  return wmlab::cmd_train(cfg);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale multitask world-model laboratory"};
  app.require_subcommand(1);

  auto* train = app.add_subcommand("train", "collect, train, evaluate");
  std::string train_config;
  wmlab::ExperimentConfig flags;
  train->add_option("--config", train_config, "config JSON to start from");
  train->add_option("--suite", flags.suite.name,
                    "task suite (chain, gridworld, bandit-cluster, "
                    "point-mass, mixed)");
  train->add_option("--tasks", flags.suite.tasks, "number of tasks");
  train->add_option("--iters", flags.training.max_iters, "max optimizer iters");
  train->add_option("--budget", flags.training.env_step_budget,
                    "env step budget");
  train->add_option("--batch", flags.training.batch, "global batch size");
  train->add_option("--seed", flags.seed, "run seed");
  train->add_option("--out", flags.out_dir, "output directory");
  train->add_option("--backbone", flags.model.backbone, "dense or moe");
  train->add_option("--experts", flags.model.n_experts, "expert count (moe)");
  train->add_option("--latent", flags.model.latent_dim, "latent width");
  train->add_option("--layers", flags.model.n_layers, "transformer blocks");
  train->add_option("--sims", flags.search.n_simulations,
                    "search simulations per move");
  train
      ->add_option_function<std::string>(
          "--dps",
          [&flags](const std::string& v) {
            if (v != "on" && v != "off")
              throw CLI::ValidationError("--dps", "expected on or off");
            flags.dps.enabled = v == "on";
          },
          "staged capacity expansion: on or off")
      ->expected(1);
  train
      ->add_option_function<std::string>(
          "--moco",
          [&flags](const std::string& v) {
            if (v != "on" && v != "off")
              throw CLI::ValidationError("--moco", "expected on or off");
            flags.training.moco = v == "on";
          },
          "gradient correction: on or off")
      ->expected(1);
  train->add_flag("--stop-when-solved", flags.training.stop_when_solved,
                  "end the run once every task clears its threshold");

  auto* theory = app.add_subcommand("theory", "check closed-form claims");
  wmlab::TheoryOptions topt;
  theory->add_option("--M", topt.n_experts, "experts per layer");
  theory->add_option("--K", topt.n_tasks, "concurrent tasks");
  theory->add_option("--trials", topt.trials, "Monte Carlo trials");
  theory->add_option("--instances", topt.instances,
                     "random instances for the bound check");
  theory->add_option("--seed", topt.seed, "seed");
  theory->add_option("--claim", topt.claim,
                     "collision | pairwise | subset | bound | specialization "
                     "| default");
  theory->add_option("--delta", topt.deltas, "routing failure rates (repeat)");
  theory->add_option("--out", topt.out_path, "report JSON path");

  auto* diagnose = app.add_subcommand("diagnose", "metrics from a checkpoint");
  wmlab::DiagnoseOptions dopt;
  bool want_plot = false;
  diagnose->add_option("--checkpoint", dopt.checkpoint, "checkpoint file")
      ->required();
  diagnose->add_option("--out", dopt.out_csv, "diagnostics CSV path");
  diagnose->add_option("--seed", dopt.seed, "fresh-data seed");
  diagnose->add_option("--episodes", dopt.episodes_per_task,
                       "episodes collected per task");
  diagnose->add_option("--batch", dopt.batch, "segments in the probe batch");
  diagnose->add_flag("--plots", want_plot, "also write an SVG chart");

  auto* replay = app.add_subcommand("replay", "re-run and byte-compare a run");
  std::string run_dir;
  replay->add_option("run_dir", run_dir, "run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? wmlab::kExitOk : wmlab::kExitConfigError;
  }

  if (train->parsed()) return run_train(*train, train_config, flags);
  if (theory->parsed()) return wmlab::cmd_theory(topt);
  if (diagnose->parsed()) {
    if (want_plot)
      dopt.plot_path =
          std::filesystem::path(dopt.out_csv).replace_extension(".svg").string();
    return wmlab::cmd_diagnose(dopt);
  }
  if (replay->parsed()) return wmlab::cmd_replay(run_dir);
  return wmlab::kExitConfigError;
}
