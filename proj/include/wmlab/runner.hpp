#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "wmlab/config.hpp"

namespace wmlab {

// process exit codes shared by every subcommand
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfigError = 1;
inline constexpr int kExitVerification = 2;
inline constexpr int kExitRuntime = 3;

// What a finished training run looked like. Everything here is also written
// to the run directory; the struct exists so tests can assert on a run
// without re-parsing its artifacts.
struct TrainSummary {
  std::string run_dir;
  int64_t iters = 0;
  int64_t env_steps = 0;

  std::vector<double> final_eval;         // mean return, last eval per task
  std::vector<double> best_eval;          // best eval seen per task
  std::vector<int64_t> solved_at_env_step;  // -1 if never past threshold

  // staged-capacity bookkeeping (zeros / empty when staging is off)
  int final_stage = 0;
  int stage_transitions = 0;
  double stage_delta_max = 0.0;  // max |output change| across any transition
  double alpha_min = 1.0;        // effective adapter scale extrema observed
  double alpha_max = 1.0;

  // routing diagnostics (empty for dense backbones)
  std::vector<double> initial_entropy_bits;  // per task, first full window
  std::vector<double> final_entropy_bits;    // per task, last window

  // max pairwise gradient conflict on the probed layer, sampled at the
  // diagnostics interval; quartile mean is over the last quarter of training
  std::vector<std::pair<int64_t, double>> conflict_series;
  double conflict_last_quartile = 0.0;
  bool conflict_sampled = false;
};

// Runs the full loop: collect with search, train from replay, evaluate,
// advance capacity stages, stream metrics/diagnostics to cfg.out_dir.
// Throws std::invalid_argument for bad configs, std::runtime_error for
// verification failures mid-run (frozen-weight drift and the like).
TrainSummary run_training(const ExperimentConfig& cfg);

int cmd_train(const ExperimentConfig& cfg);

// Re-runs a finished run from its resolved config and byte-compares the
// fresh metrics.csv against the recorded one.
int cmd_replay(const std::string& run_dir);

struct TheoryOptions {
  int n_experts = 8;
  int n_tasks = 8;
  int64_t trials = 100000;
  int64_t instances = 1000;
  uint64_t seed = 0;
  // which claim to check: collision | pairwise | subset | bound |
  // specialization | default (= everything but specialization)
  std::string claim = "default";
  std::vector<double> deltas = {0.0, 0.01, 0.05};
  std::string out_path = "theory_report.json";
};
int cmd_theory(const TheoryOptions& opt);

struct DiagnoseOptions {
  std::string checkpoint;
  std::string out_csv = "diagnostics.csv";
  std::string plot_path;  // empty = no plot
  uint64_t seed = 0;
  int episodes_per_task = 1;
  int batch = 16;
};
int cmd_diagnose(const DiagnoseOptions& opt);

}  // namespace wmlab
