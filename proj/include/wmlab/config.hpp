#pragma once

#include <cstdint>
#include <string>

#include "wmlab/envs.hpp"
#include "wmlab/lora.hpp"
#include "wmlab/mcts.hpp"
#include "wmlab/model.hpp"

namespace wmlab {

// Experiment configuration: one JSON document covering every knob, strict on
// unknown keys, serialized in a canonical key order so load -> save -> load
// is byte-identical and a run directory's resolved config replays exactly.

struct SuiteSection {
  std::string name = "chain";
  int tasks = 2;
};

struct ModelSection {
  std::string backbone = "dense";  // dense | moe
  int latent_dim = 32;
  int task_embed_dim = 0;
  int n_layers = 2;
  int n_heads = 2;
  int ffn_hidden = 128;
  int expert_hidden = 64;
  int n_experts = 4;
  std::string latent_norm = "layernorm";  // layernorm | simnorm
  int simnorm_group = 8;
  double simnorm_tau = 1.0;
  int encoder_hidden = 64;
  int context_len = 5;
  int infer_context = 2;
  int support_bins = 21;
  double support_lo = -10.0;
  double support_hi = 10.0;
};

struct SearchSection {
  int n_simulations = 50;
  double c1 = 1.25;
  double c2 = 19652.0;
  double discount = 0.99;
  double dirichlet_alpha = 0.3;
  double exploration_frac = 0.25;
  int n_candidates = 8;
};

struct TrainingSection {
  int64_t env_step_budget = 20000;
  int64_t max_iters = 5000;
  int batch = 64;
  int n_step = 5;
  double lr = 1e-4;
  double weight_decay = 1e-4;
  double clip_norm = 10.0;
  double replay_ratio = 0.25;  // train steps per collected env step
  double target_ema = 0.995;
  int64_t replay_capacity = 100000;
  int eval_every = 100;  // optimizer iters between eval rounds
  int eval_episodes = 2;
  bool moco = false;
  bool stop_when_solved = false;  // end the run once every task clears its
                                  // threshold (budgeted suite runs)
};

struct DpsSection {
  bool enabled = false;
  int n_stages = 2;
  int rank = 4;
  double alpha_offset = 1.0;
  double alpha_range = 0.2;
  int64_t min_stage0_iters = 200;
  int quota = 1;
  int eval_window = 5;
  double solve_margin = 0.9;
};

struct DiagnosticsSection {
  int interval = 100;   // iters between diagnostics rows; 0 disables
  int probe_layer = -1; // -1 = last layer
  bool conflict = true; // include the moe-layer conflict column
};

struct ExperimentConfig {
  int schema_version = 1;
  uint64_t seed = 0;
  std::string out_dir = "runs/exp";
  SuiteSection suite;
  ModelSection model;
  SearchSection search;
  TrainingSection training;
  DpsSection dps;
  DiagnosticsSection diagnostics;

  void validate() const;  // std::invalid_argument on any bad value
};

// Strict parse: unknown keys, type mismatches, and out-of-range values all
// throw std::invalid_argument. Missing keys keep their defaults.
ExperimentConfig config_from_json(const std::string& text);
// Canonical serialization (full document, fixed key order, trailing newline).
std::string config_to_json(const ExperimentConfig& cfg);

ExperimentConfig load_config_file(const std::string& path);
void save_config_file(const ExperimentConfig& cfg, const std::string& path);

// Derived component configs. The model config takes per-task shapes from the
// instantiated suite.
ModelConfig to_model_config(const ExperimentConfig& cfg, const Suite& suite);
SearchConfig to_search_config(const ExperimentConfig& cfg);
DpsConfig to_dps_config(const ExperimentConfig& cfg);

}  // namespace wmlab
