#include "wmlab/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <vector>

#include "json.hpp"

namespace wmlab {

namespace {

using json = nlohmann::ordered_json;

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument("config: " + msg);
}

void expect_keys(const json& j, const std::vector<const char*>& keys,
                 const char* where) {
  require(j.is_object(), std::string(where) + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find_if(keys.begin(), keys.end(), [&](const char* k) {
          return it.key() == k;
        }) == keys.end())
      throw std::invalid_argument("config: unknown key " + std::string(where) +
                                  "." + it.key());
  }
}

template <typename T>
void get_if(const json& j, const char* key, T& out) {
  if (j.contains(key)) j.at(key).get_to(out);
}

void parse_suite(const json& j, SuiteSection& s) {
  expect_keys(j, {"name", "tasks"}, "suite");
  get_if(j, "name", s.name);
  get_if(j, "tasks", s.tasks);
}

void parse_model(const json& j, ModelSection& m) {
  expect_keys(j,
              {"backbone", "latent_dim", "task_embed_dim", "n_layers",
               "n_heads", "ffn_hidden", "expert_hidden", "n_experts",
               "latent_norm", "simnorm_group", "simnorm_tau", "encoder_hidden",
               "context_len", "infer_context", "support_bins", "support_lo",
               "support_hi"},
              "model");
  get_if(j, "backbone", m.backbone);
  get_if(j, "latent_dim", m.latent_dim);
  get_if(j, "task_embed_dim", m.task_embed_dim);
  get_if(j, "n_layers", m.n_layers);
  get_if(j, "n_heads", m.n_heads);
  get_if(j, "ffn_hidden", m.ffn_hidden);
  get_if(j, "expert_hidden", m.expert_hidden);
  get_if(j, "n_experts", m.n_experts);
  get_if(j, "latent_norm", m.latent_norm);
  get_if(j, "simnorm_group", m.simnorm_group);
  get_if(j, "simnorm_tau", m.simnorm_tau);
  get_if(j, "encoder_hidden", m.encoder_hidden);
  get_if(j, "context_len", m.context_len);
  get_if(j, "infer_context", m.infer_context);
  get_if(j, "support_bins", m.support_bins);
  get_if(j, "support_lo", m.support_lo);
  get_if(j, "support_hi", m.support_hi);
}

void parse_search(const json& j, SearchSection& s) {
  expect_keys(j,
              {"n_simulations", "c1", "c2", "discount", "dirichlet_alpha",
               "exploration_frac", "n_candidates"},
              "search");
  get_if(j, "n_simulations", s.n_simulations);
  get_if(j, "c1", s.c1);
  get_if(j, "c2", s.c2);
  get_if(j, "discount", s.discount);
  get_if(j, "dirichlet_alpha", s.dirichlet_alpha);
  get_if(j, "exploration_frac", s.exploration_frac);
  get_if(j, "n_candidates", s.n_candidates);
}

void parse_training(const json& j, TrainingSection& t) {
  expect_keys(j,
              {"env_step_budget", "max_iters", "batch", "n_step", "lr",
               "weight_decay", "clip_norm", "replay_ratio", "target_ema",
               "replay_capacity", "eval_every", "eval_episodes", "moco",
               "stop_when_solved"},
              "training");
  get_if(j, "env_step_budget", t.env_step_budget);
  get_if(j, "max_iters", t.max_iters);
  get_if(j, "batch", t.batch);
  get_if(j, "n_step", t.n_step);
  get_if(j, "lr", t.lr);
  get_if(j, "weight_decay", t.weight_decay);
  get_if(j, "clip_norm", t.clip_norm);
  get_if(j, "replay_ratio", t.replay_ratio);
  get_if(j, "target_ema", t.target_ema);
  get_if(j, "replay_capacity", t.replay_capacity);
  get_if(j, "eval_every", t.eval_every);
  get_if(j, "eval_episodes", t.eval_episodes);
  get_if(j, "moco", t.moco);
  get_if(j, "stop_when_solved", t.stop_when_solved);
}

void parse_dps(const json& j, DpsSection& d) {
  expect_keys(j,
              {"enabled", "n_stages", "rank", "alpha_offset", "alpha_range",
               "min_stage0_iters", "quota", "eval_window", "solve_margin"},
              "dps");
  get_if(j, "enabled", d.enabled);
  get_if(j, "n_stages", d.n_stages);
  get_if(j, "rank", d.rank);
  get_if(j, "alpha_offset", d.alpha_offset);
  get_if(j, "alpha_range", d.alpha_range);
  get_if(j, "min_stage0_iters", d.min_stage0_iters);
  get_if(j, "quota", d.quota);
  get_if(j, "eval_window", d.eval_window);
  get_if(j, "solve_margin", d.solve_margin);
}

void parse_diagnostics(const json& j, DiagnosticsSection& d) {
  expect_keys(j, {"interval", "probe_layer", "conflict"}, "diagnostics");
  get_if(j, "interval", d.interval);
  get_if(j, "probe_layer", d.probe_layer);
  get_if(j, "conflict", d.conflict);
}

}  // namespace

void ExperimentConfig::validate() const {
  require(schema_version == 1, "unsupported schema_version");
  require(!suite.name.empty(), "suite.name is empty");
  require(suite.tasks >= 1, "suite.tasks must be >= 1");

  require(model.backbone == "dense" || model.backbone == "moe",
          "model.backbone must be dense or moe");
  require(model.latent_norm == "layernorm" || model.latent_norm == "simnorm",
          "model.latent_norm must be layernorm or simnorm");
  require(model.latent_dim >= 1 && model.n_layers >= 1 && model.n_heads >= 1,
          "model dims must be positive");
  require(model.latent_dim % model.n_heads == 0,
          "model.latent_dim must be divisible by n_heads");
  require(model.ffn_hidden >= 1 && model.expert_hidden >= 1 &&
              model.encoder_hidden >= 1,
          "hidden widths must be positive");
  require(model.n_experts >= 1 || model.backbone == "dense",
          "model.n_experts must be >= 1 for the moe backbone");
  require(model.task_embed_dim >= 0, "model.task_embed_dim must be >= 0");
  require(model.latent_norm != "simnorm" ||
              (model.simnorm_group >= 1 &&
               model.latent_dim % model.simnorm_group == 0),
          "model.simnorm_group must divide latent_dim");
  require(model.simnorm_tau > 0.0, "model.simnorm_tau must be positive");
  require(model.context_len >= 1 && model.infer_context >= 1,
          "context lengths must be >= 1");
  require(model.support_bins >= 2, "model.support_bins must be >= 2");
  require(model.support_lo < model.support_hi,
          "model.support_lo must be below support_hi");

  require(search.n_simulations >= 1, "search.n_simulations must be >= 1");
  require(search.c1 > 0.0 && search.c2 > 0.0, "search.c1/c2 must be positive");
  require(search.discount > 0.0 && search.discount <= 1.0,
          "search.discount must be in (0, 1]");
  require(search.dirichlet_alpha > 0.0,
          "search.dirichlet_alpha must be positive");
  require(search.exploration_frac >= 0.0 && search.exploration_frac <= 1.0,
          "search.exploration_frac must be in [0, 1]");
  require(search.n_candidates >= 1, "search.n_candidates must be >= 1");

  require(training.env_step_budget >= 1, "training.env_step_budget must be >= 1");
  require(training.max_iters >= 1, "training.max_iters must be >= 1");
  require(training.batch >= 1, "training.batch must be >= 1");
  require(training.n_step >= 1, "training.n_step must be >= 1");
  require(training.lr > 0.0, "training.lr must be positive");
  require(training.weight_decay >= 0.0, "training.weight_decay must be >= 0");
  require(training.clip_norm > 0.0, "training.clip_norm must be positive");
  require(training.replay_ratio > 0.0, "training.replay_ratio must be positive");
  require(training.target_ema > 0.0 && training.target_ema <= 1.0,
          "training.target_ema must be in (0, 1]");
  require(training.replay_capacity >= 1,
          "training.replay_capacity must be >= 1");
  require(training.eval_every >= 1, "training.eval_every must be >= 1");
  require(training.eval_episodes >= 1, "training.eval_episodes must be >= 1");

  require(dps.n_stages >= 1, "dps.n_stages must be >= 1");
  require(dps.rank >= 1, "dps.rank must be >= 1");
  require(dps.alpha_range >= 0.0, "dps.alpha_range must be >= 0");
  require(dps.min_stage0_iters >= 0, "dps.min_stage0_iters must be >= 0");
  require(dps.quota >= 1, "dps.quota must be >= 1");
  require(dps.eval_window >= 1, "dps.eval_window must be >= 1");
  require(dps.solve_margin > 0.0 && dps.solve_margin <= 1.0,
          "dps.solve_margin must be in (0, 1]");

  require(diagnostics.interval >= 0, "diagnostics.interval must be >= 0");
  require(diagnostics.probe_layer >= -1 &&
              diagnostics.probe_layer < model.n_layers,
          "diagnostics.probe_layer out of range");
}

ExperimentConfig config_from_json(const std::string& text) {
  ExperimentConfig cfg;
  try {
    const json j = json::parse(text);
    expect_keys(j,
                {"schema_version", "seed", "out_dir", "suite", "model",
                 "search", "training", "dps", "diagnostics"},
                "config");
    get_if(j, "schema_version", cfg.schema_version);
    get_if(j, "seed", cfg.seed);
    get_if(j, "out_dir", cfg.out_dir);
    if (j.contains("suite")) parse_suite(j.at("suite"), cfg.suite);
    if (j.contains("model")) parse_model(j.at("model"), cfg.model);
    if (j.contains("search")) parse_search(j.at("search"), cfg.search);
    if (j.contains("training")) parse_training(j.at("training"), cfg.training);
    if (j.contains("dps")) parse_dps(j.at("dps"), cfg.dps);
    if (j.contains("diagnostics"))
      parse_diagnostics(j.at("diagnostics"), cfg.diagnostics);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

std::string config_to_json(const ExperimentConfig& cfg) {
  json j;
  j["schema_version"] = cfg.schema_version;
  j["seed"] = cfg.seed;
  j["out_dir"] = cfg.out_dir;
  j["suite"] = {{"name", cfg.suite.name}, {"tasks", cfg.suite.tasks}};
  j["model"] = {{"backbone", cfg.model.backbone},
                {"latent_dim", cfg.model.latent_dim},
                {"task_embed_dim", cfg.model.task_embed_dim},
                {"n_layers", cfg.model.n_layers},
                {"n_heads", cfg.model.n_heads},
                {"ffn_hidden", cfg.model.ffn_hidden},
                {"expert_hidden", cfg.model.expert_hidden},
                {"n_experts", cfg.model.n_experts},
                {"latent_norm", cfg.model.latent_norm},
                {"simnorm_group", cfg.model.simnorm_group},
                {"simnorm_tau", cfg.model.simnorm_tau},
                {"encoder_hidden", cfg.model.encoder_hidden},
                {"context_len", cfg.model.context_len},
                {"infer_context", cfg.model.infer_context},
                {"support_bins", cfg.model.support_bins},
                {"support_lo", cfg.model.support_lo},
                {"support_hi", cfg.model.support_hi}};
  j["search"] = {{"n_simulations", cfg.search.n_simulations},
                 {"c1", cfg.search.c1},
                 {"c2", cfg.search.c2},
                 {"discount", cfg.search.discount},
                 {"dirichlet_alpha", cfg.search.dirichlet_alpha},
                 {"exploration_frac", cfg.search.exploration_frac},
                 {"n_candidates", cfg.search.n_candidates}};
  j["training"] = {{"env_step_budget", cfg.training.env_step_budget},
                   {"max_iters", cfg.training.max_iters},
                   {"batch", cfg.training.batch},
                   {"n_step", cfg.training.n_step},
                   {"lr", cfg.training.lr},
                   {"weight_decay", cfg.training.weight_decay},
                   {"clip_norm", cfg.training.clip_norm},
                   {"replay_ratio", cfg.training.replay_ratio},
                   {"target_ema", cfg.training.target_ema},
                   {"replay_capacity", cfg.training.replay_capacity},
                   {"eval_every", cfg.training.eval_every},
                   {"eval_episodes", cfg.training.eval_episodes},
                   {"moco", cfg.training.moco},
                   {"stop_when_solved", cfg.training.stop_when_solved}};
  j["dps"] = {{"enabled", cfg.dps.enabled},
              {"n_stages", cfg.dps.n_stages},
              {"rank", cfg.dps.rank},
              {"alpha_offset", cfg.dps.alpha_offset},
              {"alpha_range", cfg.dps.alpha_range},
              {"min_stage0_iters", cfg.dps.min_stage0_iters},
              {"quota", cfg.dps.quota},
              {"eval_window", cfg.dps.eval_window},
              {"solve_margin", cfg.dps.solve_margin}};
  j["diagnostics"] = {{"interval", cfg.diagnostics.interval},
                      {"probe_layer", cfg.diagnostics.probe_layer},
                      {"conflict", cfg.diagnostics.conflict}};
  return j.dump(2) + "\n";
}

ExperimentConfig load_config_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::invalid_argument("config: cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return config_from_json(ss.str());
}

void save_config_file(const ExperimentConfig& cfg, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << config_to_json(cfg);
}

ModelConfig to_model_config(const ExperimentConfig& cfg, const Suite& suite) {
  ModelConfig mc;
  mc.latent_dim = cfg.model.latent_dim;
  mc.task_embed_dim = cfg.model.task_embed_dim;
  mc.n_layers = cfg.model.n_layers;
  mc.n_heads = cfg.model.n_heads;
  mc.ffn_hidden = cfg.model.ffn_hidden;
  mc.expert_hidden = cfg.model.expert_hidden;
  mc.n_experts = cfg.model.n_experts;
  mc.backbone = cfg.model.backbone == "moe" ? Backbone::kMoe : Backbone::kDense;
  mc.latent_norm = cfg.model.latent_norm == "simnorm" ? LatentNorm::kSimNorm
                                                      : LatentNorm::kLayerNorm;
  mc.simnorm_group = cfg.model.simnorm_group;
  mc.simnorm_tau = cfg.model.simnorm_tau;
  mc.encoder_hidden = cfg.model.encoder_hidden;
  mc.context_len = cfg.model.context_len;
  mc.infer_context = cfg.model.infer_context;
  mc.support.bins = cfg.model.support_bins;
  mc.support.lo = cfg.model.support_lo;
  mc.support.hi = cfg.model.support_hi;
  for (const auto& env : suite.envs) {
    mc.obs_dims.push_back(env->obs_dim());
    mc.action_spaces.push_back(env->action_space());
  }
  mc.validate();
  return mc;
}

SearchConfig to_search_config(const ExperimentConfig& cfg) {
  SearchConfig sc;
  sc.n_simulations = cfg.search.n_simulations;
  sc.c1 = cfg.search.c1;
  sc.c2 = cfg.search.c2;
  sc.discount = cfg.search.discount;
  sc.dirichlet_alpha = cfg.search.dirichlet_alpha;
  sc.exploration_frac = cfg.search.exploration_frac;
  sc.n_candidates = cfg.search.n_candidates;
  return sc;
}

DpsConfig to_dps_config(const ExperimentConfig& cfg) {
  DpsConfig dc;
  dc.enabled = cfg.dps.enabled;
  dc.n_stages = cfg.dps.n_stages;
  dc.rank = cfg.dps.rank;
  dc.alpha_offset = cfg.dps.alpha_offset;
  dc.alpha_range = cfg.dps.alpha_range;
  dc.min_stage0_iters = cfg.dps.min_stage0_iters;
  dc.quota = cfg.dps.quota;
  dc.eval_window = cfg.dps.eval_window;
  dc.solve_margin = cfg.dps.solve_margin;
  return dc;
}

}  // namespace wmlab
