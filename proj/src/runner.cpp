#include "wmlab/runner.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "wmlab/diagnostics.hpp"
#include "wmlab/envs.hpp"
#include "wmlab/model.hpp"
#include "wmlab/moe.hpp"
#include "wmlab/replay.hpp"
#include "wmlab/rng.hpp"
#include "wmlab/theory.hpp"
#include "wmlab/training.hpp"

namespace wmlab {
namespace {

namespace fs = std::filesystem;

// mid-run invariant breaks (frozen-weight drift, replay mismatch) are
// verification failures, not generic runtime errors
struct VerificationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

double solved_threshold_for(const Env& env, double margin, double discount) {
  if (const TabularMdp* m = env.mdp())
    return margin * oracle_value(*m, discount).optimal_return;
  // continuous tasks publish a threshold already set at the 0.9 margin
  return env.solved_threshold() * (margin / 0.9);
}

Episode collect_episode(WorldModel& model, Env& env, int task,
                        SearchConfig scfg, double temperature, bool add_noise,
                        uint64_t reset_seed, Rng& rng) {
  WmPlanner planner(model);
  scfg.temperature = temperature;
  scfg.add_noise = add_noise;
  Episode ep;
  ep.task = task;
  std::vector<double> obs = env.reset(reset_seed);
  ep.obs.push_back(obs);
  const bool continuous = !env.action_space().discrete;
  for (int t = 0; t < env.horizon(); ++t) {
    SearchResult sr = run_search(planner, task, obs, scfg, rng);
    const Action a = sr.actions[sr.chosen];
    StepResult res = env.step(a);
    ep.actions.push_back(a);
    ep.rewards.push_back(res.reward);
    ep.policies.push_back(sr.policy);
    ep.root_values.push_back(sr.root_value);
    if (continuous) ep.candidates.push_back(sr.actions);
    obs = res.obs;
    ep.obs.push_back(obs);
    if (res.done) {
      ep.terminal = !res.truncated;
      break;
    }
  }
  ep.validate();
  return ep;
}

double episode_return(const Episode& ep) {
  double r = 0.0;
  for (double x : ep.rewards) r += x;
  return r;
}

struct DiagRow {
  double dormant = 0.0;
  double latent = 0.0;
  double erank = 0.0;
  double conflict = std::numeric_limits<double>::quiet_NaN();
};

std::vector<std::vector<double>> tensor_rows(const std::vector<Tensor>& ts) {
  std::vector<std::vector<double>> rows;
  rows.reserve(ts.size());
  for (const auto& t : ts) rows.push_back(t.value());
  return rows;
}

DiagRow compute_diagnostics(WorldModel& model, WorldModel& target,
                            const std::vector<Segment>& batch,
                            const std::vector<LossWeights>& per_task_w,
                            int n_step, double discount, int probe_layer,
                            bool want_conflict) {
  DiagRow row;
  if (batch.empty()) return row;
  ProbeSink probe;
  probe.layer = probe_layer;
  {
    NoGradGuard ng;
    const size_t n_probe = std::min<size_t>(batch.size(), 8);
    for (size_t i = 0; i < n_probe; ++i) {
      LossTerms t;
      segment_loss(model, target, batch[i], per_task_w[batch[i].ep->task],
                   n_step, discount, t, &probe);
    }
  }
  const auto hidden = tensor_rows(probe.ffn_hidden);
  const auto latents = tensor_rows(probe.encoder_outputs);
  if (!hidden.empty()) row.dormant = dormant_ratio_relative(hidden);
  if (!latents.empty()) {
    row.latent = latent_norm(latents);
    try {
      row.erank = effective_rank(latents);
    } catch (const std::invalid_argument&) {
      row.erank = 0.0;
    }
  }
  if (want_conflict) {
    std::set<int> tasks;
    for (const auto& s : batch) tasks.insert(s.ep->task);
    if (tasks.size() >= 2) {
      try {
        TaskGradients tg =
            per_task_gradient_split(model, target, batch, per_task_w, n_step,
                                    discount, {"moe_layer"}, probe_layer);
        row.conflict = max_gradient_conflict(tg.by_scope.at("moe_layer"));
      } catch (const std::invalid_argument&) {
      }
    }
  }
  return row;
}

int resolve_probe_layer(const ExperimentConfig& cfg) {
  return cfg.diagnostics.probe_layer < 0 ? cfg.model.n_layers - 1
                                         : cfg.diagnostics.probe_layer;
}

std::vector<LossWeights> suite_loss_weights(const Suite& suite) {
  std::vector<LossWeights> w;
  w.reserve(suite.envs.size());
  for (const auto& env : suite.envs)
    w.push_back(default_loss_weights(env->action_space().discrete));
  return w;
}

// Fixed observations probed across a stage transition; any output drift
// means the fresh adapters were not value-neutral.
std::vector<double> stage_probe(WorldModel& m,
                                const std::vector<std::vector<double>>& probe_obs) {
  std::vector<double> out;
  for (int t = 0; t < static_cast<int>(probe_obs.size()); ++t) {
    Prediction p;
    Seq s = m.plan_init(t, probe_obs[t], p);
    out.push_back(p.value);
    out.insert(out.end(), p.policy.begin(), p.policy.end());
    out.insert(out.end(), p.gauss.mean.begin(), p.gauss.mean.end());
    out.insert(out.end(), p.gauss.log_std.begin(), p.gauss.log_std.end());
    Action a;
    const ActionSpace& as = m.config().action_spaces[t];
    if (!as.discrete) a.vec.assign(as.dim, 0.5 * (as.lo + as.hi));
    double r = 0.0;
    Prediction p2;
    m.plan_step(s, a, r, p2);
    out.push_back(r);
    out.push_back(p2.value);
    out.insert(out.end(), p2.policy.begin(), p2.policy.end());
    out.insert(out.end(), p2.gauss.mean.begin(), p2.gauss.mean.end());
    out.insert(out.end(), p2.gauss.log_std.begin(), p2.gauss.log_std.end());
  }
  return out;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
  double d = 0.0;
  for (size_t i = 0; i < a.size(); ++i) d = std::max(d, std::fabs(a[i] - b[i]));
  return d;
}

// Target-side mirror of a stage advance: attach the same adapters in the
// same creation order, then copy their values so both stores stay aligned
// for EMA updates.
void sync_stage_to_target(WorldModel& online, WorldModel& target) {
  auto ow = online.adapted_linears();
  auto tw = target.adapted_linears();
  if (ow.size() != tw.size())
    throw std::runtime_error("adapter sync: wrapped-linear count mismatch");
  int max_stage = 0;
  for (const auto* al : ow)
    for (const auto& ad : al->adapters) max_stage = std::max(max_stage, ad.stage);
  Rng dummy(0);
  for (int s = 1; s <= max_stage; ++s)
    for (size_t i = 0; i < ow.size(); ++i) {
      const size_t have = tw[i]->adapters.size();
      if (have < ow[i]->adapters.size() && ow[i]->adapters[have].stage == s) {
        const int rank = ow[i]->adapters[have].a.shape()[1];
        tw[i]->add_stage(target.params(), s, rank, dummy);
      }
    }
  for (size_t i = 0; i < ow.size(); ++i)
    tw[i]->current_stage = ow[i]->current_stage;
  for (const auto& p : online.params().items()) {
    if (p.name.find(".lora") == std::string::npos) continue;
    Param* q = target.params().find(p.name);
    if (q == nullptr)
      throw std::runtime_error("adapter sync: missing target param " + p.name);
    q->t.value() = p.t.value();
    q->trainable = p.trainable;
  }
}

std::vector<double> flatten_trainable_grads(const ParamStore& ps) {
  std::vector<double> g;
  for (const auto& p : ps.items()) {
    if (!p.trainable) continue;
    const auto& gr = p.t.grad();
    g.insert(g.end(), gr.begin(), gr.end());
  }
  return g;
}

void write_trainable_grads(ParamStore& ps, const std::vector<double>& g) {
  size_t off = 0;
  for (auto& p : ps.items()) {
    if (!p.trainable) continue;
    auto& gr = p.t.grad();
    std::copy(g.begin() + static_cast<std::ptrdiff_t>(off),
              g.begin() + static_cast<std::ptrdiff_t>(off + gr.size()),
              gr.begin());
    off += gr.size();
  }
  if (off != g.size())
    throw std::runtime_error("gradient flatten size drifted mid-step");
}

// train_step variant with the momentum correction between backward and the
// optimizer: per-task gradients are flattened, corrected into one descent
// direction, and written back before the usual clip + update.
TrainStepResult moco_train_step(WorldModel& model, WorldModel& target,
                                AdamW& opt, MocoState& st, const MocoConfig& mcfg,
                                const std::vector<Segment>& batch,
                                const std::vector<LossWeights>& per_task_w,
                                int n_step, double discount, double clip_norm,
                                int n_tasks) {
  TrainStepResult res;
  res.batch = static_cast<int>(batch.size());
  ParamStore& ps = model.params();
  ps.zero_grad();
  std::map<int, std::vector<const Segment*>> by_task;
  for (const auto& s : batch) by_task[s.ep->task].push_back(&s);

  const double inv_b = 1.0 / static_cast<double>(batch.size());
  std::vector<std::vector<double>> grads(
      static_cast<size_t>(n_tasks),
      std::vector<double>(flatten_trainable_grads(ps).size(), 0.0));
  std::vector<double> losses(static_cast<size_t>(n_tasks), 0.0);
  std::vector<double> prev(grads[0].size(), 0.0);
  for (const auto& [task, segs] : by_task) {
    LossTerms task_terms;
    for (const Segment* s : segs) {
      LossTerms t;
      Tensor loss = segment_loss(model, target, *s, per_task_w[task], n_step,
                                 discount, t);
      backward(scale(loss, inv_b));
      t.z *= inv_b;
      t.r *= inv_b;
      t.p *= inv_b;
      t.v *= inv_b;
      task_terms += t;
    }
    std::vector<double> cur = flatten_trainable_grads(ps);
    auto& g = grads[static_cast<size_t>(task)];
    for (size_t i = 0; i < cur.size(); ++i) g[i] = cur[i] - prev[i];
    prev = std::move(cur);
    losses[static_cast<size_t>(task)] = task_terms.total();
    res.per_task[task] = task_terms;
    res.terms += task_terms;
    if (!std::isfinite(task_terms.total()))
      throw std::runtime_error("non-finite loss on task " +
                               std::to_string(task));
  }
  if (st.y.size() != static_cast<size_t>(n_tasks) ||
      (n_tasks > 0 && st.y[0].size() != grads[0].size()))
    st.init(n_tasks, grads[0].size());
  const std::vector<double> gs = moco_step(st, mcfg, grads, losses);
  write_trainable_grads(ps, gs);
  res.grad_norm = clip_grad_norm(ps, clip_norm);
  opt.step();
  return res;
}

struct DiagnoseRow {
  double dormant = 0.0;
  double latent = 0.0;
  double erank = 0.0;
  double conflict_moe_layer = std::numeric_limits<double>::quiet_NaN();
  double conflict_encoder_output = std::numeric_limits<double>::quiet_NaN();
};

// Fresh-data diagnostics shared by the end-of-run snapshot and the diagnose
// subcommand; identical inputs produce byte-identical CSV rows.
DiagnoseRow diagnose_model(WorldModel& model, const ExperimentConfig& cfg,
                           uint64_t seed, int episodes_per_task,
                           int batch_size) {
  Suite suite = make_suite(cfg.suite.name, cfg.suite.tasks, cfg.seed);
  const int n_tasks = suite.n_tasks();
  if (episodes_per_task < 1)
    throw std::invalid_argument("diagnose: episodes_per_task must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("diagnose: batch must be >= 1");
  ReplayBuffer replay(n_tasks, 1 << 20);
  SearchConfig scfg = to_search_config(cfg);
  Rng rng(derive_seed(seed, 0xD1A6));
  std::vector<int> all_tasks(static_cast<size_t>(n_tasks));
  for (int t = 0; t < n_tasks; ++t) all_tasks[static_cast<size_t>(t)] = t;
  for (int t = 0; t < n_tasks; ++t)
    for (int e = 0; e < episodes_per_task; ++e)
      replay.add(collect_episode(
          model, *suite.envs[static_cast<size_t>(t)], t, scfg, 1.0, false,
          derive_seed(seed, 0xD1A60000ULL +
                                static_cast<uint64_t>(t) * 1000ULL +
                                static_cast<uint64_t>(e)),
          rng));
  auto batch = replay.build_multitask_batch(all_tasks, batch_size,
                                            model.config().context_len, rng);
  const auto per_task_w = suite_loss_weights(suite);
  const int probe_layer = resolve_probe_layer(cfg);
  DiagnoseRow out;
  DiagRow base =
      compute_diagnostics(model, model, batch, per_task_w, cfg.training.n_step,
                          cfg.search.discount, probe_layer, false);
  out.dormant = base.dormant;
  out.latent = base.latent;
  out.erank = base.erank;
  std::set<int> tasks_in_batch;
  for (const auto& s : batch) tasks_in_batch.insert(s.ep->task);
  if (tasks_in_batch.size() >= 2) {
    TaskGradients tg = per_task_gradient_split(
        model, model, batch, per_task_w, cfg.training.n_step,
        cfg.search.discount, {"moe_layer", "encoder_output"}, probe_layer);
    try {
      out.conflict_moe_layer =
          max_gradient_conflict(tg.by_scope.at("moe_layer"));
    } catch (const std::invalid_argument&) {
    }
    try {
      out.conflict_encoder_output =
          max_gradient_conflict(tg.by_scope.at("encoder_output"));
    } catch (const std::invalid_argument&) {
    }
  }
  return out;
}

void write_diagnose_csv(const std::string& path, const DiagnoseRow& row) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << "dormant_ratio,latent_norm,erank,conflict_moe_layer,"
        "conflict_encoder_output\n";
  os << fmt(row.dormant) << ',' << fmt(row.latent) << ',' << fmt(row.erank)
     << ',' << fmt(row.conflict_moe_layer) << ','
     << fmt(row.conflict_encoder_output) << '\n';
}

void write_diagnose_plot(const std::string& path, const DiagnoseRow& row) {
  const std::vector<std::pair<std::string, double>> bars = {
      {"dormant_ratio", row.dormant},
      {"latent_norm", row.latent},
      {"erank", row.erank},
      {"conflict_moe_layer", row.conflict_moe_layer},
      {"conflict_encoder_output", row.conflict_encoder_output}};
  double top = 1e-12;
  for (const auto& [name, v] : bars)
    if (std::isfinite(v)) top = std::max(top, std::fabs(v));
  const int w = 640, h = 360, pad = 40;
  const double bw = (w - 2.0 * pad) / static_cast<double>(bars.size());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w
     << "\" height=\"" << h << "\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (size_t i = 0; i < bars.size(); ++i) {
    const double v = bars[i].second;
    const double x = pad + bw * static_cast<double>(i) + 8.0;
    const double base_y = h - pad;
    const double bh =
        std::isfinite(v) ? (h - 2.0 * pad) * std::fabs(v) / top : 0.0;
    os << "<rect x=\"" << fmt(x) << "\" y=\"" << fmt(base_y - bh)
       << "\" width=\"" << fmt(bw - 16.0) << "\" height=\"" << fmt(bh)
       << "\" fill=\"#4477aa\"/>\n";
    os << "<text x=\"" << fmt(x) << "\" y=\"" << h - pad + 16
       << "\" font-size=\"10\">" << bars[i].first << "</text>\n";
    os << "<text x=\"" << fmt(x) << "\" y=\"" << fmt(base_y - bh - 4.0)
       << "\" font-size=\"10\">" << (std::isfinite(v) ? fmt(v) : "nan")
       << "</text>\n";
  }
  os << "</svg>\n";
}

struct MetricsWriter {
  std::ofstream os;
  explicit MetricsWriter(const std::string& path) : os(path, std::ios::binary) {
    if (!os) throw std::runtime_error("cannot write " + path);
    os << "iter,task_id,return,loss_z,loss_r,loss_p,loss_v,grad_norm,"
          "dormant_ratio,latent_norm,erank,stage\n";
  }
  void row(int64_t iter, int task, double ret, const LossTerms& t,
           double grad_norm, const DiagRow& d, int stage) {
    os << iter << ',' << task << ',' << fmt(ret) << ',' << fmt(t.z) << ','
       << fmt(t.r) << ',' << fmt(t.p) << ',' << fmt(t.v) << ','
       << fmt(grad_norm) << ',' << fmt(d.dormant) << ',' << fmt(d.latent)
       << ',' << fmt(d.erank) << ',' << stage << '\n';
  }
};

}  // namespace

TrainSummary run_training(const ExperimentConfig& cfg) {
  cfg.validate();
  Suite suite = make_suite(cfg.suite.name, cfg.suite.tasks, cfg.seed);
  const int n_tasks = suite.n_tasks();
  ModelConfig mc = to_model_config(cfg, suite);
  WorldModel online(mc, derive_seed(cfg.seed, 0x0A));
  WorldModel target(mc, derive_seed(cfg.seed, 0x0A));
  copy_params(target, online);

  AdamWConfig ocfg;
  ocfg.lr = cfg.training.lr;
  ocfg.weight_decay = cfg.training.weight_decay;
  AdamW opt(online.params(), ocfg);

  ReplayBuffer replay(n_tasks, static_cast<size_t>(cfg.training.replay_capacity));
  const auto per_task_w = suite_loss_weights(suite);
  const SearchConfig scfg = to_search_config(cfg);
  const int probe_layer = resolve_probe_layer(cfg);
  const bool moe = cfg.model.backbone == "moe";

  std::vector<int> all_tasks(static_cast<size_t>(n_tasks));
  for (int t = 0; t < n_tasks; ++t) all_tasks[static_cast<size_t>(t)] = t;

  std::vector<double> solve_thresholds(static_cast<size_t>(n_tasks));
  for (int t = 0; t < n_tasks; ++t)
    solve_thresholds[static_cast<size_t>(t)] =
        suite.envs[static_cast<size_t>(t)]->solved_threshold();

  std::unique_ptr<DpsController> dps;
  std::vector<std::vector<double>> probe_obs;
  if (cfg.dps.enabled) {
    dps = std::make_unique<DpsController>(
        to_dps_config(cfg), cfg.training.max_iters, n_tasks, online.params(),
        online.adapted_linears(), WorldModel::freeze_prefixes(),
        derive_seed(cfg.seed, 0x0D));
    for (int t = 0; t < n_tasks; ++t)
      dps->set_threshold(
          t, solved_threshold_for(*suite.envs[static_cast<size_t>(t)],
                                  cfg.dps.solve_margin, scfg.discount));
    probe_obs.reserve(static_cast<size_t>(n_tasks));
    for (int t = 0; t < n_tasks; ++t)
      probe_obs.push_back(suite.envs[static_cast<size_t>(t)]->reset(
          derive_seed(cfg.seed, 0xF0 + static_cast<uint64_t>(t))));
  }

  MocoState moco_state;
  const MocoConfig moco_cfg;

  fs::create_directories(cfg.out_dir);
  save_config_file(cfg, cfg.out_dir + "/resolved_config.json");
  MetricsWriter metrics(cfg.out_dir + "/metrics.csv");
  std::ofstream diag_csv(cfg.out_dir + "/diagnostics.csv", std::ios::binary);
  if (!diag_csv)
    throw std::runtime_error("cannot write " + cfg.out_dir + "/diagnostics.csv");
  diag_csv << "iter,dormant_ratio,latent_norm,erank,conflict\n";

  TrainSummary sum;
  sum.run_dir = cfg.out_dir;
  sum.final_eval.assign(static_cast<size_t>(n_tasks), 0.0);
  sum.best_eval.assign(static_cast<size_t>(n_tasks),
                       -std::numeric_limits<double>::infinity());
  sum.solved_at_env_step.assign(static_cast<size_t>(n_tasks), -1);

  Rng rng_collect(derive_seed(cfg.seed, 0x10));
  Rng rng_batch(derive_seed(cfg.seed, 0x11));
  Rng rng_eval(derive_seed(cfg.seed, 0x12));

  int64_t iter = 0;
  int64_t env_steps = 0;
  uint64_t episode_counter = 0;
  uint64_t eval_counter = 0;
  double debt = 0.0;
  bool stop = false;
  DiagRow last_diag;
  std::vector<double> last_eval(static_cast<size_t>(n_tasks), 0.0);
  std::vector<std::deque<double>> eval_hist(static_cast<size_t>(n_tasks));

  auto eval_round = [&]() {
    for (int t = 0; t < n_tasks; ++t) {
      double mean = 0.0;
      for (int e = 0; e < cfg.training.eval_episodes; ++e) {
        Episode ep = collect_episode(
            online, *suite.envs[static_cast<size_t>(t)], t, scfg, 0.0, false,
            derive_seed(cfg.seed, 0x200000ULL + eval_counter * 1000ULL +
                                      static_cast<uint64_t>(e)),
            rng_eval);
        mean += episode_return(ep);
      }
      ++eval_counter;
      mean /= cfg.training.eval_episodes;
      last_eval[static_cast<size_t>(t)] = mean;
      sum.final_eval[static_cast<size_t>(t)] = mean;
      sum.best_eval[static_cast<size_t>(t)] =
          std::max(sum.best_eval[static_cast<size_t>(t)], mean);
      if (sum.solved_at_env_step[static_cast<size_t>(t)] < 0 &&
          mean >= solve_thresholds[static_cast<size_t>(t)])
        sum.solved_at_env_step[static_cast<size_t>(t)] = env_steps;
      if (dps) {
        auto& h = eval_hist[static_cast<size_t>(t)];
        h.push_back(mean);
        while (static_cast<int>(h.size()) > cfg.dps.eval_window) h.pop_front();
        double ma = 0.0;
        for (double x : h) ma += x;
        dps->record_eval(t, ma / static_cast<double>(h.size()));
      }
    }
    if (cfg.training.stop_when_solved) {
      bool all = true;
      for (int t = 0; t < n_tasks; ++t)
        all = all && sum.solved_at_env_step[static_cast<size_t>(t)] >= 0;
      stop = stop || all;
    }
  };

  auto snap_entropy = [&](std::vector<double>& dst) {
    dst.assign(static_cast<size_t>(n_tasks), 0.0);
    for (int t = 0; t < n_tasks; ++t)
      dst[static_cast<size_t>(t)] = entropy_bits(selection_distribution(
          online.routing(), t, 1000, cfg.model.n_experts));
  };
  auto routing_window_full = [&]() {
    std::vector<int64_t> counts(static_cast<size_t>(n_tasks), 0);
    for (const auto& r : online.routing().records())
      if (r.task >= 0 && r.task < n_tasks) ++counts[static_cast<size_t>(r.task)];
    for (int64_t c : counts)
      if (c < 1000) return false;
    return true;
  };

  while (!stop && iter < cfg.training.max_iters &&
         env_steps < cfg.training.env_step_budget) {
    const std::vector<int> active = dps ? dps->active_tasks() : all_tasks;
    for (int t : active) {
      if (env_steps >= cfg.training.env_step_budget) break;
      const double temp = temperature_for(env_steps, cfg.training.env_step_budget);
      Episode ep = collect_episode(
          online, *suite.envs[static_cast<size_t>(t)], t, scfg, temp, true,
          derive_seed(cfg.seed, 0x100000ULL + episode_counter), rng_collect);
      ++episode_counter;
      env_steps += ep.length();
      debt += ep.length() * cfg.training.replay_ratio;
      replay.add(std::move(ep));
    }

    while (debt >= 1.0 && !stop && iter < cfg.training.max_iters) {
      auto batch = replay.build_multitask_batch(
          active, cfg.training.batch, mc.context_len, rng_batch);
      if (batch.empty()) {
        debt = 0.0;
        break;
      }
      online.set_routing_step(iter);
      online.set_routing_enabled(true);
      TrainStepResult res =
          cfg.training.moco
              ? moco_train_step(online, target, opt, moco_state, moco_cfg,
                                batch, per_task_w, cfg.training.n_step,
                                scfg.discount, cfg.training.clip_norm, n_tasks)
              : train_step(online, target, opt, batch, per_task_w,
                           cfg.training.n_step, scfg.discount,
                           cfg.training.clip_norm);
      online.set_routing_enabled(false);
      ema_update(target, online, cfg.training.target_ema);
      debt -= 1.0;
      ++iter;

      if (dps) {
        if (dps->stage() >= 1) {
          const auto bad = dps->freeze_violations();
          if (!bad.empty())
            throw VerificationError("frozen parameter drifted: " + bad.front());
          const auto alphas = dps->alpha_matrix();
          for (const auto& row : alphas)
            for (double a : row) {
              sum.alpha_min = std::min(sum.alpha_min, a);
              sum.alpha_max = std::max(sum.alpha_max, a);
            }
        }
        if (dps->stage() < cfg.dps.n_stages) {
          const auto pre = stage_probe(online, probe_obs);
          if (dps->maybe_advance(iter)) {
            const auto post = stage_probe(online, probe_obs);
            sum.stage_delta_max =
                std::max(sum.stage_delta_max, max_abs_diff(pre, post));
            ++sum.stage_transitions;
            sync_stage_to_target(online, target);
          }
        }
      }

      if (iter == 1 || iter % cfg.diagnostics.interval == 0) {
        last_diag = compute_diagnostics(
            online, target, batch, per_task_w, cfg.training.n_step,
            scfg.discount, probe_layer,
            cfg.diagnostics.conflict && n_tasks >= 2);
        diag_csv << iter << ',' << fmt(last_diag.dormant) << ','
                 << fmt(last_diag.latent) << ',' << fmt(last_diag.erank) << ','
                 << fmt(last_diag.conflict) << '\n';
        if (std::isfinite(last_diag.conflict)) {
          sum.conflict_series.emplace_back(iter, last_diag.conflict);
          sum.conflict_sampled = true;
        }
        if (moe && sum.initial_entropy_bits.empty() && routing_window_full())
          snap_entropy(sum.initial_entropy_bits);
      }

      const int row_task = static_cast<int>((iter - 1) % n_tasks);
      LossTerms row_terms;
      if (auto it = res.per_task.find(row_task); it != res.per_task.end())
        row_terms = it->second;
      metrics.row(iter, row_task, last_eval[static_cast<size_t>(row_task)],
                  row_terms, res.grad_norm, last_diag,
                  dps ? dps->stage() : 0);

      if (iter % cfg.training.eval_every == 0) eval_round();
    }
  }

  eval_round();
  sum.iters = iter;
  sum.env_steps = env_steps;
  sum.final_stage = dps ? dps->stage() : 0;

  if (moe) {
    snap_entropy(sum.final_entropy_bits);
    if (sum.initial_entropy_bits.empty())
      sum.initial_entropy_bits = sum.final_entropy_bits;
  }
  if (sum.conflict_sampled) {
    const int64_t q0 = iter - std::max<int64_t>(1, iter / 4);
    double acc = 0.0;
    int64_t n = 0;
    for (const auto& [it, c] : sum.conflict_series)
      if (it > q0) {
        acc += c;
        ++n;
      }
    if (n > 0)
      sum.conflict_last_quartile = acc / static_cast<double>(n);
    else
      sum.conflict_sampled = false;
  }

  if (dps) {
    nlohmann::ordered_json events = nlohmann::ordered_json::array();
    nlohmann::ordered_json first;
    first["stage"] = 0;
    first["iter"] = 0;
    first["solved"] = nlohmann::ordered_json::array();
    first["alphas"] = nlohmann::ordered_json::array();
    events.push_back(first);
    for (const auto& ev : dps->events()) {
      nlohmann::ordered_json e;
      e["stage"] = ev.stage;
      e["iter"] = ev.iter;
      e["solved"] = ev.solved;
      e["alphas"] = ev.alphas;
      events.push_back(e);
    }
    std::ofstream os(cfg.out_dir + "/stage_events.json", std::ios::binary);
    if (!os)
      throw std::runtime_error("cannot write " + cfg.out_dir +
                               "/stage_events.json");
    os << events.dump(2) << '\n';
  }

  save_checkpoint(cfg.out_dir + "/checkpoint.bin", config_to_json(cfg),
                  online.params());
  write_diagnose_csv(cfg.out_dir + "/final_diagnostics.csv",
                     diagnose_model(online, cfg, cfg.seed, 1, 16));
  return sum;
}

int cmd_train(const ExperimentConfig& cfg) {
  try {
    TrainSummary s = run_training(cfg);
    std::printf("run dir: %s\n", s.run_dir.c_str());
    std::printf("iters %lld, env steps %lld, final stage %d\n",
                static_cast<long long>(s.iters),
                static_cast<long long>(s.env_steps), s.final_stage);
    for (size_t t = 0; t < s.final_eval.size(); ++t)
      std::printf("task %zu: final return %s, best %s, solved at %lld\n", t,
                  fmt(s.final_eval[t]).c_str(), fmt(s.best_eval[t]).c_str(),
                  static_cast<long long>(s.solved_at_env_step[t]));
    return kExitOk;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfigError;
  } catch (const VerificationError& e) {
    std::fprintf(stderr, "verification failure: %s\n", e.what());
    return kExitVerification;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
}

int cmd_replay(const std::string& run_dir) {
  try {
    ExperimentConfig cfg = load_config_file(run_dir + "/resolved_config.json");
    ExperimentConfig again = cfg;
    again.out_dir = run_dir + "/replay_check";
    run_training(again);
    const std::string a = slurp(run_dir + "/metrics.csv");
    const std::string b = slurp(again.out_dir + "/metrics.csv");
    if (a == b) {
      std::printf("replay ok: metrics.csv identical (%zu bytes)\n", a.size());
      return kExitOk;
    }
    std::fprintf(stderr, "replay mismatch: metrics.csv differs\n");
    return kExitVerification;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfigError;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
}

namespace {

void append_reports(std::vector<BoundReport>& dst,
                    std::vector<BoundReport> src, const std::string& tag) {
  for (auto& r : src) {
    if (!tag.empty()) r.name += " [" + tag + "]";
    dst.push_back(std::move(r));
  }
}

std::string delta_tag(double d) {
  std::ostringstream ss;
  ss << "d" << d;
  return ss.str();
}

}  // namespace

int cmd_theory(const TheoryOptions& opt) {
  try {
    if (opt.n_experts < 1) throw std::invalid_argument("theory: M must be >= 1");
    if (opt.n_tasks < 1) throw std::invalid_argument("theory: K must be >= 1");
    if (opt.instances < 1)
      throw std::invalid_argument("theory: instances must be >= 1");
    const std::set<std::string> known = {"default",  "collision", "pairwise",
                                         "subset",   "bound",     "theorem1",
                                         "theorem2", "theorem3",  "corollary",
                                         "specialization"};
    if (!known.count(opt.claim))
      throw std::invalid_argument("theory: unknown claim " + opt.claim);
    const bool all = opt.claim == "default";
    const bool want_collision =
        all || opt.claim == "collision" || opt.claim == "theorem2";
    const bool want_pairwise =
        all || opt.claim == "pairwise" || opt.claim == "theorem3";
    const bool want_subset =
        all || opt.claim == "subset" || opt.claim == "corollary";
    const bool want_bound =
        all || opt.claim == "bound" || opt.claim == "theorem1";
    const bool want_spec = opt.claim == "specialization";

    std::vector<BoundReport> reports;

    if (want_collision) {
      RoutingModel m;
      m.n_experts = opt.n_experts;
      m.n_tasks = opt.n_tasks;
      m.stage = RoutingStage::kExploration;
      append_reports(reports,
                     mc_collision_probability(m, opt.trials,
                                              derive_seed(opt.seed, 1)),
                     "M" + std::to_string(opt.n_experts) + "_K" +
                         std::to_string(opt.n_tasks));
    }

    if (want_pairwise) {
      const int triplets[][3] = {{2, 2, 1}, {3, 2, 2}, {4, 4, 4}};
      uint64_t salt = 2;
      for (const auto& abu : triplets) {
        const int a = abu[0], b = abu[1], u = abu[2];
        for (double d : opt.deltas) {
          const int need = a + b - u;
          int m_exp = std::max(opt.n_experts, need);
          if (d > 0.0) m_exp = std::max(m_exp, std::max(a, b) + 1);
          RoutingModel m;
          m.n_experts = m_exp;
          m.n_tasks = 2;
          m.stage = RoutingStage::kRouterLearning;
          m.delta = d;
          std::vector<int> sa(static_cast<size_t>(a)),
              sb(static_cast<size_t>(b));
          for (int i = 0; i < a; ++i) sa[static_cast<size_t>(i)] = i;
          for (int i = 0; i < b; ++i) sb[static_cast<size_t>(i)] = a - u + i;
          m.sets = {sa, sb};
          std::ostringstream tag;
          tag << "a" << a << "_b" << b << "_u" << u << "_" << delta_tag(d)
              << "_M" << m_exp;
          append_reports(reports,
                         mc_collision_probability(m, opt.trials,
                                                  derive_seed(opt.seed, salt)),
                         tag.str());
          ++salt;
        }
      }
    }

    if (want_subset) {
      for (double d : opt.deltas) {
        RoutingModel m;
        m.n_experts = std::max(opt.n_experts, 4);
        m.n_tasks = 3;
        m.stage = RoutingStage::kRouterLearning;
        m.delta = d;
        m.sets = {{0, 1}, {1, 2}, {0, 1, 2}};
        append_reports(reports,
                       mc_collision_probability(m, opt.trials,
                                                derive_seed(opt.seed, 0x30)),
                       "k3_" + delta_tag(d));
      }
    }

    if (want_bound) {
      const int64_t holds =
          check_cosine_bound_instances(opt.instances, derive_seed(opt.seed, 0x40));
      BoundReport r;
      r.name = "cosine_bound_holds";
      r.closed_form = static_cast<double>(opt.instances);
      r.estimate = static_cast<double>(holds);
      r.std_error = 0.0;
      r.n_trials = opt.instances;
      r.abs_tol = 0.0;
      r.verdict = holds == opt.instances;
      reports.push_back(r);
      std::printf("%lld/%lld bound-holds\n", static_cast<long long>(holds),
                  static_cast<long long>(opt.instances));
    }

    if (want_spec) {
      SpecializationConfig sc;
      sc.seed = opt.seed;
      SpecializationReport sp = empirical_moe_specialization(sc);
      BoundReport re;
      re.name = "specialization_entropy_decreased";
      re.closed_form = 1.0;
      re.estimate = sp.entropy_decreased ? 1.0 : 0.0;
      re.n_trials = sc.steps;
      re.verdict = sp.entropy_decreased;
      reports.push_back(re);
      BoundReport rc;
      rc.name = "specialization_conflict_reduced";
      rc.closed_form = 1.0;
      rc.estimate = sp.conflict_reduced ? 1.0 : 0.0;
      rc.n_trials = sc.steps;
      rc.verdict = sp.conflict_reduced;
      reports.push_back(rc);
      std::printf("specialization: entropy %s -> %s bits, moe conflict %s vs "
                  "dense %s\n",
                  fmt(sp.mean_initial_entropy).c_str(),
                  fmt(sp.mean_final_entropy).c_str(),
                  fmt(sp.moe_conflict_last_quartile).c_str(),
                  fmt(sp.dense_conflict_last_quartile).c_str());
    }

    nlohmann::ordered_json out = nlohmann::ordered_json::array();
    bool ok = true;
    std::printf("%-44s %14s %14s %12s %8s\n", "claim", "closed_form",
                "estimate", "stderr", "verdict");
    for (const auto& r : reports) {
      std::printf("%-44s %14.8g %14.8g %12.4g %8s\n", r.name.c_str(),
                  r.closed_form, r.estimate, r.std_error,
                  r.verdict ? "true" : "false");
      nlohmann::ordered_json j;
      j["name"] = r.name;
      j["closed_form"] = r.closed_form;
      j["estimate"] = r.estimate;
      j["stderr"] = r.std_error;
      j["n_trials"] = r.n_trials;
      j["abs_tol"] = r.abs_tol;
      j["verdict"] = r.verdict;
      out.push_back(j);
      ok = ok && r.verdict;
    }
    std::ofstream os(opt.out_path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + opt.out_path);
    os << out.dump(2) << '\n';
    std::printf("report: %s\n", opt.out_path.c_str());
    return ok ? kExitOk : kExitVerification;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfigError;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
}

int cmd_diagnose(const DiagnoseOptions& opt) {
  try {
    const std::string cfg_text = read_checkpoint_config(opt.checkpoint);
    ExperimentConfig cfg = config_from_json(cfg_text);
    Suite suite = make_suite(cfg.suite.name, cfg.suite.tasks, cfg.seed);
    ModelConfig mc = to_model_config(cfg, suite);
    WorldModel model(mc, derive_seed(cfg.seed, 0x0A));
    load_checkpoint(opt.checkpoint, model.params(), model.adapted_linears());
    const DiagnoseRow row = diagnose_model(model, cfg, opt.seed,
                                           opt.episodes_per_task, opt.batch);
    write_diagnose_csv(opt.out_csv, row);
    std::printf("dormant %s, latent norm %s, erank %s, conflict(moe_layer) %s, "
                "conflict(encoder_output) %s\n",
                fmt(row.dormant).c_str(), fmt(row.latent).c_str(),
                fmt(row.erank).c_str(), fmt(row.conflict_moe_layer).c_str(),
                fmt(row.conflict_encoder_output).c_str());
    if (!opt.plot_path.empty()) {
      write_diagnose_plot(opt.plot_path, row);
      std::printf("plot: %s\n", opt.plot_path.c_str());
    }
    std::printf("csv: %s\n", opt.out_csv.c_str());
    return kExitOk;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfigError;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
}

}  // namespace wmlab
