#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "wmlab/nn.hpp"

namespace wmlab {

// One low-rank adapter on a linear map. Contribution is
//   alpha * (x * A) * B,   alpha = offset + range * tanh(alpha_hat)
// so alpha stays inside [offset-range, offset+range] and starts at `offset`
// (alpha_hat = 0). B starts at zero: attaching an adapter does not change the
// map's output by a single bit.
struct LoraAdapter {
  int stage = 0;  // expansion stage that introduced it (1-based)
  Tensor a;       // [in, rank]
  Tensor b;       // [rank, out]
  Tensor alpha_hat;  // scalar
};

// Linear map with a stack of adapters. Adapters from stages before
// `current_stage` are value-passed but gradient-detached (their alpha_hat
// still trains; A and B do not).
struct AdaptedLinear {
  std::string name;
  Linear base;
  std::vector<LoraAdapter> adapters;
  int current_stage = 0;
  double alpha_offset = 1.0;
  double alpha_range = 0.2;

  Tensor forward(const Tensor& x) const;
  void add_stage(ParamStore& ps, int stage, int rank, Rng& rng);
  double effective_alpha(int adapter_idx) const;
};

AdaptedLinear make_adapted_linear(ParamStore& ps, const std::string& name,
                                  int in, int out, Rng& rng,
                                  double alpha_offset = 1.0,
                                  double alpha_range = 0.2);

struct DpsConfig {
  bool enabled = false;
  int n_stages = 2;  // expansion stages after the warmup stage 0
  int rank = 4;
  double alpha_offset = 1.0;
  double alpha_range = 0.2;
  int64_t min_stage0_iters = 200;
  int quota = 1;         // newly solved tasks that trigger a progress advance
  int eval_window = 5;   // evals in the moving average used for "solved"
  double solve_margin = 0.9;  // solved threshold = margin * oracle return
};

struct StageEvent {
  int stage = 0;  // stage entered
  int64_t iter = 0;
  std::vector<int> solved;
  std::vector<std::vector<double>> alphas;  // [wrapped linear][adapter]
};

// Staged capacity expansion. Stage 0 trains the base model; each advance
// freezes everything trained so far (base weights on the first advance,
// the previous stage's adapters afterwards), attaches a fresh adapter per
// wrapped linear, and re-snapshots the frozen set for bit-exact audits.
//
// Advancement: stage 0 runs at least min_stage0_iters; afterwards a stage
// advances when `quota` tasks became solved during it (progress) or when it
// has consumed its share ceil((max_iters - min_stage0_iters) / n_stages) of
// the budget (deadline), so all transitions land inside max_iters.
class DpsController {
 public:
  DpsController(const DpsConfig& cfg, int64_t max_iters, int n_tasks,
                ParamStore& ps, std::vector<AdaptedLinear*> wrapped,
                std::vector<std::string> freeze_prefixes, uint64_t seed);

  void set_threshold(int task, double thr) { thresholds_[task] = thr; }
  // `ma_return` is the moving average of the task's last eval returns
  void record_eval(int task, double ma_return);
  bool solved(int task) const { return solved_[task]; }
  std::vector<int> active_tasks() const;
  std::vector<int> solved_tasks() const;

  bool maybe_advance(int64_t iter);
  int stage() const { return stage_; }
  int64_t stage_budget() const;
  const std::vector<StageEvent>& events() const { return events_; }
  std::vector<std::vector<double>> alpha_matrix() const;

  // names of frozen params whose bits changed since the last snapshot
  std::vector<std::string> freeze_violations() const;

 private:
  void advance(int64_t iter);
  void apply_freeze();
  void snapshot();

  DpsConfig cfg_;
  int64_t max_iters_;
  ParamStore& ps_;
  std::vector<AdaptedLinear*> wrapped_;
  std::vector<std::string> freeze_prefixes_;
  Rng rng_;
  int stage_ = 0;
  int64_t stage_entry_iter_ = 0;
  int newly_solved_ = 0;
  std::vector<bool> solved_;
  std::vector<double> thresholds_;
  std::vector<StageEvent> events_;
  std::map<std::string, std::vector<double>> frozen_snapshot_;
};

}  // namespace wmlab
