#pragma once

#include <map>
#include <vector>

#include "wmlab/model.hpp"
#include "wmlab/replay.hpp"

namespace wmlab {

struct LossWeights {
  double beta_z = 10.0;
  double beta_r = 1.0;
  double beta_p = 1.0;
  double beta_v = 0.5;
  void validate() const;  // all >= 0
};

// discrete: 10 / 1 / 1 / 0.5; continuous: 10 / 0.1 / 0.1 / 0.1
LossWeights default_loss_weights(bool discrete);

// weighted loss contributions, summed over a segment's real steps
struct LossTerms {
  double z = 0.0, r = 0.0, p = 0.0, v = 0.0;
  int steps = 0;
  double total() const { return z + r + p + v; }
  LossTerms& operator+=(const LossTerms& o);
};

// Loss graph for one segment: the online model unrolls from the segment's
// first observation feeding its own predicted latents; targets come from the
// frozen-by-construction target model (encoded next latents, n-step value
// bootstraps). Returns the scalar loss tensor; `terms` reports the weighted
// component values.
Tensor segment_loss(WorldModel& model, WorldModel& target, const Segment& seg,
                    const LossWeights& w, int n_step, double discount,
                    LossTerms& terms, ProbeSink* probe = nullptr);

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;  // decoupled
};

// Tracks first/second moments by parameter index; the store is append-only,
// so parameters added mid-run (stage adapters) get fresh state. Frozen
// parameters are skipped entirely, decay included.
class AdamW {
 public:
  AdamW(ParamStore& ps, AdamWConfig cfg) : ps_(ps), cfg_(cfg) {}
  void step();
  int64_t steps_taken() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }

 private:
  ParamStore& ps_;
  AdamWConfig cfg_;
  int64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
  std::vector<int64_t> steps_;  // per-param, so late-added adapters start fresh
};

// L2 norm over the gradients of trainable parameters
double global_grad_norm(const ParamStore& ps);
// scales trainable grads so their global norm is at most max_norm;
// returns the pre-clip norm
double clip_grad_norm(ParamStore& ps, double max_norm);

struct TrainStepResult {
  LossTerms terms;                 // batch means
  std::map<int, LossTerms> per_task;
  double grad_norm = 0.0;          // pre-clip
  int batch = 0;
};

// One optimizer step on a multitask batch: per-segment backward with the
// loss scaled by 1/batch (identical gradients to a joint batch), global
// norm clip, AdamW update. Throws on a non-finite loss, naming the term.
TrainStepResult train_step(WorldModel& model, WorldModel& target, AdamW& opt,
                           const std::vector<Segment>& batch,
                           const std::vector<LossWeights>& per_task_w,
                           int n_step, double discount, double clip_norm);

// T = 1 for the first half of the budget, 0.5 after
double temperature_for(int64_t env_step, int64_t budget);

}  // namespace wmlab
