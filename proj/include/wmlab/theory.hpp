#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "wmlab/cluster.hpp"
#include "wmlab/rng.hpp"

namespace wmlab {

// Closed-form collision probabilities for K tasks independently routing one
// token each into M experts, and Monte Carlo validators for the routing
// bounds. Conflict convention for bound checks: conflict(x, y) = max(0,
// -cos(x, y)); the signed -cos is reported alongside where it matters.

// P(one fixed expert receives >= 2 of the K uniform selections).
// q_single = 1 - (1 - 1/M)^K - K (1/M) (1 - 1/M)^(K-1)
double q_single(int n_experts, int n_tasks);

// P(some expert receives >= 2 selections): the birthday bound
// 1 - M! / ((M-K)! M^K), exactly 1 when K > M. Evaluated in exact rational
// arithmetic; converted to double only at the end.
double q_layer(int n_experts, int n_tasks);

// Two-stage routing process behind the collision claims. During exploration
// every task selects uniformly over all M experts. After router learning,
// task t selects uniformly within its own expert set S_t with probability
// 1 - delta and uniformly over the complement with probability delta.
enum class RoutingStage { kExploration, kRouterLearning };

struct RoutingModel {
  int n_experts = 8;
  int n_tasks = 8;
  RoutingStage stage = RoutingStage::kExploration;
  // per-task expert sets, router-learning stage only; each strictly
  // increasing, elements in [0, n_experts)
  std::vector<std::vector<int>> sets;
  // leakage probability; > 0 requires every set to be a proper subset
  double delta = 0.0;

  void validate() const;
  // one routing draw for `task`
  int select(int task, Rng& rng) const;
};

// The pairwise same-expert probability of tasks (0, 1) with |S_0| = a,
// |S_1| = b, |S_0 ∩ S_1| = overlap, in four closed forms:
//   written    three-term expression with the in-set selection probability
//              padded by the leakage term on both factors
//   symmetric  same, with the single-set terms split symmetrically between
//              the two tasks
//   exact      the probability of the process select() actually simulates
//   leading    overlap / (a * b), the delta -> 0 limit
// All four coincide at delta = 0.
struct PairwiseCollisionForms {
  double written = 0.0;
  double symmetric = 0.0;
  double exact = 0.0;
  double leading = 0.0;
};

PairwiseCollisionForms pairwise_collision_forms(int n_experts, int a, int b,
                                                int overlap, double delta);

// Expected count of subset co-selection events: over task subsets T with
// |T| >= 2 and experts e in the intersection of the subset's sets, the
// indicator that every task in T selected e. `written` pads each per-task
// selection probability with its leakage term; `exact` matches the simulated
// process. K <= 4 only; the enumeration is exact.
struct SubsetSumForms {
  double written = 0.0;
  double exact = 0.0;
};

SubsetSumForms subset_sum_forms(const RoutingModel& model);

// One Monte Carlo vs closed-form comparison. The verdict allows 3 sigma of
// sampling noise plus abs_tol, which is nonzero exactly when closed_form is
// a stated approximation rather than the exact value of the simulated
// process (abs_tol = |closed_form - exact| in that case).
struct BoundReport {
  std::string name;
  double closed_form = 0.0;
  double estimate = 0.0;
  double std_error = 0.0;
  int64_t n_trials = 0;
  double abs_tol = 0.0;
  bool verdict = false;
};

BoundReport make_report(std::string name, double closed_form, double estimate,
                        double std_error, int64_t n_trials,
                        double abs_tol = 0.0);

// Simulates n_trials routing rounds and reports every claim that applies to
// the model's stage. Trials are seeded independently from (seed, trial), and
// the per-trial statistics are integers accumulated in integer arithmetic,
// so any parallel schedule reproduces the single-threaded aggregate exactly.
//
// exploration: "q_single" (mean per-expert >= 2 indicator) and "q_layer"
// (any collision). router_learning: the tasks (0, 1) same-expert probability
// against all four pairwise forms, plus with n_tasks <= 4 the subset
// co-selection count against both subset-sum forms. n_trials >= 10^4.
std::vector<BoundReport> mc_collision_probability(const RoutingModel& model,
                                                  int64_t n_trials,
                                                  uint64_t seed);

// Weighted-cosine conflict bound for one MoE layer. grads1/grads2 hold the
// two tasks' per-expert gradient blocks (equal dims per expert), lambda1/
// lambda2 their non-negative expert weights. Verifies
//   conflict(concat weighted grads) <= g * cos(u, v)
// with u_m = lambda1_m ||g1_m||, v_m = lambda2_m ||g2_m|| and g the largest
// per-expert conflict (pairs with a zero side contribute nothing).
struct CosineBoundCheck {
  double lhs = 0.0;          // max(0, -cos) of the concatenated weighted grads
  double raw_neg_cos = 0.0;  // the signed -cos behind lhs
  double rhs = 0.0;          // g * cos(u, v)
  double g = 0.0;

  bool holds(double tol = 1e-9) const { return lhs <= rhs + tol; }
};

// Throws if either weighted full-layer gradient is zero (conflict undefined)
// or the blocks/weights are malformed.
CosineBoundCheck weighted_cosine_bound(
    const std::vector<std::vector<double>>& grads1,
    const std::vector<std::vector<double>>& grads2,
    const std::vector<double>& lambda1, const std::vector<double>& lambda2);

// Random-instance sweep of the bound: n instances with up to max_experts
// experts of dimension up to max_dim, Gaussian gradient blocks (occasionally
// zeroed on one side), Dirichlet weights. Returns how many instances satisfy
// lhs <= rhs + 1e-9; a correct implementation returns n.
int64_t check_cosine_bound_instances(int64_t n, uint64_t seed,
                                     int max_experts = 8, int max_dim = 16);

// Supervised specialization harness: a one-layer MoE regressor and a
// parameter-matched dense MLP train side by side on pooled cluster features
// under identical data streams, one regression task per entry of
// task_clusters (identity over clusters when empty). Targets are signed
// projections onto the cluster-identity direction, so tasks on different
// clusters pull shared parameters in conflicting directions.
struct SpecializationConfig {
  ClusterConfig cluster;
  std::vector<int> task_clusters;  // task -> cluster; empty = one per cluster
  int n_experts = 4;
  int expert_hidden = 16;
  int steps = 2000;
  int batch_per_task = 8;
  double lr = 1e-2;
  int eval_every = 50;
  uint64_t seed = 0;

  int n_tasks() const {
    return task_clusters.empty() ? cluster.n_clusters
                                 : static_cast<int>(task_clusters.size());
  }
  int cluster_of(int task) const {
    return task_clusters.empty() ? task : task_clusters[task];
  }
  void validate() const;
};

struct SpecializationPoint {
  int64_t step = 0;
  double mean_entropy_w100 = 0.0;   // mean per-task selection entropy, bits
  double mean_entropy_w1000 = 0.0;
  double moe_conflict = 0.0;        // signed max -cos across task pairs
  double dense_conflict = 0.0;
};

struct SpecializationReport {
  std::vector<SpecializationPoint> trajectory;
  std::vector<double> initial_entropy_bits;  // per task, first 1000 records
  std::vector<double> final_entropy_bits;    // per task, last 1000 records
  double mean_initial_entropy = 0.0;
  double mean_final_entropy = 0.0;
  // signed max -cos averaged over the last quartile of training steps
  double moe_conflict_last_quartile = 0.0;
  double dense_conflict_last_quartile = 0.0;
  // directional verdicts; skipped (false, with directional_checked false)
  // when there is only one task
  bool directional_checked = false;
  bool entropy_decreased = false;
  bool conflict_reduced = false;
};

SpecializationReport empirical_moe_specialization(
    const SpecializationConfig& cfg);

}  // namespace wmlab
