#pragma once

#include <map>
#include <string>
#include <vector>

#include "wmlab/model.hpp"
#include "wmlab/replay.hpp"
#include "wmlab/training.hpp"

namespace wmlab {

// max over pairs i != j of -cos(g_i, g_j). Zero vectors are excluded;
// throws std::invalid_argument if fewer than 2 usable vectors remain.
double max_gradient_conflict(const std::vector<std::vector<double>>& grads);

// fraction of units (columns) whose mean |activation| over the batch (rows)
// is <= eps
double dormant_ratio(const std::vector<std::vector<double>>& acts, double eps);
// relative threshold: eps = frac * mean |activation| over the whole matrix
double dormant_ratio_relative(const std::vector<std::vector<double>>& acts,
                              double frac = 0.01);

// singular values of a dense matrix (rows of equal length), descending
std::vector<double> singular_values(std::vector<std::vector<double>> a);
// exp(entropy of normalized singular values); throws on an all-zero matrix
double effective_rank(const std::vector<std::vector<double>>& phi);

// mean L2 norm over the batch
double latent_norm(const std::vector<std::vector<double>>& latents);

struct MocoConfig {
  double beta = 0.99;       // momentum on the normalized, loss-scaled grads
  double weight_lr = 10.0;  // gamma_w
  double rho = 0.0;         // lambda regularization
};

struct MocoState {
  std::vector<std::vector<double>> y;  // per-task momentum gradients
  std::vector<double> lambda;          // simplex weights
  void init(int n_tasks, size_t dim);
};

// One correction step:
//   g'_i = g_i / (|g_i| + 1e-8) * L_i
//   y_i <- (1 - beta) y_i + beta g'_i
//   lambda <- softmax(lambda - gamma_w (Y Y^T lambda + rho lambda))
// returns g_s = sum_i lambda_i y_i.
std::vector<double> moco_step(MocoState& st, const MocoConfig& cfg,
                              const std::vector<std::vector<double>>& grads,
                              const std::vector<double>& losses);

// Flattened per-task gradients for named scopes. Parameter scopes
// ("moe_layer", "expert_<m>", "shared_expert") cover the probed layer's
// parameters, zero-filled where a task never routed; activation scopes
// ("encoder_output", "moe_input") are gradients at the probe tensors,
// mean-pooled over captured rows.
struct TaskGradients {
  std::vector<int> tasks;
  // scope -> one flattened vector per entry of `tasks`
  std::map<std::string, std::vector<std::vector<double>>> by_scope;
};

// One backward per task sub-batch (loss scaled by the joint batch size, so
// the per-task gradients sum to the joint-batch gradient). Unknown scope
// names throw std::invalid_argument.
TaskGradients per_task_gradient_split(
    WorldModel& model, WorldModel& target, const std::vector<Segment>& batch,
    const std::vector<LossWeights>& per_task_w, int n_step, double discount,
    const std::vector<std::string>& scopes, int probe_layer);

}  // namespace wmlab
