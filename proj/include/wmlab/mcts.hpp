#pragma once

#include <memory>
#include <string>
#include <vector>

#include "wmlab/rng.hpp"
#include "wmlab/types.hpp"

namespace wmlab {

struct GaussianPolicy {
  std::vector<double> mean;
  std::vector<double> log_std;
};

// Model output at a node: value plus either a distribution over discrete
// actions or Gaussian policy parameters for sampled continuous actions.
struct Prediction {
  std::vector<double> policy;
  GaussianPolicy gauss;
  double value = 0.0;
};

// Anything the search can plan through: the learned world model, or an exact
// tabular stand-in for tests. State handles are opaque and immutable.
class PlanningModel {
 public:
  virtual ~PlanningModel() = default;
  virtual ActionSpace action_space(int task) const = 0;
  virtual std::shared_ptr<const void> initial(int task,
                                              const std::vector<double>& obs,
                                              Prediction& out) = 0;
  virtual std::shared_ptr<const void> step(int task,
                                           const std::shared_ptr<const void>& state,
                                           const Action& action, double& reward,
                                           Prediction& out) = 0;
};

struct SearchConfig {
  int n_simulations = 50;
  double c1 = 1.25;
  double c2 = 19652.0;
  double discount = 0.99;
  double dirichlet_alpha = 0.3;
  double exploration_frac = 0.25;  // root prior noise mix-in during collection
  bool add_noise = true;
  double temperature = 1.0;  // 0 => greedy argmax over visit counts
  int n_candidates = 8;      // sampled actions for continuous tasks
};

struct SearchResult {
  std::vector<Action> actions;      // root candidate actions
  std::vector<int> visit_counts;    // per root action
  std::vector<double> policy;       // visit distribution at `temperature`
  double root_value = 0.0;
  int chosen = 0;                   // index into actions
  std::vector<std::string> trace;   // one line per simulation
};

SearchResult run_search(PlanningModel& model, int task,
                        const std::vector<double>& obs, const SearchConfig& cfg,
                        Rng& rng, bool want_trace = false);

// visit-count policy N^(1/T); T == 0 picks the argmax (lowest index on ties)
std::vector<double> visit_policy(const std::vector<int>& visits, double temperature);

// n-step discounted return from t with bootstrap. `rewards` is the episode
// reward sequence, `boot` the (target-model) values of the stored
// observations, indexed like obs: boot[i] is the value at obs index i.
// Terminal episodes bootstrap 0 past the end; truncated ones bootstrap from
// the final observation.
double n_step_value_target(const std::vector<double>& rewards,
                           const std::vector<double>& boot, int t, int n,
                           double discount, bool terminal);

}  // namespace wmlab
