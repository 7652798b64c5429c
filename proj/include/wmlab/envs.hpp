#pragma once

#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "wmlab/cluster.hpp"
#include "wmlab/types.hpp"

namespace wmlab {

// Deterministic tabular MDP: every (state, action) has a fixed successor and
// reward. `done` marks transitions into terminal states; episodes also end
// after `horizon` steps (truncation).
struct TabularMdp {
  struct Tr {
    int next = 0;
    double reward = 0.0;
    bool done = false;
  };
  int n_states = 0;
  int n_actions = 0;
  int start = 0;
  int horizon = 0;
  std::vector<std::vector<Tr>> trans;  // [state][action]
};

class Env {
 public:
  virtual ~Env() = default;
  virtual int obs_dim() const = 0;
  virtual ActionSpace action_space() const = 0;
  virtual int horizon() const = 0;
  virtual std::string name() const = 0;
  // return above which the task counts as solved; at most the achievable
  // optimum (0.9 * oracle optimal return for tabular tasks)
  virtual double solved_threshold() const = 0;
  virtual std::vector<double> reset(uint64_t seed) = 0;
  // throws if called after the episode finished
  virtual StepResult step(const Action& a) = 0;
  // underlying tabular model if the env has one, else nullptr
  virtual const TabularMdp* mdp() const { return nullptr; }
};

struct Suite {
  std::vector<std::unique_ptr<Env>> envs;
  int n_tasks() const { return static_cast<int>(envs.size()); }
};

// Suite names:
//   "chain" / "chain-k"  pairs of length-k chains with mirrored goals, so
//                        optimal policies take opposite actions (k defaults
//                        to 5; later pairs grow by 2)
//   "gridworld"          square grids 3x3, 4x4, ... (4x4 when count is 1)
//   "bandit-cluster"     one-step bandits over clustered observations; all
//                        tasks share one basis, task i sees cluster i
//   "point-mass"         2-D continuous control toward a per-task goal
//   "mixed"              chain-5 + grid-4x4 + one bandit task (count must
//                        be 3)
// Throws std::invalid_argument for unknown names.
Suite make_suite(const std::string& name, int count, uint64_t seed);

struct OracleValues {
  std::vector<double> v;                 // discounted V*
  std::vector<std::vector<double>> q;    // discounted Q*
  double optimal_return = 0.0;           // undiscounted, within horizon
};

// Value iteration to `tol` sup-norm residual, plus finite-horizon backward
// induction for the undiscounted optimal return from the start state.
OracleValues oracle_value(const TabularMdp& mdp, double discount,
                          double tol = 1e-10);

// convenience over env.mdp(); throws for envs without a tabular model
OracleValues oracle_for(const Env& env, double discount, double tol = 1e-10);

// all actions within tol of the best Q at `state`
std::vector<int> greedy_actions(const OracleValues& ov, int state,
                                double tol = 1e-9);

}  // namespace wmlab
