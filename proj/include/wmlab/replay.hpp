#pragma once

#include <deque>
#include <memory>
#include <vector>

#include "wmlab/rng.hpp"
#include "wmlab/types.hpp"

namespace wmlab {

// One finished episode. `terminal` distinguishes reaching a terminal state
// from running out of horizon; value targets bootstrap 0 only past a
// terminal end.
struct Episode {
  int task = 0;
  std::vector<std::vector<double>> obs;        // length L + 1
  std::vector<Action> actions;                 // length L
  std::vector<double> rewards;                 // length L
  std::vector<std::vector<double>> policies;   // length L, each sums to 1
  std::vector<double> root_values;             // length L
  // continuous tasks: the sampled root actions each policy row refers to
  std::vector<std::vector<Action>> candidates;
  bool terminal = false;

  int length() const { return static_cast<int>(actions.size()); }
  void validate() const;  // throws std::invalid_argument on inconsistency
};

// A sampled training window: transitions start .. start+len-1 of one
// episode. len < H means the episode ended; the loss masks the tail.
struct Segment {
  std::shared_ptr<const Episode> ep;
  int start = 0;
  int len = 0;
};

// Per-task episode rings with a per-task transition budget. Sampling is
// uniform over stored transitions; a segment never crosses an episode
// boundary.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(int n_tasks, size_t capacity_per_task = 100000);

  void add(Episode ep);
  size_t size(int task) const { return sizes_.at(task); }          // transitions
  size_t episode_count(int task) const { return rings_.at(task).size(); }
  bool can_sample(int task) const { return sizes_.at(task) > 0; }
  int n_tasks() const { return static_cast<int>(rings_.size()); }

  Segment sample_segment(int task, int H, Rng& rng) const;

  // global_batch segments split evenly over the sampleable subset of
  // `active` (remainder round-robin by ascending task index). Tasks with
  // empty buffers are skipped.
  std::vector<Segment> build_multitask_batch(const std::vector<int>& active,
                                             int global_batch, int H,
                                             Rng& rng) const;

 private:
  std::vector<std::deque<std::shared_ptr<const Episode>>> rings_;
  std::vector<size_t> sizes_;
  size_t cap_;
};

}  // namespace wmlab
