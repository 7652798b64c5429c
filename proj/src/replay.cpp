#include "wmlab/replay.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace wmlab {

void Episode::validate() const {
  const size_t L = actions.size();
  if (L == 0) throw std::invalid_argument("episode: empty");
  if (obs.size() != L + 1)
    throw std::invalid_argument("episode: need L+1 observations");
  if (rewards.size() != L || policies.size() != L || root_values.size() != L)
    throw std::invalid_argument("episode: per-step field length mismatch");
  for (const auto& p : policies) {
    double s = 0.0;
    for (double x : p) s += x;
    if (std::abs(s - 1.0) > 1e-6)
      throw std::invalid_argument("episode: search policy sums to " +
                                  std::to_string(s));
  }
  if (!candidates.empty()) {
    if (candidates.size() != L)
      throw std::invalid_argument("episode: candidate list length mismatch");
    for (size_t t = 0; t < L; ++t)
      if (candidates[t].size() != policies[t].size())
        throw std::invalid_argument(
            "episode: candidates do not match policy support");
  }
}

ReplayBuffer::ReplayBuffer(int n_tasks, size_t capacity_per_task)
    : rings_(n_tasks), sizes_(n_tasks, 0), cap_(capacity_per_task) {
  if (n_tasks < 1) throw std::invalid_argument("replay: need >= 1 task");
  if (cap_ < 1) throw std::invalid_argument("replay: capacity must be >= 1");
}

void ReplayBuffer::add(Episode ep) {
  ep.validate();
  const int t = ep.task;
  if (t < 0 || t >= n_tasks())
    throw std::invalid_argument("replay: bad task id");
  sizes_[t] += ep.length();
  rings_[t].push_back(std::make_shared<const Episode>(std::move(ep)));
  while (sizes_[t] > cap_ && rings_[t].size() > 1) {
    sizes_[t] -= rings_[t].front()->length();
    rings_[t].pop_front();
  }
}

Segment ReplayBuffer::sample_segment(int task, int H, Rng& rng) const {
  if (task < 0 || task >= n_tasks())
    throw std::invalid_argument("replay: bad task id");
  if (H < 1) throw std::invalid_argument("replay: segment length must be >= 1");
  const auto& ring = rings_[task];
  if (sizes_[task] == 0)
    throw std::runtime_error("replay: empty buffer for task " +
                             std::to_string(task));
  size_t u = static_cast<size_t>(
      rng.randint(0, static_cast<int>(sizes_[task]) - 1));
  for (const auto& ep : ring) {
    const size_t L = static_cast<size_t>(ep->length());
    if (u < L) {
      Segment s;
      s.ep = ep;
      s.start = static_cast<int>(u);
      s.len = std::min(H, ep->length() - s.start);
      return s;
    }
    u -= L;
  }
  throw std::logic_error("replay: size bookkeeping out of sync");
}

std::vector<Segment> ReplayBuffer::build_multitask_batch(
    const std::vector<int>& active, int global_batch, int H, Rng& rng) const {
  if (global_batch < 1)
    throw std::invalid_argument("replay: batch size must be >= 1");
  std::vector<int> usable;
  for (int t : active)
    if (t >= 0 && t < n_tasks() && can_sample(t)) usable.push_back(t);
  std::vector<Segment> batch;
  if (usable.empty()) return batch;
  const int k = static_cast<int>(usable.size());
  const int base = global_batch / k;
  const int rem = global_batch % k;
  batch.reserve(global_batch);
  for (int i = 0; i < k; ++i) {
    const int n = base + (i < rem ? 1 : 0);
    for (int j = 0; j < n; ++j)
      batch.push_back(sample_segment(usable[i], H, rng));
  }
  return batch;
}

}  // namespace wmlab
