#pragma once

#include <cstdint>
#include <vector>

#include "wmlab/rng.hpp"

namespace wmlab {

// Synthetic clustered observations. A state is P patches of dimension d:
// one cluster-identity patch alpha*v_k, one context patch beta*c_k, one
// cross-cluster leak patch eps*gamma*v_k', and P-3 noise patches drawn from
// N(0, (sigma_p^2/d) I). Patch order is a seeded permutation. The directions
// {v_1..v_K, c_1..c_K} form an orthonormal set per task, so d >= 2K.
struct ClusterConfig {
  int n_clusters = 4;
  int patches = 4;       // P >= 3
  int dim = 8;           // d >= 2 * n_clusters
  double alpha = 1.0;
  double beta = 1.0;
  double gamma = 1.0;
  double eps = 0.1;
  double sigma_p = 1.0;

  int state_dim() const { return patches * dim; }
  void validate() const;
};

class ClusterStateGen {
 public:
  // task seeds the orthonormal basis; all tasks share the config
  ClusterStateGen(const ClusterConfig& cfg, int task, uint64_t seed);

  // flattened P*d state for cluster k; deterministic in (task, k, sample_seed)
  std::vector<double> sample(int cluster, uint64_t sample_seed) const;

  // permutation-invariant mean-pooled features (d dims), for the regression
  // harness
  std::vector<double> pooled(const std::vector<double>& state) const;

  const std::vector<std::vector<double>>& v() const { return v_; }
  const std::vector<std::vector<double>>& c() const { return c_; }
  const ClusterConfig& config() const { return cfg_; }

 private:
  ClusterConfig cfg_;
  std::vector<std::vector<double>> v_, c_;  // orthonormal direction sets
};

}  // namespace wmlab
