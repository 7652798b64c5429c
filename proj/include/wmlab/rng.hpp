#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace wmlab {

// splitmix64; used to derive independent stream seeds from (seed, stream id)
// so parallel workers can reproduce results regardless of scheduling.
inline uint64_t mix64(uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline uint64_t derive_seed(uint64_t seed, uint64_t stream) {
  return mix64(seed ^ mix64(stream));
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(gen_);
  }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(gen_);
  }
  // inclusive bounds
  int randint(int lo, int hi) {
    return std::uniform_int_distribution<int>(lo, hi)(gen_);
  }
  double gamma(double alpha) {
    return std::gamma_distribution<double>(alpha, 1.0)(gen_);
  }
  std::vector<double> dirichlet(double alpha, int n) {
    std::vector<double> x(n);
    double s = 0.0;
    for (int i = 0; i < n; ++i) {
      x[i] = gamma(alpha);
      s += x[i];
    }
    if (s <= 0.0) s = 1.0;
    for (double& v : x) v /= s;
    return x;
  }
  // sample index from unnormalized non-negative weights
  int categorical(const std::vector<double>& w) {
    double total = 0.0;
    for (double v : w) total += v;
    double u = uniform(0.0, total);
    double acc = 0.0;
    for (size_t i = 0; i < w.size(); ++i) {
      acc += w[i];
      if (u <= acc) return static_cast<int>(i);
    }
    return static_cast<int>(w.size()) - 1;
  }

  std::mt19937_64& engine() { return gen_; }

 private:
  std::mt19937_64 gen_;
};

}  // namespace wmlab
