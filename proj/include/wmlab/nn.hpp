#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "wmlab/rng.hpp"
#include "wmlab/tensor.hpp"

namespace wmlab {

// Named leaf tensors in creation order. Creation order is the checkpoint and
// optimizer order, so it must be deterministic for a given config.
struct Param {
  std::string name;
  Tensor t;
  bool trainable = true;
};

class ParamStore {
 public:
  Tensor create(const std::string& name, std::vector<int> shape);
  std::vector<Param>& items() { return items_; }
  const std::vector<Param>& items() const { return items_; }
  Param* find(const std::string& name);
  const Param* find(const std::string& name) const;
  void zero_grad();
  // flips the trainable flag on every param whose name starts with prefix
  void set_trainable(const std::string& prefix, bool trainable);
  int64_t numel() const;

 private:
  std::vector<Param> items_;
};

// N(0, scale/sqrt(fan_in)) init, the house default for linear maps
void init_normal_fanin(Tensor& t, int fan_in, Rng& rng, double scale = 1.0);

struct Linear {
  Tensor w;  // [in, out]
  Tensor b;  // [out]
  Tensor forward(const Tensor& x) const { return add(matmul(x, w), b); }
};

Linear make_linear(ParamStore& ps, const std::string& name, int in, int out,
                   Rng& rng, double init_scale = 1.0);

struct Mlp {
  std::vector<Linear> layers;  // relu between, none after the last
  // `hidden`, when given, collects each post-relu intermediate
  Tensor forward(const Tensor& x, std::vector<Tensor>* hidden = nullptr) const;
};

Mlp make_mlp(ParamStore& ps, const std::string& name,
             const std::vector<int>& dims, Rng& rng);

// Per-group softmax over the trailing axis (group size v, temperature tau).
// Rows must be divisible by v.
Tensor simnorm(const Tensor& x, int v, double tau = 1.0);

// Categorical support for scalar targets: `bins` evenly spaced atoms over
// [lo, hi], targets encoded as a two-hot distribution over adjacent atoms.
struct Support {
  int bins = 21;
  double lo = -10.0, hi = 10.0;

  double step() const { return (hi - lo) / (bins - 1); }
  double center(int i) const { return lo + step() * i; }
  std::vector<double> two_hot(double x) const;
  // expectation of softmax(logits) under the atom centers
  double expectation_of_logits(const std::vector<double>& logits) const;
};

// -sum(target * log_softmax(logits)), logits [1,n] or [n], target constant
Tensor cross_entropy(const Tensor& logits, const std::vector<double>& target);

}  // namespace wmlab
