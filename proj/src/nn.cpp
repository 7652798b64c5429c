#include "wmlab/nn.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace wmlab {

Tensor ParamStore::create(const std::string& name, std::vector<int> shape) {
  if (find(name)) throw std::runtime_error("param already exists: " + name);
  Param p;
  p.name = name;
  p.t = Tensor::zeros(std::move(shape), /*requires_grad=*/true);
  items_.push_back(p);
  return items_.back().t;
}

Param* ParamStore::find(const std::string& name) {
  for (auto& p : items_)
    if (p.name == name) return &p;
  return nullptr;
}

const Param* ParamStore::find(const std::string& name) const {
  for (const auto& p : items_)
    if (p.name == name) return &p;
  return nullptr;
}

void ParamStore::zero_grad() {
  for (auto& p : items_) p.t.zero_grad();
}

void ParamStore::set_trainable(const std::string& prefix, bool trainable) {
  for (auto& p : items_)
    if (p.name.rfind(prefix, 0) == 0) p.trainable = trainable;
}

int64_t ParamStore::numel() const {
  int64_t n = 0;
  for (const auto& p : items_) n += p.t.numel();
  return n;
}

void init_normal_fanin(Tensor& t, int fan_in, Rng& rng, double scale) {
  const double std = scale / std::sqrt(static_cast<double>(std::max(1, fan_in)));
  for (double& v : t.value()) v = rng.normal(0.0, std);
}

Linear make_linear(ParamStore& ps, const std::string& name, int in, int out,
                   Rng& rng, double init_scale) {
  Linear l;
  l.w = ps.create(name + ".w", {in, out});
  l.b = ps.create(name + ".b", {out});
  init_normal_fanin(l.w, in, rng, init_scale);
  return l;
}

Tensor Mlp::forward(const Tensor& x, std::vector<Tensor>* hidden) const {
  Tensor h = x;
  for (size_t i = 0; i < layers.size(); ++i) {
    h = layers[i].forward(h);
    if (i + 1 < layers.size()) {
      h = relu(h);
      if (hidden) hidden->push_back(h);
    }
  }
  return h;
}

Mlp make_mlp(ParamStore& ps, const std::string& name,
             const std::vector<int>& dims, Rng& rng) {
  if (dims.size() < 2) throw std::runtime_error("make_mlp: need at least 2 dims");
  Mlp m;
  for (size_t i = 0; i + 1 < dims.size(); ++i)
    m.layers.push_back(make_linear(ps, name + "." + std::to_string(i), dims[i],
                                   dims[i + 1], rng));
  return m;
}

Tensor simnorm(const Tensor& x, int v, double tau) {
  const int n = x.cols();
  const int m = x.rows();
  if (v <= 0 || n % v != 0)
    throw std::invalid_argument("simnorm: width not divisible by group size");
  Tensor g = reshape(x, {m * (n / v), v});
  if (tau != 1.0) g = scale(g, 1.0 / tau);
  return reshape(softmax_rows(g), x.rank() == 1 ? std::vector<int>{n}
                                                : std::vector<int>{m, n});
}

std::vector<double> Support::two_hot(double x) const {
  std::vector<double> t(bins, 0.0);
  const double cl = std::clamp(x, lo, hi);
  const double pos = (cl - lo) / step();
  int i = static_cast<int>(std::floor(pos));
  if (i >= bins - 1) {
    t[bins - 1] = 1.0;
    return t;
  }
  const double w = pos - i;
  t[i] = 1.0 - w;
  t[i + 1] = w;
  return t;
}

double Support::expectation_of_logits(const std::vector<double>& logits) const {
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double z = 0.0;
  for (double v : logits) z += std::exp(v - mx);
  double e = 0.0;
  for (int i = 0; i < bins; ++i) e += std::exp(logits[i] - mx) / z * center(i);
  return e;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<double>& target) {
  if (static_cast<size_t>(logits.numel()) != target.size())
    throw std::invalid_argument("cross_entropy: size mismatch");
  Tensor ls = log_softmax_rows(logits);
  Tensor tgt = Tensor::from(std::vector<double>(target), logits.shape());
  return neg(sum(mul(ls, tgt)));
}

}  // namespace wmlab
