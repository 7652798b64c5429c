#include "wmlab/moe.hpp"

#include <cmath>
#include <stdexcept>

namespace wmlab {

void RoutingBuffer::write_csv(std::ostream& os) const {
  os << "step,task,layer,expert,probs\n";
  for (const auto& r : buf_) {
    os << r.step << "," << r.task << "," << r.layer << "," << r.expert << ",";
    for (size_t i = 0; i < r.probs.size(); ++i) {
      if (i) os << ";";
      char tmp[32];
      snprintf(tmp, sizeof(tmp), "%.12g", r.probs[i]);
      os << tmp;
    }
    os << "\n";
  }
}

std::vector<double> selection_distribution(const RoutingBuffer& rb, int task,
                                           size_t window, int n_experts) {
  std::vector<double> counts(n_experts, 0.0);
  size_t seen = 0;
  for (auto it = rb.records().rbegin();
       it != rb.records().rend() && seen < window; ++it) {
    if (it->task != task) continue;
    if (it->expert < 0 || it->expert >= n_experts)
      throw std::runtime_error("selection_distribution: expert out of range");
    counts[it->expert] += 1.0;
    ++seen;
  }
  double total = 0.0;
  for (double c : counts) total += c;
  if (total > 0.0)
    for (double& c : counts) c /= total;
  return counts;
}

double entropy_bits(const std::vector<double>& dist) {
  double total = 0.0;
  for (double p : dist) total += p;
  if (total <= 0.0) return 0.0;
  double h = 0.0;
  for (double p : dist) {
    const double q = p / total;
    if (q > 0.0) h -= q * std::log2(q);
  }
  return h;
}

double wasserstein_1d(std::vector<double> p, std::vector<double> q) {
  if (p.size() != q.size())
    throw std::invalid_argument("wasserstein_1d: size mismatch");
  double sp = 0.0, sq = 0.0;
  for (double v : p) sp += v;
  for (double v : q) sq += v;
  if (sp <= 0.0 || sq <= 0.0)
    throw std::invalid_argument("wasserstein_1d: empty distribution");
  double cp = 0.0, cq = 0.0, d = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    cp += p[i] / sp;
    cq += q[i] / sq;
    d += std::abs(cp - cq);
  }
  return d;
}

int argmax_tie_lowest(const std::vector<double>& v) {
  int best = 0;
  for (size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = static_cast<int>(i);
  return best;
}

Tensor MoeFfn::forward(const Tensor& x, int task, int64_t step,
                       RoutingBuffer* sink, std::vector<Tensor>* hidden) const {
  Tensor logits = gate.forward(x);          // [1, M]
  Tensor probs = softmax_rows(logits);      // [1, M]
  const int m = argmax_tie_lowest(probs.value());
  Tensor pm = reshape(slice_cols(probs, m, m + 1), {});
  Tensor out = add(shared.forward(x, hidden),
                   mul(pm, experts[m].forward(x, hidden)));
  if (sink) sink->push({step, task, layer, m, probs.value()});
  return out;
}

MoeFfn make_moe_ffn(ParamStore& ps, const std::string& name, int width,
                    int hidden, int n_experts, int layer, Rng& rng) {
  if (n_experts < 1) throw std::invalid_argument("make_moe_ffn: need >= 1 expert");
  MoeFfn moe;
  moe.layer = layer;
  // small random gate init: zero-init plus lowest-index tie-breaking would pin
  // every token to expert 0 on the first step
  moe.gate.w = ps.create(name + ".gate.w", {width, n_experts});
  moe.gate.b = ps.create(name + ".gate.b", {n_experts});
  for (double& v : moe.gate.w.value()) v = rng.normal(0.0, 0.02);
  for (int e = 0; e < n_experts; ++e)
    moe.experts.push_back(make_mlp(
        ps, name + ".expert" + std::to_string(e), {width, hidden, width}, rng));
  moe.shared = make_mlp(ps, name + ".shared", {width, hidden, width}, rng);
  return moe;
}

}  // namespace wmlab
