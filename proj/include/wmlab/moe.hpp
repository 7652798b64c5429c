#pragma once

#include <cstdint>
#include <deque>
#include <ostream>
#include <string>
#include <vector>

#include "wmlab/nn.hpp"

namespace wmlab {

// One routing decision: which non-shared expert a token was sent to, with the
// full gate distribution at that point.
struct RoutingRecord {
  int64_t step = 0;
  int task = 0;
  int layer = 0;
  int expert = 0;
  std::vector<double> probs;
};

class RoutingBuffer {
 public:
  explicit RoutingBuffer(size_t capacity = 10000) : cap_(capacity) {}
  void push(RoutingRecord r) {
    buf_.push_back(std::move(r));
    if (buf_.size() > cap_) buf_.pop_front();
  }
  size_t size() const { return buf_.size(); }
  size_t capacity() const { return cap_; }
  const std::deque<RoutingRecord>& records() const { return buf_; }
  void clear() { buf_.clear(); }
  void write_csv(std::ostream& os) const;

 private:
  size_t cap_;
  std::deque<RoutingRecord> buf_;
};

// Normalized histogram of expert selections for one task over the last
// `window` records of that task (all of them if fewer). All-zero if the task
// has no records.
std::vector<double> selection_distribution(const RoutingBuffer& rb, int task,
                                           size_t window, int n_experts);

// Shannon entropy in bits; 0 log 0 = 0. Input need not be normalized.
double entropy_bits(const std::vector<double>& dist);

// 1-D Wasserstein distance between two distributions on {0..n-1} with unit
// spacing: sum of |CDF difference|.
double wasserstein_1d(std::vector<double> p, std::vector<double> q);

// argmax with ties resolved to the lowest index
int argmax_tie_lowest(const std::vector<double>& v);

// Mixture-of-experts FFN: one always-on shared expert plus M non-shared
// experts under top-1 softmax gating. The selected expert's output is scaled
// by its full softmax probability, so the gate trains through the selected
// branch only; unselected experts stay out of the graph entirely.
struct MoeFfn {
  Linear gate;               // [width, M]
  std::vector<Mlp> experts;  // M two-layer MLPs
  Mlp shared;
  int layer = 0;

  int n_experts() const { return static_cast<int>(experts.size()); }
  // x: [1, width] token row. Appends one RoutingRecord if sink != nullptr;
  // `hidden` collects the shared and selected experts' post-relu rows.
  Tensor forward(const Tensor& x, int task, int64_t step, RoutingBuffer* sink,
                 std::vector<Tensor>* hidden = nullptr) const;
};

MoeFfn make_moe_ffn(ParamStore& ps, const std::string& name, int width,
                    int hidden, int n_experts, int layer, Rng& rng);

}  // namespace wmlab
