#include "wmlab/lora.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace wmlab {

Tensor AdaptedLinear::forward(const Tensor& x) const {
  Tensor y = base.forward(x);
  for (const auto& ad : adapters) {
    Tensor contrib = matmul(matmul(x, ad.a), ad.b);
    if (ad.stage < current_stage) contrib = contrib.detach();
    Tensor alpha =
        add(scale(tanh_t(ad.alpha_hat), alpha_range), Tensor::scalar(alpha_offset));
    y = add(y, mul(alpha, contrib));
  }
  return y;
}

void AdaptedLinear::add_stage(ParamStore& ps, int stage, int rank, Rng& rng) {
  if (stage <= current_stage)
    throw std::runtime_error("add_stage: stage must increase");
  LoraAdapter ad;
  ad.stage = stage;
  const std::string p = name + ".lora" + std::to_string(stage);
  ad.a = ps.create(p + ".a", {base.w.shape()[0], rank});
  ad.b = ps.create(p + ".b", {rank, base.w.shape()[1]});
  ad.alpha_hat = ps.create(p + ".alpha", {});
  const double std = 1.0 / std::sqrt(static_cast<double>(rank));
  for (double& v : ad.a.value()) v = rng.normal(0.0, std);
  // B stays zero: the new adapter contributes exactly nothing until trained
  adapters.push_back(ad);
  current_stage = stage;
}

double AdaptedLinear::effective_alpha(int adapter_idx) const {
  const auto& ad = adapters.at(adapter_idx);
  return alpha_offset + alpha_range * std::tanh(ad.alpha_hat.value()[0]);
}

AdaptedLinear make_adapted_linear(ParamStore& ps, const std::string& name,
                                  int in, int out, Rng& rng,
                                  double alpha_offset, double alpha_range) {
  AdaptedLinear al;
  al.name = name;
  al.base = make_linear(ps, name, in, out, rng);
  al.alpha_offset = alpha_offset;
  al.alpha_range = alpha_range;
  return al;
}

DpsController::DpsController(const DpsConfig& cfg, int64_t max_iters,
                             int n_tasks, ParamStore& ps,
                             std::vector<AdaptedLinear*> wrapped,
                             std::vector<std::string> freeze_prefixes,
                             uint64_t seed)
    : cfg_(cfg),
      max_iters_(max_iters),
      ps_(ps),
      wrapped_(std::move(wrapped)),
      freeze_prefixes_(std::move(freeze_prefixes)),
      rng_(seed),
      solved_(n_tasks, false),
      thresholds_(n_tasks, 0.0) {}

void DpsController::record_eval(int task, double ma_return) {
  const bool now = ma_return > thresholds_.at(task);
  if (now && !solved_[task]) ++newly_solved_;
  solved_[task] = now;
}

std::vector<int> DpsController::active_tasks() const {
  std::vector<int> act;
  for (size_t t = 0; t < solved_.size(); ++t)
    if (!solved_[t]) act.push_back(static_cast<int>(t));
  if (act.empty())
    for (size_t t = 0; t < solved_.size(); ++t) act.push_back(static_cast<int>(t));
  return act;
}

std::vector<int> DpsController::solved_tasks() const {
  std::vector<int> s;
  for (size_t t = 0; t < solved_.size(); ++t)
    if (solved_[t]) s.push_back(static_cast<int>(t));
  return s;
}

int64_t DpsController::stage_budget() const {
  if (cfg_.n_stages <= 0) return max_iters_;
  const int64_t rest = max_iters_ - cfg_.min_stage0_iters;
  return (rest + cfg_.n_stages - 1) / cfg_.n_stages;
}

bool DpsController::maybe_advance(int64_t iter) {
  if (!cfg_.enabled || stage_ >= cfg_.n_stages) return false;
  const int64_t in_stage = iter - stage_entry_iter_;
  const int64_t budget = stage_budget();
  bool due;
  if (stage_ == 0) {
    if (in_stage < cfg_.min_stage0_iters) return false;
    due = newly_solved_ >= cfg_.quota ||
          in_stage >= std::max<int64_t>(cfg_.min_stage0_iters, budget);
  } else {
    due = newly_solved_ >= cfg_.quota || in_stage >= budget;
  }
  if (!due) return false;
  advance(iter);
  return true;
}

void DpsController::advance(int64_t iter) {
  ++stage_;
  for (auto* al : wrapped_) al->add_stage(ps_, stage_, cfg_.rank, rng_);
  apply_freeze();
  snapshot();
  StageEvent ev;
  ev.stage = stage_;
  ev.iter = iter;
  ev.solved = solved_tasks();
  ev.alphas = alpha_matrix();
  events_.push_back(std::move(ev));
  stage_entry_iter_ = iter;
  newly_solved_ = 0;
}

void DpsController::apply_freeze() {
  for (auto& p : ps_.items()) {
    const size_t lora = p.name.find(".lora");
    if (lora == std::string::npos) {
      for (const auto& pre : freeze_prefixes_)
        if (p.name.rfind(pre, 0) == 0) p.trainable = false;
      continue;
    }
    // ".lora<j>.<a|b|alpha>"
    const size_t dot = p.name.find('.', lora + 1);
    const int j = std::stoi(p.name.substr(lora + 5, dot - (lora + 5)));
    const bool is_alpha = p.name.compare(dot, 6, ".alpha") == 0;
    p.trainable = is_alpha || j == stage_;
  }
}

void DpsController::snapshot() {
  frozen_snapshot_.clear();
  for (const auto& p : ps_.items())
    if (!p.trainable) frozen_snapshot_[p.name] = p.t.value();
}

std::vector<std::string> DpsController::freeze_violations() const {
  std::vector<std::string> bad;
  for (const auto& [name, vals] : frozen_snapshot_) {
    const Param* p = ps_.find(name);
    if (!p) {
      bad.push_back(name + " (missing)");
      continue;
    }
    const auto& cur = p->t.value();
    if (cur.size() != vals.size() ||
        std::memcmp(cur.data(), vals.data(), vals.size() * sizeof(double)) != 0)
      bad.push_back(name);
  }
  return bad;
}

std::vector<std::vector<double>> DpsController::alpha_matrix() const {
  std::vector<std::vector<double>> m;
  for (const auto* al : wrapped_) {
    std::vector<double> row;
    for (size_t j = 0; j < al->adapters.size(); ++j)
      row.push_back(al->effective_alpha(static_cast<int>(j)));
    m.push_back(std::move(row));
  }
  return m;
}

}  // namespace wmlab
