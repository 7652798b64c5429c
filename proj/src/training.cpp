#include "wmlab/training.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace wmlab {

void LossWeights::validate() const {
  if (beta_z < 0 || beta_r < 0 || beta_p < 0 || beta_v < 0)
    throw std::invalid_argument("loss weights must be non-negative");
}

LossWeights default_loss_weights(bool discrete) {
  LossWeights w;
  if (!discrete) {
    w.beta_r = 0.1;
    w.beta_p = 0.1;
    w.beta_v = 0.1;
  }
  return w;
}

LossTerms& LossTerms::operator+=(const LossTerms& o) {
  z += o.z;
  r += o.r;
  p += o.p;
  v += o.v;
  steps += o.steps;
  return *this;
}

namespace {

// inverse of the candidate squashing: u with a = lo + (hi-lo)(tanh(u)+1)/2
double unsquash(double a, double lo, double hi) {
  double f = (a - lo) / (hi - lo) * 2.0 - 1.0;
  f = std::clamp(f, -1.0 + 1e-9, 1.0 - 1e-9);
  return std::atanh(f);
}

// Visit-weighted negative log-likelihood of the sampled root actions under
// the predicted tanh-squashed Gaussian. The squash correction and the
// Gaussian normalizer depend only on the stored actions, so they enter as
// constants: they shift the reported value without touching gradients.
Tensor continuous_policy_loss(const Tensor& logits, const ActionSpace& sp,
                              const std::vector<Action>& cands,
                              const std::vector<double>& pi) {
  const int dim = sp.dim;
  Tensor mu = slice_cols(logits, 0, dim);
  Tensor raw = slice_cols(logits, dim, 2 * dim);
  // same bounding as prediction: log_std in [-4, 1]
  Tensor log_std = add(scale(tanh_t(raw), 2.5), Tensor::scalar(-1.5));
  Tensor inv_std = exp_t(neg(log_std));
  Tensor sum_log_std = sum(log_std);

  Tensor loss = Tensor::scalar(0.0);
  for (size_t i = 0; i < cands.size(); ++i) {
    if (pi[i] == 0.0) continue;
    std::vector<double> u(dim);
    double c = 0.0;  // constant part: normalizer + tanh correction
    for (int d = 0; d < dim; ++d) {
      u[d] = unsquash(cands[i].vec.at(d), sp.lo, sp.hi);
      const double th = std::tanh(u[d]);
      c += 0.5 * std::log(2.0 * M_PI);
      c += std::log((sp.hi - sp.lo) * 0.5 * (1.0 - th * th) + 1e-12);
    }
    Tensor diff = sub(Tensor::from(std::move(u), {1, dim}), mu);
    Tensor nll = add(scale(sum(square(mul(diff, inv_std))), 0.5),
                     add(sum_log_std, Tensor::scalar(c)));
    loss = add(loss, scale(nll, pi[i]));
  }
  return loss;
}

std::vector<double> boot_values(WorldModel& target, const Episode& ep,
                                int start, int len, int n_step) {
  const int L = ep.length();
  std::vector<double> boot(L + 1, 0.0);
  std::vector<char> need(L + 1, 0);
  for (int t = start; t < start + len; ++t) {
    const int idx = t + n_step;
    if (idx < L)
      need[idx] = 1;
    else if (!ep.terminal)
      need[L] = 1;
  }
  for (int i = 0; i <= L; ++i) {
    if (!need[i]) continue;
    Prediction pr;
    target.plan_init(ep.task, ep.obs[i], pr);
    boot[i] = pr.value;
  }
  return boot;
}

double term_or_throw(const Tensor& t, const char* name) {
  const double x = t.item();
  if (!std::isfinite(x))
    throw std::runtime_error(std::string("non-finite ") + name + " loss");
  return x;
}

}  // namespace

Tensor segment_loss(WorldModel& model, WorldModel& target, const Segment& seg,
                    const LossWeights& w, int n_step, double discount,
                    LossTerms& terms, ProbeSink* probe) {
  w.validate();
  const Episode& ep = *seg.ep;
  const int task = ep.task;
  const auto& sp = model.config().action_spaces.at(task);
  const Support& sup = model.config().support;

  const std::vector<double> boot =
      boot_values(target, ep, seg.start, seg.len, n_step);

  // target latents for the observed next states, grad-free constants
  std::vector<Tensor> ztarg;
  ztarg.reserve(seg.len);
  {
    NoGradGuard ng;
    for (int t = 0; t < seg.len; ++t)
      ztarg.push_back(target.encode(task, ep.obs[seg.start + t + 1]));
  }

  Seq s = model.begin_seq(task, /*plan_mode=*/false);
  Tensor z = model.encode(task, ep.obs[seg.start], probe);
  Tensor lz = Tensor::scalar(0.0), lr = Tensor::scalar(0.0);
  Tensor lp = Tensor::scalar(0.0), lv = Tensor::scalar(0.0);
  for (int t = 0; t < seg.len; ++t) {
    const int g = seg.start + t;
    Tensor h = model.append_state(s, z, probe);

    Tensor pol = model.policy_head(task, h);
    if (sp.discrete)
      lp = add(lp, cross_entropy(pol, ep.policies[g]));
    else
      lp = add(lp, continuous_policy_loss(pol, sp, ep.candidates.at(g),
                                          ep.policies[g]));

    const double vt = n_step_value_target(ep.rewards, boot, g, n_step,
                                          discount, ep.terminal);
    lv = add(lv, cross_entropy(model.value_head(task, h), sup.two_hot(vt)));

    Tensor ha = model.append_action(s, ep.actions[g], probe);
    lr = add(lr,
             cross_entropy(model.reward_head(task, ha), sup.two_hot(ep.rewards[g])));

    Tensor zn = model.next_latent(ha);
    // ztarg was built under NoGradGuard, so it is a constant here
    lz = add(lz, mean(square(sub(zn, ztarg[t]))));
    z = zn;  // the prediction feeds the next state token
  }

  terms.z = w.beta_z * term_or_throw(lz, "observation");
  terms.r = w.beta_r * term_or_throw(lr, "reward");
  terms.p = w.beta_p * term_or_throw(lp, "policy");
  terms.v = w.beta_v * term_or_throw(lv, "value");
  terms.steps = seg.len;

  return add(add(scale(lz, w.beta_z), scale(lr, w.beta_r)),
             add(scale(lp, w.beta_p), scale(lv, w.beta_v)));
}

void AdamW::step() {
  ++t_;
  auto& items = ps_.items();
  if (m_.size() < items.size()) {
    m_.resize(items.size());
    v_.resize(items.size());
    steps_.resize(items.size(), 0);
  }
  for (size_t i = 0; i < items.size(); ++i) {
    Param& p = items[i];
    if (!p.trainable) continue;
    auto& val = p.t.value();
    auto& grad = p.t.grad();
    if (m_[i].size() != val.size()) {
      m_[i].assign(val.size(), 0.0);
      v_[i].assign(val.size(), 0.0);
    }
    const int64_t tt = ++steps_[i];
    const double bc1 = 1.0 - std::pow(cfg_.beta1, double(tt));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, double(tt));
    for (size_t j = 0; j < val.size(); ++j) {
      const double g = grad[j];
      m_[i][j] = cfg_.beta1 * m_[i][j] + (1.0 - cfg_.beta1) * g;
      v_[i][j] = cfg_.beta2 * v_[i][j] + (1.0 - cfg_.beta2) * g * g;
      const double mhat = m_[i][j] / bc1;
      const double vhat = v_[i][j] / bc2;
      val[j] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                           cfg_.weight_decay * val[j]);
    }
  }
}

double global_grad_norm(const ParamStore& ps) {
  double s = 0.0;
  for (const auto& p : ps.items()) {
    if (!p.trainable) continue;
    for (double g : p.t.grad()) s += g * g;
  }
  return std::sqrt(s);
}

double clip_grad_norm(ParamStore& ps, double max_norm) {
  const double n = global_grad_norm(ps);
  if (n > max_norm && n > 0.0) {
    const double f = max_norm / n;
    for (auto& p : ps.items()) {
      if (!p.trainable) continue;
      for (double& g : p.t.grad()) g *= f;
    }
  }
  return n;
}

TrainStepResult train_step(WorldModel& model, WorldModel& target, AdamW& opt,
                           const std::vector<Segment>& batch,
                           const std::vector<LossWeights>& per_task_w,
                           int n_step, double discount, double clip_norm) {
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  TrainStepResult out;
  out.batch = static_cast<int>(batch.size());
  const double inv_b = 1.0 / out.batch;
  model.params().zero_grad();
  for (const auto& seg : batch) {
    LossTerms terms;
    Tensor loss = segment_loss(model, target, seg, per_task_w.at(seg.ep->task),
                               n_step, discount, terms);
    backward(scale(loss, inv_b));
    terms.z *= inv_b;
    terms.r *= inv_b;
    terms.p *= inv_b;
    terms.v *= inv_b;
    out.terms += terms;
    out.per_task[seg.ep->task] += terms;
  }
  out.grad_norm = clip_grad_norm(model.params(), clip_norm);
  opt.step();
  return out;
}

double temperature_for(int64_t env_step, int64_t budget) {
  return env_step * 2 < budget ? 1.0 : 0.5;
}

}  // namespace wmlab
