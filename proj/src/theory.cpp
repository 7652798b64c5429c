#include "wmlab/theory.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>

#include "wmlab/diagnostics.hpp"
#include "wmlab/moe.hpp"
#include "wmlab/nn.hpp"
#include "wmlab/tensor.hpp"
#include "wmlab/training.hpp"

namespace wmlab {

namespace {

void check_counts(int n_experts, int n_tasks) {
  if (n_experts < 1 || n_tasks < 1)
    throw std::invalid_argument("expert and task counts must be positive");
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

// sample standard error from integer sums of a per-trial statistic
double stderr_from_sums(int64_t s1, int64_t s2, int64_t n) {
  double mean = static_cast<double>(s1) / static_cast<double>(n);
  double var = (static_cast<double>(s2) - static_cast<double>(n) * mean * mean) /
               static_cast<double>(n - 1);
  return std::sqrt(std::max(0.0, var) / static_cast<double>(n));
}

}  // namespace

double q_single(int n_experts, int n_tasks) {
  check_counts(n_experts, n_tasks);
  const double miss = 1.0 - 1.0 / n_experts;
  return 1.0 - std::pow(miss, n_tasks) -
         n_tasks * (1.0 / n_experts) * std::pow(miss, n_tasks - 1);
}

double q_layer(int n_experts, int n_tasks) {
  check_counts(n_experts, n_tasks);
  if (n_tasks > n_experts) return 1.0;
  namespace mp = boost::multiprecision;
  mp::cpp_int num = 1, den = 1;
  for (int i = 0; i < n_tasks; ++i) {
    num *= n_experts - i;
    den *= n_experts;
  }
  mp::cpp_rational q = 1 - mp::cpp_rational(num, den);
  return q.convert_to<double>();
}

void RoutingModel::validate() const {
  check_counts(n_experts, n_tasks);
  if (delta < 0.0 || delta > 1.0)
    throw std::invalid_argument("delta must be in [0, 1]");
  if (stage == RoutingStage::kExploration) return;
  if (n_tasks < 2)
    throw std::invalid_argument("router-learning stage needs at least 2 tasks");
  if (static_cast<int>(sets.size()) != n_tasks)
    throw std::invalid_argument("need one expert set per task");
  for (const auto& s : sets) {
    if (s.empty()) throw std::invalid_argument("empty expert set");
    for (size_t i = 0; i < s.size(); ++i) {
      if (s[i] < 0 || s[i] >= n_experts)
        throw std::invalid_argument("expert index out of range");
      if (i > 0 && s[i] <= s[i - 1])
        throw std::invalid_argument("expert sets must be strictly increasing");
    }
    if (delta > 0.0 && static_cast<int>(s.size()) >= n_experts)
      throw std::invalid_argument(
          "leakage requires every expert set to be a proper subset");
  }
}

int RoutingModel::select(int task, Rng& rng) const {
  if (stage == RoutingStage::kExploration) return rng.randint(0, n_experts - 1);
  const auto& s = sets[task];
  if (delta > 0.0 && rng.uniform() < delta) {
    // uniform over the complement: idx-th expert not in the (sorted) set
    int e = rng.randint(0, n_experts - static_cast<int>(s.size()) - 1);
    for (int m : s) {
      if (m <= e) ++e;
    }
    return e;
  }
  return s[rng.randint(0, static_cast<int>(s.size()) - 1)];
}

PairwiseCollisionForms pairwise_collision_forms(int n_experts, int a, int b,
                                                int overlap, double delta) {
  const int m = n_experts;
  if (m < 1 || a < 1 || b < 1 || a > m || b > m)
    throw std::invalid_argument("set sizes must be in [1, n_experts]");
  if (overlap < 0 || overlap > std::min(a, b) || a + b - overlap > m)
    throw std::invalid_argument("impossible overlap");
  if (delta < 0.0 || delta > 1.0)
    throw std::invalid_argument("delta must be in [0, 1]");
  if (delta > 0.0 && (a >= m || b >= m))
    throw std::invalid_argument(
        "leakage requires every expert set to be a proper subset");

  const double in_a = (1.0 - delta) / a;
  const double in_b = (1.0 - delta) / b;
  const double leak_a = a < m ? delta / (m - a) : 0.0;
  const double leak_b = b < m ? delta / (m - b) : 0.0;
  const int u = overlap;
  const int outside = m - (a + b - u);

  PairwiseCollisionForms f;
  // three-term expression: every in-set factor padded by its leakage term,
  // the single-set block leaking through task 1 only
  f.written = u * (in_a + leak_a) * (in_b + leak_b) +
              (a - u + b - u) * (in_a + leak_a) * leak_b +
              outside * leak_a * leak_b;
  // the same expression with the single-set block split by owner
  f.symmetric = u * (in_a + leak_a) * (in_b + leak_b) +
                (a - u) * (in_a + leak_a) * leak_b +
                (b - u) * (in_b + leak_b) * leak_a + outside * leak_a * leak_b;
  // the process itself: an in-set expert is reachable only via the in-set
  // branch, an outside expert only via leakage
  f.exact = u * in_a * in_b + (a - u) * in_a * leak_b + (b - u) * in_b * leak_a +
            outside * leak_a * leak_b;
  f.leading = static_cast<double>(u) / (static_cast<double>(a) * b);
  return f;
}

SubsetSumForms subset_sum_forms(const RoutingModel& model) {
  model.validate();
  if (model.stage != RoutingStage::kRouterLearning)
    throw std::invalid_argument("subset sums apply to the router-learning stage");
  const int k = model.n_tasks;
  if (k > 4)
    throw std::invalid_argument("subset enumeration is limited to 4 tasks");

  const int m = model.n_experts;
  SubsetSumForms out;
  for (int mask = 0; mask < (1 << k); ++mask) {
    if (__builtin_popcount(static_cast<unsigned>(mask)) < 2) continue;
    // intersection of the subset's expert sets
    std::vector<int> inter;
    bool first = true;
    double prod_written = 1.0, prod_exact = 1.0;
    for (int t = 0; t < k; ++t) {
      if (!(mask >> t & 1)) continue;
      const auto& s = model.sets[t];
      if (first) {
        inter = s;
        first = false;
      } else {
        std::vector<int> next;
        std::set_intersection(inter.begin(), inter.end(), s.begin(), s.end(),
                              std::back_inserter(next));
        inter = std::move(next);
      }
      const int a = static_cast<int>(s.size());
      const double in_t = (1.0 - model.delta) / a;
      const double leak_t = a < m ? model.delta / (m - a) : 0.0;
      prod_written *= in_t + leak_t;
      prod_exact *= in_t;
    }
    out.written += inter.size() * prod_written;
    out.exact += inter.size() * prod_exact;
  }
  return out;
}

BoundReport make_report(std::string name, double closed_form, double estimate,
                        double std_error, int64_t n_trials, double abs_tol) {
  BoundReport r;
  r.name = std::move(name);
  r.closed_form = closed_form;
  r.estimate = estimate;
  r.std_error = std_error;
  r.n_trials = n_trials;
  r.abs_tol = abs_tol;
  r.verdict = std::abs(estimate - closed_form) <= 3.0 * std_error + abs_tol;
  return r;
}

std::vector<BoundReport> mc_collision_probability(const RoutingModel& model,
                                                  int64_t n_trials,
                                                  uint64_t seed) {
  model.validate();
  if (n_trials < 10000)
    throw std::invalid_argument("need at least 10^4 trials");

  const int m = model.n_experts;
  const int k = model.n_tasks;
  std::vector<BoundReport> out;

  if (model.stage == RoutingStage::kExploration) {
    int64_t sum_ge2 = 0, sum_ge2_sq = 0, any_hits = 0;
#pragma omp parallel for schedule(static) \
    reduction(+ : sum_ge2, sum_ge2_sq, any_hits)
    for (int64_t trial = 0; trial < n_trials; ++trial) {
      Rng rng(derive_seed(seed, static_cast<uint64_t>(trial)));
      std::vector<int> load(m, 0);
      for (int t = 0; t < k; ++t) ++load[model.select(t, rng)];
      int64_t ge2 = 0;
      for (int c : load) ge2 += c >= 2;
      sum_ge2 += ge2;
      sum_ge2_sq += ge2 * ge2;
      any_hits += ge2 > 0;
    }
    // per-trial statistic for q_single is the fraction of experts with a
    // collision, whose mean is exactly q_single by symmetry
    out.push_back(make_report(
        "q_single", q_single(m, k),
        static_cast<double>(sum_ge2) / (static_cast<double>(n_trials) * m),
        stderr_from_sums(sum_ge2, sum_ge2_sq, n_trials) / m, n_trials));
    out.push_back(make_report(
        "q_layer", q_layer(m, k),
        static_cast<double>(any_hits) / static_cast<double>(n_trials),
        stderr_from_sums(any_hits, any_hits, n_trials), n_trials));
    return out;
  }

  // router-learning stage: tasks 0 and 1 pairwise, plus subset co-selection
  // counts when the full enumeration is cheap
  const bool subsets = k <= 4;
  std::vector<std::vector<char>> member(k, std::vector<char>(m, 0));
  for (int t = 0; t < k; ++t)
    for (int e : model.sets[t]) member[t][e] = 1;

  int64_t same01 = 0, co_sum = 0, co_sum_sq = 0;
#pragma omp parallel for schedule(static) \
    reduction(+ : same01, co_sum, co_sum_sq)
  for (int64_t trial = 0; trial < n_trials; ++trial) {
    Rng rng(derive_seed(seed, static_cast<uint64_t>(trial)));
    std::vector<int> pick(k);
    const int draws = subsets ? k : 2;
    for (int t = 0; t < draws; ++t) pick[t] = model.select(t, rng);
    same01 += pick[0] == pick[1];
    if (!subsets) continue;
    int64_t events = 0;
    for (int mask = 0; mask < (1 << k); ++mask) {
      if (__builtin_popcount(static_cast<unsigned>(mask)) < 2) continue;
      int e = -1;
      bool same = true, inside = true;
      for (int t = 0; t < k && same; ++t) {
        if (!(mask >> t & 1)) continue;
        if (e < 0) e = pick[t];
        same = pick[t] == e;
        inside = inside && member[t][e];
      }
      events += same && inside;
    }
    co_sum += events;
    co_sum_sq += events * events;
  }

  const int a = static_cast<int>(model.sets[0].size());
  const int b = static_cast<int>(model.sets[1].size());
  std::vector<int> inter01;
  std::set_intersection(model.sets[0].begin(), model.sets[0].end(),
                        model.sets[1].begin(), model.sets[1].end(),
                        std::back_inserter(inter01));
  const auto forms = pairwise_collision_forms(
      m, a, b, static_cast<int>(inter01.size()), model.delta);
  const double p01 = static_cast<double>(same01) / static_cast<double>(n_trials);
  const double se01 = stderr_from_sums(same01, same01, n_trials);
  // abs_tol absorbs the distance between a stated approximation and the
  // exact collision probability of the simulated process
  out.push_back(make_report("pairwise_written", forms.written, p01, se01,
                            n_trials, std::abs(forms.written - forms.exact)));
  out.push_back(make_report("pairwise_symmetric", forms.symmetric, p01, se01,
                            n_trials,
                            std::abs(forms.symmetric - forms.exact)));
  out.push_back(make_report("pairwise_exact", forms.exact, p01, se01, n_trials));
  out.push_back(make_report("pairwise_leading", forms.leading, p01, se01,
                            n_trials, std::abs(forms.leading - forms.exact)));
  if (subsets) {
    const auto ss = subset_sum_forms(model);
    const double est = static_cast<double>(co_sum) / static_cast<double>(n_trials);
    const double se = stderr_from_sums(co_sum, co_sum_sq, n_trials);
    out.push_back(make_report("subset_sum_written", ss.written, est, se,
                              n_trials, std::abs(ss.written - ss.exact)));
    out.push_back(make_report("subset_sum_exact", ss.exact, est, se, n_trials));
  }
  return out;
}

CosineBoundCheck weighted_cosine_bound(
    const std::vector<std::vector<double>>& grads1,
    const std::vector<std::vector<double>>& grads2,
    const std::vector<double>& lambda1, const std::vector<double>& lambda2) {
  const size_t m = grads1.size();
  if (m == 0) throw std::invalid_argument("need at least one expert");
  if (grads2.size() != m || lambda1.size() != m || lambda2.size() != m)
    throw std::invalid_argument("per-expert blocks and weights must align");

  double cross = 0.0;   // <concat weighted g1, concat weighted g2>
  double uv = 0.0;      // <u, v>
  double sq1 = 0.0, sq2 = 0.0;
  CosineBoundCheck r;
  for (size_t i = 0; i < m; ++i) {
    if (grads1[i].size() != grads2[i].size())
      throw std::invalid_argument("expert gradient dims must match");
    if (lambda1[i] < 0.0 || lambda2[i] < 0.0)
      throw std::invalid_argument("expert weights must be non-negative");
    const double n1 = norm(grads1[i]);
    const double n2 = norm(grads2[i]);
    const double d = dot(grads1[i], grads2[i]);
    if (n1 > 0.0 && n2 > 0.0) r.g = std::max(r.g, std::max(0.0, -d / (n1 * n2)));
    cross += lambda1[i] * lambda2[i] * d;
    uv += lambda1[i] * n1 * lambda2[i] * n2;
    sq1 += lambda1[i] * lambda1[i] * n1 * n1;
    sq2 += lambda2[i] * lambda2[i] * n2 * n2;
  }
  // ||concat weighted g|| equals ||u|| by construction
  const double nu = std::sqrt(sq1), nv = std::sqrt(sq2);
  if (nu == 0.0 || nv == 0.0)
    throw std::invalid_argument("zero full-layer gradient: conflict undefined");
  r.raw_neg_cos = -cross / (nu * nv);
  r.lhs = std::max(0.0, r.raw_neg_cos);
  r.rhs = r.g * (uv / (nu * nv));
  return r;
}

int64_t check_cosine_bound_instances(int64_t n, uint64_t seed, int max_experts,
                                     int max_dim) {
  if (n < 1 || max_experts < 1 || max_dim < 1)
    throw std::invalid_argument("counts must be positive");
  int64_t held = 0;
  for (int64_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, static_cast<uint64_t>(i)));
    while (true) {
      const int m = rng.randint(1, max_experts);
      std::vector<std::vector<double>> g1(m), g2(m);
      for (int e = 0; e < m; ++e) {
        const int dim = rng.randint(1, max_dim);
        g1[e].resize(dim);
        g2[e].resize(dim);
        for (int j = 0; j < dim; ++j) {
          g1[e][j] = rng.normal();
          g2[e][j] = rng.normal();
        }
        // occasional one-sided zero block exercises the skip path
        if (rng.uniform() < 0.1) std::fill(g1[e].begin(), g1[e].end(), 0.0);
        if (rng.uniform() < 0.1) std::fill(g2[e].begin(), g2[e].end(), 0.0);
      }
      const auto l1 = rng.dirichlet(1.0, m);
      const auto l2 = rng.dirichlet(1.0, m);
      double sq1 = 0.0, sq2 = 0.0;
      for (int e = 0; e < m; ++e) {
        sq1 += l1[e] * l1[e] * dot(g1[e], g1[e]);
        sq2 += l2[e] * l2[e] * dot(g2[e], g2[e]);
      }
      if (sq1 == 0.0 || sq2 == 0.0) continue;  // precondition violated, redraw
      held += weighted_cosine_bound(g1, g2, l1, l2).holds();
      break;
    }
  }
  return held;
}

void SpecializationConfig::validate() const {
  cluster.validate();
  for (int c : task_clusters)
    if (c < 0 || c >= cluster.n_clusters)
      throw std::invalid_argument("task cluster out of range");
  if (n_experts < 1 || expert_hidden < 1)
    throw std::invalid_argument("expert shape must be positive");
  if (steps < 1 || batch_per_task < 1 || eval_every < 1)
    throw std::invalid_argument("schedule must be positive");
  if (lr <= 0.0) throw std::invalid_argument("lr must be positive");
}

SpecializationReport empirical_moe_specialization(
    const SpecializationConfig& cfg) {
  cfg.validate();
  const int k = cfg.n_tasks();
  const int d = cfg.cluster.dim;
  const int b = cfg.batch_per_task;
  const int window_small = 100, window_large = 1000;

  ClusterStateGen gen(cfg.cluster, 0, derive_seed(cfg.seed, 1));

  ParamStore ps_moe, ps_dense;
  Rng rng_moe(derive_seed(cfg.seed, 2));
  Rng rng_dense(derive_seed(cfg.seed, 3));
  MoeFfn moe = make_moe_ffn(ps_moe, "moe", d, cfg.expert_hidden, cfg.n_experts,
                            0, rng_moe);
  Linear moe_head = make_linear(ps_moe, "moe_head", d, 1, rng_moe);
  // shared + selected expert of the MoE both run a hidden block per token,
  // so (n_experts + 1) * hidden matches the nonlinear capacity
  Mlp dense = make_mlp(ps_dense, "ffn",
                       {d, (cfg.n_experts + 1) * cfg.expert_hidden, d},
                       rng_dense);
  Linear dense_head = make_linear(ps_dense, "ffn_head", d, 1, rng_dense);

  AdamWConfig ocfg;
  ocfg.lr = cfg.lr;
  ocfg.weight_decay = 0.0;
  AdamW opt_moe(ps_moe, ocfg), opt_dense(ps_dense, ocfg);

  RoutingBuffer rb(static_cast<size_t>(cfg.steps) * k * b + 1);

  auto flat_scope = [](const ParamStore& ps, const std::string& prefix) {
    std::vector<double> out;
    for (const auto& p : ps.items()) {
      if (p.name.rfind(prefix, 0) != 0) continue;
      const auto& g = p.t.grad();
      out.insert(out.end(), g.begin(), g.end());
    }
    return out;
  };

  SpecializationReport rep;
  std::vector<double> conf_moe(cfg.steps, 0.0), conf_dense(cfg.steps, 0.0);

  for (int step = 0; step < cfg.steps; ++step) {
    // one shared draw of per-task batches; both models see identical data
    std::vector<std::vector<std::vector<double>>> xs(k);
    std::vector<std::vector<double>> ys(k);
    for (int t = 0; t < k; ++t) {
      const int cl = cfg.cluster_of(t);
      const double sign = cl % 2 == 0 ? 1.0 : -1.0;
      for (int j = 0; j < b; ++j) {
        const uint64_t sid = derive_seed(
            cfg.seed, 0x5a0000 + (static_cast<uint64_t>(step) * k + t) * b + j);
        auto pooled = gen.pooled(gen.sample(cl, sid));
        // mean pooling shrinks the identity signal by 1/P; undo it so the
        // targets are O(1)
        ys[t].push_back(sign * cfg.cluster.patches *
                        dot(pooled, gen.v()[cl]));
        xs[t].push_back(std::move(pooled));
      }
    }

    auto run = [&](bool is_moe) {
      ParamStore& ps = is_moe ? ps_moe : ps_dense;
      ps.zero_grad();
      std::vector<std::vector<double>> task_grads;
      std::vector<double> prev;
      for (int t = 0; t < k; ++t) {
        Tensor loss;
        for (int j = 0; j < b; ++j) {
          Tensor x = Tensor::from(xs[t][j], {1, d});
          Tensor out = is_moe
                           ? moe_head.forward(moe.forward(x, t, step, &rb))
                           : dense_head.forward(dense.forward(x));
          Tensor err = square(sub(out, Tensor::scalar(ys[t][j])));
          loss = loss.defined() ? add(loss, err) : err;
        }
        backward(scale(loss, 1.0 / b));
        auto cur = flat_scope(ps, is_moe ? "moe." : "ffn.");
        auto g = cur;
        for (size_t i = 0; i < prev.size(); ++i) g[i] -= prev[i];
        task_grads.push_back(std::move(g));
        prev = std::move(cur);
      }
      (is_moe ? opt_moe : opt_dense).step();
      return k >= 2 ? max_gradient_conflict(task_grads) : 0.0;
    };
    conf_moe[step] = run(true);
    conf_dense[step] = run(false);

    if (step % cfg.eval_every == 0 || step == cfg.steps - 1) {
      SpecializationPoint pt;
      pt.step = step;
      for (int t = 0; t < k; ++t) {
        pt.mean_entropy_w100 += entropy_bits(
            selection_distribution(rb, t, window_small, cfg.n_experts));
        pt.mean_entropy_w1000 += entropy_bits(
            selection_distribution(rb, t, window_large, cfg.n_experts));
      }
      pt.mean_entropy_w100 /= k;
      pt.mean_entropy_w1000 /= k;
      pt.moe_conflict = conf_moe[step];
      pt.dense_conflict = conf_dense[step];
      rep.trajectory.push_back(pt);
    }
  }

  // first window_large selections per task vs the trailing window
  std::vector<std::vector<double>> head(k, std::vector<double>(cfg.n_experts, 0.0));
  std::vector<int> head_n(k, 0);
  for (const auto& r : rb.records()) {
    if (head_n[r.task] >= window_large) continue;
    head[r.task][r.expert] += 1.0;
    ++head_n[r.task];
  }
  for (int t = 0; t < k; ++t) {
    rep.initial_entropy_bits.push_back(entropy_bits(head[t]));
    rep.final_entropy_bits.push_back(entropy_bits(
        selection_distribution(rb, t, window_large, cfg.n_experts)));
    rep.mean_initial_entropy += rep.initial_entropy_bits.back() / k;
    rep.mean_final_entropy += rep.final_entropy_bits.back() / k;
  }

  const int q0 = cfg.steps - std::max(1, cfg.steps / 4);
  for (int s = q0; s < cfg.steps; ++s) {
    rep.moe_conflict_last_quartile += conf_moe[s];
    rep.dense_conflict_last_quartile += conf_dense[s];
  }
  rep.moe_conflict_last_quartile /= cfg.steps - q0;
  rep.dense_conflict_last_quartile /= cfg.steps - q0;

  rep.directional_checked = k >= 2;
  if (rep.directional_checked) {
    rep.entropy_decreased = rep.mean_final_entropy < rep.mean_initial_entropy;
    rep.conflict_reduced =
        rep.moe_conflict_last_quartile < rep.dense_conflict_last_quartile;
  }
  return rep;
}

}  // namespace wmlab
