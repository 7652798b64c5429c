#include "wmlab/mcts.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace wmlab {

namespace {

struct MinMax {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  void update(double q) {
    lo = std::min(lo, q);
    hi = std::max(hi, q);
  }
  double normalize(double q) const {
    if (hi > lo) return (q - lo) / (hi - lo);
    return q;
  }
};

struct Node {
  double prior = 0.0;
  int visits = 0;
  double value_sum = 0.0;
  double reward = 0.0;
  Prediction pred;
  std::shared_ptr<const void> state;
  std::vector<Action> actions;
  std::vector<std::unique_ptr<Node>> children;
  bool expanded = false;

  double value() const { return visits == 0 ? 0.0 : value_sum / visits; }
};

// squashed sample from the node's Gaussian policy, mapped into [lo, hi]
Action sample_candidate(const GaussianPolicy& g, const ActionSpace& sp, Rng& rng) {
  Action a;
  a.vec.resize(sp.dim);
  for (int d = 0; d < sp.dim; ++d) {
    const double u = rng.normal(g.mean[d], std::exp(g.log_std[d]));
    const double t = std::tanh(u);
    a.vec[d] = sp.lo + (sp.hi - sp.lo) * 0.5 * (t + 1.0);
  }
  return a;
}

void expand(Node& n, const ActionSpace& sp, const SearchConfig& cfg, Rng& rng) {
  if (sp.discrete) {
    double z = 0.0;
    for (double p : n.pred.policy) z += p;
    if (z <= 0.0) z = 1.0;
    n.actions.resize(sp.n);
    n.children.resize(sp.n);
    for (int i = 0; i < sp.n; ++i) {
      n.actions[i].idx = i;
      n.children[i] = std::make_unique<Node>();
      n.children[i]->prior = n.pred.policy[i] / z;
    }
  } else {
    n.actions.resize(cfg.n_candidates);
    n.children.resize(cfg.n_candidates);
    for (int i = 0; i < cfg.n_candidates; ++i) {
      n.actions[i] = sample_candidate(n.pred.gauss, sp, rng);
      n.actions[i].idx = i;
      n.children[i] = std::make_unique<Node>();
      n.children[i]->prior = 1.0 / cfg.n_candidates;
    }
  }
  n.expanded = true;
}

int select_child(const Node& n, const SearchConfig& cfg, const MinMax& mm) {
  int sum_n = 0;
  for (const auto& c : n.children) sum_n += c->visits;
  const double sqrt_n = std::sqrt(sum_n == 0 ? 1.0 : static_cast<double>(sum_n));
  const double pb_c =
      cfg.c1 + std::log((sum_n + cfg.c2 + 1.0) / cfg.c2);
  // unvisited edges take the tree minimum, i.e. normalized 0
  double best = -std::numeric_limits<double>::infinity();
  int best_i = 0;
  for (size_t i = 0; i < n.children.size(); ++i) {
    const Node& c = *n.children[i];
    const double q =
        c.visits == 0 ? 0.0 : mm.normalize(c.reward + cfg.discount * c.value());
    const double u = c.prior * sqrt_n / (1.0 + c.visits) * pb_c;
    const double score = q + u;
    if (score > best) {
      best = score;
      best_i = static_cast<int>(i);
    }
  }
  return best_i;
}

}  // namespace

std::vector<double> visit_policy(const std::vector<int>& visits,
                                 double temperature) {
  std::vector<double> p(visits.size(), 0.0);
  if (visits.empty()) return p;
  if (temperature <= 0.0) {
    int best = 0;
    for (size_t i = 1; i < visits.size(); ++i)
      if (visits[i] > visits[best]) best = static_cast<int>(i);
    p[best] = 1.0;
    return p;
  }
  double z = 0.0;
  for (size_t i = 0; i < visits.size(); ++i) {
    p[i] = visits[i] > 0
               ? std::pow(static_cast<double>(visits[i]), 1.0 / temperature)
               : 0.0;
    z += p[i];
  }
  if (z <= 0.0) {
    std::fill(p.begin(), p.end(), 1.0 / p.size());
    return p;
  }
  for (double& v : p) v /= z;
  return p;
}

SearchResult run_search(PlanningModel& model, int task,
                        const std::vector<double>& obs, const SearchConfig& cfg,
                        Rng& rng, bool want_trace) {
  if (cfg.n_simulations < 1)
    throw std::invalid_argument("run_search: n_simulations must be >= 1");
  const ActionSpace sp = model.action_space(task);

  Node root;
  root.state = model.initial(task, obs, root.pred);
  expand(root, sp, cfg, rng);
  if (cfg.add_noise && cfg.exploration_frac > 0.0) {
    const auto noise =
        rng.dirichlet(cfg.dirichlet_alpha, static_cast<int>(root.children.size()));
    for (size_t i = 0; i < root.children.size(); ++i)
      root.children[i]->prior = (1.0 - cfg.exploration_frac) * root.children[i]->prior +
                                cfg.exploration_frac * noise[i];
  }

  MinMax mm;
  SearchResult res;
  for (int sim = 0; sim < cfg.n_simulations; ++sim) {
    Node* node = &root;
    std::vector<Node*> path{&root};
    std::vector<int> way;
    while (true) {
      const int i = select_child(*node, cfg, mm);
      way.push_back(i);
      Node* child = node->children[i].get();
      if (!child->expanded) {
        double reward = 0.0;
        child->state =
            model.step(task, node->state, node->actions[i], reward, child->pred);
        child->reward = reward;
        expand(*child, sp, cfg, rng);
        path.push_back(child);
        break;
      }
      node = child;
      path.push_back(child);
    }

    double g = path.back()->pred.value;
    for (auto it = path.rbegin(); it != path.rend(); ++it) {
      Node* n = *it;
      n->value_sum += g;
      n->visits += 1;
      mm.update(n->reward + cfg.discount * n->value());
      g = n->reward + cfg.discount * g;
    }

    if (want_trace) {
      std::string line = "sim=" + std::to_string(sim) + " path=";
      for (size_t i = 0; i < way.size(); ++i) {
        if (i) line += "/";
        line += std::to_string(way[i]);
      }
      char buf[64];
      snprintf(buf, sizeof(buf), " leaf_value=%.6g", path.back()->pred.value);
      res.trace.push_back(line + buf);
    }
  }

  res.actions = root.actions;
  res.visit_counts.resize(root.children.size());
  for (size_t i = 0; i < root.children.size(); ++i)
    res.visit_counts[i] = root.children[i]->visits;
  res.policy = visit_policy(res.visit_counts, cfg.temperature);
  res.root_value = root.value();
  if (cfg.temperature <= 0.0) {
    int best = 0;
    for (size_t i = 1; i < res.visit_counts.size(); ++i)
      if (res.visit_counts[i] > res.visit_counts[best])
        best = static_cast<int>(i);
    res.chosen = best;
  } else {
    res.chosen = rng.categorical(res.policy);
  }
  return res;
}

double n_step_value_target(const std::vector<double>& rewards,
                           const std::vector<double>& boot, int t, int n,
                           double discount, bool terminal) {
  const int len = static_cast<int>(rewards.size());
  if (t < 0 || t >= len)
    throw std::invalid_argument("n_step_value_target: t out of range");
  double target = 0.0;
  double disc = 1.0;
  const int stop = std::min(t + n, len);
  for (int i = t; i < stop; ++i) {
    target += disc * rewards[i];
    disc *= discount;
  }
  if (t + n < len) {
    target += disc * boot.at(t + n);
  } else if (!terminal) {
    target += disc * boot.at(len);
  }
  return target;
}

}  // namespace wmlab
