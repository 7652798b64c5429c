#include "wmlab/envs.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace wmlab {

void ClusterConfig::validate() const {
  if (patches < 3) throw std::invalid_argument("cluster: need >= 3 patches");
  if (n_clusters < 1) throw std::invalid_argument("cluster: need >= 1 cluster");
  if (dim < 2 * n_clusters)
    throw std::invalid_argument("cluster: dim must be >= 2 * n_clusters");
}

ClusterStateGen::ClusterStateGen(const ClusterConfig& cfg, int task,
                                 uint64_t seed)
    : cfg_(cfg) {
  cfg_.validate();
  Rng rng(derive_seed(seed, 0xc1a5 ^ static_cast<uint64_t>(task)));
  // Gram-Schmidt over Gaussian draws; 2K orthonormal directions
  const int need = 2 * cfg_.n_clusters;
  std::vector<std::vector<double>> basis;
  while (static_cast<int>(basis.size()) < need) {
    std::vector<double> x(cfg_.dim);
    for (double& v : x) v = rng.normal();
    for (const auto& b : basis) {
      double dot = 0.0;
      for (int i = 0; i < cfg_.dim; ++i) dot += x[i] * b[i];
      for (int i = 0; i < cfg_.dim; ++i) x[i] -= dot * b[i];
    }
    double nrm = 0.0;
    for (double v : x) nrm += v * v;
    nrm = std::sqrt(nrm);
    if (nrm < 1e-8) continue;
    for (double& v : x) v /= nrm;
    basis.push_back(std::move(x));
  }
  v_.assign(basis.begin(), basis.begin() + cfg_.n_clusters);
  c_.assign(basis.begin() + cfg_.n_clusters, basis.end());
}

std::vector<double> ClusterStateGen::sample(int cluster,
                                            uint64_t sample_seed) const {
  if (cluster < 0 || cluster >= cfg_.n_clusters)
    throw std::invalid_argument("cluster: index out of range");
  Rng rng(derive_seed(sample_seed, 0x9a7c4e ^ static_cast<uint64_t>(cluster)));
  const int d = cfg_.dim;
  std::vector<std::vector<double>> patches;
  std::vector<double> p0(d), p1(d), p2(d);
  const int other = cfg_.n_clusters == 1 ? 0 : (cluster + 1) % cfg_.n_clusters;
  for (int i = 0; i < d; ++i) {
    p0[i] = cfg_.alpha * v_[cluster][i];
    p1[i] = cfg_.beta * c_[cluster][i];
    p2[i] = cfg_.eps * cfg_.gamma * v_[other][i];
  }
  patches.push_back(std::move(p0));
  patches.push_back(std::move(p1));
  patches.push_back(std::move(p2));
  const double noise_std = cfg_.sigma_p / std::sqrt(static_cast<double>(d));
  for (int p = 3; p < cfg_.patches; ++p) {
    std::vector<double> q(d);
    for (double& x : q) x = rng.normal(0.0, noise_std);
    patches.push_back(std::move(q));
  }
  std::vector<int> perm(cfg_.patches);
  std::iota(perm.begin(), perm.end(), 0);
  for (int i = cfg_.patches - 1; i > 0; --i)
    std::swap(perm[i], perm[rng.randint(0, i)]);
  std::vector<double> out;
  out.reserve(cfg_.state_dim());
  for (int p : perm)
    out.insert(out.end(), patches[p].begin(), patches[p].end());
  return out;
}

std::vector<double> ClusterStateGen::pooled(
    const std::vector<double>& state) const {
  const int d = cfg_.dim;
  std::vector<double> m(d, 0.0);
  const int np = static_cast<int>(state.size()) / d;
  for (int p = 0; p < np; ++p)
    for (int i = 0; i < d; ++i) m[i] += state[p * d + i];
  for (double& x : m) x /= np;
  return m;
}

// ---------------------------------------------------------------------------
// oracle

OracleValues oracle_value(const TabularMdp& mdp, double discount, double tol) {
  if (mdp.n_states < 1 || mdp.n_actions < 1)
    throw std::invalid_argument("oracle_value: empty mdp");
  OracleValues out;
  out.v.assign(mdp.n_states, 0.0);
  while (true) {
    double resid = 0.0;
    std::vector<double> nv(mdp.n_states);
    for (int s = 0; s < mdp.n_states; ++s) {
      double best = -std::numeric_limits<double>::infinity();
      for (int a = 0; a < mdp.n_actions; ++a) {
        const auto& tr = mdp.trans[s][a];
        best = std::max(best,
                        tr.reward + (tr.done ? 0.0 : discount * out.v[tr.next]));
      }
      nv[s] = best;
      resid = std::max(resid, std::abs(nv[s] - out.v[s]));
    }
    out.v = std::move(nv);
    if (resid < tol) break;
  }
  out.q.assign(mdp.n_states, std::vector<double>(mdp.n_actions, 0.0));
  for (int s = 0; s < mdp.n_states; ++s)
    for (int a = 0; a < mdp.n_actions; ++a) {
      const auto& tr = mdp.trans[s][a];
      out.q[s][a] = tr.reward + (tr.done ? 0.0 : discount * out.v[tr.next]);
    }

  // undiscounted optimal return within the horizon, by backward induction
  std::vector<double> r(mdp.n_states, 0.0);
  for (int h = 0; h < mdp.horizon; ++h) {
    std::vector<double> nr(mdp.n_states);
    for (int s = 0; s < mdp.n_states; ++s) {
      double best = -std::numeric_limits<double>::infinity();
      for (int a = 0; a < mdp.n_actions; ++a) {
        const auto& tr = mdp.trans[s][a];
        best = std::max(best, tr.reward + (tr.done ? 0.0 : r[tr.next]));
      }
      nr[s] = best;
    }
    std::swap(r, nr);
  }
  out.optimal_return = r[mdp.start];
  return out;
}

OracleValues oracle_for(const Env& env, double discount, double tol) {
  const TabularMdp* m = env.mdp();
  if (!m)
    throw std::invalid_argument("oracle unsupported for " + env.name() +
                                ": no tabular model");
  return oracle_value(*m, discount, tol);
}

std::vector<int> greedy_actions(const OracleValues& ov, int state, double tol) {
  const auto& q = ov.q.at(state);
  double best = *std::max_element(q.begin(), q.end());
  std::vector<int> acts;
  for (size_t a = 0; a < q.size(); ++a)
    if (q[a] >= best - tol) acts.push_back(static_cast<int>(a));
  return acts;
}

// ---------------------------------------------------------------------------
// environments

namespace {

class TabularEnv : public Env {
 public:
  TabularEnv(TabularMdp mdp, std::string name)
      : mdp_(std::move(mdp)), name_(std::move(name)) {
    threshold_ = 0.9 * oracle_value(mdp_, 0.99).optimal_return;
  }

  int obs_dim() const override { return mdp_.n_states; }
  ActionSpace action_space() const override {
    ActionSpace sp;
    sp.discrete = true;
    sp.n = mdp_.n_actions;
    return sp;
  }
  int horizon() const override { return mdp_.horizon; }
  std::string name() const override { return name_; }
  double solved_threshold() const override { return threshold_; }
  const TabularMdp* mdp() const override { return &mdp_; }

  std::vector<double> reset(uint64_t seed) override {
    (void)seed;
    state_ = mdp_.start;
    steps_ = 0;
    done_ = false;
    return obs();
  }

  StepResult step(const Action& a) override {
    if (done_) throw std::runtime_error("step after episode end: " + name_);
    if (a.idx < 0 || a.idx >= mdp_.n_actions)
      throw std::invalid_argument("bad action for " + name_);
    const auto& tr = mdp_.trans[state_][a.idx];
    state_ = tr.next;
    ++steps_;
    StepResult r;
    r.reward = tr.reward;
    if (tr.done) {
      done_ = true;
    } else if (steps_ >= mdp_.horizon) {
      done_ = true;
      r.truncated = true;
    }
    r.done = done_;
    r.obs = obs();
    return r;
  }

 private:
  std::vector<double> obs() const {
    std::vector<double> o(mdp_.n_states, 0.0);
    o[state_] = 1.0;
    return o;
  }

  TabularMdp mdp_;
  std::string name_;
  double threshold_ = 0.0;
  int state_ = 0;
  int steps_ = 0;
  bool done_ = true;
};

// Walk on 0..length-1 starting from the middle, reward 1 for entering the
// goal end. goal_right=false mirrors the task, so the optimal policy takes
// the opposite action in every interior state.
TabularMdp chain_mdp(int length, bool goal_right) {
  TabularMdp m;
  m.n_states = length;
  m.n_actions = 2;
  m.start = length / 2;
  m.horizon = 4 * length;
  const int goal = goal_right ? length - 1 : 0;
  m.trans.assign(length, std::vector<TabularMdp::Tr>(2));
  for (int s = 0; s < length; ++s) {
    const int left = std::max(0, s - 1);
    const int right = std::min(length - 1, s + 1);
    m.trans[s][0] = {left, left == goal ? 1.0 : 0.0, left == goal};
    m.trans[s][1] = {right, right == goal ? 1.0 : 0.0, right == goal};
  }
  // the goal itself is absorbing; episodes never step from it
  for (int a = 0; a < 2; ++a) m.trans[goal][a] = {goal, 0.0, true};
  return m;
}

TabularMdp grid_mdp(int w, int h) {
  TabularMdp m;
  m.n_states = w * h;
  m.n_actions = 4;
  m.start = 0;
  m.horizon = 32;
  const int goal = w * h - 1;
  m.trans.assign(m.n_states, std::vector<TabularMdp::Tr>(4));
  const int dx[4] = {0, 0, -1, 1};  // up, down, left, right
  const int dy[4] = {-1, 1, 0, 0};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int s = y * w + x;
      for (int a = 0; a < 4; ++a) {
        const int nx = std::clamp(x + dx[a], 0, w - 1);
        const int ny = std::clamp(y + dy[a], 0, h - 1);
        const int ns = ny * w + nx;
        m.trans[s][a] = {ns, ns == goal ? 1.0 : 0.0, ns == goal};
      }
    }
  for (int a = 0; a < 4; ++a) m.trans[goal][a] = {goal, 0.0, true};
  return m;
}

// single-step contextual bandit whose observation is a clustered state
class BanditClusterEnv : public Env {
 public:
  BanditClusterEnv(const ClusterConfig& ccfg, int cluster, int n_arms,
                   uint64_t basis_seed, std::string name)
      : gen_(ccfg, /*task=*/0, basis_seed),
        cluster_(cluster),
        name_(std::move(name)) {
    mdp_.n_states = 1;
    mdp_.n_actions = n_arms;
    mdp_.start = 0;
    mdp_.horizon = 1;
    mdp_.trans.assign(1, std::vector<TabularMdp::Tr>(n_arms));
    for (int a = 0; a < n_arms; ++a)
      mdp_.trans[0][a] = {0, a == cluster % n_arms ? 0.8 : 0.2, true};
  }

  int obs_dim() const override { return gen_.config().state_dim(); }
  ActionSpace action_space() const override {
    ActionSpace sp;
    sp.discrete = true;
    sp.n = mdp_.n_actions;
    return sp;
  }
  int horizon() const override { return 1; }
  std::string name() const override { return name_; }
  double solved_threshold() const override { return 0.9 * 0.8; }
  const TabularMdp* mdp() const override { return &mdp_; }

  std::vector<double> reset(uint64_t seed) override {
    done_ = false;
    obs_ = gen_.sample(cluster_, seed);
    return obs_;
  }

  StepResult step(const Action& a) override {
    if (done_) throw std::runtime_error("step after episode end: " + name_);
    if (a.idx < 0 || a.idx >= mdp_.n_actions)
      throw std::invalid_argument("bad action for " + name_);
    done_ = true;
    StepResult r;
    r.reward = mdp_.trans[0][a.idx].reward;
    r.done = true;
    r.obs = obs_;
    return r;
  }

 private:
  ClusterStateGen gen_;
  int cluster_;
  TabularMdp mdp_;
  std::string name_;
  std::vector<double> obs_;
  bool done_ = true;
};

// 2-D position control: pos += 0.1 * a, reward exp(-|pos - goal|^2 / 0.25),
// scaled by 0.1 so discounted returns stay well inside the value support
class PointMassEnv : public Env {
 public:
  PointMassEnv(double gx, double gy, std::string name)
      : gx_(gx), gy_(gy), name_(std::move(name)) {}

  int obs_dim() const override { return 4; }
  ActionSpace action_space() const override {
    ActionSpace sp;
    sp.discrete = false;
    sp.n = 0;
    sp.dim = 2;
    sp.lo = -1.0;
    sp.hi = 1.0;
    return sp;
  }
  int horizon() const override { return 50; }
  std::string name() const override { return name_; }
  // the goal is reachable in <= 7 steps, then ~0.1 per step for the rest
  double solved_threshold() const override { return 3.5; }

  std::vector<double> reset(uint64_t seed) override {
    (void)seed;
    x_ = y_ = 0.0;
    steps_ = 0;
    done_ = false;
    return obs();
  }

  StepResult step(const Action& a) override {
    if (done_) throw std::runtime_error("step after episode end: " + name_);
    if (static_cast<int>(a.vec.size()) != 2)
      throw std::invalid_argument("bad action for " + name_);
    x_ = std::clamp(x_ + 0.1 * std::clamp(a.vec[0], -1.0, 1.0), -1.0, 1.0);
    y_ = std::clamp(y_ + 0.1 * std::clamp(a.vec[1], -1.0, 1.0), -1.0, 1.0);
    ++steps_;
    StepResult r;
    const double d2 = (x_ - gx_) * (x_ - gx_) + (y_ - gy_) * (y_ - gy_);
    r.reward = 0.1 * std::exp(-d2 / 0.25);
    if (steps_ >= horizon()) {
      done_ = true;
      r.truncated = true;
    }
    r.done = done_;
    r.obs = obs();
    return r;
  }

 private:
  std::vector<double> obs() const { return {x_, y_, gx_ - x_, gy_ - y_}; }
  double gx_, gy_;
  std::string name_;
  double x_ = 0.0, y_ = 0.0;
  int steps_ = 0;
  bool done_ = true;
};

// "chain" -> 5, "chain-7" -> 7; anything else -> -1
int parse_chain_len(const std::string& name) {
  if (name == "chain") return 5;
  const std::string prefix = "chain-";
  if (name.rfind(prefix, 0) != 0) return -1;
  try {
    size_t used = 0;
    const int k = std::stoi(name.substr(prefix.size()), &used);
    if (used != name.size() - prefix.size() || k < 3) return -1;
    return k;
  } catch (const std::exception&) {
    return -1;
  }
}

std::unique_ptr<Env> make_bandit(int n_clusters, int cluster,
                                 uint64_t basis_seed) {
  ClusterConfig cc;
  cc.n_clusters = n_clusters;
  cc.dim = std::max(8, 2 * n_clusters);
  return std::make_unique<BanditClusterEnv>(
      cc, cluster, 4, basis_seed, "bandit-c" + std::to_string(cluster));
}

}  // namespace

Suite make_suite(const std::string& name, int count, uint64_t seed) {
  if (count < 1) throw std::invalid_argument("make_suite: count must be >= 1");
  Suite s;
  if (const int base = parse_chain_len(name); base > 0) {
    for (int i = 0; i < count; ++i) {
      const int len = base + 2 * (i / 2);
      const bool goal_right = i % 2 == 0;
      s.envs.push_back(std::make_unique<TabularEnv>(
          chain_mdp(len, goal_right),
          "chain-" + std::to_string(len) + (goal_right ? "r" : "l")));
    }
  } else if (name == "gridworld") {
    for (int i = 0; i < count; ++i) {
      const int side = 3 + (count == 1 ? 1 : i);
      s.envs.push_back(std::make_unique<TabularEnv>(
          grid_mdp(side, side),
          "grid-" + std::to_string(side) + "x" + std::to_string(side)));
    }
  } else if (name == "bandit-cluster") {
    const int nc = std::max(2, count);
    for (int i = 0; i < count; ++i)
      s.envs.push_back(make_bandit(nc, i, derive_seed(seed, 0xbad17)));
  } else if (name == "point-mass") {
    Rng rng(derive_seed(seed, 0x90a55));
    for (int i = 0; i < count; ++i) {
      const double ang = rng.uniform(0.0, 2.0 * M_PI);
      s.envs.push_back(std::make_unique<PointMassEnv>(
          0.7 * std::cos(ang), 0.7 * std::sin(ang),
          "point-mass-" + std::to_string(i)));
    }
  } else if (name == "mixed") {
    if (count != 3)
      throw std::invalid_argument(
          "make_suite: mixed suite has exactly 3 tasks");
    s.envs.push_back(
        std::make_unique<TabularEnv>(chain_mdp(5, true), "chain-5r"));
    s.envs.push_back(std::make_unique<TabularEnv>(grid_mdp(4, 4), "grid-4x4"));
    s.envs.push_back(make_bandit(4, 0, derive_seed(seed, 0xbad17)));
  } else {
    throw std::invalid_argument("make_suite: unknown suite " + name);
  }
  return s;
}

}  // namespace wmlab
