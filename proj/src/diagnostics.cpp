#include "wmlab/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace wmlab {

namespace {

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

}  // namespace

double max_gradient_conflict(const std::vector<std::vector<double>>& grads) {
  std::vector<const std::vector<double>*> usable;
  std::vector<double> norms;
  for (const auto& g : grads) {
    const double n = norm(g);
    if (n > 0.0) {
      usable.push_back(&g);
      norms.push_back(n);
    }
  }
  if (usable.size() < 2)
    throw std::invalid_argument(
        "max_gradient_conflict: need >= 2 nonzero gradients");
  for (size_t i = 1; i < usable.size(); ++i)
    if (usable[i]->size() != usable[0]->size())
      throw std::invalid_argument("max_gradient_conflict: length mismatch");
  double best = -1.0;
  for (size_t i = 0; i < usable.size(); ++i)
    for (size_t j = i + 1; j < usable.size(); ++j) {
      const double c = dot(*usable[i], *usable[j]) / (norms[i] * norms[j]);
      best = std::max(best, -c);
    }
  return best;
}

double dormant_ratio(const std::vector<std::vector<double>>& acts, double eps) {
  if (eps <= 0.0) throw std::invalid_argument("dormant_ratio: eps must be > 0");
  if (acts.empty() || acts[0].empty())
    throw std::invalid_argument("dormant_ratio: empty activations");
  const size_t units = acts[0].size();
  size_t dormant = 0;
  for (size_t u = 0; u < units; ++u) {
    double m = 0.0;
    for (const auto& row : acts) m += std::abs(row.at(u));
    m /= acts.size();
    if (m <= eps) ++dormant;
  }
  return static_cast<double>(dormant) / units;
}

double dormant_ratio_relative(const std::vector<std::vector<double>>& acts,
                              double frac) {
  if (acts.empty() || acts[0].empty())
    throw std::invalid_argument("dormant_ratio: empty activations");
  double mean_abs = 0.0;
  size_t n = 0;
  for (const auto& row : acts) {
    for (double x : row) mean_abs += std::abs(x);
    n += row.size();
  }
  mean_abs /= n;
  // a dead layer is fully dormant at any threshold
  if (mean_abs == 0.0) return 1.0;
  return dormant_ratio(acts, frac * mean_abs);
}

std::vector<double> singular_values(std::vector<std::vector<double>> a) {
  if (a.empty() || a[0].empty())
    throw std::invalid_argument("singular_values: empty matrix");
  const size_t rows = a.size(), cols = a[0].size();
  for (const auto& r : a)
    if (r.size() != cols)
      throw std::invalid_argument("singular_values: ragged matrix");

  // one-sided Jacobi on the columns; work with the transposed matrix when
  // that gives fewer columns to rotate
  std::vector<std::vector<double>> m;
  if (cols <= rows) {
    m = std::move(a);
  } else {
    m.assign(cols, std::vector<double>(rows));
    for (size_t i = 0; i < rows; ++i)
      for (size_t j = 0; j < cols; ++j) m[j][i] = a[i][j];
  }
  const size_t nc = m[0].size();

  auto col_dot = [&](size_t i, size_t j) {
    double s = 0.0;
    for (const auto& row : m) s += row[i] * row[j];
    return s;
  };

  const double tol = 1e-14;
  for (int sweep = 0; sweep < 60; ++sweep) {
    bool rotated = false;
    for (size_t i = 0; i + 1 < nc; ++i)
      for (size_t j = i + 1; j < nc; ++j) {
        const double app = col_dot(i, i);
        const double aqq = col_dot(j, j);
        const double apq = col_dot(i, j);
        if (std::abs(apq) <= tol * std::sqrt(app * aqq) || apq == 0.0) continue;
        rotated = true;
        const double theta = 0.5 * std::atan2(2.0 * apq, app - aqq);
        const double c = std::cos(theta), s = std::sin(theta);
        for (auto& row : m) {
          const double vi = row[i], vj = row[j];
          row[i] = c * vi + s * vj;
          row[j] = -s * vi + c * vj;
        }
      }
    if (!rotated) break;
  }

  std::vector<double> sv(nc);
  for (size_t j = 0; j < nc; ++j) sv[j] = std::sqrt(col_dot(j, j));
  std::sort(sv.begin(), sv.end(), std::greater<double>());
  return sv;
}

double effective_rank(const std::vector<std::vector<double>>& phi) {
  const std::vector<double> sv = singular_values(phi);
  double total = 0.0;
  for (double s : sv) total += s;
  if (total <= 0.0)
    throw std::invalid_argument("effective_rank: all-zero matrix");
  double h = 0.0;
  for (double s : sv) {
    const double p = s / total;
    if (p > 0.0) h -= p * std::log(p);
  }
  return std::exp(h);
}

double latent_norm(const std::vector<std::vector<double>>& latents) {
  if (latents.empty())
    throw std::invalid_argument("latent_norm: empty batch");
  double s = 0.0;
  for (const auto& z : latents) s += norm(z);
  return s / latents.size();
}

void MocoState::init(int n_tasks, size_t dim) {
  if (n_tasks < 1) throw std::invalid_argument("moco: need >= 1 task");
  y.assign(n_tasks, std::vector<double>(dim, 0.0));
  lambda.assign(n_tasks, 1.0 / n_tasks);
}

std::vector<double> moco_step(MocoState& st, const MocoConfig& cfg,
                              const std::vector<std::vector<double>>& grads,
                              const std::vector<double>& losses) {
  const size_t k = st.y.size();
  if (grads.size() != k || losses.size() != k)
    throw std::invalid_argument("moco_step: task count mismatch");
  const size_t dim = st.y[0].size();
  for (size_t i = 0; i < k; ++i) {
    if (grads[i].size() != dim)
      throw std::invalid_argument("moco_step: gradient length mismatch");
    const double scale = losses[i] / (norm(grads[i]) + 1e-8);
    for (size_t j = 0; j < dim; ++j)
      st.y[i][j] = (1.0 - cfg.beta) * st.y[i][j] + cfg.beta * grads[i][j] * scale;
  }

  // lambda <- softmax(lambda - gamma_w ((Y Y^T) lambda + rho lambda))
  std::vector<double> gl(k, 0.0);
  for (size_t i = 0; i < k; ++i)
    for (size_t j = 0; j < k; ++j)
      gl[i] += dot(st.y[i], st.y[j]) * st.lambda[j];
  std::vector<double> logits(k);
  for (size_t i = 0; i < k; ++i)
    logits[i] = st.lambda[i] - cfg.weight_lr * (gl[i] + cfg.rho * st.lambda[i]);
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (size_t i = 0; i < k; ++i) {
    logits[i] = std::exp(logits[i] - mx);
    z += logits[i];
  }
  for (size_t i = 0; i < k; ++i) st.lambda[i] = logits[i] / z;

  std::vector<double> gs(dim, 0.0);
  for (size_t i = 0; i < k; ++i)
    for (size_t j = 0; j < dim; ++j) gs[j] += st.lambda[i] * st.y[i][j];
  return gs;
}

// ---------------------------------------------------------------------------
// per-task gradient splits

namespace {

// resolves a scope name to a parameter-name prefix, or "" for the
// activation scopes handled separately
std::string scope_prefix(const std::string& scope, const ModelConfig& cfg,
                         int probe_layer) {
  const std::string blk = "blocks." + std::to_string(probe_layer);
  const bool moe = cfg.backbone == Backbone::kMoe;
  if (scope == "moe_layer") return blk + (moe ? ".moe." : ".ffn.");
  if (scope == "shared_expert") {
    if (!moe)
      throw std::invalid_argument("scope " + scope + " needs a moe backbone");
    return blk + ".moe.shared.";
  }
  if (scope.rfind("expert_", 0) == 0) {
    if (!moe)
      throw std::invalid_argument("scope " + scope + " needs a moe backbone");
    int m = -1;
    try {
      m = std::stoi(scope.substr(7));
    } catch (const std::exception&) {
      throw std::invalid_argument("unknown gradient scope: " + scope);
    }
    if (m < 0 || m >= cfg.n_experts)
      throw std::invalid_argument("scope " + scope + ": no such expert");
    return blk + ".moe.expert" + std::to_string(m) + ".";
  }
  if (scope == "encoder_output" || scope == "moe_input") return "";
  throw std::invalid_argument("unknown gradient scope: " + scope);
}

std::vector<double> flatten_prefix_grads(const ParamStore& ps,
                                         const std::string& prefix) {
  std::vector<double> out;
  for (const auto& p : ps.items()) {
    if (p.name.rfind(prefix, 0) != 0) continue;
    const auto& g = p.t.grad();
    out.insert(out.end(), g.begin(), g.end());
  }
  if (out.empty())
    throw std::invalid_argument("gradient scope matches no parameters: " +
                                prefix);
  return out;
}

std::vector<double> mean_pooled_grads(const std::vector<Tensor>& rows) {
  if (rows.empty()) return {};
  std::vector<double> out(rows[0].numel(), 0.0);
  for (const auto& t : rows) {
    const auto& g = t.grad();
    for (size_t i = 0; i < out.size(); ++i) out[i] += g[i];
  }
  for (double& x : out) x /= rows.size();
  return out;
}

}  // namespace

TaskGradients per_task_gradient_split(
    WorldModel& model, WorldModel& target, const std::vector<Segment>& batch,
    const std::vector<LossWeights>& per_task_w, int n_step, double discount,
    const std::vector<std::string>& scopes, int probe_layer) {
  if (probe_layer < 0 || probe_layer >= model.config().n_layers)
    throw std::invalid_argument("per_task_gradient_split: bad probe layer");
  for (const auto& s : scopes)
    scope_prefix(s, model.config(), probe_layer);  // validate up front

  std::map<int, std::vector<const Segment*>> by_task;
  for (const auto& seg : batch) by_task[seg.ep->task].push_back(&seg);

  TaskGradients out;
  const double inv_b = 1.0 / batch.size();
  for (const auto& [task, segs] : by_task) {
    model.params().zero_grad();
    std::vector<ProbeSink> probes(segs.size());
    for (size_t i = 0; i < segs.size(); ++i) {
      probes[i].layer = probe_layer;
      LossTerms terms;
      Tensor loss = segment_loss(model, target, *segs[i], per_task_w.at(task),
                                 n_step, discount, terms, &probes[i]);
      backward(scale(loss, inv_b));
    }
    out.tasks.push_back(task);
    for (const auto& scope : scopes) {
      const std::string prefix =
          scope_prefix(scope, model.config(), probe_layer);
      std::vector<double> g;
      if (!prefix.empty()) {
        g = flatten_prefix_grads(model.params(), prefix);
      } else {
        std::vector<Tensor> rows;
        for (const auto& pr : probes) {
          const auto& src =
              scope == "encoder_output" ? pr.encoder_outputs : pr.ffn_inputs;
          rows.insert(rows.end(), src.begin(), src.end());
        }
        g = mean_pooled_grads(rows);
      }
      out.by_scope[scope].push_back(std::move(g));
    }
  }
  return out;
}

}  // namespace wmlab
