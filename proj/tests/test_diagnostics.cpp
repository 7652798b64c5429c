#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <set>

#include "doctest.h"
#include "wmlab/diagnostics.hpp"
#include "wmlab/rng.hpp"

using namespace wmlab;

namespace {

bool all_zero(const std::vector<double>& v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return x == 0.0; });
}

ModelConfig split_config(Backbone bb) {
  ModelConfig mc;
  mc.latent_dim = 12;
  mc.n_layers = 1;
  mc.n_heads = 2;
  mc.ffn_hidden = 16;
  mc.expert_hidden = 8;
  mc.n_experts = 4;
  mc.backbone = bb;
  mc.simnorm_group = 4;
  mc.encoder_hidden = 16;
  mc.context_len = 3;
  mc.infer_context = 2;
  mc.obs_dims = {4, 4};
  ActionSpace sp;
  sp.n = 2;
  mc.action_spaces = {sp, sp};
  return mc;
}

Segment make_segment(int task, int len, uint64_t seed) {
  Rng rng(seed);
  Episode ep;
  ep.task = task;
  for (int t = 0; t <= len; ++t) {
    std::vector<double> o(4);
    for (double& v : o) v = rng.normal();
    ep.obs.push_back(std::move(o));
  }
  for (int t = 0; t < len; ++t) {
    ep.actions.push_back(Action{rng.randint(0, 1), {}});
    double p = rng.uniform(0.1, 0.9);
    ep.policies.push_back({p, 1.0 - p});
    ep.rewards.push_back(rng.uniform(0.0, 1.0));
    ep.root_values.push_back(rng.uniform(0.0, 1.0));
  }
  ep.terminal = false;
  ep.validate();
  Segment s;
  s.ep = std::make_shared<const Episode>(ep);
  s.start = 0;
  s.len = len;
  return s;
}

std::vector<double> flatten_prefix(const ParamStore& ps,
                                   const std::string& prefix) {
  std::vector<double> out;
  for (const auto& p : ps.items()) {
    if (p.name.rfind(prefix, 0) != 0) continue;
    const auto& g = p.t.grad();
    out.insert(out.end(), g.begin(), g.end());
  }
  return out;
}

}  // namespace

TEST_CASE("gradient conflict hand values") {
  std::vector<double> g = {1.0, 2.0, -3.0};
  std::vector<double> ng = {-1.0, -2.0, 3.0};
  CHECK(max_gradient_conflict({g, ng}) == doctest::Approx(1.0));
  CHECK(max_gradient_conflict({g, g}) == doctest::Approx(-1.0));
  CHECK(max_gradient_conflict({{1, 0}, {0, 1}}) == doctest::Approx(0.0));
  // the max is over all pairs
  CHECK(max_gradient_conflict({{1, 0}, {1, 1}, {-1, 0}}) ==
        doctest::Approx(1.0));
  // zero vectors are skipped, not counted
  CHECK(max_gradient_conflict({g, {0.0, 0.0, 0.0}, ng}) ==
        doctest::Approx(1.0));
  CHECK_THROWS_AS(max_gradient_conflict({g, {0.0, 0.0, 0.0}}),
                  std::invalid_argument);
  CHECK_THROWS_AS(max_gradient_conflict({g}), std::invalid_argument);
  CHECK_THROWS_AS(max_gradient_conflict({{1.0, 2.0}, {1.0, 2.0, 3.0}}),
                  std::invalid_argument);
}

TEST_CASE("dormant ratio counts low-activation columns") {
  std::vector<std::vector<double>> acts = {{0.0, 1.0}, {0.0, -1.0}};
  CHECK(dormant_ratio(acts, 0.1) == doctest::Approx(0.5));
  CHECK(dormant_ratio(acts, 2.0) == doctest::Approx(1.0));
  // means are of absolute values: column 1 mean is 1, not 0
  CHECK(dormant_ratio(acts, 0.999) == doctest::Approx(0.5));
  CHECK_THROWS_AS(dormant_ratio(acts, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(dormant_ratio({}, 0.1), std::invalid_argument);
}

TEST_CASE("relative dormant ratio scales with overall activity") {
  // overall mean |a| = 0.5, so frac 0.01 puts eps at 0.005
  std::vector<std::vector<double>> acts = {{0.0, 1.0}, {0.0, -1.0}};
  CHECK(dormant_ratio_relative(acts, 0.01) == doctest::Approx(0.5));
  CHECK(dormant_ratio_relative({{1.0, 2.0}, {3.0, 4.0}}, 0.01) ==
        doctest::Approx(0.0));
  // a dead layer is fully dormant by convention
  CHECK(dormant_ratio_relative({{0.0, 0.0}, {0.0, 0.0}}, 0.01) == 1.0);
}

TEST_CASE("singular values of small matrices") {
  auto sv = singular_values({{1.0, 0.0}, {0.0, 2.0}});
  REQUIRE(sv.size() == 2);
  CHECK(sv[0] == doctest::Approx(2.0));
  CHECK(sv[1] == doctest::Approx(1.0));

  sv = singular_values({{3.0, 0.0}, {4.0, 0.0}});
  CHECK(sv[0] == doctest::Approx(5.0));
  CHECK(sv[1] >= 0.0);
  CHECK(sv[1] < 1e-9);

  sv = singular_values({{3.0}, {4.0}});
  REQUIRE(sv.size() == 1);
  CHECK(sv[0] == doctest::Approx(5.0));

  CHECK_THROWS_AS(singular_values({}), std::invalid_argument);
  CHECK_THROWS_AS(singular_values({{1.0, 2.0}, {3.0}}),
                  std::invalid_argument);

  // sum of squared singular values equals the squared Frobenius norm
  Rng rng(11);
  std::vector<std::vector<double>> a(5, std::vector<double>(3));
  double fro = 0.0;
  for (auto& row : a)
    for (double& x : row) {
      x = rng.normal();
      fro += x * x;
    }
  double ssq = 0.0;
  for (double s : singular_values(a)) ssq += s * s;
  CHECK(ssq == doctest::Approx(fro).epsilon(1e-9));
}

TEST_CASE("effective rank identities") {
  std::vector<std::vector<double>> eye(4, std::vector<double>(4, 0.0));
  for (int i = 0; i < 4; ++i) eye[i][i] = 1.0;
  CHECK(effective_rank(eye) == doctest::Approx(4.0).epsilon(1e-9));

  CHECK(effective_rank({{1.0, 2.0}, {2.0, 4.0}}) ==
        doctest::Approx(1.0).epsilon(1e-6));

  std::vector<std::vector<double>> d(4, std::vector<double>(4, 0.0));
  d[0][0] = 2.0;
  d[1][1] = 1.0;
  d[2][2] = 1.0;
  CHECK(std::fabs(effective_rank(d) - std::pow(2.0, 1.5)) < 1e-3);

  CHECK_THROWS_AS(effective_rank({{0.0, 0.0}, {0.0, 0.0}}),
                  std::invalid_argument);

  // never exceeds the true rank
  Rng rng(13);
  std::vector<std::vector<double>> a(6, std::vector<double>(3));
  for (auto& row : a)
    for (double& x : row) x = rng.normal();
  const double er = effective_rank(a);
  CHECK(er <= 3.0 + 1e-9);
  CHECK(er >= 1.0);
}

TEST_CASE("latent norm averages row norms") {
  CHECK(latent_norm({{3.0, 4.0}, {0.0, 0.0}}) == doctest::Approx(2.5));
  CHECK(latent_norm({{1.0}}) == doctest::Approx(1.0));
  CHECK_THROWS_AS(latent_norm({}), std::invalid_argument);
}

TEST_CASE("moco lambda stays on the simplex under random updates") {
  Rng rng(17);
  MocoState st;
  st.init(4, 32);
  MocoConfig cfg;
  for (int it = 0; it < 1000; ++it) {
    std::vector<std::vector<double>> grads(4, std::vector<double>(32));
    std::vector<double> losses(4);
    for (int i = 0; i < 4; ++i) {
      for (double& g : grads[i]) g = rng.normal(0.0, 2.0);
      losses[i] = rng.uniform(0.01, 5.0);
    }
    auto gs = moco_step(st, cfg, grads, losses);
    CHECK(gs.size() == 32);
    double sum = 0.0;
    for (double l : st.lambda) {
      CHECK(l >= 0.0);
      sum += l;
    }
    CHECK(std::fabs(sum - 1.0) <= 1e-12);
  }
}

TEST_CASE("moco keeps symmetric opposed tasks balanced") {
  MocoState st;
  st.init(2, 8);
  MocoConfig cfg;
  Rng rng(19);
  std::vector<double> g(8);
  for (double& x : g) x = rng.normal();
  std::vector<double> neg(8);
  for (size_t j = 0; j < 8; ++j) neg[j] = -g[j];
  for (int it = 0; it < 50; ++it) {
    (void)moco_step(st, cfg, {g, neg}, {1.0, 1.0});
    CHECK(st.lambda[0] == 0.5);
    CHECK(st.lambda[1] == 0.5);
  }
}

TEST_CASE("moco with beta one tracks the scaled gradients exactly") {
  MocoState st;
  st.init(2, 3);
  MocoConfig cfg;
  cfg.beta = 1.0;
  std::vector<std::vector<double>> grads = {{3.0, 4.0, 0.0}, {1.0, -2.0, 2.0}};
  std::vector<double> losses = {2.0, 0.5};
  auto gs = moco_step(st, cfg, grads, losses);

  for (int i = 0; i < 2; ++i) {
    double sq = 0.0;
    for (double x : grads[i]) sq += x * x;
    const double scale = losses[i] / (std::sqrt(sq) + 1e-8);
    for (int j = 0; j < 3; ++j) CHECK(st.y[i][j] == grads[i][j] * scale);
  }
  for (int j = 0; j < 3; ++j)
    CHECK(gs[j] == doctest::Approx(st.lambda[0] * st.y[0][j] +
                                   st.lambda[1] * st.y[1][j])
                       .epsilon(1e-12));
}

TEST_CASE("moco validates shapes") {
  MocoState st;
  st.init(2, 3);
  MocoConfig cfg;
  CHECK_THROWS_AS((void)moco_step(st, cfg, {{1.0, 0.0, 0.0}}, {1.0}),
                  std::invalid_argument);
  CHECK_THROWS_AS(
      (void)moco_step(st, cfg, {{1.0, 0.0}, {1.0, 0.0, 0.0}}, {1.0, 1.0}),
      std::invalid_argument);
  CHECK_THROWS_AS(st.init(0, 3), std::invalid_argument);
}

TEST_CASE("per-task gradient splits sum to the joint gradient") {
  ModelConfig mc = split_config(Backbone::kMoe);
  WorldModel model(mc, 5), target(mc, 6);
  model.set_routing_enabled(true);

  std::vector<Segment> batch = {make_segment(0, 2, 101),
                                make_segment(0, 1, 102),
                                make_segment(1, 2, 103)};
  std::vector<LossWeights> w = {default_loss_weights(true),
                                default_loss_weights(true)};
  std::vector<std::string> scopes = {"moe_layer",  "shared_expert",
                                     "expert_0",   "expert_1",
                                     "expert_2",   "expert_3",
                                     "encoder_output", "moe_input"};
  model.routing().clear();
  TaskGradients tg =
      per_task_gradient_split(model, target, batch, w, 3, 0.95, scopes, 0);

  CHECK(tg.tasks == std::vector<int>{0, 1});
  for (const auto& s : scopes) {
    REQUIRE(tg.by_scope.at(s).size() == 2);
  }

  // which experts each task actually visited, from the routing records
  std::set<int> visited[2];
  for (const auto& r : model.routing().records())
    if (r.layer == 0) visited[r.task].insert(r.expert);

  for (size_t ti = 0; ti < 2; ++ti) {
    CHECK(!all_zero(tg.by_scope.at("shared_expert")[ti]));
    CHECK(!all_zero(tg.by_scope.at("moe_layer")[ti]));
    CHECK(tg.by_scope.at("encoder_output")[ti].size() == 12);
    CHECK(tg.by_scope.at("moe_input")[ti].size() == 12);
    CHECK(!all_zero(tg.by_scope.at("encoder_output")[ti]));
    for (int m = 0; m < 4; ++m) {
      const auto& gm = tg.by_scope.at("expert_" + std::to_string(m))[ti];
      const bool hit = visited[tg.tasks[ti]].count(m) > 0;
      CHECK(all_zero(gm) == !hit);
    }
  }

  // joint batch gradient over the probed layer equals the per-task sum
  model.params().zero_grad();
  for (const auto& seg : batch) {
    LossTerms terms;
    Tensor loss = segment_loss(model, target, seg, w.at(seg.ep->task), 3,
                               0.95, terms);
    backward(scale(loss, 1.0 / batch.size()));
  }
  const std::vector<double> joint = flatten_prefix(model.params(), "blocks.0.moe.");
  const auto& per0 = tg.by_scope.at("moe_layer")[0];
  const auto& per1 = tg.by_scope.at("moe_layer")[1];
  REQUIRE(per0.size() == joint.size());
  double worst = 0.0;
  for (size_t i = 0; i < joint.size(); ++i)
    worst = std::max(worst, std::fabs(per0[i] + per1[i] - joint[i]));
  CHECK(worst < 1e-10);
}

TEST_CASE("a zeroed gate routes everything to expert zero") {
  ModelConfig mc = split_config(Backbone::kMoe);
  WorldModel model(mc, 7), target(mc, 8);
  auto zero_param = [&](const std::string& name) {
    Param* p = model.params().find(name);
    REQUIRE(p != nullptr);
    std::fill(p->t.value().begin(), p->t.value().end(), 0.0);
  };
  zero_param("blocks.0.moe.gate.w");
  zero_param("blocks.0.moe.gate.b");

  std::vector<Segment> batch = {make_segment(0, 2, 201),
                                make_segment(1, 2, 202)};
  std::vector<LossWeights> w = {default_loss_weights(true),
                                default_loss_weights(true)};
  TaskGradients tg = per_task_gradient_split(
      model, target, batch, w, 3, 0.95,
      {"expert_0", "expert_1", "expert_2", "expert_3"}, 0);

  for (size_t ti = 0; ti < 2; ++ti) {
    CHECK(!all_zero(tg.by_scope.at("expert_0")[ti]));
    CHECK(all_zero(tg.by_scope.at("expert_1")[ti]));
    CHECK(all_zero(tg.by_scope.at("expert_2")[ti]));
    CHECK(all_zero(tg.by_scope.at("expert_3")[ti]));
  }
}

TEST_CASE("gradient scopes validate their targets") {
  std::vector<Segment> batch = {make_segment(0, 1, 301)};
  std::vector<LossWeights> w = {default_loss_weights(true),
                                default_loss_weights(true)};

  ModelConfig dense = split_config(Backbone::kDense);
  WorldModel dm(dense, 9), dt(dense, 10);
  CHECK_THROWS_AS(per_task_gradient_split(dm, dt, batch, w, 3, 0.95,
                                          {"expert_0"}, 0),
                  std::invalid_argument);
  CHECK_THROWS_AS(per_task_gradient_split(dm, dt, batch, w, 3, 0.95,
                                          {"shared_expert"}, 0),
                  std::invalid_argument);
  // the dense backbone still has a probed feed-forward layer
  TaskGradients tg =
      per_task_gradient_split(dm, dt, batch, w, 3, 0.95, {"moe_layer"}, 0);
  CHECK(!all_zero(tg.by_scope.at("moe_layer")[0]));

  ModelConfig moe = split_config(Backbone::kMoe);
  WorldModel mm(moe, 11), mt(moe, 12);
  CHECK_THROWS_AS(per_task_gradient_split(mm, mt, batch, w, 3, 0.95,
                                          {"expert_9"}, 0),
                  std::invalid_argument);
  CHECK_THROWS_AS(per_task_gradient_split(mm, mt, batch, w, 3, 0.95,
                                          {"expert_x"}, 0),
                  std::invalid_argument);
  CHECK_THROWS_AS(per_task_gradient_split(mm, mt, batch, w, 3, 0.95,
                                          {"bogus"}, 0),
                  std::invalid_argument);
  CHECK_THROWS_AS(per_task_gradient_split(mm, mt, batch, w, 3, 0.95,
                                          {"moe_layer"}, 1),
                  std::invalid_argument);
  CHECK_THROWS_AS(per_task_gradient_split(mm, mt, batch, w, 3, 0.95,
                                          {"moe_layer"}, -1),
                  std::invalid_argument);
}
