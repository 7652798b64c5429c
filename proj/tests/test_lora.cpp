#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "wmlab/lora.hpp"
#include "wmlab/rng.hpp"

using namespace wmlab;

namespace {

bool all_zero(const std::vector<double>& v) {
  for (double x : v)
    if (x != 0.0) return false;
  return true;
}

double abs_sum(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += std::fabs(x);
  return s;
}

}  // namespace

TEST_CASE("attaching an adapter leaves the output bit-identical") {
  ParamStore ps;
  Rng rng(41);
  AdaptedLinear al = make_adapted_linear(ps, "enc", 6, 4, rng);
  Tensor x = Tensor::from({0.3, -0.2, 0.8, 0.1, -0.5, 0.4}, {1, 6});
  const std::vector<double> before = al.forward(x).value();
  al.add_stage(ps, 1, 3, rng);
  const std::vector<double> after = al.forward(x).value();
  CHECK(before == after);
  al.add_stage(ps, 2, 3, rng);
  CHECK(al.forward(x).value() == before);
  CHECK(al.adapters.size() == 2);
  CHECK(al.current_stage == 2);
}

TEST_CASE("effective alpha is offset plus range times tanh") {
  ParamStore ps;
  Rng rng(42);
  AdaptedLinear al = make_adapted_linear(ps, "enc", 3, 3, rng, 1.0, 0.2);
  al.add_stage(ps, 1, 2, rng);
  CHECK(al.effective_alpha(0) == 1.0);  // alpha_hat starts at zero
  al.adapters[0].alpha_hat.value()[0] = 0.7;
  CHECK(al.effective_alpha(0) ==
        doctest::Approx(1.0 + 0.2 * std::tanh(0.7)).epsilon(1e-15));
  al.adapters[0].alpha_hat.value()[0] = -50.0;
  CHECK(al.effective_alpha(0) >= 0.8);  // saturates inside [offset +- range]
  al.adapters[0].alpha_hat.value()[0] = 50.0;
  CHECK(al.effective_alpha(0) <= 1.2);
}

TEST_CASE("earlier-stage adapters are value-passed but gradient-detached") {
  ParamStore ps;
  Rng rng(43);
  AdaptedLinear al = make_adapted_linear(ps, "enc", 4, 4, rng);
  al.add_stage(ps, 1, 2, rng);
  for (double& v : al.adapters[0].b.value()) v = 0.3;  // pretend it trained
  al.add_stage(ps, 2, 2, rng);
  for (double& v : al.adapters[1].b.value()) v = -0.2;

  Tensor x = Tensor::from({0.5, -0.1, 0.7, 0.2}, {1, 4});
  ps.zero_grad();
  backward(sum(al.forward(x)));

  CHECK(all_zero(al.adapters[0].a.grad()));
  CHECK(all_zero(al.adapters[0].b.grad()));
  CHECK(abs_sum(al.adapters[0].alpha_hat.grad()) > 0.0);  // alpha still adapts
  CHECK(abs_sum(al.adapters[1].a.grad()) > 0.0);
  CHECK(abs_sum(al.adapters[1].b.grad()) > 0.0);
  CHECK(abs_sum(al.adapters[1].alpha_hat.grad()) > 0.0);
  CHECK(abs_sum(al.base.w.grad()) > 0.0);  // freezing is the optimizer's job

  // the old adapter's value still reaches the output
  const std::vector<double> with_old = al.forward(x).value();
  for (double& v : al.adapters[0].b.value()) v = 0.0;
  CHECK(al.forward(x).value() != with_old);
}

TEST_CASE("stages must strictly increase") {
  ParamStore ps;
  Rng rng(44);
  AdaptedLinear al = make_adapted_linear(ps, "enc", 3, 3, rng);
  al.add_stage(ps, 1, 2, rng);
  CHECK_THROWS_AS(al.add_stage(ps, 1, 2, rng), std::runtime_error);
  CHECK_THROWS_AS(al.add_stage(ps, 0, 2, rng), std::runtime_error);
}

namespace {

struct DpsFixture {
  ParamStore ps;
  Rng rng{77};
  AdaptedLinear al;
  DpsConfig cfg;

  DpsFixture() {
    al = make_adapted_linear(ps, "enc", 4, 4, rng);
    cfg.enabled = true;
    cfg.n_stages = 2;
    cfg.rank = 2;
    cfg.min_stage0_iters = 200;
    cfg.quota = 1;
  }

  DpsController controller(int64_t max_iters, int n_tasks) {
    return DpsController(cfg, max_iters, n_tasks, ps, {&al}, {"enc."}, 7);
  }
};

}  // namespace

TEST_CASE("stage budget splits the post-warmup iterations") {
  DpsFixture f;
  CHECK(f.controller(1000, 2).stage_budget() == 400);
  CHECK(f.controller(1001, 2).stage_budget() == 401);  // ceiling division
  f.cfg.n_stages = 3;
  CHECK(f.controller(1100, 2).stage_budget() == 300);
}

TEST_CASE("stage 0 advances by deadline when nothing solves") {
  DpsFixture f;
  DpsController c = f.controller(1000, 2);
  CHECK_FALSE(c.maybe_advance(199));  // inside the warmup floor
  CHECK_FALSE(c.maybe_advance(200));  // floor passed, budget (400) not reached
  CHECK_FALSE(c.maybe_advance(399));
  CHECK(c.maybe_advance(400));
  CHECK(c.stage() == 1);
  REQUIRE(c.events().size() == 1);
  CHECK(c.events()[0].stage == 1);
  CHECK(c.events()[0].iter == 400);
  CHECK(c.events()[0].solved.empty());
  // the next stage waits for its own budget
  CHECK_FALSE(c.maybe_advance(401));
  CHECK(c.maybe_advance(800));
  CHECK(c.stage() == 2);
  // no stages remain
  CHECK_FALSE(c.maybe_advance(5000));
}

TEST_CASE("solving a task advances the stage once past the warmup floor") {
  DpsFixture f;
  DpsController c = f.controller(1000, 2);
  c.set_threshold(0, 0.9);
  c.set_threshold(1, 0.9);
  c.record_eval(0, 0.95);
  CHECK(c.solved(0));
  CHECK_FALSE(c.maybe_advance(150));  // quota met but warmup not done
  CHECK(c.maybe_advance(250));
  CHECK(c.stage() == 1);
  CHECK(c.events()[0].solved == std::vector<int>{0});
  // quota counts newly solved tasks per stage; task 0 is no longer new
  CHECK_FALSE(c.maybe_advance(300));
  c.record_eval(1, 0.92);
  CHECK(c.maybe_advance(301));
  CHECK(c.stage() == 2);
}

TEST_CASE("active tasks are the unsolved ones until everything solves") {
  DpsFixture f;
  DpsController c = f.controller(1000, 3);
  for (int t = 0; t < 3; ++t) c.set_threshold(t, 0.5);
  CHECK(c.active_tasks() == std::vector<int>{0, 1, 2});
  c.record_eval(1, 0.8);
  CHECK(c.active_tasks() == std::vector<int>{0, 2});
  CHECK(c.solved_tasks() == std::vector<int>{1});
  // a solved task can fall back below threshold
  c.record_eval(1, 0.2);
  CHECK(c.active_tasks() == std::vector<int>{0, 1, 2});
  c.record_eval(0, 0.8);
  c.record_eval(1, 0.8);
  c.record_eval(2, 0.8);
  CHECK(c.active_tasks() == std::vector<int>{0, 1, 2});  // all solved: train all
}

TEST_CASE("advancing freezes the base and earlier adapters, alphas stay live") {
  DpsFixture f;
  DpsController c = f.controller(1000, 1);
  CHECK(c.freeze_violations().empty());  // nothing frozen during warmup
  c.maybe_advance(400);
  REQUIRE(c.stage() == 1);

  auto trainable = [&](const std::string& name) {
    const Param* p = f.ps.find(name);
    REQUIRE(p != nullptr);
    return p->trainable;
  };
  CHECK_FALSE(trainable("enc.w"));
  CHECK_FALSE(trainable("enc.b"));
  CHECK(trainable("enc.lora1.a"));
  CHECK(trainable("enc.lora1.b"));
  CHECK(trainable("enc.lora1.alpha"));

  c.maybe_advance(800);
  REQUIRE(c.stage() == 2);
  CHECK_FALSE(trainable("enc.lora1.a"));
  CHECK_FALSE(trainable("enc.lora1.b"));
  CHECK(trainable("enc.lora1.alpha"));
  CHECK(trainable("enc.lora2.a"));
  CHECK(trainable("enc.lora2.b"));

  // alpha matrix covers every wrapped linear and adapter
  auto am = c.alpha_matrix();
  REQUIRE(am.size() == 1);
  REQUIRE(am[0].size() == 2);
  CHECK(am[0][0] == 1.0);
  CHECK(am[0][1] == 1.0);
}

TEST_CASE("freeze audit catches a single flipped bit") {
  DpsFixture f;
  DpsController c = f.controller(1000, 1);
  c.maybe_advance(400);
  CHECK(c.freeze_violations().empty());
  Param* w = f.ps.find("enc.w");
  const double keep = w->t.value()[3];
  w->t.value()[3] = std::nextafter(keep, 1e300);
  auto bad = c.freeze_violations();
  REQUIRE(bad.size() == 1);
  CHECK(bad[0] == "enc.w");
  w->t.value()[3] = keep;
  CHECK(c.freeze_violations().empty());
  // trainable params may move freely
  f.ps.find("enc.lora1.b")->t.value()[0] = 123.0;
  CHECK(c.freeze_violations().empty());
}

TEST_CASE("a disabled controller never advances") {
  DpsFixture f;
  f.cfg.enabled = false;
  DpsController c = f.controller(1000, 1);
  CHECK_FALSE(c.maybe_advance(999));
  CHECK(c.stage() == 0);
  CHECK(c.events().empty());
}
