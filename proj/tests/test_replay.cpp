#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <map>

#include "doctest.h"
#include "wmlab/replay.hpp"

using namespace wmlab;

namespace {

Episode make_episode(int task, int len, double reward_base = 0.0,
                     bool terminal = true) {
  Episode ep;
  ep.task = task;
  for (int t = 0; t <= len; ++t) ep.obs.push_back({double(t), double(task)});
  for (int t = 0; t < len; ++t) {
    ep.actions.push_back(Action{t % 2, {}});
    ep.rewards.push_back(reward_base + t);
    ep.policies.push_back({0.5, 0.5});
    ep.root_values.push_back(0.1 * t);
  }
  ep.terminal = terminal;
  return ep;
}

}  // namespace

TEST_CASE("episode validation rejects inconsistent field lengths") {
  Episode ok = make_episode(0, 3);
  CHECK_NOTHROW(ok.validate());
  CHECK(ok.length() == 3);

  Episode short_obs = make_episode(0, 3);
  short_obs.obs.pop_back();
  CHECK_THROWS_AS(short_obs.validate(), std::invalid_argument);

  Episode bad_policy = make_episode(0, 3);
  bad_policy.policies[1] = {0.9, 0.3};  // does not sum to 1
  CHECK_THROWS_AS(bad_policy.validate(), std::invalid_argument);

  Episode missing_values = make_episode(0, 3);
  missing_values.root_values.pop_back();
  CHECK_THROWS_AS(missing_values.validate(), std::invalid_argument);

  Episode empty = make_episode(0, 0);
  CHECK_THROWS_AS(empty.validate(), std::invalid_argument);
}

TEST_CASE("per-task transition accounting and capacity eviction") {
  ReplayBuffer rb(2, /*capacity_per_task=*/10);
  rb.add(make_episode(0, 4));
  rb.add(make_episode(0, 4));
  CHECK(rb.size(0) == 8);
  CHECK(rb.episode_count(0) == 2);
  CHECK(rb.size(1) == 0);
  CHECK_FALSE(rb.can_sample(1));

  // a third episode pushes task 0 over capacity; the oldest is evicted
  rb.add(make_episode(0, 4));
  CHECK(rb.size(0) == 8);
  CHECK(rb.episode_count(0) == 2);

  rb.add(make_episode(1, 6));
  CHECK(rb.size(1) == 6);  // independent budget per task
  CHECK(rb.size(0) == 8);
}

TEST_CASE("segments stay inside one episode and honor H") {
  ReplayBuffer rb(1, 100);
  rb.add(make_episode(0, 3, 10.0));
  rb.add(make_episode(0, 7, 20.0));
  Rng rng(4);
  for (int i = 0; i < 200; ++i) {
    Segment seg = rb.sample_segment(0, 5, rng);
    REQUIRE(seg.ep != nullptr);
    CHECK(seg.len >= 1);
    CHECK(seg.len <= 5);
    CHECK(seg.start >= 0);
    CHECK(seg.start + seg.len <= seg.ep->length());
    // len < H only because the episode ran out
    if (seg.len < 5) CHECK(seg.start + seg.len == seg.ep->length());
  }
}

TEST_CASE("a short episode yields short segments") {
  ReplayBuffer rb(1, 100);
  rb.add(make_episode(0, 2));
  Rng rng(4);
  for (int i = 0; i < 20; ++i) {
    Segment seg = rb.sample_segment(0, 6, rng);
    CHECK(seg.len <= 2);
    CHECK(seg.start + seg.len == 2);
  }
}

TEST_CASE("multitask batches split evenly with ascending round-robin") {
  ReplayBuffer rb(3, 100);
  rb.add(make_episode(0, 10));
  rb.add(make_episode(1, 10));
  rb.add(make_episode(2, 10));
  Rng rng(8);

  auto count_tasks = [](const std::vector<Segment>& segs) {
    std::map<int, int> n;
    for (const auto& s : segs) ++n[s.ep->task];
    return n;
  };

  auto even = rb.build_multitask_batch({0, 1}, 8, 4, rng);
  REQUIRE(even.size() == 8);
  auto n2 = count_tasks(even);
  CHECK(n2[0] == 4);
  CHECK(n2[1] == 4);

  auto uneven = rb.build_multitask_batch({0, 1, 2}, 8, 4, rng);
  REQUIRE(uneven.size() == 8);
  auto n3 = count_tasks(uneven);
  CHECK(n3[0] == 3);  // remainder goes to the lowest task indices
  CHECK(n3[1] == 3);
  CHECK(n3[2] == 2);
}

TEST_CASE("tasks with empty buffers are skipped") {
  ReplayBuffer rb(3, 100);
  rb.add(make_episode(0, 10));
  rb.add(make_episode(2, 10));
  Rng rng(8);
  auto segs = rb.build_multitask_batch({0, 1, 2}, 6, 4, rng);
  REQUIRE(segs.size() == 6);
  auto has = [&](int task) {
    for (const auto& s : segs)
      if (s.ep->task == task) return true;
    return false;
  };
  CHECK(has(0));
  CHECK_FALSE(has(1));
  CHECK(has(2));

  ReplayBuffer empty(2, 100);
  CHECK(empty.build_multitask_batch({0, 1}, 6, 4, rng).empty());
}

TEST_CASE("sampling is deterministic given the rng seed") {
  ReplayBuffer rb(1, 100);
  for (int i = 0; i < 5; ++i) rb.add(make_episode(0, 6, i * 100.0));
  Rng r1(99), r2(99);
  for (int i = 0; i < 50; ++i) {
    Segment a = rb.sample_segment(0, 4, r1);
    Segment b = rb.sample_segment(0, 4, r2);
    CHECK(a.ep == b.ep);
    CHECK(a.start == b.start);
    CHECK(a.len == b.len);
  }
}

TEST_CASE("sampling an empty task throws") {
  ReplayBuffer rb(2, 100);
  rb.add(make_episode(0, 3));
  Rng rng(1);
  CHECK_THROWS_AS((void)rb.sample_segment(1, 4, rng), std::runtime_error);
}
