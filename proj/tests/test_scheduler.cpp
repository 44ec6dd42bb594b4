#include "orchestra/scheduler.hpp"

#include <chrono>
#include <cstdio>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <gtest/gtest.h>

namespace {

using namespace orchestra;
using namespace orchestra::scheduler;

// Two reliable workers plus one that refuses a marked payload; enough to
// drive every turn shape without touching the sample catalogue.
pool::Registry tiny_registry() {
  const nlohmann::json reliable = {
      {"competence", {{"*", 1.0}}},
      {"tokens", {{"prompt", 100}, {"completion", 20}}},
      {"latency_ms", 50},
  };
  const nlohmann::json moody = {
      {"competence", {{"*", 1.0}}},
      {"tokens", {{"prompt", 100}, {"completion", 20}}},
      {"latency_ms", 50},
      {"responses",
       nlohmann::json::array(
           {{{"fingerprint", "do fail"}, {"status", "refusal"}}})},
  };
  std::vector<pool::WorkerSpec> workers;
  workers.push_back({"steady-small", "steady-small",
                     pool::PriceSheet{1000, 2000},
                     {"reason", "web_search"},
                     "",
                     reliable});
  workers.push_back({"steady-large", "steady-large",
                     pool::PriceSheet{5000, 10000},
                     {"reason", "execute_python"},
                     "",
                     reliable});
  workers.push_back({"moody", "moody",
                     pool::PriceSheet{2000, 4000},
                     {"reason"},
                     "",
                     moody});
  std::vector<pool::PrimitiveSpec> primitives;
  primitives.push_back({"reason", "answer_reason", ""});
  primitives.push_back({"web_search", "retrieve", ""});
  primitives.push_back({"execute_python", "execute", ""});
  return pool::Registry(std::move(workers), std::move(primitives));
}

// Policy built from a fixed list of actions, one per turn.
Policy scripted_policy(std::vector<PolicyAction> actions) {
  auto shared =
      std::make_shared<std::vector<PolicyAction>>(std::move(actions));
  return [shared](const PolicyView& view) -> PolicyAction {
    if (static_cast<std::size_t>(view.turn) < shared->size()) {
      return (*shared)[view.turn];
    }
    return {};
  };
}

PolicyAction plan_action(std::vector<PlannedSubtask> subtasks,
                         std::vector<RouteChoice> routes = {}) {
  PolicyAction action;
  action.kind = PolicyAction::Kind::plan;
  action.subtasks = std::move(subtasks);
  action.routes = std::move(routes);
  return action;
}

PolicyAction route_action(RouteChoice route) {
  PolicyAction action;
  action.kind = PolicyAction::Kind::route;
  action.routes = {std::move(route)};
  return action;
}

PolicyAction finish_action(std::string answer) {
  PolicyAction action;
  action.kind = PolicyAction::Kind::finish;
  action.final_answer = std::move(answer);
  return action;
}

// ---------------------------------------------------------------------------

TEST(ReadySet, FollowsTheDependencyFrontier) {
  const std::map<int, std::set<int>> deps = {
      {1, {}}, {2, {1}}, {3, {1, 2}}};
  EXPECT_EQ(ready_set(deps, {}), (std::set<int>{1}));
  EXPECT_EQ(ready_set(deps, {1}), (std::set<int>{2}));
  EXPECT_EQ(ready_set(deps, {1, 2}), (std::set<int>{3}));
  EXPECT_EQ(ready_set(deps, {1, 2, 3}), (std::set<int>{}));
}

TEST(RunEpisode, ImmediateFinishIsALazyTrajectory) {
  const pool::Registry registry = tiny_registry();
  const workers::BackendMap backends =
      workers::make_scripted_backends(registry);
  const EpisodeOutcome outcome = run_episode(
      registry, backends, scripted_policy({finish_action("42")}), "2 + 40?");
  EXPECT_TRUE(outcome.finished);
  EXPECT_EQ(outcome.final_answer, "42");
  EXPECT_TRUE(outcome.doc.turns.empty());
  EXPECT_EQ(outcome.ledger.total_nano(), 0);
  EXPECT_EQ(grammar::classify_behaviour(outcome.doc),
            grammar::BehaviourLabel::lazy);
  const std::string text = grammar::serialize_trajectory(outcome.doc);
  EXPECT_EQ(grammar::parse_trajectory(text), outcome.doc);
}

TEST(RunEpisode, PlanWithChainedRoutesResolvesInOneTurn) {
  const pool::Registry registry = tiny_registry();
  const workers::BackendMap backends =
      workers::make_scripted_backends(registry);
  // 1 and 2 are independent, 3 needs 1, 4 needs 2 and 3, 5 needs 4: three
  // dispatch waves inside a single turn.
  std::vector<PlannedSubtask> subtasks = {
      {1, {}, "gather a"},      {2, {}, "gather b"},
      {3, {1}, "refine a"},     {4, {2, 3}, "merge"},
      {5, {4}, "summarize"},
  };
  std::vector<RouteChoice> routes;
  for (int id = 1; id <= 5; ++id) {
    routes.push_back({id, id % 2 == 0 ? "steady-large" : "steady-small",
                      id % 2 == 0 ? "execute_python" : "reason",
                      "work item " + std::to_string(id)});
  }
  const EpisodeOutcome outcome = run_episode(
      registry, backends,
      scripted_policy({plan_action(subtasks, routes), finish_action("done")}),
      "fan out");

  ASSERT_EQ(outcome.doc.turns.size(), 1u);
  const grammar::TurnBlock& turn = outcome.doc.turns[0];
  EXPECT_EQ(turn.round, 1);
  EXPECT_EQ(turn.routes.size(), 5u);
  ASSERT_EQ(turn.observations.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(turn.observations[i].subtask_id, static_cast<int>(i) + 1);
  }
  ASSERT_TRUE(turn.verify.has_value());
  EXPECT_FALSE(turn.verify->replan);
  ASSERT_EQ(outcome.turns.size(), 2u);
  EXPECT_EQ(outcome.turns[0].dispatches.size(), 5u);

  // Every call bills 100 prompt + 20 completion tokens at its worker's rate.
  const std::int64_t small = 100 * 1000 + 20 * 2000;
  const std::int64_t large = 100 * 5000 + 20 * 10000;
  EXPECT_EQ(outcome.ledger.total_nano(), 3 * small + 2 * large);
  EXPECT_EQ(grammar::classify_behaviour(outcome.doc),
            grammar::BehaviourLabel::oneshot);
  const std::string text = grammar::serialize_trajectory(outcome.doc);
  EXPECT_EQ(grammar::parse_trajectory(text), outcome.doc);
}

TEST(RunEpisode, BareRoutesJoinTheirOpenRoundOrGoImplicit) {
  const pool::Registry registry = tiny_registry();
  const workers::BackendMap backends =
      workers::make_scripted_backends(registry);
  const EpisodeOutcome outcome = run_episode(
      registry, backends,
      scripted_policy({
          plan_action({{1, {}, "find"}, {2, {1}, "check"}}),
          route_action({1, "steady-small", "reason", "find it"}),
          route_action({2, "steady-small", "reason", "check it"}),
          finish_action("ok"),
      }),
      "step by step");
  // The first route lands in the plan's still-open round; the verify
  // synthesized for its dispatch closes that round, so the second route
  // opens an implicit one.
  ASSERT_EQ(outcome.doc.turns.size(), 2u);
  EXPECT_FALSE(outcome.doc.turns[0].implicit());
  EXPECT_TRUE(outcome.doc.turns[1].implicit());
  EXPECT_EQ(outcome.doc.turns[0].round, 1);
  EXPECT_EQ(outcome.doc.turns[1].round, 2);
  ASSERT_EQ(outcome.doc.turns[0].routes.size(), 1u);
  EXPECT_EQ(outcome.doc.turns[0].routes[0].subtask_id, 1);
  ASSERT_EQ(outcome.doc.turns[1].routes.size(), 1u);
  EXPECT_EQ(outcome.doc.turns[1].routes[0].subtask_id, 2);
  ASSERT_EQ(outcome.turns.size(), 4u);
  EXPECT_EQ(outcome.turns[1].round, 1);
  EXPECT_EQ(outcome.turns[2].round, 2);
  EXPECT_EQ(grammar::classify_behaviour(outcome.doc),
            grammar::BehaviourLabel::continuation);
  const std::string text = grammar::serialize_trajectory(outcome.doc);
  EXPECT_EQ(grammar::parse_trajectory(text), outcome.doc);
}

TEST(RunEpisode, InvalidActionsBurnTurnsWithoutDocumentTrace) {
  const pool::Registry registry = tiny_registry();
  const workers::BackendMap backends =
      workers::make_scripted_backends(registry);
  const EpisodeOutcome outcome = run_episode(
      registry, backends,
      scripted_policy({
          {},  // noop
          plan_action({{1, {}, "solo"}},
                      {{1, "steady-small", "reason", "go"}}),
          route_action({7, "steady-small", "reason", "ghost subtask"}),
          route_action({1, "nobody", "reason", "ghost worker"}),
          route_action({1, "steady-small", "execute_python", "bad pair"}),
          finish_action("answer"),
      }),
      "resilience");
  ASSERT_EQ(outcome.turns.size(), 6u);
  EXPECT_FALSE(outcome.turns[0].valid);
  EXPECT_TRUE(outcome.turns[1].valid);
  EXPECT_FALSE(outcome.turns[2].valid);
  EXPECT_FALSE(outcome.turns[3].valid);
  EXPECT_FALSE(outcome.turns[4].valid);
  EXPECT_TRUE(outcome.turns[5].valid);
  for (int bad : {0, 2, 3, 4}) {
    EXPECT_DOUBLE_EQ(outcome.turns[bad].shaping, -0.025);
    EXPECT_FALSE(outcome.turns[bad].note.empty());
  }
  // The document keeps only the accepted plan turn, re-synced to its
  // episode index, plus the final answer.
  ASSERT_EQ(outcome.doc.turns.size(), 1u);
  EXPECT_EQ(outcome.doc.turns[0].round, 2);
  EXPECT_TRUE(outcome.finished);
  const std::string text = grammar::serialize_trajectory(outcome.doc);
  EXPECT_EQ(grammar::parse_trajectory(text), outcome.doc);
}

TEST(RunEpisode, FailedDispatchYieldsReplanAndRepairBonus) {
  const pool::Registry registry = tiny_registry();
  const workers::BackendMap backends =
      workers::make_scripted_backends(registry);
  const EpisodeOutcome outcome = run_episode(
      registry, backends,
      scripted_policy({
          plan_action({{1, {}, "try"}},
                      {{1, "moody", "reason", "do fail"}}),
          plan_action({{2, {}, "retry"}},
                      {{2, "steady-small", "reason", "do it right"}}),
          finish_action("recovered"),
      }),
      "recovery");
  ASSERT_EQ(outcome.doc.turns.size(), 2u);
  const grammar::TurnBlock& first = outcome.doc.turns[0];
  ASSERT_TRUE(first.verify.has_value());
  EXPECT_TRUE(first.verify->replan);
  EXPECT_NE(first.verify->text.find("subtask 1"), std::string::npos);
  EXPECT_TRUE(first.observations.empty());  // refusals leave no observation

  const grammar::TurnBlock& second = outcome.doc.turns[1];
  ASSERT_TRUE(second.verify.has_value());
  EXPECT_FALSE(second.verify->replan);

  // Turn 1 replanned after the failure: valid emission + repair bonus.
  EXPECT_DOUBLE_EQ(outcome.turns[0].shaping, 0.025);
  EXPECT_DOUBLE_EQ(outcome.turns[1].shaping, 0.05);
  EXPECT_EQ(grammar::classify_behaviour(outcome.doc),
            grammar::BehaviourLabel::decomp_repair);
  // The refused call still billed its prompt tokens.
  EXPECT_EQ(outcome.ledger.entries()[0].usage.completion_tokens, 0);
  EXPECT_GT(outcome.ledger.entries()[0].cost_nano, 0);
  const std::string text = grammar::serialize_trajectory(outcome.doc);
  EXPECT_EQ(grammar::parse_trajectory(text), outcome.doc);
}

TEST(RunEpisode, QueuedRoutesDispatchWhenDependenciesResolve) {
  const pool::Registry registry = tiny_registry();
  const workers::BackendMap backends =
      workers::make_scripted_backends(registry);
  const EpisodeOutcome outcome = run_episode(
      registry, backends,
      scripted_policy({
          // Route the dependent subtask first; it must wait for 1.
          plan_action({{1, {}, "base"}, {2, {1}, "dependent"}},
                      {{2, "steady-small", "reason", "needs base"}}),
          route_action({1, "steady-small", "reason", "the base"}),
          finish_action("ok"),
      }),
      "queueing");
  // Nothing dispatched on the plan turn, so its round never closed and the
  // follow-up route joins it; the whole chain then resolves in one round.
  ASSERT_EQ(outcome.doc.turns.size(), 1u);
  const grammar::TurnBlock& turn = outcome.doc.turns[0];
  ASSERT_EQ(turn.routes.size(), 2u);
  EXPECT_EQ(turn.routes[0].subtask_id, 2);
  EXPECT_EQ(turn.routes[1].subtask_id, 1);
  ASSERT_EQ(turn.observations.size(), 2u);
  EXPECT_EQ(turn.observations[0].subtask_id, 1);
  EXPECT_EQ(turn.observations[1].subtask_id, 2);
  ASSERT_TRUE(turn.verify.has_value());
  EXPECT_TRUE(outcome.turns[0].dispatches.empty());
  EXPECT_EQ(outcome.turns[1].dispatches.size(), 2u);
  const std::string text = grammar::serialize_trajectory(outcome.doc);
  EXPECT_EQ(grammar::parse_trajectory(text), outcome.doc);
}

// Records wall-clock windows per call so the test can prove two routes ran
// concurrently.
class StopwatchBackend : public workers::WorkerBackend {
 public:
  workers::WorkerResponse call(
      const workers::WorkerRequest& request) noexcept override {
    const auto start = std::chrono::steady_clock::now();
    std::this_thread::sleep_for(std::chrono::milliseconds(60));
    const auto end = std::chrono::steady_clock::now();
    {
      const std::lock_guard<std::mutex> lock(mu_);
      windows_[request.subtask_id] = {start, end};
    }
    workers::WorkerResponse response;
    response.status = workers::CallStatus::ok;
    response.observation = "done";
    response.usage = {10, 5};
    response.latency_s = 0.06;
    return response;
  }

  using Window = std::pair<std::chrono::steady_clock::time_point,
                           std::chrono::steady_clock::time_point>;
  [[nodiscard]] std::map<int, Window> windows() const {
    const std::lock_guard<std::mutex> lock(mu_);
    return windows_;
  }

 private:
  mutable std::mutex mu_;
  std::map<int, Window> windows_;
};

TEST(RunEpisode, IndependentRoutesRunConcurrently) {
  const pool::Registry registry = tiny_registry();
  auto stopwatch = std::make_shared<StopwatchBackend>();
  workers::BackendMap backends;
  backends["steady-small"] = stopwatch;
  backends["steady-large"] = stopwatch;
  backends["moody"] = stopwatch;
  const EpisodeOutcome outcome = run_episode(
      registry, backends,
      scripted_policy({
          plan_action({{1, {}, "left"}, {2, {}, "right"}},
                      {{1, "steady-small", "reason", "a"},
                       {2, "steady-large", "execute_python", "b"}}),
          finish_action("ok"),
      }),
      "parallel");
  ASSERT_TRUE(outcome.finished);
  const auto windows = stopwatch->windows();
  ASSERT_EQ(windows.size(), 2u);
  const auto& [s1, e1] = windows.at(1);
  const auto& [s2, e2] = windows.at(2);
  EXPECT_TRUE(s1 < e2 && s2 < e1) << "route execution did not overlap";
}

TEST(TruncateContext, ElidesOldestObservationsFirst) {
  grammar::TrajectoryDoc doc;
  doc.query = "big";
  std::string wordy;
  for (int i = 0; i < 120; ++i) wordy += "word ";
  for (int t = 0; t < 3; ++t) {
    grammar::TurnBlock turn;
    turn.round = t + 1;
    grammar::PlanBlock plan;
    plan.round = t + 1;
    plan.subtasks.push_back({t + 1, {}, "step"});
    turn.plan = plan;
    turn.observations.push_back({t + 1, wordy});
    doc.turns.push_back(turn);
  }

  const grammar::TrajectoryDoc cut = truncate_context(doc, 200);
  EXPECT_EQ(cut.turns[0].observations[0].text, kElisionMarker);
  EXPECT_EQ(cut.turns[1].observations[0].text, kElisionMarker);
  // The most recent turn keeps its observation even over budget.
  EXPECT_EQ(cut.turns[2].observations[0].text, wordy);
  for (std::size_t t = 0; t < 3; ++t) {
    ASSERT_TRUE(cut.turns[t].plan.has_value());
  }

  const grammar::TrajectoryDoc untouched = truncate_context(doc, 1 << 20);
  EXPECT_EQ(untouched, doc);
  EXPECT_THROW((void)truncate_context(doc, 0), std::invalid_argument);
}

TEST(RunEpisode, PolicySeesElidedContextUnderTightBudget) {
  const pool::Registry registry = tiny_registry();
  const workers::BackendMap backends =
      workers::make_scripted_backends(registry);
  std::string wordy = "summarize:";
  for (int i = 0; i < 150; ++i) wordy += " filler";
  auto contexts = std::make_shared<std::vector<std::string>>();
  Policy policy = [contexts, wordy](const PolicyView& view) -> PolicyAction {
    contexts->push_back(view.context);
    switch (view.turn) {
      case 0:
        return plan_action({{1, {}, "a"}}, {{1, "steady-small", "reason",
                                             wordy + " one"}});
      case 1:
        return plan_action({{2, {}, "b"}}, {{2, "steady-small", "reason",
                                             wordy + " two"}});
      default:
        return finish_action("done");
    }
  };
  ScheduleConfig config;
  config.context_budget = 120;
  const EpisodeOutcome outcome =
      run_episode(registry, backends, policy, "tight", config);
  ASSERT_TRUE(outcome.finished);
  ASSERT_EQ(contexts->size(), 3u);
  EXPECT_EQ((*contexts)[2].find(kElisionMarker) != std::string::npos, true);
  // The newest observation stays verbatim in the rendered context.
  EXPECT_NE((*contexts)[2].find("two"), std::string::npos);
}

TEST(RunEpisode, AnonymizedLabelsResolveAndRealIdsLandInTheDoc) {
  const pool::Registry registry = tiny_registry();
  const workers::BackendMap backends =
      workers::make_scripted_backends(registry);
  auto seen_label = std::make_shared<std::string>();
  Policy policy = [seen_label](const PolicyView& view) -> PolicyAction {
    if (view.turn == 0) {
      // Pick the label that maps to a worker able to reason.
      for (const CatalogRow& row : view.catalog) {
        for (const std::string& skill : row.skills) {
          if (skill == "reason") {
            *seen_label = row.label;
            return plan_action({{1, {}, "think"}},
                               {{1, row.label, "reason", "ponder"}});
          }
        }
      }
    }
    return finish_action("done");
  };
  ScheduleConfig config;
  config.seed = 17;
  const EpisodeOutcome outcome =
      run_episode(registry, backends, policy, "labels", config);
  ASSERT_FALSE(seen_label->empty());
  EXPECT_EQ(seen_label->rfind("Worker ", 0), 0u);
  ASSERT_EQ(outcome.doc.turns.size(), 1u);
  const std::string& real = outcome.doc.turns[0].routes[0].model;
  EXPECT_NE(registry.worker(real), nullptr);
  EXPECT_EQ(outcome.view.label_for(real), *seen_label);
  EXPECT_EQ(outcome.turns[0].dispatches[0].worker_label, *seen_label);
}

TEST(RunEpisode, SameSeedReproducesEverythingByteForByte) {
  const pool::Registry registry = tiny_registry();
  const workers::BackendMap backends =
      workers::make_scripted_backends(registry);
  const auto actions = [] {
    return std::vector<PolicyAction>{
        plan_action({{1, {}, "a"}, {2, {}, "b"}},
                    {{1, "steady-small", "reason", "alpha"},
                     {2, "steady-large", "execute_python", "beta"}}),
        finish_action("final"),
    };
  };
  ScheduleConfig config;
  config.seed = 99;
  config.episode_id = "episode-repro";
  const EpisodeOutcome a = run_episode(registry, backends,
                                       scripted_policy(actions()), "repro",
                                       config);
  const EpisodeOutcome b = run_episode(registry, backends,
                                       scripted_policy(actions()), "repro",
                                       config);
  EXPECT_EQ(grammar::serialize_trajectory(a.doc),
            grammar::serialize_trajectory(b.doc));
  EXPECT_EQ(a.ledger.total_nano(), b.ledger.total_nano());
  std::ostringstream log_a;
  std::ostringstream log_b;
  write_episode_log(a, log_a);
  write_episode_log(b, log_b);
  EXPECT_EQ(log_a.str(), log_b.str());
  EXPECT_FALSE(log_a.str().empty());
}

TEST(RunEpisode, LogRowsCarryExactlyTheContractFields) {
  const pool::Registry registry = tiny_registry();
  const workers::BackendMap backends =
      workers::make_scripted_backends(registry);
  const EpisodeOutcome outcome = run_episode(
      registry, backends,
      scripted_policy({
          plan_action({{1, {}, "a"}}, {{1, "steady-small", "reason", "x"}}),
          finish_action("y"),
      }),
      "fields");
  std::ostringstream os;
  write_episode_log(outcome, os);
  std::istringstream is(os.str());
  std::string line;
  int rows = 0;
  const std::set<std::string> expected = {
      "episode_id", "turn",      "action_kind", "subtask_id", "worker_label",
      "worker_id",  "usage",     "cost_usd",    "status",     "wall_ms"};
  while (std::getline(is, line)) {
    const nlohmann::json row = nlohmann::json::parse(line);
    std::set<std::string> keys;
    for (const auto& [key, value] : row.items()) keys.insert(key);
    EXPECT_EQ(keys, expected);
    EXPECT_EQ(row.at("episode_id"), "episode-0");
    EXPECT_EQ(row.at("action_kind"), "plan");
    EXPECT_EQ(row.at("status"), "ok");
    EXPECT_EQ(row.at("wall_ms"), 50);
    EXPECT_EQ(row.at("usage").at("prompt_tokens"), 100);
    ++rows;
  }
  EXPECT_EQ(rows, 1);
}

TEST(RunEpisode, UnfinishedEpisodesCloseWithAnEmptyAnswer) {
  const pool::Registry registry = tiny_registry();
  const workers::BackendMap backends =
      workers::make_scripted_backends(registry);
  ScheduleConfig config;
  config.max_turns = 3;
  const EpisodeOutcome outcome = run_episode(
      registry, backends, scripted_policy({}), "stall", config);
  EXPECT_FALSE(outcome.finished);
  EXPECT_EQ(outcome.turns.size(), 3u);
  ASSERT_EQ(outcome.doc.final_answers.size(), 1u);
  EXPECT_TRUE(outcome.doc.final_answers[0].empty());
  EXPECT_NEAR(outcome.shaping_total(), -0.075, 1e-12);
  // Still a valid (lazy) document.
  EXPECT_EQ(grammar::classify_behaviour(outcome.doc),
            grammar::BehaviourLabel::lazy);
}

TEST(RunEpisode, WritesTrajectoryAndLogFiles) {
  const pool::Registry registry = tiny_registry();
  const workers::BackendMap backends =
      workers::make_scripted_backends(registry);
  const EpisodeOutcome outcome = run_episode(
      registry, backends,
      scripted_policy({
          plan_action({{1, {}, "a"}}, {{1, "steady-small", "reason", "x"}}),
          finish_action("y"),
      }),
      "files");
  const std::string traj_path = "episode_test.traj.xml";
  const std::string log_path = "episode_test.jsonl";
  write_trajectory(outcome, traj_path);
  write_episode_log(outcome, log_path);
  std::ifstream traj(traj_path);
  std::string text((std::istreambuf_iterator<char>(traj)),
                   std::istreambuf_iterator<char>());
  EXPECT_EQ(grammar::parse_trajectory(text), outcome.doc);
  std::ifstream log(log_path);
  std::string line;
  EXPECT_TRUE(std::getline(log, line));
  std::remove(traj_path.c_str());
  std::remove(log_path.c_str());
}

}  // namespace
