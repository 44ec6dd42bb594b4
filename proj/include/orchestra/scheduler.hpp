#pragma once

// Episode runtime. One episode is a loop of policy turns: the policy sees
// the query plus the rendered trajectory so far (truncated to a context
// budget) and an anonymized worker catalogue, and answers with one action
// per turn: declare a plan, route subtasks, or finish. The runtime owns
// everything else:
//
//   - dependency tracking and the ready frontier; routes whose dependencies
//     are unresolved stay queued across turns until they can run;
//   - parallel dispatch: within a turn the frontier is dispatched wave by
//     wave to a fixpoint, so an entire dependency chain declared in one
//     turn executes in that turn;
//   - observation splicing in ascending subtask order and verify synthesis
//     from dispatch statuses (the policy has no verify channel; a failed
//     dispatch yields a replanning verify);
//   - billing every call into the episode cost ledger.
//
// Invalid actions (unknown worker, inadmissible pair, undeclared subtask,
// empty action) consume the turn and earn negative turn shaping but leave
// no trace in the trajectory document, which therefore always validates.
// Trajectory documents record real worker ids; anonymized labels exist only
// in the policy-facing catalogue and in the episode log rows.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <functional>
#include <future>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "orchestra/common.hpp"
#include "orchestra/grammar.hpp"
#include "orchestra/pool.hpp"
#include "orchestra/reward.hpp"
#include "orchestra/workers.hpp"

namespace orchestra::scheduler {

// ---------------------------------------------------------------------------
// Policy interface
// ---------------------------------------------------------------------------

struct PlannedSubtask {
  int id = 0;
  std::set<int> depends_on;
  std::string description;
};

struct RouteChoice {
  int subtask_id = 0;
  std::string worker;  // anonymized label ("Worker 3") or real worker id
  std::string skill;
  std::string payload;
};

struct PolicyAction {
  enum class Kind { plan, route, finish, noop };
  Kind kind = Kind::noop;
  std::vector<PlannedSubtask> subtasks;  // plan only
  std::vector<RouteChoice> routes;       // plan may carry same-turn routes
  std::string final_answer;              // finish only
};

inline const char* to_string(PolicyAction::Kind kind) {
  switch (kind) {
    case PolicyAction::Kind::plan: return "plan";
    case PolicyAction::Kind::route: return "route";
    case PolicyAction::Kind::finish: return "finish";
    case PolicyAction::Kind::noop: return "noop";
  }
  return "?";
}

struct CatalogRow {
  std::string label;
  std::vector<std::string> skills;
};

struct PolicyView {
  std::string query;
  std::string context;  // rendered trajectory, elided down to the budget
  int turn = 0;
  std::vector<CatalogRow> catalog;  // anonymized, in label order
  std::set<int> pending;            // declared and not yet resolved
  std::set<int> resolved;
  std::map<int, std::string> observations;  // resolved subtask texts
  bool last_verify_replan = false;
};

using Policy = std::function<PolicyAction(const PolicyView&)>;

// ---------------------------------------------------------------------------
// Frontier
// ---------------------------------------------------------------------------

// Subtasks whose dependencies are all resolved and that are not themselves
// resolved yet.
inline std::set<int> ready_set(const std::map<int, std::set<int>>& deps,
                               const std::set<int>& resolved) {
  std::set<int> ready;
  for (const auto& [id, needs] : deps) {
    if (resolved.count(id) > 0) continue;
    const bool ok = std::all_of(needs.begin(), needs.end(), [&](int d) {
      return resolved.count(d) > 0;
    });
    if (ok) ready.insert(id);
  }
  return ready;
}

// ---------------------------------------------------------------------------
// Context truncation
// ---------------------------------------------------------------------------

inline constexpr const char* kElisionMarker = "[elided]";

// Drops observation bodies, oldest first, until the rendered document fits
// the whitespace-token budget. The query, every plan, every route header,
// and the most recent turn survive unconditionally; if that still exceeds
// the budget the document is returned as small as it gets.
inline grammar::TrajectoryDoc truncate_context(grammar::TrajectoryDoc doc,
                                               std::int64_t budget) {
  if (budget <= 0) throw std::invalid_argument("context budget not positive");
  if (whitespace_tokens(grammar::render_trajectory(doc)) <= budget) {
    return doc;
  }
  if (doc.turns.size() < 2) return doc;
  for (std::size_t i = 0; i + 1 < doc.turns.size(); ++i) {
    for (auto& obs : doc.turns[i].observations) {
      if (obs.text == kElisionMarker) continue;
      obs.text = kElisionMarker;
      if (whitespace_tokens(grammar::render_trajectory(doc)) <= budget) {
        return doc;
      }
    }
  }
  return doc;
}

// ---------------------------------------------------------------------------
// Episode records
// ---------------------------------------------------------------------------

struct ScheduleConfig {
  int max_turns = 8;
  std::int64_t context_budget = 4096;  // whitespace tokens
  double route_timeout_s = 60.0;
  workers::DispatchOptions dispatch;
  std::uint64_t seed = 0;
  std::string episode_id = "episode-0";
};

struct DispatchRecord {
  int turn = 0;
  int subtask_id = 0;
  std::string worker_label;
  std::string worker_id;
  std::string primitive_id;
  std::int64_t context_tokens = 0;  // instruction + spliced observations
  workers::WorkerResponse response;
  std::int64_t cost_nano = 0;
};

struct TurnRecord {
  int turn = 0;   // episode turn index, counts invalid turns too
  int round = 0;  // document round; 0 when the turn left no block
  PolicyAction::Kind kind = PolicyAction::Kind::noop;
  bool valid = false;
  bool verify_replan = false;
  double shaping = 0.0;
  std::string note;  // reason when the action was rejected
  std::vector<DispatchRecord> dispatches;
};

struct EpisodeOutcome {
  std::string episode_id;
  grammar::TrajectoryDoc doc;
  std::string final_answer;
  bool finished = false;
  reward::CostLedger ledger;
  std::vector<TurnRecord> turns;
  pool::AnonymizedView view;

  [[nodiscard]] double shaping_total() const {
    double s = 0.0;
    for (const TurnRecord& t : turns) s += t.shaping;
    return s;
  }
};

// ---------------------------------------------------------------------------
// Episode loop
// ---------------------------------------------------------------------------

namespace detail {

struct ResolvedRoute {
  RouteChoice choice;
  std::string worker_id;  // resolved real id
  std::string worker_label;
};

// Validation happens before any side effect, so a rejected action leaves
// the episode state untouched.
struct ActionCheck {
  bool ok = true;
  std::string note;
  std::vector<ResolvedRoute> routes;
};

inline ActionCheck check_action(const PolicyAction& action,
                                const pool::Registry& registry,
                                const pool::AnonymizedView& view,
                                const std::map<int, std::set<int>>& deps,
                                const std::set<int>& resolved,
                                const std::set<int>& queued) {
  ActionCheck out;
  const auto reject = [&out](std::string why) {
    out.ok = false;
    out.note = std::move(why);
  };

  std::set<int> declared;
  for (const auto& [id, needs] : deps) declared.insert(id);

  if (action.kind == PolicyAction::Kind::noop) {
    reject("empty action");
    return out;
  }
  if (action.kind == PolicyAction::Kind::finish) {
    if (trim_view(action.final_answer).empty()) reject("empty final answer");
    return out;
  }
  // The transcript grammar groups a bare route with the turn that declared
  // its subtask, so a route action covers exactly one previously declared
  // subtask and a plan's same-turn routes stay within the plan's own ids;
  // anything else would re-parse into a different turn structure.
  if (action.kind == PolicyAction::Kind::route && action.routes.size() != 1) {
    reject("route actions carry exactly one route");
    return out;
  }

  std::set<int> plan_ids;
  if (action.kind == PolicyAction::Kind::plan) {
    if (action.subtasks.empty()) {
      reject("plan without subtasks");
      return out;
    }
    int last_id = 0;
    for (const PlannedSubtask& sub : action.subtasks) {
      if (sub.id <= last_id) {
        reject("plan ids must be new and strictly ascending");
        return out;
      }
      if (declared.count(sub.id) > 0) {
        reject("subtask " + std::to_string(sub.id) + " already declared");
        return out;
      }
      for (int dep : sub.depends_on) {
        const bool known =
            declared.count(dep) > 0 ||
            std::any_of(action.subtasks.begin(), action.subtasks.end(),
                        [&](const PlannedSubtask& s) { return s.id == dep; });
        if (!known || dep >= sub.id) {
          reject("subtask " + std::to_string(sub.id) +
                 " has a bad dependency " + std::to_string(dep));
          return out;
        }
      }
      last_id = sub.id;
    }
    for (const PlannedSubtask& sub : action.subtasks) {
      declared.insert(sub.id);
      plan_ids.insert(sub.id);
    }
  }

  for (const RouteChoice& route : action.routes) {
    if (declared.count(route.subtask_id) == 0) {
      reject("route for undeclared subtask " +
             std::to_string(route.subtask_id));
      return out;
    }
    if (action.kind == PolicyAction::Kind::plan &&
        plan_ids.count(route.subtask_id) == 0) {
      reject("plan routes must target the plan's own subtasks");
      return out;
    }
    if (resolved.count(route.subtask_id) > 0) {
      reject("subtask " + std::to_string(route.subtask_id) +
             " already resolved");
      return out;
    }
    if (queued.count(route.subtask_id) > 0 ||
        std::count_if(out.routes.begin(), out.routes.end(),
                      [&](const ResolvedRoute& r) {
                        return r.choice.subtask_id == route.subtask_id;
                      }) > 0) {
      reject("subtask " + std::to_string(route.subtask_id) +
             " already has a queued route");
      return out;
    }
    const std::string* id = view.resolve(route.worker);
    const std::string worker_id =
        id != nullptr ? *id
        : registry.worker(route.worker) != nullptr ? route.worker
                                                   : std::string{};
    if (worker_id.empty()) {
      reject("unknown worker " + route.worker);
      return out;
    }
    if (!registry.admissible(worker_id, route.skill)) {
      reject("pair (" + worker_id + ", " + route.skill +
             ") is not admissible");
      return out;
    }
    out.routes.push_back({route, worker_id, view.label_for(worker_id)});
  }
  return out;
}

}  // namespace detail

inline EpisodeOutcome run_episode(const pool::Registry& registry,
                                  const workers::BackendMap& backends,
                                  const Policy& policy,
                                  const std::string& query,
                                  const ScheduleConfig& config = {}) {
  if (config.max_turns <= 0) {
    throw std::invalid_argument("max_turns not positive");
  }
  EpisodeOutcome outcome;
  outcome.episode_id = config.episode_id;
  outcome.doc.query = query;
  outcome.view = pool::anonymize_pool(registry, config.seed);

  std::vector<CatalogRow> catalog;
  for (const std::string& label : outcome.view.labels) {
    const pool::WorkerSpec* spec =
        registry.worker(*outcome.view.resolve(label));
    catalog.push_back({label, spec->skills});
  }

  std::map<int, std::set<int>> deps;         // declared subtasks
  std::map<int, std::string> observations;   // resolved subtask -> obs text
  std::set<int> resolved;
  std::vector<detail::ResolvedRoute> queue;  // accepted, not yet dispatched
  std::set<int> queued_ids;
  int last_round = 0;
  bool open_block = false;  // trailing doc turn has no verify yet
  bool last_verify_replan = false;
  const std::uint64_t episode_seed =
      mix_seed(config.seed, config.episode_id);

  for (int turn = 0; turn < config.max_turns; ++turn) {
    PolicyView view;
    view.query = query;
    view.context = grammar::render_trajectory(
        truncate_context(outcome.doc, config.context_budget));
    view.turn = turn;
    view.catalog = catalog;
    view.resolved = resolved;
    for (const auto& [id, needs] : deps) {
      if (resolved.count(id) == 0) view.pending.insert(id);
    }
    view.observations = observations;
    view.last_verify_replan = last_verify_replan;

    const PolicyAction action = policy(view);
    TurnRecord record;
    record.turn = turn;
    record.kind = action.kind;

    detail::ActionCheck check = detail::check_action(
        action, registry, outcome.view, deps, resolved, queued_ids);
    if (!check.ok) {
      record.valid = false;
      record.note = std::move(check.note);
      record.shaping = reward::turn_shaping({false, false});
      outcome.turns.push_back(std::move(record));
      continue;
    }
    record.valid = true;

    if (action.kind == PolicyAction::Kind::finish) {
      outcome.doc.final_answers.push_back(action.final_answer);
      outcome.final_answer = action.final_answer;
      outcome.finished = true;
      record.shaping = reward::turn_shaping({true, false});
      outcome.turns.push_back(std::move(record));
      break;
    }

    // The document grows exactly the way a re-parse would segment it: a
    // plan always opens a new round, a bare route joins the still-open
    // round that declared its subtask and opens an implicit round
    // otherwise, and a round stays open until a verify lands in it.
    const bool explicit_plan = action.kind == PolicyAction::Kind::plan;
    const bool joins_open =
        !explicit_plan && open_block && !outcome.doc.turns.empty() &&
        outcome.doc.turns.back().declared_ids().count(
            check.routes.front().choice.subtask_id) > 0;
    if (!joins_open) {
      grammar::TurnBlock fresh;
      fresh.round = explicit_plan ? turn + 1 : last_round + 1;
      if (explicit_plan) {
        grammar::PlanBlock plan;
        plan.round = fresh.round;
        for (const PlannedSubtask& sub : action.subtasks) {
          plan.subtasks.push_back({sub.id, sub.depends_on, sub.description});
        }
        fresh.plan = std::move(plan);
      }
      last_round = fresh.round;
      outcome.doc.turns.push_back(std::move(fresh));
      open_block = true;
    }
    grammar::TurnBlock& block = outcome.doc.turns.back();
    record.round = block.round;
    if (explicit_plan) {
      for (const PlannedSubtask& sub : action.subtasks) {
        deps[sub.id] = sub.depends_on;
      }
    }
    for (const detail::ResolvedRoute& r : check.routes) {
      block.routes.push_back({r.choice.subtask_id, r.worker_id,
                              r.choice.skill, r.choice.payload});
      queue.push_back(r);
      queued_ids.insert(r.choice.subtask_id);
    }

    // Dispatch waves until the frontier empties: each wave runs in
    // parallel, then its resolutions may ready queued dependants.
    while (true) {
      const std::set<int> ready = ready_set(deps, resolved);
      std::vector<detail::ResolvedRoute> wave;
      for (auto it = queue.begin(); it != queue.end();) {
        if (ready.count(it->choice.subtask_id) > 0) {
          wave.push_back(*it);
          it = queue.erase(it);
        } else {
          ++it;
        }
      }
      if (wave.empty()) break;
      std::sort(wave.begin(), wave.end(),
                [](const auto& a, const auto& b) {
                  return a.choice.subtask_id < b.choice.subtask_id;
                });

      std::vector<std::future<workers::WorkerResponse>> futures;
      std::vector<std::int64_t> wave_context_tokens;
      for (const detail::ResolvedRoute& r : wave) {
        workers::WorkerRequest request;
        request.worker_id = r.worker_id;
        request.primitive_id = r.choice.skill;
        request.instruction = r.choice.payload;
        for (int dep : deps.at(r.choice.subtask_id)) {
          const auto obs = observations.find(dep);
          if (obs != observations.end()) {
            request.context += "obs " + std::to_string(dep) + ": " +
                               obs->second + "\n";
          }
        }
        request.subtask_id = r.choice.subtask_id;
        request.attempt_seed =
            mix_seed(mix_seed(episode_seed, static_cast<std::uint64_t>(turn)),
                     static_cast<std::uint64_t>(r.choice.subtask_id));
        request.timeout_s = config.route_timeout_s;
        wave_context_tokens.push_back(whitespace_tokens(request.instruction) +
                                      whitespace_tokens(request.context));
        workers::WorkerBackend* backend = backends.at(r.worker_id).get();
        const workers::DispatchOptions dispatch = config.dispatch;
        futures.push_back(std::async(
            std::launch::async, [backend, request, dispatch] {
              return workers::dispatch_call(*backend, request, dispatch);
            }));
      }
      for (std::size_t i = 0; i < wave.size(); ++i) {
        const detail::ResolvedRoute& r = wave[i];
        workers::WorkerResponse response = futures[i].get();
        queued_ids.erase(r.choice.subtask_id);
        const pool::WorkerSpec* spec = registry.worker(r.worker_id);
        DispatchRecord dispatch;
        dispatch.turn = turn;
        dispatch.subtask_id = r.choice.subtask_id;
        dispatch.worker_label = r.worker_label;
        dispatch.worker_id = r.worker_id;
        dispatch.primitive_id = r.choice.skill;
        dispatch.context_tokens = wave_context_tokens[i];
        dispatch.cost_nano = pool::pair_cost_nano(spec->price, response.usage);
        outcome.ledger.record(turn, r.choice.subtask_id, r.worker_id,
                              r.choice.skill, response.usage, spec->price);
        if (response.status == workers::CallStatus::ok) {
          resolved.insert(r.choice.subtask_id);
          observations[r.choice.subtask_id] = response.observation;
          block.observations.push_back(
              {r.choice.subtask_id, response.observation});
        }
        dispatch.response = std::move(response);
        record.dispatches.push_back(std::move(dispatch));
      }
    }

    std::sort(block.observations.begin(), block.observations.end(),
              [](const grammar::ObsBlock& a, const grammar::ObsBlock& b) {
                return a.subtask_id < b.subtask_id;
              });

    // Verify is synthesized from what actually happened this turn; the
    // policy never writes one directly.
    const bool repaired = last_verify_replan && explicit_plan;
    if (!record.dispatches.empty()) {
      grammar::VerifyBlock verify;
      std::string failures;
      for (const DispatchRecord& d : record.dispatches) {
        if (d.response.status != workers::CallStatus::ok) {
          if (!failures.empty()) failures += "; ";
          failures += "subtask " + std::to_string(d.subtask_id) + " " +
                      workers::to_string(d.response.status);
        }
      }
      verify.replan = !failures.empty();
      verify.text = failures.empty() ? "pass" : "retry: " + failures;
      record.verify_replan = verify.replan;
      last_verify_replan = verify.replan;
      block.verify = std::move(verify);
      open_block = false;
    } else if (explicit_plan && repaired) {
      last_verify_replan = false;  // the repair plan answers the replan
    }

    record.shaping = reward::turn_shaping({true, repaired});
    outcome.turns.push_back(std::move(record));
  }

  if (!outcome.finished) {
    outcome.doc.final_answers.emplace_back();
  }
  return outcome;
}

// ---------------------------------------------------------------------------
// Episode artifacts
// ---------------------------------------------------------------------------

// One JSONL row per dispatched call. The field set is the logging contract;
// wall_ms is the backend-reported latency, so scripted runs are
// reproducible byte for byte.
inline void write_episode_log(const EpisodeOutcome& outcome,
                              std::ostream& os) {
  for (const TurnRecord& turn : outcome.turns) {
    for (const DispatchRecord& d : turn.dispatches) {
      const nlohmann::json row = {
          {"episode_id", outcome.episode_id},
          {"turn", d.turn},
          {"action_kind", to_string(turn.kind)},
          {"subtask_id", d.subtask_id},
          {"worker_label", d.worker_label},
          {"worker_id", d.worker_id},
          {"usage",
           {{"prompt_tokens", d.response.usage.prompt_tokens},
            {"completion_tokens", d.response.usage.completion_tokens}}},
          {"cost_usd", pool::nano_to_usd(d.cost_nano)},
          {"status", workers::to_string(d.response.status)},
          {"wall_ms",
           static_cast<std::int64_t>(d.response.latency_s * 1e3 + 0.5)},
      };
      os << row.dump() << "\n";
    }
  }
}

inline void write_episode_log(const EpisodeOutcome& outcome,
                              const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  write_episode_log(outcome, os);
}

inline void write_trajectory(const EpisodeOutcome& outcome,
                             const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << grammar::serialize_trajectory(outcome.doc);
}

}  // namespace orchestra::scheduler
