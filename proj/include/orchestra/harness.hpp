#pragma once

// Batch evaluation: run a task file through the episode runtime, verify the
// final answers, fold rewards, and aggregate pass@k with cost and context
// metrics into a scoreboard. Episodes execute in parallel but everything
// order-sensitive is folded sequentially in (task, attempt) order, so two
// runs with the same seed produce byte-identical artifacts: one JSONL call
// log and one trajectory file per episode, a reward report, and the
// per-benchmark scoreboard.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "orchestra/common.hpp"
#include "orchestra/curriculum.hpp"
#include "orchestra/grammar.hpp"
#include "orchestra/pool.hpp"
#include "orchestra/reward.hpp"
#include "orchestra/scheduler.hpp"
#include "orchestra/verify.hpp"
#include "orchestra/workers.hpp"

namespace orchestra::harness {

// ---------------------------------------------------------------------------
// Samples and pass@k
// ---------------------------------------------------------------------------

struct Attempt {
  int b = 0;
  double cost_usd = 0.0;
  std::int64_t context_tokens = 0;
};

struct RunSample {
  std::string task_id;
  std::vector<Attempt> attempts;  // independent, in attempt order
};

// Fraction of tasks solved within the first k attempts, k in {1, 2}.
inline double pass_at_k(const std::vector<RunSample>& samples, int k) {
  if (k != 1 && k != 2) throw std::invalid_argument("k must be 1 or 2");
  if (samples.empty()) return 0.0;
  std::size_t hits = 0;
  for (const RunSample& sample : samples) {
    if (sample.attempts.size() < static_cast<std::size_t>(k)) {
      throw std::invalid_argument("sample " + sample.task_id +
                                  " has fewer than " + std::to_string(k) +
                                  " attempts");
    }
    for (int i = 0; i < k; ++i) {
      if (sample.attempts[i].b == 1) {
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(samples.size());
}

// ---------------------------------------------------------------------------
// Scoreboard rows and domain aggregation
// ---------------------------------------------------------------------------

// pass@1 scores the first attempt. The alternative averages each task's
// verdicts over every attempt for a smoother per-task estimate; the
// pass@2 >= pass@1 guarantee is only a theorem under the first-attempt
// scoring, so the default stays there.
enum class Pass1Estimator { first_attempt, mean_over_attempts };

inline Pass1Estimator pass1_estimator_from_string(const std::string& name) {
  if (name == "first") return Pass1Estimator::first_attempt;
  if (name == "mean") return Pass1Estimator::mean_over_attempts;
  throw std::invalid_argument("unknown pass@1 estimator: " + name);
}

struct MetricRow {
  std::string benchmark;
  double pass1 = 0.0;
  double pass2 = 0.0;
  double mean_context_tokens = 0.0;  // per attempt
  double mean_cost_usd = 0.0;        // per attempt
  int queries = 0;
};

// Collapses one benchmark's samples into a row. A single-attempt batch has
// no retry to score, so pass@2 degenerates to pass@1 there.
inline MetricRow summarize_benchmark(
    const std::string& benchmark, const std::vector<RunSample>& samples,
    Pass1Estimator estimator = Pass1Estimator::first_attempt) {
  MetricRow row;
  row.benchmark = benchmark;
  row.queries = static_cast<int>(samples.size());
  if (estimator == Pass1Estimator::mean_over_attempts) {
    for (const RunSample& sample : samples) {
      if (sample.attempts.empty()) {
        throw std::invalid_argument("sample " + sample.task_id +
                                    " has no attempts");
      }
      double solved = 0.0;
      for (const Attempt& attempt : sample.attempts) solved += attempt.b;
      row.pass1 += solved / static_cast<double>(sample.attempts.size());
    }
    if (!samples.empty()) row.pass1 /= static_cast<double>(samples.size());
  } else {
    row.pass1 = pass_at_k(samples, 1);
  }
  const bool retryable = std::all_of(
      samples.begin(), samples.end(),
      [](const RunSample& s) { return s.attempts.size() >= 2; });
  row.pass2 = retryable && !samples.empty() ? pass_at_k(samples, 2)
                                            : row.pass1;
  std::int64_t attempts = 0;
  double tokens = 0.0;
  double cost = 0.0;
  for (const RunSample& sample : samples) {
    for (const Attempt& attempt : sample.attempts) {
      ++attempts;
      tokens += static_cast<double>(attempt.context_tokens);
      cost += attempt.cost_usd;
    }
  }
  if (attempts > 0) {
    row.mean_context_tokens = tokens / static_cast<double>(attempts);
    row.mean_cost_usd = cost / static_cast<double>(attempts);
  }
  return row;
}

struct BenchmarkGroup {
  std::string domain;
  bool excluded = false;  // listed but kept out of every mean
};

using Grouping = std::map<std::string, BenchmarkGroup>;

inline Grouping grouping_from_json(const nlohmann::json& j) {
  Grouping grouping;
  for (const auto& item : j.at("benchmarks")) {
    const std::string name = item.at("name").get<std::string>();
    BenchmarkGroup group;
    group.domain = item.at("domain").get<std::string>();
    group.excluded = item.value("excluded", false);
    if (!grouping.emplace(name, std::move(group)).second) {
      throw std::invalid_argument("benchmark " + name +
                                  " grouped more than once");
    }
  }
  return grouping;
}

inline Grouping load_grouping(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  return grouping_from_json(nlohmann::json::parse(in));
}

struct DomainRow {
  std::string domain;
  double pass1 = 0.0;
  double pass2 = 0.0;
  int benchmarks = 0;
};

struct Scoreboard {
  std::vector<MetricRow> benchmarks;  // input order, excluded rows included
  std::vector<DomainRow> domains;     // first-appearance order
  double macro_pass1 = 0.0;  // unweighted over non-excluded benchmarks
  double macro_pass2 = 0.0;
  double mean_context_tokens = 0.0;  // uniform over non-excluded benchmarks
  double mean_cost_usd = 0.0;
};

// Domain value = unweighted mean of its benchmarks; the macro and
// efficiency figures average uniformly over every non-excluded benchmark.
// Excluded benchmarks ride along as rows but enter no mean.
inline Scoreboard aggregate_domains(const std::vector<MetricRow>& rows,
                                    const Grouping& grouping) {
  Scoreboard board;
  board.benchmarks = rows;
  std::vector<std::string> domain_order;
  std::map<std::string, std::vector<const MetricRow*>> by_domain;
  int included = 0;
  for (const MetricRow& row : rows) {
    const auto group = grouping.find(row.benchmark);
    if (group == grouping.end()) {
      throw std::invalid_argument("benchmark " + row.benchmark +
                                  " missing from grouping");
    }
    if (group->second.excluded) continue;
    ++included;
    board.macro_pass1 += row.pass1;
    board.macro_pass2 += row.pass2;
    board.mean_context_tokens += row.mean_context_tokens;
    board.mean_cost_usd += row.mean_cost_usd;
    auto& bucket = by_domain[group->second.domain];
    if (bucket.empty()) domain_order.push_back(group->second.domain);
    bucket.push_back(&row);
  }
  if (included > 0) {
    board.macro_pass1 /= included;
    board.macro_pass2 /= included;
    board.mean_context_tokens /= included;
    board.mean_cost_usd /= included;
  }
  for (const std::string& domain : domain_order) {
    const auto& bucket = by_domain.at(domain);
    DomainRow row;
    row.domain = domain;
    row.benchmarks = static_cast<int>(bucket.size());
    for (const MetricRow* benchmark : bucket) {
      row.pass1 += benchmark->pass1;
      row.pass2 += benchmark->pass2;
    }
    row.pass1 /= static_cast<double>(bucket.size());
    row.pass2 /= static_cast<double>(bucket.size());
    board.domains.push_back(std::move(row));
  }
  return board;
}

inline std::vector<MetricRow> metric_rows_from_json(const nlohmann::json& j) {
  std::vector<MetricRow> rows;
  for (const auto& item : j) {
    MetricRow row;
    row.benchmark = item.at("benchmark").get<std::string>();
    row.pass1 = item.at("pass1").get<double>();
    row.pass2 = item.at("pass2").get<double>();
    row.mean_context_tokens = item.value("mean_context_tokens", 0.0);
    row.mean_cost_usd = item.value("mean_cost_usd", 0.0);
    row.queries = item.value("queries", 0);
    rows.push_back(std::move(row));
  }
  return rows;
}

inline nlohmann::json metric_rows_to_json(const std::vector<MetricRow>& rows) {
  nlohmann::json out = nlohmann::json::array();
  for (const MetricRow& row : rows) {
    out.push_back({{"benchmark", row.benchmark},
                   {"pass1", row.pass1},
                   {"pass2", row.pass2},
                   {"mean_context_tokens", row.mean_context_tokens},
                   {"mean_cost_usd", row.mean_cost_usd},
                   {"queries", row.queries}});
  }
  return out;
}

inline nlohmann::json scoreboard_to_json(const Scoreboard& board) {
  nlohmann::json domains = nlohmann::json::array();
  for (const DomainRow& row : board.domains) {
    domains.push_back({{"domain", row.domain},
                       {"pass1", row.pass1},
                       {"pass2", row.pass2},
                       {"benchmarks", row.benchmarks}});
  }
  return {{"benchmarks", metric_rows_to_json(board.benchmarks)},
          {"domains", std::move(domains)},
          {"macro_pass1", board.macro_pass1},
          {"macro_pass2", board.macro_pass2},
          {"mean_context_tokens", board.mean_context_tokens},
          {"mean_cost_usd", board.mean_cost_usd}};
}

// ---------------------------------------------------------------------------
// Rule-based task policies
// ---------------------------------------------------------------------------

// Replaces every "$obs:<id>" with that subtask's observation text.
inline std::string substitute_observations(
    const std::string& text, const std::map<int, std::string>& observations) {
  std::string out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const std::size_t hit = text.find("$obs:", pos);
    if (hit == std::string::npos) {
      out.append(text, pos, std::string::npos);
      break;
    }
    out.append(text, pos, hit - pos);
    std::size_t digits = hit + 5;
    std::size_t end = digits;
    while (end < text.size() && std::isdigit(
               static_cast<unsigned char>(text[end]))) {
      ++end;
    }
    if (end == digits) {
      out += "$obs:";
    } else {
      const int id = std::stoi(text.substr(digits, end - digits));
      const auto obs = observations.find(id);
      if (obs != observations.end()) out += obs->second;
    }
    pos = end;
  }
  return out;
}

using PolicyFactory = std::function<scheduler::Policy(
    const curriculum::TaskRecord& task, int attempt)>;

namespace detail {

// Script block carried in a task's extra fields:
//   "script": {
//     "subtasks": [{"id": 1, "depends_on": [], "description": "...",
//                   "worker": "...", "skill": "...", "payload": "..."}],
//     "answers": ["first attempt answer", "second attempt answer"]
//   }
// Answers may reference observations as "$obs:<id>"; the list is indexed by
// attempt and clamps to its last entry.
inline std::string scripted_answer(const nlohmann::json& script,
                                   int attempt) {
  if (!script.contains("answers") || script.at("answers").empty()) {
    return "unknown";
  }
  const auto& answers = script.at("answers");
  const std::size_t index =
      std::min(static_cast<std::size_t>(attempt), answers.size() - 1);
  return answers.at(index).get<std::string>();
}

inline scheduler::PolicyAction scripted_finish(const nlohmann::json& script,
                                               int attempt,
                                               const scheduler::PolicyView&
                                                   view) {
  scheduler::PolicyAction action;
  action.kind = scheduler::PolicyAction::Kind::finish;
  action.final_answer = substitute_observations(
      scripted_answer(script, attempt), view.observations);
  if (trim_view(action.final_answer).empty()) {
    // A failed dispatch can leave the template empty; answer something so
    // the episode finishes and scores b=0 instead of stalling.
    action.final_answer = "no answer";
  }
  return action;
}

}  // namespace detail

// "scripted" follows each task's script block: declare its subtasks with
// their routes on the first turn, then finish with the attempt's answer
// template. "lazy" skips decomposition and answers immediately.
inline PolicyFactory make_policy_factory(const std::string& name) {
  if (name == "scripted") {
    return [](const curriculum::TaskRecord& task, int attempt) {
      const nlohmann::json script = task.extra.is_object()
                                        ? task.extra.value(
                                              "script",
                                              nlohmann::json::object())
                                        : nlohmann::json::object();
      return scheduler::Policy(
          [script, attempt](const scheduler::PolicyView& view) {
            const bool has_subtasks = script.contains("subtasks") &&
                                      !script.at("subtasks").empty();
            if (view.turn > 0 || !has_subtasks) {
              return detail::scripted_finish(script, attempt, view);
            }
            scheduler::PolicyAction action;
            action.kind = scheduler::PolicyAction::Kind::plan;
            for (const auto& item : script.at("subtasks")) {
              scheduler::PlannedSubtask subtask;
              subtask.id = item.at("id").get<int>();
              if (item.contains("depends_on")) {
                for (const auto& dep : item.at("depends_on")) {
                  subtask.depends_on.insert(dep.get<int>());
                }
              }
              subtask.description = item.value("description", std::string{});
              action.subtasks.push_back(std::move(subtask));
              action.routes.push_back(
                  {item.at("id").get<int>(),
                   item.at("worker").get<std::string>(),
                   item.at("skill").get<std::string>(),
                   item.value("payload", std::string{})});
            }
            return action;
          });
    };
  }
  if (name == "lazy") {
    return [](const curriculum::TaskRecord& task, int attempt) {
      const nlohmann::json script = task.extra.is_object()
                                        ? task.extra.value(
                                              "script",
                                              nlohmann::json::object())
                                        : nlohmann::json::object();
      return scheduler::Policy(
          [script, attempt](const scheduler::PolicyView& view) {
            return detail::scripted_finish(script, attempt, view);
          });
    };
  }
  throw std::invalid_argument("unknown policy: " + name);
}

// ---------------------------------------------------------------------------
// Batch runner
// ---------------------------------------------------------------------------

struct BatchConfig {
  int attempts_per_task = 1;
  std::uint64_t seed = 0;
  double alpha = reward::kDefaultAlpha;
  int parallelism = 0;  // 0 picks the hardware concurrency
  Pass1Estimator pass1 = Pass1Estimator::first_attempt;
  scheduler::ScheduleConfig schedule;  // seed and episode_id set per episode
};

struct EpisodeReward {
  std::string task_id;
  int attempt = 0;
  int b = 0;
  double shaping = 0.0;
  double cost_usd = 0.0;
  double c_hat = 0.0;
  double reward = 0.0;
};

struct BatchResult {
  std::vector<RunSample> samples;        // input task order
  std::vector<MetricRow> benchmark_rows;  // grouped by task source tag
  std::vector<EpisodeReward> rewards;    // (task, attempt) order
  // Relative path -> bytes: one call log and one trajectory per episode,
  // rewards.jsonl, scoreboard.json.
  std::map<std::string, std::string> artifacts;
};

// Runs attempts_per_task independent episodes per task. Episodes execute
// concurrently; verification and the cost-normalizer reward fold walk the
// results sequentially in (task, attempt) order, each episode normalized
// against the costs folded before it. Per-task failures score b=0 and the
// batch always completes.
inline BatchResult run_batch(const std::vector<curriculum::TaskRecord>& tasks,
                             const PolicyFactory& factory,
                             const pool::Registry& registry,
                             const workers::BackendMap& backends,
                             const BatchConfig& config = {}) {
  if (config.attempts_per_task < 1) {
    throw std::invalid_argument("attempts_per_task must be at least 1");
  }
  if (!factory) throw std::invalid_argument("no policy factory");
  {
    std::set<std::string> ids;
    for (const curriculum::TaskRecord& task : tasks) {
      if (!ids.insert(task.task_id).second) {
        throw std::invalid_argument("duplicate task " + task.task_id);
      }
    }
  }

  const int attempts = config.attempts_per_task;
  const std::size_t jobs = tasks.size() * static_cast<std::size_t>(attempts);
  std::vector<scheduler::EpisodeOutcome> outcomes(jobs);

  const auto run_job = [&](std::size_t job) {
    const std::size_t task_index = job / attempts;
    const int attempt = static_cast<int>(job % attempts);
    const curriculum::TaskRecord& task = tasks[task_index];
    scheduler::ScheduleConfig schedule = config.schedule;
    schedule.seed = mix_seed(mix_seed(config.seed, task.task_id),
                             static_cast<std::uint64_t>(attempt));
    schedule.episode_id = task.task_id + ".a" + std::to_string(attempt);
    outcomes[job] = scheduler::run_episode(registry, backends,
                                           factory(task, attempt),
                                           task.query, schedule);
  };

  std::size_t width = config.parallelism > 0
                          ? static_cast<std::size_t>(config.parallelism)
                          : std::max<std::size_t>(
                                1, std::thread::hardware_concurrency());
  for (std::size_t base = 0; base < jobs; base += width) {
    const std::size_t stop = std::min(jobs, base + width);
    std::vector<std::future<void>> inflight;
    for (std::size_t job = base; job < stop; ++job) {
      inflight.push_back(
          std::async(std::launch::async, [&run_job, job] { run_job(job); }));
    }
    for (auto& future : inflight) future.get();
  }

  BatchResult result;
  reward::NormalizerState normalizer;
  const grammar::RouteVocabulary vocab = registry.vocabulary();
  for (std::size_t task_index = 0; task_index < tasks.size(); ++task_index) {
    const curriculum::TaskRecord& task = tasks[task_index];
    RunSample sample;
    sample.task_id = task.task_id;
    for (int attempt = 0; attempt < attempts; ++attempt) {
      const scheduler::EpisodeOutcome& outcome =
          outcomes[task_index * attempts + attempt];

      Attempt row;
      try {
        row.b = verify::verify_answer(task.gold, outcome.final_answer).b;
      } catch (const std::exception&) {
        row.b = 0;
      }
      row.cost_usd = outcome.ledger.total_usd();
      for (const scheduler::TurnRecord& turn : outcome.turns) {
        for (const scheduler::DispatchRecord& d : turn.dispatches) {
          row.context_tokens += d.context_tokens;
        }
      }

      EpisodeReward fold;
      fold.task_id = task.task_id;
      fold.attempt = attempt;
      fold.b = row.b;
      fold.shaping = reward::shaping_score(outcome.doc, &vocab);
      fold.cost_usd = row.cost_usd;
      fold.c_hat = normalizer.normalize(row.cost_usd);
      fold.reward = reward::terminal_reward(fold.b, fold.shaping, fold.c_hat,
                                            config.alpha);
      normalizer.observe(row.cost_usd);
      result.rewards.push_back(fold);

      std::ostringstream log;
      scheduler::write_episode_log(outcome, log);
      result.artifacts["episodes/" + outcome.episode_id + ".jsonl"] =
          log.str();
      result.artifacts["trajectories/" + outcome.episode_id + ".xml"] =
          grammar::serialize_trajectory(outcome.doc);

      sample.attempts.push_back(row);
    }
    result.samples.push_back(std::move(sample));
  }

  std::vector<std::string> benchmark_order;
  std::map<std::string, std::vector<RunSample>> by_benchmark;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    auto& bucket = by_benchmark[tasks[i].source];
    if (bucket.empty()) benchmark_order.push_back(tasks[i].source);
    bucket.push_back(result.samples[i]);
  }
  for (const std::string& benchmark : benchmark_order) {
    result.benchmark_rows.push_back(summarize_benchmark(
        benchmark, by_benchmark.at(benchmark), config.pass1));
  }

  std::string rewards_jsonl;
  for (const EpisodeReward& fold : result.rewards) {
    const nlohmann::json row = {
        {"task_id", fold.task_id}, {"attempt", fold.attempt},
        {"b", fold.b},             {"shaping", fold.shaping},
        {"cost_usd", fold.cost_usd}, {"c_hat", fold.c_hat},
        {"reward", fold.reward}};
    rewards_jsonl += row.dump() + "\n";
  }
  result.artifacts["rewards.jsonl"] = std::move(rewards_jsonl);
  result.artifacts["scoreboard.json"] =
      metric_rows_to_json(result.benchmark_rows).dump(2) + "\n";
  return result;
}

inline void write_artifacts(const BatchResult& result,
                            const std::string& out_dir) {
  namespace fs = std::filesystem;
  for (const auto& [relative, bytes] : result.artifacts) {
    const fs::path path = fs::path(out_dir) / relative;
    fs::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << bytes;
  }
}

// ---------------------------------------------------------------------------
// Shared defaults
// ---------------------------------------------------------------------------

// Compiled-in configuration, overridable from a single JSON file so every
// entry point reads the same knobs.
struct Defaults {
  double alpha = reward::kDefaultAlpha;
  double kl_beta = 1e-3;
  double clip_eps = 0.2;
  double gamma = 1.0;
  double turn_eta = reward::kDefaultTurnEta;
  int group_size = 8;
  int max_turns = 8;
  std::int64_t context_budget = 4096;
  int normalizer_window = reward::NormalizerState::kWindow;
};

inline Defaults defaults_from_json(const nlohmann::json& j) {
  Defaults d;
  d.alpha = j.value("alpha", d.alpha);
  d.kl_beta = j.value("kl_beta", d.kl_beta);
  d.clip_eps = j.value("clip_eps", d.clip_eps);
  d.gamma = j.value("gamma", d.gamma);
  d.turn_eta = j.value("turn_eta", d.turn_eta);
  d.group_size = j.value("group_size", d.group_size);
  d.max_turns = j.value("max_turns", d.max_turns);
  d.context_budget = j.value("context_budget", d.context_budget);
  d.normalizer_window = j.value("normalizer_window", d.normalizer_window);
  return d;
}

inline Defaults load_defaults(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  return defaults_from_json(nlohmann::json::parse(in));
}

}  // namespace orchestra::harness
