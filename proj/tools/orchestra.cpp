// Command-line front end: trajectory validation, batch runs, reward
// re-folds, advantage tables, curriculum splits, and scoreboard reports.
// Every number it prints comes from the same headers the tests exercise;
// this file only parses arguments and moves bytes.

#include <cstdint>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "orchestra/credit.hpp"
#include "orchestra/curriculum.hpp"
#include "orchestra/grammar.hpp"
#include "orchestra/harness.hpp"
#include "orchestra/pool.hpp"
#include "orchestra/workers_http.hpp"

namespace {

using nlohmann::json;
namespace credit = orchestra::credit;
namespace curriculum = orchestra::curriculum;
namespace grammar = orchestra::grammar;
namespace harness = orchestra::harness;
namespace pool = orchestra::pool;
namespace reward = orchestra::reward;
namespace workers = orchestra::workers;

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

json parse_file(const std::string& path) { return json::parse(slurp(path)); }

int cmd_validate(const std::string& path, const std::string& pool_path) {
  const std::string text = slurp(path);
  std::optional<grammar::RouteVocabulary> vocab;
  if (!pool_path.empty()) {
    vocab = pool::load_registry_file(pool_path).vocabulary();
  }
  grammar::ValidationReport report;
  try {
    report = grammar::validate_text(text, vocab ? &*vocab : nullptr);
  } catch (const std::exception& err) {
    std::cout << "invalid: " << err.what() << "\n";
    return 1;
  }
  if (!report.valid) {
    for (const grammar::Violation& violation : report.violations) {
      std::cout << violation.code << " at " << violation.location << ": "
                << violation.message << "\n";
    }
    return 1;
  }
  const grammar::TrajectoryDoc doc = grammar::parse_trajectory(text);
  std::cout << "valid: " << grammar::to_string(grammar::classify_behaviour(doc))
            << "\n";
  return 0;
}

void print_scoreboard(const std::vector<harness::MetricRow>& rows) {
  std::cout << std::left << std::setw(18) << "benchmark" << std::right
            << std::setw(8) << "queries" << std::setw(9) << "pass@1"
            << std::setw(9) << "pass@2" << std::setw(10) << "tok/call"
            << std::setw(12) << "USD/q" << "\n";
  for (const harness::MetricRow& row : rows) {
    std::cout << std::left << std::setw(18) << row.benchmark << std::right
              << std::setw(8) << row.queries << std::fixed
              << std::setprecision(3) << std::setw(9) << row.pass1
              << std::setw(9) << row.pass2 << std::setprecision(1)
              << std::setw(10) << row.mean_context_tokens
              << std::setprecision(6) << std::setw(12) << row.mean_cost_usd
              << "\n";
    std::cout.unsetf(std::ios::fixed);
  }
}

struct RunArgs {
  std::string tasks;
  std::string pool;
  std::string policy = "scripted";
  std::string out;
  std::string config;
  std::string pass1 = "first";
  int attempts = 1;
  std::uint64_t seed = 0;
  int parallelism = 0;
  double alpha = reward::kDefaultAlpha;
  bool alpha_given = false;
};

int cmd_run(const RunArgs& args) {
  const harness::Defaults defaults = args.config.empty()
                                         ? harness::Defaults{}
                                         : harness::load_defaults(args.config);
  const std::vector<curriculum::TaskRecord> tasks =
      curriculum::load_task_records(args.tasks);
  const pool::Registry registry = pool::load_registry_file(args.pool);
  const workers::BackendMap backends = workers::make_backends(registry);

  harness::BatchConfig config;
  config.attempts_per_task = args.attempts;
  config.seed = args.seed;
  config.alpha = args.alpha_given ? args.alpha : defaults.alpha;
  config.parallelism = args.parallelism;
  config.pass1 = harness::pass1_estimator_from_string(args.pass1);
  config.schedule.max_turns = defaults.max_turns;
  config.schedule.context_budget = defaults.context_budget;

  const harness::BatchResult result =
      harness::run_batch(tasks, harness::make_policy_factory(args.policy),
                         registry, backends, config);
  print_scoreboard(result.benchmark_rows);
  if (!args.out.empty()) {
    harness::write_artifacts(result, args.out);
    std::cout << result.artifacts.size() << " artifacts under " << args.out
              << "\n";
  }
  return 0;
}

// Replays a run's reward report under a different cost weight. Rows are
// re-normalized in file order, which is the order the batch folded them, so
// re-running with the original alpha reproduces the report byte-for-values.
int cmd_reward(const std::string& episodes_dir, double alpha) {
  std::ifstream in(episodes_dir + "/rewards.jsonl");
  if (!in) {
    throw std::runtime_error("cannot open " + episodes_dir + "/rewards.jsonl");
  }
  reward::NormalizerState normalizer;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json row = json::parse(line);
    const double cost = row.at("cost_usd").get<double>();
    const double c_hat = normalizer.normalize(cost);
    normalizer.observe(cost);
    row["c_hat"] = c_hat;
    row["reward"] = reward::terminal_reward(row.at("b").get<int>(),
                                            row.at("shaping").get<double>(),
                                            c_hat, alpha);
    std::cout << row.dump() << "\n";
  }
  return 0;
}

// Group file: {"query_id", "gamma", "rollouts": [{"rollout_id",
// "terminal_reward", "turn_shaping", "action_kinds", "branch_id"}],
// "params": {"rho_mix", "eta_mix", "branch_turn", "turn_utility",
// "anchor_keys", "anchor_values"}}; everything past the id is optional.
int cmd_advantage(const std::string& group_path, const std::string& estimator,
                  double gamma, bool gamma_given) {
  const json doc = parse_file(group_path);
  credit::RolloutGroup group;
  group.query_id = doc.value("query_id", std::string("group"));
  group.gamma = gamma_given ? gamma : doc.value("gamma", 1.0);
  for (const auto& item : doc.at("rollouts")) {
    credit::Rollout rollout;
    rollout.rollout_id = item.at("rollout_id").get<std::string>();
    rollout.terminal_reward = item.value("terminal_reward", 0.0);
    if (item.contains("turn_shaping")) {
      rollout.turn_shaping =
          item.at("turn_shaping").get<std::vector<double>>();
    }
    if (item.contains("action_kinds")) {
      rollout.action_kinds =
          item.at("action_kinds").get<std::vector<std::string>>();
    }
    rollout.branch_id = item.value("branch_id", std::string{});
    group.rollouts.push_back(std::move(rollout));
  }
  credit::VariantParams params;
  if (doc.contains("params")) {
    const json& p = doc.at("params");
    params.rho_mix = p.value("rho_mix", params.rho_mix);
    params.eta_mix = p.value("eta_mix", params.eta_mix);
    if (p.contains("branch_turn")) {
      params.branch_turn = p.at("branch_turn").get<std::map<std::string, int>>();
    }
    if (p.contains("turn_utility")) {
      params.turn_utility =
          p.at("turn_utility").get<std::map<std::string, std::vector<double>>>();
    }
    if (p.contains("anchor_keys")) {
      params.anchor_keys =
          p.at("anchor_keys")
              .get<std::map<std::string, std::vector<std::string>>>();
    }
    if (p.contains("anchor_values")) {
      params.anchor_values =
          p.at("anchor_values")
              .get<std::map<std::string, std::vector<double>>>();
    }
  }
  const credit::AdvantageTable table = credit::variant_advantages(
      group, credit::estimator_from_string(estimator), params);
  json out = {{"query_id", group.query_id},
              {"estimator", estimator},
              {"advantages", json::object()}};
  for (const auto& [id, values] : table.by_rollout) {
    out["advantages"][id] = values;
  }
  std::cout << out.dump(2) << "\n";
  return 0;
}

// Probe file: array (or {"probes": [...]}) of {"task_id", "b0", "b_star",
// "infra_flag", "teacher_trace"} with the trace as trajectory markup.
int cmd_curriculum(const std::string& probes_path, const std::string& out_path,
                   const std::string& teacher) {
  const json doc = parse_file(probes_path);
  std::vector<curriculum::ProbeResult> probes;
  for (const auto& item : doc.is_array() ? doc : doc.at("probes")) {
    curriculum::ProbeResult probe;
    probe.task_id = item.at("task_id").get<std::string>();
    probe.b0 = item.value("b0", 0);
    probe.b_star = item.value("b_star", 0);
    probe.infra_flag = item.value("infra_flag", false);
    if (item.contains("teacher_trace")) {
      probe.teacher_trace =
          grammar::parse_trajectory(item.at("teacher_trace").get<std::string>());
    }
    probes.push_back(std::move(probe));
  }
  const curriculum::CurriculumManifest manifest =
      curriculum::probe_split(probes, teacher);
  std::ofstream out(out_path);
  if (!out) throw std::runtime_error("cannot write " + out_path);
  out << curriculum::manifest_to_json(manifest).dump(2) << "\n";
  std::cout << "sft " << manifest.sft.size() << ", rl " << manifest.rl.size()
            << ", discarded " << manifest.discarded.size() << " -> "
            << out_path << "\n";
  return 0;
}

int cmd_report(const std::string& logs_dir, const std::string& grouping_path) {
  const std::vector<harness::MetricRow> rows =
      harness::metric_rows_from_json(parse_file(logs_dir + "/scoreboard.json"));
  const harness::Scoreboard board =
      harness::aggregate_domains(rows, harness::load_grouping(grouping_path));
  print_scoreboard(board.benchmarks);
  std::cout << "\n" << std::left << std::setw(18) << "domain" << std::right
            << std::setw(8) << "benches" << std::setw(9) << "pass@1"
            << std::setw(9) << "pass@2" << "\n";
  for (const harness::DomainRow& row : board.domains) {
    std::cout << std::left << std::setw(18) << row.domain << std::right
              << std::setw(8) << row.benchmarks << std::fixed
              << std::setprecision(3) << std::setw(9) << row.pass1
              << std::setw(9) << row.pass2 << "\n";
    std::cout.unsetf(std::ios::fixed);
  }
  std::cout << std::fixed << std::setprecision(3) << "macro pass@1 "
            << board.macro_pass1 << ", pass@2 " << board.macro_pass2
            << std::setprecision(1) << ", tok/call "
            << board.mean_context_tokens << std::setprecision(6) << ", USD/q "
            << board.mean_cost_usd << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"selective-delegation orchestration toolkit"};
  app.require_subcommand(1);

  std::string validate_path;
  std::string validate_pool;
  CLI::App* validate = app.add_subcommand(
      "validate", "check a trajectory file against the grammar");
  validate->add_option("path", validate_path, "trajectory file")->required();
  validate->add_option("--pool", validate_pool,
                       "pool file for closed-vocabulary route checks");

  RunArgs run_args;
  CLI::App* run = app.add_subcommand("run", "run a task batch");
  run->add_option("--tasks", run_args.tasks, "task file (JSON or JSONL)")
      ->required();
  run->add_option("--pool", run_args.pool, "worker pool file")->required();
  run->add_option("--policy", run_args.policy, "scripted or lazy");
  run->add_option("--attempts", run_args.attempts, "attempts per task");
  run->add_option("--seed", run_args.seed, "batch seed");
  run->add_option("--out", run_args.out, "artifact output directory");
  run->add_option("--config", run_args.config, "defaults file");
  run->add_option("--pass1", run_args.pass1, "pass@1 estimator: first or mean");
  run->add_option("--parallelism", run_args.parallelism,
                  "concurrent episodes (0 = hardware)");
  CLI::Option* run_alpha =
      run->add_option("--alpha", run_args.alpha, "cost weight in the reward");

  std::string reward_dir;
  double reward_alpha = orchestra::reward::kDefaultAlpha;
  CLI::App* reward_cmd = app.add_subcommand(
      "reward", "re-fold a run's reward report under a cost weight");
  reward_cmd->add_option("--episodes", reward_dir, "run artifact directory")
      ->required();
  reward_cmd->add_option("--alpha", reward_alpha, "cost weight");

  std::string group_path;
  std::string estimator = "grpo";
  double gamma = 1.0;
  CLI::App* advantage = app.add_subcommand(
      "advantage", "advantage table for one rollout group");
  advantage->add_option("--group", group_path, "rollout group file")
      ->required();
  advantage->add_option("--estimator", estimator,
                        "grpo, tree, mt, gigpo, or agentic");
  CLI::Option* gamma_opt =
      advantage->add_option("--gamma", gamma, "discount over turns");

  std::string probes_path;
  std::string manifest_path;
  std::string teacher = "teacher";
  CLI::App* curriculum_cmd = app.add_subcommand(
      "curriculum", "split probe results into sft/rl/discard pools");
  curriculum_cmd->add_option("--probes", probes_path, "probe results file")
      ->required();
  curriculum_cmd->add_option("--out", manifest_path, "manifest output path")
      ->required();
  curriculum_cmd->add_option("--teacher", teacher, "teacher id for sft rows");

  std::string logs_dir;
  std::string grouping_path;
  CLI::App* report = app.add_subcommand(
      "report", "aggregate a run's scoreboard into domain rows");
  report->add_option("--logs", logs_dir, "run artifact directory")->required();
  report->add_option("--grouping", grouping_path, "benchmark grouping file")
      ->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (validate->parsed()) return cmd_validate(validate_path, validate_pool);
    if (run->parsed()) {
      run_args.alpha_given = run_alpha->count() > 0;
      return cmd_run(run_args);
    }
    if (reward_cmd->parsed()) return cmd_reward(reward_dir, reward_alpha);
    if (advantage->parsed()) {
      return cmd_advantage(group_path, estimator, gamma,
                           gamma_opt->count() > 0);
    }
    if (curriculum_cmd->parsed()) {
      return cmd_curriculum(probes_path, manifest_path, teacher);
    }
    if (report->parsed()) return cmd_report(logs_dir, grouping_path);
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  }
  return 0;
}
