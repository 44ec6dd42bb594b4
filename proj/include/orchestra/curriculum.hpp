#pragma once

// Verifier-gated curriculum construction. Tasks are probed by a cold-start
// policy and a teacher; the probe verdicts partition the pool into an SFT
// bucket (teacher solved, trace kept), an RL bucket (nobody solved) and a
// discard pile (already solved, or polluted by infrastructure failures).
// Later phases only move mass in one direction: the fallback cascade
// promotes RL tasks into SFT when a stronger teacher cracks them, and
// augmentation appends extra verifier-passing traces to tasks already in
// SFT. Every SFT row carries its provenance: which teacher produced the
// trace and on which pass (primary, augmentation, fallback).

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "orchestra/common.hpp"
#include "orchestra/grammar.hpp"
#include "orchestra/verify.hpp"

namespace orchestra::curriculum {

inline constexpr const char* kPassPrimary = "primary";
inline constexpr const char* kPassAugmentation = "augmentation";
inline constexpr const char* kPassFallback = "fallback";

// ---------------------------------------------------------------------------
// Task records
// ---------------------------------------------------------------------------

// Closed vocabulary of capability axes a task may be tagged with.
inline const std::vector<std::string>& capability_axes() {
  static const std::vector<std::string> axes = {
      "atomic_reasoning",    "compositional_reasoning",
      "knowledge_retrieval", "multi_hop_composition",
      "tool_code_use",       "agentic_long_context",
  };
  return axes;
}

inline bool is_capability_axis(const std::string& axis) {
  const auto& axes = capability_axes();
  return std::find(axes.begin(), axes.end(), axis) != axes.end();
}

struct TaskRecord {
  std::string task_id;
  std::string query;
  verify::GoldSpec gold;
  std::string source;  // dataset tag
  std::string axis;    // one of capability_axes()
  nlohmann::json extra;  // passthrough for runner-specific fields
};

inline TaskRecord task_record_from_json(const nlohmann::json& item) {
  TaskRecord task;
  task.task_id = item.at("task_id").get<std::string>();
  task.query = item.at("query").get<std::string>();
  task.source = item.value("source", std::string{});
  task.axis = item.at("axis").get<std::string>();
  if (!is_capability_axis(task.axis)) {
    throw std::invalid_argument("unknown capability axis: " + task.axis);
  }
  nlohmann::json gold = item.at("gold");
  if (!gold.contains("task_id")) gold["task_id"] = task.task_id;
  task.gold = verify::gold_spec_from_json(gold);
  for (const auto& [key, value] : item.items()) {
    if (key != "task_id" && key != "query" && key != "source" &&
        key != "axis" && key != "gold") {
      task.extra[key] = value;
    }
  }
  return task;
}

inline nlohmann::json task_record_to_json(const TaskRecord& task) {
  nlohmann::json gold = {{"task_id", task.gold.task_id},
                         {"kind", task.gold.kind},
                         {"gold", task.gold.gold},
                         {"threshold", task.gold.threshold}};
  if (!task.gold.aux.is_null()) gold["aux"] = task.gold.aux;
  nlohmann::json item = {{"task_id", task.task_id},
                         {"query", task.query},
                         {"source", task.source},
                         {"axis", task.axis},
                         {"gold", std::move(gold)}};
  if (task.extra.is_object()) {
    for (const auto& [key, value] : task.extra.items()) item[key] = value;
  }
  return item;
}

// Accepts a JSON array file or one JSON object per line.
inline std::vector<TaskRecord> load_task_records(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  std::vector<TaskRecord> tasks;
  const std::string_view trimmed = trim_view(text);
  if (!trimmed.empty() && trimmed.front() == '[') {
    for (const auto& item : nlohmann::json::parse(trimmed)) {
      tasks.push_back(task_record_from_json(item));
    }
  } else {
    std::size_t line_no = 0;
    for (const std::string& line : split_on(text, '\n')) {
      ++line_no;
      if (trim_view(line).empty()) continue;
      try {
        tasks.push_back(task_record_from_json(nlohmann::json::parse(line)));
      } catch (const nlohmann::json::exception& err) {
        throw std::runtime_error(path + ":" + std::to_string(line_no) + ": " +
                                 err.what());
      }
    }
  }
  return tasks;
}

// ---------------------------------------------------------------------------
// Probes and the manifest
// ---------------------------------------------------------------------------

struct ProbeResult {
  std::string task_id;
  int b0 = 0;      // cold-start policy verdict, best of three attempts
  int b_star = 0;  // teacher verdict, best of three attempts
  std::optional<grammar::TrajectoryDoc> teacher_trace;
  bool infra_flag = false;  // timeouts or malformed responses poisoned it
};

struct SftRow {
  std::string task_id;
  std::string trace;  // rendered trajectory, or an opaque reference
  std::string teacher;
  std::string distillation_pass;  // primary | augmentation | fallback

  friend bool operator==(const SftRow&, const SftRow&) = default;
};

struct DiscardRow {
  std::string task_id;
  std::string reason;

  friend bool operator==(const DiscardRow&, const DiscardRow&) = default;
};

struct CurriculumManifest {
  std::vector<SftRow> sft;
  std::vector<std::string> rl;
  std::vector<DiscardRow> discarded;
  // One constraint list per prompt-repair round, newest last.
  std::vector<std::vector<std::string>> repair_rounds;

  friend bool operator==(const CurriculumManifest&,
                         const CurriculumManifest&) = default;

  [[nodiscard]] std::set<std::string> sft_tasks() const {
    std::set<std::string> ids;
    for (const SftRow& row : sft) ids.insert(row.task_id);
    return ids;
  }

  // Maps every task to its bucket; throws if any task sits in two buckets,
  // so a non-throwing return certifies the partition invariant.
  [[nodiscard]] std::map<std::string, std::string> task_buckets() const {
    std::map<std::string, std::string> buckets;
    const auto place = [&buckets](const std::string& id,
                                  const char* bucket) {
      const auto [it, fresh] = buckets.emplace(id, bucket);
      if (!fresh && it->second != bucket) {
        throw std::logic_error("task " + id + " in both " + it->second +
                               " and " + bucket);
      }
    };
    for (const SftRow& row : sft) place(row.task_id, "sft");
    for (const std::string& id : rl) place(id, "rl");
    for (const DiscardRow& row : discarded) place(row.task_id, "discarded");
    return buckets;
  }
};

inline bool is_distillation_pass(const std::string& value) {
  return value == kPassPrimary || value == kPassAugmentation ||
         value == kPassFallback;
}

inline nlohmann::json manifest_to_json(const CurriculumManifest& manifest) {
  nlohmann::json sft = nlohmann::json::array();
  for (const SftRow& row : manifest.sft) {
    sft.push_back({{"task_id", row.task_id},
                   {"trace", row.trace},
                   {"teacher", row.teacher},
                   {"distillation_pass", row.distillation_pass}});
  }
  nlohmann::json discarded = nlohmann::json::array();
  for (const DiscardRow& row : manifest.discarded) {
    discarded.push_back({{"task_id", row.task_id}, {"reason", row.reason}});
  }
  nlohmann::json out = {{"sft", std::move(sft)},
                        {"rl", manifest.rl},
                        {"discarded", std::move(discarded)}};
  if (!manifest.repair_rounds.empty()) {
    out["repair_rounds"] = manifest.repair_rounds;
  }
  return out;
}

inline CurriculumManifest manifest_from_json(const nlohmann::json& j) {
  CurriculumManifest manifest;
  for (const auto& item : j.at("sft")) {
    SftRow row;
    row.task_id = item.at("task_id").get<std::string>();
    row.trace = item.value("trace", std::string{});
    row.teacher = item.at("teacher").get<std::string>();
    row.distillation_pass = item.at("distillation_pass").get<std::string>();
    if (!is_distillation_pass(row.distillation_pass)) {
      throw std::invalid_argument("unknown distillation_pass: " +
                                  row.distillation_pass);
    }
    manifest.sft.push_back(std::move(row));
  }
  manifest.rl = j.at("rl").get<std::vector<std::string>>();
  for (const auto& item : j.at("discarded")) {
    manifest.discarded.push_back({item.at("task_id").get<std::string>(),
                                  item.value("reason", std::string{})});
  }
  if (j.contains("repair_rounds")) {
    manifest.repair_rounds =
        j.at("repair_rounds").get<std::vector<std::vector<std::string>>>();
  }
  (void)manifest.task_buckets();  // buckets must not overlap
  return manifest;
}

// ---------------------------------------------------------------------------
// Split, cascade, augmentation
// ---------------------------------------------------------------------------

// Partition by probe verdicts. Tasks the cold-start policy already solves
// teach nothing and are discarded; infrastructure-polluted probes are
// discarded without a verdict; the teacher's solves seed SFT with their
// traces; what nobody solved becomes the RL pool.
inline CurriculumManifest probe_split(const std::vector<ProbeResult>& probes,
                                      const std::string& teacher_id) {
  CurriculumManifest manifest;
  std::set<std::string> seen;
  for (const ProbeResult& probe : probes) {
    if (!seen.insert(probe.task_id).second) {
      throw std::invalid_argument("duplicate probe for task " +
                                  probe.task_id);
    }
    if ((probe.b0 != 0 && probe.b0 != 1) ||
        (probe.b_star != 0 && probe.b_star != 1)) {
      throw std::invalid_argument("probe verdicts must be 0 or 1");
    }
    if (probe.infra_flag &&
        (probe.b0 != 0 || probe.b_star != 0 || probe.teacher_trace)) {
      throw std::invalid_argument("infra-flagged probe for task " +
                                  probe.task_id + " carries verdicts");
    }
    if (probe.teacher_trace && probe.b_star != 1) {
      throw std::invalid_argument("teacher trace without teacher pass on " +
                                  probe.task_id);
    }
    if (probe.infra_flag) {
      manifest.discarded.push_back({probe.task_id, "infra"});
    } else if (probe.b0 == 1) {
      manifest.discarded.push_back({probe.task_id, "solved"});
    } else if (probe.b_star == 1) {
      manifest.sft.push_back(
          {probe.task_id,
           probe.teacher_trace
               ? grammar::render_trajectory(*probe.teacher_trace)
               : std::string{},
           teacher_id, kPassPrimary});
    } else {
      manifest.rl.push_back(probe.task_id);
    }
  }
  return manifest;
}

struct RetryResult {
  std::string task_id;
  bool success = false;
  std::string teacher;
  std::string trace;
};

// Stronger-teacher retries over the RL pool. A success promotes the task
// into SFT under the succeeding teacher; the first success per task wins
// and later rows for that task are ignored, mirroring a cascade that stops
// once a teacher cracks the task. Failures leave the task in the RL pool.
inline CurriculumManifest cascade_promote(
    CurriculumManifest manifest, const std::vector<RetryResult>& retries) {
  std::set<std::string> rl_tasks(manifest.rl.begin(), manifest.rl.end());
  for (const RetryResult& retry : retries) {
    if (rl_tasks.count(retry.task_id) == 0) {
      throw std::invalid_argument("retry for task " + retry.task_id +
                                  " which is not in the RL pool");
    }
  }
  std::set<std::string> promoted;
  for (const RetryResult& retry : retries) {
    if (!retry.success || promoted.count(retry.task_id) > 0) continue;
    promoted.insert(retry.task_id);
    manifest.sft.push_back(
        {retry.task_id, retry.trace, retry.teacher, kPassFallback});
  }
  manifest.rl.erase(
      std::remove_if(manifest.rl.begin(), manifest.rl.end(),
                     [&promoted](const std::string& id) {
                       return promoted.count(id) > 0;
                     }),
      manifest.rl.end());
  return manifest;
}

struct AugmentationRollout {
  std::string task_id;
  std::string trace;
  double temperature = 1.0;
  int verdict = 0;
};

// Extra teacher rollouts for tasks already in SFT; only verifier-passing
// ones are kept. The appended rows inherit the teacher already on file for
// the task.
inline CurriculumManifest record_augmentation(
    CurriculumManifest manifest,
    const std::vector<AugmentationRollout>& extras) {
  std::map<std::string, std::string> teacher_of;
  for (const SftRow& row : manifest.sft) {
    teacher_of.emplace(row.task_id, row.teacher);
  }
  for (const AugmentationRollout& extra : extras) {
    const auto teacher = teacher_of.find(extra.task_id);
    if (teacher == teacher_of.end()) {
      throw std::invalid_argument("augmentation for task " + extra.task_id +
                                  " which is not in SFT");
    }
    if (extra.verdict != 1) continue;
    manifest.sft.push_back(
        {extra.task_id, extra.trace, teacher->second, kPassAugmentation});
  }
  return manifest;
}

// ---------------------------------------------------------------------------
// Failure taxonomy
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& failure_taxonomy() {
  static const std::vector<std::string> categories = {
      "information_loss",
      "premature_aggregation",
      "format_mismatch",
      "delegation_scope_error",
  };
  return categories;
}

struct FailureLabel {
  std::string category;  // one of failure_taxonomy()
  std::string evidence_span;
  std::string suggested_constraint;  // at most 30 words
};

using FailureClassifier =
    std::function<FailureLabel(const std::string& trace,
                               const verify::GoldSpec& gold)>;

inline constexpr std::int64_t kMaxConstraintWords = 30;

// Runs the pluggable judgment and validates its output: the category must
// come from the closed taxonomy, the evidence must be quoted verbatim from
// the trace, and the constraint must fit the word budget.
inline FailureLabel classify_failure(const std::string& trace,
                                     const verify::GoldSpec& gold,
                                     const FailureClassifier& classifier) {
  if (!classifier) throw std::invalid_argument("no failure classifier");
  FailureLabel label = classifier(trace, gold);
  const auto& taxonomy = failure_taxonomy();
  if (std::find(taxonomy.begin(), taxonomy.end(), label.category) ==
      taxonomy.end()) {
    throw std::invalid_argument("failure category outside the taxonomy: " +
                                label.category);
  }
  if (trace.find(label.evidence_span) == std::string::npos) {
    throw std::invalid_argument("evidence span not found in the trace");
  }
  if (whitespace_tokens(label.suggested_constraint) > kMaxConstraintWords) {
    throw std::invalid_argument("suggested constraint exceeds " +
                                std::to_string(kMaxConstraintWords) +
                                " words");
  }
  return label;
}

}  // namespace orchestra::curriculum
