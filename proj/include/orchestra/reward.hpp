#pragma once

// Reward assembly for finished episodes.
//
// Money is integer nano-USD end to end; doubles appear only at the reward
// boundary, where the normalizer maps a cost onto [0, 1] against a rolling
// window of recent episode costs. The terminal reward gates on correctness:
// a correct episode scores in [0.9, 1.0] (cheaper is higher), an incorrect
// one can earn at most the 0.10 format bonus, so no amount of cost saving
// or tidy formatting outruns being right.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "orchestra/common.hpp"
#include "orchestra/grammar.hpp"
#include "orchestra/pool.hpp"

namespace orchestra::reward {

// ---------------------------------------------------------------------------
// Cost ledger
// ---------------------------------------------------------------------------

struct CostEntry {
  int turn = 0;
  int subtask_id = -1;  // -1 for costs not tied to a subtask
  std::string worker_id;
  std::string primitive_id;
  UsageRecord usage;
  std::int64_t cost_nano = 0;

  bool operator==(const CostEntry&) const = default;
};

// Append-only record of every billed call in one episode. Totals are exact
// integer sums; the USD view is derived, never stored.
class CostLedger {
 public:
  void add(CostEntry entry) {
    if (entry.cost_nano < 0) {
      throw std::invalid_argument("negative cost entry");
    }
    total_nano_ += entry.cost_nano;
    entries_.push_back(std::move(entry));
  }

  void record(int turn, int subtask_id, const std::string& worker_id,
              const std::string& primitive_id, const UsageRecord& usage,
              const pool::PriceSheet& price) {
    add(CostEntry{turn, subtask_id, worker_id, primitive_id, usage,
                  pool::pair_cost_nano(price, usage)});
  }

  [[nodiscard]] const std::vector<CostEntry>& entries() const {
    return entries_;
  }
  [[nodiscard]] std::int64_t total_nano() const { return total_nano_; }
  [[nodiscard]] double total_usd() const {
    return pool::nano_to_usd(total_nano_);
  }

  [[nodiscard]] UsageRecord total_usage() const {
    UsageRecord total;
    for (const CostEntry& e : entries_) {
      total.prompt_tokens += e.usage.prompt_tokens;
      total.completion_tokens += e.usage.completion_tokens;
    }
    return total;
  }

  [[nodiscard]] std::map<std::string, std::int64_t> nano_by_worker() const {
    std::map<std::string, std::int64_t> out;
    for (const CostEntry& e : entries_) out[e.worker_id] += e.cost_nano;
    return out;
  }

 private:
  std::vector<CostEntry> entries_;
  std::int64_t total_nano_ = 0;
};

// ---------------------------------------------------------------------------
// Cost normalizer
// ---------------------------------------------------------------------------

// Rolling window over sqrt(episode cost in USD). A new cost is placed
// between the 5th and 95th percentile of the window (nearest-rank, so the
// same window always yields the same cut points) and clamped to [0, 1].
// Until the window has kMinSamples entries every cost normalizes to 0:
// early episodes are judged on correctness alone.
class NormalizerState {
 public:
  static constexpr int kWindow = 1000;
  static constexpr int kMinSamples = 30;
  static constexpr double kLowPercentile = 5.0;
  static constexpr double kHighPercentile = 95.0;

  explicit NormalizerState(int window = kWindow,
                           int min_samples = kMinSamples)
      : window_(window), min_samples_(min_samples) {
    if (window <= 0 || min_samples <= 0) {
      throw std::invalid_argument("normalizer window must be positive");
    }
  }

  void observe(double cost_usd) {
    if (cost_usd < 0) throw std::invalid_argument("negative episode cost");
    const double root = std::sqrt(cost_usd);
    if (static_cast<int>(values_.size()) < window_) {
      values_.push_back(root);
    } else {
      values_[next_] = root;
      next_ = (next_ + 1) % window_;
    }
  }

  [[nodiscard]] double normalize(double cost_usd) const {
    if (cost_usd < 0) throw std::invalid_argument("negative episode cost");
    if (static_cast<int>(values_.size()) < min_samples_) return 0.0;
    const double lo = percentile(kLowPercentile);
    const double hi = percentile(kHighPercentile);
    if (hi <= lo) return 0.0;
    const double c = (std::sqrt(cost_usd) - lo) / (hi - lo);
    return std::clamp(c, 0.0, 1.0);
  }

  // Nearest-rank percentile: rank = ceil(p/100 * n), 1-based into the
  // sorted window.
  [[nodiscard]] double percentile(double p) const {
    if (values_.empty()) throw std::logic_error("empty normalizer window");
    if (p <= 0 || p > 100) throw std::invalid_argument("percentile range");
    std::vector<double> sorted = values_;
    std::sort(sorted.begin(), sorted.end());
    const auto n = static_cast<double>(sorted.size());
    const auto rank = static_cast<std::size_t>(std::ceil(p / 100.0 * n));
    return sorted[rank - 1];
  }

  [[nodiscard]] int size() const { return static_cast<int>(values_.size()); }
  [[nodiscard]] int window() const { return window_; }
  [[nodiscard]] bool warmed_up() const {
    return static_cast<int>(values_.size()) >= min_samples_;
  }

 private:
  int window_;
  int min_samples_;
  std::vector<double> values_;
  std::size_t next_ = 0;
};

// ---------------------------------------------------------------------------
// Terminal reward
// ---------------------------------------------------------------------------

constexpr double kDefaultAlpha = 0.1;
constexpr double kMaxShapingScore = 0.10;

// R = b * [(1 - alpha) + alpha * (1 - c_hat)] + (1 - b) * s
//
// b is the verifier gate, c_hat the normalized cost, s the format shaping
// score. With s capped at 0.10 and alpha at most that cap's complement,
// correct always dominates incorrect.
inline double terminal_reward(int b, double shaping, double c_hat,
                              double alpha = kDefaultAlpha) {
  if (b != 0 && b != 1) throw std::invalid_argument("b must be 0 or 1");
  if (shaping < 0.0 || shaping > kMaxShapingScore) {
    throw std::invalid_argument("shaping score outside [0, 0.10]");
  }
  if (c_hat < 0.0 || c_hat > 1.0) {
    throw std::invalid_argument("normalized cost outside [0, 1]");
  }
  if (alpha < 0.0 || alpha > 1.0) {
    throw std::invalid_argument("alpha outside [0, 1]");
  }
  return b * ((1.0 - alpha) + alpha * (1.0 - c_hat)) + (1 - b) * shaping;
}

// ---------------------------------------------------------------------------
// Shaping
// ---------------------------------------------------------------------------

// Format bonus for incorrect episodes: 0.05 for at least one well-formed
// explicit plan, 0.05 for routing that stays inside the admissible
// catalogue. Lazy trajectories (no plans, no routes) earn nothing, so the
// bonus never rewards skipping the orchestration format entirely.
inline double shaping_score(const grammar::TrajectoryDoc& doc,
                            const grammar::RouteVocabulary* vocab = nullptr) {
  bool has_plan = false;
  bool has_route = false;
  for (const auto& turn : doc.turns) {
    has_plan = has_plan || turn.plan.has_value();
    has_route = has_route || !turn.routes.empty();
  }
  if (!has_plan && !has_route) return 0.0;

  bool structural_ok = true;
  bool vocab_ok = true;
  const grammar::ValidationReport report =
      grammar::validate_trajectory(doc, vocab);
  for (const auto& violation : report.violations) {
    if (violation.code == grammar::kViolationClosedVocabulary) {
      vocab_ok = false;
    } else {
      structural_ok = false;
    }
  }
  double s = 0.0;
  if (structural_ok && has_plan) s += 0.05;
  if (structural_ok && vocab_ok && has_route) s += 0.05;
  return std::min(s, kMaxShapingScore);
}

// Text overload: anything that fails to parse earns nothing.
inline double shaping_score(const std::string& text,
                            const grammar::RouteVocabulary* vocab = nullptr) {
  try {
    return shaping_score(grammar::parse_trajectory(text), vocab);
  } catch (const grammar::ParseError&) {
    return 0.0;
  }
}

// Per-turn shaping, reported alongside the terminal reward during training.
constexpr double kDefaultTurnEta = 0.05;

struct TurnSignal {
  bool valid_emission = false;             // turn parsed and validated
  bool repair_after_failed_verify = false;  // replanned after a replan verify
};

inline double turn_shaping(const TurnSignal& signal,
                           double eta = kDefaultTurnEta) {
  if (eta < 0.0) throw std::invalid_argument("eta must be non-negative");
  double r = signal.valid_emission ? eta / 2.0 : -eta / 2.0;
  if (signal.repair_after_failed_verify) r += eta / 2.0;
  return std::clamp(r, -eta, eta);
}

}  // namespace orchestra::reward
