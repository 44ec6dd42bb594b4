#pragma once

// Credit assignment over groups of sampled rollouts.
//
// A rollout is one trajectory for a query: a terminal reward plus optional
// per-turn shaping. Estimators turn a group of rollouts into per-turn
// advantages; the masked clipped loss consumes those through a token->turn
// map so only policy-authored tokens train.
//
// Standardization is population-style with denominator max(sigma, epsilon):
// whenever a cohort has real spread its standardized values have unit
// standard deviation exactly, and degenerate cohorts (singletons, all-equal
// values) come out as zeros instead of blowing up.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "orchestra/common.hpp"

namespace orchestra::credit {

constexpr double kNumEps = 1e-8;

// ---------------------------------------------------------------------------
// Rollouts and turn returns
// ---------------------------------------------------------------------------

struct Rollout {
  std::string rollout_id;
  double terminal_reward = 0.0;
  std::vector<double> turn_shaping;       // r_s, one per turn; may be empty
  std::vector<std::string> action_kinds;  // one per turn; may be empty
  std::string branch_id;                  // tree estimator: "A/1"-style path

  // Turn count: both per-turn vectors describe the same turns, so when both
  // are present they must agree.
  [[nodiscard]] std::size_t turns() const {
    const std::size_t a = turn_shaping.size();
    const std::size_t b = action_kinds.size();
    if (a != 0 && b != 0 && a != b) {
      throw std::invalid_argument("rollout " + rollout_id +
                                  ": shaping and action kinds disagree");
    }
    return std::max({a, b, std::size_t{1}});
  }

  [[nodiscard]] const std::string& kind_at(std::size_t t) const {
    static const std::string empty;
    return t < action_kinds.size() ? action_kinds[t] : empty;
  }
};

struct RolloutGroup {
  std::string query_id;
  std::vector<Rollout> rollouts;
  double gamma = 1.0;
};

// Return-to-go seen from turn t (0-based): the terminal reward discounted
// over the remaining turns plus the discounted tail of shaping rewards.
inline std::vector<double> turn_returns(const Rollout& rollout, double gamma) {
  if (gamma < 0.0 || gamma > 1.0) {
    throw std::invalid_argument("gamma outside [0, 1]");
  }
  const std::size_t total = rollout.turns();
  std::vector<double> out(total, 0.0);
  for (std::size_t t = 0; t < total; ++t) {
    double value =
        std::pow(gamma, static_cast<double>(total - 1 - t)) *
        rollout.terminal_reward;
    double discount = 1.0;
    for (std::size_t s = t; s < rollout.turn_shaping.size(); ++s) {
      value += discount * rollout.turn_shaping[s];
      discount *= gamma;
    }
    out[t] = value;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Standardization
// ---------------------------------------------------------------------------

inline std::vector<double> standardize(const std::vector<double>& values,
                                       double eps = kNumEps) {
  if (values.empty()) return {};
  const double n = static_cast<double>(values.size());
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  var /= n;
  const double denom = std::max(std::sqrt(var), eps);
  std::vector<double> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    out[i] = (values[i] - mean) / denom;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Advantage estimators
// ---------------------------------------------------------------------------

enum class Estimator { grpo, tree, mt, gigpo, agentic };

inline Estimator estimator_from_string(const std::string& name) {
  if (name == "grpo") return Estimator::grpo;
  if (name == "tree") return Estimator::tree;
  if (name == "mt") return Estimator::mt;
  if (name == "gigpo") return Estimator::gigpo;
  if (name == "agentic") return Estimator::agentic;
  throw std::invalid_argument("unknown estimator: " + name);
}

inline const char* to_string(Estimator e) {
  switch (e) {
    case Estimator::grpo: return "grpo";
    case Estimator::tree: return "tree";
    case Estimator::mt: return "mt";
    case Estimator::gigpo: return "gigpo";
    case Estimator::agentic: return "agentic";
  }
  return "?";
}

// advantages[rollout_id][t], t indexing the rollout's turns.
struct AdvantageTable {
  std::map<std::string, std::vector<double>> by_rollout;

  [[nodiscard]] const std::vector<double>& of(const std::string& id) const {
    const auto it = by_rollout.find(id);
    if (it == by_rollout.end()) {
      throw std::out_of_range("no advantages for rollout " + id);
    }
    return it->second;
  }
};

namespace detail {

inline void require_unique_ids(const RolloutGroup& group) {
  std::set<std::string> seen;
  for (const Rollout& r : group.rollouts) {
    if (r.rollout_id.empty() || !seen.insert(r.rollout_id).second) {
      throw std::invalid_argument("rollout ids must be unique and non-empty");
    }
  }
}

// Group-level standardized terminal rewards, in rollout order.
inline std::vector<double> group_scores(const RolloutGroup& group) {
  std::vector<double> rewards;
  rewards.reserve(group.rollouts.size());
  for (const Rollout& r : group.rollouts) {
    rewards.push_back(r.terminal_reward);
  }
  return standardize(rewards);
}

}  // namespace detail

// Outcome-only baseline: the standardized terminal reward, broadcast to
// every turn of its rollout.
inline AdvantageTable grpo_advantages(const RolloutGroup& group) {
  detail::require_unique_ids(group);
  const std::vector<double> scores = detail::group_scores(group);
  AdvantageTable table;
  for (std::size_t i = 0; i < group.rollouts.size(); ++i) {
    const Rollout& r = group.rollouts[i];
    table.by_rollout[r.rollout_id] =
        std::vector<double>(r.turns(), scores[i]);
  }
  return table;
}

// Turn-level estimator: return-to-go standardized within cohorts keyed by
// (turn index, action kind). Rollouts only join the cohorts of turns they
// actually have, so ragged groups never pad each other.
inline AdvantageTable agentic_advantages(const RolloutGroup& group) {
  detail::require_unique_ids(group);
  std::vector<std::vector<double>> returns;
  returns.reserve(group.rollouts.size());
  std::size_t max_turns = 0;
  for (const Rollout& r : group.rollouts) {
    returns.push_back(turn_returns(r, group.gamma));
    max_turns = std::max(max_turns, returns.back().size());
  }

  AdvantageTable table;
  for (std::size_t i = 0; i < group.rollouts.size(); ++i) {
    table.by_rollout[group.rollouts[i].rollout_id] =
        std::vector<double>(returns[i].size(), 0.0);
  }
  for (std::size_t t = 0; t < max_turns; ++t) {
    std::map<std::string, std::vector<std::size_t>> cohorts;
    for (std::size_t i = 0; i < group.rollouts.size(); ++i) {
      if (t < returns[i].size()) {
        cohorts[group.rollouts[i].kind_at(t)].push_back(i);
      }
    }
    for (const auto& [kind, members] : cohorts) {
      std::vector<double> values;
      values.reserve(members.size());
      for (std::size_t i : members) values.push_back(returns[i][t]);
      const std::vector<double> z = standardize(values);
      for (std::size_t k = 0; k < members.size(); ++k) {
        table.by_rollout[group.rollouts[members[k]].rollout_id][t] = z[k];
      }
    }
  }
  return table;
}

// Extra inputs for the variant estimators. Per-rollout vectors must cover
// every turn of their rollout.
struct VariantParams {
  double rho_mix = 0.5;  // mt: weight on the turn baseline
  double eta_mix = 0.5;  // gigpo: weight on the anchor term

  // tree: turn at which each rollout split from its siblings.
  std::map<std::string, int> branch_turn;

  // mt: per-turn utility per rollout.
  std::map<std::string, std::vector<double>> turn_utility;

  // gigpo: per-turn anchor label and per-turn value per rollout.
  std::map<std::string, std::vector<std::string>> anchor_keys;
  std::map<std::string, std::vector<double>> anchor_values;
};

namespace detail {

inline std::string sibling_key(const std::string& branch_id) {
  const std::size_t pos = branch_id.rfind('/');
  return pos == std::string::npos ? std::string{} : branch_id.substr(0, pos);
}

inline const std::vector<double>& per_turn_values(
    const std::map<std::string, std::vector<double>>& source,
    const Rollout& rollout, const char* what) {
  const auto it = source.find(rollout.rollout_id);
  if (it == source.end() || it->second.size() != rollout.turns()) {
    throw std::invalid_argument(std::string{what} + " missing or mis-sized " +
                                "for rollout " + rollout.rollout_id);
  }
  return it->second;
}

// Siblings share everything before the branch turn, so pre-branch turns
// keep the group-level score and post-branch turns get the branch-point
// return standardized across the sibling set.
inline AdvantageTable tree_advantages(const RolloutGroup& group,
                                      const VariantParams& params) {
  const std::vector<double> scores = group_scores(group);
  std::vector<std::vector<double>> returns;
  std::vector<std::size_t> branch_at;
  std::map<std::string, std::vector<std::size_t>> siblings;
  for (std::size_t i = 0; i < group.rollouts.size(); ++i) {
    const Rollout& r = group.rollouts[i];
    returns.push_back(turn_returns(r, group.gamma));
    const auto it = params.branch_turn.find(r.rollout_id);
    const int raw = it == params.branch_turn.end() ? 0 : it->second;
    if (raw < 0 || static_cast<std::size_t>(raw) >= r.turns()) {
      throw std::invalid_argument("branch turn out of range for rollout " +
                                  r.rollout_id);
    }
    branch_at.push_back(static_cast<std::size_t>(raw));
    siblings[sibling_key(r.branch_id)].push_back(i);
  }

  std::vector<double> branch_score(group.rollouts.size(), 0.0);
  for (const auto& [key, members] : siblings) {
    std::vector<double> values;
    values.reserve(members.size());
    for (std::size_t i : members) values.push_back(returns[i][branch_at[i]]);
    const std::vector<double> z = standardize(values);
    for (std::size_t k = 0; k < members.size(); ++k) {
      branch_score[members[k]] = z[k];
    }
  }

  AdvantageTable table;
  for (std::size_t i = 0; i < group.rollouts.size(); ++i) {
    const Rollout& r = group.rollouts[i];
    std::vector<double> row(r.turns());
    for (std::size_t t = 0; t < row.size(); ++t) {
      row[t] = t < branch_at[i] ? scores[i] : branch_score[i];
    }
    table.by_rollout[r.rollout_id] = std::move(row);
  }
  return table;
}

// Group score plus a mixed-in turn baseline standardized per turn index.
inline AdvantageTable mt_advantages(const RolloutGroup& group,
                                    const VariantParams& params) {
  const std::vector<double> scores = group_scores(group);
  std::size_t max_turns = 0;
  for (const Rollout& r : group.rollouts) {
    (void)per_turn_values(params.turn_utility, r, "turn utility");
    max_turns = std::max(max_turns, r.turns());
  }

  AdvantageTable table;
  for (std::size_t i = 0; i < group.rollouts.size(); ++i) {
    const Rollout& r = group.rollouts[i];
    table.by_rollout[r.rollout_id] =
        std::vector<double>(r.turns(), scores[i]);
  }
  for (std::size_t t = 0; t < max_turns; ++t) {
    std::vector<std::size_t> members;
    std::vector<double> values;
    for (std::size_t i = 0; i < group.rollouts.size(); ++i) {
      const Rollout& r = group.rollouts[i];
      if (t < r.turns()) {
        members.push_back(i);
        values.push_back(params.turn_utility.at(r.rollout_id)[t]);
      }
    }
    const std::vector<double> z = standardize(values);
    for (std::size_t k = 0; k < members.size(); ++k) {
      table.by_rollout[group.rollouts[members[k]].rollout_id][t] +=
          params.rho_mix * z[k];
    }
  }
  return table;
}

// Group score plus an anchor term: turns that share an anchor label form
// one cohort regardless of their turn index.
inline AdvantageTable gigpo_advantages(const RolloutGroup& group,
                                       const VariantParams& params) {
  const std::vector<double> scores = group_scores(group);
  struct Slot {
    std::size_t rollout;
    std::size_t turn;
    double value;
  };
  std::map<std::string, std::vector<Slot>> anchors;
  for (std::size_t i = 0; i < group.rollouts.size(); ++i) {
    const Rollout& r = group.rollouts[i];
    const auto key_it = params.anchor_keys.find(r.rollout_id);
    if (key_it == params.anchor_keys.end() ||
        key_it->second.size() != r.turns()) {
      throw std::invalid_argument("anchor keys missing or mis-sized for " +
                                  r.rollout_id);
    }
    const std::vector<double>& values =
        per_turn_values(params.anchor_values, r, "anchor values");
    for (std::size_t t = 0; t < r.turns(); ++t) {
      anchors[key_it->second[t]].push_back({i, t, values[t]});
    }
  }

  AdvantageTable table;
  for (std::size_t i = 0; i < group.rollouts.size(); ++i) {
    const Rollout& r = group.rollouts[i];
    table.by_rollout[r.rollout_id] =
        std::vector<double>(r.turns(), scores[i]);
  }
  for (const auto& [key, slots] : anchors) {
    std::vector<double> values;
    values.reserve(slots.size());
    for (const Slot& s : slots) values.push_back(s.value);
    const std::vector<double> z = standardize(values);
    for (std::size_t k = 0; k < slots.size(); ++k) {
      table.by_rollout[group.rollouts[slots[k].rollout].rollout_id]
                      [slots[k].turn] += params.eta_mix * z[k];
    }
  }
  return table;
}

}  // namespace detail

inline AdvantageTable variant_advantages(const RolloutGroup& group,
                                         Estimator estimator,
                                         const VariantParams& params = {}) {
  detail::require_unique_ids(group);
  switch (estimator) {
    case Estimator::grpo: return grpo_advantages(group);
    case Estimator::agentic: return agentic_advantages(group);
    case Estimator::tree: return detail::tree_advantages(group, params);
    case Estimator::mt: return detail::mt_advantages(group, params);
    case Estimator::gigpo: return detail::gigpo_advantages(group, params);
  }
  throw std::logic_error("unreachable estimator");
}

// ---------------------------------------------------------------------------
// Masked clipped loss
// ---------------------------------------------------------------------------

// Full per-token log-probability arrays for one rollout plus the mask of
// trainable positions. Unmasked tokens (worker observations spliced into
// the context) never contribute, which the tests pin down by perturbing
// them freely.
struct MaskedBatch {
  std::vector<double> logp_new;
  std::vector<double> logp_old;
  std::vector<double> logp_ref;
  std::vector<int> turn_index;        // token -> turn, for advantage lookup
  std::vector<std::size_t> mask;      // trained positions
  std::vector<double> mask_weights;   // optional, parallel to mask
};

struct LossBreakdown {
  double policy = 0.0;
  double kl = 0.0;
  double total = 0.0;
  std::size_t tokens = 0;
};

// k3 estimator: exp(d) - d - 1 with d = logp_ref - logp_new. Non-negative,
// zero iff the policies agree on the token.
inline double kl_term(double logp_new, double logp_ref) {
  const double d = logp_ref - logp_new;
  return std::exp(d) - d - 1.0;
}

inline LossBreakdown masked_clipped_loss(
    const MaskedBatch& batch, const std::vector<double>& turn_advantages,
    double clip_eps = 0.2, double kl_beta = 1e-3) {
  const std::size_t n = batch.logp_new.size();
  if (batch.logp_old.size() != n || batch.logp_ref.size() != n ||
      batch.turn_index.size() != n) {
    throw std::invalid_argument("log-prob arrays must share one length");
  }
  if (clip_eps <= 0.0 || clip_eps >= 1.0) {
    throw std::invalid_argument("clip range outside (0, 1)");
  }
  if (kl_beta < 0.0) throw std::invalid_argument("negative kl weight");
  if (!batch.mask_weights.empty() &&
      batch.mask_weights.size() != batch.mask.size()) {
    throw std::invalid_argument("mask weights must parallel the mask");
  }

  double policy_sum = 0.0;
  double kl_sum = 0.0;
  double weight_sum = 0.0;
  for (std::size_t k = 0; k < batch.mask.size(); ++k) {
    const std::size_t i = batch.mask[k];
    if (i >= n) throw std::invalid_argument("mask index out of range");
    const int turn = batch.turn_index[i];
    if (turn < 0 ||
        static_cast<std::size_t>(turn) >= turn_advantages.size()) {
      throw std::invalid_argument("turn index out of advantage range");
    }
    const double w =
        batch.mask_weights.empty() ? 1.0 : batch.mask_weights[k];
    if (w < 0.0) throw std::invalid_argument("negative mask weight");
    const double adv = turn_advantages[static_cast<std::size_t>(turn)];
    const double ratio = std::exp(batch.logp_new[i] - batch.logp_old[i]);
    const double clipped =
        std::clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps);
    policy_sum += w * -std::min(ratio * adv, clipped * adv);
    kl_sum += w * kl_term(batch.logp_new[i], batch.logp_ref[i]);
    weight_sum += w;
  }

  LossBreakdown out;
  out.tokens = batch.mask.size();
  if (weight_sum > 0.0) {
    out.policy = policy_sum / weight_sum;
    out.kl = kl_sum / weight_sum;
  }
  out.total = out.policy + kl_beta * out.kl;
  return out;
}

}  // namespace orchestra::credit
