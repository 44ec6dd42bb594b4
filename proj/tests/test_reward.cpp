#include "orchestra/reward.hpp"

#include <algorithm>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "support/generators.hpp"

namespace {

using namespace orchestra;
using namespace orchestra::reward;

// ---------------------------------------------------------------------------
// Cost ledger
// ---------------------------------------------------------------------------

TEST(CostLedger, BillsPairsExactlyInNanoUsd) {
  // 1.0 / 2.0 USD per Mtok at (1000, 500) tokens: 1000*1000 + 500*2000 nano.
  pool::PriceSheet price{1000, 2000};
  CostLedger ledger;
  ledger.record(1, 1, "alpha-worker", "reason", UsageRecord{1000, 500},
                price);
  EXPECT_EQ(ledger.total_nano(), 2'000'000);
  EXPECT_DOUBLE_EQ(ledger.total_usd(), 0.002);

  ledger.record(1, 2, "alpha-worker", "reason", UsageRecord{1, 0}, price);
  ledger.record(2, -1, "beta-worker", "direct_answer", UsageRecord{0, 1},
                price);
  EXPECT_EQ(ledger.total_nano(), 2'000'000 + 1000 + 2000);
  ASSERT_EQ(ledger.entries().size(), 3u);
  EXPECT_EQ(ledger.entries()[2].subtask_id, -1);

  const auto by_worker = ledger.nano_by_worker();
  EXPECT_EQ(by_worker.at("alpha-worker"), 2'001'000);
  EXPECT_EQ(by_worker.at("beta-worker"), 2000);

  const UsageRecord usage = ledger.total_usage();
  EXPECT_EQ(usage.prompt_tokens, 1001);
  EXPECT_EQ(usage.completion_tokens, 501);
}

TEST(CostLedger, RejectsNegativeAmounts) {
  CostLedger ledger;
  EXPECT_THROW(ledger.add(CostEntry{0, 0, "w", "p", {}, -1}),
               std::invalid_argument);
  EXPECT_THROW(ledger.record(0, 0, "w", "p", UsageRecord{-5, 0},
                             pool::PriceSheet{1000, 1000}),
               std::invalid_argument);
  EXPECT_EQ(ledger.total_nano(), 0);
  EXPECT_TRUE(ledger.entries().empty());
}

// ---------------------------------------------------------------------------
// Normalizer
// ---------------------------------------------------------------------------

TEST(Normalizer, ColdWindowNormalizesEverythingToZero) {
  NormalizerState norm;
  EXPECT_DOUBLE_EQ(norm.normalize(123.0), 0.0);
  for (int i = 0; i < NormalizerState::kMinSamples - 1; ++i) {
    norm.observe(1.0);
  }
  EXPECT_FALSE(norm.warmed_up());
  EXPECT_DOUBLE_EQ(norm.normalize(123.0), 0.0);
  norm.observe(1.0);
  EXPECT_TRUE(norm.warmed_up());
}

TEST(Normalizer, MidWindowCostNormalizesToOneHalf) {
  // Window of sqrt values 1..100: p5 = 5, p95 = 95 by nearest rank, so
  // sqrt(2500) = 50 lands at (50 - 5) / 90 = 0.5 with no rounding.
  NormalizerState norm;
  for (int i = 1; i <= 100; ++i) {
    norm.observe(static_cast<double>(i) * i);
  }
  EXPECT_DOUBLE_EQ(norm.percentile(5.0), 5.0);
  EXPECT_DOUBLE_EQ(norm.percentile(95.0), 95.0);
  EXPECT_DOUBLE_EQ(norm.percentile(50.0), 50.0);
  EXPECT_DOUBLE_EQ(norm.normalize(2500.0), 0.5);
}

TEST(Normalizer, ClampsOutliersToTheUnitInterval) {
  NormalizerState norm;
  for (int i = 1; i <= 100; ++i) {
    norm.observe(static_cast<double>(i) * i);
  }
  EXPECT_DOUBLE_EQ(norm.normalize(1.0), 0.0);       // below p5
  EXPECT_DOUBLE_EQ(norm.normalize(10000.0), 1.0);   // above p95
  EXPECT_DOUBLE_EQ(norm.normalize(0.0), 0.0);
}

TEST(Normalizer, DegenerateWindowNormalizesToZero) {
  NormalizerState norm;
  for (int i = 0; i < 50; ++i) norm.observe(4.0);
  EXPECT_DOUBLE_EQ(norm.normalize(4.0), 0.0);
  EXPECT_DOUBLE_EQ(norm.normalize(400.0), 0.0);
}

TEST(Normalizer, WindowEvictsOldestValues) {
  NormalizerState norm(10, 3);
  for (int i = 1; i <= 15; ++i) {
    norm.observe(static_cast<double>(i) * i);  // sqrt values 1..15
  }
  EXPECT_EQ(norm.size(), 10);
  // Only 6..15 remain; the p95 cut is 15 and the p5 cut is 6.
  EXPECT_DOUBLE_EQ(norm.percentile(95.0), 15.0);
  EXPECT_DOUBLE_EQ(norm.percentile(5.0), 6.0);
}

TEST(Normalizer, NearestRankUsesCeil) {
  NormalizerState norm(200, 3);
  for (int i = 1; i <= 99; ++i) {
    norm.observe(static_cast<double>(i) * i);
  }
  // n = 99: rank(5%) = ceil(4.95) = 5 -> value 5; rank(95%) = ceil(94.05)
  // = 95 -> value 95.
  EXPECT_DOUBLE_EQ(norm.percentile(5.0), 5.0);
  EXPECT_DOUBLE_EQ(norm.percentile(95.0), 95.0);
}

TEST(Normalizer, RejectsBadInputs) {
  NormalizerState norm;
  EXPECT_THROW(norm.observe(-1.0), std::invalid_argument);
  EXPECT_THROW((void)norm.normalize(-1.0), std::invalid_argument);
  EXPECT_THROW((void)norm.percentile(50.0), std::logic_error);  // empty
  EXPECT_THROW(NormalizerState(0, 1), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Terminal reward
// ---------------------------------------------------------------------------

TEST(TerminalReward, CorrectEpisodesScoreByCost) {
  EXPECT_NEAR(terminal_reward(1, 0.0, 0.0), 1.0, 1e-12);
  EXPECT_NEAR(terminal_reward(1, 0.0, 1.0), 0.9, 1e-12);
  EXPECT_NEAR(terminal_reward(1, 0.0, 0.5), 0.95, 1e-12);
  // Shaping is ignored once the episode is correct.
  EXPECT_NEAR(terminal_reward(1, 0.10, 0.5), 0.95, 1e-12);
}

TEST(TerminalReward, IncorrectEpisodesEarnOnlyShaping) {
  EXPECT_NEAR(terminal_reward(0, 0.0, 0.3), 0.0, 1e-12);
  EXPECT_NEAR(terminal_reward(0, 0.07, 0.0), 0.07, 1e-12);
  EXPECT_NEAR(terminal_reward(0, 0.10, 1.0), 0.10, 1e-12);
}

TEST(TerminalReward, CorrectnessDominatesOverRandomTuples) {
  testgen::Rng rng(0x5eed);
  double min_correct = 1e9;
  double max_incorrect = -1e9;
  for (int i = 0; i < 10000; ++i) {
    const double s = rng.below(1001) * (kMaxShapingScore / 1000.0);
    const double c_hat = rng.below(1001) / 1000.0;
    min_correct = std::min(min_correct, terminal_reward(1, s, c_hat));
    max_incorrect = std::max(max_incorrect, terminal_reward(0, s, c_hat));
  }
  EXPECT_GE(min_correct, 0.9);
  EXPECT_LE(max_incorrect, kMaxShapingScore);
  EXPECT_GT(min_correct, max_incorrect);
}

TEST(TerminalReward, MatchesTheExpandedFormula) {
  testgen::Rng rng(0xabcd);
  for (int i = 0; i < 1000; ++i) {
    const int b = rng.chance(0.5) ? 1 : 0;
    const double s = rng.below(1001) * (kMaxShapingScore / 1000.0);
    const double c_hat = rng.below(1001) / 1000.0;
    const double alpha = rng.below(1001) / 1000.0;
    const double expanded =
        b * (1.0 - alpha) + b * alpha * (1.0 - c_hat) + (1 - b) * s;
    EXPECT_NEAR(terminal_reward(b, s, c_hat, alpha), expanded, 1e-12);
  }
}

TEST(TerminalReward, RejectsOutOfRangeInputs) {
  EXPECT_THROW((void)terminal_reward(2, 0.0, 0.0), std::invalid_argument);
  EXPECT_THROW((void)terminal_reward(1, 0.2, 0.0), std::invalid_argument);
  EXPECT_THROW((void)terminal_reward(1, -0.01, 0.0), std::invalid_argument);
  EXPECT_THROW((void)terminal_reward(1, 0.0, 1.5), std::invalid_argument);
  EXPECT_THROW((void)terminal_reward(1, 0.0, 0.0, 1.1),
               std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Shaping score
// ---------------------------------------------------------------------------

TEST(ShapingScore, LazyTrajectoriesEarnNothing) {
  testgen::Rng rng(1);
  const grammar::TrajectoryDoc lazy = testgen::make_lazy(rng);
  EXPECT_DOUBLE_EQ(shaping_score(lazy), 0.0);
}

TEST(ShapingScore, PlanAndAdmissibleRoutesEarnTheFullBonus) {
  testgen::Rng rng(2);
  const testgen::GenVocab gen;
  const grammar::RouteVocabulary vocab = testgen::to_route_vocabulary(gen);
  const grammar::TrajectoryDoc doc = testgen::make_oneshot(rng, gen);
  EXPECT_DOUBLE_EQ(shaping_score(doc, &vocab), 0.10);
  EXPECT_DOUBLE_EQ(shaping_score(doc, nullptr), 0.10);
}

TEST(ShapingScore, PlanWithoutRoutesEarnsHalf) {
  grammar::TrajectoryDoc doc;
  doc.query = "q";
  grammar::TurnBlock turn;
  turn.round = 1;
  grammar::PlanBlock plan;
  plan.round = 1;
  plan.subtasks.push_back({1, {}, "step"});
  turn.plan = plan;
  doc.turns.push_back(turn);
  doc.final_answers.push_back("done");
  EXPECT_DOUBLE_EQ(shaping_score(doc), 0.05);
}

TEST(ShapingScore, InadmissibleRoutesKeepOnlyThePlanBonus) {
  testgen::Rng rng(3);
  const testgen::GenVocab gen;
  grammar::RouteVocabulary vocab = testgen::to_route_vocabulary(gen);
  grammar::TrajectoryDoc doc = testgen::make_oneshot(rng, gen);
  // Point every route at a model the catalogue does not know.
  for (auto& turn : doc.turns) {
    for (auto& route : turn.routes) route.model = "ghost-worker";
  }
  EXPECT_DOUBLE_EQ(shaping_score(doc, &vocab), 0.05);
}

TEST(ShapingScore, RoutesWithoutAnExplicitPlanEarnHalf) {
  testgen::Rng rng(4);
  const testgen::GenVocab gen;
  const grammar::RouteVocabulary vocab = testgen::to_route_vocabulary(gen);
  grammar::TrajectoryDoc doc = testgen::make_continuation(rng, gen);
  bool any_plan = false;
  for (const auto& turn : doc.turns) any_plan |= turn.plan.has_value();
  ASSERT_FALSE(any_plan);
  EXPECT_DOUBLE_EQ(shaping_score(doc, &vocab), 0.05);
}

TEST(ShapingScore, StructuralViolationsForfeitTheBonus) {
  testgen::Rng rng(5);
  const testgen::GenVocab gen;
  const grammar::RouteVocabulary vocab = testgen::to_route_vocabulary(gen);
  grammar::TrajectoryDoc doc = testgen::make_oneshot(rng, gen);
  doc.final_answers.push_back("second answer");
  EXPECT_DOUBLE_EQ(shaping_score(doc, &vocab), 0.0);
}

TEST(ShapingScore, UnparseableTextEarnsNothing) {
  EXPECT_DOUBLE_EQ(shaping_score(std::string{"not a trajectory"}), 0.0);
  testgen::Rng rng(6);
  const testgen::GenVocab gen;
  const std::string good =
      grammar::serialize_trajectory(testgen::make_oneshot(rng, gen));
  EXPECT_DOUBLE_EQ(shaping_score(good), 0.10);
}

// ---------------------------------------------------------------------------
// Turn shaping
// ---------------------------------------------------------------------------

TEST(TurnShaping, RewardsValidEmissionsAndRepairs) {
  EXPECT_DOUBLE_EQ(turn_shaping({true, false}), 0.025);
  EXPECT_DOUBLE_EQ(turn_shaping({false, false}), -0.025);
  EXPECT_DOUBLE_EQ(turn_shaping({true, true}), 0.05);
  EXPECT_DOUBLE_EQ(turn_shaping({false, true}), 0.0);
}

TEST(TurnShaping, StaysWithinPlusMinusEta) {
  for (const bool valid : {false, true}) {
    for (const bool repair : {false, true}) {
      const double r = turn_shaping({valid, repair}, 0.08);
      EXPECT_GE(r, -0.08);
      EXPECT_LE(r, 0.08);
    }
  }
  EXPECT_DOUBLE_EQ(turn_shaping({true, true}, 0.0), 0.0);
  EXPECT_THROW((void)turn_shaping({true, false}, -0.1),
               std::invalid_argument);
}

}  // namespace
