#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "mcpo/eval.hpp"
#include "oracles.hpp"

using namespace mcpo;

namespace {

Environment spread_env(std::uint64_t seed = 2) {
  EnvironmentSpec s;
  s.prompt_count = 3;
  s.vocab_size = 2;
  s.max_length = 3;
  s.seed = seed;
  return Environment(s);
}

}  // namespace

TEST(AdjustedWinrate, HandCases) {
  EXPECT_EQ(adjusted_winrate({3, 1, 0}), 0.75);
  EXPECT_EQ(adjusted_winrate({0, 0, 7}), 0.5);
  EXPECT_EQ(adjusted_winrate({0, 5, 0}), 0.0);
  EXPECT_EQ(adjusted_winrate({4, 4, 3}), 0.5);
  try {
    adjusted_winrate({});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::EmptyMatch);
  }
}

TEST(AdjustedWinrate, InUnitInterval) {
  std::mt19937_64 g(1);
  std::uniform_int_distribution<std::size_t> n(0, 20);
  for (int k = 0; k < 1000; ++k) {
    MatchResult m{n(g), n(g), n(g) + 1};
    const double w = adjusted_winrate(m);
    EXPECT_GE(w, 0.0);
    EXPECT_LE(w, 1.0);
    const double want = (static_cast<double>(m.n_cand) + 0.5 * static_cast<double>(m.n_tie)) /
                        static_cast<double>(m.n_cand + m.n_base + m.n_tie);
    EXPECT_EQ(w, want);
  }
}

TEST(Wilson, BracketsEstimate) {
  const auto [lo, hi] = wilson_interval({60, 40, 0});
  EXPECT_LT(lo, 0.6);
  EXPECT_GT(hi, 0.6);
  // textbook value for 60/100 at z = 1.96
  EXPECT_NEAR(lo, 0.502, 1e-3);
  EXPECT_NEAR(hi, 0.691, 1e-3);
  const auto [l0, h0] = wilson_interval({0, 10, 0});
  EXPECT_EQ(l0, 0.0);
  EXPECT_GT(h0, 0.0);
}

TEST(HeadToHead, SelfWithSharedDrawsAllTies) {
  const auto env = spread_env();
  std::mt19937_64 g(2);
  const auto p = oracle::random_policy(3, 14, g);
  const auto m = head_to_head(env, p, p, 500, 2, Judge::TrueReward, 3, {true, false});
  EXPECT_EQ(m.n_tie, 1000u);
  EXPECT_EQ(adjusted_winrate(m), 0.5);
}

TEST(HeadToHead, OptimalBeatsReference) {
  const auto env = spread_env();
  const auto ref = env.uniform_policy();
  const auto ps = optimal_policy(env, ref, 0.5);
  const auto m = head_to_head(env, ps, ref, 1000, 1, Judge::TrueReward, 4);
  const double w = adjusted_winrate(m);
  const double p = static_cast<double>(oracle::win_probability(env, ps, ref));
  EXPECT_NEAR(exact_win_probability(env, ps, ref), p, 1e-14);
  const double sd = std::sqrt(0.25 / 1000);
  EXPECT_GT(w, 0.5 + 3 * sd);
  EXPECT_LT(std::abs(w - p), 3 * sd);
}

TEST(HeadToHead, ConvergesToExactWinProbability) {
  const auto env = spread_env(9);
  std::mt19937_64 g(3);
  const auto a = oracle::random_policy(3, 14, g);
  const auto b = oracle::random_policy(3, 14, g);
  const auto m = head_to_head(env, a, b, 20000, 1, Judge::Pairwise, 5);
  const double p = static_cast<double>(oracle::win_probability(env, a, b));
  EXPECT_LT(std::abs(adjusted_winrate(m) - p), 3 * std::sqrt(0.25 / 20000));
}

TEST(HeadToHead, SwappedStreamsMirror) {
  const auto env = spread_env();
  std::mt19937_64 g(4);
  const auto a = oracle::random_policy(3, 14, g);
  const auto b = oracle::random_policy(3, 14, g);
  const auto ab = head_to_head(env, a, b, 300, 3, Judge::TrueReward, 6);
  const auto ba = head_to_head(env, b, a, 300, 3, Judge::TrueReward, 6, {false, true});
  EXPECT_EQ(ab.n_cand, ba.n_base);
  EXPECT_EQ(ab.n_tie, ba.n_tie);
  EXPECT_DOUBLE_EQ(adjusted_winrate(ab) + adjusted_winrate(ba), 1.0);
}

TEST(HeadToHead, LogAndShapeChecks) {
  const auto env = spread_env();
  const auto ref = env.uniform_policy();
  std::vector<MatchLogEntry> log;
  const auto m = head_to_head(env, ref, ref, 10, 2, Judge::TrueReward, 1, {}, &log);
  ASSERT_EQ(log.size(), 20u);
  for (const auto& e : log) {
    EXPECT_EQ(e.r_a, env.true_reward(e.prompt, e.y_a));
    EXPECT_EQ(e.outcome, judge_pair(env, e.prompt, e.y_a, e.y_b));
  }
  EXPECT_EQ(m.total(), 20u);
  EXPECT_THROW(head_to_head(env, ref, TabularPolicy(3, 5), 1, 1, Judge::TrueReward, 0), Error);
}

TEST(KlToPistar, ZeroAtOptimum) {
  const auto env = spread_env();
  std::mt19937_64 g(5);
  const auto ref = oracle::random_policy(3, 14, g);
  const auto ps = optimal_policy(env, ref, 0.3);
  EXPECT_NEAR(kl_to_pistar(env, ps, ref, 0.3), 0.0, 1e-12);
  EXPECT_GT(kl_to_pistar(env, ref, ref, 0.3), 0.0);
}

TEST(KlToPistar, InvariantToRelabeling) {
  const auto env = spread_env();
  std::mt19937_64 g(6);
  const auto ref = oracle::random_policy(3, 14, g);
  const auto pol = oracle::random_policy(3, 14, g);
  std::vector<std::size_t> perm(14);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), g);
  std::vector<double> rewards(3 * 14), lr(3 * 14), lp(3 * 14);
  for (std::size_t x = 0; x < 3; ++x) {
    for (std::size_t y = 0; y < 14; ++y) {
      rewards[x * 14 + perm[y]] = env.true_reward(x, y);
      lr[x * 14 + perm[y]] = ref.logits()[x * 14 + y];
      lp[x * 14 + perm[y]] = pol.logits()[x * 14 + y];
    }
  }
  const Environment env2(env.spec(), rewards);
  EXPECT_NEAR(kl_to_pistar(env, pol, ref, 0.4),
              kl_to_pistar(env2, TabularPolicy(3, 14, lp), TabularPolicy(3, 14, lr), 0.4), 1e-12);
}

TEST(Evaluate, ReportIsConsistent) {
  const auto env = spread_env();
  const auto ref = env.uniform_policy();
  const auto ps = optimal_policy(env, ref, 0.5);
  EvalParams params;
  params.n_prompts = 400;
  params.seed = 8;
  params.beta = 0.5;
  const auto r = evaluate(env, ps, ref, ref, params);
  EXPECT_EQ(r.winrate, adjusted_winrate(r.match));
  EXPECT_LE(r.wilson_low, r.winrate);
  EXPECT_GE(r.wilson_high, r.winrate);
  EXPECT_NEAR(r.kl_to_pistar, 0.0, 1e-12);
  EXPECT_NEAR(r.expected_reward, expected_reward(env, ps), 1e-15);
  EXPECT_GT(r.expected_reward, r.baseline_expected_reward);
  MatchResult sum;
  double er = 0;
  for (const auto& p : r.per_prompt) {
    sum += p.match;
    er += env.prompt_weights()[p.prompt] * p.expected_reward;
  }
  EXPECT_EQ(sum.total(), r.match.total());
  EXPECT_EQ(sum.n_cand, r.match.n_cand);
  EXPECT_NEAR(er, r.expected_reward, 1e-14);
}
