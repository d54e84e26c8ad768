#pragma once

// Evaluation: adjusted winrate, reward-oracle head-to-head matches, KL to the
// optimal policy and expected true reward.

#include <cmath>
#include <utility>
#include <vector>

#include "mcpo/core.hpp"
#include "mcpo/env.hpp"
#include "mcpo/policy.hpp"

namespace mcpo {

struct MatchResult {
  std::size_t n_cand = 0;
  std::size_t n_base = 0;
  std::size_t n_tie = 0;

  std::size_t total() const { return n_cand + n_base + n_tie; }

  MatchResult& operator+=(const MatchResult& o) {
    n_cand += o.n_cand;
    n_base += o.n_base;
    n_tie += o.n_tie;
    return *this;
  }
};

// (N_cand + N_tie / 2) / (N_cand + N_base + N_tie)
inline double adjusted_winrate(const MatchResult& m) {
  if (m.total() == 0) throw Error(ErrorCode::EmptyMatch, "no matches played");
  return (static_cast<double>(m.n_cand) + 0.5 * static_cast<double>(m.n_tie)) /
         static_cast<double>(m.total());
}

// Wilson score interval for the adjusted winrate, ties counted as half wins.
inline std::pair<double, double> wilson_interval(const MatchResult& m, double z = 1.96) {
  const double n = static_cast<double>(m.total());
  const double p = adjusted_winrate(m);
  const double z2 = z * z;
  const double center = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
  const double half = z / (1.0 + z2 / n) * std::sqrt(p * (1.0 - p) / n + z2 / (4.0 * n * n));
  return {std::max(0.0, center - half), std::min(1.0, center + half)};
}

enum class Judge { TrueReward, Pairwise };

inline const char* to_string(Judge j) { return j == Judge::TrueReward ? "true_reward" : "pairwise"; }

inline Judge parse_judge(const std::string& s) {
  if (s == "true_reward") return Judge::TrueReward;
  if (s == "pairwise") return Judge::Pairwise;
  throw Error(ErrorCode::ConfigInvalid, "unknown judge '" + s + "'");
}

// +1 when a is preferred, -1 when b is, 0 on exactly equal true reward.
// Both judges compare true rewards; the pairwise judge is the same oracle
// queried one pair at a time.
inline int judge_pair(const Environment& env, PromptId x, CompletionId a, CompletionId b) {
  const double ra = env.true_reward(x, a);
  const double rb = env.true_reward(x, b);
  if (ra > rb) return 1;
  if (rb > ra) return -1;
  return 0;
}

struct MatchLogEntry {
  PromptId prompt;
  CompletionId y_a;
  CompletionId y_b;
  double r_a;
  double r_b;
  int outcome;  // +1 a wins, -1 b wins, 0 tie
};

struct HeadToHeadOptions {
  // Both sides consume the same uniform per match (common random numbers),
  // so identical policies always tie.
  bool shared_draws = false;
  // Exchange the two uniform streams; with a and b swapped this replays the
  // mirrored matches.
  bool swap_streams = false;
};

inline MatchResult head_to_head(const Environment& env, const TabularPolicy& a, const TabularPolicy& b,
                                std::size_t n_prompts, std::size_t samples_per_prompt, Judge judge,
                                std::uint64_t seed, HeadToHeadOptions opts = {},
                                std::vector<MatchLogEntry>* log = nullptr) {
  (void)judge;  // both judges are exact true-reward comparisons
  if (!a.same_shape(b) || a.prompt_count() != env.prompt_count() ||
      a.completion_count() != env.completion_count()) {
    throw Error(ErrorCode::ShapeMismatch, "policies do not match environment");
  }
  MatchResult m;
  for (std::size_t i = 0; i < n_prompts; ++i) {
    Rng rng(derive_seed(seed, i));
    const PromptId x = env.sample_prompt(rng);
    const auto pa = a.probs_row(x);
    const auto pb = b.probs_row(x);
    for (std::size_t s = 0; s < samples_per_prompt; ++s) {
      double u1 = rng.uniform();
      double u2 = opts.shared_draws ? u1 : rng.uniform();
      if (opts.swap_streams) std::swap(u1, u2);
      const CompletionId ya = Rng::categorical_at(pa, u1);
      const CompletionId yb = Rng::categorical_at(pb, u2);
      const int outcome = judge_pair(env, x, ya, yb);
      if (outcome > 0) ++m.n_cand;
      else if (outcome < 0) ++m.n_base;
      else ++m.n_tie;
      if (log) log->push_back({x, ya, yb, env.true_reward(x, ya), env.true_reward(x, yb), outcome});
    }
  }
  return m;
}

// P(a beats b) + P(tie) / 2 for independent draws, by double summation.
inline double exact_win_probability(const Environment& env, const TabularPolicy& a, const TabularPolicy& b) {
  double total = 0.0;
  const std::size_t C = env.completion_count();
  for (std::size_t x = 0; x < env.prompt_count(); ++x) {
    const auto pa = a.probs_row(x);
    const auto pb = b.probs_row(x);
    double row = 0.0;
    for (std::size_t i = 0; i < C; ++i) {
      for (std::size_t j = 0; j < C; ++j) {
        const int o = judge_pair(env, x, i, j);
        row += pa[i] * pb[j] * (o > 0 ? 1.0 : o == 0 ? 0.5 : 0.0);
      }
    }
    total += env.prompt_weights()[x] * row;
  }
  return total;
}

// E_{x~rho}[KL(pi*(.|x) || policy(.|x))] with pi* built from ref_policy at beta.
inline double kl_to_pistar(const Environment& env, const TabularPolicy& policy, const TabularPolicy& ref_policy,
                           double beta) {
  return expected_kl(env, optimal_policy(env, ref_policy, beta), policy);
}

struct PromptBreakdown {
  PromptId prompt = 0;
  MatchResult match;
  double kl_to_pistar = 0.0;
  double expected_reward = 0.0;
};

struct EvalReport {
  double winrate = 0.5;
  double wilson_low = 0.0;
  double wilson_high = 1.0;
  MatchResult match;
  double kl_to_pistar = 0.0;
  double expected_reward = 0.0;
  double baseline_expected_reward = 0.0;
  std::vector<PromptBreakdown> per_prompt;
};

struct EvalParams {
  std::size_t n_prompts = 1000;
  std::size_t samples_per_prompt = 1;
  Judge judge = Judge::TrueReward;
  std::uint64_t seed = 0;
  double beta = 1.0;  // temperature of the pi* used for the KL metric
  HeadToHeadOptions options{};
};

// Candidate policy a against baseline b.
inline EvalReport evaluate(const Environment& env, const TabularPolicy& a, const TabularPolicy& b,
                           const TabularPolicy& ref_policy, const EvalParams& params,
                           std::vector<MatchLogEntry>* log = nullptr) {
  std::vector<MatchLogEntry> local;
  auto* sink = log ? log : &local;
  const std::size_t start = sink->size();
  EvalReport r;
  r.match = head_to_head(env, a, b, params.n_prompts, params.samples_per_prompt, params.judge, params.seed,
                         params.options, sink);
  r.winrate = adjusted_winrate(r.match);
  std::tie(r.wilson_low, r.wilson_high) = wilson_interval(r.match);
  const TabularPolicy pistar = optimal_policy(env, ref_policy, params.beta);
  r.kl_to_pistar = expected_kl(env, pistar, a);
  r.expected_reward = expected_reward(env, a);
  r.baseline_expected_reward = expected_reward(env, b);
  for (std::size_t x = 0; x < env.prompt_count(); ++x) {
    PromptBreakdown pb;
    pb.prompt = x;
    pb.kl_to_pistar = row_kl(pistar, a, x);
    for (std::size_t y = 0; y < env.completion_count(); ++y) pb.expected_reward += a.prob(x, y) * env.true_reward(x, y);
    r.per_prompt.push_back(pb);
  }
  for (std::size_t i = start; i < sink->size(); ++i) {
    const auto& e = (*sink)[i];
    auto& m = r.per_prompt[e.prompt].match;
    if (e.outcome > 0) ++m.n_cand;
    else if (e.outcome < 0) ++m.n_base;
    else ++m.n_tie;
  }
  return r;
}

}  // namespace mcpo
