#pragma once

// Exactly solvable discrete environments: every completion is enumerable, so
// normalizers, optimal policies and objectives are finite sums.

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mcpo/core.hpp"
#include "mcpo/policy.hpp"

namespace mcpo {

using Sequence = std::vector<std::uint32_t>;

// Dense bijection between token sequences and completion ids.
class CompletionTable {
 public:
  CompletionTable() = default;
  explicit CompletionTable(std::vector<Sequence> completions) : completions_(std::move(completions)) {
    for (std::size_t i = 0; i < completions_.size(); ++i) index_.emplace(completions_[i], i);
  }

  std::size_t size() const { return completions_.size(); }
  const Sequence& sequence(CompletionId id) const {
    if (id >= completions_.size()) {
      throw Error(ErrorCode::IndexOutOfRange, "completion id " + std::to_string(id));
    }
    return completions_[id];
  }
  std::size_t length(CompletionId id) const { return sequence(id).size(); }

  CompletionId id(const Sequence& s) const {
    auto it = index_.find(s);
    if (it == index_.end()) throw Error(ErrorCode::IndexOutOfRange, "sequence not in table");
    return it->second;
  }
  bool contains(const Sequence& s) const { return index_.count(s) != 0; }

  const std::vector<Sequence>& completions() const { return completions_; }

 private:
  std::vector<Sequence> completions_;
  std::map<Sequence, CompletionId> index_;
};

// Sum_{t=1..max_length} vocab^t, saturating at SIZE_MAX.
inline std::size_t count_completions(std::size_t vocab_size, std::size_t max_length) {
  std::size_t total = 0, power = 1;
  for (std::size_t t = 0; t < max_length; ++t) {
    if (power > SIZE_MAX / vocab_size) return SIZE_MAX;
    power *= vocab_size;
    if (total > SIZE_MAX - power) return SIZE_MAX;
    total += power;
  }
  return total;
}

namespace detail {
inline void enumerate_prefix(Sequence& prefix, std::size_t vocab, std::size_t max_length,
                             std::vector<Sequence>& out) {
  for (std::uint32_t tok = 0; tok < vocab; ++tok) {
    prefix.push_back(tok);
    out.push_back(prefix);
    if (prefix.size() < max_length) enumerate_prefix(prefix, vocab, max_length, out);
    prefix.pop_back();
  }
}
}  // namespace detail

// All sequences of length 1..max_length in lexicographic order (a prefix
// sorts before its extensions).
inline CompletionTable enumerate_completions(std::size_t vocab_size, std::size_t max_length,
                                             std::size_t cap = kDefaultEnumerationCap) {
  if (vocab_size == 0 || max_length == 0) {
    throw Error(ErrorCode::InvalidArgument, "vocab_size and max_length must be positive");
  }
  double top = std::pow(static_cast<double>(vocab_size), static_cast<double>(max_length));
  if (top > static_cast<double>(cap)) {
    throw Error(ErrorCode::CapExceeded, "vocab_size^max_length = " + std::to_string(top) +
                                            " exceeds enumeration cap " + std::to_string(cap));
  }
  std::vector<Sequence> out;
  out.reserve(count_completions(vocab_size, max_length));
  Sequence prefix;
  detail::enumerate_prefix(prefix, vocab_size, max_length, out);
  return CompletionTable(std::move(out));
}

enum class RewardFamily { RandomNormal, Feature, Prefix };

inline const char* to_string(RewardFamily f) {
  switch (f) {
    case RewardFamily::RandomNormal: return "random_normal";
    case RewardFamily::Feature: return "feature";
    case RewardFamily::Prefix: return "prefix";
  }
  return "unknown";
}

inline RewardFamily parse_reward_family(const std::string& s) {
  if (s == "random_normal") return RewardFamily::RandomNormal;
  if (s == "feature") return RewardFamily::Feature;
  if (s == "prefix") return RewardFamily::Prefix;
  throw Error(ErrorCode::ConfigInvalid, "unknown reward_family '" + s + "'");
}

// Reward parameters. random_normal uses `scale`; feature and prefix use the rest.
// feature: token_weight * count(target token) - length_penalty * |y|, with
//   target token (x + target_offset) mod vocab for prompt x. Order-blind, so
//   a token swap never changes the reward.
// prefix: token_weight * (length of the common prefix with a seeded per-prompt
//   target sequence of length max_length) - length_penalty * |y|. Order
//   matters: swapping two tokens of a good completion usually ruins it.
struct RewardParams {
  double scale = 1.0;
  double token_weight = 1.0;
  double length_penalty = 0.25;
  std::size_t target_offset = 0;
};

struct EnvironmentSpec {
  std::size_t prompt_count = 2;
  std::size_t vocab_size = 2;
  std::size_t max_length = 2;
  RewardFamily reward_family = RewardFamily::RandomNormal;
  RewardParams reward_params{};
  std::vector<double> prompt_weights;  // empty means uniform
  std::uint64_t seed = 0;
  std::size_t enumeration_cap = kDefaultEnumerationCap;
};

// Immutable after construction. The reward table is materialized up front so
// true_reward() is a lookup and repeat calls are bit-identical.
class Environment {
 public:
  explicit Environment(EnvironmentSpec spec)
      : spec_(std::move(spec)),
        table_(enumerate_completions(spec_.vocab_size, spec_.max_length, spec_.enumeration_cap)) {
    if (spec_.prompt_count == 0) throw Error(ErrorCode::InvalidArgument, "prompt_count must be positive");
    if (table_.size() < 2) throw Error(ErrorCode::InvalidArgument, "need at least 2 completions");
    if (spec_.prompt_weights.empty()) {
      spec_.prompt_weights.assign(spec_.prompt_count, 1.0 / static_cast<double>(spec_.prompt_count));
    }
    validate_weights();
    build_rewards();
  }

  // Environment with an explicit reward table (row-major [prompt][completion]).
  Environment(EnvironmentSpec spec, std::vector<double> rewards)
      : spec_(std::move(spec)),
        table_(enumerate_completions(spec_.vocab_size, spec_.max_length, spec_.enumeration_cap)) {
    if (spec_.prompt_weights.empty()) {
      spec_.prompt_weights.assign(spec_.prompt_count, 1.0 / static_cast<double>(spec_.prompt_count));
    }
    validate_weights();
    if (rewards.size() != spec_.prompt_count * table_.size()) {
      throw Error(ErrorCode::ShapeMismatch, "reward table does not match environment shape");
    }
    rewards_ = std::move(rewards);
  }

  const EnvironmentSpec& spec() const { return spec_; }
  const CompletionTable& completions() const { return table_; }
  std::size_t prompt_count() const { return spec_.prompt_count; }
  std::size_t completion_count() const { return table_.size(); }
  std::span<const double> prompt_weights() const { return spec_.prompt_weights; }

  double true_reward(PromptId x, CompletionId y) const {
    if (x >= spec_.prompt_count || y >= table_.size()) {
      throw Error(ErrorCode::IndexOutOfRange, "true_reward index");
    }
    return rewards_[x * table_.size() + y];
  }
  std::span<const double> reward_row(PromptId x) const {
    return {rewards_.data() + x * table_.size(), table_.size()};
  }

  // Uniform reference policy over the completion table.
  TabularPolicy uniform_policy() const { return TabularPolicy(prompt_count(), completion_count()); }

  PromptId sample_prompt(Rng& rng) const { return rng.categorical(spec_.prompt_weights); }

 private:
  void validate_weights() const {
    if (spec_.prompt_weights.size() != spec_.prompt_count) {
      throw Error(ErrorCode::ConfigInvalid, "prompt_weights length must equal prompt_count");
    }
    double sum = 0.0;
    for (double w : spec_.prompt_weights) {
      if (!(w >= 0.0)) throw Error(ErrorCode::ConfigInvalid, "prompt_weights must be nonnegative");
      sum += w;
    }
    if (std::abs(sum - 1.0) > 1e-12) {
      throw Error(ErrorCode::ConfigInvalid, "prompt_weights must sum to 1");
    }
  }

  void build_rewards() {
    const std::size_t n = table_.size();
    rewards_.assign(spec_.prompt_count * n, 0.0);
    const RewardParams& p = spec_.reward_params;
    if (spec_.reward_family == RewardFamily::RandomNormal) {
      Rng rng(derive_seed(spec_.seed, 0x5245574152440000ULL));
      for (double& r : rewards_) r = p.scale * rng.normal();
      return;
    }
    if (spec_.reward_family == RewardFamily::Prefix) {
      Rng rng(derive_seed(spec_.seed, 0x5041545445524eULL));
      for (std::size_t x = 0; x < spec_.prompt_count; ++x) {
        Sequence target(spec_.max_length);
        for (auto& t : target) t = static_cast<std::uint32_t>(rng.below(spec_.vocab_size));
        for (std::size_t y = 0; y < n; ++y) {
          const Sequence& s = table_.sequence(y);
          std::size_t prefix = 0;
          while (prefix < s.size() && s[prefix] == target[prefix]) ++prefix;
          rewards_[x * n + y] =
              p.token_weight * static_cast<double>(prefix) - p.length_penalty * static_cast<double>(s.size());
        }
      }
      return;
    }
    for (std::size_t x = 0; x < spec_.prompt_count; ++x) {
      const auto target = static_cast<std::uint32_t>((x + p.target_offset) % spec_.vocab_size);
      for (std::size_t y = 0; y < n; ++y) {
        const Sequence& s = table_.sequence(y);
        double hits = 0.0;
        for (auto tok : s) hits += (tok == target) ? 1.0 : 0.0;
        rewards_[x * n + y] = p.token_weight * hits - p.length_penalty * static_cast<double>(s.size());
      }
    }
  }

  EnvironmentSpec spec_;
  CompletionTable table_;
  std::vector<double> rewards_;
};

// pi*(y|x) proportional to ref(y|x) * exp(r(x,y) / beta), normalized in log space.
inline TabularPolicy optimal_policy(const Environment& env, const TabularPolicy& ref_policy,
                                    double beta) {
  if (!(beta > 0.0)) throw Error(ErrorCode::InvalidArgument, "beta must be positive");
  if (ref_policy.prompt_count() != env.prompt_count() ||
      ref_policy.completion_count() != env.completion_count()) {
    throw Error(ErrorCode::ShapeMismatch, "reference policy does not match environment");
  }
  const std::size_t n = env.completion_count();
  std::vector<double> logits(env.prompt_count() * n);
  for (std::size_t x = 0; x < env.prompt_count(); ++x) {
    for (std::size_t y = 0; y < n; ++y) {
      const double lr = ref_policy.logp(x, y);
      if (lr == kNegInf) {
        throw Error(ErrorCode::UnsupportedPoint, "reference policy must be strictly positive");
      }
      const double v = lr + env.true_reward(x, y) / beta;
      if (!std::isfinite(v)) throw Error(ErrorCode::NonFinite, "log pi* is not finite");
      logits[x * n + y] = v;
    }
    // Subtract the row normalizer so the stored logits are exact log-probabilities.
    const double lse = log_sum_exp({logits.data() + x * n, n});
    if (!std::isfinite(lse)) throw Error(ErrorCode::NonFinite, "pi* normalizer overflowed");
    for (std::size_t y = 0; y < n; ++y) logits[x * n + y] -= lse;
  }
  return TabularPolicy(env.prompt_count(), n, std::move(logits));
}

// KL(p || q) for one prompt row, by exact summation.
inline double row_kl(const TabularPolicy& p, const TabularPolicy& q, PromptId x) {
  double kl = 0.0;
  for (std::size_t y = 0; y < p.completion_count(); ++y) {
    const double lp = p.logp(x, y);
    if (lp == kNegInf) continue;
    kl += std::exp(lp) * (lp - q.logp(x, y));
  }
  return kl;
}

// E_{x~rho}[KL(p(.|x) || q(.|x))].
inline double expected_kl(const Environment& env, const TabularPolicy& p, const TabularPolicy& q) {
  double acc = 0.0;
  for (std::size_t x = 0; x < env.prompt_count(); ++x) {
    acc += env.prompt_weights()[x] * row_kl(p, q, x);
  }
  return acc;
}

// E_{x~rho, y~policy}[r(x, y)].
inline double expected_reward(const Environment& env, const TabularPolicy& policy) {
  double acc = 0.0;
  for (std::size_t x = 0; x < env.prompt_count(); ++x) {
    double row = 0.0;
    for (std::size_t y = 0; y < env.completion_count(); ++y) {
      row += policy.prob(x, y) * env.true_reward(x, y);
    }
    acc += env.prompt_weights()[x] * row;
  }
  return acc;
}

// E[r] - beta * E_x[KL(policy || ref)], the KL-regularized objective.
inline double rlhf_objective(const Environment& env, const TabularPolicy& policy,
                             const TabularPolicy& ref_policy, double beta) {
  return expected_reward(env, policy) - beta * expected_kl(env, policy, ref_policy);
}

}  // namespace mcpo
