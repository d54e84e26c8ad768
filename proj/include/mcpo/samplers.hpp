#pragma once

// Negative selection over a per-prompt candidate pool: the single-step MC
// kernel and its max / min / random variants.

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include "mcpo/core.hpp"
#include "mcpo/policy.hpp"

namespace mcpo {

struct CandidateSet {
  PromptId x = 0;
  CompletionId preferred = 0;
  std::vector<CompletionId> candidates;
  std::vector<bool> noise_injected;  // empty, or one flag per candidate

  std::size_t size() const { return candidates.size(); }
  bool is_noise(std::size_t i) const { return i < noise_injected.size() && noise_injected[i]; }
};

// `noise` is not a kernel strategy: it always returns the noise-injected
// candidates first and exists to run the forced-noise-negative ablation.
enum class Strategy { Mc, Max, Min, Random, Noise };

inline const char* to_string(Strategy s) {
  switch (s) {
    case Strategy::Mc: return "mc";
    case Strategy::Max: return "max";
    case Strategy::Min: return "min";
    case Strategy::Random: return "random";
    case Strategy::Noise: return "noise";
  }
  return "unknown";
}

inline Strategy parse_strategy(const std::string& s) {
  if (s == "mc") return Strategy::Mc;
  if (s == "max") return Strategy::Max;
  if (s == "min") return Strategy::Min;
  if (s == "random") return Strategy::Random;
  if (s == "noise") return Strategy::Noise;
  throw Error(ErrorCode::ConfigInvalid, "unknown sampler strategy '" + s + "'");
}

struct SamplerSpec {
  Strategy strategy = Strategy::Mc;
  double beta = 0.01;
  std::size_t draws = 1;
  std::uint64_t rng_seed = 0;
};

// beta * r(x, .) over {preferred} + candidates, index 0 = preferred.
inline std::vector<double> kernel_log_weights(const ImplicitReward& ir, const CandidateSet& cs, double beta) {
  if (!(beta > 0.0)) throw Error(ErrorCode::InvalidArgument, "beta must be positive");
  if (cs.candidates.empty()) throw Error(ErrorCode::NotEnoughCandidates, "candidate set is empty");
  std::vector<double> s;
  s.reserve(cs.size() + 1);
  s.push_back(beta * ir(cs.x, cs.preferred));
  for (auto y : cs.candidates) s.push_back(beta * ir(cs.x, y));
  return s;
}

// Softmax of beta * r over {y0} + candidates; length L + 1.
inline std::vector<double> kernel_weights(const ImplicitReward& ir, const CandidateSet& cs, double beta) {
  auto w = kernel_log_weights(ir, cs, beta);
  softmax_inplace(w);
  return w;
}

struct Selection {
  std::vector<std::size_t> indices;     // positions in cs.candidates
  std::vector<CompletionId> negatives;  // cs.candidates[indices[k]]
};

// Picks spec.draws negatives from cs.candidates. The preferred completion is
// never returned: mc renormalizes the kernel weights over the candidate pool
// and draws without replacement; max/min take the top/bottom weights with ties
// resolved by ascending candidate index; random is uniform without replacement.
inline Selection select_negatives(const ImplicitReward& ir, const CandidateSet& cs, const SamplerSpec& spec) {
  const std::size_t L = cs.size();
  if (spec.draws == 0) throw Error(ErrorCode::InvalidArgument, "draws must be at least 1");
  if (L < spec.draws) {
    throw Error(ErrorCode::NotEnoughCandidates,
                "need " + std::to_string(spec.draws) + " candidates, have " + std::to_string(L));
  }
  Selection sel;
  sel.indices.reserve(spec.draws);
  Rng rng(spec.rng_seed);

  switch (spec.strategy) {
    case Strategy::Mc: {
      const auto log_w = kernel_log_weights(ir, cs, spec.beta);
      std::vector<double> pool(log_w.begin() + 1, log_w.end());
      std::vector<double> probs(L);
      for (std::size_t k = 0; k < spec.draws; ++k) {
        probs.assign(pool.begin(), pool.end());
        softmax_inplace(probs);
        const std::size_t pick = rng.categorical(probs);
        sel.indices.push_back(pick);
        pool[pick] = kNegInf;
      }
      break;
    }
    case Strategy::Max:
    case Strategy::Min: {
      const auto log_w = kernel_log_weights(ir, cs, spec.beta);
      std::vector<std::size_t> order(L);
      std::iota(order.begin(), order.end(), std::size_t{0});
      const bool want_max = spec.strategy == Strategy::Max;
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return want_max ? log_w[a + 1] > log_w[b + 1] : log_w[a + 1] < log_w[b + 1];
      });
      sel.indices.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(spec.draws));
      break;
    }
    case Strategy::Random: {
      for (auto y : cs.candidates) (void)ir(cs.x, y);  // support check, same as the kernel paths
      std::vector<std::size_t> order(L);
      std::iota(order.begin(), order.end(), std::size_t{0});
      for (std::size_t k = 0; k < spec.draws; ++k) {
        std::swap(order[k], order[k + rng.below(L - k)]);
      }
      sel.indices.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(spec.draws));
      break;
    }
    case Strategy::Noise: {
      std::vector<std::size_t> order;
      for (std::size_t i = 0; i < L; ++i) {
        if (cs.is_noise(i)) order.push_back(i);
      }
      // Records whose noise swap was degenerate carry no noise candidate; those
      // and any remaining draws fall back to uniform clean candidates.
      std::vector<std::size_t> rest;
      for (std::size_t i = 0; i < L; ++i) {
        if (!cs.is_noise(i)) rest.push_back(i);
      }
      rng.shuffle(rest);
      order.insert(order.end(), rest.begin(), rest.end());
      sel.indices.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(spec.draws));
      break;
    }
  }
  for (auto i : sel.indices) sel.negatives.push_back(cs.candidates[i]);
  return sel;
}

}  // namespace mcpo
