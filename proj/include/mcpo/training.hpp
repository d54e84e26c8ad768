#pragma once

// Preference data generation and the offline / batched-online trainers.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "mcpo/core.hpp"
#include "mcpo/env.hpp"
#include "mcpo/eval.hpp"
#include "mcpo/losses.hpp"
#include "mcpo/partition.hpp"
#include "mcpo/policy.hpp"
#include "mcpo/samplers.hpp"

namespace mcpo {

struct RankedCandidate {
  CompletionId y = 0;
  std::size_t rank = 1;
  std::string source = "proposal";
  bool noise = false;
};

struct PreferenceRecord {
  PromptId x = 0;
  std::vector<RankedCandidate> candidates;
  std::size_t preferred_index = 0;
  bool degenerate_noise = false;

  CompletionId preferred() const { return candidates.at(preferred_index).y; }

  // Everything except the preferred entry, in stored order.
  CandidateSet candidate_set() const {
    CandidateSet cs;
    cs.x = x;
    cs.preferred = preferred();
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      if (i == preferred_index) continue;
      cs.candidates.push_back(candidates[i].y);
      cs.noise_injected.push_back(candidates[i].noise);
    }
    return cs;
  }
};

struct NoiseConfig {
  bool enabled = false;
  std::size_t swap_count = 1;
};

namespace detail {

// k distinct indices drawn sequentially in proportion to probs.
inline std::vector<std::size_t> draw_distinct(std::vector<double> probs, std::size_t k, Rng& rng) {
  std::vector<std::size_t> out;
  out.reserve(k);
  for (std::size_t n = 0; n < k; ++n) {
    double total = 0.0;
    for (double p : probs) total += p;
    if (!(total > 0.0)) throw Error(ErrorCode::InsufficientSupport, "not enough distinct completions with mass");
    const double u = rng.uniform() * total;
    double acc = 0.0;
    std::size_t pick = probs.size();
    for (std::size_t i = 0; i < probs.size(); ++i) {
      if (probs[i] <= 0.0) continue;
      acc += probs[i];
      pick = i;
      if (u < acc) break;
    }
    out.push_back(pick);
    probs[pick] = 0.0;
  }
  return out;
}

// Orders draws by true reward (descending, stable) and assigns ranks 1..n.
inline std::vector<RankedCandidate> rank_by_reward(const Environment& env, PromptId x,
                                                   const std::vector<std::size_t>& draws, const std::string& source) {
  std::vector<std::size_t> order = draws;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return env.true_reward(x, a) > env.true_reward(x, b); });
  std::vector<RankedCandidate> out;
  for (std::size_t i = 0; i < order.size(); ++i) out.push_back({order[i], i + 1, source, false});
  return out;
}

// Noise candidate: the preferred sequence with swap_count pairs of distinct
// tokens exchanged. Returns nullopt when every token is identical.
inline std::optional<CompletionId> swapped_variant(const CompletionTable& table, CompletionId y, std::size_t swap_count,
                                                   Rng& rng) {
  const Sequence& s = table.sequence(y);
  const bool varied = s.size() >= 2 && std::any_of(s.begin(), s.end(), [&](auto t) { return t != s.front(); });
  if (!varied) return std::nullopt;
  Sequence t = s;
  do {
    t = s;
    for (std::size_t k = 0; k < std::max<std::size_t>(1, swap_count); ++k) {
      std::size_t i, j;
      do {
        i = rng.below(t.size());
        j = rng.below(t.size());
      } while (i == j || t[i] == t[j]);
      std::swap(t[i], t[j]);
    }
  } while (t == s);
  return table.id(t);
}

}  // namespace detail

// Nectar-style ranked data: per record a prompt x ~ rho, L + 1 distinct
// proposal draws ranked by true reward (rank 1 preferred) and, optionally,
// one appended noise candidate derived from the preferred sequence.
inline std::vector<PreferenceRecord> generate_dataset(const Environment& env, const Proposal& proposal, std::size_t L,
                                                      std::size_t n_records, NoiseConfig noise, std::uint64_t seed) {
  if (L == 0) throw Error(ErrorCode::InvalidArgument, "L must be at least 1");
  if (L + 1 > env.completion_count()) {
    throw Error(ErrorCode::InsufficientSupport, "L + 1 exceeds the number of completions");
  }
  if (noise.enabled && env.spec().max_length < 2) {
    throw Error(ErrorCode::InsufficientSupport, "noise injection needs max_length >= 2");
  }
  std::vector<PreferenceRecord> out;
  out.reserve(n_records);
  for (std::size_t i = 0; i < n_records; ++i) {
    Rng rng(derive_seed(seed, i));
    PreferenceRecord rec;
    rec.x = env.sample_prompt(rng);
    const auto draws = detail::draw_distinct(proposal.probs_row(rec.x), L + 1, rng);
    rec.candidates = detail::rank_by_reward(env, rec.x, draws, "proposal");
    rec.preferred_index = 0;
    if (noise.enabled) {
      const CompletionId y0 = rec.preferred();
      const auto variant = detail::swapped_variant(env.completions(), y0, noise.swap_count, rng);
      rec.degenerate_noise = !variant.has_value();
      if (variant) rec.candidates.push_back({*variant, L + 2, "noise", true});
    }
    out.push_back(std::move(rec));
  }
  return out;
}

// Batched-online data: L + 1 distinct completions drawn from the policy, the
// judge picks the preferred one, the rest are ranked by true reward.
inline std::vector<PreferenceRecord> generate_online_dataset(const Environment& env, const TabularPolicy& policy,
                                                             std::size_t L, std::size_t n_records, Judge judge,
                                                             std::uint64_t seed) {
  if (L == 0) throw Error(ErrorCode::InvalidArgument, "L must be at least 1");
  if (L + 1 > env.completion_count()) {
    throw Error(ErrorCode::InsufficientSupport, "L + 1 exceeds the number of completions");
  }
  std::vector<PreferenceRecord> out;
  out.reserve(n_records);
  for (std::size_t i = 0; i < n_records; ++i) {
    Rng rng(derive_seed(seed, i));
    PreferenceRecord rec;
    rec.x = env.sample_prompt(rng);
    const auto draws = detail::draw_distinct(policy.probs_row(rec.x), L + 1, rng);
    std::size_t best = 0;
    if (judge == Judge::Pairwise) {
      // Sequential champion: L comparisons find the best under a transitive judge.
      for (std::size_t k = 1; k < draws.size(); ++k) {
        if (judge_pair(env, rec.x, draws[k], draws[best]) > 0) best = k;
      }
    } else {
      for (std::size_t k = 1; k < draws.size(); ++k) {
        if (env.true_reward(rec.x, draws[k]) > env.true_reward(rec.x, draws[best])) best = k;
      }
    }
    std::vector<std::size_t> rest;
    for (std::size_t k = 0; k < draws.size(); ++k) {
      if (k != best) rest.push_back(draws[k]);
    }
    rec.candidates.push_back({draws[best], 1, "policy", false});
    for (auto& c : detail::rank_by_reward(env, rec.x, rest, "policy")) {
      c.rank += 1;
      rec.candidates.push_back(c);
    }
    out.push_back(std::move(rec));
  }
  return out;
}

// Seed of the data regenerated at the start of online segment `segment`.
inline std::uint64_t online_segment_seed(std::uint64_t seed, std::size_t segment) {
  return derive_seed(seed, 0x4f4e4c494e45ULL, segment);
}

enum class KernelRefresh { PerStep, PerEpoch };

struct TrainConfig {
  LossSpec loss{};
  SamplerSpec sampler{};
  double lr = 0.1;
  std::size_t steps = 0;  // 0: epochs * batches per epoch
  std::size_t batch_size = 128;
  std::size_t epochs = 2;
  bool online = false;
  std::size_t online_segments = 3;
  std::size_t online_records = 256;
  std::size_t online_candidates = 4;  // L for regenerated data
  Judge judge = Judge::TrueReward;
  std::uint64_t seed = 0;
  KernelRefresh kernel_refresh = KernelRefresh::PerStep;
  double eval_beta = 0.0;  // temperature of pi* for trace metrics; 0 means loss.beta
  double max_grad_norm = 1e6;
  // nll_exact only: replace dataset records by the exact expectation over
  // x ~ rho, y ~ pi* (no sampling at all).
  bool exact_expectation = false;
};

struct TraceRow {
  std::size_t step = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
  double exact_nll = 0.0;
  double kl_to_pistar = 0.0;
  double expected_reward = 0.0;
};

struct EpochStats {
  std::size_t epoch = 0;
  std::size_t noise_selected = 0;      // negatives that were noise-injected
  std::size_t noise_opportunities = 0; // negatives drawn from pools containing a noise candidate
  double uniform_rate = 0.0;           // mean draws / pool size over those pools

  double noise_rate() const {
    return noise_opportunities ? static_cast<double>(noise_selected) / static_cast<double>(noise_opportunities) : 0.0;
  }
};

struct TrainTrace {
  std::vector<TraceRow> rows;
  std::vector<EpochStats> epochs;
  std::vector<std::string> warnings;
};

class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, TrainTrace partial)
      : Error(ErrorCode::DivergenceDetected, what), partial_(std::move(partial)) {}
  const TrainTrace& partial_trace() const { return partial_; }

 private:
  TrainTrace partial_;
};

// logits <- logits - lr * grad
inline void sgd_step(TabularPolicy& policy, const GradEstimate& grad, double lr) {
  if (grad.rows != policy.prompt_count() || grad.cols != policy.completion_count()) {
    throw Error(ErrorCode::ShapeMismatch, "gradient does not match policy shape");
  }
  policy.apply_update(grad.values, -lr);
}

// E_{x~rho, y~pi*}[-beta r(x,y) + log Z(x)] by exact summation.
inline double expected_exact_nll(const Environment& env, const ProbModel& model, const TabularPolicy& pistar) {
  double acc = 0.0;
  for (std::size_t x = 0; x < env.prompt_count(); ++x) {
    double row = exact_log_Z(model, x);
    for (std::size_t y = 0; y < env.completion_count(); ++y) {
      row -= pistar.prob(x, y) * model.beta * model.ir(x, y);
    }
    acc += env.prompt_weights()[x] * row;
  }
  return acc;
}

namespace detail {

struct TrainState {
  const Environment& env;
  const TabularPolicy& ref;
  const Proposal& proposal;
  const TrainConfig& cfg;
  TabularPolicy pistar;
  TabularPolicy policy;
  TabularPolicy kernel_snapshot;
  std::size_t step = 0;
  TrainTrace trace;
};

inline double eval_beta(const TrainConfig& cfg) { return cfg.eval_beta > 0.0 ? cfg.eval_beta : cfg.loss.beta; }

inline std::size_t effective_batch(const TrainConfig& cfg, std::size_t n, TrainTrace& trace) {
  if (cfg.batch_size == 0) throw Error(ErrorCode::ConfigInvalid, "batch_size must be positive");
  if (cfg.batch_size > n) {
    trace.warnings.push_back("batch_size " + std::to_string(cfg.batch_size) + " reduced to dataset size " +
                             std::to_string(n));
    return n;
  }
  return cfg.batch_size;
}

inline bool pairwise_loss(LossName n) { return n != LossName::Mcpo && n != LossName::NllExact; }

// Runs n_steps gradient steps over `data`, continuing the global step count.
inline void run_steps(TrainState& st, const std::vector<PreferenceRecord>& data, std::size_t n_steps,
                      std::uint64_t stream) {
  if (n_steps == 0) return;
  if (data.empty()) throw Error(ErrorCode::InvalidArgument, "dataset is empty");
  const auto& cfg = st.cfg;
  const std::size_t n = data.size();
  const std::size_t bs = effective_batch(cfg, n, st.trace);
  const std::size_t batches_per_epoch = (n + bs - 1) / bs;
  const double beta = cfg.loss.beta;
  const double kernel_beta = cfg.sampler.beta > 0.0 ? cfg.sampler.beta : beta;
  const std::size_t draws = cfg.loss.name == LossName::Mcpo ? cfg.loss.M : 1;

  std::vector<std::size_t> perm(n);
  std::size_t epoch = static_cast<std::size_t>(-1);
  EpochStats* stats = nullptr;

  for (std::size_t local = 0; local < n_steps; ++local) {
    const std::size_t e = local / batches_per_epoch;
    const std::size_t b = local % batches_per_epoch;
    if (e != epoch) {
      epoch = e;
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      Rng shuffle_rng(derive_seed(cfg.seed, stream, 0x45504f4348ULL + e));
      shuffle_rng.shuffle(perm);
      if (cfg.kernel_refresh == KernelRefresh::PerEpoch) st.kernel_snapshot = st.policy;
      st.trace.epochs.push_back({st.trace.epochs.size(), 0, 0, 0.0});
      stats = &st.trace.epochs.back();
    }
    ++st.step;
    const std::size_t lo = b * bs;
    const std::size_t hi = std::min(n, lo + bs);

    const ImplicitReward ir(st.policy, st.ref);
    const ImplicitReward kernel_ir(cfg.kernel_refresh == KernelRefresh::PerEpoch ? st.kernel_snapshot : st.policy,
                                   st.ref);
    const ProbModel model(st.proposal, ir, beta);

    // Negative selection first; the batch reference shift depends on it.
    std::vector<CandidateSet> sets;
    std::vector<Selection> picks;
    for (std::size_t k = lo; k < hi; ++k) {
      const auto& rec = data[perm[k]];
      sets.push_back(rec.candidate_set());
      if (cfg.loss.name == LossName::NllExact) {
        picks.emplace_back();
        continue;
      }
      SamplerSpec s = cfg.sampler;
      s.beta = kernel_beta;
      s.draws = draws;
      s.rng_seed = derive_seed(cfg.seed, st.step, k - lo);
      picks.push_back(select_negatives(kernel_ir, sets.back(), s));
      const auto& cs = sets.back();
      bool has_noise = false;
      std::size_t noise_hits = 0;
      for (std::size_t i = 0; i < cs.size(); ++i) has_noise = has_noise || cs.is_noise(i);
      for (auto i : picks.back().indices) noise_hits += cs.is_noise(i) ? 1 : 0;
      if (has_noise) {
        const double rate = static_cast<double>(draws) / static_cast<double>(cs.size());
        stats->uniform_rate = (stats->uniform_rate * static_cast<double>(stats->noise_opportunities) +
                               rate * static_cast<double>(draws)) /
                              static_cast<double>(stats->noise_opportunities + draws);
        stats->noise_opportunities += draws;
        stats->noise_selected += noise_hits;
      }
    }

    BaselineContext ctx;
    ctx.completions = &st.env.completions();
    if (uses_reference_shift(cfg.loss.name)) {
      double acc = 0.0;
      std::size_t cnt = 0;
      for (std::size_t k = 0; k < sets.size(); ++k) {
        acc += beta * ir(sets[k].x, sets[k].preferred);
        acc += beta * ir(sets[k].x, picks[k].negatives.at(0));
        cnt += 2;
      }
      ctx.reference_shift = acc / static_cast<double>(cnt);
    }

    GradEstimate grad(st.policy.prompt_count(), st.policy.completion_count());
    double loss = 0.0;
    const double w = 1.0 / static_cast<double>(sets.size());
    for (std::size_t k = 0; k < sets.size(); ++k) {
      const auto& cs = sets[k];
      LossEval ev;
      if (cfg.loss.name == LossName::NllExact) {
        ev = nll_exact(model, cs.x, cs.preferred);
      } else if (cfg.loss.name == LossName::Mcpo) {
        ev = rnce_loss(ir, cs.x, cs.preferred, picks[k].negatives, beta);
      } else {
        ev = baseline_loss(cfg.loss, ir, cs.x, cs.preferred, picks[k].negatives.at(0), ctx);
      }
      loss += w * ev.value;
      grad.axpy(w, ev.grad);
    }
    const double gnorm = grad.norm();
    if (!std::isfinite(loss) || !std::isfinite(gnorm) || gnorm > cfg.max_grad_norm) {
      throw DivergenceError("step " + std::to_string(st.step) + ": loss=" + std::to_string(loss) +
                                " grad_norm=" + std::to_string(gnorm),
                            st.trace);
    }
    sgd_step(st.policy, grad, cfg.lr);

    TraceRow row;
    row.step = st.step;
    row.loss = loss;
    row.grad_norm = gnorm;
    const ImplicitReward after(st.policy, st.ref);
    row.exact_nll = expected_exact_nll(st.env, ProbModel(st.proposal, after, beta), st.pistar);
    row.kl_to_pistar = expected_kl(st.env, st.pistar, st.policy);
    row.expected_reward = expected_reward(st.env, st.policy);
    st.trace.rows.push_back(row);
  }
}

inline std::size_t total_steps(const TrainConfig& cfg, std::size_t n_records) {
  if (cfg.steps > 0) return cfg.steps;
  const std::size_t bs = std::max<std::size_t>(1, std::min(cfg.batch_size, n_records));
  return cfg.epochs * ((n_records + bs - 1) / bs);
}

}  // namespace detail

struct TrainResult {
  TabularPolicy policy;
  TrainTrace trace;
};

// Offline trainer: starts from the reference policy and takes gradient steps on
// batches of the fixed dataset, reselecting negatives on the live policy each
// step (or on a per-epoch snapshot when kernel_refresh = PerEpoch).
inline TrainResult train_offline(const Environment& env, const TabularPolicy& ref_policy,
                                 const std::vector<PreferenceRecord>& dataset, const TrainConfig& cfg,
                                 const Proposal* proposal = nullptr) {
  if (cfg.online) throw Error(ErrorCode::ConfigInvalid, "train_offline called with online = true");
  if (dataset.empty()) throw Error(ErrorCode::InvalidArgument, "dataset is empty");
  const Proposal fallback = Proposal::reference(ref_policy);
  const Proposal& mu = proposal ? *proposal : fallback;
  detail::TrainState st{env, ref_policy, mu, cfg, optimal_policy(env, ref_policy, detail::eval_beta(cfg)),
                        ref_policy, ref_policy, 0, {}};
  detail::run_steps(st, dataset, detail::total_steps(cfg, dataset.size()), 0);
  return {std::move(st.policy), std::move(st.trace)};
}

// Deterministic descent on E_{x~rho, y~pi*}[L^NLL(x, y)] with pi* at eval
// temperature; every gradient is an exact sum over the completion table.
inline TrainResult train_exact_nll(const Environment& env, const TabularPolicy& ref_policy, const TrainConfig& cfg,
                                   const Proposal* proposal = nullptr) {
  if (cfg.loss.name != LossName::NllExact) throw Error(ErrorCode::ConfigInvalid, "exact expectation needs nll_exact");
  const Proposal fallback = Proposal::reference(ref_policy);
  const Proposal& mu = proposal ? *proposal : fallback;
  detail::TrainState st{env, ref_policy, mu, cfg, optimal_policy(env, ref_policy, detail::eval_beta(cfg)),
                        ref_policy, ref_policy, 0, {}};
  const double beta = cfg.loss.beta;
  for (std::size_t t = 0; t < cfg.steps; ++t) {
    ++st.step;
    const ImplicitReward ir(st.policy, st.ref);
    const ProbModel model(mu, ir, beta);
    GradEstimate grad(st.policy.prompt_count(), st.policy.completion_count());
    double loss = 0.0;
    for (std::size_t x = 0; x < env.prompt_count(); ++x) {
      const double rho = env.prompt_weights()[x];
      if (rho == 0.0) continue;
      for (std::size_t y = 0; y < env.completion_count(); ++y) {
        const double w = rho * st.pistar.prob(x, y);
        if (w == 0.0) continue;
        const LossEval ev = nll_exact(model, x, y);
        loss += w * ev.value;
        grad.axpy(w, ev.grad);
      }
    }
    const double gnorm = grad.norm();
    if (!std::isfinite(loss) || !std::isfinite(gnorm) || gnorm > cfg.max_grad_norm) {
      throw DivergenceError("step " + std::to_string(st.step) + ": loss=" + std::to_string(loss), st.trace);
    }
    sgd_step(st.policy, grad, cfg.lr);
    TraceRow row;
    row.step = st.step;
    row.loss = loss;
    row.grad_norm = gnorm;
    row.exact_nll = expected_exact_nll(env, ProbModel(mu, ImplicitReward(st.policy, st.ref), beta), st.pistar);
    row.kl_to_pistar = expected_kl(env, st.pistar, st.policy);
    row.expected_reward = expected_reward(env, st.policy);
    st.trace.rows.push_back(row);
  }
  return {std::move(st.policy), std::move(st.trace)};
}

// Batched-online trainer: total steps split into equal segments; each segment
// regenerates its data from the current policy before training on it.
inline TrainResult train_online(const Environment& env, const TabularPolicy& ref_policy, const TrainConfig& cfg,
                                const Proposal* proposal = nullptr) {
  if (!cfg.online) throw Error(ErrorCode::ConfigInvalid, "train_online called with online = false");
  if (cfg.online_segments == 0) throw Error(ErrorCode::ConfigInvalid, "online_segments must be at least 1");
  const Proposal fallback = Proposal::reference(ref_policy);
  const Proposal& mu = proposal ? *proposal : fallback;
  detail::TrainState st{env, ref_policy, mu, cfg, optimal_policy(env, ref_policy, detail::eval_beta(cfg)),
                        ref_policy, ref_policy, 0, {}};
  const std::size_t total = detail::total_steps(cfg, cfg.online_records);
  for (std::size_t seg = 0; seg < cfg.online_segments; ++seg) {
    const std::size_t begin = total * seg / cfg.online_segments;
    const std::size_t end = total * (seg + 1) / cfg.online_segments;
    const auto data = generate_online_dataset(env, st.policy, cfg.online_candidates, cfg.online_records, cfg.judge,
                                              online_segment_seed(cfg.seed, seg));
    detail::run_steps(st, data, end - begin, seg);
  }
  return {std::move(st.policy), std::move(st.trace)};
}

}  // namespace mcpo
