#pragma once

// The energy model p(y|x) = mu(y|x) exp(beta * r(x,y)) / Z(x) built on the
// implicit reward, with its exact normalizer, sampled estimators of log Z and
// its gradient, and a Monte Carlo harness for checking estimator bias.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <string>
#include <thread>
#include <vector>

#include "mcpo/core.hpp"
#include "mcpo/policy.hpp"

namespace mcpo {

enum class ProposalKind { Reference, Uniform, Mixture, FrozenPolicy };

inline const char* to_string(ProposalKind k) {
  switch (k) {
    case ProposalKind::Reference: return "reference";
    case ProposalKind::Uniform: return "uniform";
    case ProposalKind::Mixture: return "mixture";
    case ProposalKind::FrozenPolicy: return "frozen_policy";
  }
  return "unknown";
}

// Sampleable proposal distribution mu. Always stored as a normalized table and
// required to be strictly positive over the full completion table.
class Proposal {
 public:
  static Proposal reference(const TabularPolicy& ref) { return Proposal(ProposalKind::Reference, ref, {}); }
  static Proposal frozen_policy(const TabularPolicy& policy) {
    return Proposal(ProposalKind::FrozenPolicy, policy, {});
  }
  static Proposal uniform(std::size_t prompt_count, std::size_t completion_count) {
    return Proposal(ProposalKind::Uniform, TabularPolicy(prompt_count, completion_count), {});
  }

  // Componentwise mixture sum_k weights[k] * components[k].
  static Proposal mixture(const std::vector<TabularPolicy>& components, std::vector<double> weights) {
    if (components.empty() || components.size() != weights.size()) {
      throw Error(ErrorCode::InvalidArgument, "mixture needs one weight per component");
    }
    double total = 0.0;
    for (double w : weights) {
      if (!(w >= 0.0)) throw Error(ErrorCode::InvalidArgument, "mixture weights must be nonnegative");
      total += w;
    }
    if (std::abs(total - 1.0) > 1e-12) throw Error(ErrorCode::InvalidArgument, "mixture weights must sum to 1");
    const auto& first = components.front();
    const std::size_t P = first.prompt_count(), C = first.completion_count();
    std::vector<double> logp(P * C);
    std::vector<double> terms(components.size());
    for (std::size_t x = 0; x < P; ++x) {
      for (std::size_t y = 0; y < C; ++y) {
        for (std::size_t k = 0; k < components.size(); ++k) {
          if (!components[k].same_shape(first)) throw Error(ErrorCode::ShapeMismatch, "mixture components");
          terms[k] = weights[k] > 0.0 ? std::log(weights[k]) + components[k].logp(x, y) : kNegInf;
        }
        logp[x * C + y] = log_sum_exp(terms);
      }
    }
    return Proposal(ProposalKind::Mixture, TabularPolicy(P, C, std::move(logp)), std::move(weights));
  }

  ProposalKind kind() const { return kind_; }
  const TabularPolicy& distribution() const { return dist_; }
  const std::vector<double>& mixture_weights() const { return mixture_weights_; }

  double logp(PromptId x, CompletionId y) const { return dist_.logp(x, y); }
  std::vector<double> probs_row(PromptId x) const { return dist_.probs_row(x); }

  CompletionId sample(PromptId x, Rng& rng) const { return rng.categorical(dist_.probs_row(x)); }

 private:
  Proposal(ProposalKind kind, TabularPolicy dist, std::vector<double> mixture_weights)
      : kind_(kind), dist_(std::move(dist)), mixture_weights_(std::move(mixture_weights)) {
    for (std::size_t x = 0; x < dist_.prompt_count(); ++x) {
      for (std::size_t y = 0; y < dist_.completion_count(); ++y) {
        if (!std::isfinite(dist_.logp(x, y))) {
          throw Error(ErrorCode::UnsupportedPoint, "proposal must be strictly positive on the support");
        }
      }
    }
  }

  ProposalKind kind_;
  TabularPolicy dist_;
  std::vector<double> mixture_weights_;
};

// Non-owning view tying a proposal to the implicit reward at temperature beta.
struct ProbModel {
  const Proposal& proposal;
  ImplicitReward ir;
  double beta;

  ProbModel(const Proposal& mu, ImplicitReward reward, double b) : proposal(mu), ir(reward), beta(b) {
    if (!(beta > 0.0)) throw Error(ErrorCode::InvalidArgument, "beta must be positive");
    if (!proposal.distribution().same_shape(ir.target)) {
      throw Error(ErrorCode::ShapeMismatch, "proposal does not match policy shape");
    }
  }

  const TabularPolicy& target() const { return ir.target; }

  double log_unnormalized(PromptId x, CompletionId y) const {
    return proposal.logp(x, y) + beta * ir(x, y);
  }

  std::vector<double> log_unnormalized_row(PromptId x) const {
    std::vector<double> out(target().completion_count());
    for (std::size_t y = 0; y < out.size(); ++y) out[y] = log_unnormalized(x, y);
    return out;
  }

  // Exact p(.|x) by enumeration.
  std::vector<double> probs_row(PromptId x) const {
    auto v = log_unnormalized_row(x);
    softmax_inplace(v);
    return v;
  }
};

inline void check_cap(const ProbModel& model, std::size_t cap) {
  if (model.target().completion_count() > cap) {
    throw Error(ErrorCode::CapExceeded, "completion table larger than enumeration cap");
  }
}

inline double exact_log_Z(const ProbModel& model, PromptId x, std::size_t cap = kDefaultCompletionCap) {
  check_cap(model, cap);
  const double v = log_sum_exp(model.log_unnormalized_row(x));
  if (!std::isfinite(v)) throw Error(ErrorCode::NonFinite, "log Z is not finite");
  return v;
}

// d log Z / d logits = beta * (p(.|x) - pi_theta(.|x)) on row x.
inline GradEstimate exact_grad_log_Z(const ProbModel& model, PromptId x,
                                     std::size_t cap = kDefaultCompletionCap) {
  check_cap(model, cap);
  const auto& pol = model.target();
  GradEstimate g(pol.prompt_count(), pol.completion_count());
  const auto p = model.probs_row(x);
  auto row = g.row(x);
  for (std::size_t y = 0; y < row.size(); ++y) row[y] = model.beta * (p[y] - pol.prob(x, y));
  g.n_samples = pol.completion_count();
  return g;
}

// beta * r at y0 followed by each negative.
inline std::vector<double> scaled_rewards(const ProbModel& model, PromptId x, CompletionId y0,
                                          std::span<const CompletionId> negatives) {
  std::vector<double> s;
  s.reserve(negatives.size() + 1);
  s.push_back(model.beta * model.ir(x, y0));
  for (auto y : negatives) s.push_back(model.beta * model.ir(x, y));
  return s;
}

// log( (1/(M+1)) sum_{i=0..M} exp(beta r(x, y_i)) ), y_0 first.
inline double sampled_log_Zhat(const ProbModel& model, PromptId x, CompletionId y0,
                               std::span<const CompletionId> negatives) {
  if (negatives.empty()) throw Error(ErrorCode::EmptyNegatives, "need at least one negative");
  const auto s = scaled_rewards(model, x, y0, negatives);
  return log_sum_exp(s) - std::log(static_cast<double>(s.size()));
}

// Self-normalized importance weights over {y0} + negatives.
inline std::vector<double> cd_weights(const ProbModel& model, PromptId x, CompletionId y0,
                                      std::span<const CompletionId> negatives) {
  if (negatives.empty()) throw Error(ErrorCode::EmptyNegatives, "need at least one negative");
  return softmax(scaled_rewards(model, x, y0, negatives));
}

// sum_i w_i * beta * grad logp_target(x, y_i): the gradient of the sampled
// log-normalizer with the sample set held fixed.
inline GradEstimate cd_grad_log_Z(const ProbModel& model, PromptId x, CompletionId y0,
                                  std::span<const CompletionId> negatives) {
  const auto w = cd_weights(model, x, y0, negatives);
  const auto& pol = model.target();
  GradEstimate g(pol.prompt_count(), pol.completion_count());
  auto row = g.row(x);
  for (std::size_t y = 0; y < row.size(); ++y) row[y] = -model.beta * pol.prob(x, y);
  row[y0] += model.beta * w[0];
  for (std::size_t i = 0; i < negatives.size(); ++i) row[negatives[i]] += model.beta * w[i + 1];
  g.n_samples = negatives.size() + 1;
  return g;
}

// Where the positive y0 is drawn from in the Monte Carlo harness.
enum class PositiveSource { Model, Proposal };

struct ComponentCheck {
  std::size_t index = 0;  // flat parameter index
  double mc_mean = 0.0;
  double exact = 0.0;
  double std_error = 0.0;
  double z_score = 0.0;
};

struct UnbiasednessReport {
  std::uint64_t seed = 0;
  std::size_t M = 0;
  std::size_t n_trials = 0;
  PromptId prompt = 0;
  GradEstimate mc_mean;
  GradEstimate exact;
  double max_z_score = 0.0;
  std::vector<ComponentCheck> per_component;
};

inline constexpr std::size_t kMinUnbiasednessTrials = 10000;

// Draws y0 ~ p (or ~ mu for the bias witness) and M negatives ~ mu i.i.d. per
// trial, averages cd_grad_log_Z over trials and compares componentwise with
// exact_grad_log_Z. Trial t uses the stream derive_seed(seed, t) and partial
// sums are merged in fixed block order, so the result does not depend on the
// number of worker threads.
inline UnbiasednessReport verify_unbiasedness(const ProbModel& model, PromptId x, std::size_t M,
                                              std::size_t n_trials, std::uint64_t rng_seed,
                                              PositiveSource source = PositiveSource::Model,
                                              unsigned workers = 0) {
  if (M == 0) throw Error(ErrorCode::EmptyNegatives, "M must be at least 1");
  if (n_trials < kMinUnbiasednessTrials) {
    throw Error(ErrorCode::InsufficientTrials, "need at least 10^4 trials");
  }
  const auto& pol = model.target();
  pol.check_prompt(x);
  const std::size_t C = pol.completion_count();

  const auto exact = exact_grad_log_Z(model, x, std::max<std::size_t>(C, kDefaultCompletionCap));
  const auto positive_probs = source == PositiveSource::Model ? model.probs_row(x) : model.proposal.probs_row(x);
  const auto proposal_probs = model.proposal.probs_row(x);
  const auto scaled = [&] {
    std::vector<double> s(C);
    for (std::size_t y = 0; y < C; ++y) s[y] = model.beta * model.ir(x, y);
    return s;
  }();

  constexpr std::size_t kBlock = 4096;
  const std::size_t n_blocks = (n_trials + kBlock - 1) / kBlock;
  // Per block: sum and sum of squares of the sampled part sum_i w_i onehot(y_i).
  std::vector<std::vector<double>> block_sum(n_blocks, std::vector<double>(C, 0.0));
  std::vector<std::vector<double>> block_sq(n_blocks, std::vector<double>(C, 0.0));

  auto run_block = [&](std::size_t b) {
    std::vector<CompletionId> ys(M + 1);
    std::vector<double> logits(M + 1);
    std::vector<double> contrib(C, 0.0);
    auto& sum = block_sum[b];
    auto& sq = block_sq[b];
    const std::size_t end = std::min(n_trials, (b + 1) * kBlock);
    for (std::size_t t = b * kBlock; t < end; ++t) {
      Rng rng(derive_seed(rng_seed, t));
      ys[0] = rng.categorical(positive_probs);
      for (std::size_t i = 1; i <= M; ++i) ys[i] = rng.categorical(proposal_probs);
      for (std::size_t i = 0; i <= M; ++i) logits[i] = scaled[ys[i]];
      softmax_inplace(logits);
      for (std::size_t i = 0; i <= M; ++i) contrib[ys[i]] += logits[i];
      for (std::size_t i = 0; i <= M; ++i) {
        const double v = contrib[ys[i]];
        if (v == 0.0) continue;  // already flushed (duplicate id)
        sum[ys[i]] += v;
        sq[ys[i]] += v * v;
        contrib[ys[i]] = 0.0;
      }
    }
  };

  unsigned n_workers = workers ? workers : std::max(1u, std::thread::hardware_concurrency());
  n_workers = static_cast<unsigned>(std::min<std::size_t>(n_workers, n_blocks));
  if (n_workers <= 1) {
    for (std::size_t b = 0; b < n_blocks; ++b) run_block(b);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < n_workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t b = next++; b < n_blocks; b = next++) run_block(b);
      });
    }
    for (auto& th : pool) th.join();
  }

  std::vector<double> sum(C, 0.0), sq(C, 0.0);
  for (std::size_t b = 0; b < n_blocks; ++b) {
    for (std::size_t y = 0; y < C; ++y) {
      sum[y] += block_sum[b][y];
      sq[y] += block_sq[b][y];
    }
  }

  UnbiasednessReport report;
  report.seed = rng_seed;
  report.M = M;
  report.n_trials = n_trials;
  report.prompt = x;
  report.exact = exact;
  report.mc_mean = GradEstimate(pol.prompt_count(), C);
  report.mc_mean.n_samples = n_trials;

  const double n = static_cast<double>(n_trials);
  for (std::size_t y = 0; y < C; ++y) {
    const double mean_part = sum[y] / n;
    const double var_part = std::max(0.0, (sq[y] - n * mean_part * mean_part) / (n - 1.0));
    const double mean = model.beta * (mean_part - pol.prob(x, y));
    const double se = model.beta * std::sqrt(var_part / n);
    report.mc_mean.at(x, y) = mean;
    report.mc_mean.std_error[x * C + y] = se;

    ComponentCheck c;
    c.index = x * C + y;
    c.mc_mean = mean;
    c.exact = exact.at(x, y);
    c.std_error = se;
    const double diff = std::abs(mean - c.exact);
    if (se > 0.0) {
      c.z_score = diff / se;
    } else if (diff <= 1e-12 * std::max(1.0, std::abs(c.exact))) {
      c.z_score = 0.0;
    } else {
      throw Error(ErrorCode::InsufficientTrials,
                  "zero standard error with disagreement at component " + std::to_string(c.index));
    }
    report.max_z_score = std::max(report.max_z_score, c.z_score);
    report.per_component.push_back(c);
  }
  return report;
}

}  // namespace mcpo
