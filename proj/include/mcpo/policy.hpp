#pragma once

// Tabular softmax policies over an enumerated completion table.

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "mcpo/core.hpp"

namespace mcpo {

// One logit per (prompt, completion). The per-row log-normalizer is cached
// and refreshed by every mutating entry point, so logp() is O(1).
class TabularPolicy {
 public:
  TabularPolicy() = default;

  // All-zero logits: the uniform policy.
  TabularPolicy(std::size_t prompt_count, std::size_t completion_count)
      : prompts_(prompt_count),
        completions_(completion_count),
        logits_(prompt_count * completion_count, 0.0),
        log_norm_(prompt_count, 0.0) {
    if (prompt_count == 0 || completion_count == 0) {
      throw Error(ErrorCode::InvalidArgument, "TabularPolicy needs a non-empty shape");
    }
    refresh();
  }

  TabularPolicy(std::size_t prompt_count, std::size_t completion_count,
                std::vector<double> logits)
      : prompts_(prompt_count),
        completions_(completion_count),
        logits_(std::move(logits)),
        log_norm_(prompt_count, 0.0) {
    if (prompt_count == 0 || completion_count == 0) {
      throw Error(ErrorCode::InvalidArgument, "TabularPolicy needs a non-empty shape");
    }
    if (logits_.size() != prompt_count * completion_count) {
      throw Error(ErrorCode::ShapeMismatch, "logit buffer does not match shape");
    }
    refresh();
  }

  // Policy whose rows are the given log-probabilities (any row offset is fine).
  static TabularPolicy from_log_probs(std::size_t prompt_count, std::size_t completion_count,
                                      std::vector<double> log_probs) {
    return TabularPolicy(prompt_count, completion_count, std::move(log_probs));
  }

  std::size_t prompt_count() const { return prompts_; }
  std::size_t completion_count() const { return completions_; }
  std::size_t parameter_count() const { return logits_.size(); }

  std::span<const double> logits() const { return logits_; }
  std::span<const double> logits_row(PromptId x) const {
    check_prompt(x);
    return {logits_.data() + x * completions_, completions_};
  }
  double log_normalizer(PromptId x) const {
    check_prompt(x);
    return log_norm_[x];
  }

  double logp(PromptId x, CompletionId y) const {
    check_prompt(x);
    check_completion(y);
    return logits_[x * completions_ + y] - log_norm_[x];
  }

  double prob(PromptId x, CompletionId y) const { return std::exp(logp(x, y)); }

  std::vector<double> log_probs_row(PromptId x) const {
    std::vector<double> out(completions_);
    for (std::size_t y = 0; y < completions_; ++y) out[y] = logp(x, y);
    return out;
  }

  std::vector<double> probs_row(PromptId x) const {
    std::vector<double> out(completions_);
    for (std::size_t y = 0; y < completions_; ++y) out[y] = std::exp(logp(x, y));
    return out;
  }

  // logits <- logits + scale * delta; the only way parameters change after construction.
  void apply_update(std::span<const double> delta, double scale) {
    if (delta.size() != logits_.size()) {
      throw Error(ErrorCode::ShapeMismatch, "update does not match parameter shape");
    }
    for (std::size_t i = 0; i < logits_.size(); ++i) logits_[i] += scale * delta[i];
    refresh();
  }

  void set_logits(std::vector<double> logits) {
    if (logits.size() != logits_.size()) {
      throw Error(ErrorCode::ShapeMismatch, "logit buffer does not match shape");
    }
    logits_ = std::move(logits);
    refresh();
  }

  bool same_shape(const TabularPolicy& o) const {
    return prompts_ == o.prompts_ && completions_ == o.completions_;
  }

  friend bool operator==(const TabularPolicy& a, const TabularPolicy& b) {
    return a.prompts_ == b.prompts_ && a.completions_ == b.completions_ && a.logits_ == b.logits_;
  }

  void check_prompt(PromptId x) const {
    if (x >= prompts_) {
      throw Error(ErrorCode::IndexOutOfRange, "prompt id " + std::to_string(x));
    }
  }
  void check_completion(CompletionId y) const {
    if (y >= completions_) {
      throw Error(ErrorCode::IndexOutOfRange, "completion id " + std::to_string(y));
    }
  }

 private:
  void refresh() {
    for (std::size_t x = 0; x < prompts_; ++x) {
      log_norm_[x] = log_sum_exp({logits_.data() + x * completions_, completions_});
      if (!std::isfinite(log_norm_[x])) {
        throw Error(ErrorCode::NonFinite, "policy row " + std::to_string(x) + " has no finite mass");
      }
    }
  }

  std::size_t prompts_ = 0;
  std::size_t completions_ = 0;
  std::vector<double> logits_;
  std::vector<double> log_norm_;
};

inline double logp(const TabularPolicy& policy, PromptId x, CompletionId y) {
  return policy.logp(x, y);
}

// d logp(x, y) / d logits = onehot(y) - softmax(logits[x]) on row x, zero elsewhere.
inline GradEstimate grad_logp(const TabularPolicy& policy, PromptId x, CompletionId y) {
  policy.check_prompt(x);
  policy.check_completion(y);
  GradEstimate g(policy.prompt_count(), policy.completion_count());
  auto row = g.row(x);
  for (std::size_t j = 0; j < row.size(); ++j) row[j] = -policy.prob(x, j);
  row[y] += 1.0;
  return g;
}

// Accumulates scale * d logp(x, y) / d logits into g without allocating.
inline void add_grad_logp(const TabularPolicy& policy, PromptId x, CompletionId y, double scale,
                          GradEstimate& g) {
  auto row = g.row(x);
  for (std::size_t j = 0; j < row.size(); ++j) row[j] -= scale * policy.prob(x, j);
  row[y] += scale;
}

// r(x, y) = log target(y|x) - log reference(y|x). Non-owning view; both
// policies must outlive it.
struct ImplicitReward {
  const TabularPolicy& target;
  const TabularPolicy& reference;

  ImplicitReward(const TabularPolicy& t, const TabularPolicy& r) : target(t), reference(r) {
    if (!t.same_shape(r)) throw Error(ErrorCode::ShapeMismatch, "target/reference shapes differ");
  }

  double operator()(PromptId x, CompletionId y) const {
    const double ref = reference.logp(x, y);
    if (ref == kNegInf) {
      throw Error(ErrorCode::UnsupportedPoint,
                  "reference has zero mass at (" + std::to_string(x) + ", " + std::to_string(y) + ")");
    }
    return target.logp(x, y) - ref;
  }
};

inline double implicit_reward(const ImplicitReward& ir, PromptId x, CompletionId y) {
  return ir(x, y);
}

}  // namespace mcpo
