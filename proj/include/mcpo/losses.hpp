#pragma once

// Training objectives over tabular policies. Every loss returns its value and
// its exact gradient with respect to the target policy's logits.

#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mcpo/core.hpp"
#include "mcpo/env.hpp"
#include "mcpo/partition.hpp"
#include "mcpo/policy.hpp"
#include "mcpo/samplers.hpp"

namespace mcpo {

enum class LossName { Mcpo, NllExact, Dpo, Rpo, Exo, Simpo, Cpo, Bco, Kto, Apo, Sppo, Nca };

inline const char* to_string(LossName n) {
  switch (n) {
    case LossName::Mcpo: return "mcpo";
    case LossName::NllExact: return "nll_exact";
    case LossName::Dpo: return "dpo";
    case LossName::Rpo: return "rpo";
    case LossName::Exo: return "exo";
    case LossName::Simpo: return "simpo";
    case LossName::Cpo: return "cpo";
    case LossName::Bco: return "bco";
    case LossName::Kto: return "kto";
    case LossName::Apo: return "apo";
    case LossName::Sppo: return "sppo";
    case LossName::Nca: return "nca";
  }
  return "unknown";
}

inline LossName parse_loss_name(const std::string& s) {
  static const std::map<std::string, LossName> names = {
      {"mcpo", LossName::Mcpo}, {"rnce", LossName::Mcpo},   {"nll_exact", LossName::NllExact},
      {"dpo", LossName::Dpo},   {"rpo", LossName::Rpo},     {"exo", LossName::Exo},
      {"simpo", LossName::Simpo}, {"cpo", LossName::Cpo},   {"bco", LossName::Bco},
      {"kto", LossName::Kto},   {"apo", LossName::Apo},     {"sppo", LossName::Sppo},
      {"nca", LossName::Nca}};
  auto it = names.find(s);
  if (it == names.end()) throw Error(ErrorCode::UnknownLoss, "unknown loss '" + s + "'");
  return it->second;
}

inline const std::vector<LossName>& all_losses() {
  static const std::vector<LossName> v = {LossName::Mcpo, LossName::NllExact, LossName::Dpo, LossName::Rpo,
                                          LossName::Exo,  LossName::Simpo,    LossName::Cpo, LossName::Bco,
                                          LossName::Kto,  LossName::Apo,      LossName::Sppo, LossName::Nca};
  return v;
}

// EXO's logits: the chosen-minus-rejected log-ratio margin (default), or the
// chosen log-ratio alone as the table row literally prints it.
enum class ExoForm { Margin, ChosenOnly };

inline constexpr double kDefaultBeta = 0.01;
inline constexpr double kDefaultLambda = 0.1;
inline constexpr double kDefaultGamma = 10.0;

struct LossSpec {
  LossName name = LossName::Mcpo;
  double beta = kDefaultBeta;
  double lambda = kDefaultLambda;  // rpo, cpo
  double gamma = kDefaultGamma;    // simpo, cpo
  std::size_t M = 1;               // mcpo
  ExoForm exo_form = ExoForm::Margin;
};

inline bool uses_lambda(LossName n) { return n == LossName::Rpo || n == LossName::Cpo; }
inline bool uses_gamma(LossName n) { return n == LossName::Simpo || n == LossName::Cpo; }
inline bool uses_reference_shift(LossName n) { return n == LossName::Bco || n == LossName::Kto; }

struct LossEval {
  double value = 0.0;
  GradEstimate grad;
  std::map<std::string, double> terms;
  std::vector<std::size_t> selected;  // candidate indices chosen as negatives, when applicable
};

namespace detail {

inline LossEval make_eval(const TabularPolicy& pol) {
  LossEval e;
  e.grad = GradEstimate(pol.prompt_count(), pol.completion_count());
  return e;
}

// Pairwise losses are scalar functions f(u0, u1) of per-completion quantities
// whose logit gradient is grad logp_target; d0, d1 are the partials.
struct PairTerms {
  double value;
  double d0;
  double d1;
};

inline LossEval assemble_pair(const TabularPolicy& pol, PromptId x, CompletionId y0, CompletionId y1,
                              const PairTerms& t) {
  LossEval e = make_eval(pol);
  e.value = t.value;
  add_grad_logp(pol, x, y0, t.d0, e.grad);
  add_grad_logp(pol, x, y1, t.d1, e.grad);
  e.terms["d_u0"] = t.d0;
  e.terms["d_u1"] = t.d1;
  return e;
}

}  // namespace detail

// Exact negative log-likelihood of y0 under the energy model:
// -beta * r(x, y0) + log Z(x).
inline LossEval nll_exact(const ProbModel& model, PromptId x, CompletionId y0) {
  const auto& pol = model.target();
  LossEval e = detail::make_eval(pol);
  const double pos = -model.beta * model.ir(x, y0);
  const double log_z = exact_log_Z(model, x);
  e.value = pos + log_z;
  e.grad = exact_grad_log_Z(model, x);
  e.grad.n_samples = 1;
  add_grad_logp(pol, x, y0, -model.beta, e.grad);
  e.terms["positive_term"] = pos;
  e.terms["log_z"] = log_z;
  return e;
}

// Ranking NCE: cross-entropy of picking index 0 under softmax(beta * r) over
// {y0} + negatives, i.e. -beta r(x, y0) + log sum_i exp(beta r(x, y_i)).
inline LossEval rnce_loss(const ImplicitReward& ir, PromptId x, CompletionId y0,
                          std::span<const CompletionId> negatives, double beta) {
  if (negatives.empty()) throw Error(ErrorCode::EmptyNegatives, "rnce_loss needs at least one negative");
  if (!(beta > 0.0)) throw Error(ErrorCode::InvalidArgument, "beta must be positive");
  const auto& pol = ir.target;
  std::vector<double> s;
  s.reserve(negatives.size() + 1);
  s.push_back(beta * ir(x, y0));
  for (auto y : negatives) s.push_back(beta * ir(x, y));
  const double lse = log_sum_exp(s);

  LossEval e = detail::make_eval(pol);
  e.value = -s[0] + lse;
  // d/dtheta = beta * (sum_i w_i grad logp(y_i) - grad logp(y0))
  add_grad_logp(pol, x, y0, beta * (std::exp(s[0] - lse) - 1.0), e.grad);
  for (std::size_t i = 0; i < negatives.size(); ++i) {
    add_grad_logp(pol, x, negatives[i], beta * std::exp(s[i + 1] - lse), e.grad);
  }
  e.terms["positive_term"] = -s[0];
  e.terms["logsumexp_term"] = lse;
  return e;
}

// -log sigmoid(beta r(x, y0) - beta r(x, y1)).
inline LossEval dpo_loss(const ImplicitReward& ir, PromptId x, CompletionId y0, CompletionId y1, double beta) {
  if (!(beta > 0.0)) throw Error(ErrorCode::InvalidArgument, "beta must be positive");
  const double z = beta * (ir(x, y0) - ir(x, y1));
  const double dz = -sigmoid(-z);
  auto e = detail::assemble_pair(ir.target, x, y0, y1, {-log_sigmoid(z), beta * dz, -beta * dz});
  e.terms["margin"] = z;
  return e;
}

// Closed-form DPO gradient: -beta * sigmoid(beta r1 - beta r0) * grad(r0 - r1).
inline GradEstimate dpo_grad_closed_form(const ImplicitReward& ir, PromptId x, CompletionId y0, CompletionId y1,
                                         double beta) {
  const double coeff = -beta * sigmoid(beta * ir(x, y1) - beta * ir(x, y0));
  GradEstimate g = grad_logp(ir.target, x, y0);
  g.axpy(-1.0, grad_logp(ir.target, x, y1));
  g.scale(coeff);
  return g;
}

struct BaselineContext {
  const CompletionTable* completions = nullptr;  // lengths for simpo / cpo
  std::optional<double> reference_shift;          // bco / kto, computed per batch
};

// Pairwise objectives of the baseline zoo; y0 preferred, y1 dispreferred.
inline LossEval baseline_loss(const LossSpec& spec, const ImplicitReward& ir, PromptId x, CompletionId y0,
                              CompletionId y1, const BaselineContext& ctx = {}) {
  const double b = spec.beta;
  if (!(b > 0.0)) throw Error(ErrorCode::InvalidArgument, "beta must be positive");
  const auto& pol = ir.target;
  detail::PairTerms t{};

  switch (spec.name) {
    case LossName::Dpo:
      return dpo_loss(ir, x, y0, y1, b);
    case LossName::Mcpo: {
      const CompletionId neg[] = {y1};
      return rnce_loss(ir, x, y0, neg, b);
    }
    case LossName::NllExact:
      throw Error(ErrorCode::InvalidArgument, "nll_exact needs a probability model; call nll_exact()");
    case LossName::Rpo: {
      const double r0 = ir(x, y0);
      const double z = b * (r0 - ir(x, y1));
      const double dz = -sigmoid(-z);
      t = {-log_sigmoid(z) - spec.lambda * r0, b * dz - spec.lambda, -b * dz};
      break;
    }
    case LossName::Exo: {
      const double r0 = ir(x, y0);
      const double r1 = ir(x, y1);
      const double logits = spec.exo_form == ExoForm::Margin ? r0 - r1 : r0;
      const double z = b * logits;
      const double s = sigmoid(z);
      const double value = -s * log_sigmoid(z) + s * log_sigmoid(-z);
      const double dz = -s - z * s * sigmoid(-z);
      t = {value, b * dz, spec.exo_form == ExoForm::Margin ? -b * dz : 0.0};
      break;
    }
    case LossName::Simpo:
    case LossName::Cpo: {
      if (ctx.completions == nullptr) {
        throw Error(ErrorCode::MissingHyperparameter, "simpo/cpo need completion lengths");
      }
      const double n0 = static_cast<double>(ctx.completions->length(y0));
      const double n1 = static_cast<double>(ctx.completions->length(y1));
      const double lp0 = pol.logp(x, y0);
      const double lp1 = pol.logp(x, y1);
      const double z = b / n0 * lp0 - b / n1 * lp1 - spec.gamma;
      const double dz = -sigmoid(-z);
      t = {-log_sigmoid(z), dz * b / n0, -dz * b / n1};
      if (spec.name == LossName::Cpo) {
        t.value -= spec.lambda * b / n0 * lp0;
        t.d0 -= spec.lambda * b / n0;
      }
      break;
    }
    case LossName::Bco:
    case LossName::Kto: {
      if (!ctx.reference_shift) {
        throw Error(ErrorCode::MissingHyperparameter, "bco/kto need a reference shift");
      }
      const double delta = *ctx.reference_shift;
      const double a0 = b * ir(x, y0) - delta;
      const double a1 = -b * ir(x, y1) - delta;
      t = {-log_sigmoid(a0) - log_sigmoid(a1), -b * sigmoid(-a0), b * sigmoid(-a1)};
      break;
    }
    case LossName::Apo: {
      const double z0 = b * ir(x, y0);
      const double z1 = b * ir(x, y1);
      t = {-log_sigmoid(z0) + log_sigmoid(z1), -b * sigmoid(-z0), b * sigmoid(-z1)};
      break;
    }
    case LossName::Sppo: {
      const double a0 = ir(x, y0) - 0.5 / b;
      const double a1 = ir(x, y1) + 0.5 / b;
      t = {a0 * a0 + a1 * a1, 2.0 * a0, 2.0 * a1};
      break;
    }
    case LossName::Nca: {
      const double z0 = b * ir(x, y0);
      const double z1 = b * ir(x, y1);
      t = {-log_sigmoid(z0) - 0.5 * log_sigmoid(-z0) - 0.5 * log_sigmoid(-z1),
           -b * sigmoid(-z0) + 0.5 * b * sigmoid(z0), 0.5 * b * sigmoid(z1)};
      break;
    }
  }
  return detail::assemble_pair(pol, x, y0, y1, t);
}

// Ranking NCE over negatives chosen by the sampler from cs on the current
// snapshot. Selection is a sampling step: no gradient flows through it.
inline LossEval mcpo_loss(const ImplicitReward& ir, const CandidateSet& cs, const LossSpec& spec,
                          SamplerSpec sampler) {
  sampler.draws = spec.M;
  const Selection sel = select_negatives(ir, cs, sampler);
  LossEval e = rnce_loss(ir, cs.x, cs.preferred, sel.negatives, spec.beta);
  for (std::size_t k = 0; k < sel.indices.size(); ++k) {
    e.terms["selected_" + std::to_string(k)] = static_cast<double>(sel.indices[k]);
  }
  e.selected = sel.indices;
  return e;
}

}  // namespace mcpo
