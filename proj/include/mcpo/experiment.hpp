#pragma once

// Experiment configuration, the standard fixture, the verification suite, the
// ablation grid and the command entry points used by the CLI.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <boost/math/distributions/chi_squared.hpp>

#include "mcpo/core.hpp"
#include "mcpo/env.hpp"
#include "mcpo/eval.hpp"
#include "mcpo/io.hpp"
#include "mcpo/losses.hpp"
#include "mcpo/partition.hpp"
#include "mcpo/policy.hpp"
#include "mcpo/samplers.hpp"
#include "mcpo/training.hpp"

namespace mcpo {

// ---- configuration ---------------------------------------------------------

struct ProposalConfig {
  ProposalKind kind = ProposalKind::Reference;
  std::vector<double> mixture_weights{0.5, 0.5};  // over {reference, uniform}
  std::string checkpoint;                         // frozen_policy source
};

struct DatasetConfig {
  std::size_t L = 4;
  std::size_t n_records = 256;
  NoiseConfig noise{};
  std::uint64_t seed = 0;
};

struct VerifyConfig {
  std::uint64_t seed = 0;
  std::size_t instances = 100;         // per loss, finite-difference checks
  std::size_t identity_instances = 1000;
  std::size_t trials = 200000;         // unbiasedness harness
  std::size_t M = 2;
  std::size_t kernel_draws = 100000;   // per chi-square fixture
  double fd_tolerance = 1e-5;
  double identity_tolerance = 1e-9;
  double reduction_tolerance = 1e-12;
  double z_threshold = 4.0;
  double bias_threshold = 6.0;
  double chi2_alpha = 1e-3;
  unsigned workers = 0;
  bool corrupt_gradient = false;  // fault injection: scales analytic gradients
};

struct AblateConfig {
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::vector<std::size_t> multi_M{1, 3};
};

struct ExperimentConfig {
  EnvironmentSpec env{};
  ProposalConfig proposal{};
  DatasetConfig dataset{};
  TrainConfig train{};
  EvalParams eval{};
  VerifyConfig verify{};
  AblateConfig ablate{};
  std::string output_dir = "runs/default";
  std::string dataset_path;  // empty: <output_dir>/dataset.jsonl
  std::vector<std::string> warnings;
};

// Environment and training setup on which the trend checks are run: a
// prefix-match reward over 39 completions, 13-way ranked candidate sets, and
// pi* taken at a lower temperature than the loss so that it is peaked.
inline ExperimentConfig standard_fixture() {
  ExperimentConfig c;
  c.env.prompt_count = 4;
  c.env.vocab_size = 3;
  c.env.max_length = 3;
  c.env.reward_family = RewardFamily::Prefix;
  c.env.seed = 7;
  c.dataset.L = 12;
  c.dataset.n_records = 512;
  c.dataset.seed = 1;
  c.train.loss.name = LossName::Mcpo;
  c.train.loss.beta = 1.0;
  c.train.loss.M = 1;
  c.train.sampler.strategy = Strategy::Mc;
  c.train.sampler.beta = 1.0;
  c.train.lr = 1.0;
  c.train.steps = 200;
  c.train.batch_size = 64;
  c.train.eval_beta = 0.1;
  c.train.online_segments = 3;
  c.train.online_records = 512;
  c.train.online_candidates = 12;
  c.train.seed = 1;
  c.eval.n_prompts = 1000;
  c.eval.seed = 1;
  c.eval.beta = 0.1;
  c.output_dir = "runs/standard";
  return c;
}

inline Json to_json(const ProposalConfig& p) {
  Json j{{"kind", to_string(p.kind)}};
  if (p.kind == ProposalKind::Mixture) j["mixture_weights"] = p.mixture_weights;
  if (p.kind == ProposalKind::FrozenPolicy) j["checkpoint"] = p.checkpoint;
  return j;
}

inline ProposalConfig proposal_config_from_json(const Json& j) {
  const std::string w = "proposal";
  detail::allow_keys(j, {"kind", "mixture_weights", "checkpoint"}, w);
  ProposalConfig p;
  const auto kind = detail::get_or<std::string>(j, "kind", "reference", w);
  if (kind == "reference") p.kind = ProposalKind::Reference;
  else if (kind == "uniform") p.kind = ProposalKind::Uniform;
  else if (kind == "mixture") p.kind = ProposalKind::Mixture;
  else if (kind == "frozen_policy") p.kind = ProposalKind::FrozenPolicy;
  else throw Error(ErrorCode::ConfigInvalid, "proposal.kind '" + kind + "' is not recognized");
  p.mixture_weights = detail::get_or(j, "mixture_weights", p.mixture_weights, w);
  p.checkpoint = detail::get_or<std::string>(j, "checkpoint", "", w);
  if (p.kind == ProposalKind::Mixture && p.mixture_weights.size() != 2) {
    throw Error(ErrorCode::ConfigInvalid, "proposal.mixture_weights needs 2 entries (reference, uniform)");
  }
  if (p.kind == ProposalKind::FrozenPolicy && p.checkpoint.empty()) {
    throw Error(ErrorCode::ConfigInvalid, "proposal.checkpoint is required for frozen_policy");
  }
  return p;
}

inline Json to_json(const DatasetConfig& d) {
  return {{"L", d.L},
          {"n_records", d.n_records},
          {"noise", {{"enabled", d.noise.enabled}, {"swap_count", d.noise.swap_count}}},
          {"seed", d.seed}};
}

inline DatasetConfig dataset_config_from_json(const Json& j) {
  const std::string w = "dataset";
  detail::allow_keys(j, {"L", "n_records", "noise", "seed"}, w);
  DatasetConfig d;
  d.L = detail::get_count(j, "L", d.L, w);
  if (d.L == 0) throw Error(ErrorCode::ConfigInvalid, "dataset.L must be at least 1");
  d.n_records = detail::get_count(j, "n_records", d.n_records, w);
  if (j.contains("noise")) {
    const auto& n = j.at("noise");
    detail::allow_keys(n, {"enabled", "swap_count"}, w + ".noise");
    d.noise.enabled = detail::get_or(n, "enabled", false, w + ".noise");
    d.noise.swap_count = detail::get_count(n, "swap_count", 1, w + ".noise");
    if (d.noise.swap_count == 0) throw Error(ErrorCode::ConfigInvalid, "dataset.noise.swap_count must be >= 1");
  }
  d.seed = detail::get_or<std::uint64_t>(j, "seed", 0, w);
  return d;
}

inline Json to_json(const EvalParams& e) {
  return {{"n_prompts", e.n_prompts},
          {"samples_per_prompt", e.samples_per_prompt},
          {"judge", to_string(e.judge)},
          {"seed", e.seed},
          {"beta", e.beta},
          {"shared_draws", e.options.shared_draws}};
}

inline EvalParams eval_params_from_json(const Json& j) {
  const std::string w = "eval";
  detail::allow_keys(j, {"n_prompts", "samples_per_prompt", "judge", "seed", "beta", "shared_draws"}, w);
  EvalParams e;
  e.n_prompts = detail::get_count(j, "n_prompts", e.n_prompts, w);
  e.samples_per_prompt = detail::get_count(j, "samples_per_prompt", e.samples_per_prompt, w);
  if (e.n_prompts == 0 || e.samples_per_prompt == 0) {
    throw Error(ErrorCode::ConfigInvalid, "eval needs at least one prompt and one sample");
  }
  e.judge = parse_judge(detail::get_or<std::string>(j, "judge", "true_reward", w));
  e.seed = detail::get_or<std::uint64_t>(j, "seed", 0, w);
  e.beta = detail::get_or(j, "beta", e.beta, w);
  if (!(e.beta > 0.0)) throw Error(ErrorCode::ConfigInvalid, "eval.beta must be positive");
  e.options.shared_draws = detail::get_or(j, "shared_draws", false, w);
  return e;
}

inline Json to_json(const VerifyConfig& v) {
  return {{"seed", v.seed},
          {"instances", v.instances},
          {"identity_instances", v.identity_instances},
          {"trials", v.trials},
          {"M", v.M},
          {"kernel_draws", v.kernel_draws},
          {"workers", v.workers}};
}

inline VerifyConfig verify_config_from_json(const Json& j) {
  const std::string w = "verify";
  detail::allow_keys(j, {"seed", "instances", "identity_instances", "trials", "M", "kernel_draws", "workers"}, w);
  VerifyConfig v;
  v.seed = detail::get_or<std::uint64_t>(j, "seed", 0, w);
  v.instances = detail::get_count(j, "instances", v.instances, w);
  v.identity_instances = detail::get_count(j, "identity_instances", v.identity_instances, w);
  v.trials = detail::get_count(j, "trials", v.trials, w);
  v.M = detail::get_count(j, "M", v.M, w);
  v.kernel_draws = detail::get_count(j, "kernel_draws", v.kernel_draws, w);
  v.workers = static_cast<unsigned>(detail::get_count(j, "workers", 0, w));
  if (v.M == 0) throw Error(ErrorCode::ConfigInvalid, "verify.M must be at least 1");
  if (v.trials < kMinUnbiasednessTrials) throw Error(ErrorCode::ConfigInvalid, "verify.trials must be >= 10000");
  return v;
}

inline Json to_json(const AblateConfig& a) { return {{"seeds", a.seeds}, {"multi_M", a.multi_M}}; }

inline AblateConfig ablate_config_from_json(const Json& j) {
  const std::string w = "ablate";
  detail::allow_keys(j, {"seeds", "multi_M"}, w);
  AblateConfig a;
  a.seeds = detail::get_or(j, "seeds", a.seeds, w);
  a.multi_M = detail::get_or(j, "multi_M", a.multi_M, w);
  if (a.seeds.empty()) throw Error(ErrorCode::ConfigInvalid, "ablate.seeds must not be empty");
  for (auto m : a.multi_M) {
    if (m == 0) throw Error(ErrorCode::ConfigInvalid, "ablate.multi_M entries must be >= 1");
  }
  return a;
}

inline Json to_json(const ExperimentConfig& c) {
  Json j{{"env", to_json(c.env)},
         {"proposal", to_json(c.proposal)},
         {"dataset", to_json(c.dataset)},
         {"train", to_json(c.train)},
         {"eval", to_json(c.eval)},
         {"verify", to_json(c.verify)},
         {"ablate", to_json(c.ablate)},
         {"output_dir", c.output_dir}};
  if (!c.dataset_path.empty()) j["dataset_path"] = c.dataset_path;
  return j;
}

// Sections left out keep their defaults. The whole document is validated
// before anything runs.
inline ExperimentConfig experiment_config_from_json(const Json& j) {
  detail::allow_keys(j, {"env", "proposal", "dataset", "train", "eval", "verify", "ablate", "output_dir",
                         "dataset_path"},
                     "config");
  ExperimentConfig c;
  if (!j.contains("env")) throw Error(ErrorCode::ConfigInvalid, "config.env is required");
  c.env = environment_spec_from_json(j.at("env"));
  if (j.contains("proposal")) c.proposal = proposal_config_from_json(j.at("proposal"));
  if (j.contains("dataset")) c.dataset = dataset_config_from_json(j.at("dataset"));
  if (j.contains("train")) c.train = train_config_from_json(j.at("train"), &c.warnings);
  if (j.contains("eval")) c.eval = eval_params_from_json(j.at("eval"));
  if (j.contains("verify")) c.verify = verify_config_from_json(j.at("verify"));
  if (j.contains("ablate")) c.ablate = ablate_config_from_json(j.at("ablate"));
  c.output_dir = detail::get_or<std::string>(j, "output_dir", c.output_dir, "config");
  c.dataset_path = detail::get_or<std::string>(j, "dataset_path", "", "config");
  // Building the environment validates its shape, weights and cap.
  try {
    (void)Environment(c.env);
  } catch (const Error& e) {
    throw Error(ErrorCode::ConfigInvalid, std::string("env: ") + e.what());
  }
  return c;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  return experiment_config_from_json(parse_json(read_file(path), path));
}

inline std::uint64_t config_hash(const ExperimentConfig& c) {
  return fnv1a64(to_json(c).dump() + "|" + kCodeVersion);
}

// ---- building blocks -------------------------------------------------------

inline Proposal make_proposal(const ProposalConfig& p, const Environment& env, const TabularPolicy& ref) {
  switch (p.kind) {
    case ProposalKind::Reference:
      return Proposal::reference(ref);
    case ProposalKind::Uniform:
      return Proposal::uniform(env.prompt_count(), env.completion_count());
    case ProposalKind::Mixture:
      return Proposal::mixture({ref, env.uniform_policy()}, p.mixture_weights);
    case ProposalKind::FrozenPolicy: {
      auto pol = load_checkpoint(p.checkpoint);
      if (pol.prompt_count() != env.prompt_count() || pol.completion_count() != env.completion_count()) {
        throw Error(ErrorCode::ShapeMismatch, "proposal checkpoint does not match the environment");
      }
      return Proposal::frozen_policy(pol);
    }
  }
  throw Error(ErrorCode::ConfigInvalid, "unknown proposal kind");
}

// Trainer selection: exact expectation, online regeneration, or offline
// training on `dataset`.
inline TrainResult run_training(const Environment& env, const TabularPolicy& ref, const Proposal& mu,
                                const TrainConfig& cfg, const std::vector<PreferenceRecord>* dataset) {
  if (cfg.exact_expectation) return train_exact_nll(env, ref, cfg, &mu);
  if (cfg.online) return train_online(env, ref, cfg, &mu);
  if (dataset == nullptr) throw Error(ErrorCode::ConfigInvalid, "offline training needs a dataset");
  return train_offline(env, ref, *dataset, cfg, &mu);
}

// ---- verification suite ----------------------------------------------------

struct VerifyCheck {
  std::string name;
  bool passed = false;
  double value = 0.0;      // worst observed statistic
  double threshold = 0.0;
  std::string detail;
};

struct VerifyReport {
  std::vector<VerifyCheck> checks;
  std::optional<UnbiasednessReport> unbiasedness;
  std::optional<UnbiasednessReport> bias_witness;

  bool all_passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const VerifyCheck& c) { return c.passed; });
  }
};

inline Json to_json(const VerifyReport& r) {
  Json checks = Json::array();
  for (const auto& c : r.checks) {
    checks.push_back({{"name", c.name},
                      {"passed", c.passed},
                      {"value", c.value},
                      {"threshold", c.threshold},
                      {"detail", c.detail}});
  }
  Json j{{"all_passed", r.all_passed()}, {"checks", std::move(checks)}};
  if (r.unbiasedness) j["unbiasedness"] = to_json(*r.unbiasedness);
  if (r.bias_witness) j["bias_witness"] = to_json(*r.bias_witness);
  return j;
}

namespace detail {

// A random small model: 2 prompts, 14 completions, Gaussian logits.
struct VerifyInstance {
  Environment env;
  TabularPolicy target;
  TabularPolicy reference;
  double beta;
};

inline VerifyInstance random_instance(std::uint64_t seed, double logit_scale = 1.0) {
  Rng rng(seed);
  EnvironmentSpec spec;
  spec.prompt_count = 2;
  spec.vocab_size = 2;
  spec.max_length = 3;
  spec.seed = rng.next_u64();
  Environment env(spec);
  const std::size_t n = env.prompt_count() * env.completion_count();
  std::vector<double> a(n), b(n);
  for (auto& v : a) v = logit_scale * rng.normal();
  for (auto& v : b) v = logit_scale * rng.normal();
  const double beta = 0.05 + 1.95 * rng.uniform();
  return {std::move(env), TabularPolicy(2, 14, std::move(a)), TabularPolicy(2, 14, std::move(b)), beta};
}

// Central differences of f over every logit of `base`.
inline std::vector<double> finite_difference(const TabularPolicy& base,
                                             const std::function<double(const TabularPolicy&)>& f,
                                             double h = 1e-6) {
  std::vector<double> logits(base.logits().begin(), base.logits().end());
  std::vector<double> g(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double keep = logits[i];
    logits[i] = keep + h;
    const double up = f(TabularPolicy(base.prompt_count(), base.completion_count(), logits));
    logits[i] = keep - h;
    const double down = f(TabularPolicy(base.prompt_count(), base.completion_count(), logits));
    logits[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

inline VerifyCheck max_check(std::string name, double worst, double threshold, bool below, std::string detail = {}) {
  VerifyCheck c;
  c.name = std::move(name);
  c.value = worst;
  c.threshold = threshold;
  c.passed = below ? worst < threshold : worst > threshold;
  c.detail = std::move(detail);
  return c;
}

// Gradient finite-difference check for one loss over `n` random instances.
inline VerifyCheck gradient_check(LossName name, const VerifyConfig& vc) {
  double worst = 0.0;
  const double corrupt = vc.corrupt_gradient ? 1.01 : 1.0;
  for (std::size_t i = 0; i < vc.instances; ++i) {
    const std::uint64_t s = derive_seed(vc.seed, 0x4744 + static_cast<std::uint64_t>(name), i);
    auto inst = random_instance(s);
    Rng rng(derive_seed(s, 1));
    const PromptId x = rng.below(2);
    const CompletionId y0 = rng.below(14);
    CompletionId y1 = rng.below(13);
    if (y1 >= y0) ++y1;
    LossSpec spec;
    spec.name = name;
    spec.beta = inst.beta;
    spec.lambda = 0.5 * rng.uniform();
    spec.gamma = 2.0 * rng.normal();
    BaselineContext ctx;
    ctx.completions = &inst.env.completions();
    ctx.reference_shift = 0.5 * rng.normal();
    const Proposal mu = Proposal::frozen_policy(inst.reference);

    std::vector<CompletionId> negatives;
    SamplerSpec sampler{Strategy::Mc, inst.beta, 1, derive_seed(s, 2)};
    CandidateSet cs;
    if (name == LossName::Mcpo) {
      cs.x = x;
      cs.preferred = y0;
      // Distinct candidates other than y0, so the loss is never constant.
      for (CompletionId y = 0; y < 14 && cs.candidates.size() < 5; ++y) {
        if (y != y0 && rng.uniform() < 0.5) cs.candidates.push_back(y);
      }
      if (cs.candidates.empty()) cs.candidates.push_back(y1);
      spec.M = 1 + rng.below(std::min<std::size_t>(3, cs.candidates.size()));
    }

    auto evaluate = [&](const TabularPolicy& pol) -> LossEval {
      const ImplicitReward ir(pol, inst.reference);
      switch (name) {
        case LossName::NllExact:
          return nll_exact(ProbModel(mu, ir, inst.beta), x, y0);
        case LossName::Mcpo:
          return rnce_loss(ir, x, y0, negatives, inst.beta);
        default:
          return baseline_loss(spec, ir, x, y0, y1, ctx);
      }
    };
    if (name == LossName::Mcpo) {
      const ImplicitReward ir(inst.target, inst.reference);
      const auto e = mcpo_loss(ir, cs, spec, sampler);
      for (auto k : e.selected) negatives.push_back(cs.candidates[k]);
    }
    auto analytic = evaluate(inst.target).grad;
    analytic.scale(corrupt);
    const auto fd = finite_difference(inst.target, [&](const TabularPolicy& p) { return evaluate(p).value; });
    worst = std::max(worst, max_relative_error(analytic.values, fd));
  }
  return max_check(std::string("gradient_") + to_string(name), worst, vc.fd_tolerance, true,
                   std::to_string(vc.instances) + " instances, central differences h=1e-6");
}

}  // namespace detail

inline VerifyCheck check_dpo_reduction(const VerifyConfig& vc) {
  double worst = 0.0;
  for (std::size_t i = 0; i < vc.identity_instances; ++i) {
    const auto s = derive_seed(vc.seed, 0x524544, i);
    auto inst = detail::random_instance(s, 2.0);
    Rng rng(derive_seed(s, 1));
    const PromptId x = rng.below(2);
    const CompletionId y0 = rng.below(14);
    const CompletionId y1 = rng.below(14);
    const ImplicitReward ir(inst.target, inst.reference);
    const CompletionId neg[] = {y1};
    const double a = rnce_loss(ir, x, y0, neg, inst.beta).value;
    const double b = dpo_loss(ir, x, y0, y1, inst.beta).value;
    worst = std::max(worst, std::abs(a - b));
  }
  return detail::max_check("dpo_reduction", worst, vc.reduction_tolerance, true,
                           "|rnce(M=1) - dpo| over random instances");
}

inline VerifyCheck check_lemma2(const VerifyConfig& vc) {
  double worst = 0.0;
  for (std::size_t i = 0; i < vc.identity_instances; ++i) {
    const auto s = derive_seed(vc.seed, 0x4c4532, i);
    auto inst = detail::random_instance(s, 2.0);
    Rng rng(derive_seed(s, 1));
    const PromptId x = rng.below(2);
    const CompletionId y0 = rng.below(14);
    CompletionId y1 = rng.below(13);
    if (y1 >= y0) ++y1;
    const ImplicitReward ir(inst.target, inst.reference);
    auto assembled = dpo_loss(ir, x, y0, y1, inst.beta).grad;
    if (vc.corrupt_gradient) assembled.scale(1.01);
    const auto closed = dpo_grad_closed_form(ir, x, y0, y1, inst.beta);
    worst = std::max(worst, max_relative_error(assembled.values, closed.values));
  }
  return detail::max_check("lemma2_dpo_gradient", worst, vc.identity_tolerance, true,
                           "assembled dpo gradient vs closed form");
}

inline VerifyCheck check_lemma1(const VerifyConfig& vc) {
  double worst = 0.0;
  for (std::size_t i = 0; i < vc.identity_instances; ++i) {
    const auto s = derive_seed(vc.seed, 0x4c4531, i);
    auto inst = detail::random_instance(s, 2.0);
    Rng rng(derive_seed(s, 1));
    const PromptId x = rng.below(2);
    const CompletionId y0 = rng.below(14);
    std::vector<CompletionId> negatives(1 + rng.below(4));
    for (auto& y : negatives) y = rng.below(14);
    const Proposal mu = Proposal::frozen_policy(inst.reference);
    const ImplicitReward ir(inst.target, inst.reference);
    const ProbModel model(mu, ir, inst.beta);
    auto cd = cd_grad_log_Z(model, x, y0, negatives);
    if (vc.corrupt_gradient) cd.scale(1.01);
    // d/dtheta log sum_i exp(beta r(y_i)) = sum_i softmax_i * beta * grad logp(y_i)
    std::vector<double> s_i{inst.beta * ir(x, y0)};
    for (auto y : negatives) s_i.push_back(inst.beta * ir(x, y));
    const auto w = softmax(s_i);
    GradEstimate direct(2, 14);
    add_grad_logp(inst.target, x, y0, inst.beta * w[0], direct);
    for (std::size_t k = 0; k < negatives.size(); ++k) {
      add_grad_logp(inst.target, x, negatives[k], inst.beta * w[k + 1], direct);
    }
    worst = std::max(worst, max_relative_error(cd.values, direct.values));
  }
  return detail::max_check("lemma1_cd_identity", worst, vc.identity_tolerance, true,
                           "cd_grad_log_Z vs gradient of the sampled log-sum-exp");
}

// Fixture for the unbiasedness harness: 2 prompts, 14 completions. mu mixes
// pi_ref with uniform; with mu = pi_ref and beta = 1 the model p would equal
// pi_theta and the exact gradient would vanish identically.
inline std::pair<UnbiasednessReport, UnbiasednessReport> run_unbiasedness(const VerifyConfig& vc) {
  auto inst = detail::random_instance(derive_seed(vc.seed, 0x50523), 1.5);
  const Proposal mu = Proposal::mixture({inst.reference, TabularPolicy(2, 14)}, {0.5, 0.5});
  const ProbModel model(mu, ImplicitReward(inst.target, inst.reference), 1.0);
  auto ok = verify_unbiasedness(model, 0, vc.M, vc.trials, derive_seed(vc.seed, 1), PositiveSource::Model,
                                vc.workers);
  auto bias = verify_unbiasedness(model, 0, vc.M, vc.trials, derive_seed(vc.seed, 2), PositiveSource::Proposal,
                                  vc.workers);
  return {std::move(ok), std::move(bias)};
}

struct KernelFrequencyResult {
  double chi2 = 0.0;
  std::size_t dof = 0;
  double p_value = 1.0;
};

// Pearson chi-square of mc selection counts against the kernel weights
// renormalized over the candidate pool.
inline KernelFrequencyResult kernel_frequency_test(const ImplicitReward& ir, const CandidateSet& cs, double beta,
                                                   std::size_t draws, std::uint64_t seed) {
  auto w = kernel_log_weights(ir, cs, beta);
  std::vector<double> expected(w.begin() + 1, w.end());
  softmax_inplace(expected);
  std::vector<std::size_t> counts(cs.size(), 0);
  SamplerSpec spec{Strategy::Mc, beta, 1, 0};
  for (std::size_t t = 0; t < draws; ++t) {
    spec.rng_seed = derive_seed(seed, t);
    ++counts[select_negatives(ir, cs, spec).indices[0]];
  }
  KernelFrequencyResult r;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    const double e = expected[i] * static_cast<double>(draws);
    const double d = static_cast<double>(counts[i]) - e;
    r.chi2 += d * d / e;
  }
  r.dof = counts.size() - 1;
  if (r.dof > 0) {
    boost::math::chi_squared dist(static_cast<double>(r.dof));
    r.p_value = boost::math::cdf(boost::math::complement(dist, r.chi2));
  }
  return r;
}

inline std::vector<VerifyCheck> check_kernel_frequencies(const VerifyConfig& vc) {
  std::vector<VerifyCheck> out;
  const std::size_t pools[] = {3, 5, 8};
  for (std::size_t f = 0; f < 3; ++f) {
    const auto s = derive_seed(vc.seed, 0x4b45524e, f);
    auto inst = detail::random_instance(s);
    Rng rng(derive_seed(s, 1));
    CandidateSet cs;
    cs.x = rng.below(2);
    cs.preferred = rng.below(14);
    for (std::size_t k = 0; k < pools[f]; ++k) cs.candidates.push_back(rng.below(14));
    const ImplicitReward ir(inst.target, inst.reference);
    const auto r = kernel_frequency_test(ir, cs, inst.beta, vc.kernel_draws, derive_seed(s, 2));
    out.push_back(detail::max_check("kernel_frequency_L" + std::to_string(pools[f]), r.p_value, vc.chi2_alpha, false,
                                    "chi2=" + format_double(r.chi2) + " dof=" + std::to_string(r.dof)));
  }
  return out;
}

inline VerifyReport run_verification(const VerifyConfig& vc) {
  VerifyReport r;
  r.checks.push_back(check_dpo_reduction(vc));
  for (auto name : all_losses()) r.checks.push_back(detail::gradient_check(name, vc));
  r.checks.push_back(check_lemma2(vc));
  r.checks.push_back(check_lemma1(vc));
  auto [ok, bias] = run_unbiasedness(vc);
  r.checks.push_back(detail::max_check("unbiasedness_max_z", ok.max_z_score, vc.z_threshold, true,
                                       "y0 ~ p, M=" + std::to_string(vc.M)));
  r.checks.push_back(detail::max_check("bias_witness_max_z", bias.max_z_score, vc.bias_threshold, false,
                                       "y0 ~ mu, M=" + std::to_string(vc.M)));
  r.unbiasedness = std::move(ok);
  r.bias_witness = std::move(bias);
  for (auto& c : check_kernel_frequencies(vc)) r.checks.push_back(std::move(c));
  return r;
}

// ---- ablation grid ---------------------------------------------------------

struct AblationRow {
  std::string variant;
  std::string loss;
  std::string strategy;
  std::size_t M = 1;
  bool noise = false;
  bool online = false;
  std::uint64_t seed = 0;
  double final_kl = 0.0;
  double final_reward = 0.0;
  double final_loss = 0.0;
  double noise_rate = 0.0;    // noise-candidate selection rate after the first epoch
  double uniform_rate = 0.0;  // the rate a uniform choice would give on the same pools
};

// Selection rate of noise candidates over every epoch after the first.
inline std::pair<double, double> noise_rate_after_first_epoch(const TrainTrace& t) {
  std::size_t hits = 0, opp = 0;
  double uniform = 0.0;
  for (std::size_t e = 1; e < t.epochs.size(); ++e) {
    hits += t.epochs[e].noise_selected;
    opp += t.epochs[e].noise_opportunities;
    uniform += t.epochs[e].uniform_rate * static_cast<double>(t.epochs[e].noise_opportunities);
  }
  if (opp == 0) return {0.0, 0.0};
  return {static_cast<double>(hits) / static_cast<double>(opp), uniform / static_cast<double>(opp)};
}

struct AblationVariant {
  std::string name;
  LossName loss;
  Strategy strategy;
  std::size_t M;
  bool noise;
  bool online;
};

// Strategy grid at M = 1, the multi-negative sweep for mc and random, the
// noise-injection pair (mc vs forced noise negative) and batched-online mc.
inline std::vector<AblationVariant> ablation_variants(const AblateConfig& a) {
  std::vector<AblationVariant> v;
  for (auto s : {Strategy::Mc, Strategy::Max, Strategy::Min, Strategy::Random}) {
    v.push_back({std::string(to_string(s)) + "_M1", LossName::Mcpo, s, 1, false, false});
  }
  for (auto m : a.multi_M) {
    if (m == 1) continue;
    for (auto s : {Strategy::Mc, Strategy::Random}) {
      v.push_back({std::string(to_string(s)) + "_M" + std::to_string(m), LossName::Mcpo, s, m, false, false});
    }
  }
  v.push_back({"mc_noise", LossName::Mcpo, Strategy::Mc, 1, true, false});
  v.push_back({"dpo_forced_noise", LossName::Dpo, Strategy::Noise, 1, true, false});
  v.push_back({"online_mc", LossName::Mcpo, Strategy::Mc, 1, false, true});
  return v;
}

// Each seed drives both the dataset and the training stream of every variant,
// so variants sharing a seed see the same records.
inline AblationRow run_ablation_variant(const ExperimentConfig& base, const AblationVariant& v, std::uint64_t seed) {
  const Environment env(base.env);
  const TabularPolicy ref = env.uniform_policy();
  const Proposal mu = make_proposal(base.proposal, env, ref);
  TrainConfig cfg = base.train;
  cfg.loss.name = v.loss;
  cfg.loss.M = v.M;
  cfg.sampler.strategy = v.strategy;
  cfg.seed = seed;
  cfg.online = v.online;
  cfg.exact_expectation = false;
  TrainResult res = [&] {
    if (v.online) return train_online(env, ref, cfg, &mu);
    NoiseConfig noise = base.dataset.noise;
    noise.enabled = v.noise;
    const auto data = generate_dataset(env, mu, base.dataset.L, base.dataset.n_records, noise, seed);
    return train_offline(env, ref, data, cfg, &mu);
  }();
  AblationRow row;
  row.variant = v.name;
  row.loss = to_string(v.loss);
  row.strategy = to_string(v.strategy);
  row.M = v.M;
  row.noise = v.noise;
  row.online = v.online;
  row.seed = seed;
  if (!res.trace.rows.empty()) {
    row.final_kl = res.trace.rows.back().kl_to_pistar;
    row.final_reward = res.trace.rows.back().expected_reward;
    row.final_loss = res.trace.rows.back().loss;
  }
  std::tie(row.noise_rate, row.uniform_rate) = noise_rate_after_first_epoch(res.trace);
  return row;
}

inline std::vector<AblationRow> run_ablation(const ExperimentConfig& base) {
  std::vector<AblationRow> rows;
  for (const auto& v : ablation_variants(base.ablate)) {
    for (auto seed : base.ablate.seeds) rows.push_back(run_ablation_variant(base, v, seed));
  }
  return rows;
}

inline std::string ablation_to_csv(const std::vector<AblationRow>& rows) {
  std::string out = "variant,loss,strategy,M,noise,online,seed,final_kl,final_reward,final_loss,noise_rate,uniform_rate\n";
  for (const auto& r : rows) {
    out += r.variant + ',' + r.loss + ',' + r.strategy + ',' + std::to_string(r.M) + ',' + (r.noise ? "1" : "0") +
           ',' + (r.online ? "1" : "0") + ',' + std::to_string(r.seed) + ',' + format_double(r.final_kl) + ',' +
           format_double(r.final_reward) + ',' + format_double(r.final_loss) + ',' + format_double(r.noise_rate) +
           ',' + format_double(r.uniform_rate) + '\n';
  }
  return out;
}

// ---- commands --------------------------------------------------------------

namespace fs = std::filesystem;

inline fs::path ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::IoError, "cannot create '" + dir + "': " + ec.message());
  return fs::path(dir);
}

inline Json manifest(const ExperimentConfig& c, const std::string& command) {
  return {{"command", command},
          {"code_version", kCodeVersion},
          {"config_hash", hex64(config_hash(c))},
          {"env_hash", hex64(environment_hash(c.env))}};
}

inline std::string dataset_path(const ExperimentConfig& c) {
  return c.dataset_path.empty() ? (fs::path(c.output_dir) / "dataset.jsonl").string() : c.dataset_path;
}

inline std::vector<PreferenceRecord> generate_configured_dataset(const ExperimentConfig& c) {
  const Environment env(c.env);
  const TabularPolicy ref = env.uniform_policy();
  const Proposal mu = make_proposal(c.proposal, env, ref);
  return generate_dataset(env, mu, c.dataset.L, c.dataset.n_records, c.dataset.noise, c.dataset.seed);
}

// Writes dataset.jsonl and manifest.json under output_dir.
inline std::vector<PreferenceRecord> cmd_gen_data(const ExperimentConfig& c) {
  const auto dir = ensure_dir(c.output_dir);
  const auto data = generate_configured_dataset(c);
  std::size_t degenerate = 0;
  for (const auto& r : data) degenerate += r.degenerate_noise ? 1 : 0;
  write_file(dataset_path(c), dataset_to_jsonl(data));
  Json m = manifest(c, "gen-data");
  m["record_count"] = data.size();
  m["seed"] = c.dataset.seed;
  m["degenerate_noise_records"] = degenerate;
  m["dataset_hash"] = hex64(fnv1a64(dataset_to_jsonl(data)));
  write_file((dir / "manifest.json").string(), m.dump(2) + "\n");
  return data;
}

// Trains and writes checkpoint.bin, checkpoint.json, trace.csv and
// train_manifest.json. Offline runs read the dataset file, generating it first
// when it does not exist yet. A diverged run still writes its partial trace.
inline TrainResult cmd_train(const ExperimentConfig& c) {
  const auto dir = ensure_dir(c.output_dir);
  const Environment env(c.env);
  const TabularPolicy ref = env.uniform_policy();
  const Proposal mu = make_proposal(c.proposal, env, ref);
  std::vector<PreferenceRecord> data;
  const bool needs_data = !c.train.online && !c.train.exact_expectation;
  if (needs_data) {
    const auto path = dataset_path(c);
    if (fs::exists(path)) {
      data = dataset_from_jsonl(read_file(path), &env);
    } else {
      data = cmd_gen_data(c);
    }
  }
  Json m = manifest(c, "train");
  try {
    TrainResult res = run_training(env, ref, mu, c.train, needs_data ? &data : nullptr);
    write_file((dir / "trace.csv").string(), trace_to_csv(res.trace));
    save_checkpoint((dir / "checkpoint.bin").string(), res.policy);
    save_checkpoint((dir / "checkpoint.json").string(), res.policy);
    m["steps"] = res.trace.rows.size();
    m["warnings"] = res.trace.warnings;
    m["config_warnings"] = c.warnings;
    m["trace_hash"] = hex64(fnv1a64(trace_to_csv(res.trace)));
    write_file((dir / "train_manifest.json").string(), m.dump(2) + "\n");
    return res;
  } catch (const DivergenceError& e) {
    write_file((dir / "trace.csv").string(), trace_to_csv(e.partial_trace()));
    m["diverged"] = e.what();
    write_file((dir / "train_manifest.json").string(), m.dump(2) + "\n");
    throw;
  }
}

inline VerifyReport cmd_verify(const ExperimentConfig& c, bool corrupt_gradient = false) {
  const auto dir = ensure_dir(c.output_dir);
  VerifyConfig vc = c.verify;
  vc.corrupt_gradient = vc.corrupt_gradient || corrupt_gradient;
  VerifyReport r = run_verification(vc);
  Json j = to_json(r);
  j["manifest"] = manifest(c, "verify");
  write_file((dir / "verify.json").string(), j.dump(2) + "\n");
  return r;
}

// Candidate a against baseline b; writes eval.json and matches.csv.
inline EvalReport cmd_eval(const ExperimentConfig& c, const std::string& checkpoint_a,
                           const std::string& checkpoint_b) {
  const auto dir = ensure_dir(c.output_dir);
  const Environment env(c.env);
  const TabularPolicy ref = env.uniform_policy();
  const auto a = load_checkpoint(checkpoint_a);
  const auto b = load_checkpoint(checkpoint_b);
  for (const auto* p : {&a, &b}) {
    if (p->prompt_count() != env.prompt_count() || p->completion_count() != env.completion_count()) {
      throw Error(ErrorCode::ShapeMismatch, "checkpoint does not match the environment");
    }
  }
  std::vector<MatchLogEntry> log;
  const EvalReport r = evaluate(env, a, b, ref, c.eval, &log);
  Json j = to_json(r);
  j["manifest"] = manifest(c, "eval");
  write_file((dir / "eval.json").string(), j.dump(2) + "\n");
  write_file((dir / "matches.csv").string(), match_log_to_csv(log));
  return r;
}

inline std::vector<AblationRow> cmd_ablate(const ExperimentConfig& c) {
  const auto dir = ensure_dir(c.output_dir);
  auto rows = run_ablation(c);
  write_file((dir / "ablate.csv").string(), ablation_to_csv(rows));
  write_file((dir / "ablate_manifest.json").string(), manifest(c, "ablate").dump(2) + "\n");
  return rows;
}

}  // namespace mcpo
