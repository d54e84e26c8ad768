#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "mcpo/partition.hpp"
#include "oracles.hpp"

using namespace mcpo;

namespace {

// Direct log Z = log sum_y mu(y) exp(beta r(y)).
oracle::Real oracle_log_Z(const Proposal& mu, const ImplicitReward& ir, std::size_t x, oracle::Real beta) {
  std::vector<oracle::Real> a;
  for (std::size_t y = 0; y < ir.target.completion_count(); ++y) {
    a.push_back(std::log(static_cast<oracle::Real>(mu.distribution().prob(x, y))) +
                beta * oracle::reward(ir.target, ir.reference, x, y));
  }
  return oracle::naive_lse(a);
}

struct Fixture {
  TabularPolicy target, ref;
};

Fixture random_fixture(std::mt19937_64& g, std::size_t P = 2, std::size_t C = 6, double scale = 1.0) {
  auto t = oracle::random_policy(P, C, g, scale);
  auto r = oracle::random_policy(P, C, g, scale);
  return {std::move(t), std::move(r)};
}

}  // namespace

TEST(LogZ, ZeroWhenTargetIsReference) {
  std::mt19937_64 g(1);
  const auto p = oracle::random_policy(2, 5, g);
  const auto mu = Proposal::mixture({p, TabularPolicy(2, 5)}, {0.3, 0.7});
  const ProbModel m(mu, ImplicitReward(p, p), 0.8);
  EXPECT_NEAR(exact_log_Z(m, 0), 0.0, 1e-15);
  EXPECT_NEAR(exact_log_Z(m, 1), 0.0, 1e-15);
}

TEST(LogZ, HandCase) {
  // Normalized rows only fix r up to a common offset c: target (3/4, 1/4)
  // against a uniform reference gives r = (ln 3 + c, c) with c = ln(1/2).
  const TabularPolicy ref(1, 2);
  const TabularPolicy target(1, 2, {std::log(3.0), 0.0});
  const ImplicitReward ir(target, ref);
  const double c = ir(0, 1);
  EXPECT_NEAR(ir(0, 0) - c, std::log(3.0), 1e-15);
  const auto mu = Proposal::uniform(1, 2);
  const ProbModel m(mu, ir, 1.0);
  EXPECT_NEAR(exact_log_Z(m, 0) - c, std::log(2.0), 1e-15);
  EXPECT_NEAR(exact_log_Z(m, 0), static_cast<double>(oracle_log_Z(mu, ir, 0, 1.0L)), 1e-15);
}

TEST(LogZ, ShiftByConstant) {
  std::mt19937_64 g(2);
  auto f = random_fixture(g);
  const auto mu = Proposal::reference(f.ref);
  const ProbModel m(mu, ImplicitReward(f.target, f.ref), 0.6);
  const CompletionId neg[] = {2, 4};
  const auto s = scaled_rewards(m, 0, 1, neg);
  std::vector<double> moved = s;
  for (auto& v : moved) v += 3.25;
  EXPECT_NEAR(log_sum_exp(moved) - std::log(3.0), sampled_log_Zhat(m, 0, 1, neg) + 3.25, 1e-13);
  const auto w = cd_weights(m, 0, 1, neg);
  const auto w2 = softmax(moved);
  for (std::size_t i = 0; i < w.size(); ++i) EXPECT_NEAR(w[i], w2[i], 1e-15);
}

TEST(LogZ, MatchesOracleOnRandomModels) {
  std::mt19937_64 g(3);
  for (int k = 0; k < 50; ++k) {
    auto f = random_fixture(g, 2, 9, 1.5);
    const auto mu = Proposal::mixture({f.ref, TabularPolicy(2, 9)}, {0.5, 0.5});
    const double beta = 0.1 + 0.05 * k;
    const ImplicitReward ir(f.target, f.ref);
    const ProbModel m(mu, ir, beta);
    for (std::size_t x = 0; x < 2; ++x) {
      EXPECT_NEAR(exact_log_Z(m, x), static_cast<double>(oracle_log_Z(mu, ir, x, beta)), 1e-13);
    }
  }
}

TEST(LogZ, CapExceeded) {
  const TabularPolicy p(1, 10);
  const auto mu = Proposal::reference(p);
  const ProbModel m(mu, ImplicitReward(p, p), 1.0);
  try {
    exact_log_Z(m, 0, 5);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::CapExceeded);
  }
}

TEST(ExactGradLogZ, FiniteDifferences) {
  std::mt19937_64 g(4);
  for (int k = 0; k < 100; ++k) {
    auto f = random_fixture(g, 2, 6);
    const auto mu = Proposal::reference(f.ref);
    const double beta = 0.05 + 0.02 * k;
    const std::size_t x = k % 2;
    const ProbModel m(mu, ImplicitReward(f.target, f.ref), beta);
    const auto fd = oracle::finite_diff(f.target, [&](const TabularPolicy& q) {
      return exact_log_Z(ProbModel(mu, ImplicitReward(q, f.ref), beta), x);
    });
    EXPECT_LT(oracle::rel_err(exact_grad_log_Z(m, x).values, fd), 1e-5) << "instance " << k;
  }
}

TEST(ExactGradLogZ, ZeroAtReference) {
  std::mt19937_64 g(5);
  const auto p = oracle::random_policy(2, 6, g);
  const auto mu = Proposal::reference(p);
  const ProbModel m(mu, ImplicitReward(p, p), 0.5);
  EXPECT_LT(exact_grad_log_Z(m, 1).max_abs(), 1e-15);
}

TEST(ExactGradLogZ, RowSumsToZero) {
  std::mt19937_64 g(6);
  auto f = random_fixture(g, 2, 8, 2.0);
  const auto mu = Proposal::uniform(2, 8);
  const ProbModel m(mu, ImplicitReward(f.target, f.ref), 1.3);
  const auto grad = exact_grad_log_Z(m, 0);
  double s = 0;
  for (double v : grad.row(0)) s += v;
  EXPECT_NEAR(s, 0.0, 1e-14);
}

TEST(SampledLogZ, ZeroRewardAndHandCase) {
  std::mt19937_64 g(7);
  const auto p = oracle::random_policy(1, 4, g);
  const auto mu = Proposal::reference(p);
  const ProbModel zero(mu, ImplicitReward(p, p), 2.0);
  const CompletionId neg[] = {0, 3, 3};
  EXPECT_NEAR(sampled_log_Zhat(zero, 0, 1, neg), 0.0, 1e-15);

  // r(y0) = ln 3, r(y1) = 0 with beta = 1 -> Zhat = 2.
  const TabularPolicy ref(1, 2, {0.0, std::log(3.0)});
  const TabularPolicy target(1, 2, {std::log(3.0), std::log(3.0)});
  const ImplicitReward ir(target, ref);
  const double offset = ir(0, 1);  // row normalization leaves a common offset
  const auto u = Proposal::uniform(1, 2);
  const ProbModel m(u, ir, 1.0);
  const CompletionId one[] = {1};
  EXPECT_NEAR(ir(0, 0) - offset, std::log(3.0), 1e-15);
  EXPECT_NEAR(sampled_log_Zhat(m, 0, 0, one) - offset, std::log(2.0), 1e-15);
  EXPECT_THROW(sampled_log_Zhat(m, 0, 0, {}), Error);
}

TEST(SampledLogZ, ExpectationOfZhatIsZ) {
  // With y0 and one negative both drawn from mu, E[Zhat] = Z exactly; sum it.
  std::mt19937_64 g(8);
  auto f = random_fixture(g, 1, 5, 1.2);
  const auto mu = Proposal::uniform(1, 5);
  const ProbModel m(mu, ImplicitReward(f.target, f.ref), 0.9);
  double acc = 0;
  for (std::size_t a = 0; a < 5; ++a) {
    for (std::size_t b = 0; b < 5; ++b) {
      const CompletionId neg[] = {b};
      acc += 0.04 * std::exp(sampled_log_Zhat(m, 0, a, neg));
    }
  }
  EXPECT_NEAR(acc, std::exp(exact_log_Z(m, 0)), 1e-13);
}

TEST(CdGrad, FiniteDifferencesOfSampledSurrogate) {
  std::mt19937_64 g(9);
  std::uniform_int_distribution<std::size_t> pick(0, 5);
  for (int k = 0; k < 100; ++k) {
    auto f = random_fixture(g, 2, 6);
    const auto mu = Proposal::reference(f.ref);
    const double beta = 0.1 + 0.015 * k;
    const std::size_t x = k % 2, y0 = pick(g);
    const std::vector<CompletionId> neg{pick(g), pick(g), pick(g)};
    const ProbModel m(mu, ImplicitReward(f.target, f.ref), beta);
    const auto fd = oracle::finite_diff(f.target, [&](const TabularPolicy& q) {
      return sampled_log_Zhat(ProbModel(mu, ImplicitReward(q, f.ref), beta), x, y0, neg);
    });
    EXPECT_LT(oracle::rel_err(cd_grad_log_Z(m, x, y0, neg).values, fd), 1e-5) << "instance " << k;
  }
}

TEST(CdGrad, SinglePointAndSymmetricWeights) {
  std::mt19937_64 g(10);
  auto f = random_fixture(g, 1, 4);
  const auto mu = Proposal::reference(f.ref);
  const double beta = 0.7;
  const ProbModel m(mu, ImplicitReward(f.target, f.ref), beta);
  const CompletionId same[] = {2, 2};
  auto want = grad_logp(f.target, 0, 2);
  want.scale(beta);
  EXPECT_LT(max_relative_error(cd_grad_log_Z(m, 0, 2, same).values, want.values), 1e-14);

  const ProbModel flat(mu, ImplicitReward(f.ref, f.ref), beta);
  const CompletionId one[] = {3};
  const auto w = cd_weights(flat, 0, 1, one);
  EXPECT_DOUBLE_EQ(w[0], 0.5);
  EXPECT_DOUBLE_EQ(w[1], 0.5);
}

TEST(Unbiasedness, ZeroGradientCase) {
  // Exact side is identically zero; each trial's estimate is not, so the
  // Monte Carlo side is only zero in expectation.
  std::mt19937_64 g(11);
  const auto p = oracle::random_policy(2, 6, g);
  const auto mu = Proposal::reference(p);
  const ProbModel m(mu, ImplicitReward(p, p), 1.0);
  const auto r = verify_unbiasedness(m, 0, 2, 10000, 3);
  EXPECT_LT(r.exact.max_abs(), 1e-15);
  EXPECT_LT(r.max_z_score, 4.0);
}

namespace {

// mu = pi_ref would make p equal to pi_theta at beta = 1 (zero exact
// gradient), so mix in the uniform distribution.
Proposal mixed(const TabularPolicy& ref) {
  return Proposal::mixture({ref, TabularPolicy(ref.prompt_count(), ref.completion_count())}, {0.5, 0.5});
}

}  // namespace

TEST(Unbiasedness, MonteCarloMeanMatchesExact) {
  std::mt19937_64 g(12);
  auto f = random_fixture(g, 2, 6, 1.5);
  const auto mu = mixed(f.ref);
  const ProbModel m(mu, ImplicitReward(f.target, f.ref), 1.0);
  const auto r = verify_unbiasedness(m, 1, 2, 200000, 21);
  EXPECT_LT(r.max_z_score, 4.0);
  EXPECT_EQ(r.per_component.size(), 6u);
  EXPECT_GT(r.exact.max_abs(), 0.05);
  const auto fd = oracle::finite_diff(f.target, [&](const TabularPolicy& q) {
    return exact_log_Z(ProbModel(mu, ImplicitReward(q, f.ref), 1.0), 1);
  });
  EXPECT_LT(oracle::rel_err(r.exact.values, fd), 1e-6);
}

TEST(Unbiasedness, PositivesFromProposalAreBiased) {
  std::mt19937_64 g(12);
  auto f = random_fixture(g, 2, 6, 1.5);
  const auto mu = mixed(f.ref);
  const ProbModel m(mu, ImplicitReward(f.target, f.ref), 1.0);
  const auto r = verify_unbiasedness(m, 1, 2, 200000, 21, PositiveSource::Proposal);
  EXPECT_GT(r.max_z_score, 6.0);
}

TEST(Unbiasedness, IndependentOfWorkerCount) {
  std::mt19937_64 g(13);
  auto f = random_fixture(g, 1, 6);
  const auto mu = Proposal::uniform(1, 6);
  const ProbModel m(mu, ImplicitReward(f.target, f.ref), 0.8);
  const auto a = verify_unbiasedness(m, 0, 3, 20000, 5, PositiveSource::Model, 1);
  const auto b = verify_unbiasedness(m, 0, 3, 20000, 5, PositiveSource::Model, 4);
  EXPECT_EQ(a.mc_mean.values, b.mc_mean.values);
  EXPECT_EQ(a.max_z_score, b.max_z_score);
}

TEST(Unbiasedness, RejectsTooFewTrials) {
  const TabularPolicy p(1, 3);
  const auto mu = Proposal::reference(p);
  const ProbModel m(mu, ImplicitReward(p, p), 1.0);
  try {
    verify_unbiasedness(m, 0, 1, 9999, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::InsufficientTrials);
  }
  EXPECT_THROW(verify_unbiasedness(m, 0, 0, 10000, 0), Error);
}

TEST(Proposal, MixtureAndPositivity) {
  const TabularPolicy a(1, 2, {0.0, std::log(3.0)});  // (1/4, 3/4)
  const TabularPolicy b(1, 2);
  const auto mu = Proposal::mixture({a, b}, {0.5, 0.5});
  EXPECT_NEAR(mu.distribution().prob(0, 0), 0.375, 1e-15);
  EXPECT_NEAR(mu.distribution().prob(0, 1), 0.625, 1e-15);
  EXPECT_THROW(Proposal::mixture({a, b}, {0.5, 0.6}), Error);
  const TabularPolicy dead(1, 2, {0.0, kNegInf});
  EXPECT_THROW(Proposal::reference(dead), Error);
}
