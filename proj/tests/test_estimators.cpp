#include <gtest/gtest.h>

#include <cmath>

#include "eiglab/eiglab.hpp"
#include "support.hpp"

using namespace eiglab;

namespace {

const double kHalfLog2 = 0.5 * std::log(2.0);

class TwoPointPrior final : public LatentSampler {
 public:
  LatentSample sample(RngStream& rng) const override { return {rng.uniform() < 0.5 ? -1.0 : 1.0}; }
};

// A proposal with zero density everywhere.
class NullProposal final : public Proposal {
 public:
  LatentSample sample(const Outcome&, const Design&, RngStream& rng) const override { return {rng.normal()}; }
  double log_density(const LatentSample&, const Outcome&, const Design&) const override {
    return -std::numeric_limits<double>::infinity();
  }
};

}  // namespace

TEST(RbEig, PointMassPriorGivesZero) {
  const ProbitThresholdModel m(0.0, 1e-8, 1.0);
  const auto e = rb_eig(m, Design{0.0}, 10000, RngStream(1, 0));
  EXPECT_NEAR(e.value, 0.0, 1e-6);
}

TEST(RbEig, TwoPointPriorMatchesExhaustiveOracle) {
  const ProbitThresholdModel m(0.0, 2.0, 1.0);
  const double mi = oracle::binary_entropy(0.5) -
                    0.5 * (oracle::binary_entropy(oracle::phi_cdf(1.0)) + oracle::binary_entropy(oracle::phi_cdf(-1.0)));
  const auto e = rb_eig(m, Design{0.0}, 100000, RngStream(2, 0), TwoPointPrior());
  EXPECT_GT(e.std_error, 0.0);
  EXPECT_NEAR(e.value, mi, 4 * e.std_error);
}

TEST(RbEig, SaturatedStimulusCarriesAlmostNoInformation) {
  const ProbitThresholdModel m(0.0, 0.1, 1.0);
  const double mi = oracle::probit_mi(0.0, 0.1, 1.0, 6.0);
  const auto e = rb_eig(m, Design{6.0}, 100000, RngStream(3, 0));
  EXPECT_LT(e.value, 1e-6);
  EXPECT_NEAR(e.value, mi, 4 * e.std_error + 1e-9);
}

TEST(RbEig, MatchesQuadratureAcrossDesigns) {
  const ProbitThresholdModel m;
  for (double xi : {-3.0, 0.0, 1.5}) {
    const auto e = rb_eig(m, Design{xi}, 50000, RngStream(4, 0));
    EXPECT_NEAR(e.value, oracle::probit_mi(0.0, 2.0, 1.0, xi), 4 * e.std_error) << xi;
  }
}

TEST(RbEig, CostAndCapability) {
  const ProbitThresholdModel m;
  EXPECT_EQ(rb_eig(m, Design{0.0}, 123, RngStream(1, 0)).likelihood_evals, 246u);
  EXPECT_THROW(rb_eig(LinearGaussianModel::scalar(), Design{0.0}, 10, RngStream(1, 0)), CapabilityError);
  EXPECT_THROW(rb_eig(m, Design{0.0}, 0, RngStream(1, 0)), ConfigError);
}

TEST(Nmc, UninformativeDesign) {
  const auto m = LinearGaussianModel::scalar();
  const auto e = nmc_eig(m, Design{0.0}, NmcConfig{1000, 1000}, RngStream(5, 0));
  EXPECT_LT(std::abs(e.value), 0.02);
}

TEST(Nmc, SelfDenominatorHook) {
  const auto m = LinearGaussianModel::scalar();
  const auto e = nmc_eig(m, Design{1.0}, NmcConfig{1, 1, nullptr, InnerSampling::replay_outer}, RngStream(6, 0));
  EXPECT_EQ(e.value, 0.0);
}

TEST(Nmc, ExactPosteriorProposalIsExact) {
  const auto m = LinearGaussianModel::scalar();
  const ConjugatePosteriorProposal q(m);
  for (std::size_t inner : {1u, 3u, 10u}) {
    const auto e = nmc_eig(m, Design{1.0}, NmcConfig{10000, inner, &q}, RngStream(7, inner));
    EXPECT_NEAR(e.value, kHalfLog2, 4 * e.std_error) << inner;
  }
}

TEST(Nmc, ZeroProposalDensityIsReported) {
  const auto m = LinearGaussianModel::scalar();
  const NullProposal q;
  try {
    nmc_eig(m, Design{1.0}, NmcConfig{4, 3, &q}, RngStream(1, 0));
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("inner sample 0"), std::string::npos);
  }
}

TEST(Nmc, CostAccountingAndValidation) {
  const auto m = LinearGaussianModel::scalar();
  EXPECT_EQ(nmc_eig(m, Design{0.5}, NmcConfig{37, 11}, RngStream(1, 0)).likelihood_evals, 37u * 12u);
  EXPECT_THROW(nmc_eig(m, Design{0.5}, NmcConfig{0, 11}, RngStream(1, 0)), ConfigError);
  EXPECT_THROW(nmc_eig(m, Design{0.5}, NmcConfig{3, 0}, RngStream(1, 0)), ConfigError);
}

TEST(Nmc, ExpectationIsAnUpperBound) {
  // mean of N=1, M=16 estimates = one N=10^4 run with fresh inner samples
  const auto m = LinearGaussianModel::scalar();
  const auto e = nmc_eig(m, Design{1.0}, NmcConfig{10000, 16}, RngStream(8, 0));
  EXPECT_GT(e.value, kHalfLog2 - 3 * e.std_error);
}

TEST(Nmc, TightensMonotonicallyInM) {
  const auto m = LinearGaussianModel::scalar();
  EigEstimate prev;
  bool first = true;
  for (std::size_t inner : {1u, 4u, 16u, 64u}) {
    const auto e = nmc_eig(m, Design{1.0}, NmcConfig{20000, inner}, RngStream(9, inner));
    if (!first) {
      EXPECT_LE(e.value, prev.value + 3 * oracle::pooled(e.std_error, prev.std_error)) << inner;
    }
    prev = e;
    first = false;
  }
}

TEST(Nmc, ParallelAndSerialAgreeBitForBit) {
  const auto m = LinearGaussianModel::scalar();
  set_max_threads(1);
  const auto a = nmc_eig(m, Design{0.7}, NmcConfig{500, 20}, RngStream(10, 0));
  set_max_threads(4);
  const auto b = nmc_eig(m, Design{0.7}, NmcConfig{500, 20}, RngStream(10, 0));
  set_max_threads(0);
  EXPECT_EQ(a.value, b.value);
  EXPECT_EQ(a.std_error, b.std_error);
}

TEST(Mlmc, DegenerateLevelEqualsBaseNmcTerm) {
  const auto m = LinearGaussianModel::scalar();
  MlmcConfig c;
  c.replicates = 1;
  c.forced_level = 0;
  const RngStream rng(11, 0);
  const auto e = mlmc_eig(m, Design{1.0}, c, rng);
  const auto base = nmc_eig(m, Design{1.0}, NmcConfig{1, c.m0}, rng);
  EXPECT_EQ(e.value, base.value);
}

TEST(Mlmc, LevelDistributionMatchesPmf) {
  MlmcConfig c;
  c.replicates = 100000;
  const auto pmf = mlmc_level_pmf(c);
  ASSERT_EQ(pmf.size(), 13u);
  // independent pmf: (1 - 2^-tau) 2^(-tau l), renormalized over 0..12
  std::vector<double> expect(13);
  double z = 0.0;
  for (int l = 0; l <= 12; ++l) z += expect[l] = (1 - std::pow(2.0, -1.5)) * std::pow(2.0, -1.5 * l);
  for (int l = 0; l <= 12; ++l) EXPECT_NEAR(pmf[l], expect[l] / z, 1e-14);

  const auto run = mlmc_eig_detailed(LinearGaussianModel::scalar(), Design{1.0}, c, RngStream(12, 0), PriorSampler(LinearGaussianModel::scalar()));
  std::vector<double> counts(13, 0.0);
  for (auto l : run.levels) counts[l] += 1;
  // pool the sparse tail so every expected count is at least 5
  double stat = 0.0, tail_obs = 0.0, tail_exp = 0.0;
  std::size_t cells = 0;
  for (int l = 0; l <= 12; ++l) {
    const double e = c.replicates * expect[l] / z;
    if (e >= 5.0) {
      stat += (counts[l] - e) * (counts[l] - e) / e;
      ++cells;
    } else {
      tail_obs += counts[l];
      tail_exp += e;
    }
  }
  if (tail_exp > 0) {
    stat += (tail_obs - tail_exp) * (tail_obs - tail_exp) / tail_exp;
    ++cells;
  }
  EXPECT_LT(stat, oracle::chi2_critical(static_cast<double>(cells - 1), 0.01));
}

TEST(Mlmc, UnbiasedOnLinearGaussian) {
  const auto m = LinearGaussianModel::scalar();
  MlmcConfig c;
  c.replicates = 20000;
  const auto e = mlmc_eig(m, Design{1.0}, c, RngStream(13, 0));
  EXPECT_NEAR(e.value, kHalfLog2, 4 * e.std_error);
}

TEST(Mlmc, ExactCostAccounting) {
  const auto m = LinearGaussianModel::scalar();
  MlmcConfig c;
  c.replicates = 500;
  const auto run = mlmc_eig_detailed(m, Design{1.0}, c, RngStream(14, 0), PriorSampler(m));
  std::uint64_t expect = 0;
  for (auto l : run.levels) expect += (4u << l) + 1;
  EXPECT_EQ(run.estimate.likelihood_evals, expect);
}

TEST(Mlmc, ConfigValidation) {
  const auto m = LinearGaussianModel::scalar();
  MlmcConfig c;
  c.m0 = 3;
  EXPECT_THROW(mlmc_eig(m, Design{1.0}, c, RngStream(1, 0)), ConfigError);
  c = {};
  c.tau = 2.0;
  EXPECT_THROW(mlmc_eig(m, Design{1.0}, c, RngStream(1, 0)), ConfigError);
  c = {};
  c.l_max = 40;
  EXPECT_THROW(mlmc_eig(m, Design{1.0}, c, RngStream(1, 0)), ConfigError);
}

TEST(Mlmc, DeltaTelescopes) {
  // level 0: plain NMC term; level l: antithetic difference of halves
  std::vector<double> w = {0.1, -0.3, 0.7, 0.2, -1.0, 0.4, 0.0, 0.5};
  const double l0 = 0.3;
  auto lme = [](const std::vector<double>& v) {
    double mx = *std::max_element(v.begin(), v.end()), s = 0.0;
    for (double x : v) s += std::exp(x - mx);
    return mx + std::log(s / v.size());
  };
  const std::vector<double> a(w.begin(), w.begin() + 4), b(w.begin() + 4, w.end());
  EXPECT_NEAR(mlmc_delta(l0, a, 0), l0 - lme(a), 1e-14);
  EXPECT_NEAR(mlmc_delta(l0, w, 1), (l0 - lme(w)) - 0.5 * ((l0 - lme(a)) + (l0 - lme(b))), 1e-14);
}

TEST(Study, RequiresOracleAndCosts) {
  StudyConfig c;
  c.costs = {100, 1000};
  EXPECT_THROW(convergence_study(LocationFindingModel(), Design{0.0, 0.0}, c, RngStream(1, 0)), CapabilityError);
  c.costs = {100};
  EXPECT_THROW(convergence_study(LinearGaussianModel::scalar(), Design{1.0}, c, RngStream(1, 0)), ConfigError);
  EXPECT_THROW(Pairing::parse("cube"), ConfigError);
  EXPECT_EQ(Pairing::parse("fixed:8").fixed_m, 8u);
}

TEST(Study, SqrtPairingAndCsv) {
  StudyConfig c;
  c.costs = {4096, 16384};
  c.replicates = 5;
  const auto r = convergence_study(LinearGaussianModel::scalar(), Design{1.0}, c, RngStream(2, 0));
  // N = round(C^(2/3)) = 256, M = 16 -> cost 256 * 17
  EXPECT_EQ(r.rows[0].cost, 256.0 * 17.0);
  const std::string csv = r.to_csv();
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "cost,mse,slope_fit");
  const auto again = convergence_study(LinearGaussianModel::scalar(), Design{1.0}, c, RngStream(2, 0));
  EXPECT_EQ(again.to_csv(), csv);
}

TEST(Study, RaoBlackwellRateOnProbit) {
  StudyConfig c;
  c.estimator = EstimatorId::rb;
  c.costs = {256, 1024, 4096, 16384, 65536};
  c.replicates = 100;
  c.oracle = oracle::probit_mi(0.0, 2.0, 1.0, 0.5);
  const auto r = convergence_study(ProbitThresholdModel(), Design{0.5}, c, RngStream(3, 0));
  EXPECT_GE(r.slope, -1.15);
  EXPECT_LE(r.slope, -0.85);
}

TEST(Study, LogLogSlopeOfExactPowerLaw) {
  std::vector<StudyRow> rows;
  for (double c : {10.0, 100.0, 1000.0}) rows.push_back({c, 3.0 * std::pow(c, -0.75)});
  EXPECT_NEAR(log_log_slope(rows), -0.75, 1e-12);
}
