#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "lgabc/samplers.hpp"
#include "test_support.hpp"

using namespace lgabc;
using support::vec;

namespace {

SummaryConstructor passthrough(Index m) {
  return SummaryConstructor::identity(Standardizer(Vector::Zero(m), Vector::Ones(m)));
}

struct Toy {
  GaussianToyModel model{1.0, 4};
  SummaryConstructor constructor = passthrough(2);
  Vector z_obs;

  explicit Toy(std::uint64_t seed) {
    Vector theta(1);
    theta << 0.6;
    z_obs = model.summaries(model.simulate_seeded(theta, seed));
  }
  SimulationContext ctx() const { return {model, constructor, z_obs}; }
};

FunctionModel nan_model() {
  ModelSpec spec;
  spec.parameter_names = {"a"};
  spec.prior = {PriorComponent::uniform(0.0, 1.0)};
  spec.raw_length = 1;
  spec.summary_dim = 1;
  spec.summary_id = "rigged-nan";
  return FunctionModel(
      spec, [](const VectorRef& t, Rng&) { return std::vector<double>{t(0)}; },
      [](std::span<const double>) { return Vector::Constant(1, std::numeric_limits<double>::quiet_NaN()); });
}

}  // namespace

TEST(Distance, HandCases) {
  EXPECT_EQ(distance(vec({1.0, 2.0}), vec({1.0, 2.0})), 0.0);
  EXPECT_EQ(distance(vec({0.0, 0.0}), vec({3.0, 4.0})), 5.0);
  EXPECT_EQ(distance(vec({1.0, -2.0}), vec({0.5, 7.0})), distance(vec({0.5, 7.0}), vec({1.0, -2.0})));
  EXPECT_THROW(distance(vec({1.0}), vec({1.0, 2.0})), InvalidArgument);
}

TEST(Rejection, HandRankedFivePointPool) {
  Matrix z(5, 1), th(5, 1);
  z << 3.0, -0.5, 2.0, 0.25, -4.0;
  th << 10.0, 11.0, 12.0, 13.0, 14.0;
  const RejectionResult r = rejection_abc(z, th, vec({0.0}), 2);
  ASSERT_EQ(r.accepted.size(), 2u);
  EXPECT_EQ(r.accepted[0].pool_index, 3);
  EXPECT_EQ(r.accepted[1].pool_index, 1);
  EXPECT_EQ(r.accepted[1].theta(0), 11.0);
  EXPECT_EQ(r.epsilon_effective, 0.5);
  EXPECT_EQ(r.total_simulated, 5);
}

TEST(Rejection, AcceptAllGivesMaxDistance) {
  Matrix z(3, 1);
  z << 1.0, -2.0, 0.5;
  const RejectionResult r = rejection_abc(z, Matrix::Zero(3, 1), vec({0.0}), 3);
  EXPECT_EQ(r.epsilon_effective, 2.0);
}

TEST(Rejection, ExactDuplicateFirstAndTiesByIndex) {
  Matrix z(4, 2);
  z << 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0;
  const RejectionResult r = rejection_abc(z, Matrix::Zero(4, 1), vec({1.0, 1.0}), 3);
  EXPECT_EQ(r.accepted[0].pool_index, 0);
  EXPECT_EQ(r.accepted[0].distance, 0.0);
  EXPECT_EQ(r.accepted[1].pool_index, 2);
  EXPECT_EQ(r.accepted[2].pool_index, 1);
}

TEST(Rejection, PoolTooSmall) {
  EXPECT_THROW(rejection_abc(Matrix::Zero(2, 1), Matrix::Zero(2, 1), vec({0.0}), 3), InvalidArgument);
}

TEST(Rejection, EffectiveEpsilonNonIncreasingInPoolSize) {
  std::mt19937_64 gen(2);
  const Matrix z = support::random_normal(2000, 3, gen);
  const Matrix th = Matrix::Zero(2000, 1);
  double prev = std::numeric_limits<double>::infinity();
  for (Index n = 100; n <= 2000; n += 100) {
    const double eps = rejection_abc(z.topRows(n), th.topRows(n), Vector::Zero(3), 20).epsilon_effective;
    EXPECT_LE(eps, prev);
    prev = eps;
  }
}

TEST(Rejection, NanDistancesRankLast) {
  Matrix z(3, 1);
  z << std::numeric_limits<double>::quiet_NaN(), 5.0, 1.0;
  const RejectionResult r = rejection_abc(z, Matrix::Zero(3, 1), vec({0.0}), 2);
  EXPECT_EQ(r.accepted[0].pool_index, 2);
  EXPECT_EQ(r.accepted[1].pool_index, 1);
}

TEST(Ess, HandCases) {
  EXPECT_DOUBLE_EQ(ess(Vector::Ones(7)), 7.0);
  EXPECT_DOUBLE_EQ(ess(vec({0.0, 0.3, 0.0})), 1.0);
  EXPECT_NEAR(ess(vec({0.5, 0.25, 0.25})), 1.0 / 0.375, 1e-12);
  EXPECT_NEAR(ess(vec({2.0, 1.0, 1.0})), 2.6666666666666665, 1e-12);
  EXPECT_THROW(ess(Vector::Zero(3)), InvalidArgument);
}

TEST(SystematicResample, HandCases) {
  std::vector<Index> all = systematic_resample_indices(Vector::Ones(5), 0.37);
  EXPECT_EQ(all, (std::vector<Index>{0, 1, 2, 3, 4}));
  EXPECT_EQ(systematic_resample_indices(vec({1.0, 0.0, 0.0, 0.0}), 0.9), (std::vector<Index>{0, 0, 0, 0}));
  EXPECT_EQ(systematic_resample_indices(vec({0.0, 0.0, 0.0, 2.0}), 0.0), (std::vector<Index>{3, 3, 3, 3}));
  // positions 0.025, 0.275, 0.525, 0.775 against cumulative (0.75, 1)
  EXPECT_EQ(systematic_resample_indices(vec({0.75, 0.25}), 0.1, 4), (std::vector<Index>{0, 0, 0, 1}));
}

TEST(SystematicResample, ZeroWeightsNeverSurviveAndCountsMatchExpectation) {
  std::mt19937_64 gen(3);
  std::uniform_real_distribution<double> unif;
  for (int t = 0; t < 200; ++t) {
    Vector w(12);
    for (Index i = 0; i < 12; ++i) w(i) = unif(gen) < 0.3 ? 0.0 : unif(gen);
    if (w.sum() == 0.0) w(5) = 1.0;
    w /= w.sum();
    const std::vector<Index> parents = systematic_resample_indices(w, unif(gen));
    std::vector<int> count(12, 0);
    for (Index p : parents) ++count[static_cast<std::size_t>(p)];
    for (Index i = 0; i < 12; ++i) {
      if (w(i) == 0.0) EXPECT_EQ(count[static_cast<std::size_t>(i)], 0);
      EXPECT_LE(std::abs(count[static_cast<std::size_t>(i)] - 12.0 * w(i)), 1.0 + 1e-9);
    }
  }
}

TEST(SystematicResample, ParticlesGetUniformWeights) {
  std::vector<Particle> ps(4);
  for (std::size_t i = 0; i < 4; ++i) {
    ps[i].theta = vec({static_cast<double>(i)});
    ps[i].weight = i == 2 ? 1.0 : 0.0;
  }
  Rng rng(1);
  const std::vector<Particle> out = systematic_resample(ps, rng);
  for (const auto& p : out) {
    EXPECT_EQ(p.theta(0), 2.0);
    EXPECT_EQ(p.weight, 0.25);
  }
}

TEST(Reweight, IndicatorCutNormalizes) {
  std::vector<Particle> ps(5);
  for (std::size_t i = 0; i < 5; ++i) {
    ps[i].weight = 0.2;
    ps[i].distance = static_cast<double>(i);
  }
  EXPECT_EQ(reweight(ps, 4.0, 2.0), 2.0);
  double total = 0.0;
  for (const auto& p : ps) total += p.weight;
  EXPECT_NEAR(total, 1.0, 1e-12);
  EXPECT_EQ(ps[3].weight, 0.0);
  EXPECT_NEAR(ps[0].weight, 1.0 / 3.0, 1e-15);
}

TEST(Reweight, HalvedCutRetriedOnceThenAborts) {
  std::vector<Particle> ps(2);
  ps[0] = {vec({0.0}), vec({0.0}), 0, 0.5, 3.0};
  ps[1] = {vec({0.0}), vec({0.0}), 0, 0.5, 4.0};
  std::vector<Particle> copy = ps;
  EXPECT_EQ(reweight(copy, 4.0, 2.0), 3.0);  // halfway back to 4 keeps particle 0
  EXPECT_EQ(copy[0].weight, 1.0);
  EXPECT_THROW(reweight(ps, 4.0, 1.0), DegeneracyError);
}

TEST(Smc, NoOpWhenTargetEqualsInitialTolerance) {
  const Toy toy(5);
  SmcOptions opt;
  opt.n_particles = 200;
  opt.eps_target = 1e9;
  const SmcState st = smc_abc(toy.ctx(), opt, 9);
  EXPECT_EQ(st.iteration, 0);
  EXPECT_EQ(st.stop_reason, "target");
  for (const auto& p : st.particles) EXPECT_DOUBLE_EQ(p.weight, 1.0 / 200.0);
}

TEST(Smc, MechanicsProperties) {
  const Toy toy(6);
  SmcOptions opt;
  opt.n_particles = 400;
  opt.max_rounds = 12;
  const SmcState st = smc_abc(toy.ctx(), opt, 21);
  ASSERT_GE(st.trace.size(), 3u);
  for (std::size_t r = 1; r < st.trace.size(); ++r) {
    EXPECT_LT(st.trace[r].epsilon, st.trace[r - 1].epsilon);
    EXPECT_GE(st.trace[r].acceptance_rate, 0.0);
    EXPECT_LE(st.trace[r].acceptance_rate, 1.0);
    EXPECT_GE(st.trace[r].ess, 1.0);
    EXPECT_LE(st.trace[r].ess, 400.0 + 1e-9);
    if (st.trace[r].resampled) EXPECT_EQ(st.trace[r].ess, 400.0);
    EXPECT_GT(st.trace[r].cumulative_simulations, st.trace[r - 1].cumulative_simulations);
  }
  EXPECT_NEAR(st.weights().sum(), 1.0, 1e-12);
  for (const auto& p : st.particles) {
    if (p.weight > 0.0) EXPECT_LE(p.distance, st.epsilon);
  }
}

TEST(Smc, IdenticalSeedsGiveIdenticalTracesAtAnyThreadCount) {
  const Toy toy(7);
  SmcOptions opt;
  opt.n_particles = 150;
  opt.max_rounds = 6;
  const SmcState a = smc_abc(toy.ctx(), opt, 33);
  opt.threads = 3;
  const SmcState b = smc_abc(toy.ctx(), opt, 33);
  ASSERT_EQ(a.trace.size(), b.trace.size());
  for (std::size_t r = 0; r < a.trace.size(); ++r) {
    EXPECT_EQ(a.trace[r].epsilon, b.trace[r].epsilon);
    EXPECT_EQ(a.trace[r].ess, b.trace[r].ess);
    EXPECT_EQ(a.trace[r].acceptance_rate, b.trace[r].acceptance_rate);
  }
  EXPECT_EQ(a.thetas(), b.thetas());
  EXPECT_EQ(a.weights(), b.weights());
}

TEST(Smc, RecoversConjugatePosteriorMean) {
  const Toy toy(8);
  SmcOptions opt;
  opt.n_particles = 1000;
  opt.max_rounds = 15;
  const SmcState st = smc_abc(toy.ctx(), opt, 44);
  const NormalPosterior post = gaussian_toy_posterior(1.0, toy.z_obs(0), 4);
  const double ess_final = ess(st.weights());
  EXPECT_LE(std::abs(st.posterior_mean()(0) - post.mean), 3.0 * std::sqrt(post.var / ess_final));
}

TEST(Smc, RiggedNanModelAborts) {
  const FunctionModel m = nan_model();
  const SummaryConstructor c = passthrough(1);
  const SimulationContext ctx{m, c, vec({0.5})};
  SmcOptions opt;
  opt.n_particles = 10;
  EXPECT_THROW(smc_abc(ctx, opt, 1), DegeneracyError);
}

TEST(Smc, FixedPriorCoordinatesNeverMove) {
  const RickerModel m(RickerSet::E0);
  std::mt19937_64 gen(1);
  Rng rng(2);
  const Vector theta_obs = m.sample_prior(rng);
  const Vector s_obs = m.summaries(m.simulate_seeded(theta_obs, 3));
  Matrix train(300, 13), tth(300, 3);
  for (Index i = 0; i < 300; ++i) {
    const Vector t = m.sample_prior(rng);
    tth.row(i) = t.transpose();
    train.row(i) = m.summaries(m.simulate_seeded(t, rng.next_u64())).transpose();
  }
  const SummaryConstructor c = fit_identity({train, tth});
  const SimulationContext ctx{m, c, c.transform(s_obs)};
  SmcOptions opt;
  opt.n_particles = 100;
  opt.max_rounds = 3;
  const SmcState st = smc_abc(ctx, opt, 5);
  for (const auto& p : st.particles) {
    EXPECT_EQ(p.theta(0), 3.8);
    EXPECT_EQ(p.theta(2), 10.0);
  }
}

TEST(SmcOptions, Validation) {
  SmcOptions opt;
  opt.n_particles = 1;
  EXPECT_THROW(opt.validate(), InvalidArgument);
  opt = SmcOptions{};
  opt.quantile = 1.0;
  EXPECT_THROW(opt.validate(), InvalidArgument);
  opt = SmcOptions{};
  opt.ess_fraction = 0.0;
  EXPECT_THROW(opt.validate(), InvalidArgument);
}

TEST(MoveParticles, OutOfSupportProposalsAreRejected) {
  // population pinned at the prior edge with a huge spread: most proposals leave [0, 1]
  ModelSpec spec;
  spec.parameter_names = {"a"};
  spec.prior = {PriorComponent::uniform(0.0, 1.0)};
  spec.raw_length = 1;
  spec.summary_dim = 1;
  spec.summary_id = "edge";
  const FunctionModel m(
      spec, [](const VectorRef& t, Rng&) { return std::vector<double>{t(0)}; },
      [](std::span<const double> raw) { return Vector::Constant(1, raw[0]); });
  const SummaryConstructor c = passthrough(1);
  const SimulationContext ctx{m, c, vec({0.5})};
  std::vector<Particle> ps(2);
  ps[0] = {vec({0.0}), vec({0.0}), 0, 0.5, 0.5};
  ps[1] = {vec({1.0}), vec({1.0}), 0, 0.5, 0.5};
  Index sims = 0;
  const double rate = move_particles(ps, ctx, 0.5, 1, 1, 200, 1, sims);
  EXPECT_GE(rate, 0.0);
  EXPECT_LE(rate, 1.0);
  EXPECT_LT(sims, 400);  // out-of-support proposals are not simulated
  for (const auto& p : ps) {
    EXPECT_GE(p.theta(0), 0.0);
    EXPECT_LE(p.theta(0), 1.0);
  }
}
