#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "lgabc/crossval.hpp"
#include "lgabc/summaries.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace lgabc;
using support::random_normal;
using support::to_std;
using support::unit;

namespace {

TrainingSet synthetic(std::uint64_t seed, Index n, Index m) {
  std::mt19937_64 gen(seed);
  TrainingSet ts{random_normal(n, m, gen), Matrix()};
  ts.parameters = ts.summaries.col(0);
  return ts;
}

SummaryConstructor round_trip(const SummaryConstructor& c) {
  std::stringstream ss;
  c.save(ss);
  return SummaryConstructor::load(ss);
}

}  // namespace

TEST(Identity, StandardizesAndIsDeterministic) {
  const TrainingSet ts = synthetic(1, 40, 3);
  const SummaryConstructor c = fit_identity(ts);
  EXPECT_EQ(c.output_dim(), 3);
  const Vector mean = ts.summaries.colwise().mean().transpose();
  EXPECT_LE(c.transform(mean).cwiseAbs().maxCoeff(), 1e-14);
  const Vector s = ts.summaries.row(7).transpose();
  EXPECT_EQ(c.transform(s), c.transform(s));
}

TEST(Identity, UnscaledIsPassthrough) {
  const TrainingSet ts = synthetic(2, 10, 4);
  const Vector s = ts.summaries.row(3).transpose();
  EXPECT_EQ(fit_identity_unscaled(ts).transform(s), s);
}

TEST(LeastSquares, ExactLinearRecovery) {
  std::mt19937_64 gen(3);
  const Matrix x = random_normal(30, 3, gen);
  const Matrix y = (2.0 * x.col(0)).array() + 1.0;
  const RegressionFit fit = fit_least_squares(x, y);
  EXPECT_NEAR(fit.coefficients(0, 0), 1.0, 1e-8);
  EXPECT_NEAR(fit.coefficients(1, 0), 2.0, 1e-8);
  EXPECT_NEAR(fit.coefficients(2, 0), 0.0, 1e-8);
  EXPECT_NEAR(fit.coefficients(3, 0), 0.0, 1e-8);
  EXPECT_FALSE(fit.ridge_fallback);
}

TEST(LeastSquares, ConstantResponse) {
  std::mt19937_64 gen(4);
  const Matrix x = random_normal(20, 2, gen);
  const RegressionFit fit = fit_least_squares(x, Matrix::Constant(20, 1, -3.5));
  EXPECT_NEAR(fit.coefficients(0, 0), -3.5, 1e-10);
  EXPECT_LE(fit.coefficients.bottomRows(2).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(LeastSquares, ResidualOrthogonalToDesign) {
  std::mt19937_64 gen(5);
  const Matrix x = random_normal(50, 4, gen);
  const Matrix y = random_normal(50, 2, gen);
  const RegressionFit fit = fit_least_squares(x, y);
  Matrix design(50, 5);
  design.col(0).setOnes();
  design.rightCols(4) = x;
  const Matrix resid = y - design * fit.coefficients;
  EXPECT_LE((design.transpose() * resid).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(LeastSquares, UniformWeightsEqualOrdinary) {
  std::mt19937_64 gen(6);
  const Matrix x = random_normal(25, 2, gen);
  const Matrix y = random_normal(25, 1, gen);
  const Vector w = Vector::Constant(25, 0.37);
  EXPECT_LE((fit_least_squares(x, y, w).coefficients - fit_least_squares(x, y).coefficients).cwiseAbs().maxCoeff(),
            1e-12);
}

TEST(LeastSquares, RankDeficientFallsBackToRidge) {
  std::mt19937_64 gen(7);
  Matrix x = random_normal(20, 3, gen);
  x.col(2) = x.col(0);
  const RegressionFit fit = fit_least_squares(x, x.col(1));
  EXPECT_TRUE(fit.ridge_fallback);
  EXPECT_FALSE(fit.deficient_columns.empty());
  EXPECT_TRUE(fit.coefficients.allFinite());
}

TEST(LinearConstructor, NoiselessDataHasTinyResidual) {
  std::mt19937_64 gen(8);
  TrainingSet ts{random_normal(60, 3, gen), Matrix(60, 2)};
  ts.parameters.col(0) = 3.0 * ts.summaries.col(1) - ts.summaries.col(2);
  ts.parameters.col(1) = (0.5 * ts.summaries.col(0)).array() + 4.0;
  const SummaryConstructor c = fit_linear_posterior_mean(ts);
  EXPECT_EQ(c.output_dim(), 2);
  for (Index i = 0; i < 60; ++i) {
    EXPECT_LE((c.posterior_mean(ts.summaries.row(i).transpose()) - ts.parameters.row(i).transpose()).norm(), 1e-8);
  }
}

TEST(LinearConstructor, LocalFitOnExactLinearDataMatchesPlain) {
  std::mt19937_64 gen(9);
  TrainingSet ts{random_normal(80, 2, gen), Matrix()};
  ts.parameters = (1.5 * ts.summaries.col(0) - 0.25 * ts.summaries.col(1)).array() + 2.0;
  const SummaryConstructor plain = fit_linear_posterior_mean(ts);
  const SummaryConstructor local = fit_linear_posterior_mean(ts, true, 0.5, Vector(ts.summaries.row(0).transpose()));
  EXPECT_LE((local.regression().coefficients - plain.regression().coefficients).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_THROW(fit_linear_posterior_mean(ts, true), InvalidArgument);
  TrainingSet tiny = ts;
  tiny.summaries.conservativeResize(3, 2);
  tiny.parameters.conservativeResize(3, 1);
  EXPECT_THROW(fit_linear_posterior_mean(tiny), InvalidArgument);
}

TEST(LgkdrConstructor, FullDimensionIsRotation) {
  const TrainingSet ts = synthetic(10, 80, 4);
  const SummaryConstructor c = fit_lgkdr(ts, Vector::Zero(4), GkdrConfig{{2.0, 1.0, 1e-3}, 4, 0.5, {}});
  const Standardizer& st = c.standardizer();
  for (Index i = 0; i < 10; ++i) {
    const Vector s = ts.summaries.row(i).transpose();
    EXPECT_NEAR(c.transform(s).norm(), st.apply(s).norm(), 1e-8);
  }
}

TEST(LgkdrConstructor, OutputCorrelatesWithRelevantCoordinate) {
  const TrainingSet ts = synthetic(11, 500, 5);
  const KernelParams kp{median_heuristic(Standardizer::fit(ts.summaries).apply_rows(ts.summaries)), 1.0, 1e-3};
  const SummaryConstructor c = fit_lgkdr(ts, Vector::Zero(5), GkdrConfig{kp, 1, 1.0, {}});
  const Matrix z = c.transform_rows(ts.summaries);
  const Vector a = z.col(0).array() - z.col(0).mean();
  const Vector b = ts.summaries.col(0).array() - ts.summaries.col(0).mean();
  EXPECT_GT(std::abs(a.dot(b)) / (a.norm() * b.norm()), 0.9);
}

TEST(LgkdrConstructor, AutoDimensionWithinBounds) {
  const TrainingSet ts = synthetic(12, 120, 6);
  const SummaryConstructor c = fit_lgkdr(ts, Vector::Zero(6), GkdrConfig{{3.0, 1.0, 1e-3}, std::nullopt, 0.5, {}});
  EXPECT_GE(c.output_dim(), 1);
  EXPECT_LE(c.output_dim(), 6);
  EXPECT_EQ(c.output_dim(), choose_dimension(c.eigenvalues()));
}

TEST(Separated, SingleIndexEqualsSeparatedProjection) {
  std::mt19937_64 gen(13);
  TrainingSet ts{random_normal(150, 4, gen), Matrix(150, 2)};
  ts.parameters.col(0) = ts.summaries.col(0);
  ts.parameters.col(1) = ts.summaries.col(1);
  const GkdrConfig cfg{{2.5, 1.0, 1e-3}, 2, 1.0, {}};
  const SummaryConstructor comp = fit_separated(ts, Vector::Zero(4), cfg, {1});
  GkdrConfig single = cfg;
  single.response_index = 1;
  EXPECT_EQ(comp.focus_child(1).projection().matrix(), fit_lgkdr(ts, Vector::Zero(4), single).projection().matrix());
  EXPECT_THROW(comp.focus_child(0), InvalidArgument);
  EXPECT_THROW(fit_separated(ts, Vector::Zero(4), cfg, {2}), InvalidArgument);
}

TEST(Separated, SingleParameterEqualsPlainLgkdr) {
  const TrainingSet ts = synthetic(14, 90, 3);
  const GkdrConfig cfg{{2.0, 1.0, 1e-3}, 2, 0.5, {}};
  const SummaryConstructor comp = fit_separated(ts, Vector::Zero(3), cfg, {0});
  const SummaryConstructor plain = fit_lgkdr(ts, Vector::Zero(3), cfg);
  const Vector s = ts.summaries.row(4).transpose();
  EXPECT_EQ(comp.transform(s), plain.transform(s));
}

TEST(Separated, ChildrenRecoverDistinctAxes) {
  std::mt19937_64 gen(15);
  TrainingSet ts{random_normal(400, 4, gen), Matrix(400, 2)};
  ts.parameters.col(0) = ts.summaries.col(0);
  ts.parameters.col(1) = ts.summaries.col(1);
  const GkdrConfig cfg{{median_heuristic(ts.summaries), 1.0, 1e-3}, 1, 1.0, {}};
  const SummaryConstructor comp = fit_separated(ts, Vector::Zero(4), cfg, {0, 1});
  EXPECT_EQ(comp.output_dim(), 2);
  EXPECT_LT(oracle::line_angle(to_std(comp.focus_child(0).projection().matrix().col(0)), to_std(unit(4, 0))), 0.15);
  EXPECT_LT(oracle::line_angle(to_std(comp.focus_child(1).projection().matrix().col(0)), to_std(unit(4, 1))), 0.15);
}

TEST(Persistence, EveryKindRoundTripsBitwise) {
  std::mt19937_64 gen(16);
  TrainingSet ts{random_normal(70, 3, gen) * 3.0, Matrix(70, 2)};
  ts.parameters.col(0) = ts.summaries.col(0).array().sin();
  ts.parameters.col(1) = ts.summaries.col(2);
  const GkdrConfig cfg{{2.0, 1.0, 1e-3}, 2, 0.5, {}};
  const std::vector<SummaryConstructor> all{fit_identity(ts), fit_identity_unscaled(ts), fit_linear_posterior_mean(ts),
                                            fit_lgkdr(ts, Vector::Zero(3), cfg),
                                            fit_separated(ts, Vector::Zero(3), cfg, {0, 1})};
  for (const auto& c : all) {
    const SummaryConstructor back = round_trip(c);
    EXPECT_EQ(back.kind(), c.kind());
    EXPECT_EQ(back.output_dim(), c.output_dim());
    for (Index i = 0; i < 5; ++i) {
      const Vector s = ts.summaries.row(i).transpose();
      EXPECT_EQ(back.transform(s), c.transform(s)) << SummaryConstructor::kind_name(c.kind());
    }
  }
}

TEST(Persistence, RejectsUnknownKindAndVersion) {
  std::stringstream a("lgabc-summary 1\nkind mystery\nstandardizer 1\n0\n1\n");
  EXPECT_THROW(SummaryConstructor::load(a), InvalidArgument);
  std::stringstream b("lgabc-summary 9\n");
  EXPECT_THROW(SummaryConstructor::load(b), InvalidArgument);
}

TEST(NearestSubset, PicksClosestRowsInStandardizedSpace) {
  TrainingSet ts;
  ts.summaries.resize(5, 2);
  ts.summaries << 0.0, 0.0, 1.0, 0.0, 0.0, 100.0, 2.0, 0.0, 0.0, -100.0;
  ts.parameters = Vector::LinSpaced(5, 0.0, 4.0);
  const TrainingSet near = nearest_subset(ts, Vector::Zero(2), 3);
  ASSERT_EQ(near.size(), 3);
  EXPECT_EQ(near.parameters(0, 0), 0.0);
  EXPECT_THROW(nearest_subset(ts, Vector::Zero(2), 1), InvalidArgument);
  EXPECT_THROW(nearest_subset(ts, Vector::Zero(2), 6), InvalidArgument);
}
