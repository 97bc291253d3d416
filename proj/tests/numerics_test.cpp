#include "fflab/errors.hpp"
#include "fflab/numerics.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

using namespace fflab;

TEST(LogOdds, HalfIsZero) { EXPECT_EQ(log_odds(Probability(0.5)).nats, 0.0); }

TEST(LogOdds, NinetyNinePercentIsAboutTwoDits) {
  const LogOdds lo = log_odds(Probability(0.99));
  EXPECT_NEAR(lo.nats, 4.59512, 1e-5);
  EXPECT_NEAR(lo.dits(), 2.0, 0.01);
}

TEST(LogOdds, NinetyPercentIsLnNine) {
  EXPECT_NEAR(log_odds(Probability(0.9)).nats, std::log(0.9 / 0.1), 1e-12);
}

TEST(LogOdds, EndpointsSaturate) {
  const LogOdds zero = log_odds(Probability(0.0));
  const LogOdds one = log_odds(Probability(1.0));
  EXPECT_TRUE(zero.saturated);
  EXPECT_TRUE(one.saturated);
  EXPECT_EQ(zero.nats, -std::numeric_limits<double>::infinity());
  EXPECT_EQ(one.nats, std::numeric_limits<double>::infinity());
}

TEST(LogOdds, NanAndOutOfRangeRejected) {
  EXPECT_THROW(Probability(std::nan("")), DomainError);
  EXPECT_THROW(Probability(-0.1), DomainError);
  EXPECT_THROW(Probability(1.5), DomainError);
}

TEST(LogBayesFactor, IdentityIsZero) { EXPECT_EQ(log_bayes_factor(Probability(0.3), Probability(0.3)).nats, 0.0); }

TEST(LogBayesFactor, FourDitExamples) {
  EXPECT_NEAR(log_bayes_factor(Probability(0.99), Probability(0.999999)).dits(), 4.0, 0.01);
  // the mirror image of 0.99 -> 0.999999 is 0.01 -> 0.000001, exactly negated
  const double up = log_bayes_factor(Probability(0.99), Probability(0.999999)).nats;
  EXPECT_NEAR(log_bayes_factor(Probability(0.01), Probability(0.000001)).nats, -up, 1e-9);
  // 0.01 -> 1e-7 is one decade further: log10(1e-7 / (1 - 1e-7)) - log10(0.01 / 0.99)
  const double direct = std::log10(1e-7 / (1 - 1e-7)) - std::log10(0.01 / 0.99);
  EXPECT_NEAR(log_bayes_factor(Probability(0.01), Probability(0.0000001)).dits(), direct, 1e-9);
}

TEST(LogBayesFactor, Additive) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(1e-6, 1 - 1e-6);
  for (int i = 0; i < 200; ++i) {
    const Probability a(u(rng)), b(u(rng)), c(u(rng));
    EXPECT_NEAR(log_bayes_factor(a, b).nats + log_bayes_factor(b, c).nats, log_bayes_factor(a, c).nats, 1e-9);
  }
}

TEST(LogBayesFactor, EndpointFlagged) { EXPECT_TRUE(log_bayes_factor(Probability(0.5), Probability(1.0)).saturated); }

TEST(Softmax, Uniform) {
  const Vector p = softmax(Vector::Zero(3));
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(p[i], 1.0 / 3.0, 1e-15);
}

TEST(Softmax, LnFourExample) {
  Vector x(3);
  x << std::log(4.0), 0.0, 0.0;
  // brute-force normalization
  const double z = 4.0 + 1.0 + 1.0;
  const Vector p = softmax(x);
  EXPECT_NEAR(p[0], 4.0 / z, 1e-15);
  EXPECT_NEAR(p[1], 1.0 / z, 1e-15);
  EXPECT_NEAR(p[0], 2.0 / 3.0, 1e-15);
}

TEST(Softmax, ShiftInvariantAndNormalized) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> g(0, 10);
  for (int t = 0; t < 50; ++t) {
    Vector x(17);
    for (int i = 0; i < 17; ++i) x[i] = g(rng);
    const Vector a = softmax(x);
    const Vector b = softmax((x.array() + 123.5).matrix());
    EXPECT_NEAR(a.sum(), 1.0, 1e-12);
    EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_GT(a.minCoeff(), 0.0);
  }
}

TEST(Softmax, RejectsEmptyAndNonFinite) {
  EXPECT_THROW(softmax(Vector()), DomainError);
  Vector x = Vector::Zero(2);
  x[1] = std::numeric_limits<double>::infinity();
  EXPECT_THROW(softmax(x), DomainError);
}

TEST(LogitBump, LnFourOnUniform) {
  EXPECT_NEAR(logit_bump_shift(Vector::Zero(3), 0, std::log(4.0)).nats, std::log(4.0), 1e-12);
}

TEST(LogitBump, ZeroShift) {
  Vector x(4);
  x << 1, -2, 0.5, 3;
  EXPECT_EQ(logit_bump_shift(x, 2, 0.0).nats, 0.0);
}

TEST(LogitBump, TheoremOneProperty) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> g(0, 3);
  std::uniform_int_distribution<int> len(2, 40);
  std::uniform_real_distribution<double> shift(-8, 8);
  for (int t = 0; t < 1000; ++t) {
    Vector x(len(rng));
    for (Eigen::Index i = 0; i < x.size(); ++i) x[i] = g(rng);
    const auto i = std::uniform_int_distribution<Eigen::Index>(0, x.size() - 1)(rng);
    const double c = shift(rng);
    // oracle: two independent softmaxes, log-odds of coordinate i
    Vector y = x;
    y[i] += c;
    auto lo = [&](const Vector& v) {
      const double m = v.maxCoeff();
      double num = std::exp(v[i] - m), den = 0;
      for (Eigen::Index j = 0; j < v.size(); ++j)
        if (j != i) den += std::exp(v[j] - m);
      return std::log(num / den);
    };
    EXPECT_NEAR(lo(y) - lo(x), c, 1e-9);
    EXPECT_NEAR(logit_bump_shift(x, i, c).nats, c, 1e-9);
  }
}

TEST(ClassLogOdds, MatchesProbabilityForm) {
  Vector x(6);
  x << 1, 2, 0.5, -1, 3, 0;
  const std::vector<int> cls = {1, 4};
  const double p = class_probability(x, cls);
  EXPECT_NEAR(class_log_odds(x, cls).nats, std::log(p / (1 - p)), 1e-12);
  const std::vector<int> everything = {0, 1, 2, 3, 4, 5};
  EXPECT_TRUE(class_log_odds(x, everything).saturated);
  EXPECT_NEAR(class_probability(x, everything), 1.0, 1e-15);
}

TEST(ClassLogOdds, StaysFiniteWhenProbabilityRoundsToOne) {
  Vector x = Vector::Zero(4);
  x[0] = 60;
  const std::vector<int> cls = {0};
  const LogOdds lo = class_log_odds(x, cls);
  EXPECT_FALSE(lo.saturated);
  EXPECT_NEAR(lo.nats, 60 - std::log(3.0), 1e-9);
}

TEST(RmsNorm, UnitRmsUnchanged) {
  Vector x(4);
  x << 1, -1, 1, -1;
  const Vector y = rms_normalize(x, Vector::Ones(4));
  EXPECT_LT((y - x).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(RmsNorm, ScaleInvariantAndUnitRms) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> g(0, 4);
  Vector x(32), gain(32);
  for (int i = 0; i < 32; ++i) {
    x[i] = g(rng);
    gain[i] = 0.5 + std::abs(g(rng));
  }
  const Vector a = rms_normalize(x, Vector::Ones(32));
  const Vector b = rms_normalize(2 * x, Vector::Ones(32));
  EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-6);
  const Vector y = rms_normalize(x, gain).cwiseQuotient(gain);
  EXPECT_NEAR(std::sqrt(y.squaredNorm() / 32), 1.0, 1e-6);
}

TEST(RmsNorm, ZeroVectorGuarded) {
  const Vector y = rms_normalize(Vector::Zero(8), Vector::Ones(8));
  EXPECT_TRUE(y.allFinite());
  EXPECT_EQ(y.squaredNorm(), 0.0);
}

TEST(RmsNorm, DimensionMismatch) { EXPECT_THROW(rms_normalize(Vector::Ones(3), Vector::Ones(4)), InputError); }

TEST(Rope, PositionZeroIsIdentity) {
  Vector x(8);
  x << 1, 2, 3, 4, 5, 6, 7, 8;
  EXPECT_EQ(rope_apply(x, 0), x);
}

TEST(Rope, NormPreserved) {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> g(0, 1);
  Vector x(16);
  for (int i = 0; i < 16; ++i) x[i] = g(rng);
  for (int pos : {1, 7, 63, 1000}) EXPECT_NEAR(rope_apply(x, pos).norm(), x.norm(), 1e-9);
}

TEST(Rope, DotDependsOnOffsetOnly) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> g(0, 1);
  const int d = 16;
  Vector x(d), y(d);
  for (int i = 0; i < d; ++i) {
    x[i] = g(rng);
    y[i] = g(rng);
  }
  // oracle: per pair, dot of rotated 2-vectors = |x||y| cos(angle difference)
  auto direct = [&](int m, int n) {
    double total = 0;
    for (int j = 0; j < d / 2; ++j) {
      const double th = std::pow(10000.0, -2.0 * j / d);
      const double ax = std::atan2(x[2 * j + 1], x[2 * j]) + m * th;
      const double ay = std::atan2(y[2 * j + 1], y[2 * j]) + n * th;
      total += std::hypot(x[2 * j], x[2 * j + 1]) * std::hypot(y[2 * j], y[2 * j + 1]) * std::cos(ax - ay);
    }
    return total;
  };
  for (auto [m, n] : std::vector<std::pair<int, int>>{{5, 2}, {13, 10}, {3, 0}, {40, 37}}) {
    const double got = rope_apply(x, m).dot(rope_apply(y, n));
    EXPECT_NEAR(got, direct(m, n), 1e-9);
    EXPECT_NEAR(got, rope_apply(x, 3).dot(y), 1e-9);
  }
}

TEST(Rope, OddDimensionRejected) { EXPECT_THROW(rope_apply(Vector::Ones(5), 1), ConstructionError); }
