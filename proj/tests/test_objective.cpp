#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "support.hpp"

using namespace diffclip;
using namespace diffclip::testing;

namespace {

double loss_of(const Tensor& s) {
  Tape tape(false);
  return clip_loss(tape.constant(s)).value()[0];
}

// ½(row CE + column CE) with a max-shifted log-sum-exp, written out per entry.
double loss_oracle(const Tensor& s) {
  const std::size_t n = s.rows();
  const auto lse = [&](bool by_row, std::size_t i) {
    double m = -1e300;
    for (std::size_t j = 0; j < n; ++j) m = std::max(m, by_row ? s.at(i, j) : s.at(j, i));
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp((by_row ? s.at(i, j) : s.at(j, i)) - m);
    return m + std::log(z);
  };
  double ti = 0.0, it = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ti += lse(true, i) - s.at(i, i);
    it += lse(false, i) - s.at(i, i);
  }
  return 0.5 * (ti / n + it / n);
}

Tensor transposed(const Tensor& s) {
  Tensor t(Shape{s.cols(), s.rows()});
  for (std::size_t r = 0; r < s.rows(); ++r)
    for (std::size_t c = 0; c < s.cols(); ++c) t.at(c, r) = s.at(r, c);
  return t;
}

}  // namespace

TEST(SimilarityMatrix, SingleUnitVector) {
  Tape tape(false);
  Var u = tape.constant(Tensor::matrix(1, 2, {0.6, 0.8}));
  const SimilarityMatrix s = similarity_matrix(u, u, 0.07);
  EXPECT_NEAR(s.values.value()[0], 1.0 / 0.07, 1e-12);
  EXPECT_EQ(s.temperature, 0.07);
}

TEST(SimilarityMatrix, OrthonormalRowsGiveScaledIdentity) {
  Tape tape(false);
  Var u = tape.constant(Tensor::identity(3));
  const SimilarityMatrix s = similarity_matrix(u, u, 0.5);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(s.values.value().at(i, j), i == j ? 2.0 : 0.0);
}

TEST(SimilarityMatrix, MatchesDotProductOracle) {
  Rng rng(40);
  const Tensor u = random_unit_rows(3, 5, rng), v = random_unit_rows(3, 5, rng);
  Tape tape(false);
  const double tau = 0.2;
  const Tensor s = similarity_matrix(tape.constant(u), tape.constant(v), tau).values.value();
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double dot = 0.0;
      for (std::size_t c = 0; c < 5; ++c) dot += u.at(i, c) * v.at(j, c);
      EXPECT_NEAR(s.at(i, j), dot / tau, 1e-12);
      EXPECT_LE(std::abs(s.at(i, j)), 1.0 / tau + 1e-12);
    }
}

TEST(SimilarityMatrix, Errors) {
  Rng rng(41);
  Tape tape(false);
  Var u = tape.constant(random_unit_rows(3, 4, rng));
  EXPECT_THROW(similarity_matrix(u, u, 0.0), ConfigError);
  EXPECT_THROW(similarity_matrix(u, u, -1.0), ConfigError);
  EXPECT_THROW(similarity_matrix(u, tape.constant(Tensor::matrix(3, 4, {1, 1, 0, 0, 1, 0, 0, 0, 0, 0, 1, 0})), 1.0),
               NumericError);
  EXPECT_THROW(similarity_matrix(u, tape.constant(random_unit_rows(2, 4, rng)), 1.0), DimensionError);
}

TEST(SimilarityMatrix, LearnedScaleUsesExponential) {
  Rng rng(42);
  Tape tape(false);
  Var u = tape.constant(random_unit_rows(2, 3, rng));
  const SimilarityMatrix s = similarity_matrix_learned(u, u, tape.constant(Tensor::scalar(std::log(1.0 / 0.07))));
  EXPECT_NEAR(s.temperature, 0.07, 1e-15);
  EXPECT_NEAR(s.values.value().at(0, 0), 1.0 / 0.07, 1e-10);
}

TEST(ClipLoss, SingleLogitIsZero) { EXPECT_EQ(loss_of(Tensor::matrix(1, 1, {3.7})), 0.0); }

TEST(ClipLoss, ConstantMatrixGivesLogN) {
  for (std::size_t n = 2; n <= 8; ++n) EXPECT_NEAR(loss_of(Tensor(Shape{n, n}, 1.3)), std::log(double(n)), 1e-10);
}

TEST(ClipLoss, TwoByTwoMatchesOracle) {
  const Tensor s = Tensor::matrix(2, 2, {2, 0, 0, 2});
  // Each direction is -log(e²/(e²+1)) = log(1 + e⁻²).
  EXPECT_NEAR(loss_of(s), std::log1p(std::exp(-2.0)), 1e-12);
  EXPECT_NEAR(loss_of(s), loss_oracle(s), 1e-12);
}

TEST(ClipLoss, RandomMatricesMatchOracle) {
  Rng rng(43);
  for (std::size_t trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + trial % 8;
    const Tensor s = random_tensor(Shape{n, n}, rng, -20.0, 20.0);
    EXPECT_NEAR(loss_of(s), loss_oracle(s), 1e-12);
    EXPECT_GE(loss_of(s), 0.0);
  }
}

TEST(ClipLoss, ApproachesZeroUnderDiagonalDominance) {
  double prev = 1e9;
  for (double d : {1.0, 5.0, 20.0, 100.0}) {
    Tensor s = Tensor::identity(4);
    for (double& v : s.data()) v *= d;
    const double l = loss_of(s);
    EXPECT_LT(l, prev);
    prev = l;
  }
  EXPECT_LT(prev, 1e-40);
}

TEST(ClipLoss, PermutationTransposeAndShiftProperties) {
  Rng rng(44);
  for (std::size_t trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + trial % 7;
    const Tensor s = random_tensor(Shape{n, n}, rng, -10.0, 10.0);
    const double base = loss_of(s);

    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    Tensor p(Shape{n, n});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) p.at(i, j) = s.at(perm[i], perm[j]);
    EXPECT_NEAR(loss_of(p), base, 1e-12);

    EXPECT_NEAR(loss_of(transposed(s)), base, 1e-12);

    const double c = std::uniform_real_distribution<double>(-50.0, 50.0)(rng);
    Tensor shifted = s;
    for (double& v : shifted.data()) v += c;
    EXPECT_NEAR(loss_of(shifted), base, 1e-10);
  }
}

TEST(ClipLoss, StableForLargeLogits) {
  const Tensor s = Tensor::matrix(2, 2, {1000, -1000, 900, 1000});
  const double l = loss_of(s);
  EXPECT_TRUE(std::isfinite(l));
  EXPECT_NEAR(l, loss_oracle(s), 1e-12);
}

TEST(ClipLoss, RejectsNonSquare) {
  Tape tape(false);
  EXPECT_THROW(clip_loss(tape.constant(Tensor(Shape{2, 3}, 0.0))), DimensionError);
}

TEST(ClipLoss, GradientMatchesFiniteDifferences) {
  Rng rng(45);
  for (std::size_t trial = 0; trial < 10; ++trial) {
    const Tensor s = random_tensor(Shape{4, 4}, rng, -3.0, 3.0);
    const double err = gradient_error([](Tape&, const std::vector<Var>& v) { return clip_loss(v[0]); }, {s});
    EXPECT_LT(err, 1e-6);
  }
}

TEST(ClipLoss, GradientThroughLearnedTemperature) {
  Rng rng(46);
  const Tensor u = random_unit_rows(3, 4, rng), v = random_unit_rows(3, 4, rng);
  const double err = gradient_error(
      [](Tape&, const std::vector<Var>& x) {
        return clip_loss(similarity_matrix_learned(l2_normalize(x[0], 1), l2_normalize(x[1], 1), x[2]));
      },
      {u, v, Tensor::scalar(1.5)});
  EXPECT_LT(err, 1e-6);
}
