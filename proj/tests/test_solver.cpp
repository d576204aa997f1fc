#include <gtest/gtest.h>

#include <random>

#include "spat/solver.hpp"

namespace spat {
namespace {

Matrix random_matrix(Index r, Index c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n;
  return Matrix::NullaryExpr(r, c, [&] { return n(rng); });
}

Matrix normal_equations_left(const Matrix& A, const Matrix& B, double lambda) {
  const Matrix N = A.transpose() * A + lambda * Matrix::Identity(A.cols(), A.cols());
  return N.ldlt().solve(A.transpose() * B);
}

double rel(const Matrix& a, const Matrix& b) { return (a - b).norm() / b.norm(); }

TEST(Ridge, IdentityNoRegularization) {
  const auto f = ridge_factorize(Matrix::Identity(2, 2), 0.0);
  Matrix B(2, 3);
  B << 1, 2, 3, 4, 5, 6;
  EXPECT_LT((f.solve_left(B) - B).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Ridge, IdentityUnitLambdaHalves) {
  const auto f = ridge_factorize(Matrix::Identity(2, 2), 1.0);
  Matrix B(2, 2);
  B << 2, -4, 1, 8;
  EXPECT_LT((ridge_solve_left(f, B) - 0.5 * B).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Ridge, LeftMatchesNormalEquations) {
  const Matrix A = random_matrix(20, 5, 1), B = random_matrix(20, 3, 2);
  const auto f = ridge_factorize(A, 0.1);
  EXPECT_LT(rel(ridge_solve_left(f, B), normal_equations_left(A, B, 0.1)), 1e-10);
}

TEST(Ridge, RightMatchesNormalEquations) {
  const Matrix A = random_matrix(20, 5, 3), B = random_matrix(4, 20, 4);
  const auto f = ridge_factorize(A, 0.1);
  const Matrix oracle =
      B * A * (A.transpose() * A + 0.1 * Matrix::Identity(5, 5)).inverse();
  EXPECT_LT(rel(ridge_solve_right(f, B), oracle), 1e-10);
}

TEST(Ridge, ZeroRightHandSide) {
  const auto f = ridge_factorize(random_matrix(8, 3, 5), 0.5);
  EXPECT_EQ(f.solve_left(Matrix::Zero(8, 2)), Matrix::Zero(3, 2));
}

TEST(Ridge, ConsistentSystemsRecoverSolution) {
  const Matrix A = random_matrix(12, 4, 6), X = random_matrix(4, 3, 7);
  const auto f = ridge_factorize(A, 0.0);
  EXPECT_LT(rel(f.solve_left(A * X), X), 1e-10);
  const Matrix Xr = random_matrix(5, 4, 8);
  EXPECT_LT(rel(f.solve_right(Xr * A.transpose()), Xr), 1e-10);
}

TEST(Ridge, StackedResidualOrthogonality) {
  const Matrix A = random_matrix(15, 6, 9), B = random_matrix(15, 2, 10);
  const double lambda = 0.3;
  const auto f = ridge_factorize(A, lambda);
  const Matrix M = f.solve_left(B);
  Matrix stacked(21, 6);
  stacked << A, std::sqrt(lambda) * Matrix::Identity(6, 6);
  Matrix rhs = Matrix::Zero(21, 2);
  rhs.topRows(15) = B;
  EXPECT_LT((stacked.transpose() * (stacked * M - rhs)).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Ridge, RightSolveIsTransposedLeftSolve) {
  const Matrix A = random_matrix(10, 4, 11), B = random_matrix(3, 10, 12);
  const auto f = ridge_factorize(A, 0.2);
  EXPECT_EQ(f.solve_right(B), Matrix(f.solve_left(B.transpose()).transpose()));
}

TEST(Ridge, FactorizationReuseMatchesFreshFactorizations) {
  const Matrix A = random_matrix(18, 7, 13);
  const Matrix B1 = random_matrix(18, 18, 14);
  const auto shared = ridge_factorize(A, 0.05);
  const Matrix m2 = shared.solve_left(B1);
  const Matrix m3 = shared.solve_right(m2);
  const Matrix m2_fresh = ridge_factorize(A, 0.05).solve_left(B1);
  const Matrix m3_fresh = ridge_factorize(A, 0.05).solve_right(m2_fresh);
  EXPECT_LE(rel(m3, m3_fresh), 1e-12);
}

TEST(Ridge, ModeratelyIllConditionedOracle) {
  Matrix A = random_matrix(30, 6, 15);
  Eigen::JacobiSVD<Matrix> svd(A, Eigen::ComputeThinU | Eigen::ComputeThinV);
  Vector s(6);
  s << 1.0, 1e-1, 1e-2, 1e-3, 1e-4, 1e-5;
  A = svd.matrixU() * s.asDiagonal() * svd.matrixV().transpose();
  const Matrix B = random_matrix(30, 2, 16);
  const double lambda = 1e-6;
  EXPECT_LT(rel(ridge_factorize(A, lambda).solve_left(B), normal_equations_left(A, B, lambda)),
            1e-8);
}

TEST(Ridge, Errors) {
  Matrix deficient = random_matrix(6, 3, 17);
  deficient.col(2) = deficient.col(0) + deficient.col(1);
  EXPECT_THROW(ridge_factorize(deficient, 0.0), RankDeficient);
  EXPECT_NO_THROW(ridge_factorize(deficient, 1e-3));
  EXPECT_THROW(ridge_factorize(random_matrix(2, 3, 18), 0.0), RankDeficient);
  EXPECT_THROW(ridge_factorize(Matrix::Identity(2, 2), -1.0), InvalidArgument);
  const auto f = ridge_factorize(Matrix::Identity(3, 3), 0.0);
  EXPECT_THROW(f.solve_left(Matrix::Zero(4, 1)), DimensionMismatch);
  EXPECT_THROW(f.solve_right(Matrix::Zero(1, 4)), DimensionMismatch);
}

TEST(Symmetrize, Examples) {
  Matrix m(2, 2);
  m << 0, 1, 0, 0;
  Matrix expected(2, 2);
  expected << 0, 0.5, 0.5, 0;
  EXPECT_EQ(symmetrize(m).matrix(), expected);
  const Matrix s = random_matrix(4, 4, 19);
  const Matrix sym = s + s.transpose();
  EXPECT_EQ(symmetrize(sym).matrix(), sym);
  const auto once = symmetrize(s);
  EXPECT_EQ(symmetrize(once.matrix()).matrix(), once.matrix());
  EXPECT_THROW(symmetrize(Matrix::Zero(2, 3)), DimensionMismatch);
  EXPECT_THROW(SymmetricMatrix::from_symmetric(m), InvalidArgument);
}

SymmetricMatrix random_psd(Index n, std::uint64_t seed) {
  const Matrix B = random_matrix(n, n, seed);
  return symmetrize(B * B.transpose());
}

TEST(ProjectPsd, PsdInputUnchanged) {
  const auto m = random_psd(5, 20);
  EXPECT_LT((project_psd(m).matrix() - m.matrix()).cwiseAbs().maxCoeff(),
            1e-12 * m.matrix().norm());
}

TEST(ProjectPsd, DiagonalClip) {
  Matrix d = Matrix::Zero(2, 2);
  d(0, 0) = 3.0;
  d(1, 1) = -2.0;
  Matrix expected = Matrix::Zero(2, 2);
  expected(0, 0) = 3.0;
  EXPECT_LT((project_psd(symmetrize(d)).matrix() - expected).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(ProjectPsd, IdempotentAndNonNegative) {
  const auto m = symmetrize(random_matrix(6, 6, 21));
  const auto p = project_psd(m);
  EXPECT_GE(min_eigenvalue(p), -1e-10 * eigen_decompose(m).spectral_norm());
  EXPECT_LT((project_psd(p).matrix() - p.matrix()).norm(), 1e-12 * p.matrix().norm());
}

TEST(ProjectPsd, RandomizedMinimality) {
  const auto m = symmetrize(random_matrix(3, 3, 22));
  const double best = (project_psd(m).matrix() - m.matrix()).norm();
  std::mt19937_64 rng(23);
  std::normal_distribution<double> n;
  for (int trial = 0; trial < 10000; ++trial) {
    const Matrix B = Matrix::NullaryExpr(3, 3, [&] { return n(rng); });
    const Matrix P = B * B.transpose() * (0.5 + 0.1 * (trial % 20));
    ASSERT_LE(best, (P - m.matrix()).norm()) << trial;
  }
}

TEST(PsdSqrt, Examples) {
  EXPECT_LT((psd_sqrt(symmetrize(Matrix::Identity(3, 3))).matrix() - Matrix::Identity(3, 3))
                .cwiseAbs()
                .maxCoeff(),
            1e-15);
  Matrix d = Matrix::Zero(2, 2);
  d(0, 0) = 4.0;
  d(1, 1) = 9.0;
  Matrix expected = Matrix::Zero(2, 2);
  expected(0, 0) = 2.0;
  expected(1, 1) = 3.0;
  EXPECT_LT((psd_sqrt(symmetrize(d)).matrix() - expected).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(PsdSqrt, SquaresBackAndCommutes) {
  const auto m = random_psd(8, 24);
  const Matrix s = psd_sqrt(m).matrix();
  EXPECT_LT(rel(s * s, m.matrix()), 1e-8);
  EXPECT_LE((s * m.matrix() - m.matrix() * s).norm(), 1e-8 * m.matrix().norm() * s.norm());
  EXPECT_GE(min_eigenvalue(psd_sqrt(m)), -1e-12 * s.norm());
}

TEST(PsdSqrt, ClipsRoundOffButRejectsNegatives) {
  Matrix d = Matrix::Zero(2, 2);
  d(0, 0) = 1.0;
  d(1, 1) = -1e-12;
  EXPECT_NO_THROW(psd_sqrt(symmetrize(d)));
  d(1, 1) = -1e-6;
  EXPECT_THROW(psd_sqrt(symmetrize(d)), NotPositiveSemidefinite);
}

TEST(PsdSqrt, FusedProjectionMatchesComposition) {
  const auto m = symmetrize(random_matrix(6, 6, 25));
  const Matrix composed = psd_sqrt(project_psd(m)).matrix();
  // Re-decomposing the projection turns its zero eigenvalues into round-off
  // of size eps |M|, whose square roots are of order sqrt(eps).
  EXPECT_LT(rel(sqrt_of_psd_projection(m).matrix(), composed), 1e-7);
  const auto psd = random_psd(6, 26);
  EXPECT_EQ(sqrt_of_psd_projection(psd).matrix(), psd_sqrt(psd).matrix());
}

TEST(LargestSingularValue, MatchesSvd) {
  const Matrix A = random_matrix(40, 12, 27);
  Eigen::JacobiSVD<Matrix> svd(A);
  EXPECT_NEAR(largest_singular_value(A), svd.singularValues()(0),
              1e-6 * svd.singularValues()(0));
  EXPECT_EQ(largest_singular_value(Matrix::Zero(3, 3)), 0.0);
}

}  // namespace
}  // namespace spat
