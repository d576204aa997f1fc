#pragma once

// Dense regularized least squares and symmetric-matrix spectral tools.
//
// A ridge problem  min_M |A M - B|_F^2 + lambda |M|_F^2  is solved through a
// Householder QR of the stacked design [A; sqrt(lambda) I]. The factorization
// keeps R and the top block Q_1 of the thin Q, so every solve is
// M = R^{-1} Q_1^T B, and left and right solves share one factorization.

#include <Eigen/Eigenvalues>
#include <Eigen/QR>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "spat/error.hpp"
#include "spat/types.hpp"

namespace spat {

class RidgeFactorization {
 public:
  /// Rebuilds a factorization from stored parts (see io.hpp).
  static RidgeFactorization from_parts(Matrix q_top, Matrix r, double lambda) {
    detail::require_dims(r.rows() == r.cols() && q_top.cols() == r.cols(),
                         "ridge factorization parts have inconsistent shapes");
    return RidgeFactorization(std::move(q_top), std::move(r), lambda);
  }

  Index rows() const { return q_top_.rows(); }
  Index cols() const { return q_top_.cols(); }
  double lambda() const { return lambda_; }
  const Matrix& q_top() const { return q_top_; }
  const Matrix& r() const { return r_; }

  /// argmin_M |A M - B|_F^2 + lambda |M|_F^2, B is rows() x k.
  Matrix solve_left(const Matrix& B) const {
    detail::require_dims(B.rows() == rows(),
                         "ridge_solve_left: right-hand side has " +
                             std::to_string(B.rows()) + " rows, design has " +
                             std::to_string(rows()));
    Matrix rhs = q_top_.transpose() * B;
    r_.triangularView<Eigen::Upper>().solveInPlace(rhs);
    return rhs;
  }

  /// argmin_M |M A^T - B|_F^2 + lambda |M|_F^2, B is k x rows().
  Matrix solve_right(const Matrix& B) const {
    detail::require_dims(B.cols() == rows(),
                         "ridge_solve_right: right-hand side has " +
                             std::to_string(B.cols()) + " columns, design has " +
                             std::to_string(rows()) + " rows");
    return solve_left(B.transpose()).transpose();
  }

 private:
  RidgeFactorization(Matrix q_top, Matrix r, double lambda)
      : q_top_(std::move(q_top)), r_(std::move(r)), lambda_(lambda) {}

  friend RidgeFactorization ridge_factorize(const Matrix& A, double lambda);

  Matrix q_top_;
  Matrix r_;
  double lambda_;
};

inline RidgeFactorization ridge_factorize(const Matrix& A, double lambda) {
  if (!(lambda >= 0.0) || !std::isfinite(lambda))
    throw InvalidArgument("ridge lambda must be finite and >= 0");
  if (!A.allFinite()) throw InvalidArgument("design matrix has non-finite entries");
  const Index r = A.rows(), c = A.cols();
  if (c == 0) throw InvalidArgument("design matrix has no columns");
  if (lambda == 0.0 && r < c)
    throw RankDeficient("design matrix " + std::to_string(r) + "x" +
                        std::to_string(c) + " cannot have full column rank");

  Matrix stacked = Matrix::Zero(r + c, c);
  stacked.topRows(r) = A;
  stacked.bottomRows(c).diagonal().setConstant(std::sqrt(lambda));

  Eigen::HouseholderQR<Matrix> qr(stacked);
  Matrix R = qr.matrixQR().topRows(c).triangularView<Eigen::Upper>();

  if (lambda == 0.0) {
    const Vector d = R.diagonal().cwiseAbs();
    const double tol = double(std::max(r, c)) *
                       std::numeric_limits<double>::epsilon() * d.maxCoeff();
    if (d.maxCoeff() == 0.0 || d.minCoeff() <= tol)
      throw RankDeficient("design matrix is rank deficient and lambda = 0");
  }

  Matrix q_thin = qr.householderQ() * Matrix::Identity(r + c, c);
  return RidgeFactorization(q_thin.topRows(r), std::move(R), lambda);
}

inline Matrix ridge_solve_left(const RidgeFactorization& f, const Matrix& B) {
  return f.solve_left(B);
}

inline Matrix ridge_solve_right(const RidgeFactorization& f, const Matrix& B) {
  return f.solve_right(B);
}

/// Dense symmetric matrix; symmetry is exact (bitwise).
class SymmetricMatrix {
 public:
  /// Accepts `m` only if it is exactly symmetric.
  static SymmetricMatrix from_symmetric(Matrix m) {
    detail::require_dims(m.rows() == m.cols(), "symmetric matrix must be square");
    if (m != m.transpose()) throw InvalidArgument("matrix is not symmetric");
    return SymmetricMatrix(std::move(m));
  }

  const Matrix& matrix() const { return m_; }
  Index size() const { return m_.rows(); }

 private:
  explicit SymmetricMatrix(Matrix m) : m_(std::move(m)) {}
  friend SymmetricMatrix symmetrize(const Matrix& m);

  Matrix m_;
};

/// (M + M^T) / 2.
inline SymmetricMatrix symmetrize(const Matrix& m) {
  if (m.rows() != m.cols())
    throw DimensionMismatch("symmetrize: matrix is " + std::to_string(m.rows()) +
                            "x" + std::to_string(m.cols()));
  return SymmetricMatrix(0.5 * (m + m.transpose()));
}

struct SymmetricEigen {
  Vector values;  // ascending
  Matrix vectors;

  double spectral_norm() const {
    return values.size() ? values.cwiseAbs().maxCoeff() : 0.0;
  }
};

inline SymmetricEigen eigen_decompose(const SymmetricMatrix& s) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(s.matrix());
  if (es.info() != Eigen::Success)
    throw Error("symmetric eigendecomposition failed to converge");
  return {es.eigenvalues(), es.eigenvectors()};
}

namespace detail {

inline SymmetricMatrix recompose(const Matrix& q, const Vector& d) {
  return symmetrize(q * d.asDiagonal() * q.transpose());
}

inline SymmetricMatrix clipped_sqrt(const SymmetricEigen& e) {
  return recompose(e.vectors, e.values.cwiseMax(0.0).cwiseSqrt());
}

}  // namespace detail

/// Nearest positive semidefinite matrix in Frobenius norm: Q max(L, 0) Q^T.
inline SymmetricMatrix project_psd(const SymmetricMatrix& s) {
  const SymmetricEigen e = eigen_decompose(s);
  return detail::recompose(e.vectors, e.values.cwiseMax(0.0));
}

/// Relative eigenvalue tolerance below which negatives count as round-off.
inline constexpr double kPsdTolerance = 1e-10;

/// Principal square root of a PSD matrix. Eigenvalues in [-tol, 0) with
/// tol = 1e-10 |M|_2 are clipped; anything more negative is an error.
inline SymmetricMatrix psd_sqrt(const SymmetricMatrix& s) {
  const SymmetricEigen e = eigen_decompose(s);
  const double tol = kPsdTolerance * e.spectral_norm();
  if (e.values.size() && e.values.minCoeff() < -tol)
    throw NotPositiveSemidefinite("matrix has eigenvalue " +
                                  std::to_string(e.values.minCoeff()) +
                                  " below -" + std::to_string(tol));
  return detail::clipped_sqrt(e);
}

/// psd_sqrt(project_psd(s)) from a single eigendecomposition. For inputs
/// that psd_sqrt accepts the result is bitwise identical to psd_sqrt(s).
inline SymmetricMatrix sqrt_of_psd_projection(const SymmetricMatrix& s) {
  return detail::clipped_sqrt(eigen_decompose(s));
}

inline double min_eigenvalue(const SymmetricMatrix& s) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(s.matrix(), Eigen::EigenvaluesOnly);
  return es.eigenvalues().size() ? es.eigenvalues().minCoeff() : 0.0;
}

/// Largest singular value by power iteration on A^T A from a fixed start.
inline double largest_singular_value(const Matrix& A, int max_iter = 500,
                                     double rel_tol = 1e-12) {
  if (A.size() == 0) return 0.0;
  Vector v = Vector::Constant(A.cols(), 1.0 / std::sqrt(double(A.cols())));
  double est = 0.0;
  for (int it = 0; it < max_iter; ++it) {
    Vector w = A.transpose() * (A * v);
    const double nrm = w.norm();
    if (nrm == 0.0) return 0.0;
    v = w / nrm;
    if (std::abs(nrm - est) <= rel_tol * nrm) {
      est = nrm;
      break;
    }
    est = nrm;
  }
  return std::sqrt(est);
}

}  // namespace spat
