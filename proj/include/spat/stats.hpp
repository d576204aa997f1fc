#pragma once

#include <string>

#include "spat/error.hpp"
#include "spat/types.hpp"

namespace spat {

struct Moments {
  Index count = 0;
  Vector mean;
  Matrix covariance;
};

/// Streaming first and second moments of recordings. Sums are held in
/// long double; only the upper triangle of the outer-product sum is
/// accumulated.
class MomentAccumulator {
 public:
  using WideVector = Eigen::Matrix<long double, Eigen::Dynamic, 1>;
  using WideMatrix = Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic>;

  explicit MomentAccumulator(Index dim)
      : sum_(WideVector::Zero(dim)), outer_(WideMatrix::Zero(dim, dim)) {}

  Index dim() const { return sum_.size(); }
  Index count() const { return count_; }
  const WideVector& sum() const { return sum_; }
  const WideMatrix& outer_sum() const { return outer_; }

  void accumulate(const Vector& y) {
    detail::require_dims(y.size() == dim(),
                         "accumulate: recording has " + std::to_string(y.size()) +
                             " samples, accumulator expects " +
                             std::to_string(dim()));
    const WideVector w = y.cast<long double>();
    for (Index j = 0; j < dim(); ++j) {
      const long double yj = w(j);
      for (Index i = 0; i <= j; ++i) outer_(i, j) += w(i) * yj;
    }
    sum_ += w;
    ++count_;
  }

  /// Adds every column of `Y`. The batch Gram matrix is formed in double
  /// (one GEMM) and then added to the wide sums, so results match repeated
  /// accumulate() up to rounding within the batch.
  void accumulate_batch(const Matrix& Y) {
    detail::require_dims(Y.rows() == dim(),
                         "accumulate_batch: recordings have " + std::to_string(Y.rows()) +
                             " samples, accumulator expects " + std::to_string(dim()));
    if (Y.cols() == 0) return;
    Matrix gram = Matrix::Zero(dim(), dim());
    gram.selfadjointView<Eigen::Upper>().rankUpdate(Y);
    for (Index j = 0; j < dim(); ++j)
      for (Index i = 0; i <= j; ++i) outer_(i, j) += gram(i, j);
    const Vector s = Y.rowwise().sum();
    sum_ += s.cast<long double>();
    count_ += Y.cols();
  }

  void merge(const MomentAccumulator& other) {
    detail::require_dims(other.dim() == dim(), "merge: accumulator dimensions differ");
    for (Index j = 0; j < dim(); ++j)
      for (Index i = 0; i <= j; ++i) outer_(i, j) += other.outer_(i, j);
    sum_ += other.sum_;
    count_ += other.count_;
  }

  /// mean = S/K, covariance = Q/K - mean mean^T (biased 1/K normalization).
  Moments finalize() const {
    if (count_ < 1) throw InvalidArgument("finalize: no recordings accumulated");
    const long double k = static_cast<long double>(count_);
    const WideVector mean = sum_ / k;
    Matrix cov(dim(), dim());
    for (Index j = 0; j < dim(); ++j)
      for (Index i = 0; i <= j; ++i) {
        const double v = static_cast<double>(outer_(i, j) / k - mean(i) * mean(j));
        cov(i, j) = v;
        cov(j, i) = v;
      }
    return Moments{count_, mean.cast<double>(), std::move(cov)};
  }

 private:
  Index count_ = 0;
  WideVector sum_;
  WideMatrix outer_;
};

inline MomentAccumulator merge(const MomentAccumulator& a,
                               const MomentAccumulator& b) {
  MomentAccumulator out = a;
  out.merge(b);
  return out;
}

/// Gamma_y = A diag(rho) Gamma_e diag(rho) A^T + Gamma_eps.
inline Matrix model_covariance(const Matrix& A, const Vector& rho,
                               const Matrix& gamma_e, const Matrix& gamma_eps) {
  detail::require_dims(A.cols() == rho.size(), "model_covariance: A/rho mismatch");
  detail::require_dims(gamma_e.rows() == rho.size() && gamma_e.cols() == rho.size(),
                       "model_covariance: Gamma_e must be N x N");
  detail::require_dims(gamma_eps.rows() == A.rows() && gamma_eps.cols() == A.rows(),
                       "model_covariance: Gamma_eps must be TM x TM");
  const Matrix AR = A * rho.asDiagonal();
  Matrix g = AR * gamma_e * AR.transpose() + gamma_eps;
  return 0.5 * (g + g.transpose());
}

}  // namespace spat
