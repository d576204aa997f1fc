#pragma once

// Fully developed speckle: the optical field is a circular complex Gaussian
// with Gaussian spatial correlation G_ij = exp(-|x_i - x_j|^2 / (2 l^2)),
// and the intensity is mu * |u|^2. The Siegert relation then gives the
// intensity covariance in closed form, Gamma_e = mu^2 * (G o G).

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>

#include "spat/error.hpp"
#include "spat/geometry.hpp"
#include "spat/types.hpp"

namespace spat {

namespace detail {

inline Matrix gaussian_kernel(const Points& a, const Points& b, double ell) {
  Matrix g(a.cols(), b.cols());
  const double s = 1.0 / (2.0 * ell * ell);
  for (Index j = 0; j < b.cols(); ++j)
    for (Index i = 0; i < a.cols(); ++i)
      g(i, j) = std::exp(-(a.col(i) - b.col(j)).squaredNorm() * s);
  return g;
}

/// F with F F^T = G, from the eigendecomposition with negatives clipped.
inline Matrix clipped_factor(const Matrix& g) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(g);
  if (es.info() != Eigen::Success)
    throw Error("eigendecomposition of the field covariance failed");
  const Vector root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal();
}

inline Points axis_points(int n, double extent) {
  Points p = Points::Zero(3, n);
  for (int i = 0; i < n; ++i) p(0, i) = -0.5 * extent + i * extent / (n - 1);
  return p;
}

}  // namespace detail

class SpeckleModel {
 public:
  /// Model on a grid. The Gaussian kernel is separable on a tensor grid, so
  /// G = G_y (x) G_x and the field factor is F_y (x) F_x.
  SpeckleModel(const ObjectGrid& grid, double ell, double mu)
      : points_(grid.points()), ell_(ell), mu_(mu) {
    validate();
    grid_ = grid;
    factor_y_ = detail::clipped_factor(detail::gaussian_kernel(
        detail::axis_points(grid.n_y(), grid.extent_y()),
        detail::axis_points(grid.n_y(), grid.extent_y()), ell));
    factor_x_ = detail::clipped_factor(detail::gaussian_kernel(
        detail::axis_points(grid.n_x(), grid.extent_x()),
        detail::axis_points(grid.n_x(), grid.extent_x()), ell));
  }

  /// Model on an arbitrary point set (dense factorization).
  SpeckleModel(Points points, double ell, double mu)
      : points_(std::move(points)), ell_(ell), mu_(mu) {
    validate();
    if (points_.cols() < 1) throw InvalidArgument("speckle model needs points");
    factor_dense_ = detail::clipped_factor(field_covariance());
  }

  Index size() const { return points_.cols(); }
  double ell() const { return ell_; }
  double mu() const { return mu_; }
  const Points& points() const { return points_; }
  const std::optional<ObjectGrid>& grid() const { return grid_; }

  /// G_ij = exp(-|x_i - x_j|^2 / (2 l^2)).
  Matrix field_covariance() const {
    return detail::gaussian_kernel(points_, points_, ell_);
  }

  /// Gamma_e = mu^2 * G o G.
  Matrix intensity_covariance() const {
    const Matrix g = field_covariance();
    return (mu_ * mu_) * g.cwiseProduct(g);
  }

  /// Dense F with F F^T = G (clipped).
  Matrix field_factor() const {
    if (factor_dense_) return *factor_dense_;
    return kronecker(factor_y_, factor_x_);
  }

  /// u = F z for a complex vector z given row-major over the grid.
  ComplexVector apply_factor(const ComplexVector& z) const {
    if (factor_dense_) return factor_dense_->cast<std::complex<double>>() * z;
    const int ny = grid_->n_y(), nx = grid_->n_x();
    // Row-major reshape: Z(row, col) = z(row * nx + col).
    Eigen::Map<const Eigen::Matrix<std::complex<double>, Eigen::Dynamic,
                                   Eigen::Dynamic, Eigen::RowMajor>>
        Z(z.data(), ny, nx);
    const ComplexMatrix U = factor_y_.cast<std::complex<double>>() * Z *
                            factor_x_.transpose().cast<std::complex<double>>();
    ComplexVector u(z.size());
    for (int r = 0; r < ny; ++r)
      for (int c = 0; c < nx; ++c) u(Index(r) * nx + c) = U(r, c);
    return u;
  }

 private:
  void validate() const {
    if (!(ell_ > 0.0)) throw InvalidArgument("speckle correlation length must be positive");
    if (!(mu_ > 0.0)) throw InvalidArgument("speckle mean must be positive");
  }

  static Matrix kronecker(const Matrix& a, const Matrix& b) {
    Matrix k(a.rows() * b.rows(), a.cols() * b.cols());
    for (Index i = 0; i < a.rows(); ++i)
      for (Index j = 0; j < a.cols(); ++j)
        k.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
    return k;
  }

  Points points_;
  double ell_;
  double mu_;
  std::optional<ObjectGrid> grid_;
  Matrix factor_y_;
  Matrix factor_x_;
  std::optional<Matrix> factor_dense_;
};

inline SpeckleModel build_speckle_model(const ObjectGrid& grid, double ell,
                                        double mu = 1.0) {
  return SpeckleModel(grid, ell, mu);
}

/// One speckle intensity pattern; bit-identical for a given seed.
inline Vector sample_speckle(const SpeckleModel& model, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, std::sqrt(0.5));
  ComplexVector z(model.size());
  for (Index n = 0; n < z.size(); ++n) {
    const double re = normal(rng);
    const double im = normal(rng);
    z(n) = {re, im};
  }
  // G_nn = 1, so E[|u_n|^2] = 1 and E[e_n] = mu.
  return model.mu() * model.apply_factor(z).cwiseAbs2();
}

struct NoiseModel {
  double sigma = 0.0;
  Index dim = 0;

  void validate() const {
    if (!(sigma >= 0.0)) throw InvalidArgument("noise sigma must be >= 0");
    if (dim < 0) throw InvalidArgument("noise dimension must be >= 0");
  }
};

inline Vector sample_noise(const NoiseModel& model, std::uint64_t seed) {
  model.validate();
  if (model.sigma == 0.0) return Vector::Zero(model.dim);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, model.sigma);
  Vector v(model.dim);
  for (Index i = 0; i < v.size(); ++i) v(i) = normal(rng);
  return v;
}

/// Noise level as a fraction (default 1%) of the largest absolute clean
/// sample over all recordings.
inline double calibrate_noise_sigma(std::span<const Vector> clean,
                                    double fraction = 0.01) {
  if (clean.empty()) throw InvalidArgument("noise calibration needs recordings");
  double peak = 0.0;
  for (const auto& y : clean)
    if (y.size() > 0) peak = std::max(peak, y.cwiseAbs().maxCoeff());
  return fraction * peak;
}

/// Same, with recordings stored as the columns of a matrix.
inline double calibrate_noise_sigma(const Matrix& clean_columns,
                                    double fraction = 0.01) {
  if (clean_columns.cols() == 0)
    throw InvalidArgument("noise calibration needs recordings");
  if (clean_columns.size() == 0) return 0.0;
  return fraction * clean_columns.cwiseAbs().maxCoeff();
}

}  // namespace spat
