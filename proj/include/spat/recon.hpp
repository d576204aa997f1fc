#pragma once

// Second-order reconstruction from the recording covariance, and the
// first-order (mean recording) Tikhonov baseline.
//
// The second-order estimator inverts Gamma_y - Gamma_eps = A R Gamma_e R A^T
// for R = diag(rho) in a fixed sequence of dense steps:
//   M1 = Gamma_y_hat - Gamma_eps
//   M2 = ridge solve  A M = M1            (lambda1)
//   M3 = ridge solve  M A^T = M2          (lambda1, same factorization)
//   M4 = S M3 S,      S = sqrt(Gamma_e)
//   M5 = sqrt(P_psd(sym(M4)))
//   M6 = ridge solve  S M = M5            (lambda2)
//   R  = ridge solve  M S = M6            (lambda2, same factorization)
//   rho = diag(R)

#include <cmath>
#include <optional>
#include <string>

#include "spat/error.hpp"
#include "spat/solver.hpp"
#include "spat/types.hpp"

namespace spat {

struct ReconConfig {
  double lambda1 = 0.0;
  double lambda2 = 0.0;
  /// Take the square root of sym(M4) directly instead of projecting first;
  /// fails with NotPositiveSemidefinite if M4 is not PSD within tolerance.
  bool skip_projection = false;
  bool trace_intermediates = false;

  void validate() const {
    if (!(lambda1 >= 0.0) || !std::isfinite(lambda1) || !(lambda2 >= 0.0) ||
        !std::isfinite(lambda2))
      throw InvalidArgument("regularization weights must be finite and >= 0");
  }
};

struct SecondOrderTrace {
  std::optional<Matrix> m1, m2, m3, m4, m5, m6, r_hat;
};

struct SecondOrderResult {
  Vector rho;
  SecondOrderTrace trace;
};

/// sqrt(Gamma_e) and the ridge factorization of it, reusable across every
/// reconstruction with the same speckle statistics.
struct CovarianceRoot {
  SymmetricMatrix sqrt_gamma_e;
  RidgeFactorization factorization;
  double gamma_e_norm;  // largest eigenvalue of Gamma_e
};

inline CovarianceRoot make_covariance_root(const Matrix& gamma_e, double lambda2) {
  const SymmetricMatrix g = symmetrize(gamma_e);
  const SymmetricEigen e = eigen_decompose(g);
  const double tol = kPsdTolerance * e.spectral_norm();
  if (e.values.size() && e.values.minCoeff() < -tol)
    throw NotPositiveSemidefinite("speckle covariance is not PSD");
  SymmetricMatrix root = detail::clipped_sqrt(e);
  RidgeFactorization f = ridge_factorize(root.matrix(), lambda2);
  return CovarianceRoot{std::move(root), std::move(f), e.spectral_norm()};
}

/// Regularization weight scaled to a design matrix: alpha * sigma_max^2.
inline double relative_lambda(double alpha, double sigma_max) {
  return alpha * sigma_max * sigma_max;
}

/// Same as make_covariance_root with lambda2 = alpha2 * lambda_max(Gamma_e),
/// i.e. alpha2 times the squared largest singular value of sqrt(Gamma_e).
inline CovarianceRoot make_covariance_root_relative(const Matrix& gamma_e, double alpha2) {
  if (!(alpha2 >= 0.0) || !std::isfinite(alpha2))
    throw InvalidArgument("relative regularization must be finite and >= 0");
  const SymmetricMatrix g = symmetrize(gamma_e);
  const SymmetricEigen e = eigen_decompose(g);
  const double tol = kPsdTolerance * e.spectral_norm();
  if (e.values.size() && e.values.minCoeff() < -tol)
    throw NotPositiveSemidefinite("speckle covariance is not PSD");
  SymmetricMatrix root = detail::clipped_sqrt(e);
  RidgeFactorization f = ridge_factorize(root.matrix(), alpha2 * e.spectral_norm());
  return CovarianceRoot{std::move(root), std::move(f), e.spectral_norm()};
}

/// Second-order reconstruction with precomputed factorizations: `design`
/// factors A with lambda1, `root` factors sqrt(Gamma_e) with lambda2.
inline SecondOrderResult reconstruct_second_order(const Matrix& gamma_y_hat,
                                                  const Matrix& gamma_eps,
                                                  const RidgeFactorization& design,
                                                  const CovarianceRoot& root,
                                                  bool skip_projection = false,
                                                  bool trace_intermediates = false) {
  const Index tm = design.rows(), n = design.cols();
  detail::require_dims(gamma_y_hat.rows() == tm && gamma_y_hat.cols() == tm,
                       "second-order: Gamma_y_hat must be " + std::to_string(tm) +
                           "x" + std::to_string(tm));
  detail::require_dims(gamma_eps.rows() == tm && gamma_eps.cols() == tm,
                       "second-order: Gamma_eps must match Gamma_y_hat");
  detail::require_dims(root.sqrt_gamma_e.size() == n,
                       "second-order: Gamma_e must be " + std::to_string(n) + "x" +
                           std::to_string(n));

  SecondOrderResult out;
  auto keep = [&](std::optional<Matrix>& slot, const Matrix& m) {
    if (trace_intermediates) slot = m;
  };

  const Matrix m1 = gamma_y_hat - gamma_eps;
  keep(out.trace.m1, m1);
  const Matrix m2 = design.solve_left(m1);
  keep(out.trace.m2, m2);
  const Matrix m3 = design.solve_right(m2);
  keep(out.trace.m3, m3);
  const Matrix& s = root.sqrt_gamma_e.matrix();
  const Matrix m4 = s * m3 * s;
  keep(out.trace.m4, m4);
  const SymmetricMatrix m4s = symmetrize(m4);
  const SymmetricMatrix m5 =
      skip_projection ? psd_sqrt(m4s) : sqrt_of_psd_projection(m4s);
  keep(out.trace.m5, m5.matrix());
  const Matrix m6 = root.factorization.solve_left(m5.matrix());
  keep(out.trace.m6, m6);
  // sqrt(Gamma_e) is symmetric, so M sqrt(Gamma_e) = M sqrt(Gamma_e)^T.
  const Matrix r_hat = root.factorization.solve_right(m6);
  keep(out.trace.r_hat, r_hat);
  out.rho = r_hat.diagonal();
  return out;
}

inline SecondOrderResult reconstruct_second_order(const Matrix& gamma_y_hat,
                                                  const Matrix& gamma_e,
                                                  const Matrix& gamma_eps,
                                                  const Matrix& A,
                                                  const ReconConfig& cfg) {
  cfg.validate();
  detail::require_dims(gamma_e.rows() == A.cols() && gamma_e.cols() == A.cols(),
                       "second-order: Gamma_e does not match A");
  const RidgeFactorization design = ridge_factorize(A, cfg.lambda1);
  const CovarianceRoot root = make_covariance_root(gamma_e, cfg.lambda2);
  return reconstruct_second_order(gamma_y_hat, gamma_eps, design, root,
                                  cfg.skip_projection, cfg.trace_intermediates);
}

/// argmin |A rho - y_bar|^2 + lambda |rho|^2.
inline Vector reconstruct_first_order(const Vector& y_bar,
                                      const RidgeFactorization& design) {
  detail::require_dims(y_bar.size() == design.rows(),
                       "first-order: mean recording has " +
                           std::to_string(y_bar.size()) + " samples, A has " +
                           std::to_string(design.rows()) + " rows");
  return design.solve_left(y_bar);
}

inline Vector reconstruct_first_order(const Vector& y_bar, const Matrix& A,
                                      double lambda) {
  detail::require_dims(y_bar.size() == A.rows(), "first-order: y_bar/A mismatch");
  return reconstruct_first_order(y_bar, ridge_factorize(A, lambda));
}

}  // namespace spat
