#pragma once

#include <algorithm>
#include <cmath>

#include "spat/error.hpp"
#include "spat/geometry.hpp"
#include "spat/types.hpp"

namespace spat {

/// Bilinear resampling of `field` onto `target`; points outside the source
/// grid are clamped to its border.
inline ObjectField resample_bilinear(const ObjectField& field,
                                     const ObjectGrid& target) {
  const ObjectGrid& src = field.grid;
  Vector out(target.size());
  for (Index n = 0; n < target.size(); ++n) {
    const Point3 p = target.point(n);
    double fx = (p.x() + 0.5 * src.extent_x()) / src.spacing_x();
    double fy = (p.y() + 0.5 * src.extent_y()) / src.spacing_y();
    fx = std::clamp(fx, 0.0, double(src.n_x() - 1));
    fy = std::clamp(fy, 0.0, double(src.n_y() - 1));
    const int c0 = std::min(int(std::floor(fx)), src.n_x() - 2);
    const int r0 = std::min(int(std::floor(fy)), src.n_y() - 2);
    const double tx = fx - c0, ty = fy - r0;
    auto at = [&](int r, int c) { return field.rho(src.index(r, c)); };
    out(n) = (1 - ty) * ((1 - tx) * at(r0, c0) + tx * at(r0, c0 + 1)) +
             ty * ((1 - tx) * at(r0 + 1, c0) + tx * at(r0 + 1, c0 + 1));
  }
  return ObjectField(target, std::move(out));
}

struct ImageMetrics {
  double correlation = 0.0;
  double rel_l2 = 0.0;
  /// False when either field is constant and the correlation is undefined
  /// (reported as 0).
  bool correlation_defined = true;
};

/// Pearson correlation in one pass (running co-moments).
inline double pearson_correlation(const Vector& a, const Vector& b, bool* defined) {
  detail::require_dims(a.size() == b.size(), "correlation: length mismatch");
  double ma = 0, mb = 0, caa = 0, cbb = 0, cab = 0;
  for (Index i = 0; i < a.size(); ++i) {
    const double k = double(i + 1);
    const double da = a(i) - ma, db = b(i) - mb;
    ma += da / k;
    mb += db / k;
    caa += da * (a(i) - ma);
    cbb += db * (b(i) - mb);
    cab += da * (b(i) - mb);
  }
  if (!(caa > 0.0) || !(cbb > 0.0)) {
    if (defined) *defined = false;
    return 0.0;
  }
  if (defined) *defined = true;
  return cab / std::sqrt(caa * cbb);
}

/// Compares a reconstruction with ground truth resampled onto its grid.
inline ImageMetrics compute_metrics(const ObjectField& rho_hat,
                                    const ObjectField& rho_true_fine) {
  const ObjectField truth = rho_hat.grid == rho_true_fine.grid
                                ? rho_true_fine
                                : resample_bilinear(rho_true_fine, rho_hat.grid);
  ImageMetrics m;
  m.correlation = pearson_correlation(rho_hat.rho, truth.rho, &m.correlation_defined);
  const double tn = truth.rho.norm();
  m.rel_l2 = tn > 0.0 ? (rho_hat.rho - truth.rho).norm() / tn
                      : rho_hat.rho.norm();
  return m;
}

}  // namespace spat
