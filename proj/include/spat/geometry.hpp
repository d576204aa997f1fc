#pragma once

// Object grids, the star phantom, transducer arrays and the recording
// timebase. Every grid is a 2D plane embedded at a fixed z; points are
// stored row-major (index = row * n_x + col, row along y, col along x) and
// every operator and covariance in the toolkit shares that ordering.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "spat/error.hpp"
#include "spat/types.hpp"

namespace spat {

class ObjectGrid {
 public:
  ObjectGrid(int n_x, int n_y, double extent_x, double extent_y,
             double plane_z)
      : n_x_(n_x),
        n_y_(n_y),
        extent_x_(extent_x),
        extent_y_(extent_y),
        plane_z_(plane_z) {
    if (n_x < 2 || n_y < 2)
      throw InvalidArgument("grid needs at least 2 points per axis, got " +
                            std::to_string(n_x) + "x" + std::to_string(n_y));
    if (!(extent_x > 0.0) || !(extent_y > 0.0))
      throw InvalidArgument("grid extents must be positive");
    points_.resize(3, size());
    for (int row = 0; row < n_y_; ++row)
      for (int col = 0; col < n_x_; ++col)
        points_.col(index(row, col)) = position(row, col);
  }

  int n_x() const { return n_x_; }
  int n_y() const { return n_y_; }
  Index size() const { return Index(n_x_) * n_y_; }
  double extent_x() const { return extent_x_; }
  double extent_y() const { return extent_y_; }
  double plane_z() const { return plane_z_; }
  double spacing_x() const { return extent_x_ / (n_x_ - 1); }
  double spacing_y() const { return extent_y_ / (n_y_ - 1); }
  double min_spacing() const { return std::min(spacing_x(), spacing_y()); }
  Point3 center() const { return {0.0, 0.0, plane_z_}; }

  Index index(int row, int col) const { return Index(row) * n_x_ + col; }
  int row_of(Index n) const { return int(n / n_x_); }
  int col_of(Index n) const { return int(n % n_x_); }

  const Points& points() const { return points_; }
  Point3 point(Index n) const { return points_.col(n); }

  bool operator==(const ObjectGrid& o) const {
    return n_x_ == o.n_x_ && n_y_ == o.n_y_ && extent_x_ == o.extent_x_ &&
           extent_y_ == o.extent_y_ && plane_z_ == o.plane_z_;
  }

 private:
  Point3 position(int row, int col) const {
    return {-0.5 * extent_x_ + col * spacing_x(),
            -0.5 * extent_y_ + row * spacing_y(), plane_z_};
  }

  int n_x_;
  int n_y_;
  double extent_x_;
  double extent_y_;
  double plane_z_;
  Points points_;
};

inline ObjectGrid make_grid(int n_x, int n_y, double extent_x, double extent_y,
                            double plane_z = 0.0) {
  return ObjectGrid(n_x, n_y, extent_x, extent_y, plane_z);
}

/// Absorption coefficients on a grid.
struct ObjectField {
  ObjectGrid grid;
  Vector rho;

  ObjectField(ObjectGrid g, Vector r) : grid(std::move(g)), rho(std::move(r)) {
    if (rho.size() != grid.size())
      throw DimensionMismatch("field has " + std::to_string(rho.size()) +
                              " values for a grid of " +
                              std::to_string(grid.size()) + " points");
    if (!rho.allFinite()) throw InvalidArgument("field has non-finite values");
  }

  /// Row-major n_y x n_x view as a matrix (row = y index).
  Matrix as_image() const {
    Matrix img(grid.n_y(), grid.n_x());
    for (int r = 0; r < grid.n_y(); ++r)
      for (int c = 0; c < grid.n_x(); ++c) img(r, c) = rho(grid.index(r, c));
    return img;
  }
};

/// Binary star: a filled core of radius `inner_radius` plus 2*n_arms equal
/// angular wedges between the inner and outer radius, every other one filled.
inline ObjectField star_phantom(const ObjectGrid& grid, int n_arms,
                                double inner_radius, double outer_radius) {
  if (n_arms < 3) throw InvalidArgument("star needs at least 3 arms");
  const double max_r = 0.5 * std::min(grid.extent_x(), grid.extent_y());
  if (!(outer_radius > 0.0) || inner_radius < 0.0 ||
      !(inner_radius < outer_radius) || outer_radius > max_r)
    throw InvalidArgument("star radii out of bounds: need 0 <= inner < outer <= " +
                          std::to_string(max_r));

  const double wedge = std::numbers::pi / n_arms;
  Vector rho = Vector::Zero(grid.size());
  for (Index n = 0; n < grid.size(); ++n) {
    const Point3 p = grid.point(n) - grid.center();
    const double r = std::hypot(p.x(), p.y());
    if (r <= inner_radius) {
      rho(n) = 1.0;
    } else if (r <= outer_radius) {
      double theta = std::atan2(p.y(), p.x());
      if (theta < 0.0) theta += 2.0 * std::numbers::pi;
      const auto k = static_cast<long>(std::floor(theta / wedge));
      if (k % 2 == 0) rho(n) = 1.0;
    }
  }
  if (rho.sum() == 0.0)
    throw InvalidArgument("star phantom has empty support on this grid");
  return ObjectField(grid, std::move(rho));
}

enum class ArrayKind { square, circular };

struct TransducerArray {
  Points positions;
  ArrayKind kind;

  Index size() const { return positions.cols(); }
  Point3 position(Index m) const { return positions.col(m); }
};

namespace detail {

inline void check_distinct(const Points& p) {
  for (Index i = 0; i < p.cols(); ++i)
    for (Index j = i + 1; j < p.cols(); ++j)
      if ((p.col(i) - p.col(j)).norm() == 0.0)
        throw InvalidArgument("transducer positions " + std::to_string(i) +
                              " and " + std::to_string(j) + " coincide");
}

}  // namespace detail

/// m_side x m_side lattice spanning `extent`, centered over the grid, at
/// height plane_z + standoff.
inline TransducerArray square_array(int m_side, double standoff, double extent,
                                    const ObjectGrid& grid) {
  if (m_side < 1) throw InvalidArgument("square array needs m_side >= 1");
  if (!(standoff > 0.0)) throw InvalidArgument("standoff must be positive");
  if (m_side > 1 && !(extent > 0.0))
    throw InvalidArgument("array extent must be positive");
  TransducerArray arr{Points(3, Index(m_side) * m_side), ArrayKind::square};
  const double step = m_side > 1 ? extent / (m_side - 1) : 0.0;
  const double start = m_side > 1 ? -0.5 * extent : 0.0;
  for (int r = 0; r < m_side; ++r)
    for (int c = 0; c < m_side; ++c)
      arr.positions.col(Index(r) * m_side + c) =
          Point3(start + c * step, start + r * step, grid.plane_z() + standoff);
  detail::check_distinct(arr.positions);
  return arr;
}

/// Square array from a total transducer count; `count` must be a perfect
/// square.
inline TransducerArray square_array_from_count(int count, double standoff,
                                               double extent,
                                               const ObjectGrid& grid) {
  const int side = static_cast<int>(std::lround(std::sqrt(double(count))));
  if (count < 1 || side * side != count)
    throw InvalidArgument("square array needs a square transducer count, got " +
                          std::to_string(count));
  return square_array(side, standoff, extent, grid);
}

/// `count` transducers equally spaced on a circle in the object plane,
/// starting at angle 0.
inline TransducerArray circular_array(int count, double radius,
                                      const ObjectGrid& grid) {
  if (count < 1) throw InvalidArgument("circular array needs count >= 1");
  if (!(radius > 0.0)) throw InvalidArgument("radius must be positive");
  TransducerArray arr{Points(3, count), ArrayKind::circular};
  const Point3 c = grid.center();
  for (int m = 0; m < count; ++m) {
    const double a = 2.0 * std::numbers::pi * m / count;
    arr.positions.col(m) =
        c + Point3(radius * std::cos(a), radius * std::sin(a), 0.0);
  }
  detail::check_distinct(arr.positions);
  return arr;
}

struct Timebase {
  int samples;
  double dt;
  double t0 = 0.0;

  Timebase(int T, double period, double start = 0.0)
      : samples(T), dt(period), t0(start) {
    if (T < 2) throw InvalidArgument("timebase needs at least 2 samples");
    if (!(period > 0.0)) throw InvalidArgument("sample period must be positive");
  }

  /// T samples spanning `duration` seconds, so dt = duration / (T - 1).
  static Timebase from_duration(int T, double duration, double start = 0.0) {
    if (T < 2) throw InvalidArgument("timebase needs at least 2 samples");
    return Timebase(T, duration / (T - 1), start);
  }

  double duration() const { return (samples - 1) * dt; }
  double time(int i) const { return t0 + i * dt; }
};

}  // namespace spat
