#pragma once

#include <Eigen/Core>
#include <complex>

namespace spat {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using ComplexVector = Eigen::VectorXcd;
using ComplexMatrix = Eigen::MatrixXcd;
using Point3 = Eigen::Vector3d;
using Points = Eigen::Matrix<double, 3, Eigen::Dynamic>;
using Index = Eigen::Index;

}  // namespace spat
