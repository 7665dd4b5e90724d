#pragma once

#include <cstddef>
#include <vector>

#include <Eigen/Core>

namespace morphflow {

using Vec3 = Eigen::Vector3d;
using Index = std::size_t;
using IndexList = std::vector<Index>;

/// Dense row-major real array, points x channels.
using FeatureMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

}  // namespace morphflow
