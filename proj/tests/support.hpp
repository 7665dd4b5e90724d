#pragma once

// Shared fixtures for the unit tests.

#include <vector>

#include "morphflow/rng.hpp"
#include "morphflow/types.hpp"

namespace morphflow::testing {

inline std::vector<Vec3> random_points(std::size_t n, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  std::vector<Vec3> pts(n);
  for (auto& p : pts) p = Vec3(rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi));
  return pts;
}

inline std::vector<Vec3> fibonacci_sphere(std::size_t n) {
  std::vector<Vec3> pts(n);
  const double golden = 3.14159265358979323846 * (3.0 - std::sqrt(5.0));
  for (std::size_t i = 0; i < n; ++i) {
    const double z = 1.0 - 2.0 * (static_cast<double>(i) + 0.5) / static_cast<double>(n);
    const double r = std::sqrt(1.0 - z * z);
    pts[i] = Vec3(r * std::cos(golden * static_cast<double>(i)), r * std::sin(golden * static_cast<double>(i)), z);
  }
  return pts;
}

}  // namespace morphflow::testing
