#pragma once

#include <random>

#include "splatmpm/la3.hpp"

namespace splatmpm::testing {

inline Mat3 random_mat(std::mt19937_64& rng, double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  Mat3 a;
  for (auto& row : a.m)
    for (double& e : row) e = u(rng);
  return a;
}

inline Mat3 random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  return quat_to_mat({n(rng), n(rng), n(rng), n(rng)});
}

/// Deformation gradient near identity with positive determinant.
inline Mat3 random_deformation(std::mt19937_64& rng, double spread = 0.3) {
  return Mat3::identity() + random_mat(rng, spread);
}

inline double max_abs_diff(const Mat3& a, const Mat3& b) {
  double m = 0.0;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) m = std::max(m, std::abs(a(i, j) - b(i, j)));
  return m;
}

}  // namespace splatmpm::testing
