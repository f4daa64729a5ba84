#pragma once

#include <array>
#include <cstddef>

#include "specfield/geometry.hpp"

namespace specfield {

inline constexpr int kShDegree = 2;
inline constexpr std::size_t kShCoeffs = 9;

// Orthonormal real spherical harmonics up to degree 2, ordered
// (0,0), (1,-1), (1,0), (1,1), (2,-2), (2,-1), (2,0), (2,1), (2,2).
inline constexpr double kShC0 = 0.28209479177387814;   // 1 / (2 sqrt(pi))
inline constexpr double kShC1 = 0.48860251190291992;   // sqrt(3 / (4 pi))
inline constexpr double kShC2a = 1.0925484305920792;   // sqrt(15 / (4 pi))
inline constexpr double kShC2b = 0.31539156525252005;  // sqrt(5 / (16 pi))
inline constexpr double kShC2c = 0.54627421529603959;  // sqrt(15 / (16 pi))

inline std::array<double, kShCoeffs> sh_basis(const Vec3& d) {
  const double x = d.x, y = d.y, z = d.z;
  return {kShC0,
          kShC1 * y,
          kShC1 * z,
          kShC1 * x,
          kShC2a * x * y,
          kShC2a * y * z,
          kShC2b * (3.0 * z * z - 1.0),
          kShC2a * x * z,
          kShC2c * (x * x - y * y)};
}

}  // namespace specfield
