#pragma once

#include <algorithm>
#include <array>
#include <cmath>

namespace specfield {

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;

  constexpr Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  constexpr Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  constexpr Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  constexpr double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }
  constexpr bool operator==(const Vec3&) const = default;
};

constexpr double dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
constexpr Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }
inline Vec3 normalize(const Vec3& a) { return a * (1.0 / norm(a)); }

struct Aabb {
  Vec3 lo{-1.0, -1.0, -1.0};
  Vec3 hi{1.0, 1.0, 1.0};

  bool contains(const Vec3& p) const {
    return p.x >= lo.x && p.x <= hi.x && p.y >= lo.y && p.y <= hi.y && p.z >= lo.z && p.z <= hi.z;
  }
  bool operator==(const Aabb&) const = default;
};

/// Row-major 4x4 rigid transform.
struct Mat4 {
  std::array<double, 16> m{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1};

  double operator()(int r, int c) const { return m[static_cast<std::size_t>(r * 4 + c)]; }
  double& operator()(int r, int c) { return m[static_cast<std::size_t>(r * 4 + c)]; }

  Vec3 rotate(const Vec3& v) const {
    return {(*this)(0, 0) * v.x + (*this)(0, 1) * v.y + (*this)(0, 2) * v.z,
            (*this)(1, 0) * v.x + (*this)(1, 1) * v.y + (*this)(1, 2) * v.z,
            (*this)(2, 0) * v.x + (*this)(2, 1) * v.y + (*this)(2, 2) * v.z};
  }
  Vec3 translation() const { return {(*this)(0, 3), (*this)(1, 3), (*this)(2, 3)}; }

  /// max |R^T R - I| over the rotation block.
  double orthonormality_error() const {
    double worst = 0.0;
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) {
        double s = 0.0;
        for (int k = 0; k < 3; ++k) s += (*this)(k, i) * (*this)(k, j);
        worst = std::max(worst, std::abs(s - (i == j ? 1.0 : 0.0)));
      }
    }
    return worst;
  }

  bool operator==(const Mat4&) const = default;
};

/// Camera at `eye` looking at `target`; camera looks along its local -z.
inline Mat4 look_at(const Vec3& eye, const Vec3& target, Vec3 up = {0.0, 1.0, 0.0}) {
  const Vec3 back = normalize(eye - target);
  if (std::abs(dot(back, up)) > 0.999) up = {0.0, 0.0, 1.0};
  const Vec3 right = normalize(cross(up, back));
  const Vec3 true_up = cross(back, right);
  Mat4 t;
  const Vec3 cols[3] = {right, true_up, back};
  for (int c = 0; c < 3; ++c) {
    t(0, c) = cols[c].x;
    t(1, c) = cols[c].y;
    t(2, c) = cols[c].z;
  }
  t(0, 3) = eye.x;
  t(1, 3) = eye.y;
  t(2, 3) = eye.z;
  return t;
}

}  // namespace specfield
