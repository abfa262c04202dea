#pragma once

// Fixed-size 3x3 linear algebra used by the material model, the transfer
// kernels and rigid fitting.

#include <array>
#include <cmath>
#include <cstddef>

namespace splatmpm {

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;

  constexpr double& operator[](std::size_t i) { return i == 0 ? x : (i == 1 ? y : z); }
  constexpr double operator[](std::size_t i) const { return i == 0 ? x : (i == 1 ? y : z); }

  constexpr Vec3& operator+=(const Vec3& o) { x += o.x; y += o.y; z += o.z; return *this; }
  constexpr Vec3& operator-=(const Vec3& o) { x -= o.x; y -= o.y; z -= o.z; return *this; }
  constexpr Vec3& operator*=(double s) { x *= s; y *= s; z *= s; return *this; }

  friend constexpr Vec3 operator+(Vec3 a, const Vec3& b) { return a += b; }
  friend constexpr Vec3 operator-(Vec3 a, const Vec3& b) { return a -= b; }
  friend constexpr Vec3 operator-(const Vec3& a) { return {-a.x, -a.y, -a.z}; }
  friend constexpr Vec3 operator*(Vec3 a, double s) { return a *= s; }
  friend constexpr Vec3 operator*(double s, Vec3 a) { return a *= s; }
  friend constexpr Vec3 operator/(Vec3 a, double s) { return a *= (1.0 / s); }
  friend constexpr bool operator==(const Vec3&, const Vec3&) = default;
};

constexpr double dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
constexpr Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }
constexpr double squared_norm(const Vec3& a) { return dot(a, a); }

/// Row-major 3x3 matrix. `m[r][c]`.
struct Mat3 {
  std::array<std::array<double, 3>, 3> m{};

  static constexpr Mat3 zero() { return {}; }
  static constexpr Mat3 identity() { return diag(1.0, 1.0, 1.0); }
  static constexpr Mat3 diag(double a, double b, double c) {
    Mat3 r;
    r.m[0][0] = a;
    r.m[1][1] = b;
    r.m[2][2] = c;
    return r;
  }
  static constexpr Mat3 diag(const Vec3& d) { return diag(d.x, d.y, d.z); }
  static constexpr Mat3 from_rows(const Vec3& r0, const Vec3& r1, const Vec3& r2) {
    Mat3 r;
    for (std::size_t j = 0; j < 3; ++j) {
      r.m[0][j] = r0[j];
      r.m[1][j] = r1[j];
      r.m[2][j] = r2[j];
    }
    return r;
  }
  static constexpr Mat3 from_cols(const Vec3& c0, const Vec3& c1, const Vec3& c2) {
    return from_rows(c0, c1, c2).transposed();
  }
  static constexpr Mat3 outer(const Vec3& a, const Vec3& b) {
    Mat3 r;
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j) r.m[i][j] = a[i] * b[j];
    return r;
  }

  constexpr double& operator()(std::size_t r, std::size_t c) { return m[r][c]; }
  constexpr double operator()(std::size_t r, std::size_t c) const { return m[r][c]; }

  constexpr Vec3 row(std::size_t r) const { return {m[r][0], m[r][1], m[r][2]}; }
  constexpr Vec3 col(std::size_t c) const { return {m[0][c], m[1][c], m[2][c]}; }
  constexpr void set_col(std::size_t c, const Vec3& v) {
    m[0][c] = v.x;
    m[1][c] = v.y;
    m[2][c] = v.z;
  }

  constexpr Mat3 transposed() const {
    Mat3 r;
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j) r.m[i][j] = m[j][i];
    return r;
  }
  constexpr double trace() const { return m[0][0] + m[1][1] + m[2][2]; }
  constexpr double determinant() const {
    return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
           m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
           m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
  }
  /// Cofactor matrix; equals det(F) * F^{-T}.
  constexpr Mat3 cofactor() const {
    return from_rows(cross(row(1), row(2)), cross(row(2), row(0)), cross(row(0), row(1)));
  }

  constexpr Mat3& operator+=(const Mat3& o) {
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j) m[i][j] += o.m[i][j];
    return *this;
  }
  constexpr Mat3& operator-=(const Mat3& o) {
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j) m[i][j] -= o.m[i][j];
    return *this;
  }
  constexpr Mat3& operator*=(double s) {
    for (auto& r : m)
      for (double& v : r) v *= s;
    return *this;
  }

  friend constexpr Mat3 operator+(Mat3 a, const Mat3& b) { return a += b; }
  friend constexpr Mat3 operator-(Mat3 a, const Mat3& b) { return a -= b; }
  friend constexpr Mat3 operator*(Mat3 a, double s) { return a *= s; }
  friend constexpr Mat3 operator*(double s, Mat3 a) { return a *= s; }
  friend constexpr Mat3 operator*(const Mat3& a, const Mat3& b) {
    Mat3 r;
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j)
        r.m[i][j] = a.m[i][0] * b.m[0][j] + a.m[i][1] * b.m[1][j] + a.m[i][2] * b.m[2][j];
    return r;
  }
  friend constexpr Vec3 operator*(const Mat3& a, const Vec3& v) {
    return {a.m[0][0] * v.x + a.m[0][1] * v.y + a.m[0][2] * v.z,
            a.m[1][0] * v.x + a.m[1][1] * v.y + a.m[1][2] * v.z,
            a.m[2][0] * v.x + a.m[2][1] * v.y + a.m[2][2] * v.z};
  }
  friend constexpr bool operator==(const Mat3&, const Mat3&) = default;
};

/// Frobenius inner product.
constexpr double ddot(const Mat3& a, const Mat3& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) s += a.m[i][j] * b.m[i][j];
  return s;
}
inline double frobenius_norm(const Mat3& a) { return std::sqrt(ddot(a, a)); }

Mat3 inverse(const Mat3& a);
bool is_finite(const Mat3& a);
bool is_finite(const Vec3& a);

/// Rotation about a coordinate axis.
Mat3 rotation_x(double angle);
Mat3 rotation_y(double angle);
Mat3 rotation_z(double angle);
/// Rodrigues rotation; `axis` need not be normalized.
Mat3 axis_angle(const Vec3& axis, double angle);

struct Svd3 {
  Mat3 U;
  Vec3 sigma;
  Mat3 V;
};

/// Rotation-variant SVD: det(U) = det(V) = +1, sigma sorted so that
/// sigma[0] >= sigma[1] >= |sigma[2]|; a reflection shows up as sigma[2] < 0.
Svd3 svd3(const Mat3& F);

struct Polar3 {
  Mat3 R;  // proper rotation
  Mat3 S;  // symmetric
};

Polar3 polar3(const Mat3& F);

/// Reverse-mode derivative of the polar rotation R(F): given dL/dR returns
/// dL/dF. Denominators sigma_i + sigma_j are clamped to +-`min_denominator`
/// with their sign kept.
Mat3 polar_rotation_vjp(const Svd3& svd, const Mat3& grad_R, double min_denominator = 1e-6);

/// Reverse-mode derivative of the cofactor matrix: returns dL/dF given dL/dcof(F).
Mat3 cofactor_vjp(const Mat3& F, const Mat3& grad_cof);

/// Unit quaternion stored as (w, x, y, z).
struct Quat {
  double w = 1.0, x = 0.0, y = 0.0, z = 0.0;
};

/// Normalizes q internally. Throws std::invalid_argument for a zero quaternion.
Mat3 quat_to_mat(const Quat& q);
/// R must be a rotation (within ~1e-4). Result has w >= 0.
Quat mat_to_quat(const Mat3& R);

}  // namespace splatmpm
