#include "splatmpm/la3.hpp"

#include <algorithm>
#include <stdexcept>
#include <utility>

namespace splatmpm {

Mat3 inverse(const Mat3& a) {
  const double det = a.determinant();
  if (det == 0.0) throw std::domain_error("inverse: singular matrix");
  return a.cofactor().transposed() * (1.0 / det);
}

bool is_finite(const Mat3& a) {
  for (const auto& r : a.m)
    for (double v : r)
      if (!std::isfinite(v)) return false;
  return true;
}

bool is_finite(const Vec3& a) {
  return std::isfinite(a.x) && std::isfinite(a.y) && std::isfinite(a.z);
}

Mat3 rotation_x(double angle) { return axis_angle({1, 0, 0}, angle); }
Mat3 rotation_y(double angle) { return axis_angle({0, 1, 0}, angle); }
Mat3 rotation_z(double angle) { return axis_angle({0, 0, 1}, angle); }

Mat3 axis_angle(const Vec3& axis, double angle) {
  const double n = norm(axis);
  if (n == 0.0) return Mat3::identity();
  const Vec3 k = axis / n;
  const double c = std::cos(angle), s = std::sin(angle);
  const Mat3 K = Mat3::from_rows({0, -k.z, k.y}, {k.z, 0, -k.x}, {-k.y, k.x, 0});
  return Mat3::identity() + s * K + (1.0 - c) * (K * K);
}

namespace {

// Cyclic Jacobi on a symmetric matrix. On return A is (numerically) diagonal
// and V holds the eigenvectors as columns: A_in = V diag(A) V^T.
void jacobi_eigen(Mat3& A, Mat3& V) {
  V = Mat3::identity();
  for (int sweep = 0; sweep < 32; ++sweep) {
    const double off = A(0, 1) * A(0, 1) + A(0, 2) * A(0, 2) + A(1, 2) * A(1, 2);
    const double diag = A(0, 0) * A(0, 0) + A(1, 1) * A(1, 1) + A(2, 2) * A(2, 2);
    if (off <= 1e-32 * diag || off == 0.0) break;
    for (int p = 0; p < 2; ++p) {
      for (int q = p + 1; q < 3; ++q) {
        const double apq = A(p, q);
        if (apq == 0.0) continue;
        const double theta = (A(q, q) - A(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        // A <- J^T A J with J the Givens rotation in the (p, q) plane.
        for (int k = 0; k < 3; ++k) {
          const double akp = A(k, p), akq = A(k, q);
          A(k, p) = c * akp - s * akq;
          A(k, q) = s * akp + c * akq;
        }
        for (int k = 0; k < 3; ++k) {
          const double apk = A(p, k), aqk = A(q, k);
          A(p, k) = c * apk - s * aqk;
          A(q, k) = s * apk + c * aqk;
        }
        A(p, q) = A(q, p) = 0.0;
        for (int k = 0; k < 3; ++k) {
          const double vkp = V(k, p), vkq = V(k, q);
          V(k, p) = c * vkp - s * vkq;
          V(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
}

// Zeroes B(i, k) against B(j, k) by rotating rows i, j of B and columns i, j
// of U so that the product U * B is preserved.
void givens_zero(Mat3& B, Mat3& U, int j, int i, int k) {
  const double a = B(j, k), b = B(i, k);
  const double rho = std::hypot(a, b);
  if (rho == 0.0) return;
  const double c = a / rho, s = b / rho;
  for (int col = 0; col < 3; ++col) {
    const double bj = B(j, col), bi = B(i, col);
    B(j, col) = c * bj + s * bi;
    B(i, col) = -s * bj + c * bi;
  }
  for (int row = 0; row < 3; ++row) {
    const double uj = U(row, j), ui = U(row, i);
    U(row, j) = c * uj + s * ui;
    U(row, i) = -s * uj + c * ui;
  }
}

}  // namespace

Svd3 svd3(const Mat3& F) {
  Mat3 A = F.transposed() * F;
  Mat3 V;
  jacobi_eigen(A, V);

  // Sort eigenpairs by decreasing eigenvalue.
  std::array<int, 3> order{0, 1, 2};
  std::sort(order.begin(), order.end(), [&](int a, int b) { return A(a, a) > A(b, b); });
  Mat3 Vs;
  for (int c = 0; c < 3; ++c) Vs.set_col(c, V.col(order[c]));
  if (Vs.determinant() < 0.0) Vs.set_col(2, -Vs.col(2));

  // QR of B = F V by Givens rotations; U accumulates the rotations.
  Mat3 B = F * Vs;
  Mat3 U = Mat3::identity();
  givens_zero(B, U, 0, 1, 0);
  givens_zero(B, U, 0, 2, 0);
  givens_zero(B, U, 1, 2, 1);

  Svd3 out{U, {B(0, 0), B(1, 1), B(2, 2)}, Vs};
  // Keep the first two singular values non-negative; the reflection lives in
  // sigma[2] only.
  for (int i = 0; i < 2; ++i) {
    if (out.sigma[i] < 0.0) {
      out.sigma[i] = -out.sigma[i];
      out.sigma[2] = -out.sigma[2];
      out.U.set_col(i, -out.U.col(i));
      out.U.set_col(2, -out.U.col(2));
    }
  }
  // Rounding can leave |sigma| slightly out of order after QR.
  if (out.sigma[1] > out.sigma[0]) {
    std::swap(out.sigma[0], out.sigma[1]);
    const Vec3 u0 = out.U.col(0), v0 = out.V.col(0);
    out.U.set_col(0, out.U.col(1));
    out.U.set_col(1, -u0);
    out.V.set_col(0, out.V.col(1));
    out.V.set_col(1, -v0);
  }
  if (std::abs(out.sigma[2]) > out.sigma[1]) {
    const double s2 = out.sigma[2];
    const double sign = s2 < 0.0 ? -1.0 : 1.0;
    out.sigma[2] = sign * out.sigma[1];
    out.sigma[1] = std::abs(s2);
    const Vec3 u1 = out.U.col(1), v1 = out.V.col(1);
    // Swap columns 1 and 2 and keep both determinants at +1; the sign of the
    // product U(:,k) V(:,k)^T moves with its singular value.
    out.U.set_col(1, sign * out.U.col(2));
    out.V.set_col(1, out.V.col(2));
    out.U.set_col(2, -sign * u1);
    out.V.set_col(2, -v1);
  }
  return out;
}

Polar3 polar3(const Mat3& F) {
  const Svd3 s = svd3(F);
  const Mat3 R = s.U * s.V.transposed();
  const Mat3 S = s.V * Mat3::diag(s.sigma[0], s.sigma[1], s.sigma[2]) * s.V.transposed();
  return {R, S};
}

Mat3 polar_rotation_vjp(const Svd3& svd, const Mat3& grad_R, double min_denominator) {
  // With F = U S V^T and M = U^T dF V, dR = U W V^T where
  // W_ij = (M_ij - M_ji) / (s_i + s_j). Transposing that linear map:
  // dL/dF = U K V^T with K_ij = (N_ij - N_ji) / (s_i + s_j), N = U^T G V.
  const Mat3 N = svd.U.transposed() * grad_R * svd.V;
  Mat3 K;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      if (i == j) continue;
      double den = svd.sigma[i] + svd.sigma[j];
      if (std::abs(den) < min_denominator) den = den < 0.0 ? -min_denominator : min_denominator;
      K(i, j) = (N(i, j) - N(j, i)) / den;
    }
  }
  return svd.U * K * svd.V.transposed();
}

Mat3 cofactor_vjp(const Mat3& F, const Mat3& G) {
  // cof rows: c0 = r1 x r2, c1 = r2 x r0, c2 = r0 x r1, and
  // g . (a x b) = a . (b x g) = b . (g x a).
  const Vec3 r0 = F.row(0), r1 = F.row(1), r2 = F.row(2);
  const Vec3 g0 = G.row(0), g1 = G.row(1), g2 = G.row(2);
  const Vec3 d0 = cross(g1, r2) + cross(r1, g2);
  const Vec3 d1 = cross(r2, g0) + cross(g2, r0);
  const Vec3 d2 = cross(g0, r1) + cross(r0, g1);
  return Mat3::from_rows(d0, d1, d2);
}

Mat3 quat_to_mat(const Quat& q_in) {
  const double n = std::sqrt(q_in.w * q_in.w + q_in.x * q_in.x + q_in.y * q_in.y + q_in.z * q_in.z);
  if (!(n > 0.0) || !std::isfinite(n)) throw std::invalid_argument("quat_to_mat: zero or non-finite quaternion");
  const double w = q_in.w / n, x = q_in.x / n, y = q_in.y / n, z = q_in.z / n;
  return Mat3::from_rows({1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)},
                         {2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)},
                         {2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)});
}

Quat mat_to_quat(const Mat3& R) {
  // Shepperd: branch on the largest of (trace, diagonal entries).
  Quat q;
  const double tr = R.trace();
  if (tr >= R(0, 0) && tr >= R(1, 1) && tr >= R(2, 2)) {
    const double s = 2.0 * std::sqrt(std::max(0.0, 1.0 + tr));
    q = {0.25 * s, (R(2, 1) - R(1, 2)) / s, (R(0, 2) - R(2, 0)) / s, (R(1, 0) - R(0, 1)) / s};
  } else if (R(0, 0) >= R(1, 1) && R(0, 0) >= R(2, 2)) {
    const double s = 2.0 * std::sqrt(std::max(0.0, 1.0 + R(0, 0) - R(1, 1) - R(2, 2)));
    q = {(R(2, 1) - R(1, 2)) / s, 0.25 * s, (R(0, 1) + R(1, 0)) / s, (R(0, 2) + R(2, 0)) / s};
  } else if (R(1, 1) >= R(2, 2)) {
    const double s = 2.0 * std::sqrt(std::max(0.0, 1.0 + R(1, 1) - R(0, 0) - R(2, 2)));
    q = {(R(0, 2) - R(2, 0)) / s, (R(0, 1) + R(1, 0)) / s, 0.25 * s, (R(1, 2) + R(2, 1)) / s};
  } else {
    const double s = 2.0 * std::sqrt(std::max(0.0, 1.0 + R(2, 2) - R(0, 0) - R(1, 1)));
    q = {(R(1, 0) - R(0, 1)) / s, (R(0, 2) + R(2, 0)) / s, (R(1, 2) + R(2, 1)) / s, 0.25 * s};
  }
  if (q.w < 0.0) q = {-q.w, -q.x, -q.y, -q.z};
  const double n = std::sqrt(q.w * q.w + q.x * q.x + q.y * q.y + q.z * q.z);
  return {q.w / n, q.x / n, q.y / n, q.z / n};
}

}  // namespace splatmpm
