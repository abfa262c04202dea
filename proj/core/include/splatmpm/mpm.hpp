#pragma once

// Explicit MLS-MPM with the fixed corotated hyperelastic model and a
// quadratic B-spline kernel.

#include <array>
#include <cstdint>
#include <vector>

#include "splatmpm/la3.hpp"
#include "splatmpm/scene.hpp"

namespace splatmpm::mpm {

struct LameParams {
  double mu = 0.0;
  double lambda = 0.0;
};

/// Throws ValidationError unless E > 0 and 0 <= nu < 0.5.
LameParams young_to_lame(double youngs, double poisson);

/// psi(F) = mu * sum_i (sigma_i - 1)^2 + lambda / 2 * (det F - 1)^2
double corotated_energy(const Mat3& F, const LameParams& p);

/// dpsi/dF = 2 mu (F - R) + lambda (J - 1) J F^{-T}. Throws NumericalError
/// when |det F| < 1e-12.
Mat3 first_pk_stress(const Mat3& F, const LameParams& p);
/// Same as above with a precomputed SVD of F.
Mat3 first_pk_stress(const Mat3& F, const Svd3& svd, const LameParams& p);

/// Cauchy stress (1 / det F) dpsi/dF F^T.
Mat3 cauchy_stress(const Mat3& F, const LameParams& p);

/// 1D quadratic B-spline N(t), t in cell units.
double bspline(double t);

/// Per-particle stencil of the quadratic B-spline: 3 nodes per axis starting
/// at `base`. `w[a][i]` is the weight of node base[a] + i along axis a and
/// `dw[a][i]` its derivative with respect to the particle coordinate.
struct Stencil {
  std::array<int, 3> base{};
  std::array<std::array<double, 3>, 3> w{};
  std::array<std::array<double, 3>, 3> dw{};
  Vec3 frac;  // x / dx - base, each in [0.5, 1.5)
};

Stencil make_stencil(const Vec3& x, double inv_dx);

/// Background grid with n^3 nodes at positions i * dx.
struct GridState {
  int n = 0;
  double dx = 0.0;
  std::vector<double> mass;
  std::vector<Vec3> momentum;
  std::vector<Vec3> velocity;
  std::vector<Vec3> force;
  std::vector<std::uint8_t> dirichlet;
  // Bounding box of nodes touched since the last clear, inclusive.
  std::array<int, 3> lo{}, hi{};
  bool touched = false;

  GridState() = default;
  explicit GridState(const SimConfig& cfg);

  std::size_t index(int i, int j, int k) const {
    return (static_cast<std::size_t>(i) * n + j) * n + k;
  }
  Vec3 node_position(int i, int j, int k) const { return {i * dx, j * dx, k * dx}; }
  /// Zeroes the touched region.
  void clear();
  /// Extends the touched box by the stencils of all points.
  void mark(const std::vector<Vec3>& x);
  double total_mass() const;
  Vec3 total_momentum() const;
};

/// Throws ValidationError listing indices of particles closer than two cells
/// to the domain boundary (or non-finite).
void check_domain(const MaterialPoints& pts, const SimConfig& cfg);

/// Particle-to-grid transfer of mass and MLS momentum, plus dt * f_i where
/// f_i = m_i (gravity + active force boxes at `time`). The grid must be
/// cleared first.
void p2g(const MaterialPoints& pts, GridState& grid, const SimConfig& cfg, double time);

/// v_i = momentum_i / m_i above the mass floor, zero elsewhere and at
/// Dirichlet nodes.
void grid_update(GridState& grid, const SimConfig& cfg);

/// Grid-to-particle transfer, position advection and F update.
void g2p(MaterialPoints& pts, const GridState& grid, const SimConfig& cfg);

/// clear -> p2g -> grid_update -> g2p.
void substep(MaterialPoints& pts, GridState& grid, const SimConfig& cfg, double time);

/// Runs `n_substeps` substeps; returns the advanced time.
double simulate_step(MaterialPoints& pts, const SimConfig& cfg, int n_substeps, double time);
double simulate_step(MaterialPoints& pts, GridState& grid, const SimConfig& cfg, int n_substeps, double time);

/// External acceleration at a grid node at the given time.
Vec3 external_acceleration(const SimConfig& cfg, const Vec3& node, double time);

double kinetic_energy(const MaterialPoints& pts);
double elastic_energy(const MaterialPoints& pts);
Vec3 total_momentum(const MaterialPoints& pts);

/// Dirichlet flags for every node of an n^3 grid.
std::vector<std::uint8_t> dirichlet_mask(const SimConfig& cfg);

}  // namespace splatmpm::mpm
