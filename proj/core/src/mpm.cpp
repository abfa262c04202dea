#include "splatmpm/mpm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "splatmpm/errors.hpp"
#include "splatmpm/parallel.hpp"

namespace splatmpm::mpm {

LameParams young_to_lame(double E, double nu) {
  if (!(nu < 0.5)) throw ValidationError("young_to_lame: poisson ratio must be < 0.5 (incompressible limit)");
  if (!(nu >= 0.0)) throw ValidationError("young_to_lame: poisson ratio must be >= 0");
  if (!(E > 0.0)) throw ValidationError("young_to_lame: youngs modulus must be > 0");
  return {E / (2.0 * (1.0 + nu)), E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))};
}

double corotated_energy(const Mat3& F, const LameParams& p) {
  const Svd3 s = svd3(F);
  double dev = 0.0;
  for (int i = 0; i < 3; ++i) dev += (s.sigma[i] - 1.0) * (s.sigma[i] - 1.0);
  const double J = F.determinant();
  return p.mu * dev + 0.5 * p.lambda * (J - 1.0) * (J - 1.0);
}

Mat3 first_pk_stress(const Mat3& F, const Svd3& svd, const LameParams& p) {
  const double J = F.determinant();
  if (!(std::abs(J) >= 1e-12)) throw NumericalError("first_pk_stress: singular deformation gradient (|det F| < 1e-12)");
  const Mat3 R = svd.U * svd.V.transposed();
  return 2.0 * p.mu * (F - R) + (p.lambda * (J - 1.0)) * F.cofactor();
}

Mat3 first_pk_stress(const Mat3& F, const LameParams& p) { return first_pk_stress(F, svd3(F), p); }

Mat3 cauchy_stress(const Mat3& F, const LameParams& p) {
  return (1.0 / F.determinant()) * first_pk_stress(F, p) * F.transposed();
}

double bspline(double t) {
  const double a = std::abs(t);
  if (a < 0.5) return 0.75 - a * a;
  if (a < 1.5) return 0.5 * (1.5 - a) * (1.5 - a);
  return 0.0;
}

Stencil make_stencil(const Vec3& x, double inv_dx) {
  Stencil s;
  for (int a = 0; a < 3; ++a) {
    const double fx = x[a] * inv_dx;
    s.base[a] = static_cast<int>(std::floor(fx - 0.5));
    const double f = fx - s.base[a];
    s.frac[a] = f;
    s.w[a] = {0.5 * (1.5 - f) * (1.5 - f), 0.75 - (f - 1.0) * (f - 1.0), 0.5 * (f - 0.5) * (f - 0.5)};
    s.dw[a] = {-(1.5 - f) * inv_dx, -2.0 * (f - 1.0) * inv_dx, (f - 0.5) * inv_dx};
  }
  return s;
}

GridState::GridState(const SimConfig& cfg)
    : n(cfg.grid_resolution),
      dx(cfg.dx()),
      mass(static_cast<std::size_t>(n) * n * n, 0.0),
      momentum(mass.size()),
      velocity(mass.size()),
      force(mass.size()),
      dirichlet(dirichlet_mask(cfg)) {}

void GridState::clear() {
  if (!touched) return;
  for (int i = lo[0]; i <= hi[0]; ++i)
    for (int j = lo[1]; j <= hi[1]; ++j)
      for (int k = lo[2]; k <= hi[2]; ++k) {
        const std::size_t id = index(i, j, k);
        mass[id] = 0.0;
        momentum[id] = {};
        velocity[id] = {};
        force[id] = {};
      }
  touched = false;
}

void GridState::mark(const std::vector<Vec3>& x) {
  const double inv_dx = 1.0 / dx;
  for (const Vec3& p : x) {
    for (int a = 0; a < 3; ++a) {
      const int b = static_cast<int>(std::floor(p[a] * inv_dx - 0.5));
      const int l = std::max(0, b), h = std::min(n - 1, b + 2);
      if (!touched) {
        lo[a] = l;
        hi[a] = h;
      } else {
        lo[a] = std::min(lo[a], l);
        hi[a] = std::max(hi[a], h);
      }
    }
    touched = true;
  }
}

double GridState::total_mass() const {
  double s = 0.0;
  for (double m : mass) s += m;
  return s;
}

Vec3 GridState::total_momentum() const {
  Vec3 s;
  for (const Vec3& m : momentum) s += m;
  return s;
}

std::vector<std::uint8_t> dirichlet_mask(const SimConfig& cfg) {
  const int n = cfg.grid_resolution;
  const double dx = cfg.dx();
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(n) * n * n, 0);
  if (cfg.dirichlet.empty()) return mask;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int k = 0; k < n; ++k) {
        const Vec3 x{i * dx, j * dx, k * dx};
        for (const Box& b : cfg.dirichlet)
          if (b.contains(x)) {
            mask[(static_cast<std::size_t>(i) * n + j) * n + k] = 1;
            break;
          }
      }
  return mask;
}

void check_domain(const MaterialPoints& pts, const SimConfig& cfg) {
  const double lo = 2.0 * cfg.dx(), hi = 1.0 - 2.0 * cfg.dx();
  std::vector<std::size_t> bad;
  for (std::size_t p = 0; p < pts.size(); ++p) {
    const Vec3& x = pts.x[p];
    if (!(x.x >= lo && x.x <= hi && x.y >= lo && x.y <= hi && x.z >= lo && x.z <= hi)) bad.push_back(p);
  }
  if (bad.empty()) return;
  std::string msg = "particles left the simulation interior (2-cell margin):";
  for (std::size_t i = 0; i < bad.size() && i < 20; ++i) msg += " " + std::to_string(bad[i]);
  if (bad.size() > 20) msg += " ... (" + std::to_string(bad.size()) + " total)";
  // Non-finite positions mean the simulation blew up.
  if (!is_finite(pts.x[bad.front()])) throw NumericalError(msg);
  throw ValidationError(msg);
}

Vec3 external_acceleration(const SimConfig& cfg, const Vec3& node, double time) {
  Vec3 a = cfg.gravity;
  for (const ForceBox& f : cfg.forces)
    if (time >= f.t_begin && time < f.t_end && f.region.contains(node)) a += f.acceleration;
  return a;
}

namespace {

// Scatter one range of particles into arrays laid out over the box
// [lo, lo + extent).
struct ScatterTarget {
  double* mass;
  Vec3* momentum;
  std::array<int, 3> lo;
  std::array<int, 3> extent;
  std::size_t index(int i, int j, int k) const {
    return (static_cast<std::size_t>(i - lo[0]) * extent[1] + (j - lo[1])) * extent[2] + (k - lo[2]);
  }
};

void scatter_range(const MaterialPoints& pts, std::size_t begin, std::size_t end, const SimConfig& cfg,
                   double dx, const ScatterTarget& t) {
  const double inv_dx = 1.0 / dx;
  const double K = 4.0 * inv_dx * inv_dx;
  for (std::size_t p = begin; p < end; ++p) {
    const Stencil s = make_stencil(pts.x[p], inv_dx);
    const LameParams lame = young_to_lame(pts.youngs[p], pts.poisson);
    const Mat3& F = pts.F[p];
    const Mat3 P = first_pk_stress(F, lame);
    const double m = pts.mass[p];
    const Mat3 A = m * pts.C[p] - (K * cfg.dt * pts.volume[p]) * (P * F.transposed());
    const Vec3 mv = m * pts.v[p];
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        for (int k = 0; k < 3; ++k) {
          const double w = s.w[0][i] * s.w[1][j] * s.w[2][k];
          const Vec3 d{(i - s.frac[0]) * dx, (j - s.frac[1]) * dx, (k - s.frac[2]) * dx};
          const std::size_t id = t.index(s.base[0] + i, s.base[1] + j, s.base[2] + k);
          t.mass[id] += w * m;
          t.momentum[id] += w * (mv + A * d);
        }
  }
}

}  // namespace

void p2g(const MaterialPoints& pts, GridState& grid, const SimConfig& cfg, double time) {
  check_domain(pts, cfg);
  grid.mark(pts.x);
  if (!grid.touched) return;
  const int n = grid.n;
  const std::size_t chunks =
      (cfg.deterministic || cfg.threads <= 1) ? 1 : static_cast<std::size_t>(cfg.threads);
  if (chunks == 1) {
    scatter_range(pts, 0, pts.size(), cfg, grid.dx,
                  ScatterTarget{grid.mass.data(), grid.momentum.data(), {0, 0, 0}, {n, n, n}});
  } else {
    // Private accumulators per chunk over the touched box, summed in chunk order.
    const std::array<int, 3> lo = grid.lo;
    const std::array<int, 3> ext{grid.hi[0] - lo[0] + 1, grid.hi[1] - lo[1] + 1, grid.hi[2] - lo[2] + 1};
    const std::size_t cells = static_cast<std::size_t>(ext[0]) * ext[1] * ext[2];
    std::vector<std::vector<double>> masses(chunks, std::vector<double>(cells, 0.0));
    std::vector<std::vector<Vec3>> moms(chunks, std::vector<Vec3>(cells));
    parallel_chunks(pts.size(), static_cast<int>(chunks), [&](std::size_t b, std::size_t e, std::size_t c) {
      scatter_range(pts, b, e, cfg, grid.dx, ScatterTarget{masses[c].data(), moms[c].data(), lo, ext});
    });
    for (std::size_t c = 0; c < chunks; ++c) {
      std::size_t local = 0;
      for (int i = lo[0]; i <= grid.hi[0]; ++i)
        for (int j = lo[1]; j <= grid.hi[1]; ++j)
          for (int k = lo[2]; k <= grid.hi[2]; ++k, ++local) {
            const std::size_t id = grid.index(i, j, k);
            grid.mass[id] += masses[c][local];
            grid.momentum[id] += moms[c][local];
          }
    }
  }

  const bool any_force = squared_norm(cfg.gravity) > 0.0 || !cfg.forces.empty();
  if (!any_force) return;
  for (int i = grid.lo[0]; i <= grid.hi[0]; ++i)
    for (int j = grid.lo[1]; j <= grid.hi[1]; ++j)
      for (int k = grid.lo[2]; k <= grid.hi[2]; ++k) {
        const std::size_t id = grid.index(i, j, k);
        if (grid.mass[id] <= 0.0) continue;
        const Vec3 f = grid.mass[id] * external_acceleration(cfg, grid.node_position(i, j, k), time);
        grid.force[id] = f;
        grid.momentum[id] += cfg.dt * f;
      }
}

void grid_update(GridState& grid, const SimConfig&) {
  if (!grid.touched) return;
  double max_mass = 0.0;
  for (int i = grid.lo[0]; i <= grid.hi[0]; ++i)
    for (int j = grid.lo[1]; j <= grid.hi[1]; ++j)
      for (int k = grid.lo[2]; k <= grid.hi[2]; ++k) max_mass = std::max(max_mass, grid.mass[grid.index(i, j, k)]);
  const double eps = 1e-12 * max_mass;
  for (int i = grid.lo[0]; i <= grid.hi[0]; ++i)
    for (int j = grid.lo[1]; j <= grid.hi[1]; ++j)
      for (int k = grid.lo[2]; k <= grid.hi[2]; ++k) {
        const std::size_t id = grid.index(i, j, k);
        const double m = grid.mass[id];
        if (m > eps && m > 0.0 && !grid.dirichlet[id])
          grid.velocity[id] = grid.momentum[id] / m;
        else
          grid.velocity[id] = {};
      }
}

void g2p(MaterialPoints& pts, const GridState& grid, const SimConfig& cfg) {
  const double dx = grid.dx, inv_dx = 1.0 / dx;
  const double K = 4.0 * inv_dx * inv_dx;
  parallel_for(pts.size(), cfg.threads, [&](std::size_t p) {
    const Stencil s = make_stencil(pts.x[p], inv_dx);
    Vec3 v;
    Mat3 B;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        for (int k = 0; k < 3; ++k) {
          const double w = s.w[0][i] * s.w[1][j] * s.w[2][k];
          const Vec3 d{(i - s.frac[0]) * dx, (j - s.frac[1]) * dx, (k - s.frac[2]) * dx};
          const Vec3& vi = grid.velocity[grid.index(s.base[0] + i, s.base[1] + j, s.base[2] + k)];
          v += w * vi;
          B += w * Mat3::outer(vi, d);
        }
    const Mat3 C = K * B;
    pts.v[p] = v;
    pts.C[p] = C;
    pts.x[p] += cfg.dt * v;
    pts.F[p] = (Mat3::identity() + cfg.dt * C) * pts.F[p];
  });
}

void substep(MaterialPoints& pts, GridState& grid, const SimConfig& cfg, double time) {
  grid.clear();
  p2g(pts, grid, cfg, time);
  grid_update(grid, cfg);
  g2p(pts, grid, cfg);
}

double simulate_step(MaterialPoints& pts, GridState& grid, const SimConfig& cfg, int n_substeps, double time) {
  if (n_substeps < 1) throw ValidationError("simulate_step: need at least one substep");
  for (int s = 0; s < n_substeps; ++s) {
    substep(pts, grid, cfg, time);
    time += cfg.dt;
  }
  return time;
}

double simulate_step(MaterialPoints& pts, const SimConfig& cfg, int n_substeps, double time) {
  GridState grid(cfg);
  return simulate_step(pts, grid, cfg, n_substeps, time);
}

double kinetic_energy(const MaterialPoints& pts) {
  double e = 0.0;
  for (std::size_t p = 0; p < pts.size(); ++p) e += 0.5 * pts.mass[p] * squared_norm(pts.v[p]);
  return e;
}

double elastic_energy(const MaterialPoints& pts) {
  double e = 0.0;
  for (std::size_t p = 0; p < pts.size(); ++p)
    e += pts.volume[p] * corotated_energy(pts.F[p], young_to_lame(pts.youngs[p], pts.poisson));
  return e;
}

Vec3 total_momentum(const MaterialPoints& pts) {
  Vec3 s;
  for (std::size_t p = 0; p < pts.size(); ++p) s += pts.mass[p] * pts.v[p];
  return s;
}

}  // namespace splatmpm::mpm
