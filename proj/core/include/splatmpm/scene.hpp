#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "splatmpm/la3.hpp"

namespace splatmpm {

/// Simulation state of a set of material points. Shared by the full Gaussian
/// set and by the subsampled driving set.
struct MaterialPoints {
  std::vector<Vec3> x;       // position, unit-cube coordinates
  std::vector<Vec3> v;       // velocity
  std::vector<Mat3> F;       // deformation gradient
  std::vector<Mat3> C;       // affine velocity gradient
  std::vector<double> mass;
  std::vector<double> volume;
  std::vector<double> youngs;
  double poisson = 0.3;

  std::size_t size() const { return x.size(); }
  void resize(std::size_t n);
};

/// Appearance attributes of each Gaussian. Never optimized.
struct SplatAttributes {
  std::vector<double> opacity;         // in [0, 1]
  std::vector<Mat3> rest_rotation;     // proper rotation
  std::vector<Mat3> rest_covariance;   // SPD, world frame at rest
  std::vector<Vec3> color;             // RGB in [0, 1]

  std::size_t size() const { return opacity.size(); }
  void resize(std::size_t n);
};

struct ParticleSet {
  MaterialPoints points;
  SplatAttributes splats;
  bool has_youngs = false;  // youngs values were read from a file or baked

  std::size_t size() const { return points.size(); }
  void resize(std::size_t n);
  void push_back(const Vec3& position);
};

struct Box {
  Vec3 lo, hi;
  bool contains(const Vec3& p) const {
    return p.x >= lo.x && p.x <= hi.x && p.y >= lo.y && p.y <= hi.y && p.z >= lo.z && p.z <= hi.z;
  }
};

/// Acceleration applied to grid nodes inside `region` while t in [t_begin, t_end).
struct ForceBox {
  Box region;
  Vec3 acceleration;
  double t_begin = 0.0;
  double t_end = 0.0;
};

struct SimConfig {
  int grid_resolution = 32;      // nodes per axis; dx = 1 / n
  double dt = 1e-4;              // substep
  int substeps = 100;            // substeps per frame
  double fps = 30.0;
  double density = 1.0;
  double poisson = 0.3;
  double youngs_min = 1e2;
  double youngs_max = 1e6;
  Vec3 gravity{};
  std::vector<ForceBox> forces;
  std::vector<Box> dirichlet;
  std::uint64_t seed = 0;
  int threads = 1;
  bool deterministic = true;

  double dx() const { return 1.0 / grid_resolution; }
  double frame_dt() const { return dt * substeps; }

  /// Throws ValidationError on violated invariants. Returns warnings, e.g. a
  /// step size above the elastic CFL guard.
  std::vector<std::string> validate() const;
};

struct Frame {
  int width = 0;
  int height = 0;
  int index = 0;
  std::vector<double> rgb;  // row-major, 3 channels

  Frame() = default;
  Frame(int w, int h, const Vec3& fill = {});
  Vec3 pixel(int px, int py) const;
  void set_pixel(int px, int py, const Vec3& c);
};

/// Reads an ASCII PLY vertex list. Properties: x, y, z (required); opacity;
/// scale_0..2 (log axis lengths); rot_0..3 (w, x, y, z); red/green/blue
/// (0..255) or f_dc_0..2; youngs. Sets F = I, C = 0, v = 0.
ParticleSet load_particles(const std::filesystem::path& path);
ParticleSet parse_particles(const std::string& text);
void save_particles(const ParticleSet& set, const std::filesystem::path& path);
std::string format_particles(const ParticleSet& set);

/// Regular lattice of nx * ny * nz Gaussians filling `box`, each jittered by
/// up to `jitter` lattice spacings. Isotropic footprint of 0.6 spacings,
/// opacity 0.9, colors alternating in stripes `stripe` lattice cells wide
/// along x and y.
ParticleSet make_block(const Box& box, int nx, int ny, int nz, double jitter = 0.0, std::uint64_t seed = 0,
                       int stripe = 2);

/// V_p = dx^3 / (particles in p's cell), m_p = density * V_p.
void compute_mass_volume(ParticleSet& set, const SimConfig& cfg);
void compute_mass_volume(MaterialPoints& points, const SimConfig& cfg);

/// Binary PPM (P6, maxval 255). Values map linearly to [0, 1].
Frame load_frame(const std::filesystem::path& path);
void save_frame(const Frame& frame, const std::filesystem::path& path);
std::string frame_file_name(int index);  // frame_%05d.ppm
std::vector<Frame> load_frames(const std::filesystem::path& dir);

/// Writes through a temporary file in the same directory and renames it into
/// place, so a failure never leaves a partial file behind.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);

}  // namespace splatmpm
