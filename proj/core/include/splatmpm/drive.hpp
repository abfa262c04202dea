#pragma once

// Driving-particle subsampling: the simulation runs on Q k-means cluster
// particles and every Gaussian is moved by a rigid transform fitted to its
// nearest driving particles.

#include <cstddef>
#include <cstdint>
#include <vector>

#include "splatmpm/la3.hpp"
#include "splatmpm/scene.hpp"

namespace splatmpm::drive {

struct KMeansResult {
  std::vector<Vec3> centroids;
  std::vector<int> assignment;
  std::vector<double> objective;  // after each assignment step
  int iterations = 0;
};

/// k-means++ seeding, then Lloyd iterations until the largest centroid shift
/// is below `tol` or `max_iter` is reached. Throws ValidationError if k is 0
/// or exceeds the number of points.
KMeansResult kmeans(const std::vector<Vec3>& points, std::size_t k, std::uint64_t seed, int max_iter = 50,
                    double tol = 1e-6, int threads = 1);

/// Q = clamp(8 * occupied grid cells, ceil(P / 50), max(1, P / 10)).
std::size_t driving_count(const std::vector<Vec3>& points, const SimConfig& cfg);

constexpr int kNeighbors = 8;

struct DrivingSet {
  MaterialPoints points;            // simulated state of the driving particles
  std::vector<Vec3> rest;           // driving positions at t = 0
  std::vector<Vec3> gaussian_rest;  // Gaussian positions at t = 0
  std::vector<int> cluster;         // per Gaussian
  int k = 0;                        // neighbors per Gaussian, min(8, Q)
  std::vector<int> neighbors;       // P x k, nearest first

  std::size_t size() const { return points.size(); }
  const int* neighbors_of(std::size_t g) const { return neighbors.data() + g * static_cast<std::size_t>(k); }
};

/// Clusters the Gaussians into `q` driving particles (0 selects driving_count).
/// Position is the member mean, mass and volume are summed, velocity is the
/// mass-weighted mean, youngs is the member mean, F = I and C = 0. Mass and
/// volume of the set must already be computed.
DrivingSet init_driving(const ParticleSet& set, const SimConfig& cfg, std::size_t q = 0, std::uint64_t seed = 0);

/// x -> R (x - rest_centroid) + current_centroid.
struct RigidTransform {
  Mat3 R = Mat3::identity();
  Vec3 t;  // translation of the origin
  Vec3 apply(const Vec3& x) const { return R * x + t; }
};

/// Least-squares rigid fit (Kabsch). When the second singular value of the
/// cross-covariance is below 1e-6 of the first the rotation is the identity.
RigidTransform fit_rigid(const Vec3* rest, const Vec3* current, std::size_t n);
RigidTransform fit_rigid(const std::vector<Vec3>& rest, const std::vector<Vec3>& current);

struct Skinned {
  std::vector<Vec3> x;  // Gaussian positions
  std::vector<Mat3> R;  // fitted rotation per Gaussian; full orientation is R * rest_rotation
};

/// Applies the per-Gaussian rigid fit of its rest neighbors to `current`
/// driving positions.
Skinned interpolate(const DrivingSet& drv, const std::vector<Vec3>& current, int threads = 1);

/// Reverse of interpolate: given dLoss/dx and dLoss/dR per Gaussian, returns
/// dLoss/d(current driving positions).
std::vector<Vec3> interpolate_backward(const DrivingSet& drv, const std::vector<Vec3>& current,
                                       const std::vector<Vec3>& grad_x, const std::vector<Mat3>& grad_R);

}  // namespace splatmpm::drive
