#pragma once

// Gaussian splat rasterizer with reverse-mode derivatives with respect to
// splat means and rotations, and the L1 + D-SSIM image loss.

#include <memory>
#include <optional>
#include <vector>

#include "splatmpm/la3.hpp"
#include "splatmpm/scene.hpp"

namespace splatmpm::splat {

/// Pinhole camera. Camera space: x right, y down, z forward; x_cam = R x + t.
/// Pixel (i, j) samples image coordinates (i, j) exactly.
struct Camera {
  double fx = 100.0, fy = 100.0;
  double cx = 32.0, cy = 32.0;
  int width = 64, height = 64;
  Mat3 R = Mat3::identity();
  Vec3 t;

  /// Throws ValidationError unless fx, fy > 0, sizes positive and R a rotation.
  void validate() const;
  Vec3 to_camera(const Vec3& x) const { return R * x + t; }

  /// Camera at `eye` looking at `target`; `fov_y_deg` is the vertical field of view.
  static Camera look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double fov_y_deg, int width,
                        int height);
};

struct SplatScene {
  std::vector<Vec3> x;                // means
  std::vector<Mat3> R;                // rotation applied to the rest covariance
  std::vector<Mat3> rest_covariance;  // world-frame covariance at rest
  std::vector<double> opacity;
  std::vector<Vec3> color;
  Vec3 background{1.0, 1.0, 1.0};
  std::optional<Frame> background_image;  // overrides `background` when set

  std::size_t size() const { return x.size(); }
  /// Rest pose of a particle set: R = I.
  static SplatScene from_particles(const ParticleSet& set);
};

constexpr double kMaxAlpha = 0.999;
constexpr double kNearPlane = 1e-2;

/// Projection and binning data of the last forward pass; reused by the
/// backward pass so the depth order stays fixed.
struct RenderCache;

struct RenderCacheDeleter {
  void operator()(RenderCache* c) const;
};
using RenderCachePtr = std::unique_ptr<RenderCache, RenderCacheDeleter>;

/// Front-to-back alpha compositing of depth-sorted splats, alpha =
/// min(0.999, opacity * exp(-q / 2)) for Mahalanobis q <= 9, then the
/// background weighted by the remaining transmittance. Splats with camera
/// depth below kNearPlane are culled.
Frame render(const SplatScene& scene, const Camera& cam, int threads = 1, RenderCachePtr* cache = nullptr);

struct SplatGradient {
  std::vector<Vec3> x;
  std::vector<Mat3> R;
};

/// dLoss/d(means) and dLoss/d(R) given dLoss/d(pixel values) in `adjoint`.
/// Uses `cache` from a forward pass of the same scene when provided.
SplatGradient render_backward(const SplatScene& scene, const Camera& cam, const Frame& adjoint, int threads = 1,
                              const RenderCache* cache = nullptr);

struct LossValue {
  double total = 0.0;
  double l1 = 0.0;
  double dssim = 0.0;
};

/// Mean SSIM over pixels and channels with an 11x11 Gaussian window
/// (sigma 1.5), zero padding, C1 = 0.01^2, C2 = 0.03^2.
double ssim(const Frame& a, const Frame& b);

/// lambda * L1 + (1 - lambda) * (1 - SSIM) / 2. When `grad` is non-null it
/// receives dLoss/d(rendered). Throws ValidationError on a size mismatch.
LossValue image_loss(const Frame& rendered, const Frame& reference, double lambda = 0.1, Frame* grad = nullptr);

}  // namespace splatmpm::splat
