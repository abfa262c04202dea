#pragma once

// Triplane + MLP neural fields for Young's modulus and initial velocity.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "splatmpm/la3.hpp"

namespace splatmpm::fields {

enum class FieldKind : std::uint32_t { kMaterial = 1, kVelocity = 2 };

struct FieldSpec {
  FieldKind kind = FieldKind::kMaterial;
  int resolution = 8;  // nodes per plane axis
  int features = 16;   // channels per plane
  int hidden = 64;
  double youngs_min = 1e2;  // material output bounds
  double youngs_max = 1e6;
  double v_scale = 1.0;  // velocity output scale

  int output_dim() const { return kind == FieldKind::kMaterial ? 1 : 3; }
};

FieldSpec material_spec(double youngs_min, double youngs_max, int resolution = 8);
FieldSpec velocity_spec(double v_scale = 1.0, int resolution = 24);

/// Three R x R x D feature planes (xy, xz, yz) decoded by a 3D -> H -> H -> out
/// ReLU MLP. All trainable values live in one flat vector: the planes first,
/// then W1, b1, W2, b2, W3, b3 (weights row-major, out x in).
class NeuralField {
 public:
  NeuralField() = default;
  /// Planes ~ N(0, 0.1^2), weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero biases.
  NeuralField(const FieldSpec& spec, std::uint64_t seed);

  const FieldSpec& spec() const { return spec_; }
  std::vector<double>& params() { return params_; }
  const std::vector<double>& params() const { return params_; }
  std::size_t plane_param_count() const { return plane_count_; }
  std::size_t param_count() const { return params_.size(); }

  /// Feature value of plane p (0 = xy, 1 = xz, 2 = yz) at node (i, j), channel c.
  double& plane(int p, int i, int j, int c);
  double plane(int p, int i, int j, int c) const;

  /// Raw MLP output before squashing; only the first output_dim() entries are used.
  Vec3 raw(const Vec3& x) const;
  /// Material fields: E in (youngs_min, youngs_max).
  double youngs(const Vec3& x) const;
  /// Velocity fields: raw output times v_scale.
  Vec3 velocity(const Vec3& x) const;
  std::vector<double> youngs(const std::vector<Vec3>& x) const;
  std::vector<Vec3> velocity(const std::vector<Vec3>& x) const;

  /// Accumulates dLoss/dparams into `grad` for the squashed outputs. For
  /// material fields only adjoint[i].x is read.
  void backward(const std::vector<Vec3>& x, const std::vector<Vec3>& adjoint, std::vector<double>& grad) const;

  /// Sum over planes and channels of squared neighbor differences.
  double tv_loss() const;
  /// Adds weight * dTV/dparams to `grad`.
  void tv_backward(double weight, std::vector<double>& grad) const;

  /// Sets the output bias so that a network with zero last-layer weights
  /// yields `youngs` (material) everywhere.
  void set_youngs_bias(double youngs);
  /// Zeroes W3 and b3: the field becomes spatially constant.
  void zero_output_layer();

  void save(const std::filesystem::path& path) const;
  static NeuralField load(const std::filesystem::path& path);
  std::string serialize() const;
  static NeuralField deserialize(const std::string& bytes);

 private:
  struct Forward;
  void forward(const Vec3& x, Forward& f) const;
  double squash_youngs(double y) const;

  FieldSpec spec_;
  std::vector<double> params_;
  std::size_t plane_count_ = 0;
  std::size_t w1_ = 0, b1_ = 0, w2_ = 0, b2_ = 0, w3_ = 0, b3_ = 0;
};

/// A contiguous slice of a flat parameter vector with its own learning rate.
struct ParamGroup {
  std::size_t begin = 0;
  std::size_t end = 0;
  double lr = 1e-3;
};

/// Adam with bias correction.
class Adam {
 public:
  Adam() = default;
  explicit Adam(std::size_t n, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  /// Returns false and leaves everything unchanged when any gradient is
  /// non-finite.
  bool step(std::vector<double>& params, const std::vector<double>& grads, const std::vector<ParamGroup>& groups);
  bool step(std::vector<double>& params, const std::vector<double>& grads, double lr);

  int steps() const { return t_; }
  bool skipped() const { return skipped_; }

 private:
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  int t_ = 0;
  bool skipped_ = false;
  std::vector<double> m_, v_;
};

}  // namespace splatmpm::fields
