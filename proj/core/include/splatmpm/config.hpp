#pragma once

// JSON run configuration: simulation settings, cameras, optimizer and
// ground-truth blocks. Unknown keys are rejected; `seed` is mandatory.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "splatmpm/la3.hpp"
#include "splatmpm/scene.hpp"
#include "splatmpm/splat.hpp"

namespace splatmpm {

struct OptimizerConfig {
  int iters_stage1 = 200;
  int iters_stage2 = 400;
  double lr_velocity = 1e-2;
  double lr_planes = 1e-2;
  double lr_mlp = 1e-3;
  double tv_weight = 1e-3;
  double loss_lambda = 0.1;
  bool position_loss = false;    // compare driving positions to a trajectory instead of frames
  int frames_per_batch = 0;      // stage-2 frames per iteration; 0 uses all
  int material_resolution = 8;
  int velocity_resolution = 24;
  int features = 16;
  int hidden = 64;
  double v_scale = 1.0;
  double youngs_init = 0.0;      // 0 selects the geometric mean of the bounds
  int snapshot_every = 0;        // 0 disables periodic field snapshots
};

/// Young's modulus of the ground-truth simulation.
struct YoungsSpec {
  enum class Kind { kConstant, kSplit, kParticles } kind = Kind::kConstant;
  double value = 1e3;  // kConstant; kSplit below the threshold
  double above = 1e4;  // kSplit at or above the threshold
  int axis = 0;
  double threshold = 0.5;

  double at(const Vec3& x) const;
};

/// Initial velocity of the ground-truth simulation.
struct VelocitySpec {
  enum class Kind { kZero, kUniform, kBox, kRotation } kind = Kind::kZero;
  Vec3 value;  // kUniform, kBox: velocity; kRotation: angular velocity
  Box region;  // kBox
  Vec3 center{0.5, 0.5, 0.5};  // kRotation

  Vec3 at(const Vec3& x) const;
};

struct GroundTruth {
  YoungsSpec youngs;
  VelocitySpec velocity;
};

struct RunConfig {
  SimConfig sim;
  int frames = 8;                  // frames written, frame 0 is the initial state
  int checkpoint_interval = 16;
  std::size_t driving_count = 0;   // 0 selects drive::driving_count
  std::vector<splat::Camera> cameras;
  Vec3 background{1.0, 1.0, 1.0};
  std::string background_image;    // PPM path, empty for a solid color
  OptimizerConfig optimizer;
  GroundTruth ground_truth;

  std::uint64_t seed() const { return sim.seed; }
  /// Throws ValidationError on violated invariants; returns warnings.
  std::vector<std::string> validate() const;
};

/// Parses a configuration document. Throws ValidationError naming the
/// offending key on unknown keys, wrong types or a missing seed.
RunConfig parse_config(const std::string& json_text);
RunConfig load_config(const std::filesystem::path& path);
/// Full JSON echo; parse_config(config_to_json(c)) reproduces c.
std::string config_to_json(const RunConfig& c);

}  // namespace splatmpm
