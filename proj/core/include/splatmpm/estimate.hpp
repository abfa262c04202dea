#pragma once

// Two-stage estimation of initial velocity and Young's modulus fields from
// reference frames, and synthetic reference generation.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "splatmpm/config.hpp"
#include "splatmpm/drive.hpp"
#include "splatmpm/fields.hpp"
#include "splatmpm/scene.hpp"
#include "splatmpm/splat.hpp"

namespace splatmpm::estimate {

struct ReferenceVideo {
  std::string id;
  std::vector<Frame> frames;  // frame 0 shows the initial state
  splat::Camera camera;
  double fps = 30.0;

  /// Throws ValidationError unless there are >= 4 frames, all of the camera's size.
  void validate() const;
};

/// Driving-particle positions per frame, frame 0 included.
struct Trajectory {
  std::vector<std::vector<Vec3>> frames;

  std::size_t count() const { return frames.empty() ? 0 : frames.front().size(); }
};

/// Binary layout: magic "SMPMTRJ1", uint64 frame count, uint64 particle
/// count, then float64 x, y, z per particle per frame, little-endian.
void save_trajectory(const Trajectory& t, const std::filesystem::path& path);
Trajectory load_trajectory(const std::filesystem::path& path);
std::string serialize_trajectory(const Trajectory& t);
Trajectory deserialize_trajectory(const std::string& bytes);

/// Particle set with mass and volume for `cfg` and the driving set derived
/// from it (k-means seeded by the config seed).
struct PreparedScene {
  ParticleSet particles;
  drive::DrivingSet driving;
  std::optional<Frame> background_image;  // loaded from cfg.background_image
};
PreparedScene prepare_scene(ParticleSet particles, const RunConfig& cfg);

/// Splat scene at a driving state; rotations are the fitted rigid rotations.
/// The background is the configured image if any, else the solid color.
splat::SplatScene skinned_scene(const PreparedScene& scene, const std::vector<Vec3>& driving_x,
                                const RunConfig& cfg);

struct Rollout {
  Trajectory trajectory;
  std::vector<std::vector<Frame>> frames;  // per camera
};

/// Simulates cfg.frames - 1 frames of the driving set from the given initial
/// Young's moduli and velocities and renders every frame for each camera.
Rollout rollout(const PreparedScene& scene, const RunConfig& cfg, const std::vector<double>& youngs,
                const std::vector<Vec3>& velocity, bool render_frames = true);

/// Ground-truth Young's modulus and velocity at the driving rest positions.
std::vector<double> ground_truth_youngs(const PreparedScene& scene, const RunConfig& cfg);
std::vector<Vec3> ground_truth_velocity(const PreparedScene& scene, const RunConfig& cfg);

/// Forward simulation of the configured ground truth.
Rollout generate_reference(const PreparedScene& scene, const RunConfig& cfg);

struct LossRecord {
  int stage = 0;
  int iter = 0;
  double data = 0.0;
  double tv = 0.0;
};

/// Text table, one row per iteration: stage, iter, data-loss, tv-loss.
std::string format_history(const std::vector<LossRecord>& history);

struct EstimationRun {
  RunConfig cfg;
  PreparedScene scene;
  std::vector<ReferenceVideo> refs;
  std::vector<Trajectory> targets;  // position-loss mode, one per reference

  fields::NeuralField material;
  std::vector<fields::NeuralField> velocity;  // one per reference
  fields::Adam material_adam;
  std::vector<fields::Adam> velocity_adam;
  std::vector<double> frozen_youngs;  // stage-1 stiffness per driving particle

  std::vector<LossRecord> history;
  int stage1_iterations = 0;
  int stage2_iterations = 0;

  /// Called with (stage, iteration) after every snapshot_every-th step.
  std::function<void(const EstimationRun&, int, int)> on_snapshot;

  std::vector<double> driving_youngs() const;
  std::vector<Vec3> driving_velocity(std::size_t ref) const;
};

/// Sets up fields, optimizers and the frozen stage-1 stiffness. In
/// position-loss mode `targets` must hold one trajectory per reference; in
/// image mode `refs` supply frames and cameras.
EstimationRun make_run(const RunConfig& cfg, ParticleSet particles, std::vector<ReferenceVideo> refs,
                       std::vector<Trajectory> targets = {});

/// Loss value of the current fields (data term summed over references).
struct LossEval {
  double data = 0.0;
  double tv = 0.0;
};

/// Optimizes the velocity fields on frames 1..3 with frozen random stiffness.
/// The parameters with the lowest data loss are kept. A non-finite loss or gradient halves
/// the learning rate once; a second one throws NumericalError.
void stage1_velocity(EstimationRun& run);

/// Optimizes the material field on all frames with frozen velocity and
/// per-frame gradient truncation. Same divergence policy as stage 1.
void stage2_material(EstimationRun& run);

/// Stage-1 and stage-2 objectives and gradients at the current parameters.
/// `grad` is resized to the parameter count of the optimized field(s).
LossEval stage1_loss(const EstimationRun& run, std::size_t ref, std::vector<double>* grad);
LossEval stage2_loss(const EstimationRun& run, const std::vector<int>& frames, std::vector<double>* grad);

/// Particle set with `youngs` baked from the material field at rest positions.
ParticleSet bake(const EstimationRun& run);

/// stage1_velocity then stage2_material.
void estimate(EstimationRun& run);

}  // namespace splatmpm::estimate
