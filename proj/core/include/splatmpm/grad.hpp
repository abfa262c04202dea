#pragma once

// Reverse-mode differentiation of MLS-MPM substeps with respect to the
// initial state and per-particle Young's modulus. Each kernel has a
// hand-derived adjoint; forward states are checkpointed every
// `checkpoint_interval` substeps and recomputed during the backward pass.

#include <cstddef>
#include <string>
#include <vector>

#include "splatmpm/mpm.hpp"
#include "splatmpm/scene.hpp"

namespace splatmpm::grad {

/// Adjoint (dLoss/d.) of a MaterialPoints state.
struct StateAdjoint {
  std::vector<Vec3> x, v;
  std::vector<Mat3> F, C;

  StateAdjoint() = default;
  explicit StateAdjoint(std::size_t n) : x(n), v(n), F(n), C(n) {}
  std::size_t size() const { return x.size(); }
  bool is_zero() const;
};

/// Reverse of one substep. On entry `adj` holds the adjoint of the substep's
/// output; on return it holds the adjoint of `input`. dLoss/dE is added to
/// `grad_youngs`. `grid` is scratch space.
void substep_backward(const MaterialPoints& input, const SimConfig& cfg, double time, mpm::GridState& grid,
                      StateAdjoint& adj, std::vector<double>& grad_youngs);

/// Forward record of a multi-frame simulation.
class Tape {
 public:
  Tape(const SimConfig& cfg, int checkpoint_interval = 16);

  /// Advances `state` by one frame (cfg.substeps substeps), storing
  /// checkpoints. Results are bit-identical to mpm::simulate_step.
  void record_frame(MaterialPoints& state);

  std::size_t frames() const { return frames_.size(); }
  int checkpoint_interval() const { return interval_; }
  double time() const { return time_; }
  void set_time(double t) { time_ = t; }
  const SimConfig& config() const { return cfg_; }
  /// State at the entry of frame f.
  const MaterialPoints& frame_entry(std::size_t f) const;
  void clear();

  struct Checkpoint {
    int substep = 0;  // offset within the frame
    double time = 0.0;
    MaterialPoints state;
  };
  struct FrameRecord {
    std::vector<Checkpoint> checkpoints;  // first one is the frame entry
  };
  const FrameRecord& frame(std::size_t f) const { return frames_.at(f); }

 private:
  SimConfig cfg_;
  int interval_;
  double time_ = 0.0;
  std::vector<FrameRecord> frames_;
  mpm::GridState grid_;
};

struct FrameGradient {
  StateAdjoint entry;                // adjoint of the state at the frame entry
  std::vector<double> grad_youngs;   // dLoss/dE accumulated over this frame
};

/// Exact adjoint of the substeps of frame `f`, given the adjoint of the
/// frame's output state. Throws std::logic_error if the tape lacks the frame.
FrameGradient backward_frame(const Tape& tape, std::size_t f, StateAdjoint out_adjoint);

struct SequenceGradient {
  std::vector<double> grad_youngs;
  StateAdjoint initial;  // adjoint of the initial state (zero when truncated)
};

/// Backpropagates per-frame position adjoints (position_adjoints[f] is
/// dLoss/dx at the end of frame f; empty vectors mean no loss on that frame).
/// With `truncate`, each frame's loss reaches only that frame's substeps and
/// the state adjoint is dropped at frame boundaries.
SequenceGradient backward_sequence(const Tape& tape, const std::vector<std::vector<Vec3>>& position_adjoints,
                                   bool truncate);

/// First three frames, full backpropagation; returns dLoss/dv0 per particle.
std::vector<Vec3> backward_stage1(const Tape& tape, const std::vector<std::vector<Vec3>>& position_adjoints);

// ---------------------------------------------------------------------------
// Position-space loss: mean over particles of |x_p - x*_p|^2.

double position_loss(const std::vector<Vec3>& x, const std::vector<Vec3>& target);
std::vector<Vec3> position_loss_grad(const std::vector<Vec3>& x, const std::vector<Vec3>& target);

// ---------------------------------------------------------------------------
// Finite-difference verification.

enum class GradMode {
  kVelocity,   // dLoss/dv0, full backpropagation
  kMaterial,   // dLoss/dE, full backpropagation
  kTruncated,  // dLoss/dE and dLoss/dv0 with per-frame truncation
};

struct GradEntry {
  std::string name;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
  bool checked = false;  // |grad| above the significance threshold
};

struct GradReport {
  std::vector<GradEntry> entries;
  double max_rel_error = 0.0;
  double median_rel_error = 0.0;
  bool finite = true;
  std::string failure;

  std::string to_text() const;
  std::string to_json() const;
};

/// A small test problem: initial state, frame count, and a target
/// trajectory for the position loss.
struct GradProblem {
  MaterialPoints initial;
  SimConfig cfg;
  int frames = 2;
  std::vector<std::vector<Vec3>> targets;  // per frame end
};

/// Sum over frames of position_loss against targets.
double trajectory_loss(const GradProblem& prob);

/// Compares analytic gradients with central differences, step
/// h = 1e-4 * max(1, |theta|) unless `step_scale` overrides the 1e-4.
/// Entries with |grad| < `significance` * max|grad| are reported but not
/// counted in the error statistics. Never throws for non-finite gradients;
/// they produce a failure report.
GradReport gradcheck(const GradProblem& prob, GradMode mode, double significance = 1e-3,
                     double step_scale = 1e-4, std::size_t max_params = 400);

/// Beam-like block of particles used by the CLI gradcheck and tests.
GradProblem make_beam_problem(int particles_per_axis_x, int frames, int substeps, bool free_fall = false,
                              std::uint64_t seed = 7);

}  // namespace splatmpm::grad
