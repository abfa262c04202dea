#include "splatmpm/estimate.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <random>
#include <sstream>

#include "splatmpm/errors.hpp"
#include "splatmpm/grad.hpp"
#include "splatmpm/mpm.hpp"

namespace splatmpm::estimate {

void ReferenceVideo::validate() const {
  camera.validate();
  if (frames.size() < 4)
    throw ValidationError("reference '" + id + "': need at least 4 frames, got " + std::to_string(frames.size()));
  for (std::size_t f = 0; f < frames.size(); ++f)
    if (frames[f].width != camera.width || frames[f].height != camera.height)
      throw ValidationError("reference '" + id + "': frame " + std::to_string(f) + " is " +
                            std::to_string(frames[f].width) + "x" + std::to_string(frames[f].height) +
                            ", camera is " + std::to_string(camera.width) + "x" + std::to_string(camera.height));
}

// ---------------------------------------------------------------------------
// Trajectory files

namespace {
constexpr char kTrajectoryMagic[8] = {'S', 'M', 'P', 'M', 'T', 'R', 'J', '1'};
}

std::string serialize_trajectory(const Trajectory& t) {
  const std::uint64_t nf = t.frames.size(), np = t.count();
  for (const auto& f : t.frames)
    if (f.size() != np) throw ValidationError("trajectory: frames differ in particle count");
  std::string out(kTrajectoryMagic, sizeof(kTrajectoryMagic));
  out.append(reinterpret_cast<const char*>(&nf), sizeof(nf));
  out.append(reinterpret_cast<const char*>(&np), sizeof(np));
  for (const auto& f : t.frames)
    for (const Vec3& p : f)
      for (std::size_t a = 0; a < 3; ++a) {
        const double v = p[a];
        out.append(reinterpret_cast<const char*>(&v), sizeof(v));
      }
  return out;
}

Trajectory deserialize_trajectory(const std::string& bytes) {
  const std::size_t header = sizeof(kTrajectoryMagic) + 2 * sizeof(std::uint64_t);
  if (bytes.size() < header || std::memcmp(bytes.data(), kTrajectoryMagic, sizeof(kTrajectoryMagic)) != 0)
    throw ValidationError("trajectory: bad magic");
  std::uint64_t nf = 0, np = 0;
  std::memcpy(&nf, bytes.data() + 8, 8);
  std::memcpy(&np, bytes.data() + 16, 8);
  if (np != 0 && nf > (bytes.size() - header) / (24 * np))
    throw ValidationError("trajectory: truncated data");
  if (bytes.size() != header + nf * np * 24) throw ValidationError("trajectory: size does not match header");
  Trajectory t;
  t.frames.assign(nf, std::vector<Vec3>(np));
  const char* p = bytes.data() + header;
  for (auto& f : t.frames)
    for (Vec3& x : f)
      for (std::size_t a = 0; a < 3; ++a) {
        std::memcpy(&x[a], p, 8);
        p += 8;
      }
  return t;
}

void save_trajectory(const Trajectory& t, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_trajectory(t));
}

Trajectory load_trajectory(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open trajectory " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_trajectory(ss.str());
}

// ---------------------------------------------------------------------------
// Scene preparation and forward rollouts

namespace {

double default_youngs(const RunConfig& cfg) {
  return cfg.optimizer.youngs_init > 0.0 ? cfg.optimizer.youngs_init
                                         : std::sqrt(cfg.sim.youngs_min * cfg.sim.youngs_max);
}

}  // namespace

PreparedScene prepare_scene(ParticleSet particles, const RunConfig& cfg) {
  if (particles.size() == 0) throw ValidationError("scene has no particles");
  compute_mass_volume(particles, cfg.sim);
  particles.points.poisson = cfg.sim.poisson;
  if (!particles.has_youngs) std::fill(particles.points.youngs.begin(), particles.points.youngs.end(), default_youngs(cfg));
  PreparedScene s;
  s.driving = drive::init_driving(particles, cfg.sim, cfg.driving_count, cfg.sim.seed);
  if (!cfg.background_image.empty()) s.background_image = load_frame(cfg.background_image);
  s.particles = std::move(particles);
  return s;
}

splat::SplatScene skinned_scene(const PreparedScene& scene, const std::vector<Vec3>& driving_x, const RunConfig& cfg) {
  drive::Skinned sk = drive::interpolate(scene.driving, driving_x, cfg.sim.threads);
  splat::SplatScene s;
  s.x = std::move(sk.x);
  s.R = std::move(sk.R);
  s.rest_covariance = scene.particles.splats.rest_covariance;
  s.opacity = scene.particles.splats.opacity;
  s.color = scene.particles.splats.color;
  s.background = cfg.background;
  s.background_image = scene.background_image;
  return s;
}

Rollout rollout(const PreparedScene& scene, const RunConfig& cfg, const std::vector<double>& youngs,
                const std::vector<Vec3>& velocity, bool render_frames) {
  const std::size_t q = scene.driving.size();
  if (youngs.size() != q || velocity.size() != q) throw ValidationError("rollout: per-particle input size mismatch");
  MaterialPoints st = scene.driving.points;
  st.youngs = youngs;
  st.v = velocity;
  Rollout r;
  const std::size_t ncam = render_frames ? cfg.cameras.size() : 0;
  r.frames.resize(ncam);
  auto emit = [&](int f) {
    r.trajectory.frames.push_back(st.x);
    if (ncam == 0) return;
    const splat::SplatScene s = skinned_scene(scene, st.x, cfg);
    for (std::size_t c = 0; c < ncam; ++c) {
      Frame img = splat::render(s, cfg.cameras[c], cfg.sim.threads);
      img.index = f;
      r.frames[c].push_back(std::move(img));
    }
  };
  emit(0);
  mpm::GridState grid(cfg.sim);
  double t = 0.0;
  for (int f = 1; f < cfg.frames; ++f) {
    t = mpm::simulate_step(st, grid, cfg.sim, cfg.sim.substeps, t);
    emit(f);
  }
  return r;
}

std::vector<double> ground_truth_youngs(const PreparedScene& scene, const RunConfig& cfg) {
  const YoungsSpec& y = cfg.ground_truth.youngs;
  if (y.kind == YoungsSpec::Kind::kParticles) {
    if (!scene.particles.has_youngs)
      throw ValidationError("ground truth: youngs type 'particles' needs a particle file with youngs values");
    return scene.driving.points.youngs;
  }
  std::vector<double> e(scene.driving.size());
  for (std::size_t q = 0; q < e.size(); ++q) e[q] = y.at(scene.driving.rest[q]);
  return e;
}

std::vector<Vec3> ground_truth_velocity(const PreparedScene& scene, const RunConfig& cfg) {
  std::vector<Vec3> v(scene.driving.size());
  for (std::size_t q = 0; q < v.size(); ++q) v[q] = cfg.ground_truth.velocity.at(scene.driving.rest[q]);
  return v;
}

Rollout generate_reference(const PreparedScene& scene, const RunConfig& cfg) {
  return rollout(scene, cfg, ground_truth_youngs(scene, cfg), ground_truth_velocity(scene, cfg));
}

std::string format_history(const std::vector<LossRecord>& history) {
  std::ostringstream os;
  os << "stage iter data_loss tv_loss\n";
  os << std::setprecision(17);
  for (const LossRecord& r : history) os << r.stage << ' ' << r.iter << ' ' << r.data << ' ' << r.tv << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Estimation

std::vector<double> EstimationRun::driving_youngs() const { return material.youngs(scene.driving.rest); }

std::vector<Vec3> EstimationRun::driving_velocity(std::size_t ref) const {
  return velocity.at(ref).velocity(scene.driving.rest);
}

EstimationRun make_run(const RunConfig& cfg, ParticleSet particles, std::vector<ReferenceVideo> refs,
                       std::vector<Trajectory> targets) {
  cfg.validate();
  EstimationRun run;
  run.cfg = cfg;
  run.scene = prepare_scene(std::move(particles), cfg);
  const std::size_t q = run.scene.driving.size();
  std::size_t nref = 0;
  if (cfg.optimizer.position_loss) {
    if (targets.empty()) throw ValidationError("position loss needs at least one target trajectory");
    for (const Trajectory& t : targets) {
      if (t.frames.size() < 4) throw ValidationError("target trajectory needs at least 4 frames");
      if (t.count() != q)
        throw ValidationError("target trajectory has " + std::to_string(t.count()) + " particles, driving set has " +
                              std::to_string(q));
    }
    nref = targets.size();
  } else {
    if (refs.empty()) throw ValidationError("estimation needs at least one reference video");
    for (const ReferenceVideo& r : refs) r.validate();
    nref = refs.size();
  }
  run.refs = std::move(refs);
  run.targets = std::move(targets);

  const OptimizerConfig& o = cfg.optimizer;
  fields::FieldSpec ms = fields::material_spec(cfg.sim.youngs_min, cfg.sim.youngs_max, o.material_resolution);
  ms.features = o.features;
  ms.hidden = o.hidden;
  run.material = fields::NeuralField(ms, cfg.sim.seed);
  run.material.zero_output_layer();
  run.material.set_youngs_bias(default_youngs(cfg));
  run.material_adam = fields::Adam(run.material.param_count());

  fields::FieldSpec vs = fields::velocity_spec(o.v_scale, o.velocity_resolution);
  vs.features = o.features;
  vs.hidden = o.hidden;
  for (std::size_t r = 0; r < nref; ++r) {
    run.velocity.emplace_back(vs, cfg.sim.seed + 1 + r);
    run.velocity.back().zero_output_layer();
    run.velocity_adam.emplace_back(run.velocity.back().param_count());
  }

  std::mt19937_64 rng(cfg.sim.seed ^ 0x5eed5eedULL);
  std::uniform_real_distribution<double> u(std::log(cfg.sim.youngs_min), std::log(cfg.sim.youngs_max));
  run.frozen_youngs.resize(q);
  for (double& e : run.frozen_youngs) e = std::exp(u(rng));
  return run;
}

namespace {

std::size_t frame_count(const EstimationRun& run, std::size_t ref) {
  return run.cfg.optimizer.position_loss ? run.targets[ref].frames.size() : run.refs[ref].frames.size();
}

// Data loss of one frame and, when `adj` is non-null, dLoss/d(driving positions).
double frame_loss(const EstimationRun& run, std::size_t ref, std::size_t f, const std::vector<Vec3>& x,
                  std::vector<Vec3>* adj) {
  if (run.cfg.optimizer.position_loss) {
    const auto& target = run.targets[ref].frames[f];
    if (adj) *adj = grad::position_loss_grad(x, target);
    return grad::position_loss(x, target);
  }
  const ReferenceVideo& rv = run.refs[ref];
  const int threads = run.cfg.sim.threads;
  const splat::SplatScene s = skinned_scene(run.scene, x, run.cfg);
  splat::RenderCachePtr cache;
  const Frame img = splat::render(s, rv.camera, threads, adj ? &cache : nullptr);
  Frame g;
  const splat::LossValue lv = splat::image_loss(img, rv.frames[f], run.cfg.optimizer.loss_lambda, adj ? &g : nullptr);
  if (adj) {
    const splat::SplatGradient sg = splat::render_backward(s, rv.camera, g, threads, cache.get());
    *adj = drive::interpolate_backward(run.scene.driving, x, sg.x, sg.R);
  }
  return lv.total;
}

MaterialPoints initial_state(const EstimationRun& run, const std::vector<double>& youngs,
                             const std::vector<Vec3>& velocity) {
  MaterialPoints st = run.scene.driving.points;
  st.youngs = youngs;
  st.v = velocity;
  return st;
}

bool all_finite(const std::vector<double>& g) {
  return std::all_of(g.begin(), g.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace

LossEval stage1_loss(const EstimationRun& run, std::size_t ref, std::vector<double>* grad) {
  const fields::NeuralField& field = run.velocity.at(ref);
  const auto& rest = run.scene.driving.rest;
  MaterialPoints st = initial_state(run, run.frozen_youngs, field.velocity(rest));
  grad::Tape tape(run.cfg.sim, run.cfg.checkpoint_interval);
  std::vector<std::vector<Vec3>> adj(3);
  LossEval L;
  for (std::size_t f = 1; f <= 3; ++f) {
    tape.record_frame(st);
    L.data += frame_loss(run, ref, f, st.x, grad ? &adj[f - 1] : nullptr);
  }
  const double w = run.cfg.optimizer.tv_weight;
  L.tv = w * field.tv_loss();
  if (grad) {
    const std::vector<Vec3> dv = grad::backward_stage1(tape, adj);
    grad->assign(field.param_count(), 0.0);
    field.backward(rest, dv, *grad);
    field.tv_backward(w, *grad);
  }
  return L;
}

LossEval stage2_loss(const EstimationRun& run, const std::vector<int>& frames, std::vector<double>* grad) {
  const auto& rest = run.scene.driving.rest;
  const std::vector<double> youngs = run.driving_youngs();
  std::vector<Vec3> dE(rest.size());
  LossEval L;
  for (std::size_t r = 0; r < run.velocity.size(); ++r) {
    const std::size_t nf = frame_count(run, r);
    int last = 0;
    for (int f : frames)
      if (f >= 1 && static_cast<std::size_t>(f) < nf) last = std::max(last, f);
    if (last == 0) continue;
    MaterialPoints st = initial_state(run, youngs, run.driving_velocity(r));
    grad::Tape tape(run.cfg.sim, run.cfg.checkpoint_interval);
    // adj[k] is the adjoint of the positions at the end of recorded frame k (image frame k + 1).
    std::vector<std::vector<Vec3>> adj(static_cast<std::size_t>(last));
    for (int f = 1; f <= last; ++f) {
      tape.record_frame(st);
      if (std::find(frames.begin(), frames.end(), f) == frames.end()) continue;
      L.data += frame_loss(run, r, static_cast<std::size_t>(f), st.x, grad ? &adj[f - 1] : nullptr);
    }
    if (grad) {
      const grad::SequenceGradient sg = grad::backward_sequence(tape, adj, true);
      for (std::size_t q = 0; q < dE.size(); ++q) dE[q].x += sg.grad_youngs[q];
    }
  }
  const double w = run.cfg.optimizer.tv_weight;
  L.tv = w * run.material.tv_loss();
  if (grad) {
    grad->assign(run.material.param_count(), 0.0);
    run.material.backward(rest, dE, *grad);
    run.material.tv_backward(w, *grad);
  }
  return L;
}

namespace {

struct Block {
  std::vector<double>* params;
  fields::Adam* adam;
  std::vector<fields::ParamGroup> groups;
};

// Shared optimization loop. `eval` returns the loss and fills one gradient
// vector per block. The parameters with the lowest data loss are kept.
template <class Eval>
void optimize(EstimationRun& run, int stage, int iters, std::vector<Block> blocks, Eval&& eval) {
  double best = std::numeric_limits<double>::infinity();
  std::vector<std::vector<double>> best_params;
  for (const Block& b : blocks) best_params.push_back(*b.params);
  bool halved = false;
  auto diverge = [&](int it) {
    if (halved)
      throw NumericalError("stage " + std::to_string(stage) + " diverged at iteration " + std::to_string(it) +
                           " after halving the learning rate");
    halved = true;
    for (std::size_t k = 0; k < blocks.size(); ++k) {
      *blocks[k].params = best_params[k];
      *blocks[k].adam = fields::Adam(blocks[k].params->size());
      for (auto& g : blocks[k].groups) g.lr *= 0.5;
    }
  };
  std::vector<std::vector<double>> grads(blocks.size());
  for (int it = 0; it < iters; ++it) {
    LossEval L;
    bool ok = true;
    try {
      L = eval(it, grads);
    } catch (const NumericalError&) {
      ok = false;
    }
    ok = ok && std::isfinite(L.data) && std::isfinite(L.tv);
    for (const auto& g : grads) ok = ok && all_finite(g);
    if (!ok) {
      diverge(it);
      continue;
    }
    run.history.push_back({stage, it, L.data, L.tv});
    if (stage == 1)
      run.stage1_iterations = it + 1;
    else
      run.stage2_iterations = it + 1;
    if (L.data < best) {
      best = L.data;
      for (std::size_t k = 0; k < blocks.size(); ++k) best_params[k] = *blocks[k].params;
    }
    for (std::size_t k = 0; k < blocks.size(); ++k) blocks[k].adam->step(*blocks[k].params, grads[k], blocks[k].groups);
    const int every = run.cfg.optimizer.snapshot_every;
    if (every > 0 && run.on_snapshot && (it + 1) % every == 0) run.on_snapshot(run, stage, it + 1);
  }
  if (iters == 0) return;
  // The last step has not been evaluated; keep it only if it is no worse.
  LossEval L;
  bool ok = true;
  std::vector<std::vector<double>> unused;
  try {
    L = eval(-1, unused);
  } catch (const NumericalError&) {
    ok = false;
  }
  if (!ok || !(L.data <= best))
    for (std::size_t k = 0; k < blocks.size(); ++k) *blocks[k].params = best_params[k];
}

}  // namespace

void stage1_velocity(EstimationRun& run) {
  std::vector<Block> blocks;
  for (std::size_t r = 0; r < run.velocity.size(); ++r) {
    auto& p = run.velocity[r].params();
    blocks.push_back({&p, &run.velocity_adam[r], {{0, p.size(), run.cfg.optimizer.lr_velocity}}});
  }
  optimize(run, 1, run.cfg.optimizer.iters_stage1, blocks,
           [&](int it, std::vector<std::vector<double>>& grads) {
             LossEval total;
             for (std::size_t r = 0; r < run.velocity.size(); ++r) {
               const LossEval L = stage1_loss(run, r, it >= 0 ? &grads[r] : nullptr);
               total.data += L.data;
               total.tv += L.tv;
             }
             return total;
           });
}

namespace {

std::vector<int> stage2_frames(const EstimationRun& run, int it) {
  std::size_t nf = 0;
  for (std::size_t r = 0; r < run.velocity.size(); ++r) nf = std::max(nf, frame_count(run, r));
  std::vector<int> all;
  for (std::size_t f = 1; f < nf; ++f) all.push_back(static_cast<int>(f));
  const int batch = run.cfg.optimizer.frames_per_batch;
  if (batch <= 0 || static_cast<std::size_t>(batch) >= all.size() || it < 0) return all;
  std::mt19937_64 rng(run.cfg.sim.seed + 0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(it + 1));
  std::shuffle(all.begin(), all.end(), rng);
  all.resize(static_cast<std::size_t>(batch));
  std::sort(all.begin(), all.end());
  return all;
}

}  // namespace

void stage2_material(EstimationRun& run) {
  auto& p = run.material.params();
  const std::size_t planes = run.material.plane_param_count();
  std::vector<Block> blocks{{&p,
                             &run.material_adam,
                             {{0, planes, run.cfg.optimizer.lr_planes}, {planes, p.size(), run.cfg.optimizer.lr_mlp}}}};
  optimize(run, 2, run.cfg.optimizer.iters_stage2, blocks, [&](int it, std::vector<std::vector<double>>& grads) {
    return stage2_loss(run, stage2_frames(run, it), it >= 0 ? &grads[0] : nullptr);
  });
}

ParticleSet bake(const EstimationRun& run) {
  ParticleSet s = run.scene.particles;
  s.points.youngs = run.material.youngs(s.points.x);
  s.has_youngs = true;
  return s;
}

void estimate(EstimationRun& run) {
  stage1_velocity(run);
  stage2_material(run);
}

}  // namespace splatmpm::estimate
