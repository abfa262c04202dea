#include "cli.hpp"

#include <pthread.h>

#include <algorithm>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <map>
#include <memory>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "splatmpm/config.hpp"
#include "splatmpm/drive.hpp"
#include "splatmpm/errors.hpp"
#include "splatmpm/estimate.hpp"
#include "splatmpm/grad.hpp"
#include "splatmpm/interact.hpp"
#include "splatmpm/mpm.hpp"
#include "splatmpm/scene.hpp"
#include "splatmpm/splat.hpp"

namespace splatmpm::cli {
namespace {

namespace fs = std::filesystem;

struct Options {
  std::string config;
  std::string particles;
  std::string out;
  std::vector<std::string> refs;
  std::optional<int> frames;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  bool deterministic = false;
  bool float64 = false;
  int port = 8787;
  std::size_t max_points = 0;
  std::string mode = "material";
  int beam_x = 25;
  int grad_frames = 2;
  int grad_substeps = 8;
  std::vector<int> sizes{1000, 10000, 100000};
  int repeats = 5;
  int bench_substeps = 5;
};

std::string cam_dir(std::size_t c) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "cam%02zu", c);
  return buf;
}

void require_file(const std::string& path, const char* what) {
  if (path.empty()) throw ValidationError(std::string("--") + what + " is required");
  if (!fs::is_regular_file(path)) throw IoError(std::string(what) + " file not found: " + path);
}

void require_out(const std::string& out) {
  if (out.empty()) throw ValidationError("--out is required");
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec || !fs::is_directory(out)) throw IoError("cannot create output directory " + out);
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

void apply_overrides(const Options& o, SimConfig& sim) {
  if (o.seed) sim.seed = *o.seed;
  if (o.threads) sim.threads = *o.threads;
  if (o.deterministic) sim.deterministic = true;
}

RunConfig load_run_config(const Options& o, std::ostream& err) {
  require_file(o.config, "config");
  RunConfig cfg = load_config(o.config);
  apply_overrides(o, cfg.sim);
  if (o.frames) cfg.frames = *o.frames;
  for (const std::string& w : cfg.validate()) err << "warning: " << w << "\n";
  return cfg;
}

ParticleSet load_input_particles(const Options& o) {
  require_file(o.particles, "particles");
  return load_particles(o.particles);
}

void write_frames(const fs::path& dir, const std::vector<Frame>& frames) {
  make_dir(dir);
  for (std::size_t f = 0; f < frames.size(); ++f) save_frame(frames[f], dir / frame_file_name(static_cast<int>(f)));
}

// ---------------------------------------------------------------------------

int cmd_gen_ref(const Options& o, std::ostream& out, std::ostream& err) {
  RunConfig cfg = load_run_config(o, err);
  ParticleSet ps = load_input_particles(o);
  require_out(o.out);
  if (cfg.cameras.empty()) throw ValidationError("gen-ref needs at least one camera");
  const estimate::PreparedScene scene = estimate::prepare_scene(std::move(ps), cfg);
  const estimate::Rollout r = estimate::generate_reference(scene, cfg);
  for (std::size_t c = 0; c < r.frames.size(); ++c) write_frames(fs::path(o.out) / cam_dir(c), r.frames[c]);
  estimate::save_trajectory(r.trajectory, fs::path(o.out) / "trajectory.bin");
  write_file_atomic(fs::path(o.out) / "config.json", config_to_json(cfg));
  out << "wrote " << cfg.frames << " frames for " << r.frames.size() << " camera(s) and a trajectory of "
      << r.trajectory.count() << " driving particles to " << o.out << "\n";
  return kExitOk;
}

int cmd_simulate(const Options& o, std::ostream& out, std::ostream& err) {
  RunConfig cfg = load_run_config(o, err);
  ParticleSet ps = load_input_particles(o);
  require_out(o.out);
  if (ps.has_youngs) cfg.ground_truth.youngs.kind = YoungsSpec::Kind::kParticles;
  const estimate::PreparedScene scene = estimate::prepare_scene(std::move(ps), cfg);
  const estimate::Rollout r = estimate::rollout(scene, cfg, estimate::ground_truth_youngs(scene, cfg),
                                                estimate::ground_truth_velocity(scene, cfg), false);
  estimate::save_trajectory(r.trajectory, fs::path(o.out) / "trajectory.bin");
  ParticleSet final_set = scene.particles;
  const drive::Skinned sk = drive::interpolate(scene.driving, r.trajectory.frames.back(), cfg.sim.threads);
  for (std::size_t g = 0; g < final_set.size(); ++g) {
    final_set.points.x[g] = sk.x[g];
    final_set.splats.rest_rotation[g] = sk.R[g] * final_set.splats.rest_rotation[g];
    final_set.splats.rest_covariance[g] = sk.R[g] * final_set.splats.rest_covariance[g] * sk.R[g].transposed();
  }
  save_particles(final_set, fs::path(o.out) / "final.ply");
  write_file_atomic(fs::path(o.out) / "config.json", config_to_json(cfg));
  out << "simulated " << cfg.frames - 1 << " frames of " << r.trajectory.count() << " driving particles ("
      << scene.particles.size() << " Gaussians) to " << o.out << "\n";
  return kExitOk;
}

int cmd_render(const Options& o, std::ostream& out, std::ostream& err) {
  RunConfig cfg = load_run_config(o, err);
  ParticleSet ps = load_input_particles(o);
  require_out(o.out);
  if (cfg.cameras.empty()) throw ValidationError("render needs at least one camera");
  const estimate::PreparedScene scene = estimate::prepare_scene(std::move(ps), cfg);
  const splat::SplatScene ss = estimate::skinned_scene(scene, scene.driving.rest, cfg);
  for (std::size_t c = 0; c < cfg.cameras.size(); ++c)
    save_frame(splat::render(ss, cfg.cameras[c], cfg.sim.threads), fs::path(o.out) / (cam_dir(c) + ".ppm"));
  out << "rendered " << cfg.cameras.size() << " view(s) to " << o.out << "\n";
  return kExitOk;
}

int cmd_estimate(const Options& o, std::ostream& out, std::ostream& err) {
  RunConfig cfg = load_run_config(o, err);
  ParticleSet ps = load_input_particles(o);
  if (o.refs.empty()) throw ValidationError("--refs is required");
  for (const std::string& r : o.refs)
    if (!fs::is_directory(r)) throw IoError("reference directory not found: " + r);
  require_out(o.out);

  std::vector<estimate::ReferenceVideo> refs;
  std::vector<estimate::Trajectory> targets;
  for (const std::string& r : o.refs) {
    if (cfg.optimizer.position_loss) {
      targets.push_back(estimate::load_trajectory(fs::path(r) / "trajectory.bin"));
      continue;
    }
    if (cfg.cameras.empty()) throw ValidationError("image-loss estimation needs at least one camera");
    for (std::size_t c = 0; c < cfg.cameras.size(); ++c) {
      const fs::path dir = fs::path(r) / cam_dir(c);
      if (!fs::is_directory(dir)) throw IoError("reference frames not found: " + dir.string());
      refs.push_back({dir.string(), load_frames(dir), cfg.cameras[c], cfg.sim.fps});
    }
  }

  estimate::EstimationRun run = estimate::make_run(cfg, std::move(ps), std::move(refs), std::move(targets));
  const fs::path snapshots = fs::path(o.out) / "snapshots";
  run.on_snapshot = [&](const estimate::EstimationRun& r, int stage, int iter) {
    make_dir(snapshots);
    char prefix[64];
    std::snprintf(prefix, sizeof(prefix), "stage%d_iter%05d", stage, iter);
    r.material.save(snapshots / (std::string(prefix) + "_material.bin"));
    for (std::size_t v = 0; v < r.velocity.size(); ++v)
      r.velocity[v].save(snapshots / (std::string(prefix) + "_velocity_" + std::to_string(v) + ".bin"));
  };
  estimate::estimate(run);

  const fs::path dir(o.out);
  write_file_atomic(dir / "config.json", config_to_json(cfg));
  write_file_atomic(dir / "loss_history.txt", estimate::format_history(run.history));
  run.material.save(dir / "material.bin");
  for (std::size_t v = 0; v < run.velocity.size(); ++v)
    run.velocity[v].save(dir / ("velocity_" + std::to_string(v) + ".bin"));
  save_particles(estimate::bake(run), dir / "baked.ply");

  std::vector<double> e = run.driving_youngs();
  std::nth_element(e.begin(), e.begin() + e.size() / 2, e.end());
  const auto& h = run.history;
  out << "stage 1: " << run.stage1_iterations << " iterations, stage 2: " << run.stage2_iterations
      << " iterations\n";
  if (!h.empty()) out << "final data loss " << std::setprecision(6) << h.back().data << "\n";
  out << "median Young's modulus " << std::setprecision(6) << e[e.size() / 2] << "\n";
  return kExitOk;
}

int cmd_gradcheck(const Options& o, std::ostream& out, std::ostream&) {
  grad::GradMode mode;
  if (o.mode == "velocity")
    mode = grad::GradMode::kVelocity;
  else if (o.mode == "material")
    mode = grad::GradMode::kMaterial;
  else if (o.mode == "truncated")
    mode = grad::GradMode::kTruncated;
  else
    throw ValidationError("--mode must be velocity, material or truncated");
  if (o.beam_x < 1 || o.grad_frames < 1 || o.grad_substeps < 1)
    throw ValidationError("--beam-x, --grad-frames and --grad-substeps must be positive");
  grad::GradProblem prob = grad::make_beam_problem(o.beam_x, o.grad_frames, o.grad_substeps, false, o.seed.value_or(7));
  apply_overrides(o, prob.cfg);
  const grad::GradReport report = grad::gradcheck(prob, mode);
  out << report.to_text();
  if (!o.out.empty()) {
    require_out(o.out);
    write_file_atomic(fs::path(o.out) / "gradcheck.txt", report.to_text());
    write_file_atomic(fs::path(o.out) / "gradcheck.json", report.to_json());
  }
  if (!report.finite || report.max_rel_error > 1e-2) return kExitNumerical;
  return kExitOk;
}

int cmd_serve(const Options& o, std::ostream& out, std::ostream& err) {
  RunConfig cfg = load_run_config(o, err);
  ParticleSet ps = load_input_particles(o);
  if (o.port < 0 || o.port > 65535) throw ValidationError("--port must be in [0, 65535]");
  if (ps.has_youngs) cfg.ground_truth.youngs.kind = YoungsSpec::Kind::kParticles;
  estimate::PreparedScene scene = estimate::prepare_scene(std::move(ps), cfg);
  MaterialPoints pts = scene.driving.points;
  pts.youngs = estimate::ground_truth_youngs(scene, cfg);

  // Signals are received by sigwait below, not by the worker threads.
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);

  interact::Server server(std::make_unique<interact::Session>(std::move(pts), cfg.sim, o.max_points),
                          static_cast<unsigned short>(o.port));
  server.start();
  out << "serving " << scene.driving.size() << " driving particles on ws://127.0.0.1:" << server.port() << "/sim"
      << std::endl;
  int sig = 0;
  sigwait(&set, &sig);
  server.stop();
  out << "stopped after " << server.frames_simulated() << " frames (" << server.frames_dropped()
      << " broadcasts dropped)\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// bench

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

template <class Fn>
double seconds(Fn&& fn) {
  const auto t0 = std::chrono::steady_clock::now();
  fn();
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

ParticleSet bench_block(int count, const SimConfig& cfg) {
  // Bar of aspect 2:1:1 holding roughly `count` Gaussians.
  const int a = std::max(1, static_cast<int>(std::lround(std::cbrt(count / 2.0))));
  ParticleSet ps = make_block({{0.25, 0.4, 0.4}, {0.75, 0.65, 0.65}}, 2 * a, a, a, 0.2, 5);
  compute_mass_volume(ps, cfg);
  for (std::size_t p = 0; p < ps.size(); ++p) {
    ps.points.youngs[p] = 1e3;
    ps.points.v[p] = {0.0, -0.5 * (ps.points.x[p].x - 0.25), 0.0};
  }
  return ps;
}

int cmd_bench(const Options& o, std::ostream& out, std::ostream& err) {
  SimConfig sim;
  std::optional<splat::Camera> cam;
  if (!o.config.empty()) {
    RunConfig cfg = load_run_config(o, err);
    sim = cfg.sim;
    if (!cfg.cameras.empty()) cam = cfg.cameras.front();
  } else {
    apply_overrides(o, sim);
  }
  if (!cam) cam = splat::Camera::look_at({0.5, 0.5, 1.8}, {0.5, 0.5, 0.5}, {0, 1, 0}, 40, 128, 128);
  if (o.repeats < 1 || o.bench_substeps < 1) throw ValidationError("--repeats and --substeps must be positive");
  std::vector<int> sizes = o.sizes;
  for (int n : sizes)
    if (n < 8) throw ValidationError("--sizes entries must be at least 8");

  out << std::left << std::setw(10) << "particles" << std::setw(9) << "driving" << std::setw(22)
      << "full_substeps_per_s" << std::setw(25) << "driving_substeps_per_s" << std::setw(9) << "speedup"
      << "render_ms\n";
  for (int n : sizes) {
    const ParticleSet ps = bench_block(n, sim);
    const drive::DrivingSet drv = drive::init_driving(ps, sim, 0, sim.seed);
    std::vector<double> full, driving, render;
    const splat::SplatScene scene = splat::SplatScene::from_particles(ps);
    for (int r = 0; r < o.repeats; ++r) {
      MaterialPoints a = ps.points, b = drv.points;
      mpm::GridState grid(sim);
      full.push_back(o.bench_substeps / seconds([&] { mpm::simulate_step(a, grid, sim, o.bench_substeps, 0.0); }));
      driving.push_back(o.bench_substeps / seconds([&] { mpm::simulate_step(b, grid, sim, o.bench_substeps, 0.0); }));
      render.push_back(1e3 * seconds([&] { splat::render(scene, *cam, sim.threads); }));
    }
    const double f = median(full), d = median(driving);
    std::ostringstream row;
    row << std::left << std::setw(10) << ps.size() << std::setw(9) << drv.size() << std::setw(22) << std::fixed
        << std::setprecision(1) << f << std::setw(25) << d << std::setw(9) << std::setprecision(2) << d / f
        << std::setprecision(2) << median(render) << "\n";
    out << row.str() << std::flush;
  }
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Differentiable MPM simulation and material estimation for Gaussian-splat objects", "splatmpm"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* sub, bool particles, bool frames) {
    sub->add_option("--config,--scene", o.config, "JSON run configuration");
    if (particles) sub->add_option("--particles", o.particles, "PLY particle file");
    if (frames) sub->add_option("--frames", o.frames, "frames including the initial state")->check(CLI::PositiveNumber);
    sub->add_option("--out", o.out, "output directory");
    sub->add_option("--seed", o.seed, "overrides the configuration seed");
    sub->add_option("--threads", o.threads, "worker threads")->check(CLI::PositiveNumber);
    sub->add_flag("--deterministic", o.deterministic, "deterministic reductions");
    sub->add_flag("--float64", o.float64, "float64 arithmetic (always on)");
  };

  CLI::App* gen = app.add_subcommand("gen-ref", "simulate the configured ground truth and write reference frames");
  common(gen, true, true);
  CLI::App* sim = app.add_subcommand("simulate", "forward-simulate a particle file");
  common(sim, true, true);
  CLI::App* est = app.add_subcommand("estimate", "estimate velocity and Young's modulus fields from references");
  common(est, true, true);
  est->add_option("--refs", o.refs, "gen-ref output directories, one per reference video");
  CLI::App* ren = app.add_subcommand("render", "render the rest state for every configured camera");
  common(ren, true, false);
  CLI::App* gc = app.add_subcommand("gradcheck", "compare simulation gradients with finite differences");
  common(gc, false, false);
  gc->add_option("--mode", o.mode, "velocity, material or truncated");
  gc->add_option("--beam-x", o.beam_x, "beam particles along x (4 per slice)");
  gc->add_option("--grad-frames", o.grad_frames, "frames");
  gc->add_option("--grad-substeps", o.grad_substeps, "substeps per frame");
  CLI::App* srv = app.add_subcommand("serve", "serve live interactive simulation over a websocket");
  common(srv, true, false);
  srv->add_option("--port", o.port, "TCP port, 0 picks a free one");
  srv->add_option("--max-points", o.max_points, "cap on streamed points, 0 streams all");
  CLI::App* bench = app.add_subcommand("bench", "time substeps and rendering over particle counts");
  common(bench, false, false);
  bench->add_option("--sizes", o.sizes, "particle counts")->delimiter(',');
  bench->add_option("--repeats", o.repeats, "runs per measurement, the median is reported");
  bench->add_option("--substeps", o.bench_substeps, "substeps per timed run");

  std::vector<const char*> argv{"splatmpm"};
  for (const std::string& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (gen->parsed()) return cmd_gen_ref(o, out, err);
    if (sim->parsed()) return cmd_simulate(o, out, err);
    if (est->parsed()) return cmd_estimate(o, out, err);
    if (ren->parsed()) return cmd_render(o, out, err);
    if (gc->parsed()) return cmd_gradcheck(o, out, err);
    if (srv->parsed()) return cmd_serve(o, out, err);
    if (bench->parsed()) return cmd_bench(o, out, err);
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const IoError& e) {
    err << "I/O error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "I/O error: " << e.what() << "\n";
    return kExitIo;
  }
  return kExitValidation;
}

}  // namespace splatmpm::cli
