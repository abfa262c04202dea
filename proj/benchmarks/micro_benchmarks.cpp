#include <benchmark/benchmark.h>

#include <random>

#include "splatmpm/drive.hpp"
#include "splatmpm/fields.hpp"
#include "splatmpm/grad.hpp"
#include "splatmpm/la3.hpp"
#include "splatmpm/mpm.hpp"
#include "splatmpm/scene.hpp"
#include "splatmpm/splat.hpp"

namespace {

using namespace splatmpm;

SimConfig bench_config() {
  SimConfig c;
  c.grid_resolution = 32;
  c.dt = 1e-4;
  c.substeps = 10;
  c.youngs_max = 1e4;
  return c;
}

ParticleSet block(int a) {
  ParticleSet ps = make_block({{0.25, 0.4, 0.4}, {0.75, 0.65, 0.65}}, 2 * a, a, a, 0.2, 3);
  compute_mass_volume(ps, bench_config());
  for (std::size_t p = 0; p < ps.size(); ++p) {
    ps.points.youngs[p] = 1e3;
    ps.points.v[p] = {0.0, -0.5 * (ps.points.x[p].x - 0.25), 0.0};
  }
  return ps;
}

Mat3 random_matrix(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1, 1);
  Mat3 m;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) m(i, j) = (i == j ? 1.0 : 0.0) + 0.3 * u(rng);
  return m;
}

void BM_Svd3(benchmark::State& state) {
  std::mt19937_64 rng(1);
  const Mat3 F = random_matrix(rng);
  for (auto _ : state) benchmark::DoNotOptimize(svd3(F));
}
BENCHMARK(BM_Svd3);

void BM_FirstPkStress(benchmark::State& state) {
  std::mt19937_64 rng(2);
  const Mat3 F = random_matrix(rng);
  const mpm::LameParams p = mpm::young_to_lame(1e3, 0.3);
  for (auto _ : state) benchmark::DoNotOptimize(mpm::first_pk_stress(F, p));
}
BENCHMARK(BM_FirstPkStress);

void BM_P2G(benchmark::State& state) {
  const SimConfig cfg = bench_config();
  const ParticleSet ps = block(static_cast<int>(state.range(0)));
  mpm::GridState grid(cfg);
  for (auto _ : state) {
    mpm::p2g(ps.points, grid, cfg, 0.0);
    benchmark::ClobberMemory();
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(ps.size()));
}
BENCHMARK(BM_P2G)->Arg(8)->Arg(16);

void BM_Substep(benchmark::State& state) {
  const SimConfig cfg = bench_config();
  ParticleSet ps = block(static_cast<int>(state.range(0)));
  mpm::GridState grid(cfg);
  double t = 0.0;
  for (auto _ : state) {
    mpm::substep(ps.points, grid, cfg, t);
    t += cfg.dt;
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(ps.size()));
}
BENCHMARK(BM_Substep)->Arg(8)->Arg(16);

void BM_BackwardFrame(benchmark::State& state) {
  SimConfig cfg = bench_config();
  cfg.substeps = 16;
  ParticleSet ps = block(6);
  grad::Tape tape(cfg);
  MaterialPoints s = ps.points;
  tape.record_frame(s);
  grad::StateAdjoint adj(s.size());
  for (auto& x : adj.x) x = {1.0, 0.0, 0.0};
  for (auto _ : state) benchmark::DoNotOptimize(grad::backward_frame(tape, 0, adj));
}
BENCHMARK(BM_BackwardFrame)->Unit(benchmark::kMillisecond);

void BM_Render(benchmark::State& state) {
  const ParticleSet ps = block(static_cast<int>(state.range(0)));
  const splat::SplatScene scene = splat::SplatScene::from_particles(ps);
  const auto cam = splat::Camera::look_at({0.5, 0.5, 1.8}, {0.5, 0.5, 0.5}, {0, 1, 0}, 40, 128, 128);
  for (auto _ : state) benchmark::DoNotOptimize(splat::render(scene, cam));
}
BENCHMARK(BM_Render)->Arg(8)->Arg(16)->Unit(benchmark::kMillisecond);

void BM_RenderBackward(benchmark::State& state) {
  const ParticleSet ps = block(8);
  const splat::SplatScene scene = splat::SplatScene::from_particles(ps);
  const auto cam = splat::Camera::look_at({0.5, 0.5, 1.8}, {0.5, 0.5, 0.5}, {0, 1, 0}, 40, 128, 128);
  splat::RenderCachePtr cache;
  const Frame img = splat::render(scene, cam, 1, &cache);
  const Frame adjoint(img.width, img.height, {1.0, 1.0, 1.0});
  for (auto _ : state) benchmark::DoNotOptimize(splat::render_backward(scene, cam, adjoint, 1, cache.get()));
}
BENCHMARK(BM_RenderBackward)->Unit(benchmark::kMillisecond);

void BM_FieldForward(benchmark::State& state) {
  fields::NeuralField f(fields::material_spec(1e2, 1e6), 1);
  const ParticleSet ps = block(8);
  for (auto _ : state) benchmark::DoNotOptimize(f.youngs(ps.points.x));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(ps.size()));
}
BENCHMARK(BM_FieldForward);

void BM_KMeans(benchmark::State& state) {
  const ParticleSet ps = block(10);
  for (auto _ : state) benchmark::DoNotOptimize(drive::kmeans(ps.points.x, ps.size() / 10, 1));
}
BENCHMARK(BM_KMeans)->Unit(benchmark::kMillisecond);

void BM_Interpolate(benchmark::State& state) {
  const ParticleSet ps = block(10);
  const drive::DrivingSet drv = drive::init_driving(ps, bench_config(), ps.size() / 10, 1);
  for (auto _ : state) benchmark::DoNotOptimize(drive::interpolate(drv, drv.rest));
}
BENCHMARK(BM_Interpolate)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
