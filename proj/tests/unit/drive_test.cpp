#include "splatmpm/drive.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "splatmpm/errors.hpp"
#include "test_util.hpp"

namespace splatmpm::drive {
namespace {

std::vector<Vec3> cloud(std::size_t n, std::uint64_t seed, Vec3 lo = {0.3, 0.4, 0.45}, Vec3 ext = {0.4, 0.1, 0.1}) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<Vec3> x(n);
  for (Vec3& p : x) p = lo + Vec3{ext.x * u(rng), ext.y * u(rng), ext.z * u(rng)};
  return x;
}

Vec3 total_momentum_of(const MaterialPoints& m) {
  Vec3 s;
  for (std::size_t p = 0; p < m.size(); ++p) s += m.mass[p] * m.v[p];
  return s;
}

ParticleSet particle_set(const std::vector<Vec3>& x, const SimConfig& cfg) {
  ParticleSet s;
  for (const Vec3& p : x) s.push_back(p);
  compute_mass_volume(s, cfg);
  for (double& e : s.points.youngs) e = 1e3;
  return s;
}

TEST(KMeans, SingletonClusters) {
  const auto x = cloud(12, 1);
  const KMeansResult r = kmeans(x, x.size(), 3);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(r.centroids[r.assignment[i]], x[i]);
}

TEST(KMeans, TwoBlobs) {
  std::vector<Vec3> x = cloud(100, 2, {0.1, 0.1, 0.1}, {0.05, 0.05, 0.05});
  const auto b = cloud(100, 3, {0.8, 0.8, 0.8}, {0.05, 0.05, 0.05});
  x.insert(x.end(), b.begin(), b.end());
  Vec3 ma, mb;
  for (int i = 0; i < 100; ++i) {
    ma += x[i] / 100.0;
    mb += x[100 + i] / 100.0;
  }
  const KMeansResult r = kmeans(x, 2, 4);
  const Vec3 c0 = r.centroids[r.assignment[0]], c1 = r.centroids[r.assignment[150]];
  EXPECT_LE(norm(c0 - ma), 1e-6);
  EXPECT_LE(norm(c1 - mb), 1e-6);
}

TEST(KMeans, ObjectiveNeverIncreases) {
  const auto x = cloud(2000, 5, {0.1, 0.1, 0.1}, {0.8, 0.8, 0.8});
  const KMeansResult r = kmeans(x, 40, 6);
  ASSERT_GE(r.objective.size(), 2u);
  for (std::size_t i = 1; i < r.objective.size(); ++i) EXPECT_LE(r.objective[i], r.objective[i - 1] * (1 + 1e-12));
}

TEST(KMeans, ErrorsAndDeterminism) {
  const auto x = cloud(5, 7);
  EXPECT_THROW(kmeans(x, 6, 1), ValidationError);
  EXPECT_THROW(kmeans(x, 0, 1), ValidationError);
  const auto y = cloud(300, 8);
  const KMeansResult a = kmeans(y, 20, 9), b = kmeans(y, 20, 9);
  EXPECT_EQ(a.assignment, b.assignment);
  EXPECT_EQ(a.centroids, b.centroids);
}

TEST(KMeans, DuplicatePointsHandled) {
  std::vector<Vec3> x(10, Vec3{0.5, 0.5, 0.5});
  x.push_back({0.6, 0.5, 0.5});
  const KMeansResult r = kmeans(x, 3, 1);
  EXPECT_EQ(r.centroids.size(), 3u);
  for (int a : r.assignment) EXPECT_LT(a, 3);
}

TEST(Driving, SizingRule) {
  SimConfig cfg;
  cfg.grid_resolution = 32;
  const auto x = cloud(10000, 10);
  const std::size_t q = driving_count(x, cfg);
  EXPECT_GE(q, 10000u / 50);
  EXPECT_LE(q, 10000u / 10);
}

TEST(Driving, IdentityAndMassConservation) {
  SimConfig cfg;
  cfg.grid_resolution = 16;
  const auto x = cloud(8, 11);
  ParticleSet s = particle_set(x, cfg);
  const DrivingSet d = init_driving(s, cfg, 8, 1);
  ASSERT_EQ(d.size(), 8u);
  for (std::size_t g = 0; g < 8; ++g) EXPECT_EQ(d.points.x[d.cluster[g]], x[g]);

  const auto y = cloud(3000, 12);
  ParticleSet big = particle_set(y, cfg);
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> u(-1, 1);
  for (Vec3& v : big.points.v) v = {u(rng), u(rng), u(rng)};
  const DrivingSet db = init_driving(big, cfg, 0, 2);
  double m = 0, md = 0, V = 0, Vd = 0;
  for (std::size_t p = 0; p < big.size(); ++p) {
    m += big.points.mass[p];
    V += big.points.volume[p];
  }
  for (std::size_t q = 0; q < db.size(); ++q) {
    md += db.points.mass[q];
    Vd += db.points.volume[q];
    EXPECT_EQ(db.points.F[q], Mat3::identity());
    EXPECT_EQ(db.points.C[q], Mat3{});
  }
  EXPECT_NEAR(md, m, 1e-15 * m * 1e3);
  EXPECT_NEAR(Vd, V, 1e-15 * V * 1e3);
  EXPECT_LE(norm(total_momentum_of(big.points) - total_momentum_of(db.points)), 1e-12);
  EXPECT_EQ(db.k, kNeighbors);
  for (std::size_t g = 0; g < big.size(); ++g) {
    // Neighbors are sorted by rest distance.
    const int* nb = db.neighbors_of(g);
    for (int j = 1; j < db.k; ++j)
      EXPECT_LE(squared_norm(db.rest[nb[j - 1]] - y[g]), squared_norm(db.rest[nb[j]] - y[g]));
  }
}

TEST(FitRigid, Examples) {
  const auto rest = cloud(8, 14);
  RigidTransform t = fit_rigid(rest, rest);
  EXPECT_LE(testing::max_abs_diff(t.R, Mat3::identity()), 1e-12);
  EXPECT_LE(norm(t.t), 1e-12);

  std::vector<Vec3> moved = rest;
  for (Vec3& p : moved) p += Vec3{1, 2, 3};
  t = fit_rigid(rest, moved);
  EXPECT_LE(testing::max_abs_diff(t.R, Mat3::identity()), 1e-12);
  EXPECT_LE(norm(t.t - Vec3{1, 2, 3}), 1e-12);

  std::mt19937_64 rng(15);
  for (int trial = 0; trial < 20; ++trial) {
    const Mat3 Q = testing::random_rotation(rng);
    for (std::size_t i = 0; i < rest.size(); ++i) moved[i] = Q * rest[i];
    t = fit_rigid(rest, moved);
    EXPECT_LE(testing::max_abs_diff(t.R, Q), 1e-6);
    EXPECT_NEAR(t.R.determinant(), 1.0, 1e-9);
  }
}

TEST(FitRigid, ReflectionAndDegenerateInputs) {
  const auto rest = cloud(8, 16);
  std::vector<Vec3> mirrored = rest;
  for (Vec3& p : mirrored) p.x = -p.x;
  EXPECT_NEAR(fit_rigid(rest, mirrored).R.determinant(), 1.0, 1e-9);

  std::vector<Vec3> line, line_cur;
  for (int i = 0; i < 8; ++i) {
    line.push_back({0.1 * i, 0, 0});
    line_cur.push_back({0, 0.1 * i, 0});
  }
  const RigidTransform t = fit_rigid(line, line_cur);
  EXPECT_EQ(t.R, Mat3::identity());
  std::vector<Vec3> same(8, Vec3{0.5, 0.5, 0.5}), shifted(8, Vec3{0.6, 0.5, 0.5});
  EXPECT_LE(norm(fit_rigid(same, shifted).t - Vec3{0.1, 0, 0}), 1e-12);
}

class Interp : public ::testing::Test {
 protected:
  void SetUp() override {
    cfg.grid_resolution = 32;
    set = particle_set(cloud(2000, 17), cfg);
    drv = init_driving(set, cfg, 150, 3);
  }
  SimConfig cfg;
  ParticleSet set;
  DrivingSet drv;
};

TEST_F(Interp, RigidMotionsReproduced) {
  std::vector<Vec3> cur = drv.rest;
  for (Vec3& p : cur) p += Vec3{0.01, -0.02, 0.03};
  Skinned s = interpolate(drv, cur);
  for (std::size_t g = 0; g < set.size(); ++g) {
    EXPECT_LE(norm(s.x[g] - (set.points.x[g] + Vec3{0.01, -0.02, 0.03})), 1e-12);
    EXPECT_LE(testing::max_abs_diff(s.R[g], Mat3::identity()), 1e-9);
  }
  std::mt19937_64 rng(18);
  const Mat3 Q = testing::random_rotation(rng);
  const Vec3 shift{0.1, 0.0, -0.05};
  for (std::size_t q = 0; q < cur.size(); ++q) cur[q] = Q * drv.rest[q] + shift;
  s = interpolate(drv, cur);
  for (std::size_t g = 0; g < set.size(); ++g) {
    EXPECT_LE(norm(s.x[g] - (Q * set.points.x[g] + shift)), 1e-5);
    EXPECT_LE(testing::max_abs_diff(s.R[g], Q), 1e-5);
  }
}

TEST_F(Interp, RestIsIdentity) {
  const Skinned s = interpolate(drv, drv.rest);
  for (std::size_t g = 0; g < set.size(); ++g) EXPECT_LE(norm(s.x[g] - set.points.x[g]), 1e-12);
}

TEST_F(Interp, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(19);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<Vec3> cur = drv.rest;
  for (Vec3& p : cur) p += 0.01 * Vec3{u(rng), u(rng), u(rng)};
  std::vector<Vec3> gx(set.size());
  std::vector<Mat3> gR(set.size());
  for (std::size_t g = 0; g < 50; ++g) {
    gx[g] = {u(rng), u(rng), u(rng)};
    gR[g] = testing::random_mat(rng, 0.1);
  }
  auto loss = [&](const std::vector<Vec3>& c) {
    const Skinned s = interpolate(drv, c);
    double l = 0;
    for (std::size_t g = 0; g < set.size(); ++g) l += dot(gx[g], s.x[g]) + ddot(gR[g], s.R[g]);
    return l;
  };
  const std::vector<Vec3> grad = interpolate_backward(drv, cur, gx, gR);
  for (std::size_t q = 0; q < cur.size(); q += 7)
    for (int a = 0; a < 3; ++a) {
      std::vector<Vec3> cp = cur, cm = cur;
      const double h = 1e-7;
      cp[q][a] += h;
      cm[q][a] -= h;
      const double numeric = (loss(cp) - loss(cm)) / (2 * h);
      EXPECT_NEAR(grad[q][a], numeric, 1e-5 * std::max(1.0, std::abs(numeric))) << q << " " << a;
    }
}

}  // namespace
}  // namespace splatmpm::drive
