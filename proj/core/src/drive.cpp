#include "splatmpm/drive.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <unordered_set>

#include "splatmpm/errors.hpp"
#include "splatmpm/parallel.hpp"

namespace splatmpm::drive {

namespace {

double assign(const std::vector<Vec3>& pts, const std::vector<Vec3>& centroids, std::vector<int>& assignment,
              std::vector<double>& dist2, int threads) {
  parallel_for(pts.size(), threads, [&](std::size_t i) {
    double best = std::numeric_limits<double>::infinity();
    int arg = 0;
    for (std::size_t c = 0; c < centroids.size(); ++c) {
      const double d = squared_norm(pts[i] - centroids[c]);
      if (d < best) {
        best = d;
        arg = static_cast<int>(c);
      }
    }
    assignment[i] = arg;
    dist2[i] = best;
  });
  double obj = 0.0;
  for (double d : dist2) obj += d;
  return obj;
}

}  // namespace

KMeansResult kmeans(const std::vector<Vec3>& pts, std::size_t k, std::uint64_t seed, int max_iter, double tol,
                    int threads) {
  const std::size_t n = pts.size();
  if (k == 0) throw ValidationError("kmeans: k must be >= 1");
  if (k > n) throw ValidationError("kmeans: k = " + std::to_string(k) + " exceeds point count " + std::to_string(n));
  KMeansResult r;
  std::mt19937_64 rng(seed);

  // k-means++ seeding.
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  r.centroids.reserve(k);
  r.centroids.push_back(pts[std::uniform_int_distribution<std::size_t>(0, n - 1)(rng)]);
  while (r.centroids.size() < k) {
    const Vec3& last = r.centroids.back();
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], squared_norm(pts[i] - last));
      total += d2[i];
    }
    std::size_t pick = 0;
    if (total > 0.0) {
      double target = std::uniform_real_distribution<double>(0.0, total)(rng);
      pick = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        target -= d2[i];
        if (target < 0.0 && d2[i] > 0.0) {
          pick = i;
          break;
        }
      }
      if (d2[pick] == 0.0) pick = static_cast<std::size_t>(std::max_element(d2.begin(), d2.end()) - d2.begin());
    } else {
      // All points coincide with chosen centroids.
      pick = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
    }
    r.centroids.push_back(pts[pick]);
  }

  r.assignment.assign(n, 0);
  std::vector<double> dist2(n);
  r.objective.push_back(assign(pts, r.centroids, r.assignment, dist2, threads));
  for (int it = 0; it < max_iter; ++it) {
    std::vector<Vec3> sum(k);
    std::vector<std::size_t> count(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      sum[r.assignment[i]] += pts[i];
      ++count[r.assignment[i]];
    }
    double shift = 0.0;
    std::unordered_set<std::size_t> reseeded;
    for (std::size_t c = 0; c < k; ++c) {
      Vec3 next;
      if (count[c] > 0) {
        next = sum[c] / static_cast<double>(count[c]);
      } else {
        // Empty cluster: move it to the point farthest from its centroid.
        std::size_t far = 0;
        for (std::size_t i = 0; i < n; ++i)
          if (dist2[i] > dist2[far] && !reseeded.count(i)) far = i;
        reseeded.insert(far);
        dist2[far] = 0.0;
        next = pts[far];
      }
      shift = std::max(shift, norm(next - r.centroids[c]));
      r.centroids[c] = next;
    }
    r.iterations = it + 1;
    r.objective.push_back(assign(pts, r.centroids, r.assignment, dist2, threads));
    if (shift < tol) break;
  }
  return r;
}

std::size_t driving_count(const std::vector<Vec3>& x, const SimConfig& cfg) {
  const int n = cfg.grid_resolution;
  std::unordered_set<std::int64_t> cells;
  for (const Vec3& p : x) {
    std::int64_t id = 0;
    for (int a = 0; a < 3; ++a) id = id * n + std::clamp(static_cast<int>(std::floor(p[a] * n)), 0, n - 1);
    cells.insert(id);
  }
  const std::size_t P = x.size();
  const std::size_t lo = (P + 49) / 50, hi = std::max<std::size_t>(1, P / 10);
  return std::clamp<std::size_t>(8 * cells.size(), std::min(lo, hi), hi);
}

DrivingSet init_driving(const ParticleSet& set, const SimConfig& cfg, std::size_t q, std::uint64_t seed) {
  const std::size_t P = set.size();
  if (P == 0) throw ValidationError("init_driving: empty particle set");
  if (q == 0) q = driving_count(set.points.x, cfg);
  const KMeansResult km = kmeans(set.points.x, q, seed, 50, 1e-6, cfg.threads);

  DrivingSet d;
  d.points.resize(q);
  d.points.poisson = set.points.poisson;
  std::vector<std::size_t> count(q, 0);
  std::vector<double> youngs_sum(q, 0.0);
  for (std::size_t p = 0; p < P; ++p) {
    const int c = km.assignment[p];
    d.points.x[c] += set.points.x[p];
    d.points.v[c] += set.points.mass[p] * set.points.v[p];
    d.points.mass[c] += set.points.mass[p];
    d.points.volume[c] += set.points.volume[p];
    youngs_sum[c] += set.points.youngs[p];
    ++count[c];
  }
  for (std::size_t c = 0; c < q; ++c) {
    if (count[c] == 0) throw NumericalError("init_driving: empty cluster after k-means");
    d.points.x[c] = d.points.x[c] / static_cast<double>(count[c]);
    d.points.v[c] = d.points.mass[c] > 0.0 ? d.points.v[c] / d.points.mass[c] : Vec3{};
    d.points.youngs[c] = youngs_sum[c] / static_cast<double>(count[c]);
  }
  d.rest = d.points.x;
  d.gaussian_rest = set.points.x;
  d.cluster = km.assignment;

  d.k = static_cast<int>(std::min<std::size_t>(kNeighbors, q));
  d.neighbors.assign(P * d.k, 0);
  parallel_for(P, cfg.threads, [&](std::size_t g) {
    std::vector<std::pair<double, int>> cand(q);
    for (std::size_t c = 0; c < q; ++c) cand[c] = {squared_norm(d.rest[c] - set.points.x[g]), static_cast<int>(c)};
    std::partial_sort(cand.begin(), cand.begin() + d.k, cand.end());
    for (int j = 0; j < d.k; ++j) d.neighbors[g * d.k + j] = cand[j].second;
  });
  return d;
}

namespace {

struct Fit {
  Vec3 rest_centroid, current_centroid;
  Mat3 H;  // sum of (rest - rc)(current - cc)^T
  Svd3 svd;  // of H^T
  bool degenerate = false;
  Mat3 R;
};

Fit fit(const Vec3* rest, const Vec3* cur, std::size_t n) {
  Fit f;
  for (std::size_t i = 0; i < n; ++i) {
    f.rest_centroid += rest[i];
    f.current_centroid += cur[i];
  }
  f.rest_centroid = f.rest_centroid / static_cast<double>(n);
  f.current_centroid = f.current_centroid / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) f.H += Mat3::outer(rest[i] - f.rest_centroid, cur[i] - f.current_centroid);
  f.svd = svd3(f.H.transposed());
  f.degenerate = !(f.svd.sigma[1] > 1e-6 * f.svd.sigma[0]);
  // Rotation-variant SVD of H^T: U V^T is the reflection-corrected Kabsch rotation.
  f.R = f.degenerate ? Mat3::identity() : f.svd.U * f.svd.V.transposed();
  return f;
}

}  // namespace

RigidTransform fit_rigid(const Vec3* rest, const Vec3* current, std::size_t n) {
  if (n == 0) return {};
  const Fit f = fit(rest, current, n);
  return {f.R, f.current_centroid - f.R * f.rest_centroid};
}

RigidTransform fit_rigid(const std::vector<Vec3>& rest, const std::vector<Vec3>& current) {
  if (rest.size() != current.size()) throw ValidationError("fit_rigid: size mismatch");
  return fit_rigid(rest.data(), current.data(), rest.size());
}

Skinned interpolate(const DrivingSet& drv, const std::vector<Vec3>& current, int threads) {
  if (current.size() != drv.size()) throw ValidationError("interpolate: driving state size mismatch");
  const std::size_t P = drv.gaussian_rest.size();
  Skinned out;
  out.x.resize(P);
  out.R.resize(P);
  parallel_for(P, threads, [&](std::size_t g) {
    Vec3 rest[kNeighbors], cur[kNeighbors];
    const int* nb = drv.neighbors_of(g);
    for (int j = 0; j < drv.k; ++j) {
      rest[j] = drv.rest[nb[j]];
      cur[j] = current[nb[j]];
    }
    const Fit f = fit(rest, cur, static_cast<std::size_t>(drv.k));
    out.x[g] = f.R * (drv.gaussian_rest[g] - f.rest_centroid) + f.current_centroid;
    out.R[g] = f.R;
  });
  return out;
}

std::vector<Vec3> interpolate_backward(const DrivingSet& drv, const std::vector<Vec3>& current,
                                       const std::vector<Vec3>& grad_x, const std::vector<Mat3>& grad_R) {
  const std::size_t P = drv.gaussian_rest.size();
  if (grad_x.size() != P || (!grad_R.empty() && grad_R.size() != P))
    throw std::logic_error("interpolate_backward: adjoint size mismatch");
  std::vector<Vec3> out(current.size());
  const double inv_k = 1.0 / drv.k;
  for (std::size_t g = 0; g < P; ++g) {
    const bool has_R = !grad_R.empty() && !(grad_R[g] == Mat3{});
    if (grad_x[g] == Vec3{} && !has_R) continue;
    Vec3 rest[kNeighbors], cur[kNeighbors];
    const int* nb = drv.neighbors_of(g);
    for (int j = 0; j < drv.k; ++j) {
      rest[j] = drv.rest[nb[j]];
      cur[j] = current[nb[j]];
    }
    const Fit f = fit(rest, cur, static_cast<std::size_t>(drv.k));
    // x = R (x_rest - rc) + cc
    const Vec3 dcc = grad_x[g];
    for (int j = 0; j < drv.k; ++j) out[nb[j]] += inv_k * dcc;
    if (f.degenerate) continue;
    Mat3 dR = Mat3::outer(grad_x[g], drv.gaussian_rest[g] - f.rest_centroid);
    if (has_R) dR += grad_R[g];
    // R = polar(H^T); dL/dH = (dL/dH^T)^T. H = sum a_j b_j^T with b_j = cur_j - cc;
    // the centroid term vanishes because sum a_j = 0.
    const Mat3 dH = polar_rotation_vjp(f.svd, dR).transposed();
    const Mat3 dHt = dH.transposed();
    for (int j = 0; j < drv.k; ++j) out[nb[j]] += dHt * (rest[j] - f.rest_centroid);
  }
  return out;
}

}  // namespace splatmpm::drive
