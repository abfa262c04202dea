#include "splatmpm/splat.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

#include "splatmpm/errors.hpp"
#include "splatmpm/parallel.hpp"

namespace splatmpm::splat {

void Camera::validate() const {
  if (!(fx > 0.0) || !(fy > 0.0)) throw ValidationError("camera: focal lengths must be positive");
  if (width <= 0 || height <= 0) throw ValidationError("camera: width and height must be positive");
  if (!std::isfinite(cx) || !std::isfinite(cy) || !is_finite(R) || !is_finite(t))
    throw ValidationError("camera: non-finite parameters");
  if (frobenius_norm(R.transposed() * R - Mat3::identity()) > 1e-6 || R.determinant() <= 0.0)
    throw ValidationError("camera: rotation is not a proper rotation");
}

Camera Camera::look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double fov_y_deg, int width,
                       int height) {
  const Vec3 fwd = target - eye;
  if (norm(fwd) == 0.0) throw ValidationError("camera: eye equals target");
  const Vec3 z = fwd / norm(fwd);
  const Vec3 xr = cross(z, up);
  if (norm(xr) < 1e-12) throw ValidationError("camera: up is parallel to the view direction");
  const Vec3 x = xr / norm(xr);
  const Vec3 y = cross(z, x);
  if (!(fov_y_deg > 0.0 && fov_y_deg < 180.0)) throw ValidationError("camera: fov must be in (0, 180)");
  Camera c;
  c.width = width;
  c.height = height;
  c.fy = 0.5 * height / std::tan(0.5 * fov_y_deg * M_PI / 180.0);
  c.fx = c.fy;
  c.cx = 0.5 * (width - 1);
  c.cy = 0.5 * (height - 1);
  c.R = Mat3::from_rows(x, y, z);
  c.t = -1.0 * (c.R * eye);
  c.validate();
  return c;
}

SplatScene SplatScene::from_particles(const ParticleSet& set) {
  SplatScene s;
  s.x = set.points.x;
  s.R.assign(set.size(), Mat3::identity());
  s.rest_covariance = set.splats.rest_covariance;
  s.opacity = set.splats.opacity;
  s.color = set.splats.color;
  return s;
}

namespace {

constexpr int kTile = 16;
constexpr double kCutoff = 9.0;  // 3 sigma in squared Mahalanobis distance

struct Projected {
  bool visible = false;
  double u = 0.0, v = 0.0;     // image-space mean
  double a = 0.0, b = 0.0, c = 0.0;  // conic [[a, b], [b, c]] = inverse 2D covariance
  int x0 = 0, x1 = -1, y0 = 0, y1 = -1;
  Vec3 tc;  // camera-space mean
  Mat3 M;   // camera-space covariance
};

}  // namespace

struct RenderCache {
  std::vector<Projected> proj;
  std::vector<int> order;  // splat indices by increasing depth
  int tiles_x = 0, tiles_y = 0;
  std::vector<std::vector<int>> tiles;  // depth-ordered splat indices per tile
};

void RenderCacheDeleter::operator()(RenderCache* c) const { delete c; }

namespace {

void check_scene(const SplatScene& s, const Camera& cam) {
  const std::size_t n = s.size();
  if (s.R.size() != n || s.rest_covariance.size() != n || s.opacity.size() != n || s.color.size() != n)
    throw ValidationError("render: splat attribute arrays differ in length");
  if (s.background_image && (s.background_image->width != cam.width || s.background_image->height != cam.height))
    throw ValidationError("render: background image size does not match the camera");
  cam.validate();
}

RenderCache build_cache(const SplatScene& s, const Camera& cam, int threads) {
  const std::size_t n = s.size();
  RenderCache rc;
  rc.proj.resize(n);
  parallel_for(n, threads, [&](std::size_t i) {
    Projected& p = rc.proj[i];
    p.tc = cam.to_camera(s.x[i]);
    const double z = p.tc.z;
    if (!(z > kNearPlane) || !is_finite(p.tc)) return;
    const Mat3 sw = s.R[i] * s.rest_covariance[i] * s.R[i].transposed();
    p.M = cam.R * sw * cam.R.transposed();
    const double j00 = cam.fx / z, j02 = -cam.fx * p.tc.x / (z * z);
    const double j11 = cam.fy / z, j12 = -cam.fy * p.tc.y / (z * z);
    const Mat3& M = p.M;
    // Sigma2D = J M J^T with J = [[j00, 0, j02], [0, j11, j12]].
    const double s00 = j00 * j00 * M(0, 0) + 2.0 * j00 * j02 * M(0, 2) + j02 * j02 * M(2, 2);
    const double s11 = j11 * j11 * M(1, 1) + 2.0 * j11 * j12 * M(1, 2) + j12 * j12 * M(2, 2);
    const double s01 = j00 * j11 * M(0, 1) + j00 * j12 * M(0, 2) + j02 * j11 * M(2, 1) + j02 * j12 * M(2, 2);
    const double det = s00 * s11 - s01 * s01;
    if (!(det > 0.0) || !std::isfinite(det)) return;
    p.a = s11 / det;
    p.b = -s01 / det;
    p.c = s00 / det;
    p.u = cam.fx * p.tc.x / z + cam.cx;
    p.v = cam.fy * p.tc.y / z + cam.cy;
    const double mid = 0.5 * (s00 + s11);
    const double lmax = mid + std::sqrt(std::max(0.0, mid * mid - det));
    const double r = 3.0 * std::sqrt(lmax);
    p.x0 = std::max(0, static_cast<int>(std::ceil(p.u - r)));
    p.x1 = std::min(cam.width - 1, static_cast<int>(std::floor(p.u + r)));
    p.y0 = std::max(0, static_cast<int>(std::ceil(p.v - r)));
    p.y1 = std::min(cam.height - 1, static_cast<int>(std::floor(p.v + r)));
    p.visible = p.x0 <= p.x1 && p.y0 <= p.y1 && s.opacity[i] > 0.0;
  });

  for (std::size_t i = 0; i < n; ++i)
    if (rc.proj[i].visible) rc.order.push_back(static_cast<int>(i));
  std::stable_sort(rc.order.begin(), rc.order.end(),
                   [&](int a, int b) { return rc.proj[a].tc.z < rc.proj[b].tc.z; });

  rc.tiles_x = (cam.width + kTile - 1) / kTile;
  rc.tiles_y = (cam.height + kTile - 1) / kTile;
  rc.tiles.assign(static_cast<std::size_t>(rc.tiles_x) * rc.tiles_y, {});
  for (int i : rc.order) {
    const Projected& p = rc.proj[i];
    for (int ty = p.y0 / kTile; ty <= p.y1 / kTile; ++ty)
      for (int tx = p.x0 / kTile; tx <= p.x1 / kTile; ++tx) rc.tiles[ty * rc.tiles_x + tx].push_back(i);
  }
  return rc;
}

Vec3 background_at(const SplatScene& s, int px, int py) {
  return s.background_image ? s.background_image->pixel(px, py) : s.background;
}

struct Sample {
  int index;
  double alpha;
  double T;  // transmittance in front of this splat
  double dx, dy;
  bool clamped;
};

// Walks the depth-ordered tile list for one pixel. Calls emit(sample) per
// contributing splat and returns the final transmittance.
template <class Emit>
double composite(const SplatScene& s, const RenderCache& rc, const std::vector<int>& list, int px, int py,
                 Emit&& emit) {
  double T = 1.0;
  for (int i : list) {
    const Projected& p = rc.proj[i];
    if (px < p.x0 || px > p.x1 || py < p.y0 || py > p.y1) continue;
    const double dx = px - p.u, dy = py - p.v;
    const double q = p.a * dx * dx + 2.0 * p.b * dx * dy + p.c * dy * dy;
    if (q > kCutoff) continue;
    const double raw = s.opacity[i] * std::exp(-0.5 * q);
    const bool clamped = raw > kMaxAlpha;
    const double alpha = clamped ? kMaxAlpha : raw;
    if (alpha <= 0.0) continue;
    emit(Sample{i, alpha, T, dx, dy, clamped});
    T *= 1.0 - alpha;
  }
  return T;
}

}  // namespace

Frame render(const SplatScene& scene, const Camera& cam, int threads, RenderCachePtr* cache) {
  check_scene(scene, cam);
  RenderCachePtr rc(new RenderCache(build_cache(scene, cam, threads)));
  Frame out(cam.width, cam.height);
  const std::size_t ntiles = rc->tiles.size();
  parallel_for(ntiles, threads, [&](std::size_t t) {
    const int tx = static_cast<int>(t) % rc->tiles_x, ty = static_cast<int>(t) / rc->tiles_x;
    const auto& list = rc->tiles[t];
    for (int py = ty * kTile; py < std::min(cam.height, (ty + 1) * kTile); ++py)
      for (int px = tx * kTile; px < std::min(cam.width, (tx + 1) * kTile); ++px) {
        Vec3 col;
        const double T = composite(scene, *rc, list, px, py,
                                   [&](const Sample& sm) { col += (sm.T * sm.alpha) * scene.color[sm.index]; });
        out.set_pixel(px, py, col + T * background_at(scene, px, py));
      }
  });
  if (cache) *cache = std::move(rc);
  return out;
}

SplatGradient render_backward(const SplatScene& scene, const Camera& cam, const Frame& adjoint, int threads,
                              const RenderCache* cache) {
  check_scene(scene, cam);
  if (adjoint.width != cam.width || adjoint.height != cam.height)
    throw ValidationError("render_backward: adjoint size does not match the camera");
  RenderCache local;
  if (!cache) {
    local = build_cache(scene, cam, threads);
    cache = &local;
  }
  const RenderCache& rc = *cache;
  const std::size_t n = scene.size();
  if (rc.proj.size() != n) throw ValidationError("render_backward: cache was built for a different scene");

  // Per chunk: dL/du, dL/dv, dL/dA00, dL/dA01 (each off-diagonal entry), dL/dA11.
  const std::size_t ntiles = rc.tiles.size();
  const std::size_t nchunks = static_cast<std::size_t>(std::max(1, threads));
  std::vector<std::vector<std::array<double, 5>>> acc(nchunks);
  parallel_chunks(ntiles, threads, [&](std::size_t b, std::size_t e, std::size_t chunk) {
    auto& g = acc[chunk];
    g.assign(n, {0, 0, 0, 0, 0});
    std::vector<Sample> samples;
    for (std::size_t t = b; t < e; ++t) {
      const int tx = static_cast<int>(t) % rc.tiles_x, ty = static_cast<int>(t) / rc.tiles_x;
      const auto& list = rc.tiles[t];
      if (list.empty()) continue;
      for (int py = ty * kTile; py < std::min(cam.height, (ty + 1) * kTile); ++py)
        for (int px = tx * kTile; px < std::min(cam.width, (tx + 1) * kTile); ++px) {
          const Vec3 gpix = adjoint.pixel(px, py);
          if (gpix == Vec3{}) continue;
          samples.clear();
          composite(scene, rc, list, px, py, [&](const Sample& sm) { samples.push_back(sm); });
          // B: color seen behind the current splat, normalized by its transmittance.
          Vec3 B = background_at(scene, px, py);
          for (auto it = samples.rbegin(); it != samples.rend(); ++it) {
            const Vec3& c = scene.color[it->index];
            if (!it->clamped) {
              const double dalpha = dot(gpix, it->T * (c - B));
              const Projected& p = rc.proj[it->index];
              const double al = it->alpha;
              // alpha = o exp(-q/2), q = d^T A d, d = pixel - mean.
              auto& a = g[it->index];
              a[0] += dalpha * al * (p.a * it->dx + p.b * it->dy);
              a[1] += dalpha * al * (p.b * it->dx + p.c * it->dy);
              a[2] += dalpha * -0.5 * al * it->dx * it->dx;
              a[3] += dalpha * -0.5 * al * it->dx * it->dy;
              a[4] += dalpha * -0.5 * al * it->dy * it->dy;
            }
            B = it->alpha * c + (1.0 - it->alpha) * B;
          }
        }
    }
  });

  SplatGradient out;
  out.x.assign(n, Vec3{});
  out.R.assign(n, Mat3{});
  const Mat3 Wt = cam.R.transposed();
  parallel_for(n, threads, [&](std::size_t i) {
    const Projected& p = rc.proj[i];
    if (!p.visible) return;
    std::array<double, 5> a{0, 0, 0, 0, 0};
    for (const auto& chunk : acc)
      if (!chunk.empty())
        for (int k = 0; k < 5; ++k) a[k] += chunk[i][k];
    if (a == std::array<double, 5>{0, 0, 0, 0, 0}) return;
    const double z = p.tc.z, x = p.tc.x, y = p.tc.y;
    // Conic adjoint -> 2D covariance adjoint: dS = -A dA A.
    const double A[2][2] = {{p.a, p.b}, {p.b, p.c}};
    const double dA[2][2] = {{a[2], a[3]}, {a[3], a[4]}};
    double dS[2][2] = {};
    for (int r = 0; r < 2; ++r)
      for (int c = 0; c < 2; ++c) {
        double v = 0.0;
        for (int k = 0; k < 2; ++k)
          for (int l = 0; l < 2; ++l) v += A[r][k] * dA[k][l] * A[l][c];
        dS[r][c] = -v;
      }
    const double J[2][3] = {{cam.fx / z, 0.0, -cam.fx * x / (z * z)}, {0.0, cam.fy / z, -cam.fy * y / (z * z)}};
    // dM = J^T dS J; dJ = 2 dS J M.
    Mat3 dM;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) {
        double v = 0.0;
        for (int k = 0; k < 2; ++k)
          for (int l = 0; l < 2; ++l) v += J[k][r] * dS[k][l] * J[l][c];
        dM(r, c) = v;
      }
    double dJ[2][3] = {};
    for (int r = 0; r < 2; ++r)
      for (int c = 0; c < 3; ++c) {
        double v = 0.0;
        for (int k = 0; k < 2; ++k)
          for (int l = 0; l < 3; ++l) v += dS[r][k] * J[k][l] * p.M(l, c);
        dJ[r][c] = 2.0 * v;
      }
    // M = W R Sigma R^T W^T.
    const Mat3 dSw = Wt * dM * cam.R;
    out.R[i] = 2.0 * (dSw * scene.R[i] * scene.rest_covariance[i]);

    const double z2 = z * z, z3 = z2 * z;
    Vec3 dt;
    dt.x = dJ[0][2] * (-cam.fx / z2) + a[0] * cam.fx / z;
    dt.y = dJ[1][2] * (-cam.fy / z2) + a[1] * cam.fy / z;
    dt.z = dJ[0][0] * (-cam.fx / z2) + dJ[0][2] * (2.0 * cam.fx * x / z3) + dJ[1][1] * (-cam.fy / z2) +
           dJ[1][2] * (2.0 * cam.fy * y / z3) - a[0] * cam.fx * x / z2 - a[1] * cam.fy * y / z2;
    out.x[i] = Wt * dt;
  });
  return out;
}

namespace {

constexpr int kWindow = 11;
constexpr double kSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

const std::array<double, kWindow>& window() {
  static const std::array<double, kWindow> w = [] {
    std::array<double, kWindow> r{};
    double sum = 0.0;
    for (int i = 0; i < kWindow; ++i) {
      const double d = i - kWindow / 2;
      r[i] = std::exp(-d * d / (2.0 * kSigma * kSigma));
      sum += r[i];
    }
    for (double& v : r) v /= sum;
    return r;
  }();
  return w;
}

// Same-size separable Gaussian blur with zero padding. The kernel is
// symmetric, so this operator is its own transpose.
std::vector<double> blur(const std::vector<double>& img, int w, int h) {
  const auto& k = window();
  const int half = kWindow / 2;
  std::vector<double> tmp(img.size(), 0.0), out(img.size(), 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int i = 0; i < kWindow; ++i) {
        const int xx = x + i - half;
        if (xx >= 0 && xx < w) s += k[i] * img[y * w + xx];
      }
      tmp[y * w + x] = s;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int i = 0; i < kWindow; ++i) {
        const int yy = y + i - half;
        if (yy >= 0 && yy < h) s += k[i] * tmp[yy * w + x];
      }
      out[y * w + x] = s;
    }
  return out;
}

std::vector<double> channel(const Frame& f, int c) {
  std::vector<double> r(static_cast<std::size_t>(f.width) * f.height);
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = f.rgb[3 * i + c];
  return r;
}

struct SsimChannel {
  std::vector<double> mx, my, sxx, syy, sxy;
};

SsimChannel ssim_stats(const std::vector<double>& a, const std::vector<double>& b, int w, int h) {
  SsimChannel s;
  s.mx = blur(a, w, h);
  s.my = blur(b, w, h);
  std::vector<double> aa(a.size()), bb(a.size()), ab(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    aa[i] = a[i] * a[i];
    bb[i] = b[i] * b[i];
    ab[i] = a[i] * b[i];
  }
  s.sxx = blur(aa, w, h);
  s.syy = blur(bb, w, h);
  s.sxy = blur(ab, w, h);
  for (std::size_t i = 0; i < a.size(); ++i) {
    s.sxx[i] -= s.mx[i] * s.mx[i];
    s.syy[i] -= s.my[i] * s.my[i];
    s.sxy[i] -= s.mx[i] * s.my[i];
  }
  return s;
}

void check_pair(const Frame& a, const Frame& b) {
  if (a.width != b.width || a.height != b.height)
    throw ValidationError("image_loss: frame sizes differ (" + std::to_string(a.width) + "x" +
                          std::to_string(a.height) + " vs " + std::to_string(b.width) + "x" +
                          std::to_string(b.height) + ")");
  if (a.width <= 0 || a.height <= 0) throw ValidationError("image_loss: empty frame");
}

double ssim_impl(const Frame& a, const Frame& b, Frame* grad, double scale) {
  const int w = a.width, h = a.height;
  const std::size_t npix = static_cast<std::size_t>(w) * h;
  double total = 0.0;
  for (int c = 0; c < 3; ++c) {
    const auto x = channel(a, c), y = channel(b, c);
    const SsimChannel s = ssim_stats(x, y, w, h);
    std::vector<double> gmx, gsxx, gsxy;
    if (grad) {
      gmx.assign(npix, 0.0);
      gsxx.assign(npix, 0.0);
      gsxy.assign(npix, 0.0);
    }
    for (std::size_t i = 0; i < npix; ++i) {
      const double A1 = 2.0 * s.mx[i] * s.my[i] + kC1;
      const double A2 = 2.0 * s.sxy[i] + kC2;
      const double B1 = s.mx[i] * s.mx[i] + s.my[i] * s.my[i] + kC1;
      const double B2 = s.sxx[i] + s.syy[i] + kC2;
      const double m = (A1 * A2) / (B1 * B2);
      total += m;
      if (grad) {
        const double dA1 = A2 / (B1 * B2), dA2 = A1 / (B1 * B2), dB1 = -m / B1, dB2 = -m / B2;
        const double mx = s.mx[i], my = s.my[i];
        // sxy = E[xy] - mx my, sxx = E[x^2] - mx^2.
        gmx[i] = scale * (dA1 * 2.0 * my - dA2 * 2.0 * my + dB1 * 2.0 * mx - dB2 * 2.0 * mx);
        gsxy[i] = scale * dA2 * 2.0;
        gsxx[i] = scale * dB2;
      }
    }
    if (grad) {
      const auto bmx = blur(gmx, w, h), bsxx = blur(gsxx, w, h), bsxy = blur(gsxy, w, h);
      for (std::size_t i = 0; i < npix; ++i) grad->rgb[3 * i + c] += bmx[i] + 2.0 * x[i] * bsxx[i] + y[i] * bsxy[i];
    }
  }
  return total / static_cast<double>(3 * npix);
}

}  // namespace

double ssim(const Frame& a, const Frame& b) {
  check_pair(a, b);
  return ssim_impl(a, b, nullptr, 0.0);
}

LossValue image_loss(const Frame& rendered, const Frame& reference, double lambda, Frame* grad) {
  check_pair(rendered, reference);
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ValidationError("image_loss: lambda must be in [0, 1]");
  const std::size_t n = rendered.rgb.size();
  if (grad) *grad = Frame(rendered.width, rendered.height);
  LossValue v;
  double l1 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = rendered.rgb[i] - reference.rgb[i];
    l1 += std::abs(d);
    if (grad) grad->rgb[i] = lambda * (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0)) / static_cast<double>(n);
  }
  v.l1 = l1 / static_cast<double>(n);
  // dLoss/dSSIM-map entry: -(1 - lambda) / 2 / count.
  const double scale = -(1.0 - lambda) * 0.5 / static_cast<double>(n);
  const double s = ssim_impl(rendered, reference, grad, scale);
  v.dssim = (1.0 - s) * 0.5;
  v.total = lambda * v.l1 + (1.0 - lambda) * v.dssim;
  return v;
}

}  // namespace splatmpm::splat
