#include "splatmpm/fields.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "splatmpm/errors.hpp"
#include "splatmpm/scene.hpp"

namespace splatmpm::fields {

namespace {

constexpr char kMagic[8] = {'S', 'M', 'P', 'M', 'F', 'L', 'D', '1'};

double sigmoid(double y) {
  if (y >= 0) return 1.0 / (1.0 + std::exp(-y));
  const double e = std::exp(y);
  return e / (1.0 + e);
}

struct Lerp {
  int i0 = 0;
  double t = 0.0;
};

Lerp lerp_coord(double u, int res) {
  const double g = std::clamp(u, 0.0, 1.0) * (res - 1);
  Lerp l;
  l.i0 = std::min(static_cast<int>(std::floor(g)), res - 2);
  l.t = g - l.i0;
  return l;
}

// Plane p reads coordinates (a, b) of the query point.
constexpr int kPlaneAxes[3][2] = {{0, 1}, {0, 2}, {1, 2}};

}  // namespace

FieldSpec material_spec(double youngs_min, double youngs_max, int resolution) {
  FieldSpec s;
  s.kind = FieldKind::kMaterial;
  s.resolution = resolution;
  s.youngs_min = youngs_min;
  s.youngs_max = youngs_max;
  return s;
}

FieldSpec velocity_spec(double v_scale, int resolution) {
  FieldSpec s;
  s.kind = FieldKind::kVelocity;
  s.resolution = resolution;
  s.v_scale = v_scale;
  return s;
}

NeuralField::NeuralField(const FieldSpec& spec, std::uint64_t seed) : spec_(spec) {
  if (spec.resolution < 2) throw ValidationError("field resolution must be >= 2");
  if (spec.features < 1 || spec.hidden < 1) throw ValidationError("field widths must be >= 1");
  if (spec.kind == FieldKind::kMaterial && !(spec.youngs_min > 0 && spec.youngs_min < spec.youngs_max))
    throw ValidationError("material field needs 0 < youngs_min < youngs_max");
  const std::size_t R = spec.resolution, D = spec.features, H = spec.hidden, in = 3 * D,
                    out = spec.output_dim();
  plane_count_ = 3 * R * R * D;
  w1_ = plane_count_;
  b1_ = w1_ + H * in;
  w2_ = b1_ + H;
  b2_ = w2_ + H * H;
  w3_ = b2_ + H;
  b3_ = w3_ + out * H;
  params_.assign(b3_ + out, 0.0);

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 0.1);
  for (std::size_t i = 0; i < plane_count_; ++i) params_[i] = n(rng);
  auto init = [&](std::size_t off, std::size_t count, std::size_t fan_in) {
    const double a = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-a, a);
    for (std::size_t i = 0; i < count; ++i) params_[off + i] = u(rng);
  };
  init(w1_, H * in, in);
  init(w2_, H * H, H);
  init(w3_, out * H, H);
}

double& NeuralField::plane(int p, int i, int j, int c) {
  const std::size_t R = spec_.resolution, D = spec_.features;
  return params_[((static_cast<std::size_t>(p) * R + i) * R + j) * D + c];
}

double NeuralField::plane(int p, int i, int j, int c) const {
  return const_cast<NeuralField*>(this)->plane(p, i, j, c);
}

struct NeuralField::Forward {
  std::array<Lerp, 3> u, v;  // per plane
  std::vector<double> feat, h1, h2;
  Vec3 y;
};

void NeuralField::forward(const Vec3& x, Forward& f) const {
  const int R = spec_.resolution, D = spec_.features, H = spec_.hidden, out = spec_.output_dim();
  const int in = 3 * D;
  f.feat.assign(in, 0.0);
  for (int p = 0; p < 3; ++p) {
    f.u[p] = lerp_coord(x[kPlaneAxes[p][0]], R);
    f.v[p] = lerp_coord(x[kPlaneAxes[p][1]], R);
    const int i = f.u[p].i0, j = f.v[p].i0;
    const double s = f.u[p].t, t = f.v[p].t;
    const double w00 = (1 - s) * (1 - t), w10 = s * (1 - t), w01 = (1 - s) * t, w11 = s * t;
    for (int c = 0; c < D; ++c)
      f.feat[p * D + c] = w00 * plane(p, i, j, c) + w10 * plane(p, i + 1, j, c) + w01 * plane(p, i, j + 1, c) +
                          w11 * plane(p, i + 1, j + 1, c);
  }
  f.h1.assign(H, 0.0);
  f.h2.assign(H, 0.0);
  for (int r = 0; r < H; ++r) {
    double s = params_[b1_ + r];
    const double* w = &params_[w1_ + static_cast<std::size_t>(r) * in];
    for (int c = 0; c < in; ++c) s += w[c] * f.feat[c];
    f.h1[r] = std::max(0.0, s);
  }
  for (int r = 0; r < H; ++r) {
    double s = params_[b2_ + r];
    const double* w = &params_[w2_ + static_cast<std::size_t>(r) * H];
    for (int c = 0; c < H; ++c) s += w[c] * f.h1[c];
    f.h2[r] = std::max(0.0, s);
  }
  f.y = {};
  for (int r = 0; r < out; ++r) {
    double s = params_[b3_ + r];
    const double* w = &params_[w3_ + static_cast<std::size_t>(r) * H];
    for (int c = 0; c < H; ++c) s += w[c] * f.h2[c];
    f.y[r] = s;
  }
}

Vec3 NeuralField::raw(const Vec3& x) const {
  Forward f;
  forward(x, f);
  return f.y;
}

double NeuralField::squash_youngs(double y) const {
  const double a = std::log(spec_.youngs_min), b = std::log(spec_.youngs_max);
  // Saturated sigmoids round onto the bounds; keep the output strictly inside.
  return std::clamp(std::exp(a + sigmoid(y) * (b - a)), std::nextafter(spec_.youngs_min, spec_.youngs_max),
                    std::nextafter(spec_.youngs_max, spec_.youngs_min));
}

double NeuralField::youngs(const Vec3& x) const {
  if (spec_.kind != FieldKind::kMaterial) throw std::logic_error("youngs() on a velocity field");
  return squash_youngs(raw(x).x);
}

Vec3 NeuralField::velocity(const Vec3& x) const {
  if (spec_.kind != FieldKind::kVelocity) throw std::logic_error("velocity() on a material field");
  return spec_.v_scale * raw(x);
}

std::vector<double> NeuralField::youngs(const std::vector<Vec3>& x) const {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = youngs(x[i]);
  return out;
}

std::vector<Vec3> NeuralField::velocity(const std::vector<Vec3>& x) const {
  std::vector<Vec3> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = velocity(x[i]);
  return out;
}

void NeuralField::backward(const std::vector<Vec3>& x, const std::vector<Vec3>& adjoint,
                           std::vector<double>& grad) const {
  if (x.size() != adjoint.size()) throw std::logic_error("NeuralField::backward: size mismatch");
  if (grad.size() != params_.size()) grad.assign(params_.size(), 0.0);
  const int D = spec_.features, H = spec_.hidden, out = spec_.output_dim();
  const int in = 3 * D;
  const double la = std::log(spec_.youngs_min), lb = std::log(spec_.youngs_max);
  Forward f;
  std::vector<double> dh1(H), dh2(H), dfeat(in);
  for (std::size_t n = 0; n < x.size(); ++n) {
    forward(x[n], f);
    Vec3 dy;
    if (spec_.kind == FieldKind::kMaterial) {
      const double s = sigmoid(f.y.x);
      const double E = std::exp(la + s * (lb - la));
      dy.x = adjoint[n].x * E * (lb - la) * s * (1 - s);
    } else {
      dy = spec_.v_scale * adjoint[n];
    }
    if (dy == Vec3{}) continue;
    std::fill(dh2.begin(), dh2.end(), 0.0);
    for (int r = 0; r < out; ++r) {
      grad[b3_ + r] += dy[r];
      const std::size_t row = w3_ + static_cast<std::size_t>(r) * H;
      for (int c = 0; c < H; ++c) {
        grad[row + c] += dy[r] * f.h2[c];
        dh2[c] += dy[r] * params_[row + c];
      }
    }
    std::fill(dh1.begin(), dh1.end(), 0.0);
    for (int r = 0; r < H; ++r) {
      if (f.h2[r] <= 0.0) continue;
      const double g = dh2[r];
      grad[b2_ + r] += g;
      const std::size_t row = w2_ + static_cast<std::size_t>(r) * H;
      for (int c = 0; c < H; ++c) {
        grad[row + c] += g * f.h1[c];
        dh1[c] += g * params_[row + c];
      }
    }
    std::fill(dfeat.begin(), dfeat.end(), 0.0);
    for (int r = 0; r < H; ++r) {
      if (f.h1[r] <= 0.0) continue;
      const double g = dh1[r];
      grad[b1_ + r] += g;
      const std::size_t row = w1_ + static_cast<std::size_t>(r) * in;
      for (int c = 0; c < in; ++c) {
        grad[row + c] += g * f.feat[c];
        dfeat[c] += g * params_[row + c];
      }
    }
    const std::size_t R = spec_.resolution;
    for (int p = 0; p < 3; ++p) {
      const int i = f.u[p].i0, j = f.v[p].i0;
      const double s = f.u[p].t, t = f.v[p].t;
      const double w[4] = {(1 - s) * (1 - t), s * (1 - t), (1 - s) * t, s * t};
      const int di[4] = {0, 1, 0, 1}, dj[4] = {0, 0, 1, 1};
      for (int q = 0; q < 4; ++q) {
        const std::size_t base = ((static_cast<std::size_t>(p) * R + i + di[q]) * R + j + dj[q]) * D;
        for (int c = 0; c < D; ++c) grad[base + c] += w[q] * dfeat[p * D + c];
      }
    }
  }
}

double NeuralField::tv_loss() const {
  const int R = spec_.resolution, D = spec_.features;
  double s = 0.0;
  for (int p = 0; p < 3; ++p)
    for (int i = 0; i < R; ++i)
      for (int j = 0; j < R; ++j)
        for (int c = 0; c < D; ++c) {
          const double u = plane(p, i, j, c);
          if (i + 1 < R) s += (plane(p, i + 1, j, c) - u) * (plane(p, i + 1, j, c) - u);
          if (j + 1 < R) s += (plane(p, i, j + 1, c) - u) * (plane(p, i, j + 1, c) - u);
        }
  return s;
}

void NeuralField::tv_backward(double weight, std::vector<double>& grad) const {
  if (grad.size() != params_.size()) grad.assign(params_.size(), 0.0);
  const std::size_t R = spec_.resolution, D = spec_.features;
  auto id = [&](std::size_t p, std::size_t i, std::size_t j, std::size_t c) { return ((p * R + i) * R + j) * D + c; };
  for (std::size_t p = 0; p < 3; ++p)
    for (std::size_t i = 0; i < R; ++i)
      for (std::size_t j = 0; j < R; ++j)
        for (std::size_t c = 0; c < D; ++c) {
          const std::size_t a = id(p, i, j, c);
          if (i + 1 < R) {
            const std::size_t b = id(p, i + 1, j, c);
            const double g = 2.0 * weight * (params_[b] - params_[a]);
            grad[b] += g;
            grad[a] -= g;
          }
          if (j + 1 < R) {
            const std::size_t b = id(p, i, j + 1, c);
            const double g = 2.0 * weight * (params_[b] - params_[a]);
            grad[b] += g;
            grad[a] -= g;
          }
        }
}

void NeuralField::set_youngs_bias(double youngs) {
  if (spec_.kind != FieldKind::kMaterial) throw std::logic_error("set_youngs_bias on a velocity field");
  const double la = std::log(spec_.youngs_min), lb = std::log(spec_.youngs_max);
  const double s = std::clamp((std::log(youngs) - la) / (lb - la), 1e-9, 1.0 - 1e-9);
  params_[b3_] = std::log(s / (1.0 - s));
}

void NeuralField::zero_output_layer() {
  std::fill(params_.begin() + static_cast<std::ptrdiff_t>(w3_), params_.end(), 0.0);
}

// ---------------------------------------------------------------------------
// Serialization: magic, uint32 kind, resolution, features, hidden, float64
// youngs_min, youngs_max, v_scale, uint64 count, count float64 parameters.
// Little-endian host layout.

std::string NeuralField::serialize() const {
  std::string out(kMagic, sizeof(kMagic));
  auto put = [&](const auto& v) { out.append(reinterpret_cast<const char*>(&v), sizeof(v)); };
  put(static_cast<std::uint32_t>(spec_.kind));
  put(static_cast<std::uint32_t>(spec_.resolution));
  put(static_cast<std::uint32_t>(spec_.features));
  put(static_cast<std::uint32_t>(spec_.hidden));
  put(spec_.youngs_min);
  put(spec_.youngs_max);
  put(spec_.v_scale);
  put(static_cast<std::uint64_t>(params_.size()));
  out.append(reinterpret_cast<const char*>(params_.data()), params_.size() * sizeof(double));
  return out;
}

NeuralField NeuralField::deserialize(const std::string& bytes) {
  std::size_t pos = 0;
  auto need = [&](std::size_t n) {
    if (pos + n > bytes.size()) throw ValidationError("field file truncated");
  };
  auto get = [&](auto& v) {
    need(sizeof(v));
    std::memcpy(&v, bytes.data() + pos, sizeof(v));
    pos += sizeof(v);
  };
  need(sizeof(kMagic));
  if (std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) throw ValidationError("not a field file (bad magic)");
  pos = sizeof(kMagic);
  std::uint32_t kind, res, feat, hidden;
  std::uint64_t count;
  FieldSpec spec;
  get(kind);
  get(res);
  get(feat);
  get(hidden);
  get(spec.youngs_min);
  get(spec.youngs_max);
  get(spec.v_scale);
  get(count);
  if (kind != 1 && kind != 2) throw ValidationError("field file has unknown kind");
  spec.kind = static_cast<FieldKind>(kind);
  spec.resolution = static_cast<int>(res);
  spec.features = static_cast<int>(feat);
  spec.hidden = static_cast<int>(hidden);
  NeuralField f(spec, 0);
  if (count != f.params_.size()) throw ValidationError("field file parameter count does not match its shape");
  need(count * sizeof(double));
  std::memcpy(f.params_.data(), bytes.data() + pos, count * sizeof(double));
  for (double v : f.params_)
    if (!std::isfinite(v)) throw ValidationError("field file contains non-finite parameters");
  return f;
}

void NeuralField::save(const std::filesystem::path& path) const { write_file_atomic(path, serialize()); }

NeuralField NeuralField::load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open field file " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return deserialize(ss.str());
}

// ---------------------------------------------------------------------------
// Adam

Adam::Adam(std::size_t n, double beta1, double beta2, double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps), m_(n, 0.0), v_(n, 0.0) {}

bool Adam::step(std::vector<double>& params, const std::vector<double>& grads, const std::vector<ParamGroup>& groups) {
  if (params.size() != grads.size() || params.size() != m_.size())
    throw std::logic_error("Adam::step: size mismatch");
  for (double g : grads)
    if (!std::isfinite(g)) {
      skipped_ = true;
      return false;
    }
  skipped_ = false;
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, t_), c2 = 1.0 - std::pow(beta2_, t_);
  for (const ParamGroup& g : groups) {
    for (std::size_t i = g.begin; i < g.end && i < params.size(); ++i) {
      m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grads[i];
      v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grads[i] * grads[i];
      params[i] -= g.lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
    }
  }
  return true;
}

bool Adam::step(std::vector<double>& params, const std::vector<double>& grads, double lr) {
  return step(params, grads, {{0, params.size(), lr}});
}

}  // namespace splatmpm::fields
