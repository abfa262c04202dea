#include "splatmpm/grad.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "splatmpm/errors.hpp"
#include "splatmpm/parallel.hpp"

namespace splatmpm::grad {

bool StateAdjoint::is_zero() const {
  for (std::size_t p = 0; p < size(); ++p) {
    if (!(x[p] == Vec3{}) || !(v[p] == Vec3{}) || !(F[p] == Mat3{}) || !(C[p] == Mat3{})) return false;
  }
  return true;
}

namespace {

Vec3 weight_gradient(const mpm::Stencil& s, int i, int j, int k) {
  return {s.dw[0][i] * s.w[1][j] * s.w[2][k], s.w[0][i] * s.dw[1][j] * s.w[2][k],
          s.w[0][i] * s.w[1][j] * s.dw[2][k]};
}

// dLoss/dF through P(F) = 2 mu (F - R) + lambda (J - 1) cof(F), plus the
// Lame-parameter adjoints.
struct StressAdjoint {
  Mat3 dF;
  double dmu = 0.0;
  double dlambda = 0.0;
};

StressAdjoint stress_backward(const Mat3& F, const Svd3& svd, const mpm::LameParams& lame, const Mat3& dP) {
  StressAdjoint out;
  const Mat3 R = svd.U * svd.V.transposed();
  const Mat3 cof = F.cofactor();
  const double J = F.determinant();
  const double cof_dot = ddot(cof, dP);
  out.dF = 2.0 * lame.mu * (dP - polar_rotation_vjp(svd, dP)) +
           lame.lambda * (cof_dot * cof + (J - 1.0) * cofactor_vjp(F, dP));
  out.dmu = 2.0 * ddot(F - R, dP);
  out.dlambda = (J - 1.0) * cof_dot;
  return out;
}

struct BackwardScratch {
  std::vector<Vec3> grid_dv;    // dLoss/dv_i
  std::vector<Vec3> grid_dmom;  // dLoss/d(scattered momentum)
  std::vector<double> grid_dm;  // dLoss/dm_i
  std::vector<Vec3> vbar_t;     // per particle, v' adjoint including the x update
  std::vector<Mat3> cbar_t;     // per particle, C' adjoint including the F update
};

BackwardScratch& scratch_for(std::size_t nodes, std::size_t particles) {
  static thread_local BackwardScratch s;
  if (s.grid_dv.size() != nodes) {
    s.grid_dv.assign(nodes, {});
    s.grid_dmom.assign(nodes, {});
    s.grid_dm.assign(nodes, 0.0);
  }
  s.vbar_t.resize(particles);
  s.cbar_t.resize(particles);
  return s;
}

}  // namespace

void substep_backward(const MaterialPoints& in, const SimConfig& cfg, double time, mpm::GridState& grid,
                      StateAdjoint& adj, std::vector<double>& grad_youngs) {
  const std::size_t np = in.size();
  if (adj.size() != np) throw std::logic_error("substep_backward: adjoint size mismatch");
  if (grad_youngs.size() != np) grad_youngs.assign(np, 0.0);

  // Recompute the forward grid.
  grid.clear();
  mpm::p2g(in, grid, cfg, time);
  mpm::grid_update(grid, cfg);

  const double dx = grid.dx, inv_dx = 1.0 / dx, dt = cfg.dt;
  const double K = 4.0 * inv_dx * inv_dx;
  BackwardScratch& S = scratch_for(grid.mass.size(), np);
  for (int i = grid.lo[0]; i <= grid.hi[0]; ++i)
    for (int j = grid.lo[1]; j <= grid.hi[1]; ++j)
      for (int k = grid.lo[2]; k <= grid.hi[2]; ++k) {
        const std::size_t id = grid.index(i, j, k);
        S.grid_dv[id] = {};
        S.grid_dmom[id] = {};
        S.grid_dm[id] = 0.0;
      }

  // G2P reverse: per-particle part.
  parallel_for(np, cfg.threads, [&](std::size_t p) {
    const mpm::Stencil s = mpm::make_stencil(in.x[p], inv_dx);
    Mat3 B;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        for (int k = 0; k < 3; ++k) {
          const double w = s.w[0][i] * s.w[1][j] * s.w[2][k];
          const Vec3 d{(i - s.frac[0]) * dx, (j - s.frac[1]) * dx, (k - s.frac[2]) * dx};
          B += w * Mat3::outer(grid.velocity[grid.index(s.base[0] + i, s.base[1] + j, s.base[2] + k)], d);
        }
    const Mat3 C_out = K * B;
    const Mat3& F_in = in.F[p];
    const Mat3 dF_out = adj.F[p];
    const Mat3 cbar = adj.C[p] + dt * (dF_out * F_in.transposed());
    const Vec3 vbar = adj.v[p] + dt * adj.x[p];
    Vec3 xbar = adj.x[p];
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        for (int k = 0; k < 3; ++k) {
          const double w = s.w[0][i] * s.w[1][j] * s.w[2][k];
          const Vec3 gw = weight_gradient(s, i, j, k);
          const Vec3 d{(i - s.frac[0]) * dx, (j - s.frac[1]) * dx, (k - s.frac[2]) * dx};
          const Vec3& vi = grid.velocity[grid.index(s.base[0] + i, s.base[1] + j, s.base[2] + k)];
          xbar += (dot(vi, vbar) + K * dot(vi, cbar * d)) * gw;
          xbar -= (K * w) * (cbar.transposed() * vi);
        }
    S.vbar_t[p] = vbar;
    S.cbar_t[p] = cbar;
    adj.x[p] = xbar;
    adj.F[p] = (Mat3::identity() + dt * C_out).transposed() * dF_out;
    adj.v[p] = {};
    adj.C[p] = {};
  });

  // G2P reverse: scatter to grid velocity adjoints, in particle order.
  for (std::size_t p = 0; p < np; ++p) {
    const mpm::Stencil s = mpm::make_stencil(in.x[p], inv_dx);
    const Vec3& vbar = S.vbar_t[p];
    const Mat3& cbar = S.cbar_t[p];
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        for (int k = 0; k < 3; ++k) {
          const double w = s.w[0][i] * s.w[1][j] * s.w[2][k];
          const Vec3 d{(i - s.frac[0]) * dx, (j - s.frac[1]) * dx, (k - s.frac[2]) * dx};
          S.grid_dv[grid.index(s.base[0] + i, s.base[1] + j, s.base[2] + k)] += w * vbar + (K * w) * (cbar * d);
        }
  }

  // Grid update reverse. v_i = S_i / m_i + dt a_i with S_i the scattered momentum.
  double max_mass = 0.0;
  for (int i = grid.lo[0]; i <= grid.hi[0]; ++i)
    for (int j = grid.lo[1]; j <= grid.hi[1]; ++j)
      for (int k = grid.lo[2]; k <= grid.hi[2]; ++k) max_mass = std::max(max_mass, grid.mass[grid.index(i, j, k)]);
  const double eps = 1e-12 * max_mass;
  for (int i = grid.lo[0]; i <= grid.hi[0]; ++i)
    for (int j = grid.lo[1]; j <= grid.hi[1]; ++j)
      for (int k = grid.lo[2]; k <= grid.hi[2]; ++k) {
        const std::size_t id = grid.index(i, j, k);
        const double m = grid.mass[id];
        if (!(m > eps && m > 0.0) || grid.dirichlet[id]) continue;
        const Vec3 scattered = grid.momentum[id] - dt * grid.force[id];
        S.grid_dmom[id] = S.grid_dv[id] / m;
        S.grid_dm[id] = -dot(S.grid_dv[id], scattered) / (m * m);
      }

  // P2G reverse: gather per particle.
  const double nu = in.poisson;
  const double dE_dmu = 1.0 / (2.0 * (1.0 + nu));
  const double dE_dlambda = nu / ((1.0 + nu) * (1.0 - 2.0 * nu));
  parallel_for(np, cfg.threads, [&](std::size_t p) {
    const mpm::Stencil s = mpm::make_stencil(in.x[p], inv_dx);
    const mpm::LameParams lame = mpm::young_to_lame(in.youngs[p], nu);
    const Mat3& F = in.F[p];
    const Svd3 svd = svd3(F);
    const Mat3 P = mpm::first_pk_stress(F, svd, lame);
    const double m = in.mass[p];
    const double vol = in.volume[p];
    const Mat3 A = m * in.C[p] - (K * dt * vol) * (P * F.transposed());
    const Vec3 mv = m * in.v[p];
    Vec3 vbar, xbar;
    Mat3 Abar;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        for (int k = 0; k < 3; ++k) {
          const double w = s.w[0][i] * s.w[1][j] * s.w[2][k];
          const Vec3 gw = weight_gradient(s, i, j, k);
          const Vec3 d{(i - s.frac[0]) * dx, (j - s.frac[1]) * dx, (k - s.frac[2]) * dx};
          const std::size_t id = grid.index(s.base[0] + i, s.base[1] + j, s.base[2] + k);
          const Vec3& dmom = S.grid_dmom[id];
          const double dm = S.grid_dm[id];
          vbar += (w * m) * dmom;
          Abar += w * Mat3::outer(dmom, d);
          xbar += (m * dm + dot(dmom, mv + A * d)) * gw;
          xbar -= w * (A.transposed() * dmom);
        }
    const Mat3 G = (-K * dt * vol) * Abar;
    const StressAdjoint sa = stress_backward(F, svd, lame, G * F);
    adj.v[p] += vbar;
    adj.x[p] += xbar;
    adj.C[p] += m * Abar;
    adj.F[p] += G.transposed() * P + sa.dF;
    grad_youngs[p] += sa.dmu * dE_dmu + sa.dlambda * dE_dlambda;
  });
}

// ---------------------------------------------------------------------------
// Tape

Tape::Tape(const SimConfig& cfg, int checkpoint_interval)
    : cfg_(cfg), interval_(std::max(1, checkpoint_interval)), grid_(cfg) {}

void Tape::record_frame(MaterialPoints& state) {
  FrameRecord rec;
  for (int s = 0; s < cfg_.substeps; ++s) {
    if (s % interval_ == 0) rec.checkpoints.push_back({s, time_, state});
    mpm::substep(state, grid_, cfg_, time_);
    time_ += cfg_.dt;
  }
  frames_.push_back(std::move(rec));
}

const MaterialPoints& Tape::frame_entry(std::size_t f) const { return frames_.at(f).checkpoints.front().state; }

void Tape::clear() {
  frames_.clear();
  time_ = 0.0;
}

FrameGradient backward_frame(const Tape& tape, std::size_t f, StateAdjoint adj) {
  if (f >= tape.frames()) throw std::logic_error("backward_frame: frame " + std::to_string(f) + " not recorded");
  const Tape::FrameRecord& rec = tape.frame(f);
  if (rec.checkpoints.empty()) throw std::logic_error("backward_frame: missing checkpoint");
  const SimConfig& cfg = tape.config();
  const std::size_t np = rec.checkpoints.front().state.size();
  if (adj.size() != np) throw std::logic_error("backward_frame: adjoint size mismatch");

  FrameGradient out;
  out.grad_youngs.assign(np, 0.0);
  mpm::GridState grid(cfg);
  std::vector<MaterialPoints> inputs;
  std::vector<double> times;
  for (std::size_t c = rec.checkpoints.size(); c-- > 0;) {
    const Tape::Checkpoint& cp = rec.checkpoints[c];
    const int seg_end = c + 1 < rec.checkpoints.size() ? rec.checkpoints[c + 1].substep : cfg.substeps;
    const int count = seg_end - cp.substep;
    if (count <= 0) throw std::logic_error("backward_frame: inconsistent checkpoints");
    // Recompute the segment's substep inputs.
    inputs.assign(1, cp.state);
    times.assign(1, cp.time);
    for (int s = 1; s < count; ++s) {
      inputs.push_back(inputs.back());
      mpm::substep(inputs.back(), grid, cfg, times.back());
      times.push_back(times.back() + cfg.dt);
    }
    for (int s = count; s-- > 0;) substep_backward(inputs[s], cfg, times[s], grid, adj, out.grad_youngs);
  }
  out.entry = std::move(adj);
  return out;
}

SequenceGradient backward_sequence(const Tape& tape, const std::vector<std::vector<Vec3>>& pos_adj, bool truncate) {
  if (pos_adj.size() > tape.frames()) throw std::logic_error("backward_sequence: more adjoints than recorded frames");
  SequenceGradient out;
  if (tape.frames() == 0) return out;
  const std::size_t np = tape.frame_entry(0).size();
  out.grad_youngs.assign(np, 0.0);
  out.initial = StateAdjoint(np);

  auto add = [&](const std::vector<double>& g) {
    for (std::size_t p = 0; p < np; ++p) out.grad_youngs[p] += g[p];
  };
  if (truncate) {
    for (std::size_t f = 0; f < pos_adj.size(); ++f) {
      if (pos_adj[f].empty()) continue;
      StateAdjoint a(np);
      a.x = pos_adj[f];
      add(backward_frame(tape, f, std::move(a)).grad_youngs);
    }
    return out;
  }
  StateAdjoint a(np);
  bool active = false;
  for (std::size_t f = pos_adj.size(); f-- > 0;) {
    if (!pos_adj[f].empty()) {
      if (pos_adj[f].size() != np) throw std::logic_error("backward_sequence: adjoint size mismatch");
      for (std::size_t p = 0; p < np; ++p) a.x[p] += pos_adj[f][p];
      active = true;
    }
    if (!active) continue;
    FrameGradient g = backward_frame(tape, f, std::move(a));
    add(g.grad_youngs);
    a = std::move(g.entry);
  }
  out.initial = std::move(a);
  return out;
}

std::vector<Vec3> backward_stage1(const Tape& tape, const std::vector<std::vector<Vec3>>& pos_adj) {
  if (tape.frames() < 3 || pos_adj.size() < 3)
    throw std::logic_error("backward_stage1: needs three recorded frames with adjoints");
  std::vector<std::vector<Vec3>> first(pos_adj.begin(), pos_adj.begin() + 3);
  return backward_sequence(tape, first, false).initial.v;
}

// ---------------------------------------------------------------------------
// Position loss

double position_loss(const std::vector<Vec3>& x, const std::vector<Vec3>& target) {
  if (x.size() != target.size()) throw ValidationError("position_loss: size mismatch");
  if (x.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t p = 0; p < x.size(); ++p) s += squared_norm(x[p] - target[p]);
  return s / static_cast<double>(x.size());
}

std::vector<Vec3> position_loss_grad(const std::vector<Vec3>& x, const std::vector<Vec3>& target) {
  if (x.size() != target.size()) throw ValidationError("position_loss_grad: size mismatch");
  std::vector<Vec3> g(x.size());
  const double scale = x.empty() ? 0.0 : 2.0 / static_cast<double>(x.size());
  for (std::size_t p = 0; p < x.size(); ++p) g[p] = scale * (x[p] - target[p]);
  return g;
}

// ---------------------------------------------------------------------------
// Gradient check

double trajectory_loss(const GradProblem& prob) {
  MaterialPoints s = prob.initial;
  mpm::GridState grid(prob.cfg);
  double t = 0.0, loss = 0.0;
  for (int f = 0; f < prob.frames; ++f) {
    t = mpm::simulate_step(s, grid, prob.cfg, prob.cfg.substeps, t);
    loss += position_loss(s.x, prob.targets.at(static_cast<std::size_t>(f)));
  }
  return loss;
}

namespace {

// Loss with per-frame truncation: frame f starts from the unperturbed
// recorded entry state but uses the perturbed parameters.
double truncated_loss(const GradProblem& prob, const Tape& tape, const MaterialPoints& params) {
  mpm::GridState grid(prob.cfg);
  double loss = 0.0;
  for (int f = 0; f < prob.frames; ++f) {
    MaterialPoints s = tape.frame_entry(static_cast<std::size_t>(f));
    s.youngs = params.youngs;
    const double t0 = tape.frame(static_cast<std::size_t>(f)).checkpoints.front().time;
    mpm::simulate_step(s, grid, prob.cfg, prob.cfg.substeps, t0);
    loss += position_loss(s.x, prob.targets.at(static_cast<std::size_t>(f)));
  }
  return loss;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.6e", v);
  return buf;
}

}  // namespace

GradReport gradcheck(const GradProblem& prob, GradMode mode, double significance, double step_scale,
                     std::size_t max_params) {
  GradReport report;
  const std::size_t np = prob.initial.size();
  try {
    Tape tape(prob.cfg);
    MaterialPoints s = prob.initial;
    std::vector<std::vector<Vec3>> adj;
    for (int f = 0; f < prob.frames; ++f) {
      tape.record_frame(s);
      adj.push_back(position_loss_grad(s.x, prob.targets.at(static_cast<std::size_t>(f))));
    }
    const bool truncate = mode == GradMode::kTruncated;
    const SequenceGradient g = backward_sequence(tape, adj, truncate);

    struct Param {
      std::string name;
      double* slot;
      double analytic;
    };
    GradProblem work = prob;
    std::vector<Param> params;
    if (mode == GradMode::kVelocity || mode == GradMode::kTruncated) {
      for (std::size_t p = 0; p < np; ++p)
        for (int a = 0; a < 3; ++a)
          params.push_back({"v0[" + std::to_string(p) + "][" + std::to_string(a) + "]", &work.initial.v[p][a],
                            g.initial.v[p][a]});
    }
    if (mode == GradMode::kMaterial || mode == GradMode::kTruncated) {
      for (std::size_t p = 0; p < np; ++p)
        params.push_back({"E[" + std::to_string(p) + "]", &work.initial.youngs[p], g.grad_youngs[p]});
    }
    if (params.size() > max_params) {
      // Deterministic even subsample.
      std::vector<Param> picked;
      const double stride = static_cast<double>(params.size()) / static_cast<double>(max_params);
      for (std::size_t i = 0; i < max_params; ++i) picked.push_back(params[static_cast<std::size_t>(i * stride)]);
      params = std::move(picked);
    }

    double max_abs = 0.0;
    for (const Param& p : params) {
      if (!std::isfinite(p.analytic)) {
        report.finite = false;
        report.failure = "non-finite analytic gradient for " + p.name;
        return report;
      }
      max_abs = std::max(max_abs, std::abs(p.analytic));
    }

    std::vector<double> errors;
    for (const Param& p : params) {
      GradEntry e;
      e.name = p.name;
      e.analytic = p.analytic;
      const double theta = *p.slot;
      const double h = step_scale * std::max(1.0, std::abs(theta));
      const bool is_velocity = p.name[0] == 'v';
      double lp, lm;
      if (truncate && is_velocity) {
        // Under truncation v0 only reaches frame 0; the oracle is the
        // frame-0 loss alone.
        GradProblem one = work;
        one.frames = 1;
        *p.slot = theta + h;
        one.initial = work.initial;
        lp = trajectory_loss(one);
        *p.slot = theta - h;
        one.initial = work.initial;
        lm = trajectory_loss(one);
      } else if (truncate) {
        *p.slot = theta + h;
        lp = truncated_loss(work, tape, work.initial);
        *p.slot = theta - h;
        lm = truncated_loss(work, tape, work.initial);
      } else {
        *p.slot = theta + h;
        lp = trajectory_loss(work);
        *p.slot = theta - h;
        lm = trajectory_loss(work);
      }
      *p.slot = theta;
      e.numeric = (lp - lm) / (2.0 * h);
      if (!std::isfinite(e.numeric)) {
        report.finite = false;
        report.failure = "non-finite finite-difference value for " + p.name;
        return report;
      }
      // Truncated v0 gradients are checked against zero only beyond frame 0,
      // which the frame-0 oracle above already accounts for.
      const double denom = std::max({std::abs(e.analytic), std::abs(e.numeric), 1e-300});
      e.rel_error = std::abs(e.analytic - e.numeric) / denom;
      e.checked = std::abs(e.analytic) >= significance * max_abs && max_abs > 0.0;
      if (e.checked) errors.push_back(e.rel_error);
      report.entries.push_back(std::move(e));
    }
    if (!errors.empty()) {
      report.max_rel_error = *std::max_element(errors.begin(), errors.end());
      std::nth_element(errors.begin(), errors.begin() + errors.size() / 2, errors.end());
      report.median_rel_error = errors[errors.size() / 2];
    }
  } catch (const std::exception& ex) {
    report.finite = false;
    report.failure = ex.what();
  }
  return report;
}

std::string GradReport::to_text() const {
  std::string out;
  std::size_t checked = 0;
  for (const GradEntry& e : entries) checked += e.checked;
  out += "parameters      " + std::to_string(entries.size()) + "\n";
  out += "checked         " + std::to_string(checked) + "\n";
  out += "max_rel_error   " + fmt(max_rel_error) + "\n";
  out += "median_rel_error " + fmt(median_rel_error) + "\n";
  out += std::string("status          ") + (finite ? "ok" : "FAILED: " + failure) + "\n";
  out += "name analytic numeric rel_error checked\n";
  for (const GradEntry& e : entries)
    out += e.name + " " + fmt(e.analytic) + " " + fmt(e.numeric) + " " + fmt(e.rel_error) + " " +
           (e.checked ? "1" : "0") + "\n";
  return out;
}

std::string GradReport::to_json() const {
  nlohmann::json j;
  j["max_rel_error"] = max_rel_error;
  j["median_rel_error"] = median_rel_error;
  j["finite"] = finite;
  j["failure"] = failure;
  auto& arr = j["entries"] = nlohmann::json::array();
  for (const GradEntry& e : entries)
    arr.push_back({{"name", e.name},
                   {"analytic", e.analytic},
                   {"numeric", e.numeric},
                   {"rel_error", e.rel_error},
                   {"checked", e.checked}});
  return j.dump(2);
}

GradProblem make_beam_problem(int nx, int frames, int substeps, bool free_fall, std::uint64_t seed) {
  GradProblem prob;
  SimConfig& cfg = prob.cfg;
  cfg.grid_resolution = 32;
  cfg.dt = 1e-4;
  cfg.substeps = substeps;
  cfg.fps = 1.0 / (cfg.dt * substeps);
  cfg.density = 1.0;
  cfg.youngs_min = 1e2;
  cfg.youngs_max = 1e4;
  cfg.seed = seed;
  prob.frames = frames;

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  MaterialPoints& pts = prob.initial;
  const double dx = cfg.dx();
  if (free_fall) {
    // Isolated particles: no two share a grid stencil, so the dynamics are
    // linear in the initial velocity.
    cfg.gravity = {0.0, -9.8, 0.0};
    for (int i = 0; i < nx; ++i) pts.x.push_back({0.25 + 0.25 * (i % 3), 0.6, 0.25 + 0.25 * ((i / 3) % 3)});
  } else {
    const double h = 0.5 * dx;
    const double x0 = 0.5 - 0.5 * nx * h;
    for (int i = 0; i < nx; ++i)
      for (int j = 0; j < 2; ++j)
        for (int k = 0; k < 2; ++k)
          pts.x.push_back({x0 + (i + 0.5) * h + 0.1 * h * u(rng), 0.5 + (j + 0.5) * h + 0.1 * h * u(rng),
                           0.5 + (k + 0.5) * h + 0.1 * h * u(rng)});
  }
  const std::size_t n = pts.x.size();
  pts.resize(n);
  compute_mass_volume(pts, cfg);
  for (std::size_t p = 0; p < n; ++p) {
    pts.youngs[p] = 1e3 * (1.0 + 0.5 * u(rng));
    pts.v[p] = {0.3 * u(rng), 0.3 * u(rng), 0.3 * u(rng)};
  }

  // Targets: the same system with different parameters.
  MaterialPoints truth = pts;
  for (std::size_t p = 0; p < n; ++p) {
    truth.youngs[p] = 2e3 * (1.0 + 0.3 * u(rng));
    truth.v[p] = pts.v[p] + Vec3{0.2 * u(rng), 0.2 * u(rng), 0.2 * u(rng)};
  }
  mpm::GridState grid(cfg);
  double t = 0.0;
  for (int f = 0; f < frames; ++f) {
    t = mpm::simulate_step(truth, grid, cfg, cfg.substeps, t);
    prob.targets.push_back(truth.x);
  }
  return prob;
}

}  // namespace splatmpm::grad
