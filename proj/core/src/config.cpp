#include "splatmpm/config.hpp"

#include <cmath>
#include <fstream>
#include <initializer_list>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>

#include "splatmpm/errors.hpp"

namespace splatmpm {

using nlohmann::json;

double YoungsSpec::at(const Vec3& x) const {
  switch (kind) {
    case Kind::kConstant:
      return value;
    case Kind::kSplit:
      return x[static_cast<std::size_t>(axis)] < threshold ? value : above;
    case Kind::kParticles:
      break;
  }
  throw std::logic_error("YoungsSpec::at: per-particle values come from the particle file");
}

Vec3 VelocitySpec::at(const Vec3& x) const {
  switch (kind) {
    case Kind::kZero:
      return {};
    case Kind::kUniform:
      return value;
    case Kind::kBox:
      return region.contains(x) ? value : Vec3{};
    case Kind::kRotation:
      return cross(value, x - center);
  }
  return {};
}

std::vector<std::string> RunConfig::validate() const {
  std::vector<std::string> warnings = sim.validate();
  if (frames < 1) throw ValidationError("config: frames must be >= 1");
  if (checkpoint_interval < 1) throw ValidationError("config: checkpoint_interval must be >= 1");
  for (const auto& c : cameras) c.validate();
  const OptimizerConfig& o = optimizer;
  if (o.iters_stage1 < 0 || o.iters_stage2 < 0) throw ValidationError("config: iteration counts must be >= 0");
  if (!(o.lr_velocity > 0) || !(o.lr_planes > 0) || !(o.lr_mlp > 0))
    throw ValidationError("config: learning rates must be positive");
  if (!(o.tv_weight >= 0)) throw ValidationError("config: tv_weight must be >= 0");
  if (!(o.loss_lambda >= 0 && o.loss_lambda <= 1)) throw ValidationError("config: loss_lambda must be in [0, 1]");
  if (o.material_resolution < 2 || o.velocity_resolution < 2)
    throw ValidationError("config: field resolutions must be >= 2");
  if (o.features < 1 || o.hidden < 1) throw ValidationError("config: features and hidden must be >= 1");
  if (!(o.v_scale > 0)) throw ValidationError("config: v_scale must be positive");
  if (o.youngs_init != 0.0 && !(o.youngs_init > sim.youngs_min && o.youngs_init < sim.youngs_max))
    throw ValidationError("config: youngs_init must lie inside (youngs_min, youngs_max)");
  if (o.frames_per_batch < 0 || o.snapshot_every < 0)
    throw ValidationError("config: frames_per_batch and snapshot_every must be >= 0");
  const YoungsSpec& y = ground_truth.youngs;
  if (y.kind != YoungsSpec::Kind::kParticles) {
    if (!(y.value > 0) || (y.kind == YoungsSpec::Kind::kSplit && !(y.above > 0)))
      throw ValidationError("config: ground-truth youngs must be positive");
    if (y.axis < 0 || y.axis > 2) throw ValidationError("config: ground-truth split axis must be 0, 1 or 2");
  }
  return warnings;
}

namespace {

[[noreturn]] void fail(const std::string& where, const std::string& what) {
  throw ValidationError("config: " + where + ": " + what);
}

void check_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) fail(where, "expected an object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!ok.count(it.key())) fail(where, "unknown key '" + it.key() + "'");
}

double get_number(const json& j, const std::string& key, const std::string& where) {
  const json& v = j.at(key);
  if (!v.is_number()) fail(where + "." + key, "expected a number");
  const double d = v.get<double>();
  if (!std::isfinite(d)) fail(where + "." + key, "non-finite value");
  return d;
}

std::int64_t get_int(const json& j, const std::string& key, const std::string& where) {
  const json& v = j.at(key);
  if (!v.is_number_integer()) fail(where + "." + key, "expected an integer");
  return v.get<std::int64_t>();
}

bool get_bool(const json& j, const std::string& key, const std::string& where) {
  const json& v = j.at(key);
  if (!v.is_boolean()) fail(where + "." + key, "expected a boolean");
  return v.get<bool>();
}

std::string get_string(const json& j, const std::string& key, const std::string& where) {
  const json& v = j.at(key);
  if (!v.is_string()) fail(where + "." + key, "expected a string");
  return v.get<std::string>();
}

Vec3 get_vec3(const json& j, const std::string& key, const std::string& where) {
  const json& v = j.at(key);
  if (!v.is_array() || v.size() != 3) fail(where + "." + key, "expected an array of 3 numbers");
  Vec3 r;
  for (std::size_t i = 0; i < 3; ++i) {
    if (!v[i].is_number()) fail(where + "." + key, "expected an array of 3 numbers");
    r[i] = v[i].get<double>();
    if (!std::isfinite(r[i])) fail(where + "." + key, "non-finite value");
  }
  return r;
}

template <class T, class Get>
void opt(const json& j, const char* key, T& out, Get get, const std::string& where) {
  if (j.contains(key)) out = static_cast<T>(get(j, key, where));
}

Box parse_box(const json& j, const std::string& where) {
  check_keys(j, where, {"lo", "hi"});
  if (!j.contains("lo") || !j.contains("hi")) fail(where, "box needs 'lo' and 'hi'");
  return {get_vec3(j, "lo", where), get_vec3(j, "hi", where)};
}

splat::Camera parse_camera(const json& j, const std::string& where) {
  if (!j.is_object()) fail(where, "expected an object");
  const bool look = j.contains("eye");
  splat::Camera c;
  if (look) {
    check_keys(j, where, {"eye", "target", "up", "fov_deg", "width", "height"});
    for (const char* k : {"target", "fov_deg", "width", "height"})
      if (!j.contains(k)) fail(where, std::string("missing key '") + k + "'");
    const Vec3 up = j.contains("up") ? get_vec3(j, "up", where) : Vec3{0, 1, 0};
    c = splat::Camera::look_at(get_vec3(j, "eye", where), get_vec3(j, "target", where), up,
                               get_number(j, "fov_deg", where), static_cast<int>(get_int(j, "width", where)),
                               static_cast<int>(get_int(j, "height", where)));
  } else {
    check_keys(j, where, {"fx", "fy", "cx", "cy", "width", "height", "rotation", "translation"});
    for (const char* k : {"fx", "fy", "cx", "cy", "width", "height"})
      if (!j.contains(k)) fail(where, std::string("missing key '") + k + "'");
    c.fx = get_number(j, "fx", where);
    c.fy = get_number(j, "fy", where);
    c.cx = get_number(j, "cx", where);
    c.cy = get_number(j, "cy", where);
    c.width = static_cast<int>(get_int(j, "width", where));
    c.height = static_cast<int>(get_int(j, "height", where));
    if (j.contains("rotation")) {
      const json& r = j.at("rotation");
      if (!r.is_array() || r.size() != 3) fail(where + ".rotation", "expected 3 rows");
      for (std::size_t i = 0; i < 3; ++i) {
        json row = {{"row", r[i]}};
        const Vec3 v = get_vec3(row, "row", where + ".rotation");
        for (std::size_t k = 0; k < 3; ++k) c.R(i, k) = v[k];
      }
    }
    if (j.contains("translation")) c.t = get_vec3(j, "translation", where);
  }
  try {
    c.validate();
  } catch (const ValidationError& e) {
    fail(where, e.what());
  }
  return c;
}

json camera_json(const splat::Camera& c) {
  json rows = json::array();
  for (std::size_t i = 0; i < 3; ++i) rows.push_back({c.R(i, 0), c.R(i, 1), c.R(i, 2)});
  return {{"fx", c.fx},         {"fy", c.fy},   {"cx", c.cx},       {"cy", c.cy},
          {"width", c.width},   {"height", c.height}, {"rotation", rows}, {"translation", {c.t.x, c.t.y, c.t.z}}};
}

json vec_json(const Vec3& v) { return json::array({v.x, v.y, v.z}); }

void parse_optimizer(const json& j, OptimizerConfig& o) {
  const std::string w = "optimizer";
  check_keys(j, w,
             {"iters_stage1", "iters_stage2", "lr_velocity", "lr_planes", "lr_mlp", "tv_weight", "loss_lambda", "loss",
              "frames_per_batch", "material_resolution", "velocity_resolution", "features", "hidden", "v_scale",
              "youngs_init", "snapshot_every"});
  opt(j, "iters_stage1", o.iters_stage1, get_int, w);
  opt(j, "iters_stage2", o.iters_stage2, get_int, w);
  opt(j, "lr_velocity", o.lr_velocity, get_number, w);
  opt(j, "lr_planes", o.lr_planes, get_number, w);
  opt(j, "lr_mlp", o.lr_mlp, get_number, w);
  opt(j, "tv_weight", o.tv_weight, get_number, w);
  opt(j, "loss_lambda", o.loss_lambda, get_number, w);
  if (j.contains("loss")) {
    const std::string l = get_string(j, "loss", w);
    if (l == "image")
      o.position_loss = false;
    else if (l == "position")
      o.position_loss = true;
    else
      fail(w + ".loss", "expected 'image' or 'position'");
  }
  opt(j, "frames_per_batch", o.frames_per_batch, get_int, w);
  opt(j, "material_resolution", o.material_resolution, get_int, w);
  opt(j, "velocity_resolution", o.velocity_resolution, get_int, w);
  opt(j, "features", o.features, get_int, w);
  opt(j, "hidden", o.hidden, get_int, w);
  opt(j, "v_scale", o.v_scale, get_number, w);
  opt(j, "youngs_init", o.youngs_init, get_number, w);
  opt(j, "snapshot_every", o.snapshot_every, get_int, w);
}

void parse_ground_truth(const json& j, GroundTruth& g) {
  check_keys(j, "ground_truth", {"youngs", "velocity"});
  if (j.contains("youngs")) {
    const std::string w = "ground_truth.youngs";
    const json& y = j.at("youngs");
    check_keys(y, w, {"type", "value", "above", "axis", "threshold"});
    const std::string type = y.contains("type") ? get_string(y, "type", w) : "constant";
    if (type == "constant") {
      g.youngs.kind = YoungsSpec::Kind::kConstant;
    } else if (type == "split") {
      g.youngs.kind = YoungsSpec::Kind::kSplit;
    } else if (type == "particles") {
      g.youngs.kind = YoungsSpec::Kind::kParticles;
    } else {
      fail(w + ".type", "expected 'constant', 'split' or 'particles'");
    }
    opt(y, "value", g.youngs.value, get_number, w);
    opt(y, "above", g.youngs.above, get_number, w);
    opt(y, "axis", g.youngs.axis, get_int, w);
    opt(y, "threshold", g.youngs.threshold, get_number, w);
  }
  if (j.contains("velocity")) {
    const std::string w = "ground_truth.velocity";
    const json& v = j.at("velocity");
    check_keys(v, w, {"type", "value", "region", "center"});
    const std::string type = v.contains("type") ? get_string(v, "type", w) : "zero";
    if (type == "zero") {
      g.velocity.kind = VelocitySpec::Kind::kZero;
    } else if (type == "uniform") {
      g.velocity.kind = VelocitySpec::Kind::kUniform;
    } else if (type == "box") {
      g.velocity.kind = VelocitySpec::Kind::kBox;
      if (!v.contains("region")) fail(w, "box velocity needs 'region'");
      g.velocity.region = parse_box(v.at("region"), w + ".region");
    } else if (type == "rotation") {
      g.velocity.kind = VelocitySpec::Kind::kRotation;
    } else {
      fail(w + ".type", "expected 'zero', 'uniform', 'box' or 'rotation'");
    }
    if (v.contains("value")) g.velocity.value = get_vec3(v, "value", w);
    if (v.contains("center")) g.velocity.center = get_vec3(v, "center", w);
  }
}

}  // namespace

RunConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ValidationError(std::string("config: malformed JSON: ") + e.what());
  }
  const std::string w = "config";
  check_keys(j, w,
             {"seed", "grid_resolution", "dt", "substeps", "fps", "frames", "density", "poisson", "youngs_min",
              "youngs_max", "gravity", "forces", "dirichlet", "threads", "deterministic", "checkpoint_interval",
              "driving_count", "camera", "cameras", "background", "background_image", "optimizer", "ground_truth"});
  if (!j.contains("seed")) throw ValidationError("config: missing mandatory key 'seed'");
  RunConfig c;
  const json& seed = j.at("seed");
  if (!seed.is_number_unsigned() && !(seed.is_number_integer() && seed.get<std::int64_t>() >= 0))
    fail("seed", "expected a non-negative integer");
  c.sim.seed = seed.get<std::uint64_t>();
  SimConfig& s = c.sim;
  opt(j, "grid_resolution", s.grid_resolution, get_int, w);
  opt(j, "dt", s.dt, get_number, w);
  opt(j, "substeps", s.substeps, get_int, w);
  opt(j, "fps", s.fps, get_number, w);
  opt(j, "frames", c.frames, get_int, w);
  opt(j, "density", s.density, get_number, w);
  opt(j, "poisson", s.poisson, get_number, w);
  opt(j, "youngs_min", s.youngs_min, get_number, w);
  opt(j, "youngs_max", s.youngs_max, get_number, w);
  if (j.contains("gravity")) s.gravity = get_vec3(j, "gravity", w);
  if (j.contains("forces")) {
    if (!j.at("forces").is_array()) fail("forces", "expected an array");
    for (const json& f : j.at("forces")) {
      const std::string fw = "forces[]";
      check_keys(f, fw, {"lo", "hi", "acceleration", "t_begin", "t_end"});
      ForceBox fb;
      fb.region = {get_vec3(f, "lo", fw), get_vec3(f, "hi", fw)};
      fb.acceleration = get_vec3(f, "acceleration", fw);
      opt(f, "t_begin", fb.t_begin, get_number, fw);
      opt(f, "t_end", fb.t_end, get_number, fw);
      s.forces.push_back(fb);
    }
  }
  if (j.contains("dirichlet")) {
    if (!j.at("dirichlet").is_array()) fail("dirichlet", "expected an array");
    for (const json& b : j.at("dirichlet")) s.dirichlet.push_back(parse_box(b, "dirichlet[]"));
  }
  opt(j, "threads", s.threads, get_int, w);
  opt(j, "deterministic", s.deterministic, get_bool, w);
  opt(j, "checkpoint_interval", c.checkpoint_interval, get_int, w);
  if (j.contains("driving_count")) {
    const std::int64_t q = get_int(j, "driving_count", w);
    if (q < 0) fail("driving_count", "must be >= 0");
    c.driving_count = static_cast<std::size_t>(q);
  }
  if (j.contains("camera") && j.contains("cameras")) fail(w, "give either 'camera' or 'cameras'");
  if (j.contains("camera")) c.cameras.push_back(parse_camera(j.at("camera"), "camera"));
  if (j.contains("cameras")) {
    if (!j.at("cameras").is_array()) fail("cameras", "expected an array");
    for (const json& cam : j.at("cameras")) c.cameras.push_back(parse_camera(cam, "cameras[]"));
  }
  if (j.contains("background")) c.background = get_vec3(j, "background", w);
  if (j.contains("background_image")) c.background_image = get_string(j, "background_image", w);
  if (j.contains("optimizer")) parse_optimizer(j.at("optimizer"), c.optimizer);
  if (j.contains("ground_truth")) parse_ground_truth(j.at("ground_truth"), c.ground_truth);
  c.validate();
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string config_to_json(const RunConfig& c) {
  const SimConfig& s = c.sim;
  json j;
  j["seed"] = s.seed;
  j["grid_resolution"] = s.grid_resolution;
  j["dt"] = s.dt;
  j["substeps"] = s.substeps;
  j["fps"] = s.fps;
  j["frames"] = c.frames;
  j["density"] = s.density;
  j["poisson"] = s.poisson;
  j["youngs_min"] = s.youngs_min;
  j["youngs_max"] = s.youngs_max;
  j["gravity"] = vec_json(s.gravity);
  j["forces"] = json::array();
  for (const ForceBox& f : s.forces)
    j["forces"].push_back({{"lo", vec_json(f.region.lo)},
                           {"hi", vec_json(f.region.hi)},
                           {"acceleration", vec_json(f.acceleration)},
                           {"t_begin", f.t_begin},
                           {"t_end", f.t_end}});
  j["dirichlet"] = json::array();
  for (const Box& b : s.dirichlet) j["dirichlet"].push_back({{"lo", vec_json(b.lo)}, {"hi", vec_json(b.hi)}});
  j["threads"] = s.threads;
  j["deterministic"] = s.deterministic;
  j["checkpoint_interval"] = c.checkpoint_interval;
  j["driving_count"] = c.driving_count;
  j["cameras"] = json::array();
  for (const auto& cam : c.cameras) j["cameras"].push_back(camera_json(cam));
  j["background"] = vec_json(c.background);
  if (!c.background_image.empty()) j["background_image"] = c.background_image;
  const OptimizerConfig& o = c.optimizer;
  j["optimizer"] = {{"iters_stage1", o.iters_stage1},
                    {"iters_stage2", o.iters_stage2},
                    {"lr_velocity", o.lr_velocity},
                    {"lr_planes", o.lr_planes},
                    {"lr_mlp", o.lr_mlp},
                    {"tv_weight", o.tv_weight},
                    {"loss_lambda", o.loss_lambda},
                    {"loss", o.position_loss ? "position" : "image"},
                    {"frames_per_batch", o.frames_per_batch},
                    {"material_resolution", o.material_resolution},
                    {"velocity_resolution", o.velocity_resolution},
                    {"features", o.features},
                    {"hidden", o.hidden},
                    {"v_scale", o.v_scale},
                    {"youngs_init", o.youngs_init},
                    {"snapshot_every", o.snapshot_every}};
  const YoungsSpec& y = c.ground_truth.youngs;
  const char* ykind = y.kind == YoungsSpec::Kind::kConstant ? "constant"
                      : y.kind == YoungsSpec::Kind::kSplit  ? "split"
                                                            : "particles";
  const VelocitySpec& v = c.ground_truth.velocity;
  const char* vkind = v.kind == VelocitySpec::Kind::kZero      ? "zero"
                      : v.kind == VelocitySpec::Kind::kUniform ? "uniform"
                      : v.kind == VelocitySpec::Kind::kBox     ? "box"
                                                               : "rotation";
  json vel = {{"type", vkind}, {"value", vec_json(v.value)}, {"center", vec_json(v.center)}};
  if (v.kind == VelocitySpec::Kind::kBox) vel["region"] = {{"lo", vec_json(v.region.lo)}, {"hi", vec_json(v.region.hi)}};
  j["ground_truth"] = {
      {"youngs", {{"type", ykind}, {"value", y.value}, {"above", y.above}, {"axis", y.axis}, {"threshold", y.threshold}}},
      {"velocity", vel}};
  return j.dump(2) + "\n";
}

}  // namespace splatmpm
