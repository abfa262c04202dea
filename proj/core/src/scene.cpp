#include "splatmpm/scene.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <unordered_map>

#include "splatmpm/errors.hpp"

namespace splatmpm {

namespace {

constexpr double kShC0 = 0.28209479177387814;
constexpr double kDefaultLogScale = -4.605170185988091;  // log(0.01)

std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

}  // namespace

void MaterialPoints::resize(std::size_t n) {
  x.resize(n);
  v.resize(n);
  F.resize(n, Mat3::identity());
  C.resize(n);
  mass.resize(n, 0.0);
  volume.resize(n, 0.0);
  youngs.resize(n, 0.0);
}

void SplatAttributes::resize(std::size_t n) {
  opacity.resize(n, 1.0);
  rest_rotation.resize(n, Mat3::identity());
  const double s2 = std::exp(2.0 * kDefaultLogScale);
  rest_covariance.resize(n, Mat3::diag(s2, s2, s2));
  color.resize(n, Vec3{0.5, 0.5, 0.5});
}

void ParticleSet::resize(std::size_t n) {
  points.resize(n);
  splats.resize(n);
}

void ParticleSet::push_back(const Vec3& position) {
  resize(size() + 1);
  points.x.back() = position;
}

ParticleSet make_block(const Box& box, int nx, int ny, int nz, double jitter, std::uint64_t seed, int stripe) {
  if (nx < 1 || ny < 1 || nz < 1) throw ValidationError("make_block: counts must be >= 1");
  if (stripe < 1) throw ValidationError("make_block: stripe must be >= 1");
  const Vec3 ext = box.hi - box.lo;
  const Vec3 h{ext.x / nx, ext.y / ny, ext.z / nz};
  const double spacing = std::min({h.x, h.y, h.z});
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-jitter, jitter);
  const Vec3 palette[4] = {{0.85, 0.25, 0.2}, {0.2, 0.45, 0.85}, {0.95, 0.8, 0.2}, {0.15, 0.6, 0.3}};
  ParticleSet s;
  for (int k = 0; k < nz; ++k)
    for (int j = 0; j < ny; ++j)
      for (int i = 0; i < nx; ++i) {
        s.push_back(box.lo + Vec3{(i + 0.5 + u(rng)) * h.x, (j + 0.5 + u(rng)) * h.y, (k + 0.5 + u(rng)) * h.z});
        const double sigma = 0.6 * spacing;
        s.splats.rest_covariance.back() = Mat3::diag(sigma * sigma, sigma * sigma, sigma * sigma);
        s.splats.opacity.back() = 0.9;
        s.splats.color.back() = palette[((i / stripe) % 2) + 2 * ((j / stripe) % 2)];
      }
  return s;
}

std::vector<std::string> SimConfig::validate() const {
  if (!(dt > 0.0)) throw ValidationError("config: dt must be > 0");
  if (substeps < 1) throw ValidationError("config: substeps must be >= 1");
  if (grid_resolution < 4) throw ValidationError("config: grid_resolution must be >= 4");
  if (!(poisson >= 0.0 && poisson < 0.5)) throw ValidationError("config: poisson_ratio must lie in [0, 0.5)");
  if (!(youngs_min > 0.0) || !(youngs_min < youngs_max))
    throw ValidationError("config: need 0 < youngs_min < youngs_max");
  if (!(density > 0.0)) throw ValidationError("config: density must be > 0");
  if (!(fps > 0.0)) throw ValidationError("config: fps must be > 0");
  if (threads < 1) throw ValidationError("config: threads must be >= 1");
  if (!is_finite(gravity)) throw ValidationError("config: gravity must be finite");

  std::vector<std::string> warnings;
  const double cfl = 0.5 * dx() / std::sqrt(youngs_max / density);
  if (dt > cfl) {
    warnings.push_back("dt = " + format_number(dt) + " exceeds the elastic CFL guard " + format_number(cfl) +
                       " for youngs_max; the simulation may be unstable");
  }
  const double interval = 1.0 / fps;
  if (std::abs(frame_dt() - interval) > 0.01 * interval) {
    warnings.push_back("substeps * dt = " + format_number(frame_dt()) + " s differs from 1 / fps = " +
                       format_number(interval) + " s; frame spacing follows substeps * dt");
  }
  return warnings;
}

Frame::Frame(int w, int h, const Vec3& fill) : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3) {
  for (std::size_t i = 0; i < rgb.size(); i += 3) {
    rgb[i] = fill.x;
    rgb[i + 1] = fill.y;
    rgb[i + 2] = fill.z;
  }
}

Vec3 Frame::pixel(int px, int py) const {
  const std::size_t i = (static_cast<std::size_t>(py) * width + px) * 3;
  return {rgb[i], rgb[i + 1], rgb[i + 2]};
}

void Frame::set_pixel(int px, int py, const Vec3& c) {
  const std::size_t i = (static_cast<std::size_t>(py) * width + px) * 3;
  rgb[i] = c.x;
  rgb[i + 1] = c.y;
  rgb[i + 2] = c.z;
}

// ---------------------------------------------------------------------------
// PLY

ParticleSet parse_particles(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  std::size_t binary_vertex = 0;
  bool in_binary = false;
  auto fail = [&](const std::string& what) -> ValidationError {
    if (in_binary) return ValidationError("ply vertex " + std::to_string(binary_vertex) + ": " + what);
    return ValidationError("ply line " + std::to_string(line_no) + ": " + what);
  };

  if (!std::getline(in, line)) throw ValidationError("ply: empty file");
  ++line_no;
  if (line != "ply" && line != "ply\r") throw fail("missing 'ply' magic");

  // Per element: name, count, property names.
  struct Element {
    std::string name;
    std::size_t count = 0;
    std::vector<std::string> props;
    std::vector<int> sizes;   // bytes per property
    std::vector<char> kinds;  // 'i' signed, 'u' unsigned, 'f' float
    std::size_t row_bytes() const {
      std::size_t n = 0;
      for (int b : sizes) n += static_cast<std::size_t>(b);
      return n;
    }
  };
  enum class PlyFormat { kNone, kAscii, kLittle, kBig };
  std::vector<Element> elements;
  PlyFormat format = PlyFormat::kNone;
  bool header_done = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key.empty() || key == "comment" || key == "obj_info") continue;
    if (key == "format") {
      std::string fmt;
      ls >> fmt;
      if (fmt == "ascii") format = PlyFormat::kAscii;
      else if (fmt == "binary_little_endian") format = PlyFormat::kLittle;
      else if (fmt == "binary_big_endian") format = PlyFormat::kBig;
      else throw fail("unknown format '" + fmt + "'");
    } else if (key == "element") {
      Element e;
      long long count = -1;
      ls >> e.name;
      if (!(ls >> count) || count < 0) throw fail("element '" + e.name + "' is missing its count: '" + line + "'");
      e.count = static_cast<std::size_t>(count);
      elements.push_back(std::move(e));
    } else if (key == "property") {
      if (elements.empty()) throw fail("property before any element");
      std::string type, name;
      ls >> type;
      if (type == "list") throw fail("list properties are not supported");
      ls >> name;
      if (name.empty()) throw fail("property without a name");
      static const std::unordered_map<std::string, std::pair<char, int>> kTypes{
          {"char", {'i', 1}},   {"int8", {'i', 1}},    {"uchar", {'u', 1}},  {"uint8", {'u', 1}},
          {"short", {'i', 2}},  {"int16", {'i', 2}},   {"ushort", {'u', 2}}, {"uint16", {'u', 2}},
          {"int", {'i', 4}},    {"int32", {'i', 4}},   {"uint", {'u', 4}},   {"uint32", {'u', 4}},
          {"float", {'f', 4}},  {"float32", {'f', 4}}, {"double", {'f', 8}}, {"float64", {'f', 8}}};
      const auto t = kTypes.find(type);
      if (t == kTypes.end()) throw fail("unknown property type '" + type + "'");
      elements.back().props.push_back(name);
      elements.back().kinds.push_back(t->second.first);
      elements.back().sizes.push_back(t->second.second);
    } else if (key == "end_header") {
      header_done = true;
      break;
    } else {
      throw fail("unexpected header line '" + line + "'");
    }
  }
  if (!header_done) throw ValidationError("ply: missing end_header");
  if (format == PlyFormat::kNone) throw ValidationError("ply: missing format line");

  auto vit = std::find_if(elements.begin(), elements.end(), [](const Element& e) { return e.name == "vertex"; });
  if (vit == elements.end()) throw ValidationError("ply: no vertex element");

  std::unordered_map<std::string, int> col;
  for (std::size_t i = 0; i < vit->props.size(); ++i) col[vit->props[i]] = static_cast<int>(i);
  for (const char* req : {"x", "y", "z"})
    if (!col.count(req)) throw ValidationError(std::string("ply: vertex element lacks property '") + req + "'");
  auto has = [&](std::initializer_list<const char*> names) {
    for (const char* n : names)
      if (!col.count(n)) return false;
    return true;
  };
  const bool has_opacity = has({"opacity"});
  const bool has_scale = has({"scale_0", "scale_1", "scale_2"});
  const bool has_rot = has({"rot_0", "rot_1", "rot_2", "rot_3"});
  const bool has_rgb = has({"red", "green", "blue"});
  const bool has_dc = has({"f_dc_0", "f_dc_1", "f_dc_2"});
  const bool has_youngs = has({"youngs"});

  // Skip rows of elements preceding the vertex element.
  std::size_t offset = static_cast<std::size_t>(in.tellg());
  for (auto it = elements.begin(); it != vit; ++it) {
    if (format != PlyFormat::kAscii) {
      offset += it->count * it->row_bytes();
      if (offset > text.size()) throw ValidationError("ply: truncated data in element '" + it->name + "'");
      continue;
    }
    for (std::size_t r = 0; r < it->count; ++r) {
      if (!std::getline(in, line)) throw ValidationError("ply: truncated data in element '" + it->name + "'");
      ++line_no;
    }
  }
  const std::size_t vertex_bytes = vit->row_bytes();
  if (format != PlyFormat::kAscii && text.size() - offset < vit->count * vertex_bytes)
    throw ValidationError("ply: truncated binary vertex data: expected " + std::to_string(vit->count) + " rows");
  const bool swap = format == PlyFormat::kBig ? std::endian::native == std::endian::little
                                              : std::endian::native == std::endian::big;
  auto read_binary = [&](std::size_t c) {
    unsigned char b[8];
    const int n = vit->sizes[c];
    std::memcpy(b, text.data() + offset, static_cast<std::size_t>(n));
    offset += static_cast<std::size_t>(n);
    if (swap) std::reverse(b, b + n);
    switch (vit->kinds[c] * 16 + n) {
      case 'i' * 16 + 1: { std::int8_t v; std::memcpy(&v, b, 1); return static_cast<double>(v); }
      case 'u' * 16 + 1: return static_cast<double>(b[0]);
      case 'i' * 16 + 2: { std::int16_t v; std::memcpy(&v, b, 2); return static_cast<double>(v); }
      case 'u' * 16 + 2: { std::uint16_t v; std::memcpy(&v, b, 2); return static_cast<double>(v); }
      case 'i' * 16 + 4: { std::int32_t v; std::memcpy(&v, b, 4); return static_cast<double>(v); }
      case 'u' * 16 + 4: { std::uint32_t v; std::memcpy(&v, b, 4); return static_cast<double>(v); }
      case 'f' * 16 + 4: { float v; std::memcpy(&v, b, 4); return static_cast<double>(v); }
      default: { double v; std::memcpy(&v, b, 8); return v; }
    }
  };

  ParticleSet set;
  set.resize(vit->count);
  set.has_youngs = has_youngs;
  std::vector<double> row(vit->props.size());
  for (std::size_t p = 0; p < vit->count; ++p) {
    if (format == PlyFormat::kAscii) {
      if (!std::getline(in, line)) {
        ++line_no;
        throw fail("truncated vertex data: expected " + std::to_string(vit->count) + " rows, got " +
                   std::to_string(p));
      }
      ++line_no;
      std::istringstream ls(line);
      for (std::size_t c = 0; c < row.size(); ++c) {
        std::string tok;
        if (!(ls >> tok)) throw fail("expected " + std::to_string(row.size()) + " values");
        char* end = nullptr;
        row[c] = std::strtod(tok.c_str(), &end);
        if (end == tok.c_str() || *end != '\0') throw fail("cannot parse '" + tok + "' as a number");
      }
    } else {
      in_binary = true;
      binary_vertex = p;
      for (std::size_t c = 0; c < row.size(); ++c) row[c] = read_binary(c);
    }
    for (std::size_t c = 0; c < row.size(); ++c)
      if (!std::isfinite(row[c])) throw fail("non-finite value for property '" + vit->props[c] + "'");
    auto get = [&](const char* name) { return row[static_cast<std::size_t>(col.at(name))]; };

    set.points.x[p] = {get("x"), get("y"), get("z")};
    if (has_opacity) {
      const double a = get("opacity");
      if (a < 0.0 || a > 1.0) throw fail("opacity " + format_number(a) + " outside [0, 1]");
      set.splats.opacity[p] = a;
    }
    Mat3 R = Mat3::identity();
    if (has_rot) {
      const Quat q{get("rot_0"), get("rot_1"), get("rot_2"), get("rot_3")};
      if (q.w == 0.0 && q.x == 0.0 && q.y == 0.0 && q.z == 0.0) throw fail("zero rotation quaternion");
      R = quat_to_mat(q);
    }
    set.splats.rest_rotation[p] = R;
    if (has_scale || has_rot) {
      Vec3 s{kDefaultLogScale, kDefaultLogScale, kDefaultLogScale};
      if (has_scale) s = {get("scale_0"), get("scale_1"), get("scale_2")};
      const Mat3 D = Mat3::diag(std::exp(2 * s.x), std::exp(2 * s.y), std::exp(2 * s.z));
      set.splats.rest_covariance[p] = R * D * R.transposed();
    }
    if (has_dc) {
      Vec3 c{0.5 + kShC0 * get("f_dc_0"), 0.5 + kShC0 * get("f_dc_1"), 0.5 + kShC0 * get("f_dc_2")};
      for (int k = 0; k < 3; ++k) c[k] = std::clamp(c[k], 0.0, 1.0);
      set.splats.color[p] = c;
    } else if (has_rgb) {
      set.splats.color[p] = {get("red") / 255.0, get("green") / 255.0, get("blue") / 255.0};
    }
    if (has_youngs) {
      const double e = get("youngs");
      if (!(e > 0.0)) throw fail("youngs must be > 0");
      set.points.youngs[p] = e;
    }
  }
  return set;
}

ParticleSet load_particles(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open particle file " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  try {
    return parse_particles(ss.str());
  } catch (const ValidationError& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

std::string format_particles(const ParticleSet& set) {
  std::string out;
  out += "ply\nformat ascii 1.0\nelement vertex " + std::to_string(set.size()) + "\n";
  for (const char* p : {"x", "y", "z", "opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2",
                        "rot_3", "f_dc_0", "f_dc_1", "f_dc_2"})
    out += std::string("property float ") + p + "\n";
  if (set.has_youngs) out += "property float youngs\n";
  out += "end_header\n";
  for (std::size_t p = 0; p < set.size(); ++p) {
    const Mat3& R = set.splats.rest_rotation[p];
    const Mat3 D = R.transposed() * set.splats.rest_covariance[p] * R;
    const Quat q = mat_to_quat(R);
    const Vec3& c = set.splats.color[p];
    const Vec3& x = set.points.x[p];
    const double vals[] = {x.x,
                           x.y,
                           x.z,
                           set.splats.opacity[p],
                           0.5 * std::log(D(0, 0)),
                           0.5 * std::log(D(1, 1)),
                           0.5 * std::log(D(2, 2)),
                           q.w,
                           q.x,
                           q.y,
                           q.z,
                           (c.x - 0.5) / kShC0,
                           (c.y - 0.5) / kShC0,
                           (c.z - 0.5) / kShC0};
    for (std::size_t i = 0; i < std::size(vals); ++i) {
      if (i) out += ' ';
      out += format_number(vals[i]);
    }
    if (set.has_youngs) out += ' ' + format_number(set.points.youngs[p]);
    out += '\n';
  }
  return out;
}

void save_particles(const ParticleSet& set, const std::filesystem::path& path) {
  write_file_atomic(path, format_particles(set));
}

// ---------------------------------------------------------------------------
// Mass and volume

void compute_mass_volume(MaterialPoints& pts, const SimConfig& cfg) {
  const int n = cfg.grid_resolution;
  if (n < 1) throw ValidationError("compute_mass_volume: grid_resolution must be >= 1");
  const double dx = 1.0 / n;
  std::vector<std::size_t> outside;
  std::vector<std::int64_t> cell(pts.size());
  std::unordered_map<std::int64_t, int> counts;
  for (std::size_t p = 0; p < pts.size(); ++p) {
    const Vec3& x = pts.x[p];
    if (!(x.x >= 0 && x.x <= 1 && x.y >= 0 && x.y <= 1 && x.z >= 0 && x.z <= 1)) {
      outside.push_back(p);
      continue;
    }
    std::int64_t id = 0;
    for (int a = 0; a < 3; ++a) id = id * n + std::min(n - 1, static_cast<int>(std::floor(x[a] / dx)));
    cell[p] = id;
    ++counts[id];
  }
  if (!outside.empty()) {
    std::string msg = "compute_mass_volume: particles outside the unit cube:";
    for (std::size_t i = 0; i < outside.size() && i < 20; ++i) msg += " " + std::to_string(outside[i]);
    if (outside.size() > 20) msg += " ... (" + std::to_string(outside.size()) + " total)";
    throw ValidationError(msg);
  }
  const double cell_volume = dx * dx * dx;
  for (std::size_t p = 0; p < pts.size(); ++p) {
    pts.volume[p] = cell_volume / counts[cell[p]];
    pts.mass[p] = cfg.density * pts.volume[p];
  }
}

void compute_mass_volume(ParticleSet& set, const SimConfig& cfg) { compute_mass_volume(set.points, cfg); }

// ---------------------------------------------------------------------------
// Frames

Frame load_frame(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open frame " + path.string());
  std::string magic;
  f >> magic;
  if (magic != "P6") {
    if (magic.size() == 2 && magic[0] == 'P') throw ValidationError(path.string() + ": unsupported PPM variant " + magic);
    throw ValidationError(path.string() + ": not a PPM file");
  }
  auto read_int = [&]() {
    // Skip whitespace and comments.
    while (true) {
      int c = f.peek();
      if (c == '#') {
        std::string skip;
        std::getline(f, skip);
      } else if (std::isspace(c)) {
        f.get();
      } else {
        break;
      }
    }
    int v = -1;
    if (!(f >> v)) throw ValidationError(path.string() + ": malformed PPM header");
    return v;
  };
  const int w = read_int(), h = read_int(), maxval = read_int();
  if (w <= 0 || h <= 0) throw ValidationError(path.string() + ": bad PPM dimensions");
  if (maxval != 255) throw ValidationError(path.string() + ": only maxval 255 is supported");
  f.get();  // single whitespace after maxval
  Frame frame(w, h);
  std::vector<unsigned char> bytes(frame.rgb.size());
  f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (f.gcount() != static_cast<std::streamsize>(bytes.size()))
    throw ValidationError(path.string() + ": truncated pixel data");
  for (std::size_t i = 0; i < bytes.size(); ++i) frame.rgb[i] = bytes[i] / 255.0;
  return frame;
}

void save_frame(const Frame& frame, const std::filesystem::path& path) {
  std::string out = "P6\n" + std::to_string(frame.width) + " " + std::to_string(frame.height) + "\n255\n";
  const std::size_t header = out.size();
  out.resize(header + frame.rgb.size());
  for (std::size_t i = 0; i < frame.rgb.size(); ++i) {
    const double v = std::clamp(frame.rgb[i], 0.0, 1.0);
    out[header + i] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0)));
  }
  write_file_atomic(path, out);
}

std::string frame_file_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "frame_%05d.ppm", index);
  return buf;
}

std::vector<Frame> load_frames(const std::filesystem::path& dir) {
  std::vector<Frame> frames;
  for (int i = 0;; ++i) {
    const auto p = dir / frame_file_name(i);
    if (!std::filesystem::exists(p)) break;
    frames.push_back(load_frame(p));
    frames.back().index = i;
  }
  if (frames.empty()) throw IoError("no frame_00000.ppm found in " + dir.string());
  for (const Frame& f : frames)
    if (f.width != frames[0].width || f.height != frames[0].height)
      throw ValidationError("frames in " + dir.string() + " differ in size");
  return frames;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  namespace fs = std::filesystem;
  static thread_local std::mt19937_64 rng(std::random_device{}());
  const fs::path tmp = path.parent_path() / (path.filename().string() + ".tmp" + std::to_string(rng() % 1000000));
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + tmp.string());
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) {
      f.close();
      std::error_code ec;
      fs::remove(tmp, ec);
      throw IoError("write failed for " + path.string());
    }
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw IoError("cannot move output into place: " + path.string());
  }
}

}  // namespace splatmpm
