#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "specfield/cube.hpp"
#include "specfield/error.hpp"
#include "specfield/field.hpp"
#include "specfield/geometry.hpp"
#include "specfield/hsio.hpp"
#include "specfield/parallel.hpp"
#include "specfield/renderer.hpp"
#include "specfield/rng.hpp"
#include "specfield/sh.hpp"
#include "specfield/speccore.hpp"

namespace specfield {

struct Primitive {
  enum class Shape { sphere, box };
  Shape shape = Shape::sphere;
  Vec3 center;
  double radius = 0.5;          // sphere
  Vec3 half_extent{0.5, 0.5, 0.5};  // box
  std::vector<double> material;     // abundance vector, length K
  double scale_lo = 1.0;            // scaling varies linearly along y
  double scale_hi = 1.0;
  double tint = 0.0;                // specular gate h
  double specular = 0.0;            // lobe gain

  bool contains(const Vec3& p) const {
    const Vec3 d = p - center;
    if (shape == Shape::sphere) return dot(d, d) <= radius * radius;
    return std::abs(d.x) <= half_extent.x && std::abs(d.y) <= half_extent.y && std::abs(d.z) <= half_extent.z;
  }
  Vec3 extent() const { return shape == Shape::sphere ? Vec3{radius, radius, radius} : half_extent; }
  double scaling_at(const Vec3& p) const {
    const double ext = extent().y;
    const double t = std::clamp((p.y - (center.y - ext)) / (2.0 * ext), 0.0, 1.0);
    return scale_lo + (scale_hi - scale_lo) * t;
  }
};

struct SceneSpec {
  std::size_t bands = 8;
  std::size_t endmembers = 3;
  GridResolution resolution{16, 16, 16};
  Aabb bounds{};
  double tau = 1.0;
  double density_scale = 25.0;
  double density_inside = 3.0;
  double density_outside = -10.0;
  std::uint64_t seed = 1;
  std::vector<Primitive> primitives;
  std::string endmember_file;  // empty: synthetic smooth curves
  double wavelength_lo = 450.0, wavelength_hi = 650.0;
  Vec3 light{0.3, 0.8, 0.5};

  std::size_t n_train = 20, n_test = 5;
  std::size_t image_size = 64;
  double radius = 3.5;
  double fov_deg = 40.0;
  double near = -1.0, far = -1.0;  // negative: radius -/+ half diagonal of bounds
  std::size_t n_samples = 64;

  double resolved_near() const { return near >= 0.0 ? near : std::max(0.0, radius - half_diagonal()); }
  double resolved_far() const { return far >= 0.0 ? far : radius + half_diagonal(); }
  double half_diagonal() const { return 0.5 * norm(bounds.hi - bounds.lo); }

  void validate() const {
    if (endmembers == 0) throw UsageError("scene: 'endmembers' (K) must be >= 1");
    if (bands == 0) throw UsageError("scene: 'bands' (B) must be >= 1");
    if (resolution.nx < 2 || resolution.ny < 2 || resolution.nz < 2) throw UsageError("scene: 'resolution' must be >= 2");
    if (image_size == 0) throw UsageError("scene: 'image_size' must be positive");
    if (n_train == 0) throw UsageError("scene: 'n_train' must be >= 1");
    if (n_samples == 0) throw UsageError("scene: 'n_samples' must be >= 1");
    if (!(tau > 0.0)) throw UsageError("scene: 'tau' must be positive");
    if (!(radius > 0.0)) throw UsageError("scene: 'radius' must be positive");
    if (!(resolved_near() < resolved_far())) throw UsageError("scene: 'near' must be below 'far'");
    for (std::size_t i = 0; i < primitives.size(); ++i) {
      const auto& p = primitives[i];
      const std::string tag = "scene: primitive " + std::to_string(i);
      if (p.material.size() != endmembers) {
        throw UsageError(tag + ": 'material' has " + std::to_string(p.material.size()) + " entries, expected K=" +
                         std::to_string(endmembers));
      }
      double total = 0.0;
      for (double a : p.material) {
        if (!(a >= 0.0)) throw UsageError(tag + ": 'material' entries must be >= 0");
        total += a;
      }
      if (std::abs(total - 1.0) > 1e-6) throw UsageError(tag + ": 'material' must sum to 1");
      const Vec3 e = p.extent();
      if (!bounds.contains(p.center - e) || !bounds.contains(p.center + e)) throw UsageError(tag + ": lies outside 'bounds'");
      if (!(p.scale_lo >= 0.0 && p.scale_lo <= 1.0 && p.scale_hi >= 0.0 && p.scale_hi <= 1.0)) {
        throw UsageError(tag + ": 'scaling' must lie in [0,1]");
      }
      if (!(p.tint >= 0.0 && p.tint <= 1.0)) throw UsageError(tag + ": 'tint' must lie in [0,1]");
    }
  }
};

namespace detail {

inline std::vector<double> parse_doubles(const std::string& s, char sep, const std::string& what) {
  std::vector<double> out;
  std::string tok;
  std::istringstream ss(s);
  while (std::getline(ss, tok, sep)) {
    if (tok.empty()) continue;
    try {
      std::size_t used = 0;
      out.push_back(std::stod(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw UsageError("scene: '" + what + "': not a number '" + tok + "'");
    }
  }
  return out;
}

inline Vec3 parse_vec3(const std::string& s, char sep, const std::string& what) {
  const auto v = parse_doubles(s, sep, what);
  if (v.size() != 3) throw UsageError("scene: '" + what + "' needs 3 components");
  return {v[0], v[1], v[2]};
}

inline std::size_t parse_count(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(s, &used);
    if (used != s.size() || v < 0) throw std::invalid_argument(s);
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw UsageError("scene: '" + what + "' must be a nonnegative integer, got '" + s + "'");
  }
}

inline double parse_real(const std::string& s, const std::string& what) {
  const auto v = parse_doubles(s, ' ', what);
  if (v.size() != 1) throw UsageError("scene: '" + what + "' must be a single number");
  return v[0];
}

inline Primitive parse_primitive(const std::string& value, std::size_t k_count) {
  std::istringstream ss(value);
  std::string shape;
  ss >> shape;
  Primitive p;
  if (shape == "sphere") {
    p.shape = Primitive::Shape::sphere;
  } else if (shape == "box") {
    p.shape = Primitive::Shape::box;
  } else {
    throw UsageError("scene: primitive shape must be 'sphere' or 'box', got '" + shape + "'");
  }
  p.material.assign(k_count, 0.0);
  if (k_count > 0) p.material[0] = 1.0;
  std::string tok;
  while (ss >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos) throw UsageError("scene: primitive attribute '" + tok + "' is not name=value");
    const std::string name = tok.substr(0, eq), val = tok.substr(eq + 1);
    if (name == "center") {
      p.center = parse_vec3(val, ',', "center");
    } else if (name == "radius") {
      p.radius = parse_real(val, "radius");
    } else if (name == "half") {
      p.half_extent = parse_vec3(val, ',', "half");
    } else if (name == "material") {
      const auto v = parse_doubles(val, ',', "material");
      if (v.size() == 1 && val.find('.') == std::string::npos) {
        const auto k = static_cast<std::size_t>(v[0]);
        if (v[0] < 0 || k >= k_count) {
          throw UsageError("scene: primitive 'material' index " + val + " is not below K=" + std::to_string(k_count));
        }
        p.material.assign(k_count, 0.0);
        p.material[k] = 1.0;
      } else {
        p.material = v;
      }
    } else if (name == "scaling") {
      const auto v = parse_doubles(val, ':', "scaling");
      if (v.empty() || v.size() > 2) throw UsageError("scene: 'scaling' is s or lo:hi");
      p.scale_lo = v[0];
      p.scale_hi = v.back();
    } else if (name == "tint") {
      p.tint = parse_real(val, "tint");
    } else if (name == "specular") {
      p.specular = parse_real(val, "specular");
    } else {
      throw UsageError("scene: unknown primitive attribute '" + name + "'");
    }
  }
  return p;
}

}  // namespace detail

/// Parses a `key = value` scene file; `primitive` may repeat.
inline SceneSpec parse_scene(std::istream& in, const std::string& origin = "<scene>") {
  SceneSpec s;
  std::vector<std::string> primitive_lines;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw UsageError(origin + ":" + std::to_string(line_no) + ": expected 'key = value'");
    auto trim = [](std::string v) {
      const auto a = v.find_first_not_of(" \t\r");
      const auto b = v.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : v.substr(a, b - a + 1);
    };
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    try {
      if (key == "bands") s.bands = detail::parse_count(value, key);
      else if (key == "endmembers") s.endmembers = detail::parse_count(value, key);
      else if (key == "resolution") {
        const auto n = detail::parse_count(value, key);
        s.resolution = {n, n, n};
      } else if (key == "bounds") {
        const auto v = detail::parse_doubles(value, ' ', key);
        if (v.size() != 6) throw UsageError("scene: 'bounds' needs 6 numbers");
        s.bounds = Aabb{{v[0], v[1], v[2]}, {v[3], v[4], v[5]}};
      } else if (key == "tau") s.tau = detail::parse_real(value, key);
      else if (key == "density_scale") s.density_scale = detail::parse_real(value, key);
      else if (key == "density_inside") s.density_inside = detail::parse_real(value, key);
      else if (key == "density_outside") s.density_outside = detail::parse_real(value, key);
      else if (key == "seed") s.seed = detail::parse_count(value, key);
      else if (key == "endmember_file") s.endmember_file = value;
      else if (key == "wavelength_range") {
        const auto v = detail::parse_doubles(value, ' ', key);
        if (v.size() != 2 || !(v[0] < v[1])) throw UsageError("scene: 'wavelength_range' needs lo < hi");
        s.wavelength_lo = v[0];
        s.wavelength_hi = v[1];
      } else if (key == "light") s.light = normalize(detail::parse_vec3(value, ' ', key));
      else if (key == "n_train") s.n_train = detail::parse_count(value, key);
      else if (key == "n_test") s.n_test = detail::parse_count(value, key);
      else if (key == "image_size") s.image_size = detail::parse_count(value, key);
      else if (key == "radius") s.radius = detail::parse_real(value, key);
      else if (key == "fov_deg") s.fov_deg = detail::parse_real(value, key);
      else if (key == "near") s.near = detail::parse_real(value, key);
      else if (key == "far") s.far = detail::parse_real(value, key);
      else if (key == "n_samples") s.n_samples = detail::parse_count(value, key);
      else if (key == "primitive") primitive_lines.push_back(value);
      else throw UsageError("scene: unknown key '" + key + "'");
    } catch (const UsageError& e) {
      throw UsageError(origin + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (s.endmembers == 0) throw UsageError(origin + ": 'endmembers' (K) must be >= 1");
  for (const auto& p : primitive_lines) s.primitives.push_back(detail::parse_primitive(p, s.endmembers));
  s.validate();
  return s;
}

inline SceneSpec read_scene(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open scene file " + path);
  return parse_scene(in, path);
}

/// K smooth curves (two Gaussians over band index plus a floor) with pairwise
/// spectral angle >= min_angle.
inline EndmemberDictionary synthetic_endmembers(std::size_t bands, std::size_t k_count, std::uint64_t seed,
                                                double min_angle = 0.2) {
  auto rng = make_rng(seed, "endmembers");
  std::vector<Spectrum> accepted;
  const double span = static_cast<double>(std::max<std::size_t>(bands, 2) - 1);
  for (int attempt = 0; attempt < 1000 && accepted.size() < k_count; ++attempt) {
    Spectrum s(bands);
    const double floor = uniform(rng, 0.05, 0.15);
    double lobes[2][3];
    for (auto& l : lobes) {
      l[0] = uniform(rng, 0.3, 0.75);                     // amplitude
      l[1] = uniform(rng, -0.1 * span, 1.1 * span);       // centre (band index)
      l[2] = uniform(rng, 0.15 * span, 0.4 * span) + 0.5; // width
    }
    for (std::size_t b = 0; b < bands; ++b) {
      double v = floor;
      for (const auto& l : lobes) {
        const double z = (static_cast<double>(b) - l[1]) / l[2];
        v += l[0] * std::exp(-0.5 * z * z);
      }
      s[b] = std::clamp(v, 0.0, 1.0);
    }
    bool separated = true;
    for (const auto& other : accepted) separated = separated && spectral_angle(s, other) >= min_angle;
    if (separated) accepted.push_back(std::move(s));
  }
  if (accepted.size() < k_count) {
    throw NumericError("scene: could not draw " + std::to_string(k_count) + " endmembers with pairwise angle >= " +
                       std::to_string(min_angle) + " rad in 1000 draws");
  }
  return EndmemberDictionary::from_columns(accepted);
}

/// SH coefficients of z(d) = bias + gain * P1(d.L) + 0.5 * gain * P2(d.L).
inline std::array<double, kShCoeffs> specular_lobe(const Vec3& light, double bias, double gain) {
  constexpr double four_pi = 4.0 * 3.14159265358979323846;
  const auto yl = sh_basis(light);
  const double zonal[3] = {bias, gain, 0.5 * gain};
  std::array<double, kShCoeffs> c{};
  for (std::size_t m = 0; m < kShCoeffs; ++m) {
    const std::size_t l = m == 0 ? 0 : (m < 4 ? 1 : 2);
    c[m] = zonal[l] * four_pi / static_cast<double>(2 * l + 1) * yl[m];
  }
  return c;
}

struct GroundTruthScene {
  VoxelField field;
  std::vector<std::uint16_t> voxel_labels;  // per voxel, kBackgroundLabel where empty
  SceneSpec spec;
};

inline double logit(double p) {
  p = std::clamp(p, 1e-4, 1.0 - 1e-4);
  return std::log(p / (1.0 - p));
}

inline GroundTruthScene build_scene(const SceneSpec& spec) {
  spec.validate();
  GroundTruthScene gt{VoxelField(spec.resolution, spec.bounds, spec.endmembers, spec.bands, spec.tau, spec.density_scale),
                      std::vector<std::uint16_t>(spec.resolution.voxels(), kBackgroundLabel), spec};
  auto& field = gt.field;
  EndmemberDictionary e = spec.endmember_file.empty() ? synthetic_endmembers(spec.bands, spec.endmembers, spec.seed)
                                                      : read_endmembers(spec.endmember_file);
  if (!e.in_unit_range()) throw UsageError("scene: endmember values must lie in [0,1]");
  field.set_endmembers(e);

  const auto& lay = field.layout();
  const std::size_t k_count = spec.endmembers;
  const auto& r = spec.resolution;
  for (std::size_t iz = 0; iz < r.nz; ++iz) {
    for (std::size_t iy = 0; iy < r.ny; ++iy) {
      for (std::size_t ix = 0; ix < r.nx; ++ix) {
        const std::size_t v = field.voxel_index(ix, iy, iz);
        auto params = field.voxel(v);
        const Vec3 pos = field.vertex_position(ix, iy, iz);
        const Primitive* owner = nullptr;
        for (const auto& p : spec.primitives)
          if (p.contains(pos)) owner = &p;
        std::fill(params.begin(), params.end(), 0.0f);
        if (!owner) {
          params[lay.density()] = static_cast<float>(spec.density_outside);
          params[lay.tint()] = -10.0f;
          continue;
        }
        params[lay.density()] = static_cast<float>(spec.density_inside);
        const auto& a = owner->material;
        const auto hot = static_cast<std::size_t>(std::max_element(a.begin(), a.end()) - a.begin());
        const bool one_hot = a[hot] == 1.0;
        if (one_hot) {
          for (std::size_t k = 0; k < k_count; ++k) params[lay.abundance() + k] = k == hot ? 10.0f : -10.0f;
        } else {
          // Inverse softmax, gauge fixed to zero-mean logits.
          std::vector<double> la(k_count);
          double mean = 0.0;
          for (std::size_t k = 0; k < k_count; ++k) {
            la[k] = spec.tau * std::log(std::max(a[k], 1e-6));
            mean += la[k] / static_cast<double>(k_count);
          }
          for (std::size_t k = 0; k < k_count; ++k) params[lay.abundance() + k] = static_cast<float>(la[k] - mean);
        }
        const double s = logit(owner->scaling_at(pos));
        for (std::size_t k = 0; k < k_count; ++k) params[lay.scaling() + k] = static_cast<float>(s);
        params[lay.tint()] = static_cast<float>(owner->tint > 0.0 ? logit(owner->tint) : -10.0);
        const auto lobe = specular_lobe(spec.light, owner->specular > 0.0 ? -2.0 : -6.0, owner->specular);
        for (std::size_t b = 0; b < spec.bands; ++b)
          for (std::size_t m = 0; m < kShCoeffs; ++m) params[lay.specular() + b * kShCoeffs + m] = static_cast<float>(lobe[m]);
        gt.voxel_labels[v] = static_cast<std::uint16_t>(hot);
      }
    }
  }
  return gt;
}

// ---------------------------------------------------------------------------
// Camera rig and dataset emission

struct CameraRig {
  PoseFile train;
  PoseFile test;
};

/// Fibonacci-sphere placement looking at the origin; test views are spread
/// evenly through the sequence.
inline CameraRig make_rig(const SceneSpec& spec) {
  const std::size_t n = spec.n_train + spec.n_test;
  PoseFile base;
  base.width = base.height = spec.image_size;
  base.fx = base.fy = 0.5 * static_cast<double>(spec.image_size) / std::tan(0.5 * spec.fov_deg * 3.14159265358979323846 / 180.0);
  base.cx = base.cy = 0.5 * static_cast<double>(spec.image_size);
  base.near = spec.resolved_near();
  base.far = spec.resolved_far();
  CameraRig rig{base, base};
  std::vector<char> is_test(n, 0);
  for (std::size_t j = 0; j < spec.n_test; ++j) is_test[(2 * j + 1) * n / (2 * spec.n_test)] = 1;
  const double golden = 3.14159265358979323846 * (3.0 - std::sqrt(5.0));
  for (std::size_t i = 0; i < n; ++i) {
    const double y = 1.0 - (static_cast<double>(i) + 0.5) * 2.0 / static_cast<double>(n);
    const double ring = std::sqrt(std::max(0.0, 1.0 - y * y));
    const double phi = golden * static_cast<double>(i);
    const Vec3 eye = Vec3{std::cos(phi) * ring, y, std::sin(phi) * ring} * spec.radius;
    auto& target = is_test[i] ? rig.test : rig.train;
    std::ostringstream name;
    name << (is_test[i] ? "test/" : "train/") << std::setw(3) << std::setfill('0') << target.frames.size() << ".hsc";
    target.frames.push_back({name.str(), look_at(eye, {0.0, 0.0, 0.0})});
  }
  return rig;
}

/// Ground-truth labels for one view: argmax of rendered abundance where the
/// opacity reaches the threshold.
inline LabelMap gt_label_map(const RenderedImage& img, double opacity_threshold = 0.5) {
  LabelMap map(img.width, img.height);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      if (img.opacity[y * img.width + x] < opacity_threshold) continue;
      std::size_t best = 0;
      for (std::size_t k = 1; k < img.endmembers; ++k)
        if (img.abundance_at(k, y, x) > img.abundance_at(best, y, x)) best = k;
      map.at(y, x) = static_cast<std::uint16_t>(best);
    }
  }
  return map;
}

inline std::string format_real(double v) {
  std::ostringstream out;
  out << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
  return out.str();
}

/// Writes cubes, poses, GT label maps, GT endmembers, the GT field and a
/// checksummed manifest into out_dir.
inline Manifest emit_dataset(const GroundTruthScene& gt, const std::filesystem::path& out_dir, unsigned threads = 1) {
  namespace fs = std::filesystem;
  const auto& spec = gt.spec;
  std::error_code ec;
  for (const char* sub : {"train", "test", "labels"}) {
    fs::create_directories(out_dir / sub, ec);
    if (ec) throw IoError("cannot create " + (out_dir / sub).string() + ": " + ec.message());
  }
  const CameraRig rig = make_rig(spec);
  const CameraResponse response = default_camera_response(spec.bands, spec.wavelength_lo, spec.wavelength_hi);

  Manifest m;
  m.set("format", "specfield-dataset-1");
  m.set("bands", std::to_string(spec.bands));
  m.set("endmembers", std::to_string(spec.endmembers));
  m.set("resolution", std::to_string(spec.resolution.nx));
  m.set("seed", std::to_string(spec.seed));
  m.set("n_train", std::to_string(spec.n_train));
  m.set("n_test", std::to_string(spec.n_test));
  m.set("image_size", std::to_string(spec.image_size));
  m.set("n_samples", std::to_string(spec.n_samples));
  m.set("near", format_real(rig.train.near));
  m.set("far", format_real(rig.train.far));
  m.set("wavelength_lo", format_real(spec.wavelength_lo));
  m.set("wavelength_hi", format_real(spec.wavelength_hi));

  std::vector<std::string> files;
  auto emit_split = [&](const PoseFile& poses, const std::string& split) {
    for (std::size_t i = 0; i < poses.frames.size(); ++i) {
      const auto img = render_image(gt.field, poses.camera(i), poses.near, poses.far, spec.n_samples, nullptr,
                                    RenderOutputs{true, false, true, true}, threads);
      write_cube(img.spectral, (out_dir / poses.frames[i].path).string());
      files.push_back(poses.frames[i].path);
      std::ostringstream label_name;
      label_name << "labels/" << split << "_" << std::setw(3) << std::setfill('0') << i << ".seg";
      write_labels(gt_label_map(img), (out_dir / label_name.str()).string());
      files.push_back(label_name.str());
    }
    const std::string pose_name = "poses_" + split + ".txt";
    write_poses(poses, (out_dir / pose_name).string());
    files.push_back(pose_name);
  };
  emit_split(rig.train, "train");
  emit_split(rig.test, "test");
  write_endmembers(gt.field.endmembers(), (out_dir / "endmembers.txt").string());
  files.push_back("endmembers.txt");
  write_camera_response(response, (out_dir / "camera_response.txt").string());
  files.push_back("camera_response.txt");
  write_checkpoint(gt.field, (out_dir / "gt_field.umf").string());
  files.push_back("gt_field.umf");

  for (const auto& f : files) m.files.emplace_back(f, sha256_file((out_dir / f).string()));
  write_manifest(m, (out_dir / "manifest.txt").string());
  return m;
}

// ---------------------------------------------------------------------------
// Loading

struct DatasetView {
  Camera camera;
  SpectralCube cube;
  std::optional<LabelMap> labels;
};

struct Dataset {
  std::filesystem::path root;
  Manifest manifest;
  double near = 0.0, far = 1.0;
  std::size_t n_samples = 64;
  std::vector<DatasetView> train, test;
  std::optional<EndmemberDictionary> gt_endmembers;
  CameraResponse response;

  std::size_t bands() const { return train.empty() ? 0 : train.front().cube.bands; }
};

inline Dataset load_dataset(const std::filesystem::path& dir, bool verify = true) {
  namespace fs = std::filesystem;
  Dataset d;
  d.root = dir;
  const auto manifest_path = dir / "manifest.txt";
  if (fs::exists(manifest_path)) {
    d.manifest = read_manifest(manifest_path.string());
    if (verify) verify_manifest(d.manifest, dir);
  }
  auto load_split = [&](const std::string& split, std::vector<DatasetView>& views) {
    const auto pose_path = dir / ("poses_" + split + ".txt");
    if (!fs::exists(pose_path)) return;
    const PoseFile poses = read_poses(pose_path.string());
    d.near = poses.near;
    d.far = poses.far;
    for (std::size_t i = 0; i < poses.frames.size(); ++i) {
      DatasetView v{poses.camera(i), read_cube((dir / poses.frames[i].path).string()), std::nullopt};
      if (v.cube.width != poses.width || v.cube.height != poses.height) {
        throw UsageError("cube " + poses.frames[i].path + " does not match pose intrinsics size");
      }
      std::ostringstream label_name;
      label_name << "labels/" << split << "_" << std::setw(3) << std::setfill('0') << i << ".seg";
      if (fs::exists(dir / label_name.str())) v.labels = read_labels((dir / label_name.str()).string());
      views.push_back(std::move(v));
    }
  };
  load_split("train", d.train);
  load_split("test", d.test);
  if (d.train.empty()) throw UsageError("dataset " + dir.string() + " has no training views");
  const std::size_t bands = d.train.front().cube.bands;
  for (const auto& v : d.train) detail::require_dims(bands, v.cube.bands, "training cube band count");
  if (fs::exists(dir / "endmembers.txt")) d.gt_endmembers = read_endmembers((dir / "endmembers.txt").string());
  if (fs::exists(dir / "camera_response.txt")) {
    d.response = read_camera_response((dir / "camera_response.txt").string());
  } else {
    d.response = default_camera_response(bands);
  }
  detail::require_dims(bands, d.response.bands, "camera response band count");
  for (const auto& [k, v] : d.manifest.entries)
    if (k == "n_samples") d.n_samples = static_cast<std::size_t>(std::stoul(v));
  return d;
}

}  // namespace specfield
