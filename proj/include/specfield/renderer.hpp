#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "specfield/cube.hpp"
#include "specfield/error.hpp"
#include "specfield/field.hpp"
#include "specfield/geometry.hpp"
#include "specfield/parallel.hpp"
#include "specfield/rng.hpp"
#include "specfield/speccore.hpp"

namespace specfield {

/// Pinhole camera; camera_to_world is right-handed and the camera looks along -z.
struct Camera {
  double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;
  std::size_t width = 1, height = 1;
  Mat4 camera_to_world{};

  void validate() const {
    if (!(fx > 0.0) || !(fy > 0.0)) throw UsageError("camera focal lengths must be positive");
    if (width == 0 || height == 0) throw UsageError("camera image size must be positive");
    const double err = camera_to_world.orthonormality_error();
    if (!(err <= 1e-5)) throw UsageError("camera rotation is not orthonormal (error " + std::to_string(err) + ")");
  }
};

struct Ray {
  Vec3 origin;
  Vec3 direction;
  double near = 0.0;
  double far = 1.0;
};

inline Ray generate_ray(const Camera& cam, std::size_t u, std::size_t v, double near, double far) {
  if (u >= cam.width || v >= cam.height) {
    throw UsageError("pixel (" + std::to_string(u) + "," + std::to_string(v) + ") outside " +
                     std::to_string(cam.width) + "x" + std::to_string(cam.height) + " image");
  }
  const Vec3 local{(static_cast<double>(u) + 0.5 - cam.cx) / cam.fx, -(static_cast<double>(v) + 0.5 - cam.cy) / cam.fy,
                   -1.0};
  return Ray{cam.camera_to_world.translation(), normalize(cam.camera_to_world.rotate(local)), near, far};
}

/// Rays through the centres of the given pixels (linear index v * width + u).
inline std::vector<Ray> generate_rays(const Camera& cam, std::span<const std::size_t> pixels, double near, double far) {
  std::vector<Ray> rays;
  rays.reserve(pixels.size());
  for (std::size_t p : pixels) {
    if (p >= cam.width * cam.height) throw UsageError("pixel index " + std::to_string(p) + " outside image");
    rays.push_back(generate_ray(cam, p % cam.width, p / cam.width, near, far));
  }
  return rays;
}

struct MarchOptions {
  std::size_t n_samples = 64;
  bool jitter = false;
  std::uint64_t jitter_key = 0;  // per-ray key for seeded stratified jitter
  bool early_termination = true;
  double termination_threshold = 1e-4;
  bool gradient_scaling = false;
  const CameraResponse* response = nullptr;  // when set, rgb is filled
};

/// Per-sample record kept for the backward pass.
struct SampleRecord {
  double t = 0.0, delta = 0.0, sigma = 0.0, transmittance = 1.0, weight = 0.0;
  Spectrum radiance;
  std::vector<double> abundance;
};

struct RayRender {
  Spectrum radiance;
  std::vector<double> abundance;
  double opacity = 0.0;
  Rgb rgb{0.0, 0.0, 0.0};
  std::vector<SampleRecord> per_sample;
  double final_transmittance = 1.0;
};

/// Reusable per-thread buffers for the march hot path.
struct MarchWorkspace {
  std::vector<SampleWorkspace> samples;
  std::vector<Corners> corners;
  std::vector<double> t, delta, sigma, trans, weight, scale;
  std::size_t count = 0;  // samples actually marched (early termination)
  std::vector<double> grad_raw, grad_endmembers, g_rad, g_ab;

  MarchWorkspace() = default;
  MarchWorkspace(const VoxelField& f, std::size_t n) { resize(f, n); }

  void resize(const VoxelField& f, std::size_t n) {
    samples.assign(n, SampleWorkspace(f));
    corners.assign(n, Corners{});
    t.assign(n, 0.0);
    delta.assign(n, 0.0);
    sigma.assign(n, 0.0);
    trans.assign(n, 0.0);
    weight.assign(n, 0.0);
    scale.assign(n, 1.0);
    grad_raw.assign(f.params_per_voxel(), 0.0);
    grad_endmembers.assign(f.band_count() * f.endmember_count(), 0.0);
    g_rad.assign(f.band_count(), 0.0);
    g_ab.assign(f.endmember_count(), 0.0);
  }
};

namespace detail {

inline double jitter_offset(std::uint64_t key, std::size_t i) {
  return static_cast<double>(splitmix64(key * 0x9E3779B97F4A7C15ull + i) >> 11) * 0x1.0p-53;
}

// Stratified sample positions: one per bin; midpoint unless jittered.
inline void sample_positions(const Ray& ray, const MarchOptions& opt, std::span<double> t, std::span<double> delta) {
  const std::size_t n = opt.n_samples;
  const double bin = (ray.far - ray.near) / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double u = opt.jitter ? jitter_offset(opt.jitter_key, i) : 0.5;
    t[i] = ray.near + (static_cast<double>(i) + u) * bin;
  }
  for (std::size_t i = 0; i + 1 < n; ++i) delta[i] = t[i + 1] - t[i];
  delta[n - 1] = ray.far - t[n - 1];
}

inline void check_ray(const Ray& ray, const MarchOptions& opt) {
  if (opt.n_samples < 1) throw UsageError("n_samples must be >= 1");
  if (!(ray.near >= 0.0) || !(ray.near < ray.far)) {
    throw UsageError("degenerate ray: near=" + std::to_string(ray.near) + " far=" + std::to_string(ray.far));
  }
}

}  // namespace detail

/// Forward volume rendering of one ray; leaves per-sample state in ws.
inline void march_into(const VoxelField& field, const Ray& ray, const MarchOptions& opt, MarchWorkspace& ws,
                       RayRender& out) {
  detail::check_ray(ray, opt);
  const std::size_t n = opt.n_samples;
  if (ws.samples.size() < n) ws.resize(field, n);
  const std::size_t bands = field.band_count(), k_count = field.endmember_count();
  out.radiance.values.assign(bands, 0.0);
  out.abundance.assign(k_count, 0.0);
  out.opacity = 0.0;

  detail::sample_positions(ray, opt, ws.t, ws.delta);
  double optical_depth = 0.0;
  double transmittance = 1.0;
  ws.count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (opt.early_termination && transmittance < opt.termination_threshold) break;
    const Vec3 x = ray.origin + ray.direction * ws.t[i];
    auto& s = ws.samples[i];
    ws.corners[i] = sample_into(field, x, ray.direction, s);
    ws.count = i + 1;
    ws.trans[i] = transmittance;
    ws.sigma[i] = s.density;
    ws.scale[i] = opt.gradient_scaling ? std::min(1.0, ws.t[i] * ws.t[i]) : 1.0;
    const double tau = s.density * ws.delta[i];
    const double w = transmittance * -std::expm1(-tau);
    ws.weight[i] = w;
    if (w != 0.0) {
      for (std::size_t b = 0; b < bands; ++b) out.radiance[b] += w * s.radiance[b];
      for (std::size_t k = 0; k < k_count; ++k) out.abundance[k] += w * s.abundance[k];
      out.opacity += w;
    }
    optical_depth += tau;
    transmittance = std::exp(-optical_depth);
  }
  out.final_transmittance = transmittance;
  if (opt.response) out.rgb = spectrum_to_rgb(out.radiance, *opt.response);
}

inline RayRender march(const VoxelField& field, const Ray& ray, const MarchOptions& opt, bool keep_samples = false) {
  MarchWorkspace ws(field, opt.n_samples);
  RayRender out;
  march_into(field, ray, opt, ws, out);
  if (keep_samples) {
    out.per_sample.resize(ws.count);
    for (std::size_t i = 0; i < ws.count; ++i) {
      auto& r = out.per_sample[i];
      r.t = ws.t[i];
      r.delta = ws.delta[i];
      r.sigma = ws.sigma[i];
      r.transmittance = ws.trans[i];
      r.weight = ws.weight[i];
      r.radiance = Spectrum(ws.samples[i].radiance);
      r.abundance = ws.samples[i].abundance;
    }
  }
  return out;
}

/// Adjoint of march_into for the state currently held in ws. grad_abundance
/// may be empty. Gradients are added into g.
inline void march_backward_into(const VoxelField& field, const MarchOptions& /*opt*/, MarchWorkspace& ws,
                                std::span<const double> grad_radiance, std::span<const double> grad_abundance,
                                FieldGradient& g, AccumulationMode mode = AccumulationMode::deterministic) {
  const std::size_t bands = field.band_count(), k_count = field.endmember_count();
  auto& g_rad = ws.g_rad;
  auto& g_ab = ws.g_ab;
  auto& ge = ws.grad_endmembers;
  const std::span<const double> g_ab_view = grad_abundance.empty() ? std::span<const double>{} : std::span<const double>(g_ab);
  // Suffix sum of w_j * (gC . c_j + gA . a_j) over samples j > i.
  double suffix = 0.0;
  for (std::size_t ii = ws.count; ii-- > 0;) {
    auto& s = ws.samples[ii];
    if (!ws.corners[ii].inside) continue;
    double own = 0.0;
    for (std::size_t b = 0; b < bands; ++b) own += grad_radiance[b] * s.radiance[b];
    if (!grad_abundance.empty()) {
      for (std::size_t k = 0; k < k_count; ++k) own += grad_abundance[k] * s.abundance[k];
    }
    const double w = ws.weight[ii];
    const double survive = ws.trans[ii] * std::exp(-ws.sigma[ii] * ws.delta[ii]);
    const double g_sigma = ws.delta[ii] * (survive * own - suffix);
    suffix += w * own;

    const double scale = ws.scale[ii];
    for (std::size_t b = 0; b < bands; ++b) g_rad[b] = w * grad_radiance[b];
    if (!grad_abundance.empty()) {
      for (std::size_t k = 0; k < k_count; ++k) g_ab[k] = w * grad_abundance[k];
    }
    std::fill(ge.begin(), ge.end(), 0.0);
    detail::activate_backward(field, s, g_sigma, g_ab_view, {}, 0.0, {}, {}, g_rad, ws.grad_raw, ge);
    if (mode == AccumulationMode::deterministic) {
      for (std::size_t i = 0; i < ge.size(); ++i) g.endmembers[i] += scale * ge[i];
    } else {
      for (std::size_t i = 0; i < ge.size(); ++i)
        if (ge[i] != 0.0) std::atomic_ref<double>(g.endmembers[i]).fetch_add(scale * ge[i], std::memory_order_relaxed);
    }
    scatter(ws.corners[ii], ws.grad_raw, scale, g, mode);
  }
}

/// Convenience form: re-marches the ray and returns a dense gradient.
inline FieldGradient march_backward(const VoxelField& field, const Ray& ray, const MarchOptions& opt,
                                    std::span<const double> grad_radiance, std::span<const double> grad_abundance) {
  detail::require_dims(field.band_count(), grad_radiance.size(), "march_backward radiance gradient");
  if (!grad_abundance.empty()) detail::require_dims(field.endmember_count(), grad_abundance.size(), "march_backward abundance gradient");
  MarchWorkspace ws(field, opt.n_samples);
  RayRender r;
  march_into(field, ray, opt, ws, r);
  FieldGradient g(field);
  march_backward_into(field, opt, ws, grad_radiance, grad_abundance, g);
  return g;
}

/// Backward from a recorded forward pass. Throws when the record is missing.
inline FieldGradient march_backward(const VoxelField& field, const Ray& ray, const MarchOptions& opt,
                                    const RayRender& forward, std::span<const double> grad_radiance,
                                    std::span<const double> grad_abundance) {
  if (forward.per_sample.empty()) throw UsageError("march_backward: forward pass has no per-sample record");
  return march_backward(field, ray, opt, grad_radiance, grad_abundance);
}

// ---------------------------------------------------------------------------
// Images

struct RenderOutputs {
  bool spectral = true;
  bool rgb = true;
  bool abundance = true;
  bool opacity = true;
};

struct RenderedImage {
  SpectralCube spectral;            // H x W x B
  std::vector<double> rgb;          // H x W x 3, interleaved
  std::vector<double> abundance;    // K planes of H x W
  std::vector<double> opacity;      // H x W
  std::size_t width = 0, height = 0, endmembers = 0;

  double abundance_at(std::size_t k, std::size_t y, std::size_t x) const { return abundance[(k * height + y) * width + x]; }
};

inline RenderedImage render_image(const VoxelField& field, const Camera& cam, double near, double far,
                                  std::size_t n_samples, const CameraResponse* response = nullptr,
                                  RenderOutputs outputs = {}, unsigned threads = 1) {
  cam.validate();
  const std::size_t w = cam.width, h = cam.height, bands = field.band_count(), k_count = field.endmember_count();
  RenderedImage img;
  img.width = w;
  img.height = h;
  img.endmembers = k_count;
  if (outputs.spectral) img.spectral = SpectralCube(w, h, bands);
  if (outputs.rgb && response) img.rgb.assign(w * h * 3, 0.0);
  if (outputs.abundance) img.abundance.assign(k_count * w * h, 0.0);
  if (outputs.opacity) img.opacity.assign(w * h, 0.0);

  MarchOptions opt;
  opt.n_samples = n_samples;
  opt.response = outputs.rgb ? response : nullptr;
  parallel_chunks(h, std::min<unsigned>(resolve_threads(threads), static_cast<unsigned>(h)),
                  [&](unsigned, std::size_t row_begin, std::size_t row_end) {
                    MarchWorkspace ws(field, n_samples);
                    RayRender r;
                    for (std::size_t y = row_begin; y < row_end; ++y) {
                      for (std::size_t x = 0; x < w; ++x) {
                        march_into(field, generate_ray(cam, x, y, near, far), opt, ws, r);
                        if (outputs.spectral) img.spectral.set_pixel(y, x, r.radiance);
                        if (!img.rgb.empty()) {
                          for (int c = 0; c < 3; ++c) img.rgb[(y * w + x) * 3 + static_cast<std::size_t>(c)] = r.rgb[static_cast<std::size_t>(c)];
                        }
                        if (outputs.abundance) {
                          for (std::size_t k = 0; k < k_count; ++k) img.abundance[(k * h + y) * w + x] = r.abundance[k];
                        }
                        if (outputs.opacity) img.opacity[y * w + x] = r.opacity;
                      }
                    }
                  });
  return img;
}

}  // namespace specfield
