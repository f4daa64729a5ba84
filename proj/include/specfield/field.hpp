#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "specfield/error.hpp"
#include "specfield/geometry.hpp"
#include "specfield/sh.hpp"
#include "specfield/speccore.hpp"

namespace specfield {

struct GridResolution {
  std::size_t nx = 16, ny = 16, nz = 16;

  std::size_t voxels() const noexcept { return nx * ny * nz; }
  bool operator==(const GridResolution&) const = default;
};

/// Feature switches used by the ablation variants. All on is the full model.
struct ModelFlags {
  bool specular = true;     // off: tint forced to 0
  bool scaling = true;      // off: scaling forced to 1
  bool constrained = true;  // off: abundances are the raw weights (no softmax)

  bool operator==(const ModelFlags&) const = default;
};

/// Offsets of each channel inside one voxel's parameter block.
struct ParamLayout {
  std::size_t endmembers = 0;  // K
  std::size_t bands = 0;       // B

  std::size_t density() const noexcept { return 0; }
  std::size_t abundance() const noexcept { return 1; }
  std::size_t scaling() const noexcept { return 1 + endmembers; }
  std::size_t tint() const noexcept { return 1 + 2 * endmembers; }
  std::size_t specular() const noexcept { return 2 + 2 * endmembers; }
  std::size_t per_voxel() const noexcept { return 2 + 2 * endmembers + kShCoeffs * bands; }

  bool operator==(const ParamLayout&) const = default;
};

/// Dense vertex grid of raw (pre-activation) parameters over an axis-aligned
/// box, plus the shared endmember dictionary. Vertex (0,0,0) sits at bounds.lo
/// and vertex (n-1,...) at bounds.hi; voxel order is x-fastest.
class VoxelField {
 public:
  VoxelField() = default;
  VoxelField(GridResolution res, Aabb bounds, std::size_t endmember_count, std::size_t band_count,
             double tau = 1.0, double density_scale = 25.0)
      : res_(res),
        bounds_(to_storage(bounds)),
        layout_{endmember_count, band_count},
        tau_(to_storage(tau)),
        density_scale_(to_storage(density_scale)),
        endmembers_(band_count, endmember_count, 0.5f),
        params_(res.voxels() * layout_.per_voxel(), 0.0f) {
    if (res.nx < 2 || res.ny < 2 || res.nz < 2) throw UsageError("grid resolution must be >= 2 per axis");
    if (!(tau > 0.0)) throw UsageError("softmax temperature must be positive");
    if (!(density_scale > 0.0)) throw UsageError("density_scale must be positive");
    for (int a = 0; a < 3; ++a) {
      if (!(bounds.hi[a] > bounds.lo[a])) throw UsageError("field bounds must have positive extent on every axis");
    }
  }

  const GridResolution& resolution() const noexcept { return res_; }
  const Aabb& bounds() const noexcept { return bounds_; }
  const ParamLayout& layout() const noexcept { return layout_; }
  std::size_t endmember_count() const noexcept { return layout_.endmembers; }
  std::size_t band_count() const noexcept { return layout_.bands; }
  std::size_t params_per_voxel() const noexcept { return layout_.per_voxel(); }
  double tau() const noexcept { return tau_; }
  double density_scale() const noexcept { return density_scale_; }
  const ModelFlags& flags() const noexcept { return flags_; }
  void set_flags(const ModelFlags& f) { flags_ = f; }

  const EndmemberDictionary& endmembers() const noexcept { return endmembers_; }
  EndmemberDictionary& endmembers() noexcept { return endmembers_; }
  void set_endmembers(const EndmemberDictionary& e) {
    detail::require_dims(band_count(), e.band_count(), "endmember band count");
    detail::require_dims(endmember_count(), e.endmember_count(), "endmember count");
    endmembers_ = e;
  }

  std::size_t voxel_index(std::size_t ix, std::size_t iy, std::size_t iz) const noexcept {
    return ix + res_.nx * (iy + res_.ny * iz);
  }
  std::array<std::size_t, 3> voxel_coords(std::size_t index) const noexcept {
    return {index % res_.nx, (index / res_.nx) % res_.ny, index / (res_.nx * res_.ny)};
  }
  Vec3 vertex_position(std::size_t ix, std::size_t iy, std::size_t iz) const noexcept {
    auto along = [](double lo, double hi, std::size_t i, std::size_t n) {
      return lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
    };
    return {along(bounds_.lo.x, bounds_.hi.x, ix, res_.nx), along(bounds_.lo.y, bounds_.hi.y, iy, res_.ny),
            along(bounds_.lo.z, bounds_.hi.z, iz, res_.nz)};
  }

  std::span<float> voxel(std::size_t index) {
    return std::span<float>(params_).subspan(index * layout_.per_voxel(), layout_.per_voxel());
  }
  std::span<const float> voxel(std::size_t index) const {
    return std::span<const float>(params_).subspan(index * layout_.per_voxel(), layout_.per_voxel());
  }

  std::span<float> params() noexcept { return params_; }
  std::span<const float> params() const noexcept { return params_; }

  bool operator==(const VoxelField&) const = default;

 private:
  // Scalar metadata is kept at checkpoint (32-bit) precision so a saved and
  // reloaded field renders identically.
  static double to_storage(double v) { return static_cast<double>(static_cast<float>(v)); }
  static Aabb to_storage(const Aabb& b) {
    return {{to_storage(b.lo.x), to_storage(b.lo.y), to_storage(b.lo.z)},
            {to_storage(b.hi.x), to_storage(b.hi.y), to_storage(b.hi.z)}};
  }

  GridResolution res_{};
  Aabb bounds_{};
  ParamLayout layout_{};
  double tau_ = 1.0;
  double density_scale_ = 25.0;
  ModelFlags flags_{};
  EndmemberDictionary endmembers_{};
  std::vector<float> params_;
};

/// Activated quantities at a point.
struct PointSample {
  double density = 0.0;
  AbundanceVector abundance;
  ScalingVector scaling;
  double tint = 0.0;
  Spectrum specular;
  Spectrum diffuse;
  Spectrum radiance;
};

/// Upstream gradients with respect to each PointSample output. Empty vectors
/// are treated as zero.
struct PointSampleGrad {
  double density = 0.0;
  std::vector<double> abundance;
  std::vector<double> scaling;
  double tint = 0.0;
  std::vector<double> specular;
  std::vector<double> diffuse;
  std::vector<double> radiance;
};

/// Trilinear stencil: 8 corner voxels and their weights.
struct Corners {
  std::array<std::size_t, 8> index{};
  std::array<double, 8> weight{};
  bool inside = false;
};

/// Result of sample_backward: gradient w.r.t. the interpolated raw parameter
/// vector (corner c receives weight[c] * raw) and w.r.t. the endmembers
/// (column-major B x K).
struct SampleGradient {
  Corners corners;
  std::vector<double> raw;
  std::vector<double> endmembers;

  double corner_grad(std::size_t corner, std::size_t param) const { return corners.weight[corner] * raw[param]; }
};

inline Corners locate(const VoxelField& field, const Vec3& x) {
  Corners c;
  const auto& b = field.bounds();
  if (!b.contains(x)) return c;
  const auto& r = field.resolution();
  const std::size_t n[3] = {r.nx, r.ny, r.nz};
  std::size_t i0[3];
  double f[3];
  for (int a = 0; a < 3; ++a) {
    const double u = (x[a] - b.lo[a]) / (b.hi[a] - b.lo[a]) * static_cast<double>(n[a] - 1);
    const auto cell = std::min(static_cast<std::size_t>(std::max(0.0, std::floor(u))), n[a] - 2);
    i0[a] = cell;
    f[a] = u - static_cast<double>(cell);
  }
  for (std::size_t corner = 0; corner < 8; ++corner) {
    const std::size_t dx = corner & 1u, dy = (corner >> 1) & 1u, dz = (corner >> 2) & 1u;
    c.index[corner] = field.voxel_index(i0[0] + dx, i0[1] + dy, i0[2] + dz);
    c.weight[corner] = (dx ? f[0] : 1.0 - f[0]) * (dy ? f[1] : 1.0 - f[1]) * (dz ? f[2] : 1.0 - f[2]);
  }
  c.inside = true;
  return c;
}

/// Scratch buffers for the allocation-free sampling path.
struct SampleWorkspace {
  std::vector<double> raw;
  std::array<double, kShCoeffs> basis{};
  double density = 0.0;
  std::vector<double> abundance, scaling;
  double tint = 0.0;
  std::vector<double> specular, diffuse, radiance;
  std::vector<char> radiance_active;
  // backward scratch
  std::vector<double> g_diffuse, g_specular, g_abundance, g_scaling;

  explicit SampleWorkspace(const VoxelField& f) { resize(f.endmember_count(), f.band_count(), f.params_per_voxel()); }
  SampleWorkspace() = default;

  void resize(std::size_t k, std::size_t b, std::size_t p) {
    raw.assign(p, 0.0);
    abundance.assign(k, 0.0);
    scaling.assign(k, 0.0);
    specular.assign(b, 0.0);
    diffuse.assign(b, 0.0);
    radiance.assign(b, 0.0);
    radiance_active.assign(b, 1);
    g_diffuse.assign(b, 0.0);
    g_specular.assign(b, 0.0);
    g_abundance.assign(k, 0.0);
    g_scaling.assign(k, 0.0);
  }
};

namespace detail {

inline void gather(const VoxelField& field, const Corners& c, std::span<double> raw) {
  std::fill(raw.begin(), raw.end(), 0.0);
  const std::size_t p = field.params_per_voxel();
  const float* base = field.params().data();
  for (std::size_t corner = 0; corner < 8; ++corner) {
    const double w = c.weight[corner];
    if (w == 0.0) continue;
    const float* v = base + c.index[corner] * p;
    for (std::size_t i = 0; i < p; ++i) raw[i] += w * static_cast<double>(v[i]);
  }
}

// Activations and composition from interpolated raw values in ws.raw.
inline void activate(const VoxelField& field, const Vec3& d, SampleWorkspace& ws) {
  const auto& lay = field.layout();
  const auto& flags = field.flags();
  const std::size_t k_count = lay.endmembers, bands = lay.bands;
  const double* raw = ws.raw.data();

  ws.density = field.density_scale() * softplus(raw[lay.density()]);

  const std::span<const double> logits(raw + lay.abundance(), k_count);
  if (flags.constrained) {
    softmax_into(logits, field.tau(), ws.abundance);
  } else {
    std::copy(logits.begin(), logits.end(), ws.abundance.begin());
  }
  for (std::size_t k = 0; k < k_count; ++k) ws.scaling[k] = flags.scaling ? sigmoid_gate(raw[lay.scaling() + k]) : 1.0;
  ws.tint = flags.specular ? sigmoid_gate(raw[lay.tint()]) : 0.0;

  ws.basis = sh_basis(d);
  const double* sh = raw + lay.specular();
  for (std::size_t b = 0; b < bands; ++b) {
    double z = 0.0;
    for (std::size_t m = 0; m < kShCoeffs; ++m) z += sh[b * kShCoeffs + m] * ws.basis[m];
    ws.specular[b] = sigmoid_gate(z);
  }

  const auto& e = field.endmembers();
  std::fill(ws.diffuse.begin(), ws.diffuse.end(), 0.0);
  for (std::size_t k = 0; k < k_count; ++k) {
    const double w = ws.scaling[k] * ws.abundance[k];
    for (std::size_t b = 0; b < bands; ++b) ws.diffuse[b] += e(b, k) * w;
  }
  for (std::size_t b = 0; b < bands; ++b) {
    const double c = ws.diffuse[b] + ws.tint * ws.specular[b];
    ws.radiance_active[b] = c >= 0.0;
    ws.radiance[b] = std::max(0.0, c);
  }
}

inline void add_to(std::span<double> dst, std::span<const double> src) {
  if (src.empty()) return;
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

// Backward through activate(). grad_raw (P) and grad_endmembers (B*K) are
// overwritten and accumulated into, respectively.
inline void activate_backward(const VoxelField& field, SampleWorkspace& ws, double g_density,
                              std::span<const double> g_abundance_in, std::span<const double> g_scaling_in,
                              double g_tint, std::span<const double> g_specular_in,
                              std::span<const double> g_diffuse_in, std::span<const double> g_radiance,
                              std::span<double> grad_raw, std::span<double> grad_endmembers) {
  const auto& lay = field.layout();
  const auto& flags = field.flags();
  const std::size_t k_count = lay.endmembers, bands = lay.bands;
  const double* raw = ws.raw.data();
  std::fill(grad_raw.begin(), grad_raw.end(), 0.0);

  auto& gd = ws.g_diffuse;
  auto& gs = ws.g_specular;
  auto& ga = ws.g_abundance;
  auto& gsc = ws.g_scaling;
  std::fill(gd.begin(), gd.end(), 0.0);
  std::fill(gs.begin(), gs.end(), 0.0);
  std::fill(ga.begin(), ga.end(), 0.0);
  std::fill(gsc.begin(), gsc.end(), 0.0);
  add_to(gd, g_diffuse_in);
  add_to(gs, g_specular_in);
  add_to(ga, g_abundance_in);
  add_to(gsc, g_scaling_in);

  if (!g_radiance.empty()) {
    for (std::size_t b = 0; b < bands; ++b) {
      if (!ws.radiance_active[b]) continue;
      gd[b] += g_radiance[b];
      gs[b] += g_radiance[b] * ws.tint;
      g_tint += g_radiance[b] * ws.specular[b];
    }
  }

  // diffuse = E diag(s) a
  const auto& e = field.endmembers();
  for (std::size_t k = 0; k < k_count; ++k) {
    double proj = 0.0;
    for (std::size_t b = 0; b < bands; ++b) proj += e(b, k) * gd[b];
    ga[k] += ws.scaling[k] * proj;
    gsc[k] += ws.abundance[k] * proj;
    if (!grad_endmembers.empty()) {
      const double w = ws.scaling[k] * ws.abundance[k];
      for (std::size_t b = 0; b < bands; ++b) grad_endmembers[k * bands + b] += gd[b] * w;
    }
  }

  if (flags.constrained) {
    double mean = 0.0;
    for (std::size_t k = 0; k < k_count; ++k) mean += ws.abundance[k] * ga[k];
    for (std::size_t k = 0; k < k_count; ++k)
      grad_raw[lay.abundance() + k] = ws.abundance[k] * (ga[k] - mean) / field.tau();
  } else {
    for (std::size_t k = 0; k < k_count; ++k) grad_raw[lay.abundance() + k] = ga[k];
  }
  if (flags.scaling) {
    for (std::size_t k = 0; k < k_count; ++k)
      grad_raw[lay.scaling() + k] = gsc[k] * ws.scaling[k] * (1.0 - ws.scaling[k]);
  }
  if (flags.specular) grad_raw[lay.tint()] = g_tint * ws.tint * (1.0 - ws.tint);

  for (std::size_t b = 0; b < bands; ++b) {
    const double gz = gs[b] * ws.specular[b] * (1.0 - ws.specular[b]);
    if (gz == 0.0) continue;
    for (std::size_t m = 0; m < kShCoeffs; ++m) grad_raw[lay.specular() + b * kShCoeffs + m] = gz * ws.basis[m];
  }

  grad_raw[lay.density()] = g_density * field.density_scale() * sigmoid_gate(raw[lay.density()]);
}

inline void check_direction(const Vec3& d) {
  const double n = norm(d);
  if (!(std::abs(n - 1.0) <= 1e-6)) {
    throw UsageError("view direction must have unit norm (|d| = " + std::to_string(n) + ")");
  }
}

inline void check_corners_finite(const VoxelField& field, const Corners& c) {
  for (std::size_t corner = 0; corner < 8; ++corner) {
    for (float v : field.voxel(c.index[corner])) {
      if (!std::isfinite(v)) {
        const auto ijk = field.voxel_coords(c.index[corner]);
        throw NumericError("non-finite parameter in voxel " + std::to_string(c.index[corner]) + " (" +
                           std::to_string(ijk[0]) + "," + std::to_string(ijk[1]) + "," + std::to_string(ijk[2]) + ")");
      }
    }
  }
}

inline void fill_outside(const VoxelField& field, SampleWorkspace& ws) {
  ws.density = 0.0;
  std::fill(ws.abundance.begin(), ws.abundance.end(), 1.0 / static_cast<double>(field.endmember_count()));
  std::fill(ws.scaling.begin(), ws.scaling.end(), 0.5);
  ws.tint = 0.0;
  std::fill(ws.specular.begin(), ws.specular.end(), 0.0);
  std::fill(ws.diffuse.begin(), ws.diffuse.end(), 0.0);
  std::fill(ws.radiance.begin(), ws.radiance.end(), 0.0);
  std::fill(ws.radiance_active.begin(), ws.radiance_active.end(), 0);
}

}  // namespace detail

/// Forward query into a caller-owned workspace; returns the stencil used.
inline Corners sample_into(const VoxelField& field, const Vec3& x, const Vec3& d, SampleWorkspace& ws) {
  const Corners c = locate(field, x);
  if (!c.inside) {
    detail::fill_outside(field, ws);
    return c;
  }
  detail::gather(field, c, ws.raw);
  detail::activate(field, d, ws);
  return c;
}

inline PointSample sample(const VoxelField& field, const Vec3& x, const Vec3& d) {
  detail::check_direction(d);
  SampleWorkspace ws(field);
  const Corners c = locate(field, x);
  if (c.inside) {
    detail::check_corners_finite(field, c);
    detail::gather(field, c, ws.raw);
    detail::activate(field, d, ws);
  } else {
    detail::fill_outside(field, ws);
  }
  PointSample s;
  s.density = ws.density;
  s.abundance.weights = ws.abundance;
  s.scaling.scales = ws.scaling;
  s.tint = ws.tint;
  s.specular = Spectrum(ws.specular);
  s.diffuse = Spectrum(ws.diffuse);
  // Outside the grid there is nothing to compose, but keep radiance = diffuse + h c_s.
  s.radiance = Spectrum(ws.radiance);
  return s;
}

inline SampleGradient sample_backward(const VoxelField& field, const Vec3& x, const Vec3& d, const PointSampleGrad& g) {
  detail::check_direction(d);
  SampleGradient out;
  out.raw.assign(field.params_per_voxel(), 0.0);
  out.endmembers.assign(field.band_count() * field.endmember_count(), 0.0);
  SampleWorkspace ws(field);
  out.corners = locate(field, x);
  if (!out.corners.inside) return out;
  detail::check_corners_finite(field, out.corners);
  detail::gather(field, out.corners, ws.raw);
  detail::activate(field, d, ws);
  detail::activate_backward(field, ws, g.density, g.abundance, g.scaling, g.tint, g.specular, g.diffuse, g.radiance,
                            out.raw, out.endmembers);
  return out;
}

/// Returns a copy of the field with endmember column k replaced.
inline VoxelField replace_endmember(const VoxelField& field, std::size_t k, const Spectrum& spectrum) {
  if (k >= field.endmember_count()) {
    throw UsageError("endmember index " + std::to_string(k) + " out of range (K=" +
                     std::to_string(field.endmember_count()) + ")");
  }
  detail::require_dims(field.band_count(), spectrum.size(), "replacement spectrum band count");
  for (std::size_t b = 0; b < spectrum.size(); ++b) {
    if (!(spectrum[b] >= 0.0 && spectrum[b] <= 1.0)) {
      throw UsageError("replacement spectrum value at band " + std::to_string(b) + " is outside [0,1]");
    }
  }
  VoxelField out = field;
  out.endmembers().set_column(k, spectrum);
  return out;
}

// ---------------------------------------------------------------------------
// Gradient accumulation

/// Gradient buffer shaped like the field's trainable parameters.
struct FieldGradient {
  std::vector<double> params;
  std::vector<double> endmembers;

  FieldGradient() = default;
  explicit FieldGradient(const VoxelField& f)
      : params(f.params().size(), 0.0), endmembers(f.band_count() * f.endmember_count(), 0.0) {}

  void zero() {
    std::fill(params.begin(), params.end(), 0.0);
    std::fill(endmembers.begin(), endmembers.end(), 0.0);
  }

  void add(const FieldGradient& o) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i] += o.params[i];
    for (std::size_t i = 0; i < endmembers.size(); ++i) endmembers[i] += o.endmembers[i];
  }
};

enum class AccumulationMode { deterministic, atomic };

/// Adds scale * weight[c] * grad_raw into corner c of the gradient buffer.
inline void scatter(const Corners& c, std::span<const double> grad_raw, double scale, FieldGradient& g,
                    AccumulationMode mode = AccumulationMode::deterministic) {
  const std::size_t p = grad_raw.size();
  for (std::size_t corner = 0; corner < 8; ++corner) {
    const double w = c.weight[corner] * scale;
    if (w == 0.0) continue;
    double* dst = g.params.data() + c.index[corner] * p;
    if (mode == AccumulationMode::deterministic) {
      for (std::size_t i = 0; i < p; ++i) dst[i] += w * grad_raw[i];
    } else {
      for (std::size_t i = 0; i < p; ++i) {
        if (grad_raw[i] != 0.0) std::atomic_ref<double>(dst[i]).fetch_add(w * grad_raw[i], std::memory_order_relaxed);
      }
    }
  }
}

}  // namespace specfield
