#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "specfield/error.hpp"

namespace specfield {

/// Per-band reflectance or radiance, ascending wavelength.
struct Spectrum {
  std::vector<double> values;

  Spectrum() = default;
  explicit Spectrum(std::size_t bands, double fill = 0.0) : values(bands, fill) {}
  Spectrum(std::initializer_list<double> v) : values(v) {}
  explicit Spectrum(std::vector<double> v) : values(std::move(v)) {}

  std::size_t size() const noexcept { return values.size(); }
  double& operator[](std::size_t i) { return values[i]; }
  double operator[](std::size_t i) const { return values[i]; }
  bool operator==(const Spectrum&) const = default;
};

struct AbundanceVector {
  std::vector<double> weights;
  std::size_t size() const noexcept { return weights.size(); }
  double operator[](std::size_t i) const { return weights[i]; }
};

/// Diagonal of the per-point scaling matrix, post-sigmoid.
struct ScalingVector {
  std::vector<double> scales;
  std::size_t size() const noexcept { return scales.size(); }
  double operator[](std::size_t i) const { return scales[i]; }
};

using Rgb = std::array<double, 3>;

/// B x K matrix of endmember signatures, stored column-major in 32-bit floats.
class EndmemberDictionary {
 public:
  EndmemberDictionary() = default;
  EndmemberDictionary(std::size_t bands, std::size_t count, float fill = 0.0f)
      : bands_(bands), count_(count), data_(bands * count, fill) {
    if (bands == 0 || count == 0) throw UsageError("endmember dictionary needs B >= 1 and K >= 1");
  }

  static EndmemberDictionary from_columns(const std::vector<Spectrum>& columns) {
    if (columns.empty()) throw UsageError("endmember dictionary needs at least one column");
    EndmemberDictionary e(columns.front().size(), columns.size());
    for (std::size_t k = 0; k < columns.size(); ++k) e.set_column(k, columns[k]);
    return e;
  }

  std::size_t band_count() const noexcept { return bands_; }
  std::size_t endmember_count() const noexcept { return count_; }

  double operator()(std::size_t b, std::size_t k) const { return data_[k * bands_ + b]; }
  void set(std::size_t b, std::size_t k, double v) { data_[k * bands_ + b] = static_cast<float>(v); }

  Spectrum column(std::size_t k) const {
    Spectrum s(bands_);
    for (std::size_t b = 0; b < bands_; ++b) s[b] = (*this)(b, k);
    return s;
  }

  void set_column(std::size_t k, const Spectrum& s) {
    detail::require_dims(bands_, s.size(), "endmember column band count");
    for (std::size_t b = 0; b < bands_; ++b) set(b, k, s[b]);
  }

  void clamp_unit() {
    for (auto& v : data_) v = std::clamp(v, 0.0f, 1.0f);
  }

  bool in_unit_range() const {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return v >= 0.0f && v <= 1.0f; });
  }

  std::span<float> raw() noexcept { return data_; }
  std::span<const float> raw() const noexcept { return data_; }

  bool operator==(const EndmemberDictionary&) const = default;

 private:
  std::size_t bands_ = 0;
  std::size_t count_ = 0;
  std::vector<float> data_;
};

enum class GammaPolicy { linear, srgb_gamma };

/// 3 x B projection from spectrum to RGB, row-major.
struct CameraResponse {
  std::size_t bands = 0;
  std::vector<double> matrix;
  GammaPolicy gamma = GammaPolicy::linear;

  double operator()(std::size_t row, std::size_t b) const { return matrix[row * bands + b]; }
  double& operator()(std::size_t row, std::size_t b) { return matrix[row * bands + b]; }

  static CameraResponse identity3() {
    CameraResponse m{3, std::vector<double>(9, 0.0), GammaPolicy::linear};
    for (int i = 0; i < 3; ++i) m(i, i) = 1.0;
    return m;
  }
};

struct LossWeights {
  double lambda_spec = 5.0;
  double lambda_rgb = 1.0;

  void validate() const {
    if (!(lambda_spec >= 0.0) || !(lambda_rgb >= 0.0))
      throw UsageError("loss weights must be nonnegative");
    if (lambda_spec == 0.0 && lambda_rgb == 0.0)
      throw UsageError("lambda_spec and lambda_rgb cannot both be zero");
  }
};

// ---------------------------------------------------------------------------
// Mixing models

inline Spectrum lmm_mix(const EndmemberDictionary& e, const AbundanceVector& a) {
  if (a.size() != e.endmember_count()) {
    throw DimensionError("lmm_mix: dictionary is B=" + std::to_string(e.band_count()) +
                         " x K=" + std::to_string(e.endmember_count()) + " but abundance has K=" +
                         std::to_string(a.size()));
  }
  Spectrum out(e.band_count());
  for (std::size_t k = 0; k < e.endmember_count(); ++k) {
    for (std::size_t b = 0; b < e.band_count(); ++b) out[b] += e(b, k) * a[k];
  }
  return out;
}

/// E * diag(s) * a
inline Spectrum elmm_mix(const EndmemberDictionary& e, const ScalingVector& s, const AbundanceVector& a) {
  if (a.size() != e.endmember_count() || s.size() != e.endmember_count()) {
    throw DimensionError("elmm_mix: dictionary has K=" + std::to_string(e.endmember_count()) +
                         " (B=" + std::to_string(e.band_count()) + ") but abundance has K=" +
                         std::to_string(a.size()) + " and scaling has K=" + std::to_string(s.size()));
  }
  Spectrum out(e.band_count());
  for (std::size_t k = 0; k < e.endmember_count(); ++k) {
    const double w = s[k] * a[k];
    for (std::size_t b = 0; b < e.band_count(); ++b) out[b] += e(b, k) * w;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Activations

inline double sigmoid_gate(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double z = std::exp(x);
  return z / (1.0 + z);
}

inline double softplus(double x) {
  return x > 30.0 ? x : std::log1p(std::exp(x));
}

namespace detail {

// Writes softmax(logits / tau) into out; both spans of length K.
inline void softmax_into(std::span<const double> logits, double tau, std::span<double> out) {
  double peak = -std::numeric_limits<double>::infinity();
  for (double v : logits) peak = std::max(peak, v);
  double total = 0.0;
  for (std::size_t k = 0; k < logits.size(); ++k) {
    out[k] = std::exp((logits[k] - peak) / tau);
    total += out[k];
  }
  for (auto& v : out) v /= total;
}

}  // namespace detail

inline AbundanceVector softmax_abundance(std::span<const double> logits, double tau = 1.0) {
  if (!(tau > 0.0)) throw UsageError("softmax temperature must be positive, got " + std::to_string(tau));
  if (logits.empty()) throw DimensionError("softmax_abundance: empty logit vector");
  for (std::size_t k = 0; k < logits.size(); ++k) {
    if (!std::isfinite(logits[k])) throw NumericError("softmax_abundance: logit " + std::to_string(k) + " is not finite");
  }
  AbundanceVector a{std::vector<double>(logits.size())};
  detail::softmax_into(logits, tau, a.weights);
  return a;
}

/// c_d + h * c_s, clamped at zero.
inline Spectrum dichromatic_combine(const Spectrum& diffuse, const Spectrum& specular, double tint) {
  detail::require_dims(diffuse.size(), specular.size(), "dichromatic_combine band count");
  Spectrum out(diffuse.size());
  for (std::size_t b = 0; b < diffuse.size(); ++b) out[b] = std::max(0.0, diffuse[b] + tint * specular[b]);
  return out;
}

// ---------------------------------------------------------------------------
// Camera response

inline double srgb_encode(double linear) {
  const double x = std::clamp(linear, 0.0, 1.0);
  return x <= 0.0031308 ? 12.92 * x : 1.055 * std::pow(x, 1.0 / 2.4) - 0.055;
}

inline Rgb spectrum_to_rgb(const Spectrum& c, const CameraResponse& m) {
  if (m.bands != c.size() || m.matrix.size() != 3 * m.bands) {
    throw DimensionError("spectrum_to_rgb: response has " + std::to_string(m.bands) +
                         " columns but spectrum has " + std::to_string(c.size()) + " bands");
  }
  Rgb rgb{0.0, 0.0, 0.0};
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t b = 0; b < c.size(); ++b) rgb[r] += m(r, b) * c[b];
  }
  if (m.gamma == GammaPolicy::srgb_gamma) {
    for (auto& v : rgb) v = srgb_encode(v);
  }
  return rgb;
}

namespace detail {

struct CmfRow {
  double nm, x, y, z;
};

inline constexpr CmfRow kCie1931[] = {
#include "specfield/detail/cie1931_2deg_10nm.inc"
};

inline std::array<double, 3> cmf_at(double nm) {
  constexpr std::size_t n = std::size(kCie1931);
  if (nm <= kCie1931[0].nm) return {kCie1931[0].x, kCie1931[0].y, kCie1931[0].z};
  if (nm >= kCie1931[n - 1].nm) return {kCie1931[n - 1].x, kCie1931[n - 1].y, kCie1931[n - 1].z};
  const std::size_t i = static_cast<std::size_t>((nm - kCie1931[0].nm) / 10.0);
  const double t = (nm - kCie1931[i].nm) / 10.0;
  const auto& a = kCie1931[i];
  const auto& b = kCie1931[std::min(i + 1, n - 1)];
  return {a.x + t * (b.x - a.x), a.y + t * (b.y - a.y), a.z + t * (b.z - a.z)};
}

}  // namespace detail

/// Band centres evenly spaced over [lo_nm, hi_nm], inclusive.
inline std::vector<double> band_centers(std::size_t bands, double lo_nm = 450.0, double hi_nm = 650.0) {
  std::vector<double> nm(bands);
  for (std::size_t b = 0; b < bands; ++b) {
    nm[b] = bands == 1 ? 0.5 * (lo_nm + hi_nm) : lo_nm + (hi_nm - lo_nm) * static_cast<double>(b) / static_cast<double>(bands - 1);
  }
  return nm;
}

/// CIE 1931 2-degree CMFs at band centres, XYZ -> linear sRGB (D65), rows
/// rescaled so a flat unit spectrum maps to (1, 1, 1).
inline CameraResponse default_camera_response(std::size_t bands, double lo_nm = 450.0, double hi_nm = 650.0,
                                              GammaPolicy gamma = GammaPolicy::linear) {
  static constexpr double kXyzToSrgb[3][3] = {
      {3.2404542, -1.5371385, -0.4985314},
      {-0.9692660, 1.8760108, 0.0415560},
      {0.0556434, -0.2040259, 1.0572252},
  };
  CameraResponse m{bands, std::vector<double>(3 * bands, 0.0), gamma};
  const auto nm = band_centers(bands, lo_nm, hi_nm);
  for (std::size_t b = 0; b < bands; ++b) {
    const auto xyz = detail::cmf_at(nm[b]);
    for (std::size_t r = 0; r < 3; ++r) {
      m(r, b) = kXyzToSrgb[r][0] * xyz[0] + kXyzToSrgb[r][1] * xyz[1] + kXyzToSrgb[r][2] * xyz[2];
    }
  }
  for (std::size_t r = 0; r < 3; ++r) {
    double row_sum = 0.0;
    for (std::size_t b = 0; b < bands; ++b) row_sum += m(r, b);
    if (std::abs(row_sum) < 1e-12) throw NumericError("camera response row " + std::to_string(r) + " sums to zero");
    for (std::size_t b = 0; b < bands; ++b) m(r, b) /= row_sum;
  }
  return m;
}

/// Text format: "3 B" then three rows of B values.
inline CameraResponse read_camera_response(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open camera response file " + path);
  std::size_t rows = 0, bands = 0;
  if (!(in >> rows >> bands)) throw UsageError(path + ": missing '3 B' header");
  if (rows != 3) throw UsageError(path + ": camera response must have 3 rows, header says " + std::to_string(rows));
  if (bands == 0) throw UsageError(path + ": band count must be positive");
  CameraResponse m{bands, std::vector<double>(3 * bands), GammaPolicy::linear};
  for (std::size_t i = 0; i < 3 * bands; ++i) {
    if (!(in >> m.matrix[i])) throw UsageError(path + ": expected " + std::to_string(3 * bands) + " values, read " + std::to_string(i));
    if (!std::isfinite(m.matrix[i])) throw NumericError(path + ": non-finite entry at index " + std::to_string(i));
  }
  return m;
}

inline void write_camera_response(const CameraResponse& m, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write camera response file " + path);
  out.precision(17);
  out << "3 " << m.bands << '\n';
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t b = 0; b < m.bands; ++b) out << (b ? " " : "") << m(r, b);
    out << '\n';
  }
  if (!out) throw IoError("failed writing " + path);
}

inline double spectral_angle(const Spectrum& a, const Spectrum& b) {
  detail::require_dims(a.size(), b.size(), "spectral_angle band count");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na <= 0.0 || nb <= 0.0) throw NumericError("spectral_angle: zero spectrum");
  return std::acos(std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0));
}

}  // namespace specfield
