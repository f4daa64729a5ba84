#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "specfield/cube.hpp"
#include "specfield/error.hpp"

namespace specfield {

inline constexpr double kPsnrCap = 99.0;

inline double mse(const SpectralCube& pred, const SpectralCube& gt) {
  require_same_shape(pred, gt, "mse");
  if (gt.data.empty()) throw DimensionError("mse: empty cube");
  double total = 0.0;
  for (std::size_t i = 0; i < gt.data.size(); ++i) {
    const double d = static_cast<double>(pred.data[i]) - static_cast<double>(gt.data[i]);
    total += d * d;
  }
  return total / static_cast<double>(gt.data.size());
}

inline double psnr_from_mse(double m) {
  if (m <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / m));
}

/// Global-MSE PSNR with peak 1, capped at 99 dB.
inline double psnr(const SpectralCube& pred, const SpectralCube& gt) { return psnr_from_mse(mse(pred, gt)); }

inline std::vector<double> psnr_per_band(const SpectralCube& pred, const SpectralCube& gt) {
  require_same_shape(pred, gt, "psnr_per_band");
  const std::size_t plane = gt.pixel_count();
  std::vector<double> out(gt.bands);
  for (std::size_t b = 0; b < gt.bands; ++b) {
    double total = 0.0;
    for (std::size_t i = 0; i < plane; ++i) {
      const double d = static_cast<double>(pred.data[b * plane + i]) - static_cast<double>(gt.data[b * plane + i]);
      total += d * d;
    }
    out[b] = psnr_from_mse(total / static_cast<double>(plane));
  }
  return out;
}

inline double rmse(const SpectralCube& pred, const SpectralCube& gt) { return std::sqrt(mse(pred, gt)); }

struct SamResult {
  double mean = 0.0;          // radians
  std::size_t skipped = 0;    // pixels with a zero spectrum in either input
};

inline SamResult sam(const SpectralCube& pred, const SpectralCube& gt) {
  require_same_shape(pred, gt, "sam");
  const std::size_t plane = gt.pixel_count();
  double total = 0.0;
  std::size_t used = 0;
  SamResult r;
  for (std::size_t i = 0; i < plane; ++i) {
    double dot = 0.0, np = 0.0, ng = 0.0;
    for (std::size_t b = 0; b < gt.bands; ++b) {
      const double p = pred.data[b * plane + i], g = gt.data[b * plane + i];
      dot += p * g;
      np += p * p;
      ng += g * g;
    }
    if (np <= 0.0 || ng <= 0.0) {
      ++r.skipped;
      continue;
    }
    total += std::acos(std::clamp(dot / std::sqrt(np * ng), -1.0, 1.0));
    ++used;
  }
  if (used == 0) throw NumericError("sam: every pixel has a zero spectrum");
  r.mean = total / static_cast<double>(used);
  return r;
}

struct MraeMap {
  std::size_t width = 0, height = 0;
  std::vector<double> values;  // row-major, per-pixel band-averaged relative error
  double mean = 0.0;

  /// Linear scaling of [lo, hi] onto [0, 255].
  std::vector<std::uint8_t> quantize(double lo, double hi) const {
    if (!(hi > lo)) throw UsageError("heatmap range must satisfy lo < hi");
    std::vector<std::uint8_t> out(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double t = std::clamp((values[i] - lo) / (hi - lo), 0.0, 1.0);
      out[i] = static_cast<std::uint8_t>(std::lround(t * 255.0));
    }
    return out;
  }
};

inline MraeMap mrae_map(const SpectralCube& pred, const SpectralCube& gt, double eps = 1e-6) {
  require_same_shape(pred, gt, "mrae_map");
  const std::size_t plane = gt.pixel_count();
  MraeMap m{gt.width, gt.height, std::vector<double>(plane, 0.0), 0.0};
  double total = 0.0;
  for (std::size_t i = 0; i < plane; ++i) {
    double acc = 0.0;
    for (std::size_t b = 0; b < gt.bands; ++b) {
      const double p = pred.data[b * plane + i], g = gt.data[b * plane + i];
      acc += std::abs(p - g) / (g + eps);
    }
    m.values[i] = acc / static_cast<double>(gt.bands);
    total += m.values[i];
  }
  m.mean = plane ? total / static_cast<double>(plane) : 0.0;
  return m;
}

// ---------------------------------------------------------------------------
// SSIM

namespace detail {

inline std::array<double, 11> gaussian_window_1d() {
  std::array<double, 11> w{};
  double total = 0.0;
  for (int i = 0; i < 11; ++i) {
    const double x = i - 5;
    w[static_cast<std::size_t>(i)] = std::exp(-x * x / (2.0 * 1.5 * 1.5));
    total += w[static_cast<std::size_t>(i)];
  }
  for (auto& v : w) v /= total;
  return w;
}

// Valid-mode separable filtering of an h x w plane; output (h-10) x (w-10).
inline std::vector<double> filter_valid(const std::vector<double>& img, std::size_t w, std::size_t h) {
  static const auto g = gaussian_window_1d();
  const std::size_t ow = w - 10, oh = h - 10;
  std::vector<double> rows(h * ow, 0.0), out(oh * ow, 0.0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double s = 0.0;
      for (std::size_t i = 0; i < 11; ++i) s += g[i] * img[y * w + x + i];
      rows[y * ow + x] = s;
    }
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double s = 0.0;
      for (std::size_t i = 0; i < 11; ++i) s += g[i] * rows[(y + i) * ow + x];
      out[y * ow + x] = s;
    }
  return out;
}

}  // namespace detail

/// Mean SSIM per band (11x11 Gaussian, sigma 1.5, L = 1), averaged over bands.
inline double ssim(const SpectralCube& pred, const SpectralCube& gt) {
  require_same_shape(pred, gt, "ssim");
  if (gt.width < 11 || gt.height < 11) {
    throw DimensionError("ssim: image " + std::to_string(gt.width) + "x" + std::to_string(gt.height) +
                         " is smaller than the 11x11 window");
  }
  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const std::size_t w = gt.width, h = gt.height, plane = w * h;
  double band_total = 0.0;
  for (std::size_t b = 0; b < gt.bands; ++b) {
    std::vector<double> x(plane), y(plane), xx(plane), yy(plane), xy(plane);
    for (std::size_t i = 0; i < plane; ++i) {
      x[i] = pred.data[b * plane + i];
      y[i] = gt.data[b * plane + i];
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    const auto mx = detail::filter_valid(x, w, h), my = detail::filter_valid(y, w, h);
    const auto sxx = detail::filter_valid(xx, w, h), syy = detail::filter_valid(yy, w, h),
               sxy = detail::filter_valid(xy, w, h);
    double total = 0.0;
    for (std::size_t i = 0; i < mx.size(); ++i) {
      const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cov = sxy[i] - mx[i] * my[i];
      total += ((2 * mx[i] * my[i] + c1) * (2 * cov + c2)) / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
    }
    band_total += total / static_cast<double>(mx.size());
  }
  return band_total / static_cast<double>(gt.bands);
}

// ---------------------------------------------------------------------------
// Report

struct MetricReport {
  double psnr = 0.0;
  double ssim = 0.0;
  double sam = 0.0;
  double rmse = 0.0;
  double mrae = 0.0;
  std::vector<double> psnr_per_band;

  std::string to_text() const {
    std::ostringstream out;
    out.precision(10);
    out << "psnr = " << psnr << "\nssim = " << ssim << "\nsam = " << sam << "\nrmse = " << rmse << "\nmrae = " << mrae
        << '\n';
    for (std::size_t b = 0; b < psnr_per_band.size(); ++b) out << "psnr_band_" << b << " = " << psnr_per_band[b] << '\n';
    return out.str();
  }

  std::string to_record() const {
    nlohmann::json j{{"psnr", psnr}, {"ssim", ssim}, {"sam", sam}, {"rmse", rmse}, {"mrae", mrae}};
    if (!psnr_per_band.empty()) j["psnr_per_band"] = psnr_per_band;
    return j.dump();
  }

  /// Accumulates another view's report for averaging.
  void accumulate(const MetricReport& o) {
    psnr += o.psnr;
    ssim += o.ssim;
    sam += o.sam;
    rmse += o.rmse;
    mrae += o.mrae;
  }
  void divide(double n) {
    psnr /= n;
    ssim /= n;
    sam /= n;
    rmse /= n;
    mrae /= n;
  }
};

inline MetricReport evaluate(const SpectralCube& pred, const SpectralCube& gt, bool per_band = false, double eps = 1e-6) {
  MetricReport r;
  r.psnr = psnr(pred, gt);
  r.ssim = gt.width >= 11 && gt.height >= 11 ? ssim(pred, gt) : std::numeric_limits<double>::quiet_NaN();
  r.sam = sam(pred, gt).mean;
  r.rmse = rmse(pred, gt);
  r.mrae = mrae_map(pred, gt, eps).mean;
  if (per_band) r.psnr_per_band = psnr_per_band(pred, gt);
  return r;
}

}  // namespace specfield
