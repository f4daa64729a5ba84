#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "specfield/error.hpp"
#include "specfield/speccore.hpp"

namespace specfield {

/// H x W x B image; band-major planes, row-major within a plane.
struct SpectralCube {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t bands = 0;
  std::vector<float> data;

  SpectralCube() = default;
  SpectralCube(std::size_t w, std::size_t h, std::size_t b) : width(w), height(h), bands(b), data(w * h * b, 0.0f) {}

  std::size_t pixel_count() const noexcept { return width * height; }
  float& at(std::size_t band, std::size_t y, std::size_t x) { return data[(band * height + y) * width + x]; }
  float at(std::size_t band, std::size_t y, std::size_t x) const { return data[(band * height + y) * width + x]; }

  Spectrum pixel(std::size_t y, std::size_t x) const {
    Spectrum s(bands);
    for (std::size_t b = 0; b < bands; ++b) s[b] = at(b, y, x);
    return s;
  }
  void set_pixel(std::size_t y, std::size_t x, const Spectrum& s) {
    for (std::size_t b = 0; b < bands; ++b) at(b, y, x) = static_cast<float>(s[b]);
  }

  bool same_shape(const SpectralCube& o) const { return width == o.width && height == o.height && bands == o.bands; }
  bool operator==(const SpectralCube&) const = default;
};

inline void require_same_shape(const SpectralCube& a, const SpectralCube& b, const char* what) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(what) + ": shape " + std::to_string(a.width) + "x" + std::to_string(a.height) + "x" +
                         std::to_string(a.bands) + " vs " + std::to_string(b.width) + "x" + std::to_string(b.height) +
                         "x" + std::to_string(b.bands));
  }
}

inline constexpr std::uint16_t kBackgroundLabel = 65535;

/// Per-pixel material index, or kBackgroundLabel for empty pixels.
struct LabelMap {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint16_t> labels;  // row-major

  LabelMap() = default;
  LabelMap(std::size_t w, std::size_t h, std::uint16_t fill = kBackgroundLabel) : width(w), height(h), labels(w * h, fill) {}

  std::uint16_t& at(std::size_t y, std::size_t x) { return labels[y * width + x]; }
  std::uint16_t at(std::size_t y, std::size_t x) const { return labels[y * width + x]; }
  bool operator==(const LabelMap&) const = default;
};

}  // namespace specfield
