#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <string>

#include "specfield/field.hpp"

namespace testing_support {

using namespace specfield;

inline double rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-7});
}

inline Vec3 random_unit(std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  Vec3 v{g(rng), g(rng), g(rng)};
  return normalize(v);
}

inline Vec3 random_point(const Aabb& b, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  return {b.lo.x + (b.hi.x - b.lo.x) * u(rng), b.lo.y + (b.hi.y - b.lo.y) * u(rng),
          b.lo.z + (b.hi.z - b.lo.z) * u(rng)};
}

/// Field with Gaussian raw parameters and uniform [0.05, 0.95] endmembers.
inline VoxelField random_field(GridResolution res, std::size_t k, std::size_t b, std::uint64_t seed,
                               double density_mean = 0.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  std::uniform_real_distribution<double> u(0.05, 0.95);
  VoxelField f(res, Aabb{}, k, b);
  const auto& lay = f.layout();
  for (std::size_t v = 0; v < res.voxels(); ++v) {
    auto p = f.voxel(v);
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = static_cast<float>(i >= lay.specular() ? 0.5 * g(rng) : g(rng));
    p[lay.density()] = static_cast<float>(density_mean + g(rng));
  }
  for (std::size_t kk = 0; kk < k; ++kk)
    for (std::size_t bb = 0; bb < b; ++bb) f.endmembers().set(bb, kk, u(rng));
  return f;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("specfield_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline std::filesystem::path source_dir() { return SPECFIELD_SOURCE_DIR; }

}  // namespace testing_support
