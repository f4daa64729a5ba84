#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace specfield {

// Every consumer of randomness derives its own generator from (seed, stream
// name, index), so enabling one feature never shifts another feature's draws.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline std::uint64_t stream_key(std::string_view name) {
  // FNV-1a
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::mt19937_64 make_rng(std::uint64_t seed, std::string_view stream, std::uint64_t index = 0) {
  const std::uint64_t s = splitmix64(splitmix64(seed ^ stream_key(stream)) + index);
  return std::mt19937_64(s);
}

// Distributions from <random> are implementation-defined; these are not.
inline double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
  return lo + (hi - lo) * uniform01(rng);
}

inline std::uint64_t uniform_index(std::mt19937_64& rng, std::uint64_t n) {
  // Lemire's multiply-shift; bias is negligible for n << 2^64.
  return static_cast<std::uint64_t>((static_cast<unsigned __int128>(rng()) * n) >> 64);
}

inline double normal(std::mt19937_64& rng) {
  // Box-Muller, one output per call.
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

}  // namespace specfield
